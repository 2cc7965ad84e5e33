use std::process::{Command, Output};

fn dqgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dqgrad")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bounds_prints_dq_gd_curve() {
    let o = dqgrad(&["bounds", "--kappa", "4", "--n", "1", "--rmax", "8"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("R,dq-gd,"));
    assert_eq!(rows.len(), 9);
    for (r, line) in (1..=8).zip(&rows[1..]) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        let expect = 0.6f64.max((-(r as f64)).exp2());
        assert!((v - expect).abs() < 1e-12, "R={r}: {v}");
    }
}

#[test]
fn waterfill_example() {
    let o = dqgrad(&["waterfill", "--L", "4,1", "--R", "2"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("nu = 1\n"), "{out}");
    assert!(out.contains("rates = [2.0, 0.0]"), "{out}");
    assert!(out.contains("integer rates = [2, 0]"), "{out}");
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let o = dqgrad(&["bounds", "--kappa", "4", "--n", "2", "--bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(!dqgrad(&["frobnicate"]).status.success());
}

#[test]
fn sweep_on_missing_config_fails_with_message() {
    let o = dqgrad(&["sweep", "--config", "/no/such/config.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.toml"));
}

#[test]
fn sweep_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        r#"
algorithms = ["gd", "dq-gd"]
rates = [3, 6]
trials = 2
[problem]
kind = "gaussian"
m = 32
n = 8
kappa = 4.0
[output]
csv = "out.csv"
svg = "out.svg"
"#,
    )
    .unwrap();
    let o = dqgrad(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(std::fs::read_to_string(dir.path().join("out.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn verify_passes() {
    let o = dqgrad(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
