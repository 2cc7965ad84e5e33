use std::path::PathBuf;

use dqgrad::engines::Algorithm;
use dqgrad::harness::{
    emit_csv, emit_svg, run_sweep, to_csv, to_svg, ExperimentConfig, HarnessError, SweepRow, SweepTable, CSV_HEADER,
};

fn small_config(trials: usize, rates: &[u32]) -> ExperimentConfig {
    let rates: Vec<String> = rates.iter().map(u32::to_string).collect();
    ExperimentConfig::from_toml(&format!(
        r#"
algorithms = ["gd", "dq-gd", "nq-gd"]
rates = [{}]
trials = {trials}
seed = 42
overload = "saturate"
[problem]
kind = "gaussian"
m = 64
n = 16
kappa = 5.0
"#,
        rates.join(", ")
    ))
    .unwrap()
}

fn parse_csv(text: &str) -> Vec<(String, u32, [f64; 6])> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 8, "{l}");
            let mut v = [0.0; 6];
            for (slot, s) in v.iter_mut().zip(&f[2..]) {
                *slot = s.parse().unwrap();
            }
            (f[0].to_string(), f[1].parse().unwrap(), v)
        })
        .collect()
}

#[test]
fn identical_config_gives_identical_csv() {
    let cfg = small_config(1, &[3, 6]);
    let a = to_csv(&run_sweep(&cfg).unwrap());
    let b = to_csv(&run_sweep(&cfg).unwrap());
    assert_eq!(a, b);

    let cfg = small_config(8, &[4, 8]);
    assert_eq!(to_csv(&run_sweep(&cfg).unwrap()), to_csv(&run_sweep(&cfg).unwrap()));
}

#[test]
fn csv_round_trips_every_value() {
    let table = run_sweep(&small_config(4, &[2, 5, 9])).unwrap();
    let parsed = parse_csv(&to_csv(&table));
    assert_eq!(parsed.len(), table.rows.len());
    for (row, (algo, rate, v)) in table.rows.iter().zip(&parsed) {
        assert_eq!(&row.algo.to_string(), algo);
        assert_eq!(row.rate, *rate);
        let expect = [
            row.emp_mean,
            row.emp_p05,
            row.emp_p95,
            row.bound,
            row.unquantized_sigma,
            row.converse,
        ];
        for (a, b) in expect.iter().zip(v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

fn one_row() -> SweepTable {
    SweepTable {
        kappa: 4.0,
        dim: 2,
        rows: vec![SweepRow {
            algo: Algorithm::DqGd,
            rate: 3,
            emp_mean: 0.61,
            emp_p05: 0.6,
            emp_p95: 0.62,
            bound: 0.6,
            unquantized_sigma: 0.6,
            converse: 0.6,
            trials: vec![0.61],
        }],
    }
}

#[test]
fn single_row_table_writes_header_and_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    emit_csv(&one_row(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format!("{CSV_HEADER}\ndq-gd,3,0.61,0.6,0.62,0.6,0.6,0.6\n"));
}

#[test]
fn empty_table_and_bad_path_are_errors() {
    let empty = SweepTable {
        kappa: 1.0,
        dim: 1,
        rows: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_csv(&empty, dir.path().join("x.csv")).is_err());
    let bad = dir.path().join("missing").join("x.csv");
    assert!(matches!(emit_csv(&one_row(), &bad), Err(HarnessError::Io { .. })));
    assert!(matches!(emit_svg(&one_row(), &bad), Err(HarnessError::Io { .. })));
}

#[test]
fn svg_is_well_formed_with_series_and_legend() {
    let table = run_sweep(&small_config(2, &[1, 3, 5, 7])).unwrap();
    let svg = to_svg(&table);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
    // empirical and bound line per algorithm
    assert_eq!(polylines.len(), 6);
    let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    for algo in ["gd", "dq-gd", "nq-gd", "dq-gd bound"] {
        assert!(texts.contains(&algo), "legend entry {algo}");
    }
    // every plotted point stays inside the frame, so values are clipped at 1
    for p in polylines {
        for pt in p.attribute("points").unwrap().split(' ') {
            let y: f64 = pt.split(',').nth(1).unwrap().parse().unwrap();
            assert!((20.0..=390.0).contains(&y), "{y}");
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plot.svg");
    emit_svg(&table, &path).unwrap();
    roxmltree::Document::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
}

#[test]
fn unquantized_column_is_constant_and_dq_gd_respects_bound() {
    let table = run_sweep(&small_config(10, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])).unwrap();
    let gd = table.series(Algorithm::Gd);
    assert!(gd
        .iter()
        .all(|r| r.emp_mean == gd[0].emp_mean && r.trials == gd[0].trials));
    for r in table.series(Algorithm::DqGd) {
        assert!(
            r.emp_mean <= r.bound + 0.02,
            "R={} {} > {}",
            r.rate,
            r.emp_mean,
            r.bound
        );
        assert!(r.emp_p05 <= r.emp_mean && r.emp_mean <= r.emp_p95);
    }
}

#[test]
fn mean_factor_is_non_increasing_in_rate() {
    let table = run_sweep(&small_config(20, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])).unwrap();
    for algo in [Algorithm::DqGd, Algorithm::NqGd] {
        let s = table.series(algo);
        for w in s.windows(2) {
            assert!(w[1].emp_mean <= w[0].emp_mean + 0.01, "{algo} R={}", w[1].rate);
        }
    }
}

#[test]
fn mtx_problem_runs_through_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mtx = dir.path().join("a.mtx");
    let mut text = String::from("%%MatrixMarket matrix coordinate real general\n% small test matrix\n12 4 16\n");
    for j in 1..=4 {
        text.push_str(&format!("{j} {j} {}\n", 1.0 + j as f64 * 0.5));
    }
    for i in 5..=12 {
        text.push_str(&format!("{i} {} 0.3\n", (i % 4) + 1));
        if i <= 8 {
            text.push_str(&format!("{i} {} -0.2\n", ((i + 1) % 4) + 1));
        }
    }
    std::fs::write(&mtx, text).unwrap();
    let cfg_path = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg_path,
        r#"
algorithms = ["gd", "dq-gd"]
rates = [4, 8]
trials = 3
[problem]
kind = "mtx"
path = "a.mtx"
[output]
csv = "out.csv"
"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.output.csv, Some(dir.path().join("out.csv")));
    let table = run_sweep(&cfg).unwrap();
    assert_eq!(table.dim, 4);
    assert_eq!(table.rows.len(), 4);
}

#[test]
fn interpolation_sweep_uses_sum_rate() {
    let cfg = ExperimentConfig::from_toml(
        r#"
algorithms = ["gd", "nq-gd"]
rates = [6, 24]
trials = 3
allocation = "waterfilling"
overload = "saturate"
[problem]
kind = "interpolation"
n = 4
[[problem.workers]]
rows = 12
kappa = 2.0
smoothness = 4.0
[[problem.workers]]
rows = 12
kappa = 2.0
smoothness = 1.0
"#,
    )
    .unwrap();
    let table = run_sweep(&cfg).unwrap();
    let lo = table.row(Algorithm::NqGd, 6).unwrap();
    let hi = table.row(Algorithm::NqGd, 24).unwrap();
    assert!(hi.emp_mean < lo.emp_mean);
    assert!(hi.emp_mean <= hi.bound + 0.02);
}

#[test]
fn multi_worker_problems_reject_single_worker_algorithms() {
    let err = ExperimentConfig::from_toml(
        r#"
algorithms = ["dq-gd"]
rates = [4]
[problem]
kind = "interpolation"
n = 4
[[problem.workers]]
rows = 8
kappa = 2.0
smoothness = 1.0
"#,
    )
    .unwrap_err();
    assert!(err.to_string().contains("nq-gd"));
}

#[test]
fn missing_matrix_file_is_reported() {
    let cfg = ExperimentConfig::from_toml(
        r#"
algorithms = ["gd"]
rates = [4]
[problem]
kind = "mtx"
path = "/definitely/not/here.mtx"
"#,
    )
    .unwrap();
    assert!(run_sweep(&cfg).unwrap_err().to_string().contains("here.mtx"));
}

#[test]
fn shipped_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}
