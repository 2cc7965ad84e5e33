use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dqgrad::bounds::{self, ConverseFamily, RateThreshold};
use dqgrad::engines::{integer_rates, waterfill, Algorithm, Method};
use dqgrad::harness::{emit_csv, emit_svg, run_sweep, to_csv, verify, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "dqgrad",
    version,
    about = "Quantized gradient methods: sweeps, bounds and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rate sweep from a TOML config and write CSV/SVG.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Overrides `output.svg`.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Print the analytic contraction factors against rate.
    Bounds {
        #[arg(long)]
        kappa: f64,
        /// Dimension; the scalar quantizer has covering efficiency sqrt(n).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        rmin: u32,
        #[arg(long, default_value_t = 16)]
        rmax: u32,
    },
    /// Run the invariant suite: worst-case equality, tracking, containment.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Waterfilling rate allocation for local smoothness constants.
    Waterfill {
        /// Comma-separated `L_k`.
        #[arg(long = "L", value_delimiter = ',', required = true)]
        l: Vec<f64>,
        /// Total rate.
        #[arg(long = "R")]
        r: f64,
    },
}

fn sweep(config: PathBuf, csv: Option<PathBuf>, svg: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    let table = run_sweep(&cfg)?;
    let csv = csv.or(cfg.output.csv.clone());
    let svg = svg.or(cfg.output.svg.clone());
    match &csv {
        Some(p) => {
            emit_csv(&table, p)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{}", to_csv(&table)),
    }
    if let Some(p) = &svg {
        emit_svg(&table, p)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn threshold(t: RateThreshold) -> String {
    match t {
        RateThreshold::Bits(b) => format!("{b:.4}"),
        RateThreshold::OneStep => "none".into(),
    }
}

fn print_bounds(kappa: f64, n: usize, rmin: u32, rmax: u32) -> Result<()> {
    if kappa.is_nan() || kappa < 1.0 || n == 0 || rmin > rmax {
        bail!("need kappa >= 1, n >= 1 and rmin <= rmax");
    }
    let rho = (n as f64).sqrt();
    for m in [Method::Gd, Method::Agd, Method::Hb] {
        let t = bounds::method_thresholds(m, kappa, rho);
        println!(
            "# {m:?}: sigma={:.6} R1={:.4} R2={}",
            bounds::sigma(m, kappa),
            t.r1,
            threshold(t.r2)
        );
    }
    let algos = [Algorithm::DqGd, Algorithm::DqAgd, Algorithm::DqHb, Algorithm::NqGd];
    print!("R");
    for a in algos {
        print!(",{a}");
    }
    println!(",converse_gd,converse_hb");
    for r in rmin..=rmax {
        let rate = f64::from(r);
        print!("{r}");
        for a in algos {
            print!(",{}", bounds::clip(bounds::achievable_rate(a, kappa, rho, rate)));
        }
        println!(
            ",{},{}",
            bounds::converse(ConverseFamily::of(Algorithm::DqGd), kappa, rate),
            bounds::converse(ConverseFamily::of(Algorithm::DqHb), kappa, rate)
        );
    }
    Ok(())
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Sweep { config, csv, svg } => sweep(config, csv, svg)?,
        Command::Bounds { kappa, n, rmin, rmax } => print_bounds(kappa, n, rmin, rmax)?,
        Command::Verify { seed } => {
            let checks = verify(seed);
            let mut all = true;
            for c in &checks {
                all &= c.passed;
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(all);
        }
        Command::Waterfill { l, r } => {
            let alloc = waterfill(&l, r)?;
            println!("nu = {}", alloc.level);
            println!("rates = {:?}", alloc.rates);
            if r.fract() == 0.0 && r >= 0.0 {
                println!("integer rates = {:?}", integer_rates(&alloc.rates, r as u32));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
