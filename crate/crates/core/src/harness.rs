//! Experiment orchestration: single runs, contraction estimates, rate sweeps
//! over many trials, CSV/SVG emission and a quick invariant check suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, ConverseFamily, EnvelopeConstants};
use crate::engines::{
    integer_rates, optimal_hyperparams, waterfill, Algorithm, Codec, EngineError, HyperParams, Method, OverloadPolicy,
    QuantizedEngine, RangeSchedule, Unquantized,
};
use crate::problems::{
    gaussian_ls, instance_from_matrix_with, make_interpolation_problem, make_worst_case_gd, read_matrix_market,
    Instance, Matrix, MultiWorkerProblem, NormalSampler, Objective, ProblemError, WorkerSpec,
};
use crate::quantizer::QuantizerSpec;
use crate::scalar::distance;

/// Minimum number of above-floor distances needed for an estimate.
pub const MIN_ESTIMATE_POINTS: usize = 10;
/// Runs stop once the distance exceeds this multiple of `max(1, D)`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("trial {trial}, {algo} at R={rate}: {source}")]
    Trial {
        trial: usize,
        algo: Algorithm,
        rate: u32,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("only {points} iterations above the precision floor, need {MIN_ESTIMATE_POINTS}")]
    InsufficientData { points: usize },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Stopping and schedule options shared by every run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub t_max: usize,
    /// Relative precision floor: stop when `d_t < floor * max(1, D)`.
    pub floor: f64,
    pub hb_alpha: f64,
    pub policy: OverloadPolicy,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            t_max: 10_000,
            floor: 1e-13,
            hb_alpha: 0.0,
            policy: OverloadPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Floor,
    Budget,
    Diverged,
}

/// Per-iteration trace of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algo: Algorithm,
    /// `None` for unquantized runs.
    pub rate: Option<u32>,
    /// `||x_t - x*||` for `t = 0..=T`.
    pub distances: Vec<f64>,
    /// `||y_t - x*||` for AGD variants, empty otherwise.
    pub secondary: Vec<f64>,
    /// Quantizer input norms `||u_t||`; with several workers, the worker
    /// closest to overload.
    pub input_norms: Vec<f64>,
    pub ranges: Vec<f64>,
    pub bits: Vec<usize>,
    pub overloads: usize,
    pub stop: StopReason,
    pub floor: f64,
}

impl RunRecord {
    pub fn terminal(&self) -> usize {
        self.distances.len() - 1
    }

    pub fn estimate(&self) -> Result<f64, HarnessError> {
        estimate_contraction(&self.distances, self.floor)
    }

    /// `(d_T / d_0)^(1/T)` over the above-floor prefix.
    pub fn root_estimate(&self) -> Option<f64> {
        let n = above_floor(&self.distances, self.floor);
        (n >= 2).then(|| (self.distances[n - 1] / self.distances[0]).powf(1.0 / (n - 1) as f64))
    }
}

fn above_floor(d: &[f64], floor: f64) -> usize {
    d.iter().take_while(|&&v| v.is_finite() && v >= floor).count()
}

/// Geometric-mean per-step ratio over the last half of the above-floor
/// iterations, capped at one.
pub fn estimate_contraction(distances: &[f64], floor: f64) -> Result<f64, HarnessError> {
    let points = above_floor(distances, floor);
    if points < MIN_ESTIMATE_POINTS {
        return Err(HarnessError::InsufficientData { points });
    }
    let start = points / 2;
    let end = points - 1;
    let ratio = (distances[end] / distances[start]).powf(1.0 / (end - start) as f64);
    Ok(ratio.min(1.0))
}

fn method_params(inst_l: f64, inst_mu: f64, method: Method) -> Result<HyperParams<f64>, EngineError> {
    optimal_hyperparams(inst_l, inst_mu, method)
}

/// Builds the quantized engine for a single-worker algorithm.
/// `rate = None` runs the lossless surrogate.
pub fn single_worker_engine(
    algo: Algorithm,
    inst: &Instance<f64>,
    rate: Option<u32>,
    opts: &RunOptions,
) -> Result<QuantizedEngine<f64>, HarnessError> {
    let f = &inst.objective;
    let (l, mu, d) = (f.smoothness(), f.strong_convexity(), inst.d);
    let n = inst.dim();
    let method = algo.method();
    let hp = method_params(l, mu, method)?;
    let (codec, a) = match rate {
        Some(r) => {
            let spec = QuantizerSpec::scalar_uniform(n, r).map_err(EngineError::from)?;
            (Codec::Quantized(spec), spec.relative_resolution::<f64>())
        }
        None => (Codec::Exact, 0.0),
    };
    let engine = match algo {
        Algorithm::DqGd => QuantizedEngine::differential(
            Method::Gd,
            hp,
            &inst.x0,
            codec,
            RangeSchedule::dq_gd(l, d, hp.sigma, a),
            opts.policy,
        )?,
        Algorithm::DqAgd => QuantizedEngine::differential(
            Method::Agd,
            hp,
            &inst.x0,
            codec,
            RangeSchedule::dq_agd(l, mu, d, &hp, a),
            opts.policy,
        )?,
        Algorithm::DqHb => QuantizedEngine::differential(
            Method::Hb,
            hp,
            &inst.x0,
            codec,
            RangeSchedule::dq_hb(l, d, &hp, a, opts.hb_alpha),
            opts.policy,
        )?,
        Algorithm::NqGd => {
            let rho = (n as f64).sqrt();
            let sigma = bounds::nq_sigma(l, mu, rho, &[l], &[rate.map_or(f64::INFINITY, f64::from)]);
            QuantizedEngine::naive(
                hp,
                &inst.x0,
                vec![codec],
                vec![RangeSchedule::nq(l, d, sigma)],
                opts.policy,
            )?
        }
        other => return Err(HarnessError::Config(format!("{other} is not a quantized algorithm"))),
    };
    Ok(engine)
}

fn new_record(algo: Algorithm, rate: Option<u32>, d0: f64, floor: f64) -> RunRecord {
    RunRecord {
        algo,
        rate,
        distances: vec![d0],
        secondary: Vec::new(),
        input_norms: Vec::new(),
        ranges: Vec::new(),
        bits: Vec::new(),
        overloads: 0,
        stop: StopReason::Budget,
        floor,
    }
}

/// Pushes `d` and reports whether the run should stop.
fn observe(rec: &mut RunRecord, d: f64, cap: f64) -> bool {
    rec.distances.push(d);
    if !d.is_finite() || d > cap {
        rec.stop = StopReason::Diverged;
        true
    } else if d < rec.floor {
        rec.stop = StopReason::Floor;
        true
    } else {
        false
    }
}

/// Runs `algo` on a single-worker instance until the floor, the budget or divergence.
pub fn run_single(
    algo: Algorithm,
    inst: &Instance<f64>,
    rate: Option<u32>,
    opts: &RunOptions,
) -> Result<RunRecord, HarnessError> {
    let scale = inst.d.max(1.0);
    let floor = opts.floor * scale;
    let cap = DIVERGENCE_FACTOR * scale;
    let f = &inst.objective;
    let mut rec = new_record(algo, rate, distance(&inst.x0, &inst.x_star), floor);
    let track_y = algo.method() == Method::Agd;
    if track_y {
        rec.secondary.push(rec.distances[0]);
    }
    if !algo.is_quantized() {
        let hp = method_params(f.smoothness(), f.strong_convexity(), algo.method())?;
        let mut it = Unquantized::new(algo.method(), hp, &inst.x0);
        for _ in 0..opts.t_max {
            it.step(f);
            if track_y {
                rec.secondary.push(distance(it.secondary(), &inst.x_star));
            }
            if observe(&mut rec, distance(it.iterate(), &inst.x_star), cap) {
                break;
            }
        }
        return Ok(rec);
    }
    let mut engine = single_worker_engine(algo, inst, rate, opts)?;
    let locals = std::slice::from_ref(f);
    for _ in 0..opts.t_max {
        let report = engine.step(locals)?;
        let w = report.workers[0];
        rec.input_norms.push(w.input_norm);
        rec.ranges.push(w.range);
        rec.bits.push(report.bits());
        rec.overloads += report.overloads();
        if track_y {
            rec.secondary.push(distance(engine.server().secondary(), &inst.x_star));
        }
        if observe(&mut rec, distance(engine.iterate(), &inst.x_star), cap) {
            break;
        }
    }
    Ok(rec)
}

/// K-worker naive quantization with the given integer rates.
pub fn run_multi_nq(
    problem: &MultiWorkerProblem<f64>,
    rates: &[u32],
    opts: &RunOptions,
) -> Result<RunRecord, HarnessError> {
    let k = problem.workers();
    if rates.len() != k {
        return Err(HarnessError::Config(format!("{} rates for {k} workers", rates.len())));
    }
    let avg = problem.average();
    let (l, mu) = (avg.smoothness(), avg.strong_convexity());
    let n = problem.x0.len();
    let rho = (n as f64).sqrt();
    let hp = optimal_hyperparams(l, mu, Method::Gd)?;
    let lk = problem.local_smoothness();
    let real_rates: Vec<f64> = rates.iter().map(|&r| f64::from(r)).collect();
    let sigma = bounds::nq_sigma(l, mu, rho, &lk, &real_rates);
    let mut codecs = Vec::with_capacity(k);
    let mut schedules = Vec::with_capacity(k);
    for (&r, &l_k) in rates.iter().zip(&lk) {
        codecs.push(Codec::Quantized(
            QuantizerSpec::scalar_uniform(n, r).map_err(EngineError::from)?,
        ));
        schedules.push(RangeSchedule::nq(l_k, problem.d, sigma));
    }
    let mut engine = QuantizedEngine::naive(hp, &problem.x0, codecs, schedules, opts.policy)?;
    let scale = problem.d.max(1.0);
    let mut rec = new_record(
        Algorithm::NqGd,
        Some(rates.iter().sum()),
        distance(&problem.x0, &problem.x_star),
        opts.floor * scale,
    );
    for _ in 0..opts.t_max {
        let report = engine.step(&problem.locals)?;
        let worst = report
            .workers
            .iter()
            .max_by(|a, b| (a.input_norm / a.range).total_cmp(&(b.input_norm / b.range)))
            .copied()
            .expect("at least one worker");
        rec.input_norms.push(worst.input_norm);
        rec.ranges.push(worst.range);
        rec.bits.push(report.bits());
        rec.overloads += report.overloads();
        if observe(
            &mut rec,
            distance(engine.iterate(), &problem.x_star),
            DIVERGENCE_FACTOR * scale,
        ) {
            break;
        }
    }
    Ok(rec)
}

/// Unquantized GD on the average objective of a multi-worker problem.
pub fn run_multi_gd(problem: &MultiWorkerProblem<f64>, opts: &RunOptions) -> Result<RunRecord, HarnessError> {
    let avg = problem.average();
    let hp = optimal_hyperparams(avg.smoothness(), avg.strong_convexity(), Method::Gd)?;
    let scale = problem.d.max(1.0);
    let mut rec = new_record(
        Algorithm::Gd,
        None,
        distance(&problem.x0, &problem.x_star),
        opts.floor * scale,
    );
    let mut it = Unquantized::new(Method::Gd, hp, &problem.x0);
    for _ in 0..opts.t_max {
        it.step(&avg);
        if observe(
            &mut rec,
            distance(it.iterate(), &problem.x_star),
            DIVERGENCE_FACTOR * scale,
        ) {
            break;
        }
    }
    Ok(rec)
}

/// How a sum rate is split across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateAllocation {
    #[default]
    Uniform,
    Waterfilling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerConfig {
    pub rows: usize,
    pub kappa: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSource {
    /// Gaussian least squares with rescaled spectrum, one fresh matrix per trial.
    Gaussian { m: usize, n: usize, kappa: f64 },
    /// A fixed MatrixMarket matrix; `y` and `x0` are redrawn per trial.
    Mtx { path: PathBuf },
    /// Multi-worker interpolation problem; the sweep rate is the sum rate.
    Interpolation { n: usize, workers: Vec<WorkerConfig> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

fn default_seed() -> u64 {
    1
}
fn default_trials() -> usize {
    50
}
fn default_t_max() -> usize {
    10_000
}
fn default_floor() -> f64 {
    1e-13
}

/// A rate sweep, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithms: Vec<Algorithm>,
    pub rates: Vec<u32>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_floor")]
    pub precision_floor: f64,
    #[serde(default)]
    pub allocation: RateAllocation,
    #[serde(default)]
    pub hb_alpha: f64,
    #[serde(default)]
    pub overload: OverloadPolicy,
    pub problem: ProblemSource,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ProblemSource::Mtx { path } = &mut cfg.problem {
            rebase(path);
        }
        cfg.output.csv.as_mut().map(rebase);
        cfg.output.svg.as_mut().map(rebase);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.algorithms.is_empty() {
            return bad("no algorithms");
        }
        if self.rates.is_empty() || self.rates.iter().any(|&r| r < 1) {
            return bad("rates must be a nonempty list of integers >= 1");
        }
        if self.trials < 1 {
            return bad("trials must be at least 1");
        }
        if self.t_max < MIN_ESTIMATE_POINTS {
            return bad("t_max too small for an estimate");
        }
        if !(self.precision_floor > 0.0) {
            return bad("precision_floor must be positive");
        }
        if !(self.hb_alpha >= 0.0) {
            return bad("hb_alpha must be nonnegative");
        }
        if let ProblemSource::Interpolation { workers, .. } = &self.problem {
            if workers.is_empty() {
                return bad("interpolation problem needs workers");
            }
            if let Some(a) = self
                .algorithms
                .iter()
                .find(|a| !matches!(a, Algorithm::Gd | Algorithm::NqGd))
            {
                return Err(HarnessError::Config(format!(
                    "{a} runs a single worker; multi-worker problems support gd and nq-gd"
                )));
            }
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            t_max: self.t_max,
            floor: self.precision_floor,
            hb_alpha: self.hb_alpha,
            policy: self.overload,
        }
    }
}

/// A trial's problem, drawn deterministically from the seed and trial index.
enum TrialProblem {
    Single(Instance<f64>),
    Multi(MultiWorkerProblem<f64>),
}

fn draw_problem(
    src: &ProblemSource,
    matrix: Option<&Matrix<f64>>,
    seed: u64,
    trial: usize,
) -> Result<TrialProblem, HarnessError> {
    let mut rng = NormalSampler::with_stream(seed, trial as u64);
    Ok(match src {
        ProblemSource::Gaussian { m, n, kappa } => TrialProblem::Single(gaussian_ls(*m, *n, *kappa, &mut rng)?),
        ProblemSource::Mtx { .. } => {
            let a = matrix.expect("matrix loaded before trials").clone();
            TrialProblem::Single(instance_from_matrix_with(a, &mut rng)?)
        }
        ProblemSource::Interpolation { n, workers } => {
            let specs: Vec<WorkerSpec> = workers
                .iter()
                .map(|w| WorkerSpec {
                    rows: w.rows,
                    kappa: w.kappa,
                    smoothness: w.smoothness,
                })
                .collect();
            let sub_seed = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            TrialProblem::Multi(make_interpolation_problem(*n, &specs, sub_seed)?)
        }
    })
}

/// Splits a sum rate across workers.
pub fn allocate(policy: RateAllocation, local_smoothness: &[f64], total: u32) -> Result<Vec<u32>, HarnessError> {
    let k = local_smoothness.len();
    let real = match policy {
        RateAllocation::Uniform => vec![f64::from(total) / k as f64; k],
        RateAllocation::Waterfilling => waterfill(local_smoothness, f64::from(total))?.rates,
    };
    Ok(integer_rates(&real, total))
}

/// Aggregated row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub algo: Algorithm,
    pub rate: u32,
    pub emp_mean: f64,
    pub emp_p05: f64,
    pub emp_p95: f64,
    pub bound: f64,
    pub unquantized_sigma: f64,
    pub converse: f64,
    #[serde(skip)]
    pub trials: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub kappa: f64,
    pub dim: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, algo: Algorithm, rate: u32) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.algo == algo && r.rate == rate)
    }

    pub fn series(&self, algo: Algorithm) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.algo == algo).collect()
    }
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct TrialResult {
    kappa: f64,
    dim: usize,
    /// `(algo, rate, estimate)`
    values: Vec<(Algorithm, u32, f64)>,
    local_smoothness: Vec<f64>,
    mu: f64,
    l: f64,
}

fn run_trial(cfg: &ExperimentConfig, matrix: Option<&Matrix<f64>>, trial: usize) -> Result<TrialResult, HarnessError> {
    let opts = cfg.run_options();
    let problem = draw_problem(&cfg.problem, matrix, cfg.seed, trial)?;
    let mut values = Vec::new();
    let wrap = |algo: Algorithm, rate: u32, e: HarnessError| HarnessError::Trial {
        trial,
        algo,
        rate,
        source: Box::new(e),
    };
    match &problem {
        TrialProblem::Single(inst) => {
            for &algo in &cfg.algorithms {
                if algo.is_quantized() {
                    for &r in &cfg.rates {
                        let est = run_single(algo, inst, Some(r), &opts)
                            .and_then(|rec| rec.estimate())
                            .map_err(|e| wrap(algo, r, e))?;
                        values.push((algo, r, est));
                    }
                } else {
                    let est = run_single(algo, inst, None, &opts)
                        .and_then(|rec| rec.estimate())
                        .map_err(|e| wrap(algo, cfg.rates[0], e))?;
                    values.extend(cfg.rates.iter().map(|&r| (algo, r, est)));
                }
            }
            let f = &inst.objective;
            Ok(TrialResult {
                kappa: f.condition_number(),
                dim: inst.dim(),
                values,
                local_smoothness: vec![f.smoothness()],
                mu: f.strong_convexity(),
                l: f.smoothness(),
            })
        }
        TrialProblem::Multi(p) => {
            let lk = p.local_smoothness();
            for &algo in &cfg.algorithms {
                if algo == Algorithm::NqGd {
                    for &r in &cfg.rates {
                        let est = allocate(cfg.allocation, &lk, r)
                            .and_then(|rates| run_multi_nq(p, &rates, &opts))
                            .and_then(|rec| rec.estimate())
                            .map_err(|e| wrap(algo, r, e))?;
                        values.push((algo, r, est));
                    }
                } else {
                    let est = run_multi_gd(p, &opts)
                        .and_then(|rec| rec.estimate())
                        .map_err(|e| wrap(algo, cfg.rates[0], e))?;
                    values.extend(cfg.rates.iter().map(|&r| (algo, r, est)));
                }
            }
            let avg = p.average();
            Ok(TrialResult {
                kappa: avg.condition_number(),
                dim: p.x0.len(),
                values,
                local_smoothness: lk,
                mu: avg.strong_convexity(),
                l: avg.smoothness(),
            })
        }
    }
}

/// Theoretical overlay for one `(algo, R)` cell.
fn overlay(algo: Algorithm, rate: u32, first: &TrialResult, cfg: &ExperimentConfig) -> Result<f64, HarnessError> {
    let rho = (first.dim as f64).sqrt();
    let kappa = first.kappa;
    if algo == Algorithm::NqGd && first.local_smoothness.len() > 1 {
        let rates = allocate(cfg.allocation, &first.local_smoothness, rate)?;
        let real: Vec<f64> = rates.iter().map(|&r| f64::from(r)).collect();
        return Ok(bounds::nq_sigma(first.l, first.mu, rho, &first.local_smoothness, &real));
    }
    Ok(bounds::achievable_rate(algo, kappa, rho, f64::from(rate)))
}

/// Runs every `(algorithm, rate)` cell over all trials in parallel.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepTable, HarnessError> {
    cfg.validate()?;
    let matrix = match &cfg.problem {
        ProblemSource::Mtx { path } => Some(read_matrix_market(path)?),
        _ => None,
    };
    let results: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, matrix.as_ref(), t))
        .collect::<Result<_, _>>()?;
    let first = &results[0];
    let mut rates = cfg.rates.clone();
    rates.sort_unstable();
    rates.dedup();
    let mut rows = Vec::new();
    for &algo in &cfg.algorithms {
        for &rate in &rates {
            let mut trials: Vec<f64> = results
                .iter()
                .map(|r| {
                    r.values
                        .iter()
                        .find(|(a, q, _)| *a == algo && *q == rate)
                        .map(|v| v.2)
                        .expect("every trial covers every cell")
                })
                .collect();
            let mean = trials.iter().sum::<f64>() / trials.len() as f64;
            let mut sorted = trials.clone();
            sorted.sort_by(f64::total_cmp);
            let bound = bounds::clip(overlay(algo, rate, first, cfg)?);
            rows.push(SweepRow {
                algo,
                rate,
                emp_mean: mean,
                emp_p05: percentile(&sorted, 0.05),
                emp_p95: percentile(&sorted, 0.95),
                bound,
                unquantized_sigma: bounds::sigma(algo.method(), first.kappa),
                converse: bounds::converse(ConverseFamily::of(algo), first.kappa, f64::from(rate)),
                trials: std::mem::take(&mut trials),
            });
        }
    }
    Ok(SweepTable {
        kappa: first.kappa,
        dim: first.dim,
        rows,
    })
}

pub const CSV_HEADER: &str = "algo,R,emp_mean,emp_p05,emp_p95,bound,unquantized_sigma,converse";

pub fn to_csv(table: &SweepTable) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.algo, r.rate, r.emp_mean, r.emp_p05, r.emp_p95, r.bound, r.unquantized_sigma, r.converse
        );
    }
    out
}

pub fn emit_csv(table: &SweepTable, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    if table.rows.is_empty() {
        return Err(HarnessError::Config("empty table".into()));
    }
    fs::write(path, to_csv(table)).map_err(|e| io_err(path, e))
}

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

/// Contraction factor against rate: one solid polyline per algorithm
/// (empirical mean) and a dashed one for its bound, clipped at one.
pub fn to_svg(table: &SweepTable) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rmin = table.rows.iter().map(|r| r.rate).min().unwrap_or(1) as f64;
    let rmax = table.rows.iter().map(|r| r.rate).max().unwrap_or(1) as f64;
    let span = (rmax - rmin).max(1.0);
    let px = |r: f64| left + (r - rmin) / span * pw;
    let py = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let mut rates: Vec<u32> = table.rows.iter().map(|r| r.rate).collect();
    rates.sort_unstable();
    rates.dedup();
    for r in &rates {
        let x = px(f64::from(*r));
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{r}</text>"#,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">rate R (bits per dimension)</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">contraction factor</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    let mut algos: Vec<Algorithm> = Vec::new();
    for r in &table.rows {
        if !algos.contains(&r.algo) {
            algos.push(r.algo);
        }
    }
    for (i, algo) in algos.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let series = table.series(*algo);
        let pts = |f: &dyn Fn(&SweepRow) -> f64| {
            series
                .iter()
                .map(|r| format!("{:.2},{:.2}", px(f64::from(r.rate)), py(f(r))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts(&|r| r.emp_mean)
        );
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" stroke-dasharray="5,4" points="{}"/>"#,
            pts(&|r| r.bound)
        );
        let ly = top + 16.0 + 34.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{algo}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-dasharray="5,4"/><text x="{}" y="{}">{algo} bound</text>"#,
            ly + 14.0,
            lx + 24.0,
            ly + 14.0,
            lx + 30.0,
            ly + 18.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg(table: &SweepTable, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    if table.rows.is_empty() {
        return Err(HarnessError::Config("empty table".into()));
    }
    fs::write(path, to_svg(table)).map_err(|e| io_err(path, e))
}

/// Largest deviation from the trajectory identities linking a differential
/// scheme to its unquantized twin over `iterations` rounds.
///
/// - GD, HB: `x^_t = x_t - eta e_{t-1}`
/// - AGD: `y^_t = y_t - eta e_{t-1}` and
///   `x^_t = x_t - eta e_{t-1} - eta gamma (e_{t-1} - e_{t-2})`
pub fn tracking_deviation(
    method: Method,
    inst: &Instance<f64>,
    rate: u32,
    iterations: usize,
    opts: &RunOptions,
) -> Result<f64, HarnessError> {
    let algo = match method {
        Method::Gd => Algorithm::DqGd,
        Method::Agd => Algorithm::DqAgd,
        Method::Hb => Algorithm::DqHb,
    };
    let f = &inst.objective;
    let hp = optimal_hyperparams(f.smoothness(), f.strong_convexity(), method)?;
    let mut engine = single_worker_engine(algo, inst, Some(rate), opts)?;
    let mut twin = Unquantized::new(method, hp, &inst.x0);
    let locals = std::slice::from_ref(f);
    let mut worst = 0.0f64;
    for _ in 0..iterations {
        engine.step(locals)?;
        twin.step(f);
        let (e1, e2) = engine.worker_errors(0);
        let x_hat = engine.iterate();
        for i in 0..x_hat.len() {
            let predicted = match method {
                Method::Gd | Method::Hb => twin.iterate()[i] - hp.eta * e1[i],
                Method::Agd => twin.iterate()[i] - hp.eta * e1[i] - hp.eta * hp.gamma * (e1[i] - e2[i]),
            };
            worst = worst.max((x_hat[i] - predicted).abs());
            if method == Method::Agd {
                let y_pred = twin.secondary()[i] - hp.eta * e1[i];
                worst = worst.max((engine.server().secondary()[i] - y_pred).abs());
            }
        }
    }
    Ok(worst)
}

/// Finite-`t` envelope of a quantized single-worker run at iteration `t`.
/// Bounds `RunRecord::distances`, or `RunRecord::secondary` (`y^_t`) for DQ-AGD.
pub fn envelope(algo: Algorithm, inst: &Instance<f64>, rate: u32, hb_alpha: f64, t: u64) -> Option<f64> {
    let f = &inst.objective;
    let c = EnvelopeConstants {
        l: f.smoothness(),
        mu: f.strong_convexity(),
        d: inst.d,
        rho: (inst.dim() as f64).sqrt(),
        rate: f64::from(rate),
    };
    match algo {
        Algorithm::DqGd => Some(bounds::dq_gd_envelope(&c, t)),
        Algorithm::DqAgd => Some(bounds::dq_agd_envelope(&c, t)),
        Algorithm::DqHb => Some(bounds::dq_hb_envelope(&c, hb_alpha, t)),
        Algorithm::NqGd => {
            let s = bounds::nq_sigma(c.l, c.mu, c.rho, &[c.l], &[c.rate]);
            Some(bounds::nq_envelope(s, c.d, t))
        }
        _ => None,
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const WORST_CASE_RESOLUTION: f64 = 1e-6;

/// Per-step ratios of GD on the worst-case instance for `(kappa, n)`.
pub fn worst_case_ratios(kappa: f64, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
    let (l, mu) = (kappa, 1.0);
    let hp = optimal_hyperparams(l, mu, Method::Gd)?;
    let x0 = NormalSampler::new(seed).vector(n);
    let inst = make_worst_case_gd(&x0, l, mu, 1.0, hp.eta)?;
    let mut gd = Unquantized::new(Method::Gd, hp, &inst.x0);
    let mut prev = inst.d;
    let mut ratios = Vec::with_capacity(steps);
    for _ in 0..steps {
        gd.step(&inst.objective);
        let d = distance(gd.iterate(), &inst.x_star);
        // below this, rounding in x* dominates the ratio
        if d < WORST_CASE_RESOLUTION * inst.d {
            break;
        }
        ratios.push(d / prev);
        prev = d;
    }
    Ok(ratios)
}

/// Quick invariant suite: worst-case equality, tracking identities and
/// quantizer-input containment on a handful of random instances.
pub fn verify(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |name: &str, res: Result<(bool, String), HarnessError>| {
        let (passed, detail) = res.unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        });
    };

    push(
        "worst-case GD contracts by exactly (kappa-1)/(kappa+1)",
        (|| {
            let mut worst = 0.0f64;
            for kappa in [2.0, 4.0, 10.0] {
                for n in [2, 8] {
                    let target = (kappa - 1.0) / (kappa + 1.0);
                    for r in worst_case_ratios(kappa, n, 50, seed)? {
                        worst = worst.max((r - target).abs());
                    }
                }
            }
            Ok((worst <= 1e-9, format!("max deviation {worst:.3e}")))
        })(),
    );

    let opts = RunOptions {
        t_max: 200,
        // the identities hold for any reconstruction, including saturated ones
        policy: OverloadPolicy::Saturate,
        hb_alpha: 1.0,
        ..RunOptions::default()
    };
    for method in [Method::Gd, Method::Agd, Method::Hb] {
        push(
            &format!("tracking identity ({method:?})"),
            (|| {
                let mut worst = 0.0f64;
                for trial in 0..5 {
                    let inst = gaussian_ls(24, 8, 10.0, &mut NormalSampler::with_stream(seed, trial))?;
                    worst = worst.max(tracking_deviation(method, &inst, 6, 200, &opts)?);
                }
                Ok((worst <= 1e-10, format!("max deviation {worst:.3e}")))
            })(),
        );
    }

    push(
        "quantizer input stays inside the dynamic range",
        (|| {
            let mut violations = 0usize;
            let mut runs = 0usize;
            let opts = RunOptions {
                t_max: 200,
                policy: OverloadPolicy::Saturate,
                hb_alpha: 1.0,
                ..RunOptions::default()
            };
            for trial in 0..30u64 {
                let inst = gaussian_ls(
                    32,
                    8,
                    2.0 + trial as f64,
                    &mut NormalSampler::with_stream(seed, 100 + trial),
                )?;
                for algo in [Algorithm::DqGd, Algorithm::DqAgd, Algorithm::DqHb, Algorithm::NqGd] {
                    let rate = 1 + (trial % 12) as u32;
                    violations += run_single(algo, &inst, Some(rate), &opts)?.overloads;
                    runs += 1;
                }
            }
            Ok((violations == 0, format!("{violations} violations in {runs} runs")))
        })(),
    );
    out
}
