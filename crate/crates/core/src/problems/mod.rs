//! Objective functions: least-squares instances with known constants and optimizer.
//!
//! Everything here is deterministic given a seed. Matrices are generated and
//! factorised in `f64`; instances can be cast to another [`Scalar`] afterwards.

mod matrix_market;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{distance, lit, norm, Scalar};

pub use matrix_market::{parse_matrix_market, read_matrix_market};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported MatrixMarket qualifier '{0}' (only real general/symmetric data is read)")]
    UnsupportedField(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// A smooth, strongly convex objective seen through its gradient oracle.
pub trait Objective<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn gradient_into(&self, x: &[T], out: &mut [T]);

    fn gradient(&self, x: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.dim()];
        self.gradient_into(x, &mut g);
        g
    }

    fn value(&self, x: &[T]) -> T;

    /// `L`
    fn smoothness(&self) -> T;

    /// `mu`
    fn strong_convexity(&self) -> T;

    fn condition_number(&self) -> T {
        self.smoothness() / self.strong_convexity()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ProblemError> {
        if data.len() != rows * cols {
            return Err(ProblemError::InvalidShape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }

    /// `out = A^T v`
    pub fn mul_vec_transposed(&self, v: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_wire(v.to_wire())).collect(),
        }
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).to_wire())
    }
}

/// Seeded normal sampler (ChaCha8 stream, Box-Muller transform).
#[derive(Debug, Clone)]
pub struct NormalSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent substream `stream` of `seed`, used for per-trial draws.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn vector(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.sample()).collect()
    }
}

/// `f(x) = 1/2 ||y - A x||^2` with `L = sigma_1(A)^2`, `mu = sigma_n(A)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares<T> {
    a: Matrix<T>,
    y: Vec<T>,
    smoothness: T,
    strong_convexity: T,
}

impl<T: Scalar> LeastSquares<T> {
    /// Builds the objective and reads `L`, `mu` off the singular values of `a`.
    pub fn new(a: Matrix<T>, y: Vec<T>) -> Result<Self, ProblemError> {
        if y.len() != a.rows() {
            return Err(ProblemError::InvalidShape(format!(
                "y has {} entries, A has {} rows",
                y.len(),
                a.rows()
            )));
        }
        if a.rows() < a.cols() {
            return Err(ProblemError::InvalidShape(format!(
                "{}x{} matrix has fewer rows than columns",
                a.rows(),
                a.cols()
            )));
        }
        let (smax, smin) = extreme_singular_values(&a.to_nalgebra());
        if !(smin > 1e-12 * smax) {
            return Err(ProblemError::Degenerate("matrix does not have full column rank".into()));
        }
        Ok(Self {
            a,
            y,
            smoothness: lit(smax * smax),
            strong_convexity: lit(smin * smin),
        })
    }

    fn with_constants(a: Matrix<T>, y: Vec<T>, smoothness: T, strong_convexity: T) -> Self {
        Self {
            a,
            y,
            smoothness,
            strong_convexity,
        }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn target(&self) -> &[T] {
        &self.y
    }

    /// Solves the normal equations `A^T A x = A^T y` (via SVD, in `f64`).
    pub fn solve(&self) -> Vec<T> {
        let a = self.a.to_nalgebra();
        let y = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v.to_wire()));
        let svd = a.svd(true, true);
        let x = svd.solve(&y, 0.0).expect("thin SVD with both factors");
        x.iter().map(|&v| T::from_wire(v)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LeastSquares<U> {
        LeastSquares {
            a: self.a.cast(),
            y: self.y.iter().map(|v| U::from_wire(v.to_wire())).collect(),
            smoothness: U::from_wire(self.smoothness.to_wire()),
            strong_convexity: U::from_wire(self.strong_convexity.to_wire()),
        }
    }
}

impl<T: Scalar> Objective<T> for LeastSquares<T> {
    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn gradient_into(&self, x: &[T], out: &mut [T]) {
        let mut residual = vec![T::zero(); self.a.rows()];
        self.a.mul_vec(x, &mut residual);
        for (r, &y) in residual.iter_mut().zip(&self.y) {
            *r = *r - y;
        }
        self.a.mul_vec_transposed(&residual, out);
    }

    fn value(&self, x: &[T]) -> T {
        let mut ax = vec![T::zero(); self.a.rows()];
        self.a.mul_vec(x, &mut ax);
        let half = lit::<T>(0.5);
        half * ax.iter().zip(&self.y).map(|(&p, &y)| (y - p) * (y - p)).sum::<T>()
    }

    fn smoothness(&self) -> T {
        self.smoothness
    }

    fn strong_convexity(&self) -> T {
        self.strong_convexity
    }
}

/// A single-worker problem: objective, starting point and known optimizer.
/// The optimizer is for measurement only; engines never see it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance<T> {
    pub objective: LeastSquares<T>,
    pub x0: Vec<T>,
    pub x_star: Vec<T>,
    /// Initial-distance bound `D`, set to `||x* - x0||`.
    pub d: T,
}

impl<T: Scalar> Instance<T> {
    fn from_parts(objective: LeastSquares<T>, x0: Vec<T>, x_star: Vec<T>) -> Self {
        let d = distance(&x_star, &x0);
        Self {
            objective,
            x0,
            x_star,
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn cast<U: Scalar>(&self) -> Instance<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_wire(x.to_wire())).collect::<Vec<U>>();
        Instance {
            objective: self.objective.cast(),
            x0: conv(&self.x0),
            x_star: conv(&self.x_star),
            d: U::from_wire(self.d.to_wire()),
        }
    }
}

/// Largest and smallest singular values.
fn extreme_singular_values(a: &DMatrix<f64>) -> (f64, f64) {
    let s = a.singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    (max, min)
}

/// Affinely remaps the singular values of `a` onto `[1/sqrt(kappa), 1]`.
fn rescale_spectrum(a: DMatrix<f64>, kappa: f64) -> Result<(DMatrix<f64>, Vec<f64>), ProblemError> {
    let svd = a.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let lo = 1.0 / kappa.sqrt();
    let remapped: Vec<f64> = if s.len() == 1 {
        if kappa != 1.0 {
            return Err(ProblemError::InvalidConstants(format!(
                "a single singular value cannot have condition number {kappa}"
            )));
        }
        vec![1.0]
    } else {
        if !(smax - smin > 1e-12 * smax) {
            return Err(ProblemError::Degenerate("all singular values coincide".into()));
        }
        s.iter()
            .map(|&v| {
                if v == smax {
                    1.0
                } else if v == smin {
                    lo
                } else {
                    lo + (v - smin) * (1.0 - lo) / (smax - smin)
                }
            })
            .collect()
    };
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(remapped.clone()));
    Ok((&u * sigma * &vt, remapped))
}

fn from_nalgebra(a: &DMatrix<f64>) -> Matrix<f64> {
    Matrix {
        rows: a.nrows(),
        cols: a.ncols(),
        data: (0..a.nrows())
            .flat_map(|i| (0..a.ncols()).map(move |j| a[(i, j)]))
            .collect(),
    }
}

/// Gaussian least-squares instance with prescribed condition number.
///
/// `A` has i.i.d. standard normal entries whose singular values are then
/// mapped affinely onto `[1/sqrt(kappa), 1]`, so `L = 1` and `mu = 1/kappa`.
/// `y` and `x0` are i.i.d. standard normal.
pub fn make_gaussian_ls(m: usize, n: usize, kappa: f64, seed: u64) -> Result<Instance<f64>, ProblemError> {
    gaussian_ls(m, n, kappa, &mut NormalSampler::new(seed))
}

/// As [`make_gaussian_ls`], drawing from an existing sampler.
pub fn gaussian_ls(m: usize, n: usize, kappa: f64, rng: &mut NormalSampler) -> Result<Instance<f64>, ProblemError> {
    if n == 0 || m < n {
        return Err(ProblemError::InvalidShape(format!(
            "need m >= n >= 1, got m={m}, n={n}"
        )));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(ProblemError::InvalidConstants(format!("condition number {kappa} < 1")));
    }
    let raw = DMatrix::from_row_iterator(m, n, rng.vector(m * n));
    let (a, spectrum) = rescale_spectrum(raw, kappa)?;
    let y = rng.vector(m);
    let x0 = rng.vector(n);
    let smax = spectrum.iter().cloned().fold(0.0, f64::max);
    let smin = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);
    let objective = LeastSquares::with_constants(from_nalgebra(&a), y, smax * smax, smin * smin);
    let x_star = objective.solve();
    Ok(Instance::from_parts(objective, x0, x_star))
}

/// Least-squares instance over a given matrix with `y`, `x0` i.i.d. standard normal.
pub fn instance_from_matrix(a: Matrix<f64>, seed: u64) -> Result<Instance<f64>, ProblemError> {
    instance_from_matrix_with(a, &mut NormalSampler::new(seed))
}

pub fn instance_from_matrix_with(a: Matrix<f64>, rng: &mut NormalSampler) -> Result<Instance<f64>, ProblemError> {
    let y = rng.vector(a.rows());
    let x0 = rng.vector(a.cols());
    let objective = LeastSquares::new(a, y)?;
    let x_star = objective.solve();
    Ok(Instance::from_parts(objective, x0, x_star))
}

/// Reads a MatrixMarket file and wraps it as a least-squares instance.
pub fn load_matrix_market(path: impl AsRef<Path>, seed: u64) -> Result<Instance<f64>, ProblemError> {
    instance_from_matrix(read_matrix_market(path)?, seed)
}

/// Householder reflector whose first column is the unit vector `v`.
fn basis_with_first(v: &[f64]) -> Vec<Vec<f64>> {
    let n = v.len();
    let mut w = v.to_vec();
    w[0] -= 1.0;
    let ww: f64 = w.iter().map(|x| x * x).sum();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    if ww == 0.0 {
                        id
                    } else {
                        id - 2.0 * w[i] * w[j] / ww
                    }
                })
                .collect()
        })
        .collect()
}

/// Worst-case instance for fixed-stepsize gradient descent.
///
/// `x*` is placed at distance exactly `d` from `x0` (along `x0` itself, or
/// `e_1` when `x0 = 0`), and the direction `x0 - x*` is made the right singular
/// vector whose singular value maximises `|1 - eta s^2|`. GD then contracts by
/// exactly `max{|1 - eta mu|, |1 - eta L|}` at every step.
pub fn make_worst_case_gd(x0: &[f64], l: f64, mu: f64, d: f64, eta: f64) -> Result<Instance<f64>, ProblemError> {
    let n = x0.len();
    if n == 0 {
        return Err(ProblemError::InvalidShape("empty starting point".into()));
    }
    if !(mu > 0.0 && l >= mu && eta > 0.0) {
        return Err(ProblemError::InvalidConstants(format!("L={l}, mu={mu}, eta={eta}")));
    }
    if !(d > 0.0) {
        return Err(ProblemError::Degenerate(format!(
            "initial distance {d} leaves the worst-case direction undefined"
        )));
    }
    if n == 1 && l != mu {
        return Err(ProblemError::InvalidShape(
            "a one-dimensional instance cannot have L != mu".into(),
        ));
    }
    let x0_norm = norm(x0);
    let v1: Vec<f64> = if x0_norm > 0.0 {
        x0.iter().map(|x| x / x0_norm).collect()
    } else {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    };
    let x_star: Vec<f64> = x0.iter().zip(&v1).map(|(x, v)| x - d * v).collect();

    let top_dominates = (1.0 - eta * l).abs() >= (1.0 - eta * mu).abs();
    let (first, second) = if top_dominates {
        (l.sqrt(), mu.sqrt())
    } else {
        (mu.sqrt(), l.sqrt())
    };
    let mut singular = vec![first];
    if n > 1 {
        singular.push(second);
    }
    for k in 2..n {
        // interior values strictly between the extremes
        let frac = (k - 1) as f64 / (n - 1) as f64;
        singular.push(mu.sqrt() + frac * (l.sqrt() - mu.sqrt()));
    }

    // columns of the reflector are the right singular vectors; A = S V^T
    let v = basis_with_first(&v1);
    let mut a = Matrix::zeros(n, n);
    for (i, (s, vi)) in singular.iter().zip(&v).enumerate() {
        for (j, vij) in vi.iter().enumerate() {
            *a.get_mut(i, j) = s * vij;
        }
    }
    let mut y = vec![0.0; n];
    a.mul_vec(&x_star, &mut y);
    let objective = LeastSquares::with_constants(a, y, l, mu);
    Ok(Instance::from_parts(objective, x0.to_vec(), x_star))
}

/// One worker's share of an interpolation-setting problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerSpec {
    pub rows: usize,
    pub kappa: f64,
    /// `L_k`; the local spectrum is rescaled onto `[sqrt(L_k / kappa), sqrt(L_k)]`.
    pub smoothness: f64,
}

/// `f = (1/K) sum_k f_k` where every `f_k` is minimised at the same `x*`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiWorkerProblem<T> {
    pub locals: Vec<LeastSquares<T>>,
    pub x0: Vec<T>,
    pub x_star: Vec<T>,
    pub d: T,
}

impl<T: Scalar> MultiWorkerProblem<T> {
    pub fn workers(&self) -> usize {
        self.locals.len()
    }

    /// `L_k` of each worker.
    pub fn local_smoothness(&self) -> Vec<T> {
        self.locals.iter().map(|f| f.smoothness()).collect()
    }

    pub fn average(&self) -> AverageObjective<'_, T> {
        AverageObjective { locals: &self.locals }
    }
}

/// Sample-average objective with `L = mean(L_k)`, `mu = mean(mu_k)`.
#[derive(Debug, Clone, Copy)]
pub struct AverageObjective<'a, T> {
    locals: &'a [LeastSquares<T>],
}

impl<T: Scalar> Objective<T> for AverageObjective<'_, T> {
    fn dim(&self) -> usize {
        self.locals[0].dim()
    }

    fn gradient_into(&self, x: &[T], out: &mut [T]) {
        let k = lit::<T>(self.locals.len() as f64);
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut g = vec![T::zero(); out.len()];
        for f in self.locals {
            f.gradient_into(x, &mut g);
            for (o, &gi) in out.iter_mut().zip(&g) {
                *o = *o + gi;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / k);
    }

    fn value(&self, x: &[T]) -> T {
        let k = lit::<T>(self.locals.len() as f64);
        self.locals.iter().map(|f| f.value(x)).sum::<T>() / k
    }

    fn smoothness(&self) -> T {
        let k = lit::<T>(self.locals.len() as f64);
        self.locals.iter().map(|f| f.smoothness()).sum::<T>() / k
    }

    fn strong_convexity(&self) -> T {
        let k = lit::<T>(self.locals.len() as f64);
        self.locals.iter().map(|f| f.strong_convexity()).sum::<T>() / k
    }
}

/// Multi-worker least squares in the interpolation setting: a shared `x*` is
/// drawn first and each `f_k(x) = 1/2 ||A_k (x - x*)||^2`.
pub fn make_interpolation_problem(
    n: usize,
    workers: &[WorkerSpec],
    seed: u64,
) -> Result<MultiWorkerProblem<f64>, ProblemError> {
    if workers.is_empty() {
        return Err(ProblemError::InvalidShape("need at least one worker".into()));
    }
    let mut rng = NormalSampler::new(seed);
    let x_star = rng.vector(n);
    let x0 = rng.vector(n);
    let mut locals = Vec::with_capacity(workers.len());
    for w in workers {
        if n == 0 || w.rows < n {
            return Err(ProblemError::InvalidShape(format!(
                "worker has {} rows for n={n}",
                w.rows
            )));
        }
        if !(w.smoothness > 0.0) || !(w.kappa >= 1.0) {
            return Err(ProblemError::InvalidConstants(format!(
                "worker L_k={}, kappa_k={}",
                w.smoothness, w.kappa
            )));
        }
        let raw = DMatrix::from_row_iterator(w.rows, n, rng.vector(w.rows * n));
        let (a, spectrum) = rescale_spectrum(raw, w.kappa)?;
        let a = a * w.smoothness.sqrt();
        let smax = spectrum.iter().cloned().fold(0.0, f64::max);
        let smin = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);
        let a = from_nalgebra(&a);
        let mut y = vec![0.0; w.rows];
        a.mul_vec(&x_star, &mut y);
        locals.push(LeastSquares::with_constants(
            a,
            y,
            w.smoothness * smax * smax,
            w.smoothness * smin * smin,
        ));
    }
    let d = distance(&x_star, &x0);
    Ok(MultiWorkerProblem { locals, x0, x_star, d })
}
