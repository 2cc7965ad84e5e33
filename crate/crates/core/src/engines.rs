//! Iteration engines: unquantized GD/AGD/HB and their rate-limited variants.
//!
//! A quantized engine is a [`Server`] plus one or more workers that only talk
//! through a [`Channel`]. The server never sees gradients, quantizer inputs or
//! quantization errors; it decodes payload bits at the dynamic range it
//! computes from its own copy of the public [`RangeSchedule`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::Objective;
use crate::quantizer::{Payload, QuantizerError, QuantizerSpec, DOMAIN_SLACK};
use crate::scalar::{lit, norm, Scalar};
use crate::transport::{Channel, ChannelTrace, TransportError, UplinkMessage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}, worker {worker}: quantizer input norm {norm:e} exceeds dynamic range {range:e}")]
    Containment {
        iteration: u64,
        worker: usize,
        norm: f64,
        range: f64,
    },
    #[error("worker {worker} answered iteration {got} during iteration {expected}")]
    OutOfStep { worker: usize, expected: u64, got: u64 },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// Underlying first-order method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gd,
    Agd,
    Hb,
}

/// Every algorithm the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gd,
    Agd,
    Hb,
    DqGd,
    DqAgd,
    DqHb,
    NqGd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Gd,
        Algorithm::Agd,
        Algorithm::Hb,
        Algorithm::DqGd,
        Algorithm::DqAgd,
        Algorithm::DqHb,
        Algorithm::NqGd,
    ];

    pub fn method(self) -> Method {
        match self {
            Algorithm::Gd | Algorithm::DqGd | Algorithm::NqGd => Method::Gd,
            Algorithm::Agd | Algorithm::DqAgd => Method::Agd,
            Algorithm::Hb | Algorithm::DqHb => Method::Hb,
        }
    }

    pub fn is_quantized(self) -> bool {
        !matches!(self, Algorithm::Gd | Algorithm::Agd | Algorithm::Hb)
    }

    /// The unquantized counterpart.
    pub fn unquantized(self) -> Algorithm {
        match self.method() {
            Method::Gd => Algorithm::Gd,
            Method::Agd => Algorithm::Agd,
            Method::Hb => Algorithm::Hb,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gd => "gd",
            Algorithm::Agd => "agd",
            Algorithm::Hb => "hb",
            Algorithm::DqGd => "dq-gd",
            Algorithm::DqAgd => "dq-agd",
            Algorithm::DqHb => "dq-hb",
            Algorithm::NqGd => "nq-gd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Stepsize, momentum coefficient and nominal contraction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams<T> {
    pub eta: T,
    pub gamma: T,
    pub sigma: T,
}

/// Classical tuning of each method for an `L`-smooth, `mu`-strongly convex objective.
pub fn optimal_hyperparams<T: Scalar>(l: T, mu: T, method: Method) -> Result<HyperParams<T>, EngineError> {
    if !(mu > T::zero()) || !(l >= mu) || !l.is_finite() {
        return Err(EngineError::InvalidConstants(format!(
            "need L >= mu > 0, got L={l}, mu={mu}"
        )));
    }
    let one = T::one();
    let two = lit::<T>(2.0);
    let kappa = l / mu;
    let sk = kappa.sqrt();
    Ok(match method {
        Method::Gd => HyperParams {
            eta: two / (l + mu),
            gamma: T::zero(),
            sigma: (kappa - one) / (kappa + one),
        },
        Method::Agd => HyperParams {
            eta: one / l,
            gamma: (sk - one) / (sk + one),
            sigma: (one - one / sk).sqrt(),
        },
        Method::Hb => {
            let s = (sk - one) / (sk + one);
            let root = two / (l.sqrt() + mu.sqrt());
            HyperParams {
                eta: root * root,
                gamma: s * s,
                sigma: s,
            }
        }
    })
}

/// Plain GD, Nesterov AGD or Polyak HB.
#[derive(Debug, Clone, PartialEq)]
pub struct Unquantized<T> {
    method: Method,
    hp: HyperParams<T>,
    x: Vec<T>,
    /// `y_t` for AGD, `x_{t-1}` for HB.
    aux: Vec<T>,
    grad: Vec<T>,
    t: u64,
}

impl<T: Scalar> Unquantized<T> {
    pub fn new(method: Method, hp: HyperParams<T>, x0: &[T]) -> Self {
        Self {
            method,
            hp,
            x: x0.to_vec(),
            aux: x0.to_vec(),
            grad: vec![T::zero(); x0.len()],
            t: 0,
        }
    }

    pub fn iterate(&self) -> &[T] {
        &self.x
    }

    /// `y_t` for AGD; `x_{t-1}` for HB; unused for GD.
    pub fn secondary(&self) -> &[T] {
        &self.aux
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn step<F: Objective<T> + ?Sized>(&mut self, f: &F) {
        let eta = self.hp.eta;
        self.step_with(f, eta);
    }

    /// One step with stepsize `eta` in place of the configured one.
    pub fn step_with<F: Objective<T> + ?Sized>(&mut self, f: &F, eta: T) {
        f.gradient_into(&self.x, &mut self.grad);
        let gamma = self.hp.gamma;
        match self.method {
            Method::Gd => {
                for (x, &g) in self.x.iter_mut().zip(&self.grad) {
                    *x = *x - eta * g;
                }
            }
            Method::Agd => {
                for ((x, y), &g) in self.x.iter_mut().zip(self.aux.iter_mut()).zip(&self.grad) {
                    let y_next = *x - eta * g;
                    *x = y_next + gamma * (y_next - *y);
                    *y = y_next;
                }
            }
            Method::Hb => {
                for ((x, prev), &g) in self.x.iter_mut().zip(self.aux.iter_mut()).zip(&self.grad) {
                    let x_next = *x - eta * g + gamma * (*x - *prev);
                    *prev = *x;
                    *x = x_next;
                }
            }
        }
        self.t += 1;
    }
}

/// Public dynamic-range rule.
#[derive(Clone)]
pub enum RangeRule<T> {
    /// `r_t = sigma^t lead max(t,1)^alpha + (r_{t-1} + gamma (r_{t-1} + r_{t-2})) a`,
    /// `r_{-1} = r_{-2} = 0`.
    Recursive {
        lead: T,
        sigma: T,
        gamma: T,
        a: T,
        alpha: T,
    },
    /// `r_t = sigma^t lead`.
    Geometric { lead: T, sigma: T },
    /// Caller-supplied sequence.
    Custom(Arc<dyn Fn(u64) -> T + Send + Sync>),
}

impl<T: fmt::Debug> fmt::Debug for RangeRule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeRule::Recursive {
                lead,
                sigma,
                gamma,
                a,
                alpha,
            } => f
                .debug_struct("Recursive")
                .field("lead", lead)
                .field("sigma", sigma)
                .field("gamma", gamma)
                .field("a", a)
                .field("alpha", alpha)
                .finish(),
            RangeRule::Geometric { lead, sigma } => f
                .debug_struct("Geometric")
                .field("lead", lead)
                .field("sigma", sigma)
                .finish(),
            RangeRule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A dynamic-range rule together with its cursor. Server and worker each
/// hold a copy and advance it once per iteration.
#[derive(Debug, Clone)]
pub struct RangeSchedule<T> {
    rule: RangeRule<T>,
    t: u64,
    r1: T,
    r2: T,
}

impl<T: Scalar> RangeSchedule<T> {
    pub fn new(rule: RangeRule<T>) -> Self {
        Self {
            rule,
            t: 0,
            r1: T::zero(),
            r2: T::zero(),
        }
    }

    /// `r_0 = L D`, `r_t = sigma^t L D + r_{t-1} a`.
    pub fn dq_gd(l: T, d: T, sigma: T, a: T) -> Self {
        Self::new(RangeRule::Recursive {
            lead: l * d,
            sigma,
            gamma: T::zero(),
            a,
            alpha: T::zero(),
        })
    }

    /// Lead term `L D lambda`, `lambda = (1 + gamma + gamma / sigma) sqrt(kappa + 1)`.
    pub fn dq_agd(l: T, mu: T, d: T, hp: &HyperParams<T>, a: T) -> Self {
        let kappa = l / mu;
        let ratio = if hp.gamma == T::zero() {
            T::zero()
        } else {
            hp.gamma / hp.sigma
        };
        let lambda = (T::one() + hp.gamma + ratio) * (kappa + T::one()).sqrt();
        Self::new(RangeRule::Recursive {
            lead: l * d * lambda,
            sigma: hp.sigma,
            gamma: hp.gamma,
            a,
            alpha: T::zero(),
        })
    }

    /// Lead term `e^alpha sqrt(2) L D`, growth `max(t, 1)^alpha`.
    pub fn dq_hb(l: T, d: T, hp: &HyperParams<T>, a: T, alpha: T) -> Self {
        Self::new(RangeRule::Recursive {
            lead: alpha.exp() * lit::<T>(2.0).sqrt() * l * d,
            sigma: hp.sigma,
            gamma: hp.gamma,
            a,
            alpha,
        })
    }

    /// `r_{t,k} = sigma^t L_k D`.
    pub fn nq(l_k: T, d: T, sigma: T) -> Self {
        Self::new(RangeRule::Geometric { lead: l_k * d, sigma })
    }

    pub fn custom(f: impl Fn(u64) -> T + Send + Sync + 'static) -> Self {
        Self::new(RangeRule::Custom(Arc::new(f)))
    }

    pub fn rule(&self) -> &RangeRule<T> {
        &self.rule
    }

    /// Index of the next range to be produced.
    pub fn position(&self) -> u64 {
        self.t
    }

    /// Produces `r_t` and advances.
    pub fn next_range(&mut self) -> T {
        let t = self.t;
        let r = match &self.rule {
            RangeRule::Recursive {
                lead,
                sigma,
                gamma,
                a,
                alpha,
            } => {
                let growth = if *alpha == T::zero() {
                    T::one()
                } else {
                    lit::<T>(t.max(1) as f64).powf(*alpha)
                };
                sigma.powi(t as i32) * *lead * growth + (self.r1 + *gamma * (self.r1 + self.r2)) * *a
            }
            RangeRule::Geometric { lead, sigma } => sigma.powi(t as i32) * *lead,
            RangeRule::Custom(f) => f(t),
        };
        self.r2 = self.r1;
        self.r1 = r;
        self.t += 1;
        r
    }

    /// The first `count` ranges of a fresh copy of this schedule.
    pub fn prefix(&self, count: usize) -> Vec<T> {
        let mut s = Self::new(self.rule.clone());
        (0..count).map(|_| s.next_range()).collect()
    }
}

/// How a worker encodes its quantizer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Quantized(QuantizerSpec),
    /// Infinite-rate surrogate: the input is sent verbatim and the error is zero.
    Exact,
}

impl Codec {
    fn rate(&self) -> u32 {
        match self {
            Codec::Quantized(q) => q.rate(),
            Codec::Exact => 0,
        }
    }
}

/// What a worker does when its input leaves the ball of radius `r_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverloadPolicy {
    /// Abort the run with [`EngineError::Containment`].
    #[default]
    Reject,
    /// Clip coordinates to the domain, record the event and continue.
    Saturate,
}

/// Per-iteration stepsizes `eta_t` (with `eta_{-1} = 0`).
#[derive(Clone)]
pub enum Stepsizes<T> {
    Constant(T),
    Sequence(Arc<dyn Fn(u64) -> T + Send + Sync>),
}

impl<T: Scalar> Stepsizes<T> {
    pub fn at(&self, t: u64) -> T {
        match self {
            Stepsizes::Constant(eta) => *eta,
            Stepsizes::Sequence(f) => f(t),
        }
    }

    pub fn before(&self, t: u64) -> T {
        if t == 0 {
            T::zero()
        } else {
            self.at(t - 1)
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Stepsizes<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stepsizes::Constant(eta) => f.debug_tuple("Constant").field(eta).finish(),
            Stepsizes::Sequence(_) => f.write_str("Sequence(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputRule {
    Differential(Method),
    Naive,
}

/// Worker-side observations of one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerReport<T> {
    pub input_norm: T,
    pub range: T,
    pub bits: usize,
    pub overloaded: bool,
}

/// Worker half: holds the gradient oracle access and its past quantization errors.
#[derive(Debug, Clone)]
pub struct Worker<T> {
    id: usize,
    rule: InputRule,
    hp: HyperParams<T>,
    stepsizes: Stepsizes<T>,
    codec: Codec,
    schedule: RangeSchedule<T>,
    policy: OverloadPolicy,
    e1: Vec<T>,
    e2: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Scalar> Worker<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: usize,
        rule: InputRule,
        hp: HyperParams<T>,
        stepsizes: Stepsizes<T>,
        codec: Codec,
        schedule: RangeSchedule<T>,
        policy: OverloadPolicy,
        dim: usize,
    ) -> Self {
        Self {
            id,
            rule,
            hp,
            stepsizes,
            codec,
            schedule,
            policy,
            e1: vec![T::zero(); dim],
            e2: vec![T::zero(); dim],
            scratch: vec![T::zero(); dim],
        }
    }

    /// Quantizer input at the received iterate.
    fn input<F: Objective<T> + ?Sized>(&mut self, f: &F, t: u64, x_hat: &[T]) -> Vec<T> {
        let (eta, gamma) = (self.hp.eta, self.hp.gamma);
        let mut u = vec![T::zero(); x_hat.len()];
        match self.rule {
            InputRule::Naive => f.gradient_into(x_hat, &mut u),
            InputRule::Differential(Method::Gd) => {
                let eta_prev = self.stepsizes.before(t);
                let eta_now = self.stepsizes.at(t);
                let ratio = if eta_prev == T::zero() {
                    T::zero()
                } else {
                    eta_prev / eta_now
                };
                for ((z, &x), &e) in self.scratch.iter_mut().zip(x_hat).zip(&self.e1) {
                    *z = x + eta_prev * e;
                }
                f.gradient_into(&self.scratch, &mut u);
                for (ui, &e) in u.iter_mut().zip(&self.e1) {
                    *ui = *ui - ratio * e;
                }
            }
            InputRule::Differential(m) => {
                let memory: Vec<T> = self
                    .e1
                    .iter()
                    .zip(&self.e2)
                    .map(|(&e1, &e2)| e1 + gamma * (e1 - e2))
                    .collect();
                let shift = if m == Method::Agd { &memory } else { &self.e1 };
                for ((z, &x), &s) in self.scratch.iter_mut().zip(x_hat).zip(shift) {
                    *z = x + eta * s;
                }
                f.gradient_into(&self.scratch, &mut u);
                for (ui, &mi) in u.iter_mut().zip(&memory) {
                    *ui = *ui - mi;
                }
            }
        }
        u
    }

    fn round<F: Objective<T> + ?Sized>(
        &mut self,
        f: &F,
        channel: &mut Channel,
    ) -> Result<WorkerReport<T>, EngineError> {
        let (t, x_hat) = channel.recv_iterate::<T>(self.id)?;
        let range = self.schedule.next_range();
        let mut u = self.input(f, t, &x_hat);
        let input_norm = norm(&u);
        let overloaded = !(input_norm <= range * (T::one() + lit(DOMAIN_SLACK)));

        let (msg, q) = match self.codec {
            Codec::Exact => {
                let values: Vec<f64> = u.iter().map(|v| v.to_wire()).collect();
                let q = values.iter().map(|&v| T::from_wire(v)).collect();
                (UplinkMessage::Exact { iteration: t, values }, q)
            }
            Codec::Quantized(spec) => {
                if overloaded {
                    if self.policy == OverloadPolicy::Reject {
                        return Err(EngineError::Containment {
                            iteration: t,
                            worker: self.id,
                            norm: input_norm.to_wire(),
                            range: range.to_wire(),
                        });
                    }
                    for ui in u.iter_mut() {
                        *ui = ui.max(-range).min(range);
                    }
                }
                let out = spec.at_range(range)?.quantize(&u)?;
                let payload = Payload {
                    iteration: t,
                    rate: spec.rate(),
                    indices: out.indices,
                };
                (UplinkMessage::Quantized(payload), out.reconstruction)
            }
        };
        std::mem::swap(&mut self.e1, &mut self.e2);
        for ((e, &qi), &ui) in self.e1.iter_mut().zip(&q).zip(&u) {
            *e = qi - ui;
        }
        channel.send_payload(self.id, &msg)?;
        let bits = match &msg {
            UplinkMessage::Quantized(p) => p.indices.len() * p.rate as usize,
            UplinkMessage::Exact { values, .. } => 64 * values.len(),
        };
        Ok(WorkerReport {
            input_norm,
            range,
            bits,
            overloaded,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Update {
    Gd,
    Agd,
    Hb,
    Average,
}

/// Server half: owns the iterate, decodes payloads, applies the update.
#[derive(Debug, Clone)]
pub struct Server<T> {
    update: Update,
    hp: HyperParams<T>,
    stepsizes: Stepsizes<T>,
    codecs: Vec<Codec>,
    schedules: Vec<RangeSchedule<T>>,
    x: Vec<T>,
    aux: Vec<T>,
    t: u64,
}

impl<T: Scalar> Server<T> {
    pub fn iterate(&self) -> &[T] {
        &self.x
    }

    /// `y_t` for DQ-AGD, `x_{t-1}` for DQ-HB.
    pub fn secondary(&self) -> &[T] {
        &self.aux
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    fn broadcast(&self, channel: &mut Channel) -> Result<(), EngineError> {
        channel.send_iterate(self.t, &self.x)?;
        Ok(())
    }

    fn decode(&mut self, worker: usize, channel: &mut Channel) -> Result<Vec<T>, EngineError> {
        let dim = self.x.len();
        let codec = self.codecs[worker];
        let range = self.schedules[worker].next_range();
        let msg = channel.recv_payload(worker, dim, codec.rate())?;
        if msg.iteration() != self.t {
            return Err(EngineError::OutOfStep {
                worker,
                expected: self.t,
                got: msg.iteration(),
            });
        }
        match (codec, msg) {
            (Codec::Quantized(spec), UplinkMessage::Quantized(p)) => {
                Ok(spec.at_range(range)?.reconstruct(&p.indices)?)
            }
            (Codec::Exact, UplinkMessage::Exact { values, .. }) => Ok(values.into_iter().map(T::from_wire).collect()),
            _ => Err(TransportError::Framing("uplink kind does not match the negotiated codec".into()).into()),
        }
    }

    fn receive(&mut self, channel: &mut Channel) -> Result<(), EngineError> {
        let k = self.codecs.len();
        let mut qs = Vec::with_capacity(k);
        for w in 0..k {
            qs.push(self.decode(w, channel)?);
        }
        let gamma = self.hp.gamma;
        match self.update {
            Update::Gd => {
                let eta = self.stepsizes.at(self.t);
                for (x, &q) in self.x.iter_mut().zip(&qs[0]) {
                    *x = *x - eta * q;
                }
            }
            Update::Agd => {
                let eta = self.hp.eta;
                for ((x, y), &q) in self.x.iter_mut().zip(self.aux.iter_mut()).zip(&qs[0]) {
                    let y_next = *x - eta * q;
                    *x = y_next + gamma * (y_next - *y);
                    *y = y_next;
                }
            }
            Update::Hb => {
                let eta = self.hp.eta;
                for ((x, prev), &q) in self.x.iter_mut().zip(self.aux.iter_mut()).zip(&qs[0]) {
                    let x_next = *x - eta * q + gamma * (*x - *prev);
                    *prev = *x;
                    *x = x_next;
                }
            }
            Update::Average => {
                let coef = self.hp.eta / lit::<T>(k as f64);
                for (i, x) in self.x.iter_mut().enumerate() {
                    let sum = qs.iter().fold(T::zero(), |acc, q| acc + q[i]);
                    *x = *x - coef * sum;
                }
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// Observations of one round across all workers.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport<T> {
    pub iteration: u64,
    pub workers: Vec<WorkerReport<T>>,
}

impl<T: Scalar> RoundReport<T> {
    pub fn bits(&self) -> usize {
        self.workers.iter().map(|w| w.bits).sum()
    }

    pub fn overloads(&self) -> usize {
        self.workers.iter().filter(|w| w.overloaded).count()
    }
}

/// Server, workers and the channel between them.
#[derive(Debug, Clone)]
pub struct QuantizedEngine<T> {
    server: Server<T>,
    workers: Vec<Worker<T>>,
    channel: Channel,
}

impl<T: Scalar> QuantizedEngine<T> {
    /// Single-worker differential scheme (DQ-GD, DQ-AGD or DQ-HB).
    pub fn differential(
        method: Method,
        hp: HyperParams<T>,
        x0: &[T],
        codec: Codec,
        schedule: RangeSchedule<T>,
        policy: OverloadPolicy,
    ) -> Result<Self, EngineError> {
        Self::build(
            InputRule::Differential(method),
            hp,
            Stepsizes::Constant(hp.eta),
            x0,
            vec![codec],
            vec![schedule],
            policy,
        )
    }

    /// Differential GD with a per-iteration stepsize sequence.
    pub fn differential_varying(
        hp: HyperParams<T>,
        stepsizes: Stepsizes<T>,
        x0: &[T],
        codec: Codec,
        schedule: RangeSchedule<T>,
        policy: OverloadPolicy,
    ) -> Result<Self, EngineError> {
        Self::build(
            InputRule::Differential(Method::Gd),
            hp,
            stepsizes,
            x0,
            vec![codec],
            vec![schedule],
            policy,
        )
    }

    /// K-worker naive quantization of local gradients.
    pub fn naive(
        hp: HyperParams<T>,
        x0: &[T],
        codecs: Vec<Codec>,
        schedules: Vec<RangeSchedule<T>>,
        policy: OverloadPolicy,
    ) -> Result<Self, EngineError> {
        Self::build(
            InputRule::Naive,
            hp,
            Stepsizes::Constant(hp.eta),
            x0,
            codecs,
            schedules,
            policy,
        )
    }

    fn build(
        rule: InputRule,
        hp: HyperParams<T>,
        stepsizes: Stepsizes<T>,
        x0: &[T],
        codecs: Vec<Codec>,
        schedules: Vec<RangeSchedule<T>>,
        policy: OverloadPolicy,
    ) -> Result<Self, EngineError> {
        let dim = x0.len();
        if dim == 0 {
            return Err(EngineError::Config("empty starting point".into()));
        }
        if codecs.is_empty() || codecs.len() != schedules.len() {
            return Err(EngineError::Config(format!(
                "{} codecs for {} schedules",
                codecs.len(),
                schedules.len()
            )));
        }
        if let Some(Codec::Quantized(q)) = codecs
            .iter()
            .find(|c| matches!(c, Codec::Quantized(q) if q.dim() != dim))
        {
            return Err(EngineError::Config(format!(
                "quantizer of dimension {} for n = {dim}",
                q.dim()
            )));
        }
        if !(hp.eta > T::zero()) || !(hp.gamma >= T::zero() && hp.gamma < T::one()) {
            return Err(EngineError::InvalidConstants(format!(
                "eta={}, gamma={}",
                hp.eta, hp.gamma
            )));
        }
        let update = match rule {
            InputRule::Naive => Update::Average,
            InputRule::Differential(_) if codecs.len() != 1 => {
                return Err(EngineError::Config("differential schemes run a single worker".into()))
            }
            InputRule::Differential(Method::Gd) => Update::Gd,
            InputRule::Differential(Method::Agd) => Update::Agd,
            InputRule::Differential(Method::Hb) => Update::Hb,
        };
        let workers = codecs
            .iter()
            .zip(&schedules)
            .enumerate()
            .map(|(id, (&codec, schedule))| {
                Worker::new(id, rule, hp, stepsizes.clone(), codec, schedule.clone(), policy, dim)
            })
            .collect();
        let server = Server {
            update,
            hp,
            stepsizes,
            codecs: codecs.clone(),
            schedules,
            x: x0.to_vec(),
            aux: x0.to_vec(),
            t: 0,
        };
        Ok(Self {
            channel: Channel::new(codecs.len()),
            server,
            workers,
        })
    }

    /// One round; `locals[k]` is worker `k`'s objective.
    pub fn step<F: Objective<T>>(&mut self, locals: &[F]) -> Result<RoundReport<T>, EngineError> {
        if locals.len() != self.workers.len() {
            return Err(EngineError::Config(format!(
                "{} objectives for {} workers",
                locals.len(),
                self.workers.len()
            )));
        }
        let iteration = self.server.t;
        self.server.broadcast(&mut self.channel)?;
        let mut reports = Vec::with_capacity(self.workers.len());
        for (w, f) in self.workers.iter_mut().zip(locals) {
            reports.push(w.round(f, &mut self.channel)?);
        }
        self.server.receive(&mut self.channel)?;
        Ok(RoundReport {
            iteration,
            workers: reports,
        })
    }

    pub fn server(&self) -> &Server<T> {
        &self.server
    }

    pub fn iterate(&self) -> &[T] {
        self.server.iterate()
    }

    pub fn iteration(&self) -> u64 {
        self.server.t
    }

    /// `(e_{t-1}, e_{t-2})` of worker `k`, for measurement only.
    pub fn worker_errors(&self, k: usize) -> (&[T], &[T]) {
        (&self.workers[k].e1, &self.workers[k].e2)
    }

    pub fn trace(&self) -> &ChannelTrace {
        self.channel.trace()
    }

    pub fn into_trace(self) -> ChannelTrace {
        self.channel.into_trace()
    }
}

/// Water level and real-valued rates of the waterfilling allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub level: f64,
    pub rates: Vec<f64>,
}

/// `R_k = |log2(L_k / nu)|_+` with `sum_k R_k = total`.
pub fn waterfill(l: &[f64], total: f64) -> Result<Allocation, EngineError> {
    if l.is_empty() || l.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(EngineError::InvalidConstants(
            "smoothness constants must be positive".into(),
        ));
    }
    if !(total >= 0.0) || !total.is_finite() {
        return Err(EngineError::InvalidConstants(format!("sum rate {total}")));
    }
    let mut logs: Vec<f64> = l.iter().map(|v| v.log2()).collect();
    logs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut level = logs[0];
    for j in 0..logs.len() {
        acc += logs[j];
        let candidate = (acc - total) / (j + 1) as f64;
        let next_inactive = logs.get(j + 1).is_none_or(|&nx| nx <= candidate);
        if candidate <= logs[j] && next_inactive {
            level = candidate;
            break;
        }
    }
    let rates = l.iter().map(|v| (v.log2() - level).max(0.0)).collect();
    Ok(Allocation {
        level: level.exp2(),
        rates,
    })
}

/// Integer rates summing to `total`: floors of `rates` plus one extra bit for
/// the largest fractional parts.
pub fn integer_rates(rates: &[f64], total: u32) -> Vec<u32> {
    let mut out: Vec<u32> = rates.iter().map(|&r| (r + 1e-9).floor().max(0.0) as u32).collect();
    let assigned: u32 = out.iter().sum();
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = rates[i] - out[i] as f64;
        let fj = rates[j] - out[j] as f64;
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_gaussian_ls, LeastSquares, Matrix};
    use crate::scalar::distance;
    use proptest::prelude::*;

    #[test]
    fn hyperparameter_examples() {
        let gd = optimal_hyperparams(4.0f64, 1.0, Method::Gd).unwrap();
        assert_eq!((gd.eta, gd.sigma), (0.4, 0.6));
        let agd = optimal_hyperparams(4.0f64, 1.0, Method::Agd).unwrap();
        assert_eq!(agd.eta, 0.25);
        assert!((agd.gamma - 1.0 / 3.0).abs() < 1e-15);
        assert!((agd.sigma - 0.5f64.sqrt()).abs() < 1e-15);
        let hb = optimal_hyperparams(4.0f64, 1.0, Method::Hb).unwrap();
        assert!((hb.eta - 4.0 / 9.0).abs() < 1e-15);
        assert!((hb.gamma - 1.0 / 9.0).abs() < 1e-15);
        assert!((hb.sigma - 1.0 / 3.0).abs() < 1e-15);
        assert!(optimal_hyperparams(1.0, 0.0, Method::Gd).is_err());
        assert!(optimal_hyperparams(1.0, 2.0, Method::Gd).is_err());
    }

    fn scalar_quadratic() -> LeastSquares<f64> {
        LeastSquares::new(Matrix::from_row_major(1, 1, vec![1.0]).unwrap(), vec![0.0]).unwrap()
    }

    #[test]
    fn gd_one_step_on_unit_quadratic() {
        let f = scalar_quadratic();
        let hp = HyperParams {
            eta: 1.0,
            gamma: 0.0,
            sigma: 0.0,
        };
        let mut gd = Unquantized::new(Method::Gd, hp, &[1.0]);
        gd.step(&f);
        assert_eq!(gd.iterate(), &[0.0]);
    }

    #[test]
    fn hb_without_momentum_is_gd() {
        let p = make_gaussian_ls(20, 6, 8.0, 4).unwrap();
        let hp = HyperParams {
            eta: 0.3,
            gamma: 0.0,
            sigma: 0.0,
        };
        let mut gd = Unquantized::new(Method::Gd, hp, &p.x0);
        let mut hb = Unquantized::new(Method::Hb, hp, &p.x0);
        let mut agd = Unquantized::new(Method::Agd, hp, &p.x0);
        for _ in 0..50 {
            gd.step(&p.objective);
            hb.step(&p.objective);
            agd.step(&p.objective);
            assert_eq!(gd.iterate(), hb.iterate());
            assert_eq!(gd.iterate(), agd.iterate());
        }
    }

    #[test]
    fn dq_gd_schedule_by_hand() {
        let mut s = RangeSchedule::dq_gd(1.0, 1.0, 0.5, 0.25);
        assert_eq!(s.next_range(), 1.0);
        assert_eq!(s.next_range(), 0.75);
        assert_eq!(s.next_range(), 0.4375);
    }

    #[test]
    fn agd_schedule_without_momentum() {
        let kappa: f64 = 3.0;
        let hp = HyperParams {
            eta: 1.0,
            gamma: 0.0,
            sigma: 0.7,
        };
        let agd = RangeSchedule::dq_agd(3.0, 1.0, 2.0, &hp, 0.2).prefix(30);
        let gd = RangeSchedule::dq_gd(3.0, 2.0 * (kappa + 1.0).sqrt(), 0.7, 0.2).prefix(30);
        for (a, b) in agd.iter().zip(&gd) {
            assert!((a - b).abs() <= 1e-14 * b);
        }
    }

    #[test]
    fn zero_feedback_schedules_are_geometric() {
        let hp = HyperParams {
            eta: 1.0,
            gamma: 0.4,
            sigma: 0.8,
        };
        for s in [
            RangeSchedule::dq_gd(2.0, 1.5, 0.8, 0.0),
            RangeSchedule::dq_agd(2.0, 1.0, 1.5, &hp, 0.0),
            RangeSchedule::dq_hb(2.0, 1.5, &hp, 0.0, 0.0),
        ] {
            let lead = match s.rule() {
                RangeRule::Recursive { lead, .. } => *lead,
                _ => unreachable!(),
            };
            for (t, r) in s.prefix(40).into_iter().enumerate() {
                assert_eq!(r, 0.8f64.powi(t as i32) * lead);
            }
        }
    }

    #[test]
    fn waterfill_examples() {
        let a = waterfill(&[4.0, 1.0], 2.0).unwrap();
        assert!((a.level - 1.0).abs() < 1e-12);
        assert!((a.rates[0] - 2.0).abs() < 1e-12 && a.rates[1].abs() < 1e-12);
        let eq = waterfill(&[3.0; 4], 6.0).unwrap();
        assert!(eq.rates.iter().all(|r| (r - 1.5).abs() < 1e-12));
        let zero = waterfill(&[2.0, 5.0, 1.0], 0.0).unwrap();
        assert!(zero.rates.iter().all(|&r| r == 0.0) && zero.level >= 5.0 * (1.0 - 1e-15));
        assert_eq!(integer_rates(&eq.rates, 6), vec![2, 2, 1, 1]);
        assert_eq!(integer_rates(&a.rates, 2), vec![2, 0]);
    }

    /// Water level by bisection on the sum-rate function, independent of the
    /// active-set computation.
    fn bisect_level(l: &[f64], total: f64) -> f64 {
        let sum = |nu: f64| l.iter().map(|v| (v / nu).log2().max(0.0)).sum::<f64>();
        let (mut lo, mut hi) = (1e-300f64, l.iter().cloned().fold(0.0, f64::max));
        for _ in 0..3000 {
            let mid = (lo * hi).sqrt();
            if sum(mid) > total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    proptest! {
        #[test]
        fn waterfill_against_bisection(l in prop::collection::vec(0.01f64..100.0, 1..8), total in 0.0f64..40.0) {
            let a = waterfill(&l, total).unwrap();
            let sum: f64 = a.rates.iter().sum();
            prop_assert!((sum - total).abs() <= 1e-9);
            if total > 0.0 {
                let nu = bisect_level(&l, total);
                prop_assert!((a.level - nu).abs() <= 1e-9 * nu);
            }
            for i in 0..l.len() {
                for j in 0..l.len() {
                    if l[i] >= l[j] {
                        prop_assert!(a.rates[i] >= a.rates[j] - 1e-12);
                    }
                }
            }
            let ints = integer_rates(&a.rates, total.round() as u32);
            prop_assert_eq!(ints.iter().sum::<u32>(), total.round() as u32);
        }
    }

    fn exact_engine(method: Method, hp: HyperParams<f64>, x0: &[f64]) -> QuantizedEngine<f64> {
        QuantizedEngine::differential(
            method,
            hp,
            x0,
            Codec::Exact,
            RangeSchedule::custom(|_| 1.0),
            OverloadPolicy::Reject,
        )
        .unwrap()
    }

    #[test]
    fn exact_channel_reproduces_unquantized() {
        let p = make_gaussian_ls(30, 8, 12.0, 11).unwrap();
        let (l, mu) = (p.objective.smoothness(), p.objective.strong_convexity());
        for m in [Method::Gd, Method::Agd, Method::Hb] {
            let hp = optimal_hyperparams(l, mu, m).unwrap();
            let mut twin = Unquantized::new(m, hp, &p.x0);
            let mut dq = exact_engine(m, hp, &p.x0);
            for _ in 0..100 {
                twin.step(&p.objective);
                dq.step(std::slice::from_ref(&p.objective)).unwrap();
                assert_eq!(twin.iterate(), dq.iterate(), "{m:?}");
            }
        }
        let hp = optimal_hyperparams(l, mu, Method::Gd).unwrap();
        let mut twin = Unquantized::new(Method::Gd, hp, &p.x0);
        let mut nq = QuantizedEngine::naive(
            hp,
            &p.x0,
            vec![Codec::Exact],
            vec![RangeSchedule::custom(|_| 1.0)],
            OverloadPolicy::Reject,
        )
        .unwrap();
        for _ in 0..100 {
            twin.step(&p.objective);
            nq.step(std::slice::from_ref(&p.objective)).unwrap();
            assert_eq!(twin.iterate(), nq.iterate());
        }
    }

    #[test]
    fn first_input_is_plain_gradient() {
        let p = make_gaussian_ls(12, 4, 3.0, 2).unwrap();
        let hp = optimal_hyperparams(p.objective.smoothness(), p.objective.strong_convexity(), Method::Gd).unwrap();
        let mut w = Worker::new(
            0,
            InputRule::Differential(Method::Gd),
            hp,
            Stepsizes::Sequence(Arc::new(|t| 0.1 + t as f64)),
            Codec::Exact,
            RangeSchedule::custom(|_| 1.0),
            OverloadPolicy::Reject,
            4,
        );
        w.e1 = vec![f64::NAN; 4];
        w.e1.iter_mut().for_each(|e| *e = 0.0);
        let u = w.input(&p.objective, 0, &p.x0);
        assert_eq!(u, p.objective.gradient(&p.x0));
    }

    #[test]
    fn momentum_inputs_share_formula() {
        let p = make_gaussian_ls(16, 5, 6.0, 3).unwrap();
        let hp = HyperParams {
            eta: 0.2,
            gamma: 0.3,
            sigma: 0.8,
        };
        let mk = |m| {
            let mut w = Worker::new(
                0,
                InputRule::Differential(m),
                hp,
                Stepsizes::Constant(0.2),
                Codec::Exact,
                RangeSchedule::custom(|_| 1.0),
                OverloadPolicy::Reject,
                5,
            );
            w.e1 = vec![0.01, -0.02, 0.03, 0.0, 0.05];
            w.e2 = vec![0.02, 0.01, -0.01, 0.04, 0.0];
            w
        };
        let (mut agd, mut hb) = (mk(Method::Agd), mk(Method::Hb));
        // identical gradient arguments make the two inputs coincide
        let memory: Vec<f64> = agd.e1.iter().zip(&agd.e2).map(|(a, b)| a + 0.3 * (a - b)).collect();
        let x_for_hb: Vec<f64> =
            p.x0.iter()
                .zip(&memory)
                .zip(&hb.e1)
                .map(|((x, m), e)| x + 0.2 * m - 0.2 * e)
                .collect();
        let ua = agd.input(&p.objective, 3, &p.x0);
        let uh = hb.input(&p.objective, 3, &x_for_hb);
        assert!(distance(&ua, &uh) < 1e-14);
    }

    #[test]
    fn containment_violation_is_reported() {
        let p = make_gaussian_ls(12, 4, 3.0, 2).unwrap();
        let hp = optimal_hyperparams(p.objective.smoothness(), p.objective.strong_convexity(), Method::Gd).unwrap();
        let spec = QuantizerSpec::scalar_uniform(4, 3).unwrap();
        let mut e = QuantizedEngine::differential(
            Method::Gd,
            hp,
            &p.x0,
            Codec::Quantized(spec),
            RangeSchedule::custom(|_| 1e-6),
            OverloadPolicy::Reject,
        )
        .unwrap();
        let err = e.step(std::slice::from_ref(&p.objective)).unwrap_err();
        assert!(matches!(
            err,
            EngineError::Containment {
                iteration: 0,
                worker: 0,
                ..
            }
        ));
        let mut s = QuantizedEngine::differential(
            Method::Gd,
            hp,
            &p.x0,
            Codec::Quantized(spec),
            RangeSchedule::custom(|_| 1e-6),
            OverloadPolicy::Saturate,
        )
        .unwrap();
        let rep = s.step(std::slice::from_ref(&p.objective)).unwrap();
        assert_eq!(rep.overloads(), 1);
    }

    #[test]
    fn server_decodes_from_bits_alone() {
        // a canary in the worker's private error memory that does not move any
        // quantizer index leaves the server state bitwise unchanged
        let p = make_gaussian_ls(24, 6, 4.0, 13).unwrap();
        let (l, mu) = (p.objective.smoothness(), p.objective.strong_convexity());
        let hp = optimal_hyperparams(l, mu, Method::Gd).unwrap();
        let spec = QuantizerSpec::scalar_uniform(6, 4).unwrap();
        let a = spec.relative_resolution::<f64>();
        let make = || {
            QuantizedEngine::differential(
                Method::Gd,
                hp,
                &p.x0,
                Codec::Quantized(spec),
                RangeSchedule::dq_gd(l, p.d, hp.sigma, a),
                OverloadPolicy::Reject,
            )
            .unwrap()
        };
        let (mut clean, mut canary) = (make(), make());
        let f = std::slice::from_ref(&p.objective);
        for _ in 0..5 {
            clean.step(f).unwrap();
            canary.step(f).unwrap();
        }
        canary.workers[0].e1[0] += 1e-15;
        clean.step(f).unwrap();
        canary.step(f).unwrap();
        assert_eq!(clean.iterate(), canary.iterate());
        assert_ne!(clean.worker_errors(0).0, canary.worker_errors(0).0);
    }
}
