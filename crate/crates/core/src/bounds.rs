//! Closed-form rate, threshold and envelope evaluators.
//!
//! All evaluators work in `f64` and return unclipped values; [`clip`] caps a
//! contraction factor at one for display.

use crate::engines::{Algorithm, Method};

/// `a = rho_n 2^-R`
pub fn resolution(rho: f64, rate: f64) -> f64 {
    rho * (-rate).exp2()
}

pub fn clip(v: f64) -> f64 {
    v.min(1.0)
}

/// Unquantized contraction factor of a method tuned for condition number `kappa`.
pub fn sigma(method: Method, kappa: f64) -> f64 {
    let sk = kappa.sqrt();
    match method {
        Method::Gd => (kappa - 1.0) / (kappa + 1.0),
        Method::Agd => (1.0 - 1.0 / sk).sqrt(),
        Method::Hb => (sk - 1.0) / (sk + 1.0),
    }
}

/// Momentum coefficient of a method tuned for `kappa`.
pub fn gamma(method: Method, kappa: f64) -> f64 {
    let sk = kappa.sqrt();
    match method {
        Method::Gd => 0.0,
        Method::Agd => (sk - 1.0) / (sk + 1.0),
        Method::Hb => ((sk - 1.0) / (sk + 1.0)).powi(2),
    }
}

/// `lambda = (1 + gamma + gamma / sigma) sqrt(kappa + 1)` for AGD.
pub fn agd_lambda(kappa: f64) -> f64 {
    let g = gamma(Method::Agd, kappa);
    let s = sigma(Method::Agd, kappa);
    let ratio = if g == 0.0 { 0.0 } else { g / s };
    (1.0 + g + ratio) * (kappa + 1.0).sqrt()
}

/// `p(r) = r^2 - r a (1 + gamma) - a gamma`
pub fn char_poly(r: f64, a: f64, gamma: f64) -> f64 {
    r * r - r * a * (1.0 + gamma) - a * gamma
}

/// `phi = (1 + gamma)/2 + sqrt((1 + gamma)^2 + 4 gamma / a) / 2`
pub fn phi(a: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 1.0;
    }
    0.5 * (1.0 + gamma) + 0.5 * ((1.0 + gamma).powi(2) + 4.0 * gamma / a).sqrt()
}

/// Roots `(phi_+, phi_-)` of [`char_poly`], with `phi_+ = a phi >= 0 >= phi_-`.
pub fn phi_roots(a: f64, gamma: f64) -> (f64, f64) {
    let b = a * (1.0 + gamma);
    let c = a * gamma;
    let disc = (b * b + 4.0 * c).sqrt();
    let plus = 0.5 * (b + disc);
    // product of the roots is -c; avoids cancellation in b - disc
    let minus = if plus == 0.0 { 0.0 } else { -c / plus };
    (plus, minus)
}

/// Asymptotic rate of a momentum scheme: `max{sigma, a phi}`.
pub fn momentum_rate(sigma: f64, gamma: f64, a: f64) -> f64 {
    sigma.max(phi_roots(a, gamma).0)
}

/// Achievable contraction factor of `algo` at rate `R` with covering efficiency `rho`.
pub fn achievable_rate(algo: Algorithm, kappa: f64, rho: f64, rate: f64) -> f64 {
    let a = resolution(rho, rate);
    let m = algo.method();
    let s = sigma(m, kappa);
    match algo {
        Algorithm::Gd | Algorithm::Agd | Algorithm::Hb => s,
        Algorithm::DqGd => s.max(a),
        Algorithm::DqAgd | Algorithm::DqHb => momentum_rate(s, gamma(m, kappa), a),
        Algorithm::NqGd => s + 2.0 * kappa / (kappa + 1.0) * a,
    }
}

/// Contraction-factor bound of K-worker naive quantization:
/// `sigma_GD + (eta rho / K) sum_k L_k 2^-R_k`.
pub fn nq_sigma(l: f64, mu: f64, rho: f64, local_smoothness: &[f64], rates: &[f64]) -> f64 {
    let eta = 2.0 / (l + mu);
    let k = local_smoothness.len() as f64;
    let sum: f64 = local_smoothness
        .iter()
        .zip(rates)
        .map(|(lk, rk)| lk * (-rk).exp2())
        .sum();
    sigma(Method::Gd, l / mu) + eta * rho / k * sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateThreshold {
    Bits(f64),
    /// `sigma = 0`: the unquantized method converges in one step, so no finite
    /// rate matches it.
    OneStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Above `r1` the scheme converges linearly.
    pub r1: f64,
    /// At or above `r2` it matches its unquantized contraction factor.
    pub r2: RateThreshold,
}

pub fn thresholds(rho: f64, sigma: f64, gamma: f64) -> Thresholds {
    let r1 = (1.0 + 2.0 * gamma).log2() + rho.log2();
    let r2 = if sigma == 0.0 {
        RateThreshold::OneStep
    } else {
        RateThreshold::Bits((((1.0 + gamma) * sigma + gamma) / (sigma * sigma)).log2() + rho.log2())
    };
    Thresholds { r1, r2 }
}

/// Thresholds of a method tuned for `kappa`.
pub fn method_thresholds(method: Method, kappa: f64, rho: f64) -> Thresholds {
    thresholds(rho, sigma(method, kappa), gamma(method, kappa))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConverseFamily {
    GradientDescent,
    GradientMethods,
}

impl ConverseFamily {
    pub fn of(algo: Algorithm) -> Self {
        match algo {
            Algorithm::Gd | Algorithm::DqGd | Algorithm::NqGd => ConverseFamily::GradientDescent,
            Algorithm::Agd | Algorithm::Hb | Algorithm::DqAgd | Algorithm::DqHb => ConverseFamily::GradientMethods,
        }
    }
}

/// Lower bound on the contraction factor of any rate-`R` scheme in the family.
pub fn converse(family: ConverseFamily, kappa: f64, rate: f64) -> f64 {
    let floor = (-rate).exp2();
    match family {
        ConverseFamily::GradientDescent => sigma(Method::Gd, kappa).max(floor),
        ConverseFamily::GradientMethods => sigma(Method::Hb, kappa).max(floor),
    }
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let mut flo = f(lo);
    if flo == 0.0 {
        return Some(lo);
    }
    if flo.signum() == f(hi).signum() {
        return None;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn r2_bits(method: Method, kappa: f64) -> f64 {
    match method_thresholds(method, kappa, 1.0).r2 {
        RateThreshold::Bits(b) => b,
        RateThreshold::OneStep => f64::INFINITY,
    }
}

/// Condition number where the second thresholds of AGD and GD coincide.
/// Below it AGD needs fewer bits than GD to match its unquantized rate.
pub fn r2_crossing_kappa() -> Option<f64> {
    bisect(|k| r2_bits(Method::Agd, k) - r2_bits(Method::Gd, k), 1.01, 10.0, 1e-12)
}

/// Condition number above which `sigma_AGD < sigma_GD`.
pub fn sigma_crossing_kappa() -> Option<f64> {
    bisect(|k| sigma(Method::Agd, k) - sigma(Method::Gd, k), 2.0, 100.0, 1e-12)
}

/// Problem and quantizer constants shared by the finite-`t` envelopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeConstants {
    pub l: f64,
    pub mu: f64,
    pub d: f64,
    pub rho: f64,
    pub rate: f64,
}

impl EnvelopeConstants {
    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    pub fn a(&self) -> f64 {
        resolution(self.rho, self.rate)
    }
}

/// `b_t`; `b_{-1} = 0`. The equality branch applies when
/// `|sigma - a| < 1e-12 sigma`.
pub fn b_coefficient(sigma: f64, a: f64, t: i64) -> f64 {
    if t < 0 {
        return 0.0;
    }
    if (sigma - a).abs() < 1e-12 * sigma {
        (t + 1) as f64
    } else {
        a / (sigma - a).abs()
    }
}

/// `||x_t - x*|| <= max{sigma, a}^t (1 + eta L b_{t-1}) D` for differential GD.
pub fn dq_gd_envelope(c: &EnvelopeConstants, t: u64) -> f64 {
    let s = sigma(Method::Gd, c.kappa());
    let a = c.a();
    let eta = 2.0 / (c.l + c.mu);
    s.max(a).powi(t as i32) * (1.0 + eta * c.l * b_coefficient(s, a, t as i64 - 1)) * c.d
}

/// Closed-form solution `r_t = sigma^t c0 + phi_+^t c_+ + phi_-^t c_-` of the
/// momentum range recursion with `r_{-1} = r_{-2} = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionSolution {
    pub sigma: f64,
    pub c0: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub phi_plus: f64,
    pub phi_minus: f64,
}

impl RecursionSolution {
    /// `None` when the closed form degenerates (`a = 0`, repeated roots, or
    /// `sigma` a root of the characteristic polynomial).
    pub fn new(lead: f64, sigma: f64, gamma: f64, a: f64) -> Option<Self> {
        let (phi_plus, phi_minus) = phi_roots(a, gamma);
        let p = char_poly(sigma, a, gamma);
        if a == 0.0 || sigma == 0.0 || phi_plus == phi_minus || p.abs() < 1e-14 * sigma * sigma {
            return None;
        }
        let c0 = sigma * sigma / p * lead;
        let spread = phi_plus - phi_minus;
        let c_plus = -c0 * phi_plus * phi_plus / (sigma * sigma) * (sigma - phi_minus) / spread;
        let c_minus = c0 * phi_minus * phi_minus / (sigma * sigma) * (sigma - phi_plus) / spread;
        Some(Self {
            sigma,
            c0,
            c_plus,
            c_minus,
            phi_plus,
            phi_minus,
        })
    }

    pub fn at(&self, t: u64) -> f64 {
        let t = t as i32;
        self.sigma.powi(t) * self.c0 + self.phi_plus.powi(t) * self.c_plus + self.phi_minus.powi(t) * self.c_minus
    }
}

/// `r_t` of the momentum range recursion by direct unrolling.
pub fn momentum_range_unrolled(lead: f64, sigma: f64, gamma: f64, a: f64, t: u64) -> f64 {
    let (mut r1, mut r2) = (0.0, 0.0);
    let mut r = 0.0;
    for s in 0..=t {
        r = sigma.powi(s as i32) * lead + (r1 + gamma * (r1 + r2)) * a;
        r2 = r1;
        r1 = r;
    }
    r
}

/// `r_t` of the momentum range recursion, closed form where it is well defined.
pub fn momentum_range(lead: f64, sigma: f64, gamma: f64, a: f64, t: u64) -> f64 {
    match RecursionSolution::new(lead, sigma, gamma, a) {
        Some(sol) => sol.at(t),
        None => momentum_range_unrolled(lead, sigma, gamma, a, t),
    }
}

/// `||y_t - x*|| <= sigma^t c + eta (phi_+^(t-1) c_+ + phi_-^(t-1) c_-)` with
/// `c = sqrt(kappa + 1) D + eta c0 / sigma` for differential AGD; equals
/// `sqrt(kappa + 1) D` at `t = 0`.
pub fn dq_agd_envelope(c: &EnvelopeConstants, t: u64) -> f64 {
    let kappa = c.kappa();
    let s = sigma(Method::Agd, kappa);
    let g = gamma(Method::Agd, kappa);
    let eta = 1.0 / c.l;
    let start = (kappa + 1.0).sqrt() * c.d;
    if t == 0 {
        return start;
    }
    let lead = c.l * c.d * agd_lambda(kappa);
    s.powi(t as i32) * start + eta * momentum_range(lead, s, g, c.a(), t - 1)
}

/// `||x_t - x*|| <= (sigma^t c + eta (phi_+^(t-1) c_+ + phi_-^(t-1) c_-)) max(t, 1)^alpha`
/// with `c = e^alpha sqrt(2) D + eta c0 / sigma` for differential HB.
pub fn dq_hb_envelope(c: &EnvelopeConstants, alpha: f64, t: u64) -> f64 {
    let kappa = c.kappa();
    let s = sigma(Method::Hb, kappa);
    let g = gamma(Method::Hb, kappa);
    let eta = (2.0 / (c.l.sqrt() + c.mu.sqrt())).powi(2);
    let growth = (t.max(1) as f64).powf(alpha);
    let start = alpha.exp() * 2f64.sqrt() * c.d;
    if t == 0 {
        return start;
    }
    let lead = alpha.exp() * 2f64.sqrt() * c.l * c.d;
    (s.powi(t as i32) * start + eta * momentum_range(lead, s, g, c.a(), t - 1)) * growth
}

/// `||x_t - x*|| <= sigma^t D` for naive quantization, `sigma` from [`nq_sigma`].
pub fn nq_envelope(sigma_nq: f64, d: f64, t: u64) -> f64 {
    sigma_nq.powi(t as i32) * d
}

/// Unquantized AGD: `(sigma^t sqrt(kappa + 1) D, sigma^t lambda D)` bounding
/// `||y_t - x*||` and `||x_t - x*||`.
pub fn agd_envelopes(t: u64, kappa: f64, d: f64) -> (f64, f64) {
    let st = sigma(Method::Agd, kappa).powi(t as i32);
    (st * (kappa + 1.0).sqrt() * d, st * agd_lambda(kappa) * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn achievable_examples() {
        assert_relative_eq!(achievable_rate(Algorithm::DqGd, 4.0, 1.0, 3.0), 0.6, epsilon = 1e-15);
        assert_eq!(clip(achievable_rate(Algorithm::DqGd, 4.0, 4.0, 2.0)), 1.0);
        for rate in 1..12 {
            let a = resolution(4.0, rate as f64);
            let s = sigma(Method::Gd, 7.0);
            assert_eq!(
                momentum_rate(s, 0.0, a),
                achievable_rate(Algorithm::DqGd, 7.0, 4.0, rate as f64)
            );
        }
        assert_relative_eq!(
            achievable_rate(Algorithm::NqGd, 5.0, 4.0, 8.0),
            2.0 / 3.0 + 10.0 / 6.0 * 4.0 / 256.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn phi_degenerates_without_momentum() {
        assert_eq!(phi(0.3, 0.0), 1.0);
        assert_eq!(phi_roots(0.3, 0.0), (0.3, 0.0));
    }

    #[test]
    fn root_of_characteristic_polynomial() {
        let (p, _) = phi_roots(0.25, 1.0 / 3.0);
        assert!(char_poly(p, 0.25, 1.0 / 3.0).abs() < 1e-12);
        assert_relative_eq!(p, 0.25 * phi(0.25, 1.0 / 3.0), max_relative = 1e-14);
    }

    #[test]
    fn threshold_examples() {
        let rho = 4.0;
        let t = thresholds(rho, 0.6, 0.0);
        assert_relative_eq!(t.r1, 2.0, epsilon = 1e-15);
        assert_eq!(t.r2, RateThreshold::Bits((rho / 0.6f64).log2()));
        assert_eq!(thresholds(rho, 0.0, 0.0).r2, RateThreshold::OneStep);
        for kappa in [2.0, 5.0, 10.0, 50.0] {
            let bits = |m| match method_thresholds(m, kappa, rho).r2 {
                RateThreshold::Bits(b) => b,
                RateThreshold::OneStep => unreachable!(),
            };
            assert!(bits(Method::Hb) > bits(Method::Gd) && bits(Method::Hb) > bits(Method::Agd));
        }
    }

    #[test]
    fn crossings() {
        let k = r2_crossing_kappa().unwrap();
        assert!(k > 2.0 && k < 2.4, "{k}");
        assert!(r2_bits(Method::Agd, 1.5) < r2_bits(Method::Gd, 1.5));
        assert!(r2_bits(Method::Agd, 4.0) > r2_bits(Method::Gd, 4.0));
        let k = sigma_crossing_kappa().unwrap();
        assert!((sigma(Method::Agd, k) - sigma(Method::Gd, k)).abs() < 1e-12);
        assert!((k - 11.444525046240788).abs() < 1e-9, "{k}");
        assert!(sigma(Method::Agd, 20.0) < sigma(Method::Gd, 20.0));
    }

    #[test]
    fn converse_examples() {
        assert_relative_eq!(
            converse(ConverseFamily::GradientDescent, 4.0, 3.0),
            0.6,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            converse(ConverseFamily::GradientMethods, 4.0, 3.0),
            1.0 / 3.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn converse_below_achievable_on_grid() {
        for kappa in [1.0, 1.5, 2.0, 4.0, 10.0, 25.0, 100.0, 1000.0] {
            for n in [1usize, 2, 4, 16, 64] {
                let rho = (n as f64).sqrt();
                for rate in 1..=16 {
                    for algo in Algorithm::ALL {
                        if !algo.is_quantized() {
                            continue;
                        }
                        let ach = achievable_rate(algo, kappa, rho, rate as f64);
                        let conv = converse(ConverseFamily::of(algo), kappa, rate as f64);
                        assert!(conv <= ach + 1e-15, "{algo:?} {kappa} {n} {rate}");
                    }
                }
            }
        }
    }

    #[test]
    fn hb_is_fastest_unquantized() {
        for i in 1..200 {
            let kappa = 1.0 + i as f64 * 0.5;
            let hb = sigma(Method::Hb, kappa);
            assert!(hb < sigma(Method::Gd, kappa) && hb < sigma(Method::Agd, kappa));
        }
    }

    #[test]
    fn envelope_starts() {
        let c = EnvelopeConstants {
            l: 4.0,
            mu: 1.0,
            d: 2.5,
            rho: 4.0,
            rate: 5.0,
        };
        assert_eq!(dq_gd_envelope(&c, 0), 2.5);
        assert_relative_eq!(dq_agd_envelope(&c, 0), 5f64.sqrt() * 2.5);
        let (y, x) = agd_envelopes(0, 4.0, 1.0);
        assert!(y >= 1.0);
        assert_relative_eq!(
            x,
            (1.0 + 1.0 / 3.0 + (1.0 / 3.0) / 0.5f64.sqrt()) * 5f64.sqrt(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn b_equality_branch() {
        assert_eq!(b_coefficient(0.5, 0.5, 3), 4.0);
        assert_eq!(b_coefficient(0.5, 0.5 * (1.0 + 1e-13), 3), 4.0);
        assert_relative_eq!(b_coefficient(0.5, 0.25, 3), 1.0);
        assert_eq!(b_coefficient(0.5, 0.25, -1), 0.0);
    }

    #[test]
    fn nq_sigma_uniform_matches_closed_form() {
        let (l, mu, rho) = (5.0, 1.0, 4.0);
        let v = nq_sigma(l, mu, rho, &[l], &[6.0]);
        assert_relative_eq!(v, achievable_rate(Algorithm::NqGd, 5.0, rho, 6.0), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn vieta(gamma in 0.0f64..0.99, rate in 0.0f64..20.0, rho in 1.0f64..10.0) {
            let a = resolution(rho, rate);
            let (p, m) = phi_roots(a, gamma);
            prop_assert!(p > 0.0 && m <= 0.0);
            prop_assert!((p * m + a * gamma).abs() <= 1e-12 * (1.0 + a * gamma));
            prop_assert!((p + m - a * (1.0 + gamma)).abs() <= 1e-12 * (1.0 + a));
            let scale = 1.0 + p * p;
            prop_assert!(char_poly(p, a, gamma).abs() <= 1e-12 * scale);
            prop_assert!(char_poly(m, a, gamma).abs() <= 1e-12 * scale);
        }

        #[test]
        fn second_threshold_equivalence(kappa in 1.1f64..200.0, rate in 0.0f64..16.0, n in 1usize..64) {
            let rho = (n as f64).sqrt();
            for m in [Method::Gd, Method::Agd, Method::Hb] {
                let (s, g) = (sigma(m, kappa), gamma(m, kappa));
                let RateThreshold::Bits(r2) = thresholds(rho, s, g).r2 else { unreachable!() };
                let plus = phi_roots(resolution(rho, rate), g).0;
                // skip knife-edge points where rounding decides the comparison
                if (rate - r2).abs() > 1e-9 {
                    prop_assert_eq!(rate >= r2, plus <= s);
                }
            }
        }

        #[test]
        fn closed_form_matches_unrolling(kappa in 1.5f64..100.0, rate in 1.0f64..14.0, t in 0u64..60) {
            let (s, g) = (sigma(Method::Agd, kappa), gamma(Method::Agd, kappa));
            let a = resolution(4.0, rate);
            let lead = 3.0;
            let closed = RecursionSolution::new(lead, s, g, a).map(|sol| sol.at(t));
            let unrolled = momentum_range_unrolled(lead, s, g, a, t);
            if let Some(v) = closed {
                prop_assert!((v - unrolled).abs() <= 1e-9 * unrolled.abs().max(1.0), "{} vs {}", v, unrolled);
            }
        }
    }
}
