//! Prior families over GP parameters.
//!
//! Gamma priors are parameterized by shape and rate, Normal priors by mean and
//! standard deviation. Closed-form maximum-likelihood fits are provided for
//! Gamma and Normal, together with the Gamma–Gamma KL divergence used to
//! compare learned priors against a known ground truth.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, trigamma};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Modes at zero (shape < 1) are clamped here so they remain valid positive parameters.
pub const MODE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorFamily {
    Gamma(GammaPrior),
    Normal(NormalPrior),
    Uniform(UniformPrior),
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("Gamma(shape={shape}, rate={rate})")));
        }
        Ok(GammaPrior { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// Density mode, `(a - 1) / b`, clamped at [`MODE_FLOOR`].
    pub fn mode(&self) -> f64 {
        ((self.shape - 1.0) / self.rate).max(MODE_FLOOR)
    }

    /// Log-density; −∞ for `x <= 0`.
    pub fn log_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    /// d/dx of the log-density.
    pub fn grad_log_pdf(&self, x: f64) -> f64 {
        (self.shape - 1.0) / x - self.rate
    }

    /// Derivatives of the log-density at `x` with respect to (shape, rate).
    pub fn grad_log_pdf_params(&self, x: f64) -> (f64, f64) {
        (self.rate.ln() - digamma(self.shape) + x.ln(), self.shape / self.rate - x)
    }

    fn log_likelihood(&self, n: f64, sum_x: f64, sum_ln_x: f64) -> f64 {
        n * (self.shape * self.rate.ln() - ln_gamma(self.shape)) + (self.shape - 1.0) * sum_ln_x
            - self.rate * sum_x
    }
}

impl NormalPrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(mean.is_finite() && std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidParameter(format!("Normal(mean={mean}, std={std})")));
        }
        Ok(NormalPrior { mean, std })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - LN_SQRT_2PI
    }

    pub fn grad_log_pdf(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.std * self.std)
    }
}

impl UniformPrior {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("Uniform(lo={lo}, hi={hi})")));
        }
        Ok(UniformPrior { lo, hi })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            f64::NEG_INFINITY
        } else {
            -(self.hi - self.lo).ln()
        }
    }
}

impl PriorFamily {
    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        GammaPrior::new(shape, rate).map(PriorFamily::Gamma)
    }

    pub fn normal(mean: f64, std: f64) -> Result<Self> {
        NormalPrior::new(mean, std).map(PriorFamily::Normal)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        UniformPrior::new(lo, hi).map(PriorFamily::Uniform)
    }

    /// Exact log-density. Points outside the support give −∞ rather than an error so
    /// that optimizers can treat them as a barrier.
    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidParameter(format!("log_pdf at non-finite x = {x}")));
        }
        Ok(match self {
            PriorFamily::Gamma(g) => g.log_pdf(x),
            PriorFamily::Normal(n) => n.log_pdf(x),
            PriorFamily::Uniform(u) => u.log_pdf(x),
        })
    }

    /// d/dx of the log-density (zero inside a Uniform support).
    pub fn grad_log_pdf(&self, x: f64) -> f64 {
        match self {
            PriorFamily::Gamma(g) => g.grad_log_pdf(x),
            PriorFamily::Normal(n) => n.grad_log_pdf(x),
            PriorFamily::Uniform(_) => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PriorFamily::Gamma(g) => Gamma::new(g.shape, 1.0 / g.rate).expect("validated Gamma").sample(rng),
            PriorFamily::Normal(n) => Normal::new(n.mean, n.std).expect("validated Normal").sample(rng),
            PriorFamily::Uniform(u) => Uniform::new(u.lo, u.hi).expect("validated Uniform").sample(rng),
        }
    }

    /// Point of maximum density (midpoint for Uniform, clamped for Gamma with shape < 1).
    pub fn mode(&self) -> f64 {
        match self {
            PriorFamily::Gamma(g) => g.mode(),
            PriorFamily::Normal(n) => n.mean,
            PriorFamily::Uniform(u) => 0.5 * (u.lo + u.hi),
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            PriorFamily::Gamma(g) => GammaPrior::new(g.shape, g.rate).is_ok(),
            PriorFamily::Normal(n) => NormalPrior::new(n.mean, n.std).is_ok(),
            PriorFamily::Uniform(u) => UniformPrior::new(u.lo, u.hi).is_ok(),
        }
    }
}

impl From<GammaPrior> for PriorFamily {
    fn from(g: GammaPrior) -> Self {
        PriorFamily::Gamma(g)
    }
}

impl From<NormalPrior> for PriorFamily {
    fn from(n: NormalPrior) -> Self {
        PriorFamily::Normal(n)
    }
}

impl From<UniformPrior> for PriorFamily {
    fn from(u: UniformPrior) -> Self {
        PriorFamily::Uniform(u)
    }
}

const GAMMA_NEWTON_STEPS: usize = 20;

/// Closed-form Gamma estimate from the Ye–Chen estimator (no refinement).
pub fn gamma_closed_form(samples: &[f64]) -> Result<GammaPrior> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData(format!("Gamma fit needs at least 2 samples, got {n}")));
    }
    if let Some(bad) = samples.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
        return Err(Error::Domain(format!("Gamma fit requires positive samples, got {bad}")));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Err(Error::DegenerateData("all samples are equal".into()));
    }
    let nf = n as f64;
    let sum_x: f64 = samples.iter().sum();
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / nf;
    let spread: f64 = samples.iter().map(|x| x * (x.ln() - mean_ln)).sum();
    if !(spread > 0.0) {
        return Err(Error::DegenerateData("zero spread in log-space".into()));
    }
    let shape = sum_x / spread;
    GammaPrior::new(shape, shape * nf / sum_x)
}

/// Maximum-likelihood Gamma fit: Ye–Chen closed form refined by Newton steps on
/// `ln a − ψ(a) = ln(mean x) − mean(ln x)`. The refinement is kept only if it
/// does not lower the likelihood.
pub fn gamma_mle(samples: &[f64]) -> Result<GammaPrior> {
    let closed = gamma_closed_form(samples)?;
    let nf = samples.len() as f64;
    let sum_x: f64 = samples.iter().sum();
    let sum_ln: f64 = samples.iter().map(|x| x.ln()).sum();
    let mean = sum_x / nf;
    let target = mean.ln() - sum_ln / nf;
    if !(target > 0.0) {
        return Ok(closed);
    }

    // Newton in log-shape; the profile equation is monotone in a.
    let mut log_a = closed.shape.ln();
    for _ in 0..GAMMA_NEWTON_STEPS {
        let a = log_a.exp();
        let g = a.ln() - digamma(a) - target;
        let dg = 1.0 - a * trigamma(a);
        if dg == 0.0 || !dg.is_finite() {
            break;
        }
        let step = g / dg;
        log_a -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    let shape = log_a.exp();
    let refined = match GammaPrior::new(shape, shape / mean) {
        Ok(r) => r,
        Err(_) => return Ok(closed),
    };
    if refined.log_likelihood(nf, sum_x, sum_ln) >= closed.log_likelihood(nf, sum_x, sum_ln) {
        Ok(refined)
    } else {
        Ok(closed)
    }
}

/// Normal maximum-likelihood fit (standard deviation with divisor n).
pub fn normal_mle(samples: &[f64]) -> Result<NormalPrior> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData(format!("Normal fit needs at least 2 samples, got {n}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("Normal fit requires finite samples".into()));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    if !(var > 0.0) {
        return Err(Error::DegenerateData("zero spread".into()));
    }
    NormalPrior::new(mean, var.sqrt())
}

/// KL(p ‖ q) between two Gamma distributions (closed form).
pub fn gamma_kl(p: &GammaPrior, q: &GammaPrior) -> f64 {
    let (ap, bp, aq, bq) = (p.shape, p.rate, q.shape, q.rate);
    let kl = (ap - aq) * digamma(ap) - ln_gamma(ap) + ln_gamma(aq) + aq * (bp.ln() - bq.ln())
        + ap * (bq - bp) / bp;
    // rounding can leave a tiny negative residue when p == q
    kl.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mphd_testkit::{gamma_kl_quadrature, integrate, rng};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gamma_log_pdf_exponential_case() {
        let p = PriorFamily::gamma(1.0, 2.0).unwrap();
        assert!((p.log_pdf(1.0).unwrap() - (2f64.ln() - 2.0)).abs() < 1e-14);
    }

    #[test]
    fn normal_log_pdf_at_mean() {
        let p = PriorFamily::normal(0.3, 0.7).unwrap();
        let expected = -(0.7f64).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((p.log_pdf(0.3).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn uniform_outside_support_is_negative_infinity() {
        let p = PriorFamily::uniform(0.0, 1.0).unwrap();
        assert_eq!(p.log_pdf(2.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(p.log_pdf(0.5).unwrap(), 0.0);
        assert!(p.log_pdf(f64::NAN).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(PriorFamily::gamma(0.0, 1.0).is_err());
        assert!(PriorFamily::normal(0.0, -1.0).is_err());
        assert!(PriorFamily::uniform(1.0, 1.0).is_err());
    }

    #[test]
    fn sample_moments() {
        let mut r = rng(11);
        let n = 100_000;
        let u = PriorFamily::uniform(0.0, 1.0).unwrap();
        let m: f64 = (0..n).map(|_| u.sample(&mut r)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01);

        let g = PriorFamily::gamma(10.0, 30.0).unwrap();
        let m: f64 = (0..n).map(|_| g.sample(&mut r)).sum::<f64>() / n as f64;
        assert!((m - 1.0 / 3.0).abs() < 0.02 / 3.0);

        let nrm = PriorFamily::normal(0.5, 0.2).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| nrm.sample(&mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.02 * 0.2);
    }

    #[test]
    fn sampling_is_deterministic_given_rng() {
        let g = PriorFamily::gamma(2.0, 3.0).unwrap();
        let a: Vec<f64> = (0..5).map(|_| 0.0).scan(rng(3), |r, _| Some(g.sample(r))).collect();
        let b: Vec<f64> = (0..5).map(|_| 0.0).scan(rng(3), |r, _| Some(g.sample(r))).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_mle_recovers_ground_truth() {
        let truth = PriorFamily::gamma(10.0, 30.0).unwrap();
        let mut r = rng(5);
        let xs: Vec<f64> = (0..100_000).map(|_| truth.sample(&mut r)).collect();
        let fit = gamma_mle(&xs).unwrap();
        assert!((fit.shape / 10.0 - 1.0).abs() < 0.03, "{fit:?}");
        assert!((fit.rate / 30.0 - 1.0).abs() < 0.03, "{fit:?}");
    }

    #[test]
    fn gamma_mle_refinement_never_lowers_likelihood() {
        let mut r = rng(8);
        for shape in [0.3, 1.0, 4.0, 25.0] {
            let truth = PriorFamily::gamma(shape, 2.0).unwrap();
            let xs: Vec<f64> = (0..50).map(|_| truth.sample(&mut r)).collect();
            let n = xs.len() as f64;
            let sx: f64 = xs.iter().sum();
            let sl: f64 = xs.iter().map(|x| x.ln()).sum();
            let closed = gamma_closed_form(&xs).unwrap();
            let refined = gamma_mle(&xs).unwrap();
            assert!(refined.log_likelihood(n, sx, sl) >= closed.log_likelihood(n, sx, sl));
        }
    }

    #[test]
    fn gamma_mle_degenerate_inputs() {
        assert!(matches!(gamma_mle(&[2.0, 2.0, 2.0]), Err(Error::DegenerateData(_))));
        assert!(matches!(gamma_mle(&[1.0, -2.0, 3.0]), Err(Error::Domain(_))));
        assert!(gamma_mle(&[1.0]).is_err());
    }

    #[test]
    fn normal_mle_examples() {
        let fit = normal_mle(&[0.0, 2.0]).unwrap();
        assert_eq!(fit, NormalPrior { mean: 1.0, std: 1.0 });
        assert!(matches!(normal_mle(&[5.0, 5.0, 5.0]), Err(Error::DegenerateData(_))));

        let truth = PriorFamily::normal(0.5, 0.2).unwrap();
        let mut r = rng(13);
        let xs: Vec<f64> = (0..100_000).map(|_| truth.sample(&mut r)).collect();
        let fit = normal_mle(&xs).unwrap();
        assert!((fit.mean - 0.5).abs() < 0.01);
        assert!((fit.std / 0.2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn gamma_kl_zero_for_identical() {
        let p = GammaPrior::new(2.0, 3.0).unwrap();
        assert!(gamma_kl(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn gamma_kl_matches_quadrature() {
        let p = GammaPrior::new(1.0, 1.0).unwrap();
        let q = GammaPrior::new(2.0, 1.0).unwrap();
        let quad = gamma_kl_quadrature(1.0, 1.0, 2.0, 1.0);
        assert!((gamma_kl(&p, &q) - quad).abs() < 1e-6);
    }

    #[test]
    fn gamma_kl_nonnegative_on_random_pairs() {
        let mut r = rng(21);
        for _ in 0..1000 {
            let p = GammaPrior::new(r.random_range(0.1..50.0), r.random_range(0.1..50.0)).unwrap();
            let q = GammaPrior::new(r.random_range(0.1..50.0), r.random_range(0.1..50.0)).unwrap();
            assert!(gamma_kl(&p, &q) >= 0.0);
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let mut r = rng(17);
        for _ in 0..50 {
            let a: f64 = r.random_range(0.5..30.0);
            let b: f64 = r.random_range(0.1..30.0);
            let g = GammaPrior::new(a, b).unwrap();
            // integrate in log-space: ∫ p(e^u) e^u du
            let c = (a / b).ln();
            let total = integrate(|u| (g.log_pdf(u.exp()) + u).exp(), c - 80.0 / a.min(1.0), c + 6.0, 1e-12);
            assert!((total - 1.0).abs() < 1e-6, "Gamma({a},{b}) -> {total}");

            let m: f64 = r.random_range(-5.0..5.0);
            let s: f64 = r.random_range(0.05..5.0);
            let n = NormalPrior::new(m, s).unwrap();
            let total = integrate(|x| n.log_pdf(x).exp(), m - 40.0 * s, m + 40.0 * s, 1e-12);
            assert!((total - 1.0).abs() < 1e-6);

            let lo: f64 = r.random_range(-5.0..5.0);
            let hi = lo + r.random_range(0.01..10.0);
            let u = UniformPrior::new(lo, hi).unwrap();
            let total = integrate(|x| u.log_pdf(x).exp(), lo, hi, 1e-12);
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn density_gradient_vanishes_at_gamma_mode() {
        let g = GammaPrior::new(3.5, 2.0).unwrap();
        assert!(g.grad_log_pdf(g.mode()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn mle_scale_equivariance(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let truth = PriorFamily::gamma(3.0, 2.0).unwrap();
            let mut r = rng(seed);
            let xs: Vec<f64> = (0..40).map(|_| truth.sample(&mut r)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| x * scale).collect();

            let (c0, c1) = (gamma_closed_form(&xs).unwrap(), gamma_closed_form(&ys).unwrap());
            prop_assert!((c1.shape / c0.shape - 1.0).abs() < 1e-10);
            prop_assert!((c1.rate * scale / c0.rate - 1.0).abs() < 1e-10);

            let (g0, g1) = (gamma_mle(&xs).unwrap(), gamma_mle(&ys).unwrap());
            prop_assert!((g1.shape / g0.shape - 1.0).abs() < 1e-8);
            prop_assert!((g1.rate * scale / g0.rate - 1.0).abs() < 1e-8);

            let (n0, n1) = (normal_mle(&xs).unwrap(), normal_mle(&ys).unwrap());
            prop_assert!((n1.mean / (scale * n0.mean) - 1.0).abs() < 1e-12);
            prop_assert!((n1.std / (scale * n0.std) - 1.0).abs() < 1e-12);
        }
    }
}
