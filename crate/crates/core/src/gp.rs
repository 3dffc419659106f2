//! Exact Gaussian-process machinery: anisotropic Matérn kernels, the marginal
//! likelihood of a set of independent sub-datasets, its analytic gradient, and
//! posterior prediction.
//!
//! All sub-datasets in one call are treated as independent draws from the same
//! GP, so the negative log-likelihood is a sum of per-sub-dataset terms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter ladder (times signal variance) tried after a plain factorization fails.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Smoothness of the Matérn kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "matern32")]
    ThreeHalves,
    #[serde(rename = "matern52")]
    FiveHalves,
}

impl Smoothness {
    /// Unit-variance correlation at scaled distance `r`.
    #[inline]
    pub fn correlation(self, r: f64) -> f64 {
        match self {
            Smoothness::ThreeHalves => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
            Smoothness::FiveHalves => {
                let s = 5f64.sqrt() * r;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    /// `-(1/r) dm/dr`, finite at `r = 0`. The length-scale derivative of the
    /// kernel is `σ² · g(r) · (Δ_j / ℓ_j)²` with this `g`.
    #[inline]
    fn radial_factor(self, r: f64) -> f64 {
        match self {
            Smoothness::ThreeHalves => 3.0 * (-(3f64.sqrt()) * r).exp(),
            Smoothness::FiveHalves => {
                let s = 5f64.sqrt() * r;
                5.0 / 3.0 * (1.0 + s) * (-s).exp()
            }
        }
    }
}

impl Default for Smoothness {
    fn default() -> Self {
        Smoothness::FiveHalves
    }
}

/// GP parameters for one domain: constant mean, per-dimension length-scales,
/// signal variance and observation-noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub constant_mean: f64,
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpParams {
    pub fn new(
        constant_mean: f64,
        length_scales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let p = GpParams { constant_mean, length_scales, signal_variance, noise_variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.length_scales.is_empty() {
            return Err(Error::InvalidParameter("no length-scales".into()));
        }
        if !self.constant_mean.is_finite() {
            return Err(Error::InvalidParameter("non-finite constant mean".into()));
        }
        if !self.length_scales.iter().all(|&l| positive(l)) {
            return Err(Error::InvalidParameter(format!("length-scales must be positive: {:?}", self.length_scales)));
        }
        if !positive(self.signal_variance) || !positive(self.noise_variance) {
            return Err(Error::InvalidParameter(format!(
                "variances must be positive: signal {}, noise {}",
                self.signal_variance, self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Number of scalar parameters, `d + 3`.
    pub fn len(&self) -> usize {
        self.dim() + 3
    }

    /// `[mean, ln ℓ_1 … ln ℓ_d, ln σ², ln σ_n²]`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.constant_mean);
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        let d = u.len() - 3;
        GpParams {
            constant_mean: u[0],
            length_scales: u[1..=d].iter().map(|v| v.exp()).collect(),
            signal_variance: u[d + 1].exp(),
            noise_variance: u[d + 2].exp(),
        }
    }

    /// Parameters in natural units, in the same order as [`Self::to_unconstrained`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.constant_mean];
        v.extend_from_slice(&self.length_scales);
        v.push(self.signal_variance);
        v.push(self.noise_variance);
        v
    }
}

/// Observations of a single function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubDataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

impl SubDataset {
    /// Builds a sub-dataset, checking row widths and lengths. Empty is allowed.
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), found: outputs.len() });
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            for row in &inputs {
                if row.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, found: row.len() });
                }
            }
        }
        Ok(SubDataset { inputs, outputs })
    }

    pub fn empty() -> Self {
        SubDataset { inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.inputs.push(x);
        self.outputs.push(y);
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> SubDataset {
        SubDataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            outputs: idx.iter().map(|&i| self.outputs[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    /// Latent-function variance (observation noise excluded).
    pub variance: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

#[inline]
fn scaled_dist(a: &[f64], b: &[f64], inv_ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(inv_ls) {
        let t = (x - y) * w;
        s += t * t;
    }
    s.sqrt()
}

fn check_dims(x: &[f64], params: &GpParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: x.len() });
    }
    Ok(())
}

/// `σ² m_ν(r)` with `r` the ARD-scaled distance. Observation noise is not included.
pub fn matern_kernel(x1: &[f64], x2: &[f64], params: &GpParams, nu: Smoothness) -> Result<f64> {
    params.validate()?;
    check_dims(x1, params)?;
    check_dims(x2, params)?;
    let inv: Vec<f64> = params.length_scales.iter().map(|l| 1.0 / l).collect();
    Ok(params.signal_variance * nu.correlation(scaled_dist(x1, x2, &inv)))
}

fn gram_unchecked(xs: &[Vec<f64>], params: &GpParams, nu: Smoothness, diagonal: f64) -> DMatrix<f64> {
    let n = xs.len();
    let inv: Vec<f64> = params.length_scales.iter().map(|l| 1.0 / l).collect();
    let s2 = params.signal_variance;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = s2 + diagonal;
        for i in j + 1..n {
            let v = s2 * nu.correlation(scaled_dist(&xs[i], &xs[j], &inv));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Training covariance: kernel plus `noise_variance + jitter` on the diagonal.
pub fn gram_matrix(xs: &[Vec<f64>], params: &GpParams, nu: Smoothness, jitter: f64) -> Result<DMatrix<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidParameter("gram matrix of no points".into()));
    }
    params.validate()?;
    for x in xs {
        check_dims(x, params)?;
    }
    Ok(gram_unchecked(xs, params, nu, params.noise_variance + jitter))
}

/// Cholesky factor of the training covariance and `α = K⁻¹(y − m)`.
pub(crate) struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    #[allow(dead_code)]
    pub jitter: f64,
}

impl Factor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Factorizes with no jitter first, then escalates jitter ×10 from
/// `1e-10·σ²` to `1e-4·σ²` before giving up.
pub(crate) fn factorize(data: &SubDataset, params: &GpParams, nu: Smoothness) -> Result<Factor> {
    let base = gram_unchecked(&data.inputs, params, nu, params.noise_variance);
    let resid = DVector::from_iterator(data.len(), data.outputs.iter().map(|y| y - params.constant_mean));
    let mut jitter = 0.0;
    loop {
        let mut k = base.clone();
        if jitter > 0.0 {
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(k) {
            let alpha = chol.solve(&resid);
            if alpha.iter().all(|v| v.is_finite()) {
                return Ok(Factor { chol, alpha, jitter });
            }
        }
        jitter = if jitter == 0.0 { JITTER_START * params.signal_variance } else { jitter * 10.0 };
        if jitter > JITTER_MAX * params.signal_variance * (1.0 + 1e-9) {
            return Err(Error::NumericalFailure(format!(
                "Cholesky failed on {} points after jitter escalation",
                data.len()
            )));
        }
    }
}

fn check_subdatasets(subdatasets: &[SubDataset], params: &GpParams) -> Result<()> {
    params.validate()?;
    if subdatasets.is_empty() {
        return Err(Error::InvalidParameter("no sub-datasets".into()));
    }
    for sd in subdatasets {
        if sd.is_empty() {
            return Err(Error::InvalidParameter("empty sub-dataset".into()));
        }
        for x in &sd.inputs {
            check_dims(x, params)?;
        }
    }
    Ok(())
}

fn single_nll(f: &Factor, data: &SubDataset, mean: f64) -> f64 {
    let quad: f64 = data.outputs.iter().zip(f.alpha.iter()).map(|(y, a)| (y - mean) * a).sum();
    0.5 * quad + 0.5 * f.log_det() + 0.5 * data.len() as f64 * LN_2PI
}

/// Negative log marginal likelihood summed over independent sub-datasets.
pub fn gp_nll(subdatasets: &[SubDataset], params: &GpParams, nu: Smoothness) -> Result<f64> {
    check_subdatasets(subdatasets, params)?;
    let mut total = 0.0;
    for sd in subdatasets {
        let f = factorize(sd, params, nu)?;
        total += single_nll(&f, sd, params.constant_mean);
    }
    Ok(total)
}

/// Negative log marginal likelihood and its gradient with respect to
/// `[mean, ln ℓ_1 … ln ℓ_d, ln σ², ln σ_n²]`.
///
/// Each kernel-parameter component is `½ tr((K⁻¹ − ααᵀ) ∂K/∂θ)`.
pub fn gp_nll_and_grad(subdatasets: &[SubDataset], params: &GpParams, nu: Smoothness) -> Result<(f64, Vec<f64>)> {
    check_subdatasets(subdatasets, params)?;
    let d = params.dim();
    let mut grad = vec![0.0; d + 3];
    let mut total = 0.0;
    let inv_ls: Vec<f64> = params.length_scales.iter().map(|l| 1.0 / l).collect();
    let s2 = params.signal_variance;
    let mut scaled = vec![0.0; d];

    for sd in subdatasets {
        let f = factorize(sd, params, nu)?;
        total += single_nll(&f, sd, params.constant_mean);
        let n = sd.len();
        let k_inv = f.chol.inverse();
        let alpha = &f.alpha;

        grad[0] -= alpha.sum();

        // W = K⁻¹ − ααᵀ; diagonal contributions first
        let mut trace_w = 0.0;
        for i in 0..n {
            trace_w += k_inv[(i, i)] - alpha[i] * alpha[i];
        }
        // signal variance: ∂K/∂ln σ² is the noise-free kernel matrix
        let mut g_signal = trace_w * s2;
        let mut g_ls = vec![0.0; d];
        for j in 0..n {
            let xj = &sd.inputs[j];
            for i in j + 1..n {
                let xi = &sd.inputs[i];
                let mut r2 = 0.0;
                for k in 0..d {
                    let t = (xi[k] - xj[k]) * inv_ls[k];
                    scaled[k] = t * t;
                    r2 += scaled[k];
                }
                let r = r2.sqrt();
                let w = 2.0 * (k_inv[(i, j)] - alpha[i] * alpha[j]);
                g_signal += w * s2 * nu.correlation(r);
                let c = w * s2 * nu.radial_factor(r);
                for k in 0..d {
                    g_ls[k] += c * scaled[k];
                }
            }
        }
        for k in 0..d {
            grad[1 + k] += 0.5 * g_ls[k];
        }
        grad[d + 1] += 0.5 * g_signal;
        grad[d + 2] += 0.5 * params.noise_variance * trace_w;
    }
    Ok((total, grad))
}

pub fn gp_nll_grad(subdatasets: &[SubDataset], params: &GpParams, nu: Smoothness) -> Result<Vec<f64>> {
    gp_nll_and_grad(subdatasets, params, nu).map(|(_, g)| g)
}

/// A GP conditioned on observations, ready to predict at many points.
pub struct GpPosterior {
    params: GpParams,
    nu: Smoothness,
    inv_ls: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    factor: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl GpPosterior {
    pub fn fit(params: &GpParams, nu: Smoothness, observations: &SubDataset) -> Result<Self> {
        params.validate()?;
        for x in &observations.inputs {
            check_dims(x, params)?;
        }
        let factor = if observations.is_empty() {
            None
        } else {
            let f = factorize(observations, params, nu)?;
            Some((f.chol.l(), f.alpha))
        };
        Ok(GpPosterior {
            params: params.clone(),
            nu,
            inv_ls: params.length_scales.iter().map(|l| 1.0 / l).collect(),
            inputs: observations.inputs.clone(),
            factor,
        })
    }

    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.params.signal_variance * self.nu.correlation(scaled_dist(x, xi, &self.inv_ls))),
        )
    }

    /// Predictive mean and latent variance at one point.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dims(x, &self.params)?;
        let m = self.params.constant_mean;
        let s2 = self.params.signal_variance;
        match &self.factor {
            None => Ok((m, s2)),
            Some((l, alpha)) => {
                let ks = self.cross(x);
                let mean = m + ks.dot(alpha);
                let v = l
                    .solve_lower_triangular(&ks)
                    .ok_or_else(|| Error::NumericalFailure("triangular solve".into()))?;
                Ok((mean, (s2 - v.norm_squared()).max(0.0)))
            }
        }
    }

    pub fn predict_many(&self, query: &[Vec<f64>], full_cov: bool) -> Result<PosteriorSummary> {
        for x in query {
            check_dims(x, &self.params)?;
        }
        let q = query.len();
        let m = self.params.constant_mean;
        let prior_cov = || {
            let mut k = gram_unchecked(query, &self.params, self.nu, 0.0);
            k.fill_lower_triangle_with_upper_triangle();
            k
        };
        match &self.factor {
            None => Ok(PosteriorSummary {
                mean: vec![m; q],
                variance: vec![self.params.signal_variance; q],
                covariance: if full_cov && q > 0 { Some(prior_cov()) } else { None },
            }),
            Some((l, alpha)) => {
                let n = self.inputs.len();
                let mut ks = DMatrix::zeros(n, q);
                for (c, x) in query.iter().enumerate() {
                    ks.set_column(c, &self.cross(x));
                }
                let mean: Vec<f64> = (0..q).map(|c| m + ks.column(c).dot(alpha)).collect();
                let v = l
                    .solve_lower_triangular(&ks)
                    .ok_or_else(|| Error::NumericalFailure("triangular solve".into()))?;
                let variance: Vec<f64> = (0..q)
                    .map(|c| (self.params.signal_variance - v.column(c).norm_squared()).max(0.0))
                    .collect();
                let covariance = if full_cov && q > 0 {
                    let mut cov = prior_cov() - v.transpose() * &v;
                    for i in 0..q {
                        cov[(i, i)] = cov[(i, i)].max(0.0);
                    }
                    Some(cov)
                } else {
                    None
                };
                Ok(PosteriorSummary { mean, variance, covariance })
            }
        }
    }
}

/// GP predictive at `query` given `observations` (which may be empty).
pub fn gp_posterior(
    params: &GpParams,
    nu: Smoothness,
    observations: &SubDataset,
    query: &[Vec<f64>],
    full_cov: bool,
) -> Result<PosteriorSummary> {
    GpPosterior::fit(params, nu, observations)?.predict_many(query, full_cov)
}
