//! Domain descriptors, per-dimension context vectors, and the model mapping a
//! context to the Gamma prior of that dimension's length-scale.
//!
//! A context is `(is_discrete, is_continuous, n_discrete, n_continuous)`. The
//! network variant is a 4→16→16→2 tanh MLP whose two outputs pass through
//! `softplus(z) + 1e-4` to give the Gamma shape and rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_versioned, encode_versioned};
use crate::priors::{GammaPrior, NormalPrior};
use crate::special::{digamma, ln_gamma};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSpec {
    pub kind: DimKind,
    /// Raw range before normalization, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub dims: Vec<DimSpec>,
}

impl DomainDescriptor {
    pub fn new(kinds: &[DimKind]) -> Result<Self> {
        let d = DomainDescriptor { dims: kinds.iter().map(|&kind| DimSpec { kind, bounds: None }).collect() };
        d.validate()?;
        Ok(d)
    }

    pub fn continuous(d: usize) -> Result<Self> {
        Self::new(&vec![DimKind::Continuous; d])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidParameter("domain has no dimensions".into()));
        }
        for (j, s) in self.dims.iter().enumerate() {
            if let Some((lo, hi)) = s.bounds {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::InvalidParameter(format!("dimension {j} has invalid bounds ({lo}, {hi})")));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_discrete(&self) -> usize {
        self.dims.iter().filter(|s| s.kind == DimKind::Discrete).count()
    }

    pub fn n_continuous(&self) -> usize {
        self.dim() - self.n_discrete()
    }
}

pub type ContextVector = [f64; 4];

/// One context per dimension, in dimension order.
pub fn encode_contexts(domain: &DomainDescriptor) -> Result<Vec<ContextVector>> {
    domain.validate()?;
    let nd = domain.n_discrete() as f64;
    let nc = domain.n_continuous() as f64;
    Ok(domain
        .dims
        .iter()
        .map(|s| match s.kind {
            DimKind::Discrete => [1.0, 0.0, nd, nc],
            DimKind::Continuous => [0.0, 1.0, nd, nc],
        })
        .collect())
}

const IN: usize = 4;
const HIDDEN: usize = 16;
const OUT: usize = 2;
/// Added after softplus so shape and rate stay strictly positive.
pub const OUTPUT_FLOOR: f64 = 1e-4;
/// Count entries of a context are divided by this before entering the network.
pub const DEFAULT_COUNT_SCALE: f64 = 20.0;

// flat parameter layout: W1 (16×4), b1, W2 (16×16), b2, W3 (2×16), b3; row-major weights
const W1: usize = 0;
const B1: usize = W1 + HIDDEN * IN;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + OUT * HIDDEN;
pub const NN_PARAM_COUNT: usize = B3 + OUT;
/// Parameter range of the final layer's weight matrix.
pub const OUTPUT_WEIGHTS: std::ops::Range<usize> = W3..B3;
/// Parameter ranges of the three weight matrices (biases excluded).
pub const WEIGHT_RANGES: [std::ops::Range<usize>; 3] = [W1..B1, W2..B2, W3..B3];

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus(z) + OUTPUT_FLOOR`, for initializing the output bias.
fn inverse_output(v: f64) -> f64 {
    let s = (v - OUTPUT_FLOOR).max(1e-8);
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnPhi {
    /// Flat parameters; see [`NN_PARAM_COUNT`].
    pub params: Vec<f64>,
    pub count_scale: f64,
}

struct Activations {
    input: [f64; IN],
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    z3: [f64; OUT],
}

impl NnPhi {
    pub fn zeros() -> Self {
        NnPhi { params: vec![0.0; NN_PARAM_COUNT], count_scale: DEFAULT_COUNT_SCALE }
    }

    /// Glorot-uniform weights and zero biases. When `output` is given, the
    /// output bias is set so the untrained network already returns that Gamma.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, output: Option<GammaPrior>) -> Self {
        let mut net = Self::zeros();
        let mut fill = |start: usize, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[start..start + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        };
        fill(W1, IN, HIDDEN);
        fill(W2, HIDDEN, HIDDEN);
        fill(W3, HIDDEN, OUT);
        if let Some(g) = output {
            net.params[B3] = inverse_output(g.shape);
            net.params[B3 + 1] = inverse_output(g.rate);
        }
        net
    }

    pub fn from_params(params: Vec<f64>, count_scale: f64) -> Result<Self> {
        let net = NnPhi { params, count_scale };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != NN_PARAM_COUNT {
            return Err(Error::DimensionMismatch { expected: NN_PARAM_COUNT, found: self.params.len() });
        }
        if self.params.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("non-finite network weight".into()));
        }
        if !(self.count_scale > 0.0 && self.count_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("count scale must be positive, got {}", self.count_scale)));
        }
        Ok(())
    }

    fn activations(&self, ctx: &ContextVector) -> Activations {
        let p = &self.params;
        let input = [ctx[0], ctx[1], ctx[2] / self.count_scale, ctx[3] / self.count_scale];
        let mut h1 = [0.0; HIDDEN];
        for (i, h) in h1.iter_mut().enumerate() {
            let row = &p[W1 + i * IN..W1 + (i + 1) * IN];
            *h = (p[B1 + i] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        let mut h2 = [0.0; HIDDEN];
        for (i, h) in h2.iter_mut().enumerate() {
            let row = &p[W2 + i * HIDDEN..W2 + (i + 1) * HIDDEN];
            *h = (p[B2 + i] + row.iter().zip(&h1).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        let mut z3 = [0.0; OUT];
        for (i, z) in z3.iter_mut().enumerate() {
            let row = &p[W3 + i * HIDDEN..W3 + (i + 1) * HIDDEN];
            *z = p[B3 + i] + row.iter().zip(&h2).map(|(w, x)| w * x).sum::<f64>();
        }
        Activations { input, h1, h2, z3 }
    }

    pub fn forward(&self, ctx: &ContextVector) -> GammaPrior {
        let z = self.activations(ctx).z3;
        GammaPrior { shape: softplus(z[0]) + OUTPUT_FLOOR, rate: softplus(z[1]) + OUTPUT_FLOOR }
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dz3`.
    fn backward(&self, act: &Activations, dz3: [f64; OUT], grad: &mut [f64]) {
        let p = &self.params;
        let mut dh2 = [0.0; HIDDEN];
        for i in 0..OUT {
            grad[B3 + i] += dz3[i];
            for j in 0..HIDDEN {
                grad[W3 + i * HIDDEN + j] += dz3[i] * act.h2[j];
                dh2[j] += dz3[i] * p[W3 + i * HIDDEN + j];
            }
        }
        let mut dh1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let dz = dh2[i] * (1.0 - act.h2[i] * act.h2[i]);
            grad[B2 + i] += dz;
            for j in 0..HIDDEN {
                grad[W2 + i * HIDDEN + j] += dz * act.h1[j];
                dh1[j] += dz * p[W2 + i * HIDDEN + j];
            }
        }
        for i in 0..HIDDEN {
            let dz = dh1[i] * (1.0 - act.h1[i] * act.h1[i]);
            grad[B1 + i] += dz;
            for j in 0..IN {
                grad[W1 + i * IN + j] += dz * act.input[j];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthScalePrior {
    Network(NnPhi),
    Constant { prior: GammaPrior },
}

/// Priors for the parameter types that carry no per-dimension context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedPriors {
    pub constant_mean: NormalPrior,
    pub signal_variance: GammaPrior,
    pub noise_variance: GammaPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiModel {
    pub length_scale: LengthScalePrior,
    pub shared: SharedPriors,
}

impl PhiModel {
    pub fn validate(&self) -> Result<()> {
        match &self.length_scale {
            LengthScalePrior::Network(net) => net.validate()?,
            LengthScalePrior::Constant { prior } => {
                GammaPrior::new(prior.shape, prior.rate)?;
            }
        }
        NormalPrior::new(self.shared.constant_mean.mean, self.shared.constant_mean.std)?;
        GammaPrior::new(self.shared.signal_variance.shape, self.shared.signal_variance.rate)?;
        GammaPrior::new(self.shared.noise_variance.shape, self.shared.noise_variance.rate)?;
        Ok(())
    }

    pub fn is_network(&self) -> bool {
        matches!(self.length_scale, LengthScalePrior::Network(_))
    }

    /// Length-scale prior for every dimension of `domain`.
    pub fn length_scale_priors(&self, domain: &DomainDescriptor) -> Result<Vec<GammaPrior>> {
        encode_contexts(domain)?.iter().map(|c| phi_forward(self, c)).collect()
    }
}

pub fn phi_forward(phi: &PhiModel, ctx: &ContextVector) -> Result<GammaPrior> {
    if ctx.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite context".into()));
    }
    match &phi.length_scale {
        LengthScalePrior::Constant { prior } => Ok(*prior),
        LengthScalePrior::Network(net) => {
            net.validate()?;
            Ok(net.forward(ctx))
        }
    }
}

/// `−Σ log Gamma(θ̂; phi(context))` over the pairs and its gradient with respect
/// to the network parameters.
pub fn phi_objective_and_grad(net: &NnPhi, pairs: &[(ContextVector, f64)]) -> Result<(f64, Vec<f64>)> {
    net.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no (context, length-scale) pairs".into()));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; NN_PARAM_COUNT];
    for (ctx, x) in pairs {
        if !(*x > 0.0 && x.is_finite()) {
            return Err(Error::Domain(format!("length-scale estimate must be positive, got {x}")));
        }
        let act = net.activations(ctx);
        let a = softplus(act.z3[0]) + OUTPUT_FLOOR;
        let b = softplus(act.z3[1]) + OUTPUT_FLOOR;
        let lx = x.ln();
        value -= a * b.ln() - ln_gamma(a) + (a - 1.0) * lx - b * x;
        let da = -(b.ln() - digamma(a) + lx);
        let db = -(a / b - x);
        net.backward(&act, [da * sigmoid(act.z3[0]), db * sigmoid(act.z3[1])], &mut grad);
    }
    Ok((value, grad))
}

pub const PHI_FORMAT: &str = "mphd-phi";
pub const PHI_VERSION: u32 = 1;

pub fn serialize_phi(phi: &PhiModel) -> Result<Vec<u8>> {
    phi.validate()?;
    encode_versioned(PHI_FORMAT, PHI_VERSION, phi)
}

pub fn deserialize_phi(bytes: &[u8]) -> Result<PhiModel> {
    let phi: PhiModel = decode_versioned(bytes, PHI_FORMAT, PHI_VERSION)?;
    phi.validate()?;
    Ok(phi)
}
