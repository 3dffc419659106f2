//! Synthetic super-datasets drawn from a known hierarchical GP.
//!
//! Each dataset gets a dimension `d`, GP parameters drawn from the profile's
//! priors at that `d`, and a number of sub-datasets, each one function drawn
//! from the GP at uniform random inputs plus Gaussian observation noise.

use std::collections::HashMap;

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{DimKind, DomainDescriptor};
use crate::data::{Dataset, GroundTruth, GroundTruthPriors, SubDatasetRecord, SuperDataset};
use crate::error::{Error, Result};
use crate::gp::{gram_matrix, GpParams, Smoothness};
use crate::priors::{GammaPrior, NormalPrior, PriorFamily};
use crate::seed::{derive_rng, Rng as SeededRng};

/// Levels of a synthetic discrete dimension: `k / 9` for `k = 0..10`.
pub const DISCRETE_LEVELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthProfile {
    S,
    L,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthScale {
    /// Counts of the original configurations.
    Full,
    /// Reduced counts that run on a single workstation core.
    Desk,
}

/// Ground-truth priors, either fixed or with a length-scale Gamma whose
/// shape and rate are affine in the domain dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Fixed(GroundTruthPriors),
    LinearInDim {
        constant_mean: NormalPrior,
        /// `(slope, intercept)` of the shape.
        shape: (f64, f64),
        /// `(slope, intercept)` of the rate.
        rate: (f64, f64),
        signal_variance: GammaPrior,
        noise_variance: GammaPrior,
    },
}

impl PriorSpec {
    pub fn at(&self, d: usize) -> Result<GroundTruthPriors> {
        match *self {
            PriorSpec::Fixed(p) => Ok(p),
            PriorSpec::LinearInDim { constant_mean, shape, rate, signal_variance, noise_variance } => {
                let x = d as f64;
                let a = shape.0 * x + shape.1;
                let b = rate.0 * x + rate.1;
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::Domain(format!(
                        "length-scale prior Gamma({a}, {b}) at d = {d} is not a valid distribution"
                    )));
                }
                Ok(GroundTruthPriors {
                    constant_mean,
                    length_scale: GammaPrior { shape: a, rate: b },
                    signal_variance,
                    noise_variance,
                })
            }
        }
    }
}

fn profile_s() -> PriorSpec {
    PriorSpec::Fixed(GroundTruthPriors {
        constant_mean: NormalPrior { mean: 1.0, std: 1.0 },
        length_scale: GammaPrior { shape: 10.0, rate: 30.0 },
        signal_variance: GammaPrior { shape: 1.0, rate: 1.0 },
        noise_variance: GammaPrior { shape: 10.0, rate: 100_000.0 },
    })
}

fn profile_l() -> PriorSpec {
    PriorSpec::LinearInDim {
        constant_mean: NormalPrior { mean: 0.5, std: 0.2 },
        shape: (0.07692, 0.8462),
        rate: (-0.3539, 5.7077),
        signal_variance: GammaPrior { shape: 15.0, rate: 100.0 },
        noise_variance: GammaPrior { shape: 1.0, rate: 10_000.0 },
    }
}

/// Ground-truth priors of the two named profiles at dimension `d`.
pub fn ground_truth_priors(profile: SynthProfile, d: usize) -> Result<GroundTruthPriors> {
    match profile {
        SynthProfile::S => profile_s().at(d),
        SynthProfile::L => profile_l().at(d),
        SynthProfile::Custom => Err(Error::Config("the custom profile carries its own prior spec".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub profile: SynthProfile,
    pub n_datasets: usize,
    pub subdatasets_per_dataset: usize,
    pub observations_per_subdataset: usize,
    /// Inclusive.
    pub dim_range: (usize, usize),
    pub nu: Smoothness,
    pub priors: PriorSpec,
    /// Number of leading dimensions of each domain that are discrete.
    #[serde(default)]
    pub discrete_dims: usize,
}

impl SynthConfig {
    pub fn preset(profile: SynthProfile, scale: SynthScale) -> Result<Self> {
        let cfg = match (profile, scale) {
            (SynthProfile::S, SynthScale::Full) => SynthConfig {
                profile,
                n_datasets: 20,
                subdatasets_per_dataset: 10,
                observations_per_subdataset: 300,
                dim_range: (2, 5),
                nu: Smoothness::ThreeHalves,
                priors: profile_s(),
                discrete_dims: 0,
            },
            (SynthProfile::S, SynthScale::Desk) => SynthConfig {
                observations_per_subdataset: 100,
                ..Self::preset(SynthProfile::S, SynthScale::Full)?
            },
            (SynthProfile::L, SynthScale::Full) => SynthConfig {
                profile,
                n_datasets: 20,
                subdatasets_per_dataset: 20,
                observations_per_subdataset: 3000,
                dim_range: (2, 14),
                nu: Smoothness::FiveHalves,
                priors: profile_l(),
                discrete_dims: 0,
            },
            (SynthProfile::L, SynthScale::Desk) => SynthConfig {
                n_datasets: 8,
                subdatasets_per_dataset: 6,
                observations_per_subdataset: 300,
                dim_range: (2, 8),
                ..Self::preset(SynthProfile::L, SynthScale::Full)?
            },
            (SynthProfile::Custom, _) => {
                return Err(Error::Config("the custom profile has no preset; build a SynthConfig directly".into()))
            }
        };
        Ok(cfg)
    }

    /// Domain of a generated dataset with `d` dimensions.
    pub fn domain_for(&self, d: usize) -> Result<DomainDescriptor> {
        let discrete = self.discrete_dims.min(d);
        let kinds: Vec<DimKind> = (0..d).map(|j| if j < discrete { DimKind::Discrete } else { DimKind::Continuous }).collect();
        DomainDescriptor::new(&kinds)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dim_range;
        if lo < 1 || hi > 32 || lo > hi {
            return Err(Error::Config(format!("dimension range ({lo}, {hi}) must lie within [1, 32]")));
        }
        if self.n_datasets == 0 || self.subdatasets_per_dataset == 0 || self.observations_per_subdataset == 0 {
            return Err(Error::Config("dataset, sub-dataset and observation counts must be at least 1".into()));
        }
        for d in lo..=hi {
            let p = self.priors.at(d)?;
            NormalPrior::new(p.constant_mean.mean, p.constant_mean.std)?;
            for g in [p.length_scale, p.signal_variance, p.noise_variance] {
                GammaPrior::new(g.shape, g.rate)?;
            }
        }
        Ok(())
    }
}

fn sample_params<R: Rng + ?Sized>(priors: &GroundTruthPriors, d: usize, rng: &mut R) -> GpParams {
    let positive = |g: GammaPrior, rng: &mut R| loop {
        // a Gamma draw can underflow to exactly zero for small shapes
        let v = PriorFamily::Gamma(g).sample(rng);
        if v > 0.0 {
            break v;
        }
    };
    let constant_mean = PriorFamily::Normal(priors.constant_mean).sample(rng);
    let length_scales = (0..d).map(|_| positive(priors.length_scale, rng)).collect();
    let signal_variance = positive(priors.signal_variance, rng);
    let noise_variance = positive(priors.noise_variance, rng);
    GpParams { constant_mean, length_scales, signal_variance, noise_variance }
}

/// One joint draw of the latent function at `xs` (no observation noise).
/// Exactly repeated inputs receive identical values.
pub fn sample_latent<R: Rng + ?Sized>(xs: &[Vec<f64>], params: &GpParams, nu: Smoothness, rng: &mut R) -> Result<Vec<f64>> {
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
    let index: Vec<usize> = xs
        .iter()
        .map(|x| {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            *slot.entry(key).or_insert_with(|| {
                unique.push(x.clone());
                unique.len() - 1
            })
        })
        .collect();
    if unique.is_empty() {
        return Ok(Vec::new());
    }
    let latent = GpParams { noise_variance: f64::MIN_POSITIVE, ..params.clone() };
    let k = gram_matrix(&unique, &latent, nu, 0.0)?;
    let mut jitter = 1e-10 * params.signal_variance;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            break c;
        }
        jitter *= 10.0;
        if jitter > 1e-4 * params.signal_variance * (1.0 + 1e-9) {
            return Err(Error::NumericalFailure(format!("could not factor the prior covariance of {} points", unique.len())));
        }
    };
    let z = DVector::from_iterator(unique.len(), (0..unique.len()).map(|_| StandardNormal.sample(rng)));
    let f = chol.l() * z;
    Ok(index.iter().map(|&i| params.constant_mean + f[i]).collect())
}

fn sample_inputs<R: Rng + ?Sized>(n: usize, d: usize, discrete: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    if j < discrete {
                        rng.random_range(0..DISCRETE_LEVELS) as f64 / (DISCRETE_LEVELS - 1) as f64
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect()
}

/// Draws `n` noisy observations of one function at uniform random inputs.
pub fn sample_subdataset<R: Rng + ?Sized>(
    n: usize,
    params: &GpParams,
    nu: Smoothness,
    discrete: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let xs = sample_inputs(n, params.dim(), discrete, rng);
    let f = sample_latent(&xs, params, nu, rng)?;
    let sd = params.noise_variance.sqrt();
    let ys = f.into_iter().map(|v| v + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    Ok((xs, ys))
}

fn dataset_rng(seed: u64, i: usize) -> SeededRng {
    derive_rng(seed, "synth/dataset", i as u64)
}

fn generate_dataset(cfg: &SynthConfig, seed: u64, i: usize) -> Result<Dataset> {
    let id = format!("ds-{i:03}");
    let mut rng = dataset_rng(seed, i);
    let d = rng.random_range(cfg.dim_range.0..=cfg.dim_range.1);
    let priors = cfg.priors.at(d)?;
    let params = sample_params(&priors, d, &mut rng);
    let discrete = cfg.discrete_dims.min(d);
    let subdatasets = (0..cfg.subdatasets_per_dataset)
        .map(|j| {
            let mut r = derive_rng(seed, &format!("synth/{id}/subdataset"), j as u64);
            let (inputs, outputs) = sample_subdataset(cfg.observations_per_subdataset, &params, cfg.nu, discrete, &mut r)?;
            Ok(SubDatasetRecord { id: format!("sd-{j:03}"), inputs, outputs, split: None })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_dataset(&id))?;
    Ok(Dataset {
        id,
        domain: cfg.domain_for(d)?,
        subdatasets,
        ground_truth: Some(GroundTruth { params, priors, nu: cfg.nu }),
        split: None,
    })
}

/// Generates every dataset in parallel; each draws from its own seeded stream,
/// so the result does not depend on scheduling.
pub fn generate_superdataset(cfg: &SynthConfig, seed: u64) -> Result<SuperDataset> {
    cfg.validate()?;
    let datasets = (0..cfg.n_datasets)
        .into_par_iter()
        .map(|i| generate_dataset(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuperDataset { normalized: true, datasets, normalization: None })
}
