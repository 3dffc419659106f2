//! Two-step pre-training: a per-dataset GP fit (step ①), then a fit of the
//! hyperprior over those estimates (step ②).
//!
//! Step ① runs Adam on the GP negative log-likelihood in log-parameter space,
//! re-subsampling every sub-dataset at each iteration. Step ② fits the length-
//! scale prior (network or constant) plus shared priors for the remaining
//! parameter types.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bo::ParamPriors;
use crate::context::{encode_contexts, ContextVector, DomainDescriptor, LengthScalePrior, NnPhi, PhiModel, SharedPriors};
use crate::data::{Dataset, SuperDataset};
use crate::error::{Error, Result};
use crate::gp::{gp_nll, gp_nll_and_grad, GpParams, Smoothness, SubDataset};
use crate::io::{decode_versioned, encode_versioned, sha256_hex};
use crate::optim::{adam, adam_in_box, OptimConfig};
use crate::priors::{gamma_mle, normal_mle, PriorFamily};
use crate::seed::{derive_rng, derive_rng_keyed};

/// Box on raw parameters during fitting: length-scales, then variances.
pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (1e-4, 1e4);
pub const VARIANCE_BOUNDS: (f64, f64) = (1e-8, 1e4);
pub const MEAN_BOUNDS: (f64, f64) = (-1e4, 1e4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    Nn,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Observations drawn (without replacement) from each sub-dataset per iteration.
    pub subsample: usize,
    /// Random restarts in addition to the deterministic initialization.
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Config {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Coefficient of an L2 penalty `λ/2·Σw²` on the network weights (biases are not penalized).
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub nu: Smoothness,
    #[serde(default)]
    pub exclude_dataset_ids: BTreeSet<String>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            step1: Step1Config { iterations: 20_000, learning_rate: 1e-3, subsample: 50, restarts: 2 },
            step2: Step2Config { iterations: 10_000, learning_rate: 1e-3, weight_decay: 0.0 },
            nu: Smoothness::FiveHalves,
            exclude_dataset_ids: BTreeSet::new(),
        }
    }
}

impl PretrainConfig {
    /// Iteration counts and learning rates scaled down for single-core runs.
    pub fn desk() -> Self {
        PretrainConfig {
            step1: Step1Config { iterations: 600, learning_rate: 0.02, subsample: 50, restarts: 1 },
            step2: Step2Config { iterations: 2000, learning_rate: 1e-3, weight_decay: 0.3 },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step1.iterations == 0 || self.step2.iterations == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if self.step1.subsample < 2 {
            return Err(Error::Config("step-1 subsample must be at least 2".into()));
        }
        for lr in [self.step1.learning_rate, self.step2.learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        let wd = self.step2.weight_decay;
        if !(wd >= 0.0 && wd.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {wd}")));
        }
        Ok(())
    }
}

fn unconstrained_bounds(d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![MEAN_BOUNDS.0];
    let mut hi = vec![MEAN_BOUNDS.1];
    lo.extend(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.0.ln(), d));
    hi.extend(std::iter::repeat_n(LENGTH_SCALE_BOUNDS.1.ln(), d));
    lo.extend([VARIANCE_BOUNDS.0.ln(); 2]);
    hi.extend([VARIANCE_BOUNDS.1.ln(); 2]);
    (lo, hi)
}

fn clamp_params(p: &GpParams) -> GpParams {
    GpParams {
        constant_mean: p.constant_mean.clamp(MEAN_BOUNDS.0, MEAN_BOUNDS.1),
        length_scales: p.length_scales.iter().map(|l| l.clamp(LENGTH_SCALE_BOUNDS.0, LENGTH_SCALE_BOUNDS.1)).collect(),
        signal_variance: p.signal_variance.clamp(VARIANCE_BOUNDS.0, VARIANCE_BOUNDS.1),
        noise_variance: p.noise_variance.clamp(VARIANCE_BOUNDS.0, VARIANCE_BOUNDS.1),
    }
}

/// Deterministic starting point: ℓ = 0.5, σ² = var(y), noise = 1e-3·σ², mean = mean(y).
pub fn step1_initial_params(dataset: &[SubDataset], d: usize) -> GpParams {
    let ys: Vec<f64> = dataset.iter().flat_map(|s| s.outputs.iter().copied()).collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    clamp_params(&GpParams {
        constant_mean: mean,
        length_scales: vec![0.5; d],
        signal_variance: var,
        noise_variance: 1e-3 * var,
    })
}

fn random_start<R: Rng + ?Sized>(base: &GpParams, rng: &mut R) -> GpParams {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln()).exp();
    let sd = base.signal_variance.sqrt();
    clamp_params(&GpParams {
        constant_mean: base.constant_mean + sd * rng.random_range(-0.5..0.5),
        length_scales: base.length_scales.iter().map(|_| log_uniform(rng, 0.05, 2.0)).collect(),
        signal_variance: base.signal_variance * log_uniform(rng, 0.3, 3.0),
        noise_variance: base.signal_variance * log_uniform(rng, 1e-5, 0.1),
    })
}

fn subsample<R: Rng + ?Sized>(dataset: &[SubDataset], k: usize, rng: &mut R) -> Vec<SubDataset> {
    dataset
        .iter()
        .map(|s| {
            if s.len() <= k {
                s.clone()
            } else {
                let mut idx = sample_indices(rng, s.len(), k).into_vec();
                idx.sort_unstable();
                s.select(&idx)
            }
        })
        .collect()
}

/// Step ①: GP maximum-likelihood fit for one dataset.
pub fn step1_fit_dataset<R: Rng + ?Sized>(dataset: &[SubDataset], cfg: &PretrainConfig, rng: &mut R) -> Result<GpParams> {
    cfg.validate()?;
    let d = match dataset.first().and_then(SubDataset::dim) {
        Some(d) => d,
        None => return Err(Error::InvalidParameter("step 1 needs at least one non-empty sub-dataset".into())),
    };
    if let Some(s) = dataset.iter().find(|s| s.len() < 2) {
        return Err(Error::InvalidParameter(format!("sub-dataset with {} observation(s); step 1 needs 2", s.len())));
    }
    let init = step1_initial_params(dataset, d);
    let mut starts = vec![init.clone()];
    for _ in 0..cfg.step1.restarts {
        starts.push(random_start(&init, rng));
    }
    let (lo, hi) = unconstrained_bounds(d);
    let ocfg = OptimConfig::adam(cfg.step1.learning_rate, cfg.step1.iterations);
    let mut candidates = vec![init.clone()];
    for start in &starts {
        let mut last = start.to_unconstrained();
        let run = adam_in_box(
            |u: &[f64]| {
                last.copy_from_slice(u);
                let batch = subsample(dataset, cfg.step1.subsample, rng);
                gp_nll_and_grad(&batch, &GpParams::from_unconstrained(u), cfg.nu)
            },
            &start.to_unconstrained(),
            &ocfg,
            Some((&lo, &hi)),
        );
        // a failed restart is dropped; the others may still succeed
        if let Ok(r) = run {
            candidates.push(GpParams::from_unconstrained(&r.x));
            candidates.push(GpParams::from_unconstrained(&last));
        }
    }
    let mut best: Option<(f64, GpParams)> = None;
    for c in candidates {
        if let Ok(v) = gp_nll(dataset, &c, cfg.nu) {
            if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, c));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::NumericalFailure("every step-1 candidate failed to evaluate on the full dataset".into()))
}

/// A dataset's step-① estimate together with its domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEstimate {
    pub dataset_id: String,
    pub domain: DomainDescriptor,
    pub params: GpParams,
}

/// `(context, length-scale)` pairs for every dimension of every estimate.
pub fn length_scale_pairs(estimates: &[DatasetEstimate]) -> Result<Vec<(ContextVector, f64)>> {
    let mut pairs = Vec::new();
    for e in estimates {
        let ctx = encode_contexts(&e.domain)?;
        if ctx.len() != e.params.dim() {
            return Err(Error::DimensionMismatch { expected: ctx.len(), found: e.params.dim() });
        }
        pairs.extend(ctx.into_iter().zip(e.params.length_scales.iter().copied()));
    }
    Ok(pairs)
}

/// Step ②: hyperprior fit from step-① estimates.
pub fn step2_fit<R: Rng + ?Sized>(estimates: &[DatasetEstimate], kind: PhiKind, cfg: &PretrainConfig, rng: &mut R) -> Result<PhiModel> {
    if estimates.len() < 2 {
        return Err(Error::InvalidParameter(format!("step 2 needs at least 2 datasets, got {}", estimates.len())));
    }
    let pairs = length_scale_pairs(estimates)?;
    let pooled: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let constant = gamma_mle(&pooled)?;
    let length_scale = match kind {
        PhiKind::Constant => LengthScalePrior::Constant { prior: constant },
        PhiKind::Nn => {
            let mut net = NnPhi::init(rng, Some(constant));
            // zero output weights: training starts from the pooled fit
            net.params[crate::context::OUTPUT_WEIGHTS].iter_mut().for_each(|w| *w = 0.0);
            let ocfg = OptimConfig::adam(cfg.step2.learning_rate, cfg.step2.iterations);
            let count_scale = net.count_scale;
            let decay = cfg.step2.weight_decay;
            let r = adam(
                |w: &[f64]| {
                    let (mut f, mut g) =
                        crate::context::phi_objective_and_grad(&NnPhi { params: w.to_vec(), count_scale }, &pairs)?;
                    for i in crate::context::WEIGHT_RANGES.into_iter().flatten() {
                        f += 0.5 * decay * w[i] * w[i];
                        g[i] += decay * w[i];
                    }
                    Ok((f, g))
                },
                &net.params,
                &ocfg,
            )?;
            LengthScalePrior::Network(NnPhi { params: r.x, count_scale })
        }
    };
    let column = |f: fn(&GpParams) -> f64| estimates.iter().map(|e| f(&e.params)).collect::<Vec<f64>>();
    let shared = SharedPriors {
        constant_mean: normal_mle(&column(|p| p.constant_mean))?,
        signal_variance: gamma_mle(&column(|p| p.signal_variance))?,
        noise_variance: gamma_mle(&column(|p| p.noise_variance))?,
    };
    Ok(PhiModel { length_scale, shared })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub phi_kind: PhiKind,
    /// Datasets whose step-① estimates entered step ②, in file order.
    pub trained_on: Vec<String>,
    /// Datasets excluded on request (the NToT setting), sorted.
    pub excluded: Vec<String>,
    /// Hash of the training sub-datasets actually used.
    pub training_data_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub phi: PhiModel,
    pub estimates: Vec<DatasetEstimate>,
    pub config: PretrainConfig,
    pub provenance: Provenance,
}

impl PretrainedModel {
    pub fn nu(&self) -> Smoothness {
        self.config.nu
    }

    /// Priors over every GP parameter of a domain.
    pub fn priors_for(&self, domain: &DomainDescriptor) -> Result<ParamPriors> {
        let ls = self.phi.length_scale_priors(domain)?;
        Ok(ParamPriors {
            constant_mean: PriorFamily::Normal(self.phi.shared.constant_mean),
            length_scales: ls.into_iter().map(PriorFamily::Gamma).collect(),
            signal_variance: PriorFamily::Gamma(self.phi.shared.signal_variance),
            noise_variance: PriorFamily::Gamma(self.phi.shared.noise_variance),
        })
    }

    pub fn estimate(&self, dataset_id: &str) -> Option<&DatasetEstimate> {
        self.estimates.iter().find(|e| e.dataset_id == dataset_id)
    }
}

pub const MODEL_FORMAT: &str = "mphd-model";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &PretrainedModel) -> Result<Vec<u8>> {
    model.phi.validate()?;
    encode_versioned(MODEL_FORMAT, MODEL_VERSION, model)
}

pub fn decode_model(bytes: &[u8]) -> Result<PretrainedModel> {
    let m: PretrainedModel = decode_versioned(bytes, MODEL_FORMAT, MODEL_VERSION)?;
    m.phi.validate()?;
    for e in &m.estimates {
        e.params.validate()?;
    }
    Ok(m)
}

/// Datasets that take part in pre-training: not excluded, not labelled test,
/// and with at least one training sub-dataset.
fn training_view(sd: &SuperDataset, exclude: &BTreeSet<String>) -> Vec<(Dataset, Vec<SubDataset>)> {
    sd.datasets
        .iter()
        .filter(|d| !exclude.contains(&d.id))
        .map(|d| (d.clone(), d.training_subdatasets()))
        .filter(|(_, subs)| !subs.is_empty())
        .collect()
}

fn training_hash(view: &[(Dataset, Vec<SubDataset>)]) -> Result<String> {
    let canonical: Vec<(&str, &DomainDescriptor, &Vec<SubDataset>)> =
        view.iter().map(|(d, s)| (d.id.as_str(), &d.domain, s)).collect();
    let bytes = serde_json::to_vec(&canonical).map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// Runs step ① on every training dataset; each uses its own stream keyed by id.
pub fn fit_estimates(view: &[(Dataset, Vec<SubDataset>)], cfg: &PretrainConfig, seed: u64) -> Result<Vec<DatasetEstimate>> {
    view.par_iter()
        .map(|(ds, subs)| {
            let mut rng = derive_rng_keyed(seed, "step1", &ds.id);
            let params = step1_fit_dataset(subs, cfg, &mut rng).map_err(|e| e.in_dataset(&ds.id))?;
            Ok(DatasetEstimate { dataset_id: ds.id.clone(), domain: ds.domain.clone(), params })
        })
        .collect()
}

pub fn pretrain(sd: &SuperDataset, kind: PhiKind, cfg: &PretrainConfig, seed: u64) -> Result<PretrainedModel> {
    cfg.validate()?;
    let view = training_view(sd, &cfg.exclude_dataset_ids);
    if view.len() < 2 {
        return Err(Error::Config(format!(
            "pre-training needs at least 2 training datasets after exclusions, found {}",
            view.len()
        )));
    }
    let estimates = fit_estimates(&view, cfg, seed)?;
    let phi = step2_fit(&estimates, kind, cfg, &mut derive_rng(seed, "step2", 0))?;
    Ok(PretrainedModel {
        phi,
        config: cfg.clone(),
        provenance: Provenance {
            seed,
            phi_kind: kind,
            trained_on: estimates.iter().map(|e| e.dataset_id.clone()).collect(),
            excluded: cfg.exclude_dataset_ids.iter().cloned().collect(),
            training_data_hash: training_hash(&view)?,
        },
        estimates,
    })
}

/// Concatenates the sub-datasets of one dataset into a single sub-dataset,
/// shifting block `j` by `(Q + Q′)·j` along every axis, where `Q′` is the
/// largest pairwise input distance in the dataset plus one.
pub fn build_pseudo_subdataset(dataset: &[SubDataset], q: f64) -> Result<SubDataset> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::InvalidParameter(format!("block spacing must be positive, got {q}")));
    }
    let all: Vec<&Vec<f64>> = dataset.iter().flat_map(|s| s.inputs.iter()).collect();
    let mut diameter = 0.0f64;
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            diameter = diameter.max(a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        }
    }
    let step = q + diameter + 1.0;
    let mut out = SubDataset::empty();
    for (j, s) in dataset.iter().enumerate() {
        let shift = step * j as f64;
        for (x, y) in s.inputs.iter().zip(&s.outputs) {
            out.push(x.iter().map(|v| v + shift).collect(), *y);
        }
    }
    Ok(out)
}
