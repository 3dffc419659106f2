//! Consistency studies: how pre-trained estimates behave as the number of
//! sub-datasets per dataset (M) or the number of training datasets (N) grows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{encode_contexts, phi_forward, PhiModel};
use crate::data::{label_split, SplitMode, SuperDataset};
use crate::error::{Error, Result};
use crate::gp::{GpParams, Smoothness, SubDataset};
use crate::pretrain::{fit_estimates, step1_fit_dataset, step2_fit, DatasetEstimate, PhiKind, PretrainConfig};
use crate::priors::{gamma_kl, GammaPrior};
use crate::seed::{derive_rng, derive_rng_keyed};
use crate::synth::{generate_superdataset, sample_subdataset, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryMSpec {
    /// Shared by every sub-dataset.
    pub truth: GpParams,
    pub nu: Smoothness,
    pub observations_per_subdataset: usize,
    pub grid: Vec<usize>,
    pub repeats: usize,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryNSpec {
    pub synth: SynthConfig,
    pub split: SplitMode,
    pub train_fraction: f64,
    pub grid: Vec<usize>,
    pub repeats: usize,
    pub phi_kinds: Vec<PhiKind>,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "vary", rename_all = "snake_case")]
pub enum ConsistencySpec {
    M(VaryMSpec),
    N(VaryNSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let (mean, std) = crate::bo::mean_std(values);
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        Summary { mean, std, median }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryMPoint {
    pub m: usize,
    pub estimates: Vec<GpParams>,
    /// Over repeats, per dimension.
    pub length_scales: Vec<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryNPoint {
    pub n: usize,
    pub phi_kind: PhiKind,
    /// KL(truth ‖ learned) averaged over the dimensions in range, per repeat.
    pub kl: Vec<f64>,
    /// Mean held-out length-scale NLL under the learned prior, per repeat.
    pub heldout_nll: Vec<f64>,
    pub kl_summary: Summary,
    pub heldout_nll_summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "vary", rename_all = "snake_case")]
pub enum ConsistencyReport {
    M { spec: VaryMSpec, seed: u64, points: Vec<VaryMPoint> },
    N { spec: VaryNSpec, seed: u64, points: Vec<VaryNPoint> },
}

fn repeat_seed(seed: u64, r: usize) -> u64 {
    derive_rng(seed, "consistency/repeat", r as u64).random()
}

fn check_grid(grid: &[usize], repeats: usize) -> Result<()> {
    if grid.is_empty() || repeats == 0 || grid.contains(&0) {
        return Err(Error::Config("grid and repeats must be non-empty and positive".into()));
    }
    Ok(())
}

fn vary_m(spec: &VaryMSpec, seed: u64) -> Result<Vec<VaryMPoint>> {
    check_grid(&spec.grid, spec.repeats)?;
    spec.truth.validate()?;
    let cfg = PretrainConfig { nu: spec.nu, ..spec.pretrain.clone() };
    let max_m = *spec.grid.iter().max().expect("non-empty");
    // each repeat draws max(M) sub-datasets once; smaller M use a prefix
    let mut per_m: Vec<Vec<GpParams>> = vec![Vec::new(); spec.grid.len()];
    for r in 0..spec.repeats {
        let rs = repeat_seed(seed, r);
        let subs = (0..max_m)
            .map(|j| {
                let mut rng = derive_rng(rs, "consistency/subdataset", j as u64);
                let (x, y) = sample_subdataset(spec.observations_per_subdataset, &spec.truth, spec.nu, 0, &mut rng)?;
                SubDataset::new(x, y)
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, &m) in spec.grid.iter().enumerate() {
            let mut rng = derive_rng(rs, "step1", m as u64);
            per_m[k].push(step1_fit_dataset(&subs[..m], &cfg, &mut rng)?);
        }
    }
    Ok(spec
        .grid
        .iter()
        .zip(per_m)
        .map(|(&m, estimates)| {
            let length_scales = (0..spec.truth.dim())
                .map(|j| Summary::of(&estimates.iter().map(|p| p.length_scales[j]).collect::<Vec<_>>()))
                .collect();
            VaryMPoint { m, estimates, length_scales }
        })
        .collect())
}

/// Mean over dimensions `lo..=hi` of KL(truth_d ‖ learned_d) for the length-scale prior.
pub fn average_length_scale_kl(phi: &PhiModel, synth: &SynthConfig) -> Result<f64> {
    let (lo, hi) = synth.dim_range;
    let mut total = 0.0;
    let mut count = 0usize;
    for d in lo..=hi {
        let truth = synth.priors.at(d)?.length_scale;
        for ctx in encode_contexts(&synth.domain_for(d)?)? {
            total += gamma_kl(&truth, &phi_forward(phi, &ctx)?);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean negative log-density of held-out length-scale estimates under the learned prior.
pub fn heldout_length_scale_nll(phi: &PhiModel, heldout: &[DatasetEstimate]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in heldout {
        let priors: Vec<GammaPrior> = phi.length_scale_priors(&e.domain)?;
        for (g, l) in priors.iter().zip(&e.params.length_scales) {
            total -= g.log_pdf(*l);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no held-out length-scales to score".into()));
    }
    Ok(total / count as f64)
}

fn vary_n(spec: &VaryNSpec, seed: u64) -> Result<Vec<VaryNPoint>> {
    check_grid(&spec.grid, spec.repeats)?;
    if spec.phi_kinds.is_empty() {
        return Err(Error::Config("at least one phi kind is required".into()));
    }
    let cfg = PretrainConfig { nu: spec.synth.nu, ..spec.pretrain.clone() };
    let max_n = *spec.grid.iter().max().expect("non-empty");
    let mut kl = vec![vec![Vec::new(); spec.phi_kinds.len()]; spec.grid.len()];
    let mut nll = kl.clone();
    for r in 0..spec.repeats {
        let rs = repeat_seed(seed, r);
        let mut sd: SuperDataset = generate_superdataset(&spec.synth, rs)?;
        label_split(&mut sd, spec.split, spec.train_fraction, rs)?;
        let train: Vec<_> = sd
            .datasets
            .iter()
            .map(|d| (d.clone(), d.training_subdatasets()))
            .filter(|(_, s)| !s.is_empty())
            .collect();
        if train.len() < max_n {
            return Err(Error::Config(format!("grid asks for {max_n} training datasets, only {} available", train.len())));
        }
        let estimates = fit_estimates(&train[..max_n], &cfg, rs)?;
        let heldout = sd
            .datasets
            .iter()
            .filter(|d| !d.test_indices().is_empty())
            .map(|d| {
                let subs: Vec<SubDataset> = d.test_indices().iter().map(|&j| d.subdatasets[j].to_subdataset()).collect();
                let params = step1_fit_dataset(&subs, &cfg, &mut derive_rng_keyed(rs, "heldout", &d.id))?;
                Ok(DatasetEstimate { dataset_id: d.id.clone(), domain: d.domain.clone(), params })
            })
            .collect::<Result<Vec<_>>>()?;
        for (gi, &n) in spec.grid.iter().enumerate() {
            for (ki, &kind) in spec.phi_kinds.iter().enumerate() {
                let phi = step2_fit(&estimates[..n], kind, &cfg, &mut derive_rng(rs, "step2", 0))?;
                kl[gi][ki].push(average_length_scale_kl(&phi, &spec.synth)?);
                nll[gi][ki].push(heldout_length_scale_nll(&phi, &heldout)?);
            }
        }
    }
    let mut points = Vec::new();
    for (gi, &n) in spec.grid.iter().enumerate() {
        for (ki, &phi_kind) in spec.phi_kinds.iter().enumerate() {
            let (k, h) = (kl[gi][ki].clone(), nll[gi][ki].clone());
            points.push(VaryNPoint {
                n,
                phi_kind,
                kl_summary: Summary::of(&k),
                heldout_nll_summary: Summary::of(&h),
                kl: k,
                heldout_nll: h,
            });
        }
    }
    Ok(points)
}

pub fn consistency_experiment(spec: &ConsistencySpec, seed: u64) -> Result<ConsistencyReport> {
    Ok(match spec {
        ConsistencySpec::M(s) => ConsistencyReport::M { spec: s.clone(), seed, points: vary_m(s, seed)? },
        ConsistencySpec::N(s) => ConsistencyReport::N { spec: s.clone(), seed, points: vary_n(s, seed)? },
    })
}

impl ConsistencyReport {
    /// Plot-ready comma-separated rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            ConsistencyReport::M { points, .. } => {
                out.push_str("m,dim,mean,std,median\n");
                for p in points {
                    for (j, s) in p.length_scales.iter().enumerate() {
                        out.push_str(&format!("{},{j},{},{},{}\n", p.m, s.mean, s.std, s.median));
                    }
                }
            }
            ConsistencyReport::N { points, .. } => {
                out.push_str("n,phi_kind,kl_mean,kl_std,kl_median,nll_mean,nll_std,nll_median\n");
                for p in points {
                    let (k, h) = (p.kl_summary, p.heldout_nll_summary);
                    out.push_str(&format!(
                        "{},{:?},{},{},{},{},{},{}\n",
                        p.n, p.phi_kind, k.mean, k.std, k.median, h.mean, h.std, h.median
                    ));
                }
            }
        }
        out
    }
}

pub const REPORT_FORMAT: &str = "mphd-consistency";
pub const REPORT_VERSION: u32 = 1;

pub fn encode_report(r: &ConsistencyReport) -> Result<Vec<u8>> {
    crate::io::encode_versioned(REPORT_FORMAT, REPORT_VERSION, r)
}

pub fn decode_report(bytes: &[u8]) -> Result<ConsistencyReport> {
    crate::io::decode_versioned(bytes, REPORT_FORMAT, REPORT_VERSION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{Step1Config, Step2Config};
    use crate::synth::{SynthProfile, SynthScale};

    fn quick() -> PretrainConfig {
        PretrainConfig {
            step1: Step1Config { iterations: 150, learning_rate: 0.03, subsample: 50, restarts: 0 },
            step2: Step2Config { iterations: 100, learning_rate: 0.01, weight_decay: 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert!((s.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vary_m_shapes_and_determinism() {
        let spec = ConsistencySpec::M(VaryMSpec {
            truth: GpParams::new(0.0, vec![0.3], 1.0, 1e-3).unwrap(),
            nu: Smoothness::FiveHalves,
            observations_per_subdataset: 10,
            grid: vec![2, 4],
            repeats: 3,
            pretrain: quick(),
        });
        let a = consistency_experiment(&spec, 1).unwrap();
        assert_eq!(a, consistency_experiment(&spec, 1).unwrap());
        let ConsistencyReport::M { points, .. } = &a else { panic!() };
        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| p.estimates.len() == 3 && p.length_scales.len() == 1));
        assert_eq!(a.to_csv().lines().count(), 3);
        assert_eq!(decode_report(&encode_report(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn vary_n_rejects_oversized_grid() {
        let mut synth = SynthConfig::preset(SynthProfile::S, SynthScale::Desk).unwrap();
        synth.n_datasets = 5;
        synth.subdatasets_per_dataset = 2;
        synth.observations_per_subdataset = 20;
        let spec = VaryNSpec {
            synth,
            split: SplitMode::PerSuperSplit,
            train_fraction: 0.8,
            grid: vec![2, 5],
            repeats: 1,
            phi_kinds: vec![PhiKind::Constant],
            pretrain: quick(),
        };
        assert!(matches!(consistency_experiment(&ConsistencySpec::N(spec.clone()), 0), Err(Error::Config(_))));
        let ok = VaryNSpec { grid: vec![2, 4], ..spec };
        let ConsistencyReport::N { points, .. } = consistency_experiment(&ConsistencySpec::N(ok), 0).unwrap() else {
            panic!()
        };
        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| p.kl[0] >= 0.0 && p.heldout_nll[0].is_finite()));
    }

    #[test]
    fn kl_of_truth_is_zero() {
        let synth = SynthConfig::preset(SynthProfile::L, SynthScale::Desk).unwrap();
        // constant prior equal to the truth at one dimension only
        let d = synth.dim_range.0;
        let g = synth.priors.at(d).unwrap().length_scale;
        let phi = PhiModel {
            length_scale: crate::context::LengthScalePrior::Constant { prior: g },
            shared: crate::context::SharedPriors {
                constant_mean: crate::priors::NormalPrior { mean: 0.0, std: 1.0 },
                signal_variance: g,
                noise_variance: g,
            },
        };
        let single = SynthConfig { dim_range: (d, d), ..synth.clone() };
        assert!(average_length_scale_kl(&phi, &single).unwrap().abs() < 1e-12);
        assert!(average_length_scale_kl(&phi, &synth).unwrap() > 0.0);
    }
}
