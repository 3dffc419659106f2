//! Bayesian optimization: acquisitions, MAP refits against fixed or
//! pre-trained priors, candidate selection, baselines and the experiment driver.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::DomainDescriptor;
use crate::data::{Dataset, SuperDataset};
use crate::error::{Error, Result};
use crate::gp::{gp_nll_and_grad, GpParams, GpPosterior, Smoothness, SubDataset};
use crate::io::{decode_versioned, encode_superdataset, encode_versioned, sha256_hex};
use crate::optim::{lbfgs, OptimConfig};
use crate::pretrain::{encode_model, PhiKind, PretrainedModel};
use crate::priors::PriorFamily;
use crate::seed::derive_rng_keyed;

/// Candidates drawn per step when maximizing over a continuous domain.
pub const CONTINUOUS_CANDIDATES: usize = 2000;
/// L-BFGS iterations per MAP refit start.
pub const REFIT_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcquisitionSpec {
    /// Probability of exceeding `y_best + zeta`.
    Pi { zeta: f64 },
    Ei,
    /// `μ + √β·σ`, or `μ + β·σ` with `linear_beta`.
    Ucb {
        beta: f64,
        #[serde(default)]
        linear_beta: bool,
    },
}

impl AcquisitionSpec {
    pub fn pi() -> Self {
        AcquisitionSpec::Pi { zeta: 0.1 }
    }

    pub fn ucb() -> Self {
        AcquisitionSpec::Ucb { beta: 3.0, linear_beta: false }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AcquisitionSpec::Pi { zeta } if !(zeta >= 0.0 && zeta.is_finite()) => {
                Err(Error::Config(format!("PI zeta must be non-negative, got {zeta}")))
            }
            AcquisitionSpec::Ucb { beta, .. } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::Config(format!("UCB beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Acquisition score of a Gaussian predictive `N(mu, sigma²)` (maximized).
pub fn acquisition_value(spec: &AcquisitionSpec, mu: f64, sigma: f64, y_best: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    match *spec {
        AcquisitionSpec::Pi { zeta } => {
            let gap = mu - (y_best + zeta);
            if sigma > 0.0 {
                normal_cdf(gap / sigma)
            } else if gap > 0.0 {
                1.0
            } else if gap < 0.0 {
                0.0
            } else {
                0.5
            }
        }
        AcquisitionSpec::Ei => {
            let gap = mu - y_best;
            if sigma > 0.0 {
                let z = gap / sigma;
                gap * normal_cdf(z) + sigma * normal_pdf(z)
            } else {
                gap.max(0.0)
            }
        }
        AcquisitionSpec::Ucb { beta, linear_beta } => mu + if linear_beta { beta } else { beta.sqrt() } * sigma,
    }
}

pub enum OracleKind {
    Tabular { inputs: Vec<Vec<f64>>, outputs: Vec<f64> },
    Continuous { f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>, y_max: Option<f64> },
}

/// A black-box objective to maximize.
pub struct ObjectiveOracle {
    pub kind: OracleKind,
    pub domain: DomainDescriptor,
    /// Divisor applied to regrets (1 for outputs already on a unit scale).
    pub regret_scale: f64,
}

impl ObjectiveOracle {
    pub fn tabular(domain: DomainDescriptor, data: &SubDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("tabular oracle needs at least one candidate".into()));
        }
        if data.dim() != Some(domain.dim()) {
            return Err(Error::DimensionMismatch { expected: domain.dim(), found: data.dim().unwrap_or(0) });
        }
        Ok(ObjectiveOracle {
            kind: OracleKind::Tabular { inputs: data.inputs.clone(), outputs: data.outputs.clone() },
            domain,
            regret_scale: 1.0,
        })
    }

    /// Divides regrets by the table's output range (for tables whose outputs are not normalized).
    pub fn with_range_scaling(mut self) -> Self {
        if let OracleKind::Tabular { outputs, .. } = &self.kind {
            let (lo, hi) = outputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
            if hi > lo {
                self.regret_scale = hi - lo;
            }
        }
        self
    }

    pub fn continuous(domain: DomainDescriptor, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, y_max: Option<f64>) -> Self {
        ObjectiveOracle { kind: OracleKind::Continuous { f: Box::new(f), y_max }, domain, regret_scale: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn y_max(&self) -> Result<f64> {
        match &self.kind {
            OracleKind::Tabular { outputs, .. } => Ok(outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            OracleKind::Continuous { y_max, .. } => {
                y_max.ok_or_else(|| Error::Config("continuous oracle has no recorded y_max".into()))
            }
        }
    }
}

/// One prior per GP parameter of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPriors {
    pub constant_mean: PriorFamily,
    pub length_scales: Vec<PriorFamily>,
    pub signal_variance: PriorFamily,
    pub noise_variance: PriorFamily,
}

impl ParamPriors {
    /// The same four priors for every dimension.
    pub fn uniform_over_dims(d: usize, mean: PriorFamily, ls: PriorFamily, sv: PriorFamily, nv: PriorFamily) -> Self {
        ParamPriors { constant_mean: mean, length_scales: vec![ls; d], signal_variance: sv, noise_variance: nv }
    }

    pub fn hand_specified(d: usize) -> Self {
        Self::uniform_over_dims(
            d,
            PriorFamily::normal(0.5, 0.5).expect("valid"),
            PriorFamily::gamma(1.0, 0.1).expect("valid"),
            PriorFamily::gamma(1.0, 5.0).expect("valid"),
            PriorFamily::gamma(1.0, 100.0).expect("valid"),
        )
    }

    pub fn non_informative(d: usize) -> Self {
        Self::uniform_over_dims(
            d,
            PriorFamily::uniform(0.0, 1.0).expect("valid"),
            PriorFamily::uniform(1e-5, 30.0).expect("valid"),
            PriorFamily::uniform(1e-5, 1.0).expect("valid"),
            PriorFamily::uniform(1e-5, 0.1).expect("valid"),
        )
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    fn iter(&self) -> impl Iterator<Item = &PriorFamily> {
        std::iter::once(&self.constant_mean)
            .chain(&self.length_scales)
            .chain([&self.signal_variance, &self.noise_variance])
    }

    pub fn modes(&self) -> GpParams {
        GpParams {
            constant_mean: self.constant_mean.mode(),
            length_scales: self.length_scales.iter().map(PriorFamily::mode).collect(),
            signal_variance: self.signal_variance.mode(),
            noise_variance: self.noise_variance.mode(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GpParams {
        let positive = |p: &PriorFamily, rng: &mut R| p.sample(rng).max(1e-6);
        GpParams {
            constant_mean: self.constant_mean.sample(rng),
            length_scales: self.length_scales.iter().map(|p| positive(p, rng)).collect(),
            signal_variance: positive(&self.signal_variance, rng),
            noise_variance: positive(&self.noise_variance, rng),
        }
    }

    /// Sum of log-densities of `p` in parameter order.
    pub fn log_density(&self, p: &GpParams) -> Result<f64> {
        if p.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: p.dim() });
        }
        self.iter().zip(p.to_vec()).map(|(prior, x)| prior.log_pdf(x)).sum()
    }
}

/// Negative log-posterior (up to a constant) and its gradient in the
/// unconstrained coordinates. The prior density is over θ itself.
pub fn map_objective(observations: &SubDataset, priors: &ParamPriors, nu: Smoothness, u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = GpParams::from_unconstrained(u);
    let lp = priors.log_density(&p)?;
    if lp == f64::NEG_INFINITY {
        return Ok((f64::INFINITY, vec![0.0; u.len()]));
    }
    let (nll, mut g) = if observations.is_empty() {
        (0.0, vec![0.0; u.len()])
    } else {
        gp_nll_and_grad(std::slice::from_ref(observations), &p, nu)?
    };
    let theta = p.to_vec();
    for (k, prior) in priors.iter().enumerate() {
        let dlp = prior.grad_log_pdf(theta[k]);
        // the mean is unconstrained; every other coordinate is a logarithm
        g[k] -= if k == 0 { dlp } else { dlp * theta[k] };
    }
    Ok((nll - lp, g))
}

/// MAP estimate under `priors`: the prior modes plus one random restart.
pub fn map_refit<R: Rng + ?Sized>(
    observations: &SubDataset,
    priors: &ParamPriors,
    nu: Smoothness,
    rng: &mut R,
) -> Result<GpParams> {
    if observations.dim().is_some_and(|d| d != priors.dim()) {
        return Err(Error::DimensionMismatch { expected: priors.dim(), found: observations.dim().unwrap_or(0) });
    }
    let modes = priors.modes();
    if observations.is_empty() {
        return Ok(modes);
    }
    let starts = [modes, priors.sample(rng)];
    let cfg = OptimConfig::lbfgs(REFIT_ITERATIONS);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut last_err = None;
    for s in &starts {
        match lbfgs(|u: &[f64]| map_objective(observations, priors, nu, u), &s.to_unconstrained(), &cfg) {
            Ok(r) if r.value.is_finite() => {
                if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
                    best = Some((r.value, r.x));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, u)) => Ok(GpParams::from_unconstrained(&u)),
        None => Err(last_err.unwrap_or_else(|| Error::NumericalFailure("every MAP refit start failed".into()))),
    }
}

/// Where the next query goes.
pub enum Proposal {
    Candidate(usize),
    Point(Vec<f64>),
}

/// Index of the largest score among unobserved entries; ties go to the lowest index.
pub fn argmax_unobserved(scores: &[f64], observed: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&a, &seen)) in scores.iter().zip(observed).enumerate() {
        if !seen && best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

/// Maximizes the acquisition under a GP with parameters `params`.
pub fn propose_next<R: Rng + ?Sized>(
    acq: &AcquisitionSpec,
    params: &GpParams,
    nu: Smoothness,
    observations: &SubDataset,
    observed: &[bool],
    oracle: &ObjectiveOracle,
    rng: &mut R,
) -> Result<Proposal> {
    let posterior = GpPosterior::fit(params, nu, observations)?;
    let y_best = observations.outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let score = |x: &[f64]| -> Result<f64> {
        let (m, v) = posterior.predict(x)?;
        Ok(acquisition_value(acq, m, v.max(0.0).sqrt(), y_best))
    };
    match &oracle.kind {
        OracleKind::Tabular { inputs, .. } => {
            let scores = inputs
                .iter()
                .zip(observed)
                .map(|(x, &seen)| if seen { Ok(f64::NEG_INFINITY) } else { score(x) })
                .collect::<Result<Vec<f64>>>()?;
            argmax_unobserved(&scores, observed).map(Proposal::Candidate).ok_or(Error::Exhausted)
        }
        OracleKind::Continuous { .. } => {
            let mut best: Option<(Vec<f64>, f64)> = None;
            for _ in 0..CONTINUOUS_CANDIDATES {
                let x: Vec<f64> = (0..oracle.dim()).map(|_| rng.random::<f64>()).collect();
                let a = score(&x)?;
                if best.as_ref().is_none_or(|(_, b)| a > *b) {
                    best = Some((x, a));
                }
            }
            Ok(Proposal::Point(best.expect("at least one candidate").0))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    MphdStandard,
    MphdNonNn,
    BaseGp,
    HandSpecifiedHgp,
    NonInformativeHgp,
    GroundTruthHgp,
    GroundTruthGp,
    Random,
}

impl MethodSpec {
    pub const ALL: [MethodSpec; 8] = [
        MethodSpec::MphdStandard,
        MethodSpec::MphdNonNn,
        MethodSpec::BaseGp,
        MethodSpec::HandSpecifiedHgp,
        MethodSpec::NonInformativeHgp,
        MethodSpec::GroundTruthHgp,
        MethodSpec::GroundTruthGp,
        MethodSpec::Random,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MethodSpec::MphdStandard => "mphd_standard",
            MethodSpec::MphdNonNn => "mphd_non_nn",
            MethodSpec::BaseGp => "base_gp",
            MethodSpec::HandSpecifiedHgp => "hand_specified_hgp",
            MethodSpec::NonInformativeHgp => "non_informative_hgp",
            MethodSpec::GroundTruthHgp => "ground_truth_hgp",
            MethodSpec::GroundTruthGp => "ground_truth_gp",
            MethodSpec::Random => "random",
        }
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodSpec::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// How a method models the objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Surrogate {
    Random,
    /// Fixed GP parameters, never refit.
    Fixed(GpParams),
    /// MAP refit against fixed priors after every observation.
    Map(ParamPriors),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
    /// 0 for initial observations, `t` for the t-th proposal.
    pub iteration: usize,
    pub init: bool,
    /// Row of the table, for tabular oracles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub method: MethodSpec,
    pub seed: u64,
    pub observations: Vec<Observation>,
    /// Best observed value after initialization and after each proposal.
    pub incumbent: Vec<f64>,
    pub regret: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoSettings {
    pub acquisition: AcquisitionSpec,
    pub budget: usize,
    pub n_init: usize,
    pub nu: Smoothness,
}

impl Default for BoSettings {
    fn default() -> Self {
        BoSettings { acquisition: AcquisitionSpec::pi(), budget: 100, n_init: 5, nu: Smoothness::FiveHalves }
    }
}

fn uniform_point<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

/// `y_max − best-so-far` per iteration, divided by the oracle's regret scale.
pub fn normalized_simple_regret(trace: &BoTrace, oracle: &ObjectiveOracle) -> Result<Vec<f64>> {
    let y_max = oracle.y_max()?;
    let last = trace.observations.iter().map(|o| o.iteration).max().unwrap_or(0);
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::with_capacity(last + 1);
    let mut obs = trace.observations.iter().peekable();
    for t in 0..=last {
        while let Some(o) = obs.next_if(|o| o.iteration <= t) {
            best = best.max(o.y);
        }
        out.push(((y_max - best) / oracle.regret_scale).max(0.0));
    }
    Ok(out)
}

/// One BO run. Initial points depend only on `(seed, key)`, so every method
/// run with the same seed and key starts from the same observations.
pub fn run_bo(
    method: MethodSpec,
    surrogate: &Surrogate,
    settings: &BoSettings,
    oracle: &ObjectiveOracle,
    seed: u64,
    key: &str,
) -> Result<BoTrace> {
    settings.acquisition.validate()?;
    if settings.n_init == 0 {
        return Err(Error::Config("at least one initial observation is required".into()));
    }
    let d = oracle.dim();
    let mut init_rng = derive_rng_keyed(seed, "bo/init", key);
    let mut rng = derive_rng_keyed(seed, &format!("bo/{}", method.id()), key);
    let mut observations = Vec::new();
    let mut data = SubDataset::empty();
    let mut observed = Vec::new();

    let observe = |proposal: Proposal, iteration: usize, observations: &mut Vec<Observation>, data: &mut SubDataset, observed: &mut Vec<bool>| {
        let (x, y, candidate) = match (&oracle.kind, proposal) {
            (OracleKind::Tabular { inputs, outputs }, Proposal::Candidate(i)) => {
                observed[i] = true;
                (inputs[i].clone(), outputs[i], Some(i))
            }
            (OracleKind::Continuous { f, .. }, Proposal::Point(x)) => {
                let y = f(&x);
                (x, y, None)
            }
            _ => unreachable!("proposal kind follows oracle kind"),
        };
        data.push(x.clone(), y);
        observations.push(Observation { x, y, iteration, init: iteration == 0, candidate });
    };

    match &oracle.kind {
        OracleKind::Tabular { inputs, .. } => {
            let n = inputs.len();
            if n < settings.n_init + settings.budget {
                return Err(Error::Exhausted);
            }
            observed = vec![false; n];
            for i in rand::seq::index::sample(&mut init_rng, n, settings.n_init) {
                observe(Proposal::Candidate(i), 0, &mut observations, &mut data, &mut observed);
            }
        }
        OracleKind::Continuous { .. } => {
            for _ in 0..settings.n_init {
                observe(Proposal::Point(uniform_point(d, &mut init_rng)), 0, &mut observations, &mut data, &mut observed);
            }
        }
    }

    for t in 1..=settings.budget {
        let proposal = match surrogate {
            Surrogate::Random => match &oracle.kind {
                OracleKind::Tabular { .. } => {
                    let free: Vec<usize> = (0..observed.len()).filter(|&i| !observed[i]).collect();
                    Proposal::Candidate(free[rng.random_range(0..free.len())])
                }
                OracleKind::Continuous { .. } => Proposal::Point(uniform_point(d, &mut rng)),
            },
            Surrogate::Fixed(p) => propose_next(&settings.acquisition, p, settings.nu, &data, &observed, oracle, &mut rng)?,
            Surrogate::Map(priors) => {
                let p = map_refit(&data, priors, settings.nu, &mut rng)?;
                propose_next(&settings.acquisition, &p, settings.nu, &data, &observed, oracle, &mut rng)?
            }
        };
        observe(proposal, t, &mut observations, &mut data, &mut observed);
    }

    let mut incumbent = Vec::with_capacity(settings.budget + 1);
    let mut best = f64::NEG_INFINITY;
    let mut it = observations.iter().peekable();
    for t in 0..=settings.budget {
        while let Some(o) = it.next_if(|o| o.iteration <= t) {
            best = best.max(o.y);
        }
        incumbent.push(best);
    }
    let mut trace = BoTrace { method, seed, observations, incumbent, regret: Vec::new() };
    trace.regret = normalized_simple_regret(&trace, oracle)?;
    Ok(trace)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Pre-trained on every training dataset, including the test domain's training part.
    #[default]
    Default,
    /// The test domain was excluded from pre-training.
    Ntot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<MethodSpec>,
    pub settings: BoSettings,
    pub setting: Setting,
    pub seeds: Vec<u64>,
}

fn find_model<'a>(models: &'a [PretrainedModel], kind: PhiKind, setting: Setting, dataset_id: &str) -> Result<&'a PretrainedModel> {
    models
        .iter()
        .find(|m| {
            m.provenance.phi_kind == kind
                && match setting {
                    Setting::Default => m.provenance.excluded.is_empty(),
                    Setting::Ntot => m.provenance.excluded.iter().any(|e| e == dataset_id),
                }
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "no {kind:?} model for dataset `{dataset_id}` in the {setting:?} setting",
                kind = kind,
                setting = setting
            ))
        })
}

/// The surrogate `method` uses on `dataset`.
pub fn resolve_surrogate(method: MethodSpec, dataset: &Dataset, models: &[PretrainedModel], setting: Setting) -> Result<Surrogate> {
    let d = dataset.dim();
    let truth = || {
        dataset
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} needs ground truth, absent for `{}`", method.id(), dataset.id)))
    };
    Ok(match method {
        MethodSpec::Random => Surrogate::Random,
        MethodSpec::HandSpecifiedHgp => Surrogate::Map(ParamPriors::hand_specified(d)),
        MethodSpec::NonInformativeHgp => Surrogate::Map(ParamPriors::non_informative(d)),
        MethodSpec::MphdStandard => Surrogate::Map(find_model(models, PhiKind::Nn, setting, &dataset.id)?.priors_for(&dataset.domain)?),
        MethodSpec::MphdNonNn => {
            Surrogate::Map(find_model(models, PhiKind::Constant, setting, &dataset.id)?.priors_for(&dataset.domain)?)
        }
        MethodSpec::BaseGp => {
            if setting == Setting::Ntot {
                return Err(Error::Config("base_gp needs a fit on the test domain and cannot run in the ntot setting".into()));
            }
            let est = models
                .iter()
                .filter(|m| m.provenance.excluded.is_empty())
                .find_map(|m| m.estimate(&dataset.id))
                .ok_or_else(|| Error::Config(format!("no step-1 estimate for `{}` in any model", dataset.id)))?;
            Surrogate::Fixed(est.params.clone())
        }
        MethodSpec::GroundTruthGp => Surrogate::Fixed(truth()?.params.clone()),
        MethodSpec::GroundTruthHgp => {
            let p = truth()?.priors;
            ParamPriors::uniform_over_dims(
                d,
                PriorFamily::Normal(p.constant_mean),
                PriorFamily::Gamma(p.length_scale),
                PriorFamily::Gamma(p.signal_variance),
                PriorFamily::Gamma(p.noise_variance),
            )
            .into()
        }
    })
}

impl From<ParamPriors> for Surrogate {
    fn from(p: ParamPriors) -> Self {
        Surrogate::Map(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: String,
    pub subdataset_id: String,
    pub trace: BoTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: MethodSpec,
    /// Mean and sample standard deviation over runs, per iteration.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub runs: Vec<RunRecord>,
}

impl MethodCurve {
    pub fn final_mean(&self) -> f64 {
        *self.mean.last().expect("curves are never empty")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsProvenance {
    pub dataset_hash: String,
    pub model_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub curves: Vec<MethodCurve>,
    pub provenance: ResultsProvenance,
}

impl ExperimentResults {
    pub fn curve(&self, method: MethodSpec) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == method)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs every method on every test sub-dataset for every seed.
pub fn run_experiment(sd: &SuperDataset, models: &[PretrainedModel], cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.settings.acquisition.validate()?;
    if cfg.methods.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("at least one method and one seed are required".into()));
    }
    let tests: Vec<(&Dataset, usize)> =
        sd.datasets.iter().flat_map(|d| d.test_indices().into_iter().map(move |j| (d, j))).collect();
    if tests.is_empty() {
        return Err(Error::Config("the superdataset has no test sub-datasets".into()));
    }
    let raw_outputs = sd.normalization.is_none();
    let mut surrogates = Vec::new();
    for &m in &cfg.methods {
        let mut per_dataset = std::collections::BTreeMap::new();
        for (ds, _) in &tests {
            if !per_dataset.contains_key(&ds.id) {
                per_dataset.insert(ds.id.clone(), resolve_surrogate(m, ds, models, cfg.setting)?);
            }
        }
        surrogates.push(per_dataset);
    }
    let tasks: Vec<(usize, &Dataset, usize, u64)> = (0..cfg.methods.len())
        .flat_map(|mi| tests.iter().flat_map(move |&(ds, j)| cfg.seeds.iter().map(move |&s| (mi, ds, j, s))))
        .collect();
    let runs: Vec<(usize, RunRecord)> = tasks
        .par_iter()
        .map(|&(mi, ds, j, seed)| {
            let sub = &ds.subdatasets[j];
            let mut oracle = ObjectiveOracle::tabular(ds.domain.clone(), &sub.to_subdataset())?;
            if raw_outputs {
                oracle = oracle.with_range_scaling();
            }
            let key = format!("{}/{}", ds.id, sub.id);
            let trace = run_bo(cfg.methods[mi], &surrogates[mi][&ds.id], &cfg.settings, &oracle, seed, &key)
                .map_err(|e| e.in_dataset(&ds.id))?;
            Ok((mi, RunRecord { dataset_id: ds.id.clone(), subdataset_id: sub.id.clone(), trace }))
        })
        .collect::<Result<_>>()?;

    let mut curves = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let mine: Vec<RunRecord> = runs.iter().filter(|(k, _)| *k == mi).map(|(_, r)| r.clone()).collect();
        let len = cfg.settings.budget + 1;
        let (mean, std) = (0..len)
            .map(|t| mean_std(&mine.iter().map(|r| r.trace.regret[t]).collect::<Vec<_>>()))
            .unzip();
        curves.push(MethodCurve { method, mean, std, runs: mine });
    }
    let model_hashes = models.iter().map(|m| encode_model(m).map(|b| sha256_hex(&b))).collect::<Result<_>>()?;
    Ok(ExperimentResults {
        config: cfg.clone(),
        curves,
        provenance: ResultsProvenance { dataset_hash: sha256_hex(&encode_superdataset(sd)?), model_hashes },
    })
}

pub const RESULTS_FORMAT: &str = "mphd-results";
pub const RESULTS_VERSION: u32 = 1;

pub fn encode_results(r: &ExperimentResults) -> Result<Vec<u8>> {
    encode_versioned(RESULTS_FORMAT, RESULTS_VERSION, r)
}

pub fn decode_results(bytes: &[u8]) -> Result<ExperimentResults> {
    decode_versioned(bytes, RESULTS_FORMAT, RESULTS_VERSION)
}

/// Comma-separated `method,iteration,mean,std` rows.
pub fn curves_csv(r: &ExperimentResults) -> String {
    let mut out = String::from("method,iteration,mean,std\n");
    for c in &r.curves {
        for (t, (m, s)) in c.mean.iter().zip(&c.std).enumerate() {
            out.push_str(&format!("{},{t},{m},{s}\n", c.method.id()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::data::{SplitLabel, SubDatasetRecord};
    use crate::optim::lbfgs;
    use mphd_testkit as tk;
    use proptest::prelude::*;

    fn table(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> ObjectiveOracle {
        let d = xs[0].len();
        ObjectiveOracle::tabular(DomainDescriptor::continuous(d).unwrap(), &SubDataset::new(xs, ys).unwrap()).unwrap()
    }

    fn random_table(n: usize, d: usize, seed: u64) -> ObjectiveOracle {
        let mut r = tk::rng(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random::<f64>()).collect()).collect();
        let ys = xs.iter().map(|x| (6.0 * x[0]).sin() * 0.5 + 0.5 - 0.2 * x.iter().sum::<f64>()).collect();
        table(xs, ys)
    }

    #[test]
    fn acquisition_closed_form_limits() {
        let pi = AcquisitionSpec::pi();
        assert_eq!(acquisition_value(&pi, 0.6, 0.3, 0.5), 0.5);
        assert_eq!(acquisition_value(&pi, 0.7, 0.0, 0.5), 1.0);
        assert_eq!(acquisition_value(&pi, 0.55, 0.0, 0.5), 0.0);
        assert_eq!(acquisition_value(&pi, 0.6, 0.0, 0.5), 0.5);
        assert_eq!(acquisition_value(&AcquisitionSpec::ucb(), 0.42, 0.0, 9.0), 0.42);
        assert_eq!(acquisition_value(&AcquisitionSpec::Ei, 0.2, 0.0, 0.5), 0.0);
        assert_eq!(acquisition_value(&AcquisitionSpec::Ei, 0.7, 0.0, 0.5), 0.7 - 0.5);
        let lin = AcquisitionSpec::Ucb { beta: 3.0, linear_beta: true };
        assert!((acquisition_value(&lin, 0.0, 2.0, 0.0) - 6.0).abs() < 1e-15);
        assert!((acquisition_value(&AcquisitionSpec::ucb(), 0.0, 2.0, 0.0) - 2.0 * 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let (m, se) = tk::monte_carlo_normal(0.2, 0.3, 1_000_000, 11, |f| (f - 0.1f64).max(0.0));
        assert!((acquisition_value(&AcquisitionSpec::Ei, 0.2, 0.3, 0.1) - m).abs() <= 3.0 * se);
    }

    #[test]
    fn invalid_acquisitions_rejected() {
        assert!(AcquisitionSpec::Pi { zeta: -0.1 }.validate().is_err());
        assert!(AcquisitionSpec::Ucb { beta: 0.0, linear_beta: false }.validate().is_err());
    }

    #[test]
    fn regret_of_listed_values() {
        let oracle = table(vec![vec![0.0], vec![0.5], vec![1.0]], vec![0.2, 0.9, 0.5]);
        let obs = [0.2, 0.9, 0.5]
            .iter()
            .enumerate()
            .map(|(t, &y)| Observation { x: vec![0.0], y, iteration: t, init: t == 0, candidate: None })
            .collect();
        let trace = BoTrace { method: MethodSpec::Random, seed: 0, observations: obs, incumbent: vec![], regret: vec![] };
        let r = normalized_simple_regret(&trace, &oracle).unwrap();
        assert_eq!(r.len(), 3);
        assert!((r[0] - 0.7).abs() < 1e-15 && r[1] == 0.0 && r[2] == 0.0);
    }

    #[test]
    fn continuous_oracle_without_y_max_is_an_error() {
        let o = ObjectiveOracle::continuous(DomainDescriptor::continuous(1).unwrap(), |x| x[0], None);
        assert!(matches!(o.y_max(), Err(Error::Config(_))));
    }

    #[test]
    fn single_unobserved_candidate_is_returned() {
        let oracle = random_table(6, 2, 1);
        let OracleKind::Tabular { inputs, outputs } = &oracle.kind else { panic!() };
        let mut observed = vec![true; 6];
        observed[3] = false;
        let data = SubDataset::new(
            inputs.iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, x)| x.clone()).collect(),
            outputs.iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, y)| *y).collect(),
        )
        .unwrap();
        let p = GpParams::new(0.0, vec![0.3, 0.3], 1.0, 1e-3).unwrap();
        for acq in [AcquisitionSpec::pi(), AcquisitionSpec::Ei, AcquisitionSpec::ucb()] {
            let got = propose_next(&acq, &p, Smoothness::FiveHalves, &data, &observed, &oracle, &mut tk::rng(0)).unwrap();
            assert!(matches!(got, Proposal::Candidate(3)));
        }
        assert!(matches!(
            propose_next(&AcquisitionSpec::Ei, &p, Smoothness::FiveHalves, &data, &[true; 6], &oracle, &mut tk::rng(0)),
            Err(Error::Exhausted)
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax_unobserved(&[0.1, 0.5, 0.5, 0.2], &[false; 4]), Some(1));
        assert_eq!(argmax_unobserved(&[0.1, 0.5, 0.5, 0.2], &[false, true, false, false]), Some(2));
        assert_eq!(argmax_unobserved(&[0.1], &[true]), None);
    }

    #[test]
    fn proposals_match_brute_force_scan() {
        let p = GpParams::new(0.3, vec![0.25, 0.4], 0.8, 1e-3).unwrap();
        for seed in 0..6 {
            let oracle = random_table(80, 2, 100 + seed);
            let OracleKind::Tabular { inputs, outputs } = &oracle.kind else { panic!() };
            let mut observed = vec![false; 80];
            let mut data = SubDataset::empty();
            for i in [0usize, 7, 19, 33, 60] {
                observed[i] = true;
                data.push(inputs[i].clone(), outputs[i]);
            }
            let acq = [AcquisitionSpec::pi(), AcquisitionSpec::Ei, AcquisitionSpec::ucb()][seed as usize % 3];
            for _ in 0..10 {
                let k = tk::brute_force_gram(5, &data.inputs, &p.length_scales, p.signal_variance, p.noise_variance);
                let free: Vec<usize> = (0..80).filter(|&i| !observed[i]).collect();
                let cross: Vec<Vec<f64>> = free
                    .iter()
                    .map(|&i| {
                        data.inputs
                            .iter()
                            .map(|x| tk::matern_reference(5, tk::scaled_distance(&inputs[i], x, &p.length_scales), p.signal_variance))
                            .collect()
                    })
                    .collect();
                let (mu, var) = tk::explicit_posterior(&k, &cross, p.signal_variance, &data.outputs, p.constant_mean);
                let best = data.outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let scores: Vec<f64> =
                    mu.iter().zip(&var).map(|(m, v)| acquisition_value(&acq, *m, v.max(0.0).sqrt(), best)).collect();
                let expected = free[tk::brute_force_argmax(&scores).unwrap()];
                let Proposal::Candidate(got) =
                    propose_next(&acq, &p, Smoothness::FiveHalves, &data, &observed, &oracle, &mut tk::rng(0)).unwrap()
                else {
                    panic!()
                };
                assert_eq!(got, expected);
                observed[got] = true;
                data.push(inputs[got].clone(), outputs[got]);
            }
        }
    }

    proptest! {
        #[test]
        fn argmax_is_scale_invariant(scores in prop::collection::vec(-1e3f64..1e3, 1..40), c in 1e-3f64..1e3, mask in any::<u64>()) {
            let observed: Vec<bool> = (0..scores.len()).map(|i| (mask >> (i % 64)) & 1 == 1).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            prop_assert_eq!(argmax_unobserved(&scores, &observed), argmax_unobserved(&scaled, &observed));
        }
    }

    #[test]
    fn map_with_no_data_is_prior_mode() {
        let priors = ParamPriors::uniform_over_dims(
            3,
            PriorFamily::normal(0.4, 0.2).unwrap(),
            PriorFamily::gamma(3.0, 4.0).unwrap(),
            PriorFamily::gamma(2.0, 10.0).unwrap(),
            PriorFamily::gamma(0.5, 10.0).unwrap(),
        );
        let p = map_refit(&SubDataset::empty(), &priors, Smoothness::FiveHalves, &mut tk::rng(0)).unwrap();
        assert_eq!(p.constant_mean, 0.4);
        assert_eq!(p.length_scales, vec![0.5; 3]);
        assert_eq!(p.signal_variance, 0.1);
        assert_eq!(p.noise_variance, 1e-4);
    }

    fn gp_data(p: &GpParams, n: usize, seed: u64) -> SubDataset {
        let (x, y) = crate::synth::sample_subdataset(n, p, Smoothness::FiveHalves, 0, &mut tk::rng(seed)).unwrap();
        SubDataset::new(x, y).unwrap()
    }

    #[test]
    fn map_under_flat_priors_is_mle() {
        let truth = GpParams::new(0.5, vec![0.2], 0.5, 1e-2).unwrap();
        let priors = ParamPriors::uniform_over_dims(
            1,
            PriorFamily::uniform(-5.0, 5.0).unwrap(),
            PriorFamily::uniform(1e-5, 1.0).unwrap(),
            PriorFamily::uniform(1e-5, 2.0).unwrap(),
            PriorFamily::uniform(1e-6, 0.2).unwrap(),
        );
        for seed in 0..5 {
            let data = gp_data(&truth, 25, seed);
            let map = map_refit(&data, &priors, Smoothness::FiveHalves, &mut tk::rng(seed)).unwrap();
            let mle = lbfgs(
                |u: &[f64]| gp_nll_and_grad(std::slice::from_ref(&data), &GpParams::from_unconstrained(u), Smoothness::FiveHalves),
                &priors.modes().to_unconstrained(),
                &OptimConfig::lbfgs(REFIT_ITERATIONS),
            )
            .unwrap();
            let fitted = GpParams::from_unconstrained(&mle.x);
            // the claim only covers optima inside the prior support
            assert!(priors.log_density(&fitted).unwrap().is_finite(), "{fitted:?}");
            let nll = |p: &GpParams| crate::gp::gp_nll(std::slice::from_ref(&data), p, Smoothness::FiveHalves).unwrap();
            assert!(nll(&map) <= mle.value + 1e-6, "{} vs {}", nll(&map), mle.value);
        }
    }

    #[test]
    fn map_under_tight_priors_stays_in_central_half() {
        let truth = GpParams::new(0.3, vec![0.3, 0.6], 0.5, 1e-2).unwrap();
        // a Gamma with shape k·θ² and rate k·θ has mean θ and sd 1/√k
        let tight = |theta: f64| PriorFamily::gamma(4e6 * theta * theta, 4e6 * theta).unwrap();
        let priors = ParamPriors {
            constant_mean: PriorFamily::normal(0.3, 5e-4).unwrap(),
            length_scales: truth.length_scales.iter().map(|&l| tight(l)).collect(),
            signal_variance: tight(0.5),
            noise_variance: tight(1e-2),
        };
        // central 50% of each marginal: ±0.674 sd
        let half_width = [5e-4, 5e-4, 5e-4, 5e-4, 5e-4].map(|sd| 0.674 * sd);
        for seed in 0..20 {
            let data = gp_data(&truth, 20, 300 + seed);
            let p = map_refit(&data, &priors, Smoothness::FiveHalves, &mut tk::rng(seed)).unwrap();
            for ((got, want), w) in p.to_vec().iter().zip(truth.to_vec()).zip(half_width) {
                assert!((got - want).abs() <= w, "seed {seed}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_budget_keeps_only_initial_points() {
        let oracle = random_table(30, 2, 3);
        let s = BoSettings { budget: 0, ..Default::default() };
        let t = run_bo(MethodSpec::HandSpecifiedHgp, &ParamPriors::hand_specified(2).into(), &s, &oracle, 1, "k").unwrap();
        assert_eq!(t.observations.len(), 5);
        assert!(t.observations.iter().all(|o| o.init));
        assert_eq!(t.regret.len(), 1);
    }

    #[test]
    fn max_in_initial_points_gives_zero_regret() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let oracle = table(xs, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let s = BoSettings { budget: 1, ..Default::default() };
        // five of six rows are initial; retry keys until the maximum is among them
        let t = (0..50)
            .map(|k| run_bo(MethodSpec::Random, &Surrogate::Random, &s, &oracle, 0, &k.to_string()).unwrap())
            .find(|t| t.observations.iter().any(|o| o.init && o.y == 0.6))
            .unwrap();
        assert!(t.regret.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn random_runs_are_reproducible_and_share_init() {
        let oracle = random_table(40, 3, 4);
        let s = BoSettings { budget: 10, ..Default::default() };
        let a = run_bo(MethodSpec::Random, &Surrogate::Random, &s, &oracle, 9, "x").unwrap();
        assert_eq!(a, run_bo(MethodSpec::Random, &Surrogate::Random, &s, &oracle, 9, "x").unwrap());
        let b = run_bo(MethodSpec::NonInformativeHgp, &ParamPriors::non_informative(3).into(), &s, &oracle, 9, "x").unwrap();
        let init = |t: &BoTrace| t.observations.iter().filter(|o| o.init).map(|o| o.candidate).collect::<Vec<_>>();
        assert_eq!(init(&a), init(&b));
        for t in [&a, &b] {
            assert_eq!(t.observations.len(), 15);
            assert!(t.regret.windows(2).all(|w| w[1] <= w[0]));
            assert!(t.regret.iter().all(|r| (0.0..=1.0).contains(r)));
            let mut seen: Vec<_> = t.observations.iter().map(|o| o.candidate.unwrap()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 15);
        }
    }

    #[test]
    fn continuous_runs_use_random_search() {
        let o = ObjectiveOracle::continuous(DomainDescriptor::continuous(2).unwrap(), |x| -(x[0] - 0.3).powi(2) - (x[1] - 0.7).powi(2), Some(0.0));
        let s = BoSettings { budget: 8, acquisition: AcquisitionSpec::Ei, ..Default::default() };
        let t = run_bo(MethodSpec::HandSpecifiedHgp, &ParamPriors::hand_specified(2).into(), &s, &o, 2, "c").unwrap();
        assert_eq!(t.regret.len(), 9);
        assert!(t.regret.windows(2).all(|w| w[1] <= w[0]));
    }

    fn tiny_superdataset(with_truth: bool) -> SuperDataset {
        let mut r = tk::rng(5);
        let datasets = (0..2)
            .map(|i| {
                let subs = (0..2)
                    .map(|j| {
                        let xs: Vec<Vec<f64>> = (0..12).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
                        let ys = xs.iter().map(|x| x[0] * x[1]).collect();
                        SubDatasetRecord {
                            id: format!("s{j}"),
                            inputs: xs,
                            outputs: ys,
                            split: Some(if j == 0 { SplitLabel::Train } else { SplitLabel::Test }),
                        }
                    })
                    .collect();
                Dataset {
                    id: format!("d{i}"),
                    domain: DomainDescriptor::continuous(2).unwrap(),
                    subdatasets: subs,
                    ground_truth: with_truth.then(|| crate::data::GroundTruth {
                        params: GpParams::new(0.0, vec![0.3, 0.3], 1.0, 1e-3).unwrap(),
                        priors: crate::synth::ground_truth_priors(crate::synth::SynthProfile::L, 2).unwrap(),
                        nu: Smoothness::FiveHalves,
                    }),
                    split: None,
                }
            })
            .collect();
        SuperDataset { normalized: true, datasets, normalization: None }
    }

    fn cfg(methods: Vec<MethodSpec>, setting: Setting) -> ExperimentConfig {
        ExperimentConfig { methods, settings: BoSettings { budget: 3, ..Default::default() }, setting, seeds: vec![1] }
    }

    #[test]
    fn random_curve_is_average_of_runs() {
        let sd = tiny_superdataset(false);
        let r = run_experiment(&sd, &[], &cfg(vec![MethodSpec::Random], Setting::Default)).unwrap();
        let c = r.curve(MethodSpec::Random).unwrap();
        assert_eq!(c.runs.len(), 2);
        for t in 0..4 {
            assert!((c.mean[t] - 0.5 * (c.runs[0].trace.regret[t] + c.runs[1].trace.regret[t])).abs() < 1e-15);
        }
        assert_eq!(decode_results(&encode_results(&r).unwrap()).unwrap(), r);
        assert_eq!(curves_csv(&r).lines().count(), 5);
    }

    #[test]
    fn configuration_errors() {
        let sd = tiny_superdataset(false);
        for (m, s) in [
            (MethodSpec::GroundTruthHgp, Setting::Default),
            (MethodSpec::GroundTruthGp, Setting::Default),
            (MethodSpec::MphdStandard, Setting::Default),
            (MethodSpec::BaseGp, Setting::Ntot),
            (MethodSpec::MphdNonNn, Setting::Ntot),
        ] {
            assert!(matches!(run_experiment(&sd, &[], &cfg(vec![m], s)), Err(Error::Config(_))), "{m:?}");
        }
        let with_truth = tiny_superdataset(true);
        assert!(run_experiment(&with_truth, &[], &cfg(vec![MethodSpec::GroundTruthHgp, MethodSpec::GroundTruthGp], Setting::Default)).is_ok());
    }

    #[test]
    fn method_ids_round_trip() {
        for m in MethodSpec::ALL {
            assert_eq!(m.id().parse::<MethodSpec>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.id()));
        }
        assert!("nope".parse::<MethodSpec>().is_err());
    }
}
