//! Pre-trained hierarchical Gaussian-process priors for Bayesian optimization
//! across search spaces of different dimensionality.
//!
//! The pipeline is: generate or load a [`SuperDataset`], [`pretrain`] a
//! [`PretrainedModel`] from it, then run BO experiments with
//! [`run_experiment`], which refits each test function's GP against the priors
//! the model assigns to its domain.

pub mod bo;
pub mod consistency;
pub mod context;
pub mod data;
pub mod error;
pub mod gp;
pub mod io;
pub mod optim;
pub mod pretrain;
pub mod priors;
pub mod seed;
pub mod special;
pub mod synth;

pub use bo::{
    run_bo, run_experiment, AcquisitionSpec, BoSettings, BoTrace, ExperimentConfig, ExperimentResults, MethodSpec,
    ObjectiveOracle, ParamPriors, Setting,
};
pub use consistency::{consistency_experiment, ConsistencyReport, ConsistencySpec};
pub use context::{DimKind, DomainDescriptor, LengthScalePrior, NnPhi, PhiModel, SharedPriors};
pub use data::{Dataset, SplitLabel, SplitMode, SuperDataset};
pub use error::{Error, Result};
pub use gp::{GpParams, PosteriorSummary, Smoothness, SubDataset};
pub use pretrain::{pretrain, PhiKind, PretrainConfig, PretrainedModel};
pub use priors::{GammaPrior, NormalPrior, PriorFamily, UniformPrior};
pub use synth::{generate_superdataset, SynthConfig, SynthProfile, SynthScale};
