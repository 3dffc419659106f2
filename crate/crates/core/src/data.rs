//! Super-dataset / dataset / sub-dataset containers, split labels, and the
//! ground-truth block carried by synthetic data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::context::DomainDescriptor;
use crate::error::{Error, Result};
use crate::gp::{GpParams, Smoothness, SubDataset};
use crate::priors::{GammaPrior, NormalPrior};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Test,
}

/// Priors a synthetic dataset's GP parameters were drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPriors {
    pub constant_mean: NormalPrior,
    /// Shared by every dimension of the domain.
    pub length_scale: GammaPrior,
    pub signal_variance: GammaPrior,
    pub noise_variance: GammaPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: GpParams,
    pub priors: GroundTruthPriors,
    pub nu: Smoothness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubDatasetRecord {
    pub id: String,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
}

impl SubDatasetRecord {
    pub fn to_subdataset(&self) -> SubDataset {
        SubDataset { inputs: self.inputs.clone(), outputs: self.outputs.clone() }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub domain: DomainDescriptor,
    pub subdatasets: Vec<SubDatasetRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn is_test(&self) -> bool {
        self.split == Some(SplitLabel::Test)
    }

    /// Sub-datasets usable for pre-training: none if the whole dataset is a
    /// test dataset, otherwise every sub-dataset not labelled test.
    pub fn training_subdatasets(&self) -> Vec<SubDataset> {
        if self.is_test() {
            return Vec::new();
        }
        self.subdatasets
            .iter()
            .filter(|s| s.split != Some(SplitLabel::Test))
            .map(SubDatasetRecord::to_subdataset)
            .collect()
    }

    /// Indices of sub-datasets that serve as BO test functions.
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.subdatasets.len())
            .filter(|&j| self.is_test() || self.subdatasets[j].split == Some(SplitLabel::Test))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperDataset {
    /// Inputs lie in `[0, 1]^d`.
    pub normalized: bool,
    pub datasets: Vec<Dataset>,
    /// Per-dataset ranges recorded by normalization, for inversion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Vec<crate::io::NormalizationRecord>>,
}

impl SuperDataset {
    pub fn dataset(&self, id: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.id == id)
    }

    /// Structural checks, reporting the offending path.
    pub fn validate(&self) -> Result<()> {
        let schema = |path: String, message: String| Error::Schema { path, message };
        let mut ids = std::collections::HashSet::new();
        for (i, ds) in self.datasets.iter().enumerate() {
            let here = format!("datasets[{i}]");
            if !ids.insert(ds.id.as_str()) {
                return Err(schema(format!("{here}.id"), format!("duplicate dataset id `{}`", ds.id)));
            }
            ds.domain.validate().map_err(|e| schema(format!("{here}.domain"), e.to_string()))?;
            let d = ds.dim();
            if let Some(gt) = &ds.ground_truth {
                gt.params.validate().map_err(|e| schema(format!("{here}.ground_truth.params"), e.to_string()))?;
                if gt.params.dim() != d {
                    return Err(schema(
                        format!("{here}.ground_truth.params.length_scales"),
                        format!("{} length-scales for a {d}-dimensional domain", gt.params.dim()),
                    ));
                }
            }
            let mut sub_ids = std::collections::HashSet::new();
            for (j, sd) in ds.subdatasets.iter().enumerate() {
                let here = format!("{here}.subdatasets[{j}]");
                if !sub_ids.insert(sd.id.as_str()) {
                    return Err(schema(format!("{here}.id"), format!("duplicate sub-dataset id `{}`", sd.id)));
                }
                if sd.inputs.len() != sd.outputs.len() {
                    return Err(schema(
                        format!("{here}.outputs"),
                        format!("{} outputs for {} input rows", sd.outputs.len(), sd.inputs.len()),
                    ));
                }
                for (k, row) in sd.inputs.iter().enumerate() {
                    if row.len() != d {
                        return Err(schema(format!("{here}.inputs[{k}]"), format!("row has {} entries, domain has {d}", row.len())));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(schema(format!("{here}.inputs[{k}]"), "non-finite value".into()));
                    }
                    if self.normalized && row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(schema(format!("{here}.inputs[{k}]"), "value outside [0, 1] in a normalized file".into()));
                    }
                }
                if let Some(k) = sd.outputs.iter().position(|v| !v.is_finite()) {
                    return Err(schema(format!("{here}.outputs[{k}]"), "non-finite value".into()));
                }
            }
        }
        Ok(())
    }

    pub fn without_dataset(&self, id: &str) -> SuperDataset {
        SuperDataset { datasets: self.datasets.iter().filter(|d| d.id != id).cloned().collect(), ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Split the sub-datasets of every dataset.
    PerDatasetSubsplit,
    /// Split whole datasets.
    PerSuperSplit,
}

/// `(train, test)` counts for `n` units, with train = round(n·fraction).
fn split_counts(n: usize, fraction: f64) -> Result<(usize, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let train = (n as f64 * fraction).round() as usize;
    if train == 0 || train >= n {
        return Err(Error::Config(format!("splitting {n} units at fraction {fraction} leaves one side empty")));
    }
    Ok((train, n - train))
}

fn shuffled(n: usize, seed: u64, purpose: &str, index: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(seed, purpose, index));
    idx
}

/// Writes train/test labels in place. Any previous labels are cleared.
pub fn label_split(sd: &mut SuperDataset, mode: SplitMode, fraction: f64, seed: u64) -> Result<()> {
    match mode {
        SplitMode::PerSuperSplit => {
            let (train, _) = split_counts(sd.datasets.len(), fraction)?;
            let order = shuffled(sd.datasets.len(), seed, "split/datasets", 0);
            for (rank, &i) in order.iter().enumerate() {
                let ds = &mut sd.datasets[i];
                ds.split = Some(if rank < train { SplitLabel::Train } else { SplitLabel::Test });
                ds.subdatasets.iter_mut().for_each(|s| s.split = None);
            }
        }
        SplitMode::PerDatasetSubsplit => {
            for (i, ds) in sd.datasets.iter_mut().enumerate() {
                let (train, _) =
                    split_counts(ds.subdatasets.len(), fraction).map_err(|e| e.in_dataset(&ds.id))?;
                ds.split = None;
                let order = shuffled(ds.subdatasets.len(), seed, "split/subdatasets", i as u64);
                for (rank, &j) in order.iter().enumerate() {
                    ds.subdatasets[j].split = Some(if rank < train { SplitLabel::Train } else { SplitLabel::Test });
                }
            }
        }
    }
    Ok(())
}

/// Labels a copy and partitions it into a training and a test super-dataset.
pub fn split_superdataset(sd: &SuperDataset, mode: SplitMode, fraction: f64, seed: u64) -> Result<(SuperDataset, SuperDataset)> {
    let mut labelled = sd.clone();
    label_split(&mut labelled, mode, fraction, seed)?;
    let mut train = SuperDataset { datasets: Vec::new(), ..labelled.clone() };
    let mut test = SuperDataset { datasets: Vec::new(), ..labelled.clone() };
    for ds in labelled.datasets {
        match mode {
            SplitMode::PerSuperSplit => {
                if ds.split == Some(SplitLabel::Test) {
                    test.datasets.push(ds);
                } else {
                    train.datasets.push(ds);
                }
            }
            SplitMode::PerDatasetSubsplit => {
                let (te, tr): (Vec<_>, Vec<_>) =
                    ds.subdatasets.iter().cloned().partition(|s| s.split == Some(SplitLabel::Test));
                train.datasets.push(Dataset { subdatasets: tr, ..ds.clone() });
                test.datasets.push(Dataset { subdatasets: te, ..ds });
            }
        }
    }
    Ok((train, test))
}
