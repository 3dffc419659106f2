//! File formats. Every file is a JSON object carrying a `format` tag and an
//! integer `version` next to its payload fields; readers check both before
//! decoding the rest, so a wrong or future version is reported as such rather
//! than as a schema error. Keys are written in sorted order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SuperDataset;
use crate::error::{Error, Result};

/// Encodes `body` with a leading format tag and version.
pub(crate) fn encode_versioned<T: Serialize>(format: &str, version: u32, body: &T) -> Result<Vec<u8>> {
    let mut obj = serde_json::Map::new();
    obj.insert("format".into(), Value::from(format));
    obj.insert("version".into(), Value::from(version));
    match serde_json::to_value(body).map_err(|e| Error::Malformed(e.to_string()))? {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("body".into(), other);
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(obj)).map_err(|e| Error::Malformed(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Decodes a file written by [`encode_versioned`].
pub(crate) fn decode_versioned<T: DeserializeOwned>(bytes: &[u8], format: &str, version: u32) -> Result<T> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(Error::Malformed("top level is not an object".into()));
    };
    match obj.remove("format") {
        Some(Value::String(f)) if f == format => {}
        Some(Value::String(f)) => {
            return Err(Error::Schema { path: "format".into(), message: format!("expected `{format}`, found `{f}`") })
        }
        _ => return Err(Error::Schema { path: "format".into(), message: "missing format tag".into() }),
    }
    let found = obj
        .remove("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema { path: "version".into(), message: "missing or non-integer version".into() })?;
    if found != version as u64 {
        return Err(Error::Version { found: found.min(u32::MAX as u64) as u32, expected: version });
    }
    let body = match obj.remove("body") {
        Some(b) if obj.is_empty() => b,
        Some(b) => {
            obj.insert("body".into(), b);
            Value::Object(obj)
        }
        None => Value::Object(obj),
    };
    serde_path_to_error::deserialize(body).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// The `format` tag of a file, without decoding the rest.
pub fn peek_format(bytes: &[u8]) -> Result<String> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    value
        .get("format")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Schema { path: "format".into(), message: "missing format tag".into() })
}

pub const SUPERDATASET_FORMAT: &str = "mphd-superdataset";
pub const SUPERDATASET_VERSION: u32 = 1;

pub fn encode_superdataset(sd: &SuperDataset) -> Result<Vec<u8>> {
    sd.validate()?;
    encode_versioned(SUPERDATASET_FORMAT, SUPERDATASET_VERSION, sd)
}

pub fn decode_superdataset(bytes: &[u8]) -> Result<SuperDataset> {
    let sd: SuperDataset = decode_versioned(bytes, SUPERDATASET_FORMAT, SUPERDATASET_VERSION)?;
    sd.validate()?;
    Ok(sd)
}

pub fn write_superdataset(path: &Path, sd: &SuperDataset) -> Result<()> {
    write_atomic(path, &encode_superdataset(sd)?)
}

pub fn read_superdataset(path: &Path) -> Result<SuperDataset> {
    decode_superdataset(&fs::read(path)?)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputScaling {
    #[default]
    PerDataset,
    PerSubdataset,
}

/// Affine maps applied to one dataset, kept so values can be mapped back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub dataset_id: String,
    pub input_ranges: Vec<(f64, f64)>,
    pub output_scaling: OutputScaling,
    /// One range per dataset, or one per sub-dataset.
    pub output_ranges: Vec<(f64, f64)>,
    /// Dimensions whose range was zero; their values map to 0.5.
    pub degenerate_inputs: Vec<usize>,
    /// Output groups whose range was zero.
    pub degenerate_outputs: Vec<usize>,
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn from_unit(u: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        lo + u * (hi - lo)
    } else {
        lo
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Min-max scales every input dimension (dataset-wide) and the outputs
/// (per dataset or per sub-dataset) to `[0, 1]`.
pub fn normalize_superdataset(raw: &SuperDataset, scaling: OutputScaling) -> Result<SuperDataset> {
    raw.validate()?;
    let mut out = raw.clone();
    let mut records = Vec::with_capacity(raw.datasets.len());
    for ds in &mut out.datasets {
        let d = ds.dim();
        let input_ranges: Vec<(f64, f64)> =
            (0..d).map(|j| range_of(ds.subdatasets.iter().flat_map(|s| s.inputs.iter().map(move |x| x[j])))).collect();
        let output_ranges: Vec<(f64, f64)> = match scaling {
            OutputScaling::PerDataset => vec![range_of(ds.subdatasets.iter().flat_map(|s| s.outputs.iter().copied()))],
            OutputScaling::PerSubdataset => ds.subdatasets.iter().map(|s| range_of(s.outputs.iter().copied())).collect(),
        };
        for (k, sub) in ds.subdatasets.iter_mut().enumerate() {
            for row in &mut sub.inputs {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = to_unit(*v, input_ranges[j]);
                }
            }
            let r = output_ranges[if scaling == OutputScaling::PerDataset { 0 } else { k }];
            sub.outputs.iter_mut().for_each(|y| *y = to_unit(*y, r));
        }
        for (spec, r) in ds.domain.dims.iter_mut().zip(&input_ranges) {
            if r.0 <= r.1 {
                spec.bounds = Some(*r);
            }
        }
        let degenerate = |rs: &[(f64, f64)]| rs.iter().enumerate().filter(|(_, r)| r.1 <= r.0).map(|(i, _)| i).collect();
        records.push(NormalizationRecord {
            dataset_id: ds.id.clone(),
            degenerate_inputs: degenerate(&input_ranges),
            degenerate_outputs: degenerate(&output_ranges),
            input_ranges,
            output_scaling: scaling,
            output_ranges,
        });
    }
    out.normalized = true;
    out.normalization = Some(records);
    Ok(out)
}

/// Maps a normalized super-dataset back to raw units.
pub fn denormalize_superdataset(sd: &SuperDataset) -> Result<SuperDataset> {
    let records = sd
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Config("super-dataset carries no normalization metadata".into()))?;
    let mut out = sd.clone();
    for ds in &mut out.datasets {
        let rec = records
            .iter()
            .find(|r| r.dataset_id == ds.id)
            .ok_or_else(|| Error::Config(format!("no normalization record for dataset `{}`", ds.id)))?;
        for (k, sub) in ds.subdatasets.iter_mut().enumerate() {
            for row in &mut sub.inputs {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = from_unit(*v, rec.input_ranges[j]);
                }
            }
            let r = rec.output_ranges[if rec.output_scaling == OutputScaling::PerDataset { 0 } else { k }];
            sub.outputs.iter_mut().for_each(|y| *y = from_unit(*y, r));
        }
    }
    out.normalized = false;
    out.normalization = None;
    Ok(out)
}
