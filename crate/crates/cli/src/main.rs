//! `mphd`: generate super-datasets, pre-train priors, run BO experiments and
//! consistency studies, and inspect the resulting files.
//!
//! Failures print a single JSON error record on stderr. Exit status is 0 on
//! success, 1 for user errors (bad flags, bad files, bad configuration) and 2
//! for numerical or internal failures. `MPHD_THREADS` caps the worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mphd::bo::{curves_csv, decode_results, encode_results};
use mphd::consistency::{decode_report, encode_report};
use mphd::data::label_split;
use mphd::io::{peek_format, read_superdataset, write_atomic, write_superdataset};
use mphd::pretrain::{decode_model, encode_model};
use mphd::{
    AcquisitionSpec, BoSettings, ConsistencySpec, Error, ExperimentConfig, MethodSpec, PhiKind, PretrainConfig,
    Setting, Smoothness, SplitMode, SynthConfig, SynthProfile, SynthScale,
};

#[derive(Parser)]
#[command(name = "mphd", version, about = "Pre-trained hierarchical GP priors for Bayesian optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    S,
    L,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Full,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    None,
    PerDataset,
    PerSuper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phi {
    Nn,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum Acq {
    Pi,
    Ei,
    Ucb,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Default,
    Ntot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Nu {
    Matern32,
    Matern52,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic super-dataset.
    SynthGen {
        #[arg(long, value_enum)]
        profile: Profile,
        #[arg(long, value_enum, default_value = "full")]
        scale: Scale,
        /// JSON generator config; replaces the profile preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        split: Split,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a model on the training part of a super-dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "nn")]
        phi: Phi,
        /// Dataset id to leave out; repeatable.
        #[arg(long = "ntot-exclude")]
        ntot_exclude: Vec<String>,
        /// Use the reduced iteration budget.
        #[arg(long)]
        desk: bool,
        /// JSON pretrain config; replaces the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        nu: Option<Nu>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run BO on every test sub-dataset.
    BoRun {
        #[arg(long)]
        data: PathBuf,
        /// Model file; repeatable.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Comma-separated method ids.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long, value_enum, default_value = "pi")]
        acquisition: Acq,
        #[arg(long, value_enum, default_value = "default")]
        setting: SettingArg,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 5)]
        n_init: usize,
        #[arg(long, value_enum, default_value = "matern52")]
        nu: Nu,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a consistency study from a JSON spec.
    Consistency {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write plot-ready rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a JSON summary of any file this tool writes.
    Inspect { path: PathBuf },
    /// Write a results file's curves as comma-separated rows.
    ExportCurves {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> mphd::Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> mphd::Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::Schema {
        path: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

fn nu_of(n: Nu) -> Smoothness {
    match n {
        Nu::Matern32 => Smoothness::ThreeHalves,
        Nu::Matern52 => Smoothness::FiveHalves,
    }
}

fn run(cmd: Command) -> mphd::Result<()> {
    match cmd {
        Command::SynthGen { profile, scale, config, split, train_fraction, seed, out } => {
            let cfg = match config {
                Some(p) => read_json::<SynthConfig>(&p)?,
                None => SynthConfig::preset(
                    match profile {
                        Profile::S => SynthProfile::S,
                        Profile::L => SynthProfile::L,
                    },
                    match scale {
                        Scale::Full => SynthScale::Full,
                        Scale::Desk => SynthScale::Desk,
                    },
                )?,
            };
            let mut sd = mphd::generate_superdataset(&cfg, seed)?;
            let mode = match split {
                Split::None => None,
                Split::PerDataset => Some(SplitMode::PerDatasetSubsplit),
                Split::PerSuper => Some(SplitMode::PerSuperSplit),
            };
            if let Some(mode) = mode {
                label_split(&mut sd, mode, train_fraction, seed)?;
            }
            write_superdataset(&out, &sd)
        }
        Command::Pretrain { data, phi, ntot_exclude, desk, config, nu, seed, out } => {
            let sd = read_superdataset(&data)?;
            let mut cfg = match (config, desk) {
                (Some(p), _) => read_json::<PretrainConfig>(&p)?,
                (None, true) => PretrainConfig::desk(),
                (None, false) => PretrainConfig::default(),
            };
            if let Some(n) = nu {
                cfg.nu = nu_of(n);
            }
            cfg.exclude_dataset_ids.extend(ntot_exclude);
            let kind = match phi {
                Phi::Nn => PhiKind::Nn,
                Phi::Constant => PhiKind::Constant,
            };
            let model = mphd::pretrain(&sd, kind, &cfg, seed)?;
            write_atomic(&out, &encode_model(&model)?)
        }
        Command::BoRun { data, models, methods, acquisition, setting, seeds, budget, n_init, nu, out } => {
            let sd = read_superdataset(&data)?;
            let models = models.iter().map(|p| read(p).and_then(|b| decode_model(&b))).collect::<mphd::Result<Vec<_>>>()?;
            let methods = methods.iter().map(|m| m.parse::<MethodSpec>()).collect::<mphd::Result<Vec<_>>>()?;
            let cfg = ExperimentConfig {
                methods,
                settings: BoSettings {
                    acquisition: match acquisition {
                        Acq::Pi => AcquisitionSpec::pi(),
                        Acq::Ei => AcquisitionSpec::Ei,
                        Acq::Ucb => AcquisitionSpec::ucb(),
                    },
                    budget,
                    n_init,
                    nu: nu_of(nu),
                },
                setting: match setting {
                    SettingArg::Default => Setting::Default,
                    SettingArg::Ntot => Setting::Ntot,
                },
                seeds,
            };
            let results = mphd::run_experiment(&sd, &models, &cfg)?;
            write_atomic(&out, &encode_results(&results)?)
        }
        Command::Consistency { spec, seed, out, csv } => {
            let spec: ConsistencySpec = read_json(&spec)?;
            let report = mphd::consistency_experiment(&spec, seed)?;
            write_atomic(&out, &encode_report(&report)?)?;
            match csv {
                Some(p) => write_atomic(&p, report.to_csv().as_bytes()),
                None => Ok(()),
            }
        }
        Command::Inspect { path } => {
            let bytes = read(&path)?;
            let summary = inspect(&bytes)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("JSON values serialize"));
            Ok(())
        }
        Command::ExportCurves { results, out } => {
            let csv = curves_csv(&decode_results(&read(&results)?)?);
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn inspect(bytes: &[u8]) -> mphd::Result<serde_json::Value> {
    let format = peek_format(bytes)?;
    Ok(match format.as_str() {
        mphd::io::SUPERDATASET_FORMAT => {
            let sd = mphd::io::decode_superdataset(bytes)?;
            json!({
                "format": format,
                "normalized": sd.normalized,
                "datasets": sd.datasets.iter().map(|d| json!({
                    "id": d.id,
                    "dim": d.dim(),
                    "subdatasets": d.subdatasets.len(),
                    "test_subdatasets": d.test_indices().len(),
                    "ground_truth": d.ground_truth.is_some(),
                })).collect::<Vec<_>>(),
            })
        }
        mphd::pretrain::MODEL_FORMAT => {
            let m = decode_model(bytes)?;
            json!({
                "format": format,
                "phi_kind": m.provenance.phi_kind,
                "nu": m.config.nu,
                "shared_priors": m.phi.shared,
                "provenance": m.provenance,
            })
        }
        mphd::bo::RESULTS_FORMAT => {
            let r = decode_results(bytes)?;
            json!({
                "format": format,
                "setting": r.config.setting,
                "acquisition": r.config.settings.acquisition,
                "budget": r.config.settings.budget,
                "seeds": r.config.seeds,
                "final_regret": r.curves.iter().map(|c| json!({
                    "method": c.method,
                    "runs": c.runs.len(),
                    "mean": c.final_mean(),
                    "std": c.std.last(),
                })).collect::<Vec<_>>(),
                "provenance": r.provenance,
            })
        }
        mphd::consistency::REPORT_FORMAT => {
            let r = decode_report(bytes)?;
            json!({ "format": format, "rows": r.to_csv().lines().skip(1).collect::<Vec<_>>() })
        }
        other => return Err(Error::Schema { path: "format".into(), message: format!("unknown format `{other}`") }),
    })
}

fn error_record(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message, "exit_code": code } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return error_record("usage", e.to_string().trim(), 1),
    };
    if let Some(n) = std::env::var("MPHD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => error_record(e.kind(), &e.to_string(), if e.is_user_error() { 1 } else { 2 }),
    }
}
