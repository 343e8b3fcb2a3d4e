//! The `ctxsep` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{log_mel, MelConfig};
use crate::metrics::evaluate_manifest;
use crate::model::ModelConfig;
use crate::signal::{synth_toy_corpus, Manifest, ManifestEntry};
use crate::teacher::{
    mock_teacher, read_ctxf, write_ctxf, TeacherFeatures, TeacherKind, DEFAULT_MOCK_DIM,
};
use crate::trainer::{train, RunConfig, Stage, Transfer};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "CTXSEP_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "ctxsep",
    version,
    about = "Context-aware two-stage training for speech separation"
)]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a seeded toy two-speaker corpus with a JSONL manifest.
    Simulate {
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 1.0)]
        dur: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write (or check) per-source teacher feature files and record them in the manifest.
    PrepareTeachers {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of mel, phoneme, word.
        #[arg(long, value_delimiter = ',', default_value = "mel,phoneme,word")]
        kinds: Vec<TeacherKind>,
        /// Compute targets with the mock teacher instead of expecting extractor output.
        #[arg(long)]
        mock: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dimension of mock phoneme/word features.
        #[arg(long, default_value_t = DEFAULT_MOCK_DIM)]
        dim: usize,
    },
    /// Train one stage from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.stage`.
        #[arg(long)]
        stage: Option<Stage>,
        /// Overrides `train.transfer` (context | context+encoder).
        #[arg(long)]
        transfer: Option<Transfer>,
    },
    /// Evaluate a checkpoint on a manifest (SI-SDRi / SDRi).
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration holding the model section; defaults to the
        /// `<stage>_config.json` written beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gradient checks and oracle comparisons; exits 0 iff all pass.
    Selfcheck {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Reads a run configuration, rejecting unknown keys and applying the seed override.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.train.seed = seed.parse().map_err(|_| {
            Error::Config(format!(
                "{SEED_ENV} must be an unsigned integer, got {seed:?}"
            ))
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn teacher_path(entry: &ManifestEntry, kind: TeacherKind, index: usize) -> String {
    format!(
        "teachers/{}_{}.ctxf",
        entry.id,
        ManifestEntry::teacher_key(kind.as_str(), index)
    )
}

pub fn prepare_teachers(
    manifest_path: &Path,
    kinds: &[TeacherKind],
    mock: bool,
    seed: u64,
    dim: usize,
) -> Result<PathBuf> {
    if !manifest_path.exists() {
        return Err(Error::MissingFiles(vec![manifest_path.to_path_buf()]));
    }
    let mut manifest = Manifest::read(manifest_path)?;
    let mut missing = Vec::new();
    let mut updated = manifest.entries.clone();
    for entry in updated.iter_mut() {
        for (j, src) in entry.sources.iter().enumerate() {
            for &kind in kinds {
                let key = ManifestEntry::teacher_key(kind.as_str(), j);
                let rel = entry
                    .teachers
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| teacher_path(entry, kind, j));
                let path = manifest.resolve(&rel);
                if mock {
                    let src_path = manifest.resolve(src);
                    if !src_path.exists() {
                        missing.push(src_path);
                        continue;
                    }
                    let wav = crate::signal::load_wav(&src_path)?;
                    let mel = log_mel(&wav, &MelConfig::default())?;
                    let tf = match kind {
                        TeacherKind::Mel => TeacherFeatures {
                            utterance_id: entry.id.clone(),
                            kind,
                            features: mel,
                        },
                        _ => mock_teacher(&entry.id, &mel, kind, dim, seed)?,
                    };
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    write_ctxf(&tf, &path)?;
                } else if !path.exists() {
                    missing.push(path);
                    continue;
                } else {
                    read_ctxf(&path)?;
                }
                entry.teachers.insert(key, rel);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    manifest.entries = updated;
    manifest.write(manifest_path)?;
    Ok(manifest_path.to_path_buf())
}

/// Runs one command; `Ok(false)` means it ran but its checks failed.
fn run_command(cli: Cli) -> Result<bool> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::Simulate {
            num,
            dur,
            seed,
            out,
        } => {
            if num == 0 {
                return Err(Error::InvalidArgument("--num must be at least 1".into()));
            }
            let path = synth_toy_corpus(num, dur, seed, &out, exec)?;
            println!("{}", path.display());
        }
        Command::PrepareTeachers {
            manifest,
            kinds,
            mock,
            seed,
            dim,
        } => {
            if dim == 0 {
                return Err(Error::InvalidArgument("--dim must be positive".into()));
            }
            let path = prepare_teachers(&manifest, &kinds, mock, seed, dim)?;
            println!("{}", path.display());
        }
        Command::Train {
            config,
            stage,
            transfer,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = stage {
                cfg.train.stage = s;
            }
            if let Some(t) = transfer {
                cfg.train.transfer = t;
            }
            let out = &cfg.data.out_dir;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let resolved = out.join("resolved_config.json");
            std::fs::write(&resolved, serde_json::to_string_pretty(&cfg)?)
                .map_err(|e| Error::io(&resolved, e))?;
            let outcome = train(&cfg, exec)?;
            println!(
                "{} (epoch {}, dev loss {:.4})",
                outcome.checkpoint.display(),
                outcome.best_epoch,
                outcome.best_dev_loss
            );
        }
        Command::Evaluate {
            manifest,
            ckpt,
            out,
            config,
        } => {
            let model = match config {
                Some(p) => load_config(&p)?.model,
                None => sidecar_model(&ckpt)?,
            };
            let report = evaluate_manifest(&manifest, &ckpt, &model, exec)?;
            report.write(&out)?;
            match &report.aggregate {
                Some(a) => println!(
                    "si_sdri_mean {:.3} sdri_mean {:.3} n {}",
                    a.si_sdri_mean, a.sdri_mean, a.n
                ),
                None => eprintln!("warning: manifest has no utterances; no aggregate written"),
            }
        }
        Command::Selfcheck { corrupt_gradient } => {
            let report = crate::selfcheck::run(corrupt_gradient.then_some(1.01), exec)?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            println!(
                "max rel grad error {:.2e} (tolerance {:.0e}), {:.1} s",
                report.max_grad_error,
                crate::selfcheck::GRAD_TOLERANCE,
                report.seconds
            );
            return Ok(report.passed());
        }
    }
    Ok(true)
}

/// Model section from `<stage>_config.json` beside a checkpoint, else the defaults.
fn sidecar_model(ckpt: &Path) -> Result<ModelConfig> {
    let stem = ckpt
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let path = ckpt.with_file_name(format!("{stem}_config.json"));
    if path.exists() {
        Ok(load_config(&path)?.model)
    } else {
        Ok(ModelConfig::default())
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run_command(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
