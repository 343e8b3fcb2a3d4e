//! Desk-scale reproductions: single-mixture overfitting and the two-stage pipeline on a toy
//! corpus with mock teachers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::Result;
use crate::exec::Exec;
use crate::losses::Target;
use crate::metrics::{evaluate_records, improvement_pair, Aggregate, EvalReport, Metric};
use crate::model::{ModelConfig, Separator};
use crate::signal::{synth_toy_corpus, Manifest};
use crate::trainer::{
    train_group, train_segregate, DataConfig, LossConfig, RunConfig, Stage, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone)]
pub struct OverfitOptions {
    pub steps: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub lr0: f64,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            duration_s: 1.0,
            seed: 1234,
            model: ModelConfig::small(),
            lr0: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OverfitReport {
    pub si_sdri: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

/// Trains the full separator on one toy mixture and reports SI-SDRi on that mixture.
pub fn run_overfit(work_dir: &Path, opts: &OverfitOptions, exec: Exec) -> Result<OverfitReport> {
    let start = Instant::now();
    let manifest = synth_toy_corpus(1, opts.duration_s, opts.seed, work_dir.join("data"), exec)?;
    let run = RunConfig {
        model: opts.model.clone(),
        train: TrainConfig {
            stage: Stage::Segregate,
            lr0: opts.lr0,
            batch_size: 1,
            max_epochs: opts.steps,
            max_steps: Some(opts.steps),
            seed: opts.seed,
            ..TrainConfig::default()
        },
        data: DataConfig {
            manifest: manifest.clone(),
            out_dir: work_dir.join("run"),
            ..DataConfig::default()
        },
        loss: LossConfig::default(),
    };
    let outcome = train_segregate(&run, exec)?;
    let m = Manifest::read(&manifest)?;
    let record = m.load_record(&m.entries[0])?;
    let mut sep = Separator::new(run.model.clone(), outcome.params.clone())?;
    sep.exec = exec;
    let est = sep.separate(&record.mixture)?;
    let (_, si_sdri) = improvement_pair(&record.mixture, &est, &record.sources, Metric::SiSdr)?;
    Ok(OverfitReport {
        si_sdri,
        initial_loss: outcome.first_step_loss,
        final_loss: *outcome.step_losses.last().unwrap(),
        steps: outcome.step_losses.len(),
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: outcome.checkpoint,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageOptions {
    pub num_train: usize,
    pub num_dev: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub targets: Vec<Target>,
    pub group_epochs: usize,
    pub segregate_epochs: usize,
    pub batch_size: usize,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        Self {
            num_train: 200,
            num_dev: 20,
            duration_s: 1.0,
            seed: 2024,
            // the small width with twice the depth: two extractor blocks see under 10 ms
            model: ModelConfig {
                num_blocks: 8,
                ..ModelConfig::small()
            },
            targets: Target::ALL.to_vec(),
            group_epochs: 20,
            segregate_epochs: 30,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub group: TrainOutcome,
    pub segregate: TrainOutcome,
    /// `1 − best dev contextual loss / dev contextual loss before the first update`.
    pub contextual_reduction: f64,
    pub dev: EvalReport,
    pub seconds: f64,
}

impl TwoStageReport {
    pub fn dev_aggregate(&self) -> Option<&Aggregate> {
        self.dev.aggregate.as_ref()
    }
}

/// Base run configuration shared by both stages of [`run_two_stage`].
pub fn two_stage_config(work_dir: &Path, opts: &TwoStageOptions) -> RunConfig {
    RunConfig {
        model: opts.model.clone(),
        train: TrainConfig {
            batch_size: opts.batch_size,
            seed: opts.seed,
            ..TrainConfig::default()
        },
        data: DataConfig {
            manifest: work_dir.join("train").join("manifest.jsonl"),
            dev_manifest: Some(work_dir.join("dev").join("manifest.jsonl")),
            out_dir: work_dir.join("run"),
            mock_teachers: true,
            mock_seed: opts.seed,
        },
        loss: LossConfig {
            targets: opts.targets.clone(),
            ..LossConfig::default()
        },
    }
}

/// Simulates train/dev corpora, runs the group stage, then the segregate stage initialised
/// from it, and evaluates the result on dev.
pub fn run_two_stage(
    work_dir: &Path,
    opts: &TwoStageOptions,
    exec: Exec,
) -> Result<TwoStageReport> {
    let start = Instant::now();
    synth_toy_corpus(
        opts.num_train,
        opts.duration_s,
        opts.seed,
        work_dir.join("train"),
        exec,
    )?;
    synth_toy_corpus(
        opts.num_dev,
        opts.duration_s,
        opts.seed.wrapping_add(1),
        work_dir.join("dev"),
        exec,
    )?;
    let base = two_stage_config(work_dir, opts);

    let mut group_run = base.clone();
    group_run.train.stage = Stage::Group;
    group_run.train.max_epochs = opts.group_epochs;
    let group = train_group(&group_run, exec)?;

    let mut seg_run = base;
    seg_run.train.stage = Stage::Segregate;
    seg_run.train.max_epochs = opts.segregate_epochs;
    seg_run.train.two_stage = true;
    seg_run.train.group_ckpt = Some(group.checkpoint.clone());
    let segregate = train_segregate(&seg_run, exec)?;

    let dev_manifest = Manifest::read(seg_run.data.dev_manifest.as_ref().unwrap())?;
    let records = dev_manifest
        .entries
        .iter()
        .map(|e| dev_manifest.load_record(e))
        .collect::<Result<Vec<_>>>()?;
    let mut sep = Separator::new(seg_run.model.clone(), segregate.params.clone())?;
    sep.exec = Exec::Sequential;
    let dev = evaluate_records(&sep, &records, exec)?;
    let contextual_reduction = 1.0 - group.best_dev_contextual / group.initial_dev_contextual;
    Ok(TwoStageReport {
        group,
        segregate,
        contextual_reduction,
        dev,
        seconds: start.elapsed().as_secs_f64(),
    })
}
