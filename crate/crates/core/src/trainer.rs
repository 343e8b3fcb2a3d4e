//! Two-stage training: the group stage fits encoder + context extractor (+ predictors) to
//! contextual targets, the segregate stage trains the full separator with PIT SI-SDR,
//! optionally starting from the group-stage weights.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{align_frames, log_mel, FeatureMatrix, MelConfig};
use crate::losses::{frame_candidates, infonce, pit, si_sdr_loss, InfoNceConfig, Target};
use crate::model::{check_shapes, init_params, save_checkpoint, Components, Model, ModelConfig};
use crate::signal::{Manifest, ManifestEntry, MixtureRecord};
use crate::teacher::{mock_teacher, read_ctxf, TeacherKind};

/// Minimum decrease of the dev loss that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Group,
    Segregate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Group => "group",
            Stage::Segregate => "segregate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(Stage::Group),
            "segregate" => Ok(Stage::Segregate),
            other => Err(Error::InvalidArgument(format!("unknown stage: {other}"))),
        }
    }
}

/// Which group-stage tensors initialise the segregate stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transfer {
    #[serde(rename = "context")]
    Context,
    #[serde(rename = "context+encoder")]
    ContextEncoder,
}

impl std::str::FromStr for Transfer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(Transfer::Context),
            "context+encoder" => Ok(Transfer::ContextEncoder),
            other => Err(Error::InvalidArgument(format!(
                "unknown transfer mode: {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub group_ckpt: Option<PathBuf>,
    pub two_stage: bool,
    pub transfer: Transfer,
    /// Global L2 gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Hard cap on optimizer steps across epochs.
    pub max_steps: Option<usize>,
    /// Share of utterances held out for dev when no dev manifest is given.
    pub dev_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Group,
            lr0: 1e-3,
            batch_size: 2,
            max_epochs: 200,
            plateau_patience: 5,
            early_stop_patience: 30,
            lr_decay: 0.5,
            seed: 0,
            group_ckpt: None,
            two_stage: false,
            transfer: Transfer::ContextEncoder,
            grad_clip: 5.0,
            max_steps: None,
            dev_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("dev_fraction must be in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Group-stage targets.
    pub targets: Vec<Target>,
    /// Per-target weights; absent targets weigh 1.
    pub weights: BTreeMap<Target, f64>,
    pub infonce: InfoNceConfig,
    /// Subtract each utterance's per-dimension mean from teacher features before scoring.
    pub center_teachers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            targets: Target::ALL.to_vec(),
            weights: BTreeMap::new(),
            infonce: InfoNceConfig::default(),
            center_teachers: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.infonce.validate()?;
        for (t, &w) in &self.weights {
            if !self.targets.contains(t) {
                return Err(Error::Config(format!("weight given for unused target {t}")));
            }
            if !(w > 0.0) {
                return Err(Error::Config(format!("weight for {t} must be positive")));
            }
        }
        Ok(())
    }

    fn weight(&self, t: Target) -> f64 {
        self.weights.get(&t).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub dev_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Compute phoneme/word targets with the mock teacher and mel targets with log-Mel
    /// instead of reading CTXF files.
    pub mock_teachers: bool,
    pub mock_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            dev_manifest: None,
            out_dir: PathBuf::from("runs"),
            mock_teachers: false,
            mock_seed: 0,
        }
    }
}

/// Full run description; this is the JSON document accepted by `ctxsep train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f32]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// Bias-corrected Adam update of every parameter from its stored gradient.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some(name) = params
        .iter()
        .find(|(_, p)| p.grad.is_none())
        .map(|(n, _)| n.clone())
    {
        return Err(Error::MissingGradient(name));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.value.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let grad = p.grad.as_ref().unwrap();
        for i in 0..n {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            p.value[i] = (p.value[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Reduce-on-plateau bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct Plateau {
    best: f64,
    bad_epochs: usize,
    patience: usize,
    factor: f64,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
        }
    }

    /// Feeds one epoch's dev loss and returns the learning rate to use next.
    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - IMPROVEMENT_EPS {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Learning rate after replaying `history` from `lr`: halved (by `factor`) each time the best
/// loss has not improved for `patience` consecutive epochs.
pub fn plateau_schedule(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut p = Plateau::new(patience, factor);
    history.iter().fold(lr, |lr, &l| p.update(l, lr))
}

fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in history.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b - IMPROVEMENT_EPS) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i)
}

/// True once the best dev loss is `patience` or more epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    match best_index(history) {
        Some(i) => history.len() - 1 - i >= patience,
        None => false,
    }
}

/// A training utterance with its per-source contextual targets.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub index: usize,
    pub record: MixtureRecord,
    pub teachers: BTreeMap<TeacherKind, Vec<FeatureMatrix>>,
}

fn contextual_kinds(targets: &[Target]) -> Vec<TeacherKind> {
    let mut kinds: Vec<TeacherKind> = targets.iter().filter_map(|t| t.teacher_kind()).collect();
    kinds.sort();
    kinds.dedup();
    kinds
}

fn centered(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut mean = vec![0.0f64; m.dim];
    for t in 0..m.frames {
        for (acc, &v) in mean.iter_mut().zip(m.row(t)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m.frames.max(1) as f64);
    let values = m
        .values
        .chunks(m.dim)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&v, &mu)| (v as f64 - mu) as f32)
        })
        .collect();
    FeatureMatrix::new(m.frames, m.dim, values, m.frame_rate_hz)
}

fn load_teachers(
    manifest: &Manifest,
    entry: &ManifestEntry,
    record: &MixtureRecord,
    kinds: &[TeacherKind],
    run: &RunConfig,
    missing: &mut Vec<PathBuf>,
) -> Result<BTreeMap<TeacherKind, Vec<FeatureMatrix>>> {
    let mut out = BTreeMap::new();
    for &kind in kinds {
        let dim = *run
            .model
            .predictor_out_dims
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no predictor configured for {kind}")))?;
        let mut mats = Vec::new();
        for (j, src) in record.sources.iter().enumerate() {
            let feats = if run.data.mock_teachers {
                mock_target(&record.id, src, kind, dim, run.data.mock_seed)?
            } else {
                let key = ManifestEntry::teacher_key(kind.as_str(), j);
                let Some(rel) = entry.teachers.get(&key) else {
                    missing.push(PathBuf::from(format!("{}:{key}", entry.id)));
                    continue;
                };
                let path = manifest.resolve(rel);
                if !path.exists() {
                    missing.push(path);
                    continue;
                }
                let tf = read_ctxf(&path)?;
                if tf.kind != kind {
                    return Err(Error::Shape(format!(
                        "{}: expected {kind} features, found {}",
                        path.display(),
                        tf.kind
                    )));
                }
                tf.features
            };
            if feats.dim != dim {
                return Err(Error::Shape(format!(
                    "{} {kind} teacher has dim {}, predictor expects {dim}",
                    record.id, feats.dim
                )));
            }
            mats.push(if run.loss.center_teachers {
                centered(&feats)?
            } else {
                feats
            });
        }
        out.insert(kind, mats);
    }
    Ok(out)
}

fn mock_target(
    id: &str,
    src: &crate::signal::Waveform,
    kind: TeacherKind,
    dim: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    let mel = log_mel(src, &MelConfig::default())?;
    if kind == TeacherKind::Mel {
        Ok(mel)
    } else {
        Ok(mock_teacher(id, &mel, kind, dim, seed)?.features)
    }
}

/// An in-memory utterance whose targets come from the mock teacher (log-Mel for `mel`).
pub fn mock_utterance(
    index: usize,
    record: MixtureRecord,
    kinds: &[TeacherKind],
    model: &ModelConfig,
    loss: &LossConfig,
    mock_seed: u64,
) -> Result<Utterance> {
    let mut teachers = BTreeMap::new();
    for &kind in kinds {
        let dim = *model
            .predictor_out_dims
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no predictor configured for {kind}")))?;
        let mats = record
            .sources
            .iter()
            .map(|src| {
                let f = mock_target(&record.id, src, kind, dim, mock_seed)?;
                if loss.center_teachers {
                    centered(&f)
                } else {
                    Ok(f)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        teachers.insert(kind, mats);
    }
    Ok(Utterance {
        index,
        record,
        teachers,
    })
}

/// Loads every manifest entry with the teachers needed for `kinds`.
pub fn load_utterances(
    path: &Path,
    kinds: &[TeacherKind],
    run: &RunConfig,
) -> Result<Vec<Utterance>> {
    if !path.exists() {
        return Err(Error::MissingFiles(vec![path.to_path_buf()]));
    }
    let manifest = Manifest::read(path)?;
    let mut missing = Vec::new();
    let mut utts = Vec::with_capacity(manifest.entries.len());
    for (index, entry) in manifest.entries.iter().enumerate() {
        let record = manifest.load_record(entry)?;
        let teachers = load_teachers(&manifest, entry, &record, kinds, run, &mut missing)?;
        utts.push(Utterance {
            index,
            record,
            teachers,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(utts)
}

fn split_hash(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Train/dev utterances. With a dev manifest, it is used as is; otherwise `dev_fraction` of
/// the utterances (by seeded hash of id) are held out. Degenerate splits fall back to
/// evaluating on the training set.
pub fn load_split(
    run: &RunConfig,
    kinds: &[TeacherKind],
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let all = load_utterances(&run.data.manifest, kinds, run)?;
    if all.is_empty() {
        return Err(Error::InvalidArgument("training manifest is empty".into()));
    }
    if let Some(dev) = &run.data.dev_manifest {
        let dev = load_utterances(dev, kinds, run)?;
        return Ok(if dev.is_empty() {
            (all.clone(), all)
        } else {
            (all, dev)
        });
    }
    let threshold = (run.train.dev_fraction * 10_000.0).round() as u64;
    let (dev, train): (Vec<_>, Vec<_>) = all
        .iter()
        .cloned()
        .partition(|u| split_hash(run.train.seed, &u.record.id) % 10_000 < threshold);
    if dev.is_empty() || train.is_empty() {
        Ok((all.clone(), all))
    } else {
        Ok((train, dev))
    }
}

/// Loss of one utterance: the differentiable total and the summed contextual part.
pub struct UtteranceLoss {
    pub total: Var,
    pub contextual: f64,
}

fn to_t<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

fn signal_refs<T: Scalar>(utt: &Utterance, len: usize) -> Vec<Vec<T>> {
    utt.record
        .sources
        .iter()
        .map(|s| to_t(&s.samples[..len]))
        .collect()
}

/// PIT over `S × S` loss matrices (one per component, each weighted); returns the mean over
/// speakers of the selected weighted sum and the permutation's per-component values.
fn pit_combine<T: Scalar>(
    g: &mut Graph<T>,
    components: &[(Vec<Vec<Var>>, f64)],
    speakers: usize,
) -> Result<(Var, Vec<f64>)> {
    let mut matrix = vec![vec![0.0f64; speakers]; speakers];
    for (m, w) in components {
        for i in 0..speakers {
            for j in 0..speakers {
                matrix[i][j] += w * g.scalar(m[i][j]).to_real();
            }
        }
    }
    let (perm, _) = pit(&matrix)?;
    let mut terms = Vec::new();
    let mut per_component = Vec::new();
    for (m, w) in components {
        let mut acc = 0.0;
        for (i, &j) in perm.0.iter().enumerate() {
            terms.push((m[i][j], T::lit(*w / speakers as f64)));
            acc += g.scalar(m[i][j]).to_real() / speakers as f64;
        }
        per_component.push(acc);
    }
    Ok((g.weighted_sum(&terms)?, per_component))
}

/// Group-stage loss: contextual InfoNCE terms and/or the temporary signal head, under one
/// PIT assignment chosen on their weighted sum.
pub fn group_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<'_, T>,
    utt: &Utterance,
    loss: &LossConfig,
    seed: u64,
) -> Result<UtteranceLoss> {
    let s = model.cfg.num_speakers;
    if utt.record.sources.len() != s {
        return Err(Error::Shape(format!(
            "{} has {} sources, model expects {s}",
            utt.record.id,
            utt.record.sources.len()
        )));
    }
    let e = model.encode(g, &to_t::<T>(&utt.record.mixture.samples))?;
    let cs = model.extract_context(g, e)?;
    let mut components: Vec<(Vec<Vec<Var>>, f64)> = Vec::new();
    let mut contextual_idx = Vec::new();
    for &target in &loss.targets {
        let w = loss.weight(target);
        let m = match target.teacher_kind() {
            None => {
                let ests: Vec<Var> = cs
                    .iter()
                    .map(|&c| model.signal_head(g, e, c))
                    .collect::<Result<_>>()?;
                let len = g.shape(ests[0])[1];
                let refs = signal_refs::<T>(utt, len);
                ests.iter()
                    .map(|&est| {
                        refs.iter()
                            .map(|r| si_sdr_loss(g, est, r))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Some(kind) => {
                contextual_idx.push(components.len());
                let preds: Vec<Var> = cs
                    .iter()
                    .map(|&c| model.predict_teacher(g, c, kind))
                    .collect::<Result<_>>()?;
                let frames = g.shape(preds[0])[1];
                let rate = model.cfg.predictor_rate_hz(kind)?;
                let grid = FeatureMatrix::new(frames, 1, vec![0.0; frames], rate)?;
                let teachers = utt.teachers.get(&kind).ok_or_else(|| {
                    Error::Config(format!("{} lacks {kind} teacher", utt.record.id))
                })?;
                let aligned: Vec<FeatureMatrix> = teachers
                    .iter()
                    .map(|t| align_frames(&grid, t).map(|(_, b)| b))
                    .collect::<Result<_>>()?;
                let refs: Vec<&FeatureMatrix> = aligned.iter().collect();
                let cand_seed = seed ^ ((kind.code() as u64) << 56);
                let cands: Vec<Vec<Vec<Vec<T>>>> = (0..s)
                    .map(|j| frame_candidates::<T>(&refs, j, &loss.infonce, cand_seed))
                    .collect::<Result<_>>()?;
                preds
                    .iter()
                    .map(|&p| {
                        cands
                            .iter()
                            .map(|c| infonce(g, p, c, loss.infonce.temperature))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        components.push((m, w));
    }
    if components.is_empty() {
        return Err(Error::Config("no group-stage target configured".into()));
    }
    let (total, parts) = pit_combine(g, &components, s)?;
    let contextual = contextual_idx.iter().map(|&i| parts[i]).sum();
    Ok(UtteranceLoss { total, contextual })
}

/// Segregate-stage loss: PIT negative SI-SDR over the separator's outputs.
pub fn separation_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<'_, T>,
    utt: &Utterance,
) -> Result<UtteranceLoss> {
    let outs = model.forward_separation(g, &to_t::<T>(&utt.record.mixture.samples))?;
    if utt.record.sources.len() != outs.len() {
        return Err(Error::Shape(format!(
            "{} has {} sources, model produces {}",
            utt.record.id,
            utt.record.sources.len(),
            outs.len()
        )));
    }
    let len = g.shape(outs[0])[1];
    let refs = signal_refs::<T>(utt, len);
    let m = outs
        .iter()
        .map(|&o| {
            refs.iter()
                .map(|r| si_sdr_loss(g, o, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (total, _) = pit_combine(g, &[(m, 1.0)], outs.len())?;
    Ok(UtteranceLoss {
        total,
        contextual: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_contextual: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub epoch: usize,
    pub dev_loss: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub best_dev_contextual: f64,
    pub initial_dev_loss: f64,
    pub initial_dev_contextual: f64,
    pub first_step_loss: f64,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    step: usize,
    loss: f64,
    lr: f64,
}

type LossFn<'a> =
    dyn Fn(&mut Graph<f32>, &Model<'_, f32>, &Utterance, u64) -> Result<UtteranceLoss> + Sync + 'a;

fn utt_seed(base: u64, index: usize, epoch: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((epoch as u64) << 40)
}

fn dev_eval(
    run: &RunConfig,
    params: &ParamStore<f32>,
    dev: &[Utterance],
    loss_fn: &LossFn<'_>,
    exec: Exec,
) -> Result<(f64, f64)> {
    let model = Model::new(&run.model, params);
    let vals = exec.map(dev.len(), |i| -> Result<(f64, f64)> {
        let mut g = Graph::with_exec(Exec::Sequential);
        let l = loss_fn(
            &mut g,
            &model,
            &dev[i],
            utt_seed(run.loss.infonce.seed, dev[i].index, 0),
        )?;
        Ok((g.scalar(l.total) as f64, l.contextual))
    });
    let mut total = 0.0;
    let mut ctx = 0.0;
    for v in vals {
        let (t, c) = v?;
        total += t;
        ctx += c;
    }
    let n = dev.len() as f64;
    Ok((total / n, ctx / n))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run_loop(
    run: &RunConfig,
    stage: Stage,
    mut params: ParamStore<f32>,
    train: &[Utterance],
    dev: &[Utterance],
    loss_fn: &LossFn<'_>,
    exec: Exec,
) -> Result<TrainOutcome> {
    let tc = &run.train;
    let out_dir = &run.data.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let name = stage.as_str();
    let ckpt_path = out_dir.join(format!("{name}.caws"));
    let log_path = out_dir.join(format!("{name}_log.jsonl"));
    write_json(run, &out_dir.join(format!("{name}_config.json")))?;
    let config_hash = run.hash()?;
    let mut log =
        BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let (initial_dev_loss, initial_dev_contextual) = dev_eval(run, &params, dev, loss_fn, exec)?;
    let mut adam = AdamState::default();
    let mut plateau = Plateau::new(tc.plateau_patience, tc.lr_decay);
    let mut lr = tc.lr0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut dev_history: Vec<f64> = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, f64, ParamStore<f32>)> = None;
    let max_steps = tc.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=tc.max_epochs {
        if step_losses.len() >= max_steps {
            break;
        }
        order.shuffle(&mut shuffler);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(tc.batch_size) {
            if step_losses.len() >= max_steps {
                break;
            }
            params.zero_grad();
            let mut g = Graph::with_exec(exec);
            let model = Model::new(&run.model, &params);
            let w = 1.0 / batch.len() as f32;
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let utt = &train[i];
                let l = loss_fn(
                    &mut g,
                    &model,
                    utt,
                    utt_seed(run.loss.infonce.seed, utt.index, epoch),
                )?;
                terms.push((l.total, w));
            }
            let total = g.weighted_sum(&terms)?;
            let value = g.scalar(total) as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            g.backward(total, &mut params)?;
            if tc.grad_clip > 0.0 {
                params.clip_grad_norm(tc.grad_clip);
            }
            adam_step(&mut params, &mut adam, lr)?;
            step_losses.push(value);
            epoch_loss += value;
            epoch_steps += 1;
            let line = LogLine {
                epoch,
                step: step_losses.len(),
                loss: value,
                lr,
            };
            serde_json::to_writer(&mut log, &line)?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        }
        if epoch_steps == 0 {
            break;
        }
        let (dev_loss, dev_contextual) = dev_eval(run, &params, dev, loss_fn, exec)?;
        if !dev_loss.is_finite() {
            return Err(Error::NonFinite(format!("dev loss at epoch {epoch}")));
        }
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / epoch_steps as f64,
            dev_loss,
            dev_contextual,
            lr,
            steps: step_losses.len(),
        });
        if best
            .as_ref()
            .is_none_or(|b| dev_loss < b.1 - IMPROVEMENT_EPS)
        {
            save_checkpoint(&params, &ckpt_path)?;
            let sidecar = Sidecar {
                stage: name.to_string(),
                epoch,
                dev_loss,
                config_hash: config_hash.clone(),
            };
            write_json(&sidecar, &out_dir.join(format!("{name}.json")))?;
            best = Some((epoch, dev_loss, dev_contextual, params.clone()));
        }
        dev_history.push(dev_loss);
        lr = plateau.update(dev_loss, lr);
        if early_stop(&dev_history, tc.early_stop_patience) {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let (best_epoch, best_dev_loss, best_dev_contextual, mut best_params) =
        best.ok_or_else(|| Error::InvalidArgument("no training step was run".into()))?;
    best_params.zero_grad();
    best_params.iter_mut().for_each(|(_, p)| p.grad = None);
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        params: best_params,
        best_epoch,
        best_dev_loss,
        best_dev_contextual,
        initial_dev_loss,
        initial_dev_contextual,
        first_step_loss: step_losses[0],
        step_losses,
        history,
    })
}

/// Parameter groups trained in the group stage for the configured targets.
pub fn group_components(loss: &LossConfig) -> Components {
    Components {
        separator: false,
        predictors: contextual_kinds(&loss.targets),
        signal_head: loss.targets.contains(&Target::Signal),
    }
}

/// Group stage: encoder + context extractor (+ predictors / signal head) on contextual targets.
pub fn train_group(run: &RunConfig, exec: Exec) -> Result<TrainOutcome> {
    run.validate()?;
    if run.loss.targets.is_empty() {
        return Err(Error::Config("no group-stage target configured".into()));
    }
    let comps = group_components(&run.loss);
    let params = init_params(&run.model, &comps, run.train.seed)?;
    let (train, dev) = load_split(run, &comps.predictors)?;
    let loss_cfg = run.loss.clone();
    let loss_fn = move |g: &mut Graph<f32>, m: &Model<'_, f32>, u: &Utterance, seed: u64| {
        group_loss(g, m, u, &loss_cfg, seed)
    };
    run_loop(run, Stage::Group, params, &train, &dev, &loss_fn, exec)
}

/// Initial parameters of the segregate stage: fresh separator weights, with encoder/context
/// tensors copied from the group checkpoint when one is configured.
pub fn segregate_init(run: &RunConfig) -> Result<ParamStore<f32>> {
    let tc = &run.train;
    let mut params = init_params(&run.model, &Components::separation(), tc.seed)?;
    let Some(path) = &tc.group_ckpt else {
        if tc.two_stage {
            return Err(Error::Config("two_stage requires train.group_ckpt".into()));
        }
        return Ok(params);
    };
    if !path.exists() {
        return Err(Error::MissingFiles(vec![path.clone()]));
    }
    let group = crate::model::load_checkpoint(path)?;
    check_shapes(&run.model, &Components::default(), &group)?;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let take = name.starts_with("context/")
            || (tc.transfer == Transfer::ContextEncoder && name.starts_with("encoder/"));
        if take {
            let src = group.get(&name).unwrap();
            params.get_mut(&name).unwrap().value.clone_from(&src.value);
        }
    }
    Ok(params)
}

/// Segregate stage: full separator with PIT SI-SDR, initialised by [`segregate_init`].
pub fn train_segregate(run: &RunConfig, exec: Exec) -> Result<TrainOutcome> {
    run.validate()?;
    let params = segregate_init(run)?;
    let (train, dev) = load_split(run, &[])?;
    let loss_fn = |g: &mut Graph<f32>, m: &Model<'_, f32>, u: &Utterance, _seed: u64| {
        separation_loss(g, m, u)
    };
    run_loop(run, Stage::Segregate, params, &train, &dev, &loss_fn, exec)
}

pub fn train(run: &RunConfig, exec: Exec) -> Result<TrainOutcome> {
    match run.train.stage {
        Stage::Group => train_group(run, exec),
        Stage::Segregate => train_segregate(run, exec),
    }
}
