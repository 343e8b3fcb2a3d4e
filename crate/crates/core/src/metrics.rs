//! SI-SDRi / SDRi under permutation-invariant assignment, and batch evaluation.
//!
//! SDR here is the plain signal-to-distortion ratio with no allowed-distortion filter, so
//! absolute SDRi values are not comparable with BSSEval numbers.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::si_sdr_value;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{pit, to_f64, Permutation};
use crate::model::{load_checkpoint, ModelConfig, Separator};
use crate::signal::{Manifest, MixtureRecord, Waveform};

const EPS: f64 = 1e-8;

/// Plain SDR in dB: `10·log10((‖s‖²+ε)/(‖s−ŝ‖²+ε))`.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    sdr_with(&to_f64(&est.samples), &to_f64(&reference.samples))
}

pub fn sdr_with(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("zero reference".into()));
    }
    let sig: f64 = reference.iter().map(|v| v * v).sum();
    let err: f64 = reference
        .iter()
        .zip(est)
        .map(|(s, e)| (s - e) * (s - e))
        .sum();
    Ok(10.0 * ((sig + EPS) / (err + EPS)).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SiSdr,
    Sdr,
}

impl Metric {
    fn eval(self, est: &[f64], reference: &[f64]) -> Result<f64> {
        match self {
            Metric::SiSdr => {
                if reference.iter().all(|&v| v == 0.0) {
                    return Err(Error::InvalidArgument("zero reference".into()));
                }
                Ok(si_sdr_value(est, reference, true))
            }
            Metric::Sdr => sdr_with(est, reference),
        }
    }
}

/// Per-pair detail behind an improvement figure.
#[derive(Debug, Clone)]
pub struct PairScore {
    pub permutation: Permutation,
    /// Mean over speakers of `metric(mix, ref)`.
    pub mixture: f64,
    /// Mean over speakers of `metric(est, ref)` under the chosen permutation.
    pub estimate: f64,
}

impl PairScore {
    pub fn improvement(&self) -> f64 {
        self.estimate - self.mixture
    }
}

pub fn score_pair(
    mix: &Waveform,
    estimates: &[Waveform],
    references: &[Waveform],
    metric: Metric,
) -> Result<PairScore> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    let len = estimates
        .iter()
        .chain(references)
        .map(Waveform::len)
        .chain(std::iter::once(mix.len()))
        .min()
        .unwrap();
    let cut = |w: &Waveform| to_f64(&w.samples[..len]);
    let est: Vec<Vec<f64>> = estimates.iter().map(cut).collect();
    let refs: Vec<Vec<f64>> = references.iter().map(cut).collect();
    let mix = cut(mix);

    let mut scores = vec![vec![0.0; refs.len()]; est.len()];
    for (i, e) in est.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            scores[i][j] = metric.eval(e, r)?;
        }
    }
    let neg: Vec<Vec<f64>> = scores
        .iter()
        .map(|r| r.iter().map(|v| -v).collect())
        .collect();
    let (perm, _) = pit(&neg)?;
    let s = est.len() as f64;
    let estimate = perm
        .0
        .iter()
        .enumerate()
        .map(|(i, &j)| scores[i][j])
        .sum::<f64>()
        / s;
    let mixture = refs
        .iter()
        .map(|r| metric.eval(&mix, r))
        .sum::<Result<f64>>()?
        / s;
    Ok(PairScore {
        permutation: perm,
        mixture,
        estimate,
    })
}

/// PIT-assigned improvement of `estimates` over the unprocessed mixture, averaged over speakers.
pub fn improvement_pair(
    mix: &Waveform,
    estimates: &[Waveform],
    references: &[Waveform],
    metric: Metric,
) -> Result<(Permutation, f64)> {
    let s = score_pair(mix, estimates, references, metric)?;
    let imp = s.improvement();
    Ok((s.permutation, imp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub si_sdr_mix: f64,
    pub si_sdr_est: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub si_sdri_mean: f64,
    pub sdri_mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: Option<Aggregate>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let aggregate = (!rows.is_empty()).then(|| {
            let n = rows.len();
            Aggregate {
                si_sdri_mean: rows.iter().map(|r| r.si_sdri).sum::<f64>() / n as f64,
                sdri_mean: rows.iter().map(|r| r.sdri).sum::<f64>() / n as f64,
                n,
            }
        });
        Self { rows, aggregate }
    }

    /// Writes `rows.jsonl` and, when there are rows, `aggregate.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("rows.jsonl");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for row in &self.rows {
            writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(agg) = &self.aggregate {
            let path = dir.join("aggregate.json");
            std::fs::write(&path, serde_json::to_string_pretty(agg)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Anything that maps a mixture to one estimate per speaker.
pub trait SeparationModel: Sync {
    fn separate(&self, record: &MixtureRecord) -> Result<Vec<Waveform>>;
}

impl SeparationModel for Separator {
    fn separate(&self, record: &MixtureRecord) -> Result<Vec<Waveform>> {
        Separator::separate(self, &record.mixture)
    }
}

/// Returns the references themselves.
pub struct OracleModel;

impl SeparationModel for OracleModel {
    fn separate(&self, record: &MixtureRecord) -> Result<Vec<Waveform>> {
        Ok(record.sources.clone())
    }
}

/// Returns one copy of the mixture per speaker.
pub struct IdentityModel;

impl SeparationModel for IdentityModel {
    fn separate(&self, record: &MixtureRecord) -> Result<Vec<Waveform>> {
        Ok(vec![record.mixture.clone(); record.sources.len()])
    }
}

pub fn evaluate_record<M: SeparationModel + ?Sized>(
    model: &M,
    record: &MixtureRecord,
) -> Result<EvalRow> {
    let est = model.separate(record)?;
    let si = score_pair(&record.mixture, &est, &record.sources, Metric::SiSdr)?;
    let (_, sdri) = improvement_pair(&record.mixture, &est, &record.sources, Metric::Sdr)?;
    Ok(EvalRow {
        id: record.id.clone(),
        si_sdr_mix: si.mixture,
        si_sdr_est: si.estimate,
        si_sdri: si.improvement(),
        sdri,
        permutation: si.permutation,
    })
}

/// Evaluates records independently (in parallel under `exec`) and assembles rows in input order.
pub fn evaluate_records<M: SeparationModel + ?Sized>(
    model: &M,
    records: &[MixtureRecord],
    exec: Exec,
) -> Result<EvalReport> {
    let rows = exec
        .map(records.len(), |i| evaluate_record(model, &records[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Loads the checkpoint and every manifest entry, then evaluates.
pub fn evaluate_manifest(
    manifest: impl AsRef<Path>,
    ckpt: impl AsRef<Path>,
    cfg: &ModelConfig,
    exec: Exec,
) -> Result<EvalReport> {
    let missing: Vec<PathBuf> = [manifest.as_ref(), ckpt.as_ref()]
        .into_iter()
        .filter(|p| !p.exists())
        .map(Path::to_path_buf)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let manifest = Manifest::read(manifest)?;
    let mut sep = Separator::new(cfg.clone(), load_checkpoint(ckpt)?)?;
    sep.exec = Exec::Sequential;
    let records = manifest
        .entries
        .iter()
        .map(|e| manifest.load_record(e))
        .collect::<Result<Vec<_>>>()?;
    evaluate_records(&sep, &records, exec)
}
