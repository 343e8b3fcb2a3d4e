//! Waveforms, WAV I/O, SNR-controlled mixing and the toy corpus generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
const PCM_SCALE: f32 = 32768.0;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude, accumulated in f64.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self
                .samples
                .iter()
                .map(|&v| (v as f64 * gain) as f32)
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn trimmed(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.len())].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }
}

/// One simulated mixture with its (gain-adjusted) sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
    pub seed: u64,
}

/// Quantizes a sample to 16-bit PCM after clamping to [-1, 1].
pub fn quantize_pcm16(v: f32) -> i16 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    (v * PCM_SCALE)
        .round()
        .clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Multichannel(spec.channels));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / PCM_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(e.to_string()))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples outside [-1, 1] are clamped.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in &w.samples {
        writer.write_sample(quantize_pcm16(v)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn check_pair(s1: &Waveform, s2: &Waveform) -> Result<()> {
    if s1.len() != s2.len() {
        return Err(Error::LengthMismatch(s1.len(), s2.len()));
    }
    if s1.sample_rate_hz != s2.sample_rate_hz {
        return Err(Error::SampleRateMismatch(
            s1.sample_rate_hz,
            s2.sample_rate_hz,
        ));
    }
    Ok(())
}

/// Gain applied to `s2` so that `10·log10(P(s1) / P(g·s2)) = snr_db`.
pub fn snr_gain(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<f64> {
    check_pair(s1, s2)?;
    let (p1, p2) = (s1.power(), s2.power());
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok(10f64.powf(-snr_db / 20.0) * (p1 / p2).sqrt())
}

/// SNR in dB between two signals, using mean squared amplitude as power.
pub fn snr_db(s1: &Waveform, s2: &Waveform) -> f64 {
    10.0 * (s1.power() / s2.power()).log10()
}

/// Rescales `s2` to hit `snr_db` relative to `s1` and sums the two.
pub fn mix_at_snr(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixtureRecord> {
    let gain = snr_gain(s1, s2, snr_db)?;
    let s2 = s2.scaled(gain);
    let mixture = Waveform {
        samples: s1
            .samples
            .iter()
            .zip(&s2.samples)
            .map(|(a, b)| a + b)
            .collect(),
        sample_rate_hz: s1.sample_rate_hz,
    };
    Ok(MixtureRecord {
        id: String::new(),
        mixture,
        sources: vec![s1.clone(), s2],
        snr_db,
        seed: 0,
    })
}

/// One line of the JSONL corpus manifest. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub mix: String,
    pub sources: Vec<String>,
    pub snr_db: f64,
    #[serde(default)]
    pub teachers: BTreeMap<String, String>,
}

impl ManifestEntry {
    /// Manifest key for source `index` (0-based) and teacher kind name, e.g. `phoneme_1`.
    pub fn teacher_key(kind: &str, index: usize) -> String {
        format!("{kind}_{}", index + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_record(&self, entry: &ManifestEntry) -> Result<MixtureRecord> {
        let mixture = load_wav(self.resolve(&entry.mix))?;
        let sources = entry
            .sources
            .iter()
            .map(|p| load_wav(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        for s in &sources {
            check_pair(&mixture, s)?;
        }
        Ok(MixtureRecord {
            id: entry.id.clone(),
            mixture,
            sources,
            snr_db: entry.snr_db,
            seed: 0,
        })
    }
}

/// Parameters of the synthetic "speakers" used by the toy corpus.
pub const TOY_SPEAKERS: usize = 8;
const TOY_HARMONICS: usize = 12;
const TOY_F0_RANGE: (f64, f64) = (110.0, 320.0);
const TOY_PEAK: f64 = 0.9;
/// Syllable durations in seconds.
const TOY_SYLLABLE: (f64, f64) = (0.05, 0.15);

fn speaker_profile(speaker: usize) -> (f64, [f64; TOY_HARMONICS]) {
    let f0 = TOY_F0_RANGE.0
        + (TOY_F0_RANGE.1 - TOY_F0_RANGE.0) * speaker as f64 / (TOY_SPEAKERS - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + speaker as u64);
    let mut amps = [0.0; TOY_HARMONICS];
    for (h, a) in amps.iter_mut().enumerate() {
        *a = rng.random_range(0.3..1.0) / ((h + 1) as f64).sqrt();
    }
    (f0, amps)
}

struct Syllable {
    end: usize,
    pitch: (f64, f64),
    formant_hz: f64,
}

/// Voiced "syllables": each has its own pitch glide and a formant that reshapes the
/// speaker's harmonic envelope, so the spectrum changes from one syllable to the next.
fn toy_source(speaker: usize, len: usize, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (f0, amps) = speaker_profile(speaker);
    let f0 = f0 * rng.random_range(0.97..1.03);
    let mut syllables = Vec::new();
    let mut at = 0;
    while at < len {
        let dur = (rng.random_range(TOY_SYLLABLE.0..TOY_SYLLABLE.1) * sr as f64) as usize;
        let start = rng.random_range(0.98..1.02);
        at = (at + dur.max(1)).min(len);
        syllables.push(Syllable {
            end: at,
            pitch: (start, start * rng.random_range(0.99..1.01)),
            formant_hz: (rng.random_range(350f64.ln()..2800f64.ln())).exp(),
        });
    }
    let mut phases: Vec<f64> = (0..TOY_HARMONICS)
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let nyquist = sr as f64 / 2.0;
    let mut k = 0;
    let mut begin = 0;
    (0..len)
        .map(|n| {
            if n >= syllables[k].end {
                begin = syllables[k].end;
                k += 1;
            }
            let syl = &syllables[k];
            let u = (n - begin) as f64 / (syl.end - begin) as f64;
            let pitch = f0 * (syl.pitch.0 + (syl.pitch.1 - syl.pitch.0) * u);
            let envelope = 0.1 + 0.9 * (PI * u).sin().sqrt();
            let mut v = 0.0;
            for (h, (a, p)) in amps.iter().zip(phases.iter_mut()).enumerate() {
                let f = pitch * (h + 1) as f64;
                *p = (*p + 2.0 * PI * f / sr as f64) % (2.0 * PI);
                if f < 0.9 * nyquist {
                    let x = (f - syl.formant_hz) / (0.5 * syl.formant_hz);
                    v += a * (0.15 + (-x * x).exp()) * p.sin();
                }
            }
            envelope * v
        })
        .collect()
}

/// Generates utterance `index` of a toy corpus: two distinct speakers mixed at an SNR drawn
/// uniformly from [-5, 5] dB, peak-normalized and quantized to the 16-bit grid. The mixture is
/// the exact sum of the quantized sources.
pub fn synth_toy_record(index: usize, len: usize, seed: u64) -> Result<MixtureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let a = rng.random_range(0..TOY_SPEAKERS);
    let b = (a + rng.random_range(1..TOY_SPEAKERS)) % TOY_SPEAKERS;
    let snr_db: f64 = rng.random_range(-5.0..=5.0);
    let sr = DEFAULT_SAMPLE_RATE;
    let s1 = toy_source(a, len, sr, &mut rng);
    let s2 = toy_source(b, len, sr, &mut rng);

    let p1 = s1.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let p2 = s2.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if p1 <= 0.0 || p2 <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let gain = 10f64.powf(-snr_db / 20.0) * (p1 / p2).sqrt();
    let peak = s1
        .iter()
        .zip(&s2)
        .map(|(x, y)| (x + gain * y).abs())
        .fold(0.0, f64::max);
    let norm = TOY_PEAK / peak.max(1e-12);

    let q1: Vec<i16> = s1
        .iter()
        .map(|v| quantize_pcm16((v * norm) as f32))
        .collect();
    let q2: Vec<i16> = s2
        .iter()
        .map(|v| quantize_pcm16((v * gain * norm) as f32))
        .collect();
    let to_wave = |q: &[i16]| Waveform {
        samples: q.iter().map(|&v| v as f32 / PCM_SCALE).collect(),
        sample_rate_hz: sr,
    };
    let mix: Vec<i16> = q1.iter().zip(&q2).map(|(x, y)| x + y).collect();
    Ok(MixtureRecord {
        id: format!("utt{index:05}"),
        mixture: to_wave(&mix),
        sources: vec![to_wave(&q1), to_wave(&q2)],
        snr_db,
        seed,
    })
}

/// Writes a seeded toy corpus (WAVs plus `manifest.jsonl`) into `out_dir` and returns the
/// manifest path. Output is byte-identical for identical arguments.
pub fn synth_toy_corpus(
    num_utts: usize,
    duration_s: f64,
    seed: u64,
    out_dir: impl AsRef<Path>,
    exec: Exec,
) -> Result<PathBuf> {
    if num_utts == 0 {
        return Err(Error::InvalidArgument("num_utts must be at least 1".into()));
    }
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let len = (duration_s * DEFAULT_SAMPLE_RATE as f64).round() as usize;

    let records = exec.map(num_utts, |i| synth_toy_record(i, len, seed));
    let mut entries = Vec::with_capacity(num_utts);
    for rec in records {
        let rec = rec?;
        let mix = format!("wav/{}_mix.wav", rec.id);
        save_wav(&rec.mixture, out_dir.join(&mix))?;
        let mut sources = Vec::new();
        for (k, s) in rec.sources.iter().enumerate() {
            let p = format!("wav/{}_s{}.wav", rec.id, k + 1);
            save_wav(s, out_dir.join(&p))?;
            sources.push(p);
        }
        entries.push(ManifestEntry {
            id: rec.id,
            mix,
            sources,
            snr_db: rec.snr_db,
            teachers: BTreeMap::new(),
        });
    }
    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join("manifest.jsonl");
    manifest.write(&path)?;
    Ok(path)
}

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
