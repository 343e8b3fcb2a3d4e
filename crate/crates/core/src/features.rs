//! STFT, log-Mel spectrogram and frame-rate alignment.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// A `frames × dim` row-major real matrix sampled at `frame_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    pub frame_rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>, frame_rate_hz: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape(format!("empty feature matrix {frames}x{dim}")));
        }
        if values.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{dim} matrix",
                values.len()
            )));
        }
        if !(frame_rate_hz > 0.0) || !frame_rate_hz.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "frame rate {frame_rate_hz}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            frames,
            dim,
            values,
            frame_rate_hz,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dim + d]
    }

    /// Keeps the first `frames` rows.
    pub fn trimmed(&self, frames: usize) -> FeatureMatrix {
        let frames = frames.min(self.frames);
        FeatureMatrix {
            frames,
            dim: self.dim,
            values: self.values[..frames * self.dim].to_vec(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// Mean over consecutive groups of `factor` frames. Only complete groups are kept.
    pub fn mean_pooled(&self, factor: usize) -> Result<FeatureMatrix> {
        self.pool(factor, false)
    }

    /// Mean pooling that also averages a trailing partial group, giving `ceil(frames / factor)`.
    pub fn mean_pooled_ceil(&self, factor: usize) -> Result<FeatureMatrix> {
        self.pool(factor, true)
    }

    fn pool(&self, factor: usize, keep_partial: bool) -> Result<FeatureMatrix> {
        if factor == 0 {
            return Err(Error::InvalidArgument("pooling factor 0".into()));
        }
        let out_frames = if keep_partial {
            self.frames.div_ceil(factor)
        } else {
            self.frames / factor
        };
        if out_frames == 0 {
            return Err(Error::TooShort {
                len: self.frames,
                need: factor,
            });
        }
        let mut values = vec![0.0f32; out_frames * self.dim];
        for (o, out) in values.chunks_mut(self.dim).enumerate() {
            let start = o * factor;
            let end = (start + factor).min(self.frames);
            for t in start..end {
                for (acc, v) in out.iter_mut().zip(self.row(t)) {
                    *acc += v;
                }
            }
            let n = (end - start) as f32;
            out.iter_mut().for_each(|v| *v /= n);
        }
        Ok(FeatureMatrix {
            frames: out_frames,
            dim: self.dim,
            values,
            frame_rate_hz: self.frame_rate_hz / factor as f64,
        })
    }

    /// Repeats each frame `factor` times.
    pub fn repeated(&self, factor: usize) -> FeatureMatrix {
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for t in 0..self.frames {
            for _ in 0..factor {
                values.extend_from_slice(self.row(t));
            }
        }
        FeatureMatrix {
            frames: self.frames * factor,
            dim: self.dim,
            values,
            frame_rate_hz: self.frame_rate_hz * factor as f64,
        }
    }
}

/// A onesided complex spectrogram, `frames × bins` row-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex<f64>>,
    pub frame_rate_hz: f64,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[Complex<f64>] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    (len - n_fft) / hop + 1
}

/// Hann-windowed onesided STFT without padding.
pub fn stft(w: &Waveform, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    if !n_fft.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "n_fft {n_fft} is not a power of two"
        )));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} outside (0, {n_fft}]"
        )));
    }
    if w.len() < n_fft {
        return Err(Error::TooShort {
            len: w.len(),
            need: n_fft,
        });
    }
    let frames = frame_count(w.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut values = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let seg = &w.samples[t * hop..t * hop + n_fft];
        for ((b, &x), &h) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(x as f64 * h, 0.0);
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        values,
        frame_rate_hz: w.sample_rate_hz as f64 / hop as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 160,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale Mel filterbank.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    /// `n_mels × bins` row-major weights.
    pub weights: Vec<f64>,
    /// Center frequency of each band in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, cfg: &MelConfig) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if cfg.fmax > nyquist || cfg.fmin < 0.0 || cfg.fmin >= cfg.fmax {
            return Err(Error::InvalidArgument(format!(
                "mel range [{}, {}] invalid for {sample_rate} Hz",
                cfg.fmin, cfg.fmax
            )));
        }
        if cfg.n_mels == 0 {
            return Err(Error::InvalidArgument("n_mels must be positive".into()));
        }
        let bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let up = (f - l) / (c - l);
                let down = (r - f) / (r - c);
                weights[m * bins + k] = up.min(down).max(0.0);
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            bins,
            weights,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        })
    }
}

/// `ln(max(melfb · |STFT|², 1e-10))`, one row per STFT frame.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FeatureMatrix> {
    let fb = MelFilterbank::new(w.sample_rate_hz, cfg)?;
    let spec = stft(w, cfg.n_fft, cfg.hop)?;
    let mut values = Vec::with_capacity(spec.frames * cfg.n_mels);
    let mut power = vec![0.0f64; spec.bins];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.row(t)) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.weights[m * fb.bins..(m + 1) * fb.bins]
                .iter()
                .zip(&power)
                .map(|(a, b)| a * b)
                .sum();
            values.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    FeatureMatrix::new(spec.frames, cfg.n_mels, values, spec.frame_rate_hz)
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    ((r - n).abs() < 1e-6 * r.max(1.0) && n >= 1.0).then_some(n as usize)
}

/// Brings `b` to `a`'s frame rate (mean pooling when `b` is an integer factor faster,
/// frame repetition when it is an integer factor slower) and trims both to the shorter length.
pub fn align_frames(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (ra, rb) = (a.frame_rate_hz, b.frame_rate_hz);
    if !(ra > 0.0 && rb > 0.0) {
        return Err(Error::InvalidArgument(
            "frame rates must be positive".into(),
        ));
    }
    let b = if let Some(1) = integer_ratio(ra, rb) {
        b.clone()
    } else if let Some(f) = integer_ratio(rb, ra) {
        b.mean_pooled(f)?
    } else if let Some(f) = integer_ratio(ra, rb) {
        b.repeated(f)
    } else {
        return Err(Error::NonIntegerRateRatio(ra, rb));
    };
    let t = a.frames.min(b.frames);
    Ok((a.trimmed(t), b.trimmed(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, amp: f32, len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin() as f32)
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn naive_dft(x: &[f64]) -> Vec<Complex<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                        Complex::new(v * ang.cos(), v * ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn stft_shapes_and_zero() {
        let z = Waveform::zeros(512, 16_000);
        let s = stft(&z, 512, 160).unwrap();
        assert_eq!((s.frames, s.bins), (1, 257));
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
        assert_eq!(
            stft(&Waveform::zeros(16_000, 16_000), 512, 160)
                .unwrap()
                .frames,
            97
        );
        assert!(matches!(
            stft(&Waveform::zeros(100, 16_000), 512, 160),
            Err(Error::TooShort { .. })
        ));
        assert!(stft(&z, 500, 160).is_err());
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let n_fft = 256;
        let k = 20;
        let w = sine(k as f64 * 16_000.0 / n_fft as f64, 0.5, 1024);
        let s = stft(&w, n_fft, 64).unwrap();
        let win = hann_window(n_fft);
        for t in 0..s.frames {
            let row = s.row(t);
            let argmax = (0..s.bins)
                .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
                .unwrap();
            assert_eq!(argmax, k);
            let frame: Vec<f64> = w.samples[t * 64..t * 64 + n_fft]
                .iter()
                .zip(&win)
                .map(|(&x, h)| x as f64 * h)
                .collect();
            let oracle = naive_dft(&frame);
            for b in 0..s.bins {
                assert!((oracle[b] - row[b]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn log_mel_floor_and_peak_band() {
        let cfg = MelConfig::default();
        let z = log_mel(&Waveform::zeros(16_000, 16_000), &cfg).unwrap();
        assert_eq!((z.frames, z.dim, z.frame_rate_hz), (97, 80, 100.0));
        assert!(z.values.iter().all(|&v| v == (1e-10f64).ln() as f32));

        let fb = MelFilterbank::new(16_000, &cfg).unwrap();
        let nearest = (0..80)
            .min_by(|&a, &b| {
                (fb.centers_hz[a] - 1000.0)
                    .abs()
                    .total_cmp(&(fb.centers_hz[b] - 1000.0).abs())
            })
            .unwrap();
        let m = log_mel(&sine(1000.0, 0.5, 8000), &cfg).unwrap();
        for t in 0..m.frames {
            let row = m.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn log_mel_amplitude_doubling_adds_ln4() {
        let cfg = MelConfig::default();
        let a = log_mel(&sine(440.0, 0.2, 4000), &cfg).unwrap();
        let b = log_mel(&sine(440.0, 0.4, 4000), &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32 + 2.0;
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor {
                assert!((y - x - 4f32.ln()).abs() < 1e-4, "{x} {y}");
            }
        }
    }

    #[test]
    fn mel_rejects_fmax_above_nyquist() {
        let cfg = MelConfig {
            fmax: 9000.0,
            ..Default::default()
        };
        assert!(log_mel(&sine(100.0, 0.1, 1000), &cfg).is_err());
    }

    #[test]
    fn log_mel_hop_shift_covariance() {
        let cfg = MelConfig::default();
        let base = sine(523.0, 0.3, 4000);
        let mut delayed = vec![0.0f32; cfg.hop];
        delayed.extend_from_slice(&base.samples[..4000 - cfg.hop]);
        let a = log_mel(&base, &cfg).unwrap();
        let b = log_mel(&Waveform::new(delayed, 16_000).unwrap(), &cfg).unwrap();
        for t in 1..a.frames - 1 {
            for (x, y) in a.row(t - 1).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-6 * x.abs().max(1.0));
            }
        }
    }

    fn fm(frames: usize, rate: f64) -> FeatureMatrix {
        let values = (0..frames * 2).map(|v| v as f32).collect();
        FeatureMatrix::new(frames, 2, values, rate).unwrap()
    }

    #[test]
    fn alignment_rules() {
        // b at half of a's rate is repeated up to a's rate
        let (a, b) = align_frames(&fm(10, 100.0), &fm(5, 50.0)).unwrap();
        assert_eq!((a.frames, b.frames, b.frame_rate_hz), (10, 10, 100.0));
        assert_eq!(b.row(1), b.row(0));
        // b at twice a's rate is pooled by 2
        let (a, b) = align_frames(&fm(5, 50.0), &fm(10, 100.0)).unwrap();
        assert_eq!((a.frames, b.frames), (5, 5));
        assert_eq!(b.row(0), &[1.0, 2.0]);
        let (a, b) = align_frames(&fm(7, 100.0), &fm(5, 100.0)).unwrap();
        assert_eq!((a.frames, b.frames), (5, 5));
        let err = align_frames(&fm(7, 100.0), &fm(5, 60.0)).unwrap_err();
        assert!(err.to_string().contains("non-integer rate ratio"));
    }

    #[test]
    fn ceil_pooling_keeps_partial_tail() {
        let p = fm(97, 100.0).mean_pooled_ceil(4).unwrap();
        assert_eq!(p.frames, 25);
        assert_eq!(p.row(24), fm(97, 100.0).row(96));
        assert_eq!(fm(100, 100.0).mean_pooled_ceil(2).unwrap().frames, 50);
    }

    proptest! {
        #[test]
        fn parseval_against_naive_dft(x in prop::collection::vec(-1.0f32..1.0, 64..256)) {
            let n_fft = 64;
            let w = Waveform::new(x.clone(), 16_000).unwrap();
            let s = stft(&w, n_fft, 32).unwrap();
            let win = hann_window(n_fft);
            let mut windowed_energy = 0.0;
            let mut spec_energy = 0.0;
            for t in 0..s.frames {
                let frame: Vec<f64> = x[t * 32..t * 32 + n_fft]
                    .iter().zip(&win).map(|(&v, h)| v as f64 * h).collect();
                windowed_energy += frame.iter().map(|v| v * v).sum::<f64>();
                let full = naive_dft(&frame);
                let row = s.row(t);
                for b in 0..s.bins {
                    prop_assert!((full[b] - row[b]).norm() < 1e-9);
                }
                let edge = row[0].norm_sqr() + row[n_fft / 2].norm_sqr();
                let inner: f64 = row[1..n_fft / 2].iter().map(|c| c.norm_sqr()).sum();
                spec_energy += (edge + 2.0 * inner) / n_fft as f64;
            }
            prop_assert!((spec_energy - windowed_energy).abs() <= 1e-6 * windowed_energy.max(1e-12));
        }
    }
}
