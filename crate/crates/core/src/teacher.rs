//! Contextual teacher targets: the CTXF container and a seeded mock teacher.
//!
//! CTXF layout (little-endian):
//!
//! ```text
//! magic   "CTXF"     4 bytes
//! version u32        = 1
//! kind    u8         0 = mel, 1 = phoneme, 2 = word
//! rate    f32        frame rate in Hz
//! frames  u32
//! dim     u32
//! id_len  u16, then id_len bytes of UTF-8 utterance id
//! payload frames × dim f32, row-major
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const CTXF_MAGIC: &[u8; 4] = b"CTXF";
pub const CTXF_VERSION: u32 = 1;
pub const DEFAULT_MOCK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Mel,
    Phoneme,
    Word,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 3] = [TeacherKind::Mel, TeacherKind::Phoneme, TeacherKind::Word];

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::Mel => "mel",
            TeacherKind::Phoneme => "phoneme",
            TeacherKind::Word => "word",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TeacherKind::Mel),
            1 => Ok(TeacherKind::Phoneme),
            2 => Ok(TeacherKind::Word),
            other => Err(Error::UnknownKind(format!("code {other}"))),
        }
    }

    /// Frame pooling factor of the mock teacher relative to 100 Hz log-Mel.
    pub fn mock_pool_factor(self) -> usize {
        match self {
            TeacherKind::Mel => 1,
            TeacherKind::Phoneme => 2,
            TeacherKind::Word => 4,
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(TeacherKind::Mel),
            "phoneme" => Ok(TeacherKind::Phoneme),
            "word" => Ok(TeacherKind::Word),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    pub utterance_id: String,
    pub kind: TeacherKind,
    pub features: FeatureMatrix,
}

pub fn encode_ctxf(tf: &TeacherFeatures) -> Result<Vec<u8>> {
    let fm = &tf.features;
    if fm.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("teacher {}", tf.utterance_id)));
    }
    let id = tf.utterance_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidArgument("utterance id longer than 65535 bytes".into()))?;
    let frames = u32::try_from(fm.frames).map_err(|_| Error::Shape("too many frames".into()))?;
    let dim = u32::try_from(fm.dim).map_err(|_| Error::Shape("dim too large".into()))?;
    let mut out = Vec::with_capacity(23 + id.len() + 4 * fm.values.len());
    out.extend_from_slice(CTXF_MAGIC);
    out.extend_from_slice(&CTXF_VERSION.to_le_bytes());
    out.push(tf.kind.code());
    out.extend_from_slice(&(fm.frame_rate_hz as f32).to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for v in &fm.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_ctxf(buf: &[u8]) -> Result<TeacherFeatures> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4).map_err(|_| Error::BadMagic)? != CTXF_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.u32()?;
    if version != CTXF_VERSION {
        return Err(Error::VersionMismatch {
            expected: CTXF_VERSION,
            found: version,
        });
    }
    let kind = TeacherKind::from_code(c.take(1)?[0])?;
    let rate = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
    let frames = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let id_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
    let utterance_id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|_| Error::InvalidArgument("utterance id is not UTF-8".into()))?
        .to_string();
    let count = frames.checked_mul(dim).ok_or(Error::Truncated)?;
    let payload = c.take(count.checked_mul(4).ok_or(Error::Truncated)?)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(TeacherFeatures {
        utterance_id,
        kind,
        features: FeatureMatrix::new(frames, dim, values, rate as f64)?,
    })
}

pub fn write_ctxf(tf: &TeacherFeatures, path: impl AsRef<Path>) -> Result<()> {
    crate::signal::write_file(path.as_ref(), &encode_ctxf(tf)?)
}

pub fn read_ctxf(path: impl AsRef<Path>) -> Result<TeacherFeatures> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ctxf(&buf)
}

/// Seeded `dim_in × dim_out` projection with entries drawn from N(0, 1/dim_in).
fn mock_projection(kind: TeacherKind, dim_in: usize, dim_out: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.code() as u64);
    let normal = Normal::new(0.0, (1.0 / dim_in as f64).sqrt()).unwrap();
    (0..dim_in * dim_out)
        .map(|_| normal.sample(&mut rng))
        .collect()
}

/// Stand-in for self-supervised phoneme/word layers: a frozen random linear projection of
/// log-Mel frames followed by mean pooling (factor 2 for phoneme, 4 for word). A trailing partial
/// pooling window is averaged over the frames it has.
pub fn mock_teacher(
    utterance_id: &str,
    mel: &FeatureMatrix,
    kind: TeacherKind,
    dim_out: usize,
    seed: u64,
) -> Result<TeacherFeatures> {
    if kind == TeacherKind::Mel {
        return Err(Error::InvalidArgument(
            "mock teacher covers phoneme/word; use log_mel for the mel target".into(),
        ));
    }
    if dim_out == 0 {
        return Err(Error::InvalidArgument("dim_out must be positive".into()));
    }
    let proj = mock_projection(kind, mel.dim, dim_out, seed);
    let mut values = vec![0.0f32; mel.frames * dim_out];
    for (t, out) in values.chunks_mut(dim_out).enumerate() {
        let row = mel.row(t);
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (i, &x) in row.iter().enumerate() {
                acc += x as f64 * proj[i * dim_out + j];
            }
            *o = acc as f32;
        }
    }
    let projected = FeatureMatrix::new(mel.frames, dim_out, values, mel.frame_rate_hz)?;
    Ok(TeacherFeatures {
        utterance_id: utterance_id.to_string(),
        kind,
        features: projected.mean_pooled_ceil(kind.mock_pool_factor())?,
    })
}
