//! The masking separator: encoder → context extractor (SIMO) → shared segregator (SISO) →
//! mask → decoder, plus the group-stage teacher predictors and checkpoint I/O.
//!
//! Parameter namespaces:
//!
//! | prefix         | contents                                                     |
//! |----------------|--------------------------------------------------------------|
//! | `encoder/`     | strided conv filterbank (`D × 1 × enc_kernel`)                |
//! | `context/`     | gLN, bottleneck, the first N/2 blocks and the S-way head      |
//! | `segregator/`  | the last N/2 blocks (one copy, shared by every branch) + mask |
//! | `decoder/`     | transposed conv (`D × 1 × enc_kernel`)                        |
//! | `predictor/`   | one strided conv per teacher kind (group stage only)          |
//! | `signal_head/` | temporary mask + decoder for the group-stage signal target    |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::signal::Waveform;
use crate::teacher::TeacherKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockActivation {
    Relu,
    Prelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Total separation blocks; the context extractor and segregator get half each.
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    pub conv_kernel: usize,
    pub dilation_cycle: Vec<usize>,
    pub num_speakers: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub sample_rate_hz: u32,
    pub activation: BlockActivation,
    pub predictor_out_dims: BTreeMap<TeacherKind, usize>,
    pub predictor_stride: BTreeMap<TeacherKind, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            embed_dim: 128,
            bottleneck_dim: 64,
            conv_kernel: 3,
            dilation_cycle: vec![1, 2, 4, 8],
            num_speakers: 2,
            enc_kernel: 32,
            enc_stride: 16,
            sample_rate_hz: 16_000,
            activation: BlockActivation::Relu,
            predictor_out_dims: [
                (TeacherKind::Mel, 80),
                (TeacherKind::Phoneme, 64),
                (TeacherKind::Word, 64),
            ]
            .into(),
            predictor_stride: [
                (TeacherKind::Mel, 10),
                (TeacherKind::Phoneme, 20),
                (TeacherKind::Word, 40),
            ]
            .into(),
        }
    }
}

impl ModelConfig {
    /// Toy-size configuration used by the desk experiments.
    pub fn small() -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            bottleneck_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_blocks == 0 || !self.num_blocks.is_multiple_of(2) {
            return bad("num_blocks must be a positive even number");
        }
        if self.embed_dim == 0 || self.bottleneck_dim == 0 {
            return bad("embed_dim and bottleneck_dim must be positive");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.contains(&0) {
            return bad("dilation_cycle must be non-empty and positive");
        }
        if self.num_speakers < 2 {
            return bad("num_speakers must be at least 2");
        }
        if self.enc_kernel == 0 || self.enc_stride == 0 || self.sample_rate_hz == 0 {
            return bad("encoder kernel, stride and sample rate must be positive");
        }
        for (k, &s) in &self.predictor_stride {
            if s == 0 || self.predictor_out_dims.get(k).copied().unwrap_or(0) == 0 {
                return Err(Error::Config(format!(
                    "predictor for {k} needs a positive stride and dim"
                )));
            }
        }
        Ok(())
    }

    /// Hidden channels inside each separation block.
    pub fn hidden_dim(&self) -> usize {
        2 * self.bottleneck_dim
    }

    pub fn encoder_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.enc_stride as f64
    }

    pub fn predictor_rate_hz(&self, kind: TeacherKind) -> Result<f64> {
        let s = self
            .predictor_stride
            .get(&kind)
            .ok_or_else(|| Error::UnknownKind(kind.to_string()))?;
        Ok(self.encoder_rate_hz() / *s as f64)
    }

    /// Encoder frames for `len` samples.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.enc_kernel).then(|| (len - self.enc_kernel) / self.enc_stride + 1)
    }

    /// Decoder output length for `frames` encoder frames.
    pub fn reconstruction_len(&self, frames: usize) -> usize {
        (frames - 1) * self.enc_stride + self.enc_kernel
    }

    fn dilation(&self, block: usize) -> usize {
        self.dilation_cycle[block % self.dilation_cycle.len()]
    }
}

/// Which optional parameter groups a store holds. Encoder and context are always present.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Components {
    /// `segregator/` and `decoder/`.
    pub separator: bool,
    pub predictors: Vec<TeacherKind>,
    pub signal_head: bool,
}

impl Components {
    pub fn separation() -> Self {
        Self {
            separator: true,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming,
    Zeros,
    Ones,
    Const(f32),
}

fn param_specs(cfg: &ModelConfig, comps: &Components) -> Vec<(String, Vec<usize>, Init)> {
    let (d, b, h, p, s, k) = (
        cfg.embed_dim,
        cfg.bottleneck_dim,
        cfg.hidden_dim(),
        cfg.conv_kernel,
        cfg.num_speakers,
        cfg.enc_kernel,
    );
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| v.push((name, shape, init));
    let block = |add: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        add(format!("{prefix}/in/weight"), vec![h, b, 1], Init::Kaiming);
        add(format!("{prefix}/in/bias"), vec![h], Init::Zeros);
        add(format!("{prefix}/norm1/gain"), vec![h], Init::Ones);
        add(format!("{prefix}/norm1/bias"), vec![h], Init::Zeros);
        add(format!("{prefix}/dw/weight"), vec![h, p], Init::Kaiming);
        add(format!("{prefix}/dw/bias"), vec![h], Init::Zeros);
        add(format!("{prefix}/norm2/gain"), vec![h], Init::Ones);
        add(format!("{prefix}/norm2/bias"), vec![h], Init::Zeros);
        add(format!("{prefix}/out/weight"), vec![b, h, 1], Init::Kaiming);
        add(format!("{prefix}/out/bias"), vec![b], Init::Zeros);
        if cfg.activation == BlockActivation::Prelu {
            add(format!("{prefix}/act1/slope"), vec![h], Init::Const(0.25));
            add(format!("{prefix}/act2/slope"), vec![h], Init::Const(0.25));
        }
    };
    let half = cfg.num_blocks / 2;

    add("encoder/weight".into(), vec![d, 1, k], Init::Kaiming);
    add("context/norm/gain".into(), vec![d], Init::Ones);
    add("context/norm/bias".into(), vec![d], Init::Zeros);
    add(
        "context/bottleneck/weight".into(),
        vec![b, d, 1],
        Init::Kaiming,
    );
    add("context/bottleneck/bias".into(), vec![b], Init::Zeros);
    for i in 0..half {
        block(&mut add, &format!("context/block{i}"));
    }
    add(
        "context/head/weight".into(),
        vec![s * b, b, 1],
        Init::Kaiming,
    );
    add("context/head/bias".into(), vec![s * b], Init::Zeros);

    if comps.separator {
        for i in 0..half {
            block(&mut add, &format!("segregator/block{i}"));
        }
        add(
            "segregator/mask/weight".into(),
            vec![d, b, 1],
            Init::Kaiming,
        );
        add("segregator/mask/bias".into(), vec![d], Init::Zeros);
        add("decoder/weight".into(), vec![d, 1, k], Init::Kaiming);
    }
    for kind in &comps.predictors {
        let dim = cfg.predictor_out_dims.get(kind).copied().unwrap_or(0);
        let stride = cfg.predictor_stride.get(kind).copied().unwrap_or(0);
        add(
            format!("predictor/{kind}/weight"),
            vec![dim, b, stride],
            Init::Kaiming,
        );
        add(format!("predictor/{kind}/bias"), vec![dim], Init::Zeros);
    }
    if comps.signal_head {
        add(
            "signal_head/mask/weight".into(),
            vec![d, b, 1],
            Init::Kaiming,
        );
        add("signal_head/mask/bias".into(), vec![d], Init::Zeros);
        add(
            "signal_head/decoder/weight".into(),
            vec![d, 1, k],
            Init::Kaiming,
        );
    }
    v
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Freshly initialised parameters. Each tensor draws from its own seeded stream keyed by
/// name, so a tensor's initial value does not depend on which other groups are present.
pub fn init_params(cfg: &ModelConfig, comps: &Components, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    for kind in &comps.predictors {
        if !cfg.predictor_out_dims.contains_key(kind) || !cfg.predictor_stride.contains_key(kind) {
            return Err(Error::UnknownKind(format!(
                "no predictor configured for {kind}"
            )));
        }
    }
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(cfg, comps) {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(name_stream(&name));
                (0..n)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect()
            }
        };
        store.insert(name, shape, values)?;
    }
    Ok(store)
}

/// Checks that every tensor `store` has under the given components matches `cfg`'s shapes.
pub fn check_shapes<T: Scalar>(
    cfg: &ModelConfig,
    comps: &Components,
    store: &ParamStore<T>,
) -> Result<()> {
    for (name, shape, _) in param_specs(cfg, comps) {
        match store.get(&name) {
            None => return Err(Error::Shape(format!("checkpoint lacks {name}"))),
            Some(p) if p.shape != shape => {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint shape {:?}, config expects {shape:?}",
                    p.shape
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Graph-building view of a model over a parameter store.
pub struct Model<'a, T: Scalar> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Model<'a, T> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>) -> Self {
        Self { cfg, store }
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        g.param(self.store, name)
    }

    fn conv1x1(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}/weight"))?;
        let b = self.p(g, &format!("{prefix}/bias"))?;
        let y = g.conv1d(x, w, 1, 1, 0)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}/gain"))?;
        let bias = self.p(g, &format!("{prefix}/bias"))?;
        g.global_layer_norm(x, gain, bias)
    }

    fn activate(&self, g: &mut Graph<T>, x: Var, slope: &str) -> Result<Var> {
        match self.cfg.activation {
            BlockActivation::Relu => Ok(g.relu(x)),
            BlockActivation::Prelu => {
                let a = self.p(g, slope)?;
                g.prelu(x, Some(a))
            }
        }
    }

    /// One residual block: 1×1 expand, act, gLN, dilated depthwise conv, act, gLN, 1×1 project.
    fn block(&self, g: &mut Graph<T>, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
        let y = self.conv1x1(g, x, &format!("{prefix}/in"))?;
        let y = self.activate(g, y, &format!("{prefix}/act1/slope"))?;
        let y = self.norm(g, y, &format!("{prefix}/norm1"))?;
        let w = self.p(g, &format!("{prefix}/dw/weight"))?;
        let b = self.p(g, &format!("{prefix}/dw/bias"))?;
        let y = g.depthwise_conv1d(y, w, dilation)?;
        let y = g.add_bias(y, b)?;
        let y = self.activate(g, y, &format!("{prefix}/act2/slope"))?;
        let y = self.norm(g, y, &format!("{prefix}/norm2"))?;
        let y = self.conv1x1(g, y, &format!("{prefix}/out"))?;
        g.add(x, y)
    }

    /// Mixture samples → nonnegative embedding `E_m` of shape `D × T`.
    pub fn encode(&self, g: &mut Graph<T>, x: &[T]) -> Result<Var> {
        if x.len() < self.cfg.enc_kernel {
            return Err(Error::TooShort {
                len: x.len(),
                need: self.cfg.enc_kernel,
            });
        }
        let input = g.constant(vec![1, x.len()], x.to_vec());
        let w = self.p(g, "encoder/weight")?;
        let e = g.conv1d(input, w, self.cfg.enc_stride, 1, 0)?;
        Ok(g.relu(e))
    }

    /// `E_m` → one `B × T` contextual embedding per speaker.
    pub fn extract_context(&self, g: &mut Graph<T>, e: Var) -> Result<Vec<Var>> {
        let y = self.norm(g, e, "context/norm")?;
        let mut y = self.conv1x1(g, y, "context/bottleneck")?;
        for i in 0..self.cfg.num_blocks / 2 {
            y = self.block(g, y, &format!("context/block{i}"), self.cfg.dilation(i))?;
        }
        let heads = self.conv1x1(g, y, "context/head")?;
        let b = self.cfg.bottleneck_dim;
        (0..self.cfg.num_speakers)
            .map(|i| g.slice_rows(heads, i * b, b))
            .collect()
    }

    /// Contextual embedding → predicted teacher frames (`dim × T'`) for `kind`.
    pub fn predict_teacher(&self, g: &mut Graph<T>, c: Var, kind: TeacherKind) -> Result<Var> {
        let stride = *self
            .cfg
            .predictor_stride
            .get(&kind)
            .ok_or_else(|| Error::UnknownKind(kind.to_string()))?;
        let w = self.p(g, &format!("predictor/{kind}/weight"))?;
        let b = self.p(g, &format!("predictor/{kind}/bias"))?;
        let y = g.conv1d(c, w, stride, 1, 0)?;
        g.add_bias(y, b)
    }

    /// Contextual embedding → latent mask in (0, 1), `D × T`. Weights are shared by all branches.
    pub fn segregate(&self, g: &mut Graph<T>, c: Var) -> Result<Var> {
        let half = self.cfg.num_blocks / 2;
        let mut y = c;
        for i in 0..half {
            y = self.block(
                g,
                y,
                &format!("segregator/block{i}"),
                self.cfg.dilation(half + i),
            )?;
        }
        let m = self.conv1x1(g, y, "segregator/mask")?;
        Ok(g.sigmoid(m))
    }

    /// `E_m ⊙ M` through the transposed-conv decoder; returns a `1 × L` waveform node.
    pub fn apply_mask_decode(&self, g: &mut Graph<T>, e: Var, m: Var) -> Result<Var> {
        self.masked_decode(g, e, m, "decoder/weight")
    }

    fn masked_decode(&self, g: &mut Graph<T>, e: Var, m: Var, decoder: &str) -> Result<Var> {
        let masked = g.mul(e, m)?;
        let w = self.p(g, decoder)?;
        g.conv_transpose1d(masked, w, self.cfg.enc_stride)
    }

    /// Group-stage signal path: a temporary mask head on `C_i` and its own decoder.
    pub fn signal_head(&self, g: &mut Graph<T>, e: Var, c: Var) -> Result<Var> {
        let m = self.conv1x1(g, c, "signal_head/mask")?;
        let m = g.sigmoid(m);
        self.masked_decode(g, e, m, "signal_head/decoder/weight")
    }

    /// Full pipeline; one `1 × L` estimate per speaker.
    pub fn forward_separation(&self, g: &mut Graph<T>, x: &[T]) -> Result<Vec<Var>> {
        let e = self.encode(g, x)?;
        let contexts = self.extract_context(g, e)?;
        contexts
            .into_iter()
            .map(|c| {
                let m = self.segregate(g, c)?;
                self.apply_mask_decode(g, e, m)
            })
            .collect()
    }
}

/// Converts a `channels × frames` node value into a `frames × channels` feature matrix.
pub fn to_feature_matrix<T: Scalar>(
    g: &Graph<T>,
    v: Var,
    frame_rate_hz: f64,
) -> Result<FeatureMatrix> {
    let (c, t) = match g.shape(v) {
        [c, t] => (*c, *t),
        s => return Err(Error::Shape(format!("expected 2-D node, got {s:?}"))),
    };
    let src = g.value(v);
    let mut values = vec![0.0f32; c * t];
    for ch in 0..c {
        for f in 0..t {
            values[f * c + ch] = src[ch * t + f].to_real() as f32;
        }
    }
    FeatureMatrix::new(t, c, values, frame_rate_hz)
}

/// A trained separator for inference.
#[derive(Debug, Clone)]
pub struct Separator {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub exec: crate::exec::Exec,
}

impl Separator {
    pub fn new(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        check_shapes(&cfg, &Components::separation(), &params)?;
        Ok(Self {
            cfg,
            params,
            exec: crate::exec::Exec::default(),
        })
    }

    pub fn encode(&self, x: &Waveform) -> Result<FeatureMatrix> {
        let mut g = Graph::with_exec(self.exec);
        let e = Model::new(&self.cfg, &self.params).encode(&mut g, &x.samples)?;
        to_feature_matrix(&g, e, self.cfg.encoder_rate_hz())
    }

    pub fn separate(&self, x: &Waveform) -> Result<Vec<Waveform>> {
        let mut g = Graph::with_exec(self.exec);
        let outs = Model::new(&self.cfg, &self.params).forward_separation(&mut g, &x.samples)?;
        outs.into_iter()
            .map(|v| Waveform::new(g.value(v).to_vec(), x.sample_rate_hz))
            .collect()
    }
}

pub const CAWS_MAGIC: &[u8; 4] = b"CAWS";
pub const CAWS_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CAWS_MAGIC);
    out.extend_from_slice(&CAWS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        let nb = name.as_bytes();
        let len =
            u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument("name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore<f32>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or(Error::Truncated)?;
        pos += n;
        Ok(s)
    };
    if take(4).map_err(|_| Error::BadMagic)? != CAWS_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CAWS_VERSION {
        return Err(Error::VersionMismatch {
            expected: CAWS_VERSION,
            found: version,
        });
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| Error::InvalidArgument("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = take(1)?[0] as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let values = take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(name, shape, values)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(store)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
