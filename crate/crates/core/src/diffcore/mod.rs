//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes. Every operation computes its value eagerly and
//! records enough to run its vector-Jacobian product later. [`Graph::backward`] walks the tape in
//! reverse and accumulates parameter gradients into a [`ParamStore`].
//!
//! Tensors are row-major; convolution-style ops use `channels × time` layout.
//!
//! ```
//! use ctxsep::diffcore::{Graph, ParamStore};
//!
//! let mut store = ParamStore::<f64>::new();
//! store.insert("w", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
//! let mut g = Graph::new();
//! let w = g.param(&store, "w").unwrap();
//! let x = g.constant(vec![3], vec![4.0, 5.0, 6.0]);
//! let y = g.mul(w, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get("w").unwrap().grad.as_deref(), Some(&[4.0, 5.0, 6.0][..]));
//! ```

pub mod gradcheck;
pub mod kernels;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};
use crate::exec::Exec;
use kernels::{ConvGeom, ConvTGeom};

/// Floating point types the engine runs on: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + FromPrimitive + Sum + Send + Sync + Debug + Default + 'static {
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_real(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const GLN_EPS: f64 = 1e-8;
pub const SI_SDR_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
}

/// Named model parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        self.params.insert(
            name,
            Param {
                shape,
                value,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Global L2 norm over all populated gradients, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_real();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        norm
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            value: p.value.iter().map(|v| U::lit(v.to_real())).collect(),
                            grad: p
                                .grad
                                .as_ref()
                                .map(|g| g.iter().map(|v| U::lit(v.to_real())).collect()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        geom: ConvTGeom,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Gln {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    NegSiSdr {
        est: Var,
        centered_ref: Vec<T>,
        zero_mean: bool,
    },
    InfoNce {
        pred: Var,
        /// `frames × candidates × dim` unit vectors (positive first).
        cands: Vec<T>,
        n_cands: usize,
        frames: usize,
        temperature: T,
        /// Softmax over candidates per frame.
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
}

/// An eager tape of differentiable operations.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    grad_fault: Option<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            grad_fault: None,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// Test hook: scales every parameter gradient by `factor` during backward.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, factor: T) {
        self.grad_fault = Some(factor);
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "constant shape"
        );
        self.push(value, shape, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.push(
            p.value.clone(),
            p.shape.clone(),
            Op::Param(name.to_string()),
        ))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [c, t] => Ok((*c, *t)),
            s => Err(Error::Shape(format!(
                "{what}: expected 2-D tensor, got {s:?}"
            ))),
        }
    }

    /// Valid-region cross-correlation with optional symmetric zero padding.
    /// `x`: `c_in × t`, `w`: `c_out × c_in × k`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, t_in) = self.dims2(x, "conv1d input")?;
        let (c_out, wc_in, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(Error::Shape(format!(
                    "conv1d weight must be 3-D, got {s:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d: weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if stride == 0 || dilation == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(
                "conv1d: zero stride/dilation/kernel".into(),
            ));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel,
            t_in,
            stride,
            dilation,
            pad,
        };
        let t_out = geom.t_out().ok_or(Error::TooShort {
            len: t_in + 2 * pad,
            need: geom.receptive_field(),
        })?;
        let out = kernels::conv1d_forward(self.value(x), self.value(w), &geom, self.exec);
        Ok(self.push(out, vec![c_out, t_out], Op::Conv1d { x, w, geom }))
    }

    /// Per-channel conv with "same" zero padding for odd kernels. `w`: `c × k`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (c, t_in) = self.dims2(x, "depthwise input")?;
        let (wc, kernel) = self.dims2(w, "depthwise weight")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "depthwise: {wc} kernels for {c} channels"
            )));
        }
        if kernel % 2 == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(
                "depthwise conv needs an odd kernel and positive dilation".into(),
            ));
        }
        let geom = ConvGeom {
            c_in: c,
            c_out: c,
            kernel,
            t_in,
            stride: 1,
            dilation,
            pad: dilation * (kernel - 1) / 2,
        };
        let out = kernels::depthwise_forward(self.value(x), self.value(w), &geom, self.exec);
        Ok(self.push(out, vec![c, t_in], Op::Depthwise { x, w, geom }))
    }

    /// Transposed conv. `x`: `c_in × t`, `w`: `c_in × c_out × k`; output length `(t-1)·stride + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c_in, t_in) = self.dims2(x, "conv_transpose1d input")?;
        let (wc_in, c_out, kernel) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(Error::Shape(format!(
                    "conv_transpose1d weight must be 3-D, got {s:?}"
                )))
            }
        };
        if wc_in != c_in || t_in == 0 || stride == 0 || kernel == 0 {
            return Err(Error::Shape(format!(
                "conv_transpose1d: input {c_in}x{t_in} incompatible with weight {wc_in}x{c_out}x{kernel}"
            )));
        }
        let geom = ConvTGeom {
            c_in,
            c_out,
            kernel,
            t_in,
            stride,
        };
        let out = kernels::conv_transpose_forward(self.value(x), self.value(w), &geom, self.exec);
        Ok(self.push(out, vec![c_out, geom.t_out()], Op::ConvT { x, w, geom }))
    }

    /// Adds `b[c]` to every frame of channel `c`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, t) = self.dims2(x, "add_bias input")?;
        if self.shape(b) != [c] {
            return Err(Error::Shape(format!(
                "bias {:?} for {c} channels",
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (row, &bc) in out.chunks_mut(t).zip(bv) {
            row.iter_mut().for_each(|v| *v = *v + bc);
        }
        Ok(self.push(out, vec![c, t], Op::AddBias { x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Act { x, kind })
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Option<Var>) -> Result<Var> {
        let slope = slope
            .ok_or_else(|| Error::InvalidArgument("prelu requires a slope parameter".into()))?;
        let (c, t) = self.dims2(x, "prelu input")?;
        if self.shape(slope) != [c] {
            return Err(Error::Shape(format!(
                "prelu slope {:?} for {c} channels",
                self.shape(slope)
            )));
        }
        let a = self.value(slope);
        let out = self
            .value(x)
            .chunks(t)
            .zip(a)
            .flat_map(|(row, &ac)| {
                row.iter()
                    .map(move |&v| if v > T::zero() { v } else { ac * v })
            })
            .collect();
        Ok(self.push(out, vec![c, t], Op::Prelu { x, slope }))
    }

    /// Normalises over all `c·t` entries, then applies a per-channel affine map.
    pub fn global_layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (c, t) = self.dims2(x, "gln input")?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(
                "gln gain/bias must have one entry per channel".into(),
            ));
        }
        let xv = self.value(x);
        let n = T::from_usize(c * t).unwrap();
        let mean = xv.iter().copied().sum::<T>() / n;
        let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::lit(GLN_EPS)).sqrt();
        let normed: Vec<T> = xv.iter().map(|&v| (v - mean) * inv_std).collect();
        let (gv, bv) = (self.value(gain), self.value(bias));
        let out = normed
            .chunks(t)
            .enumerate()
            .flat_map(|(ch, row)| row.iter().map(move |&v| v * gv[ch] + bv[ch]))
            .collect();
        Ok(self.push(
            out,
            vec![c, t],
            Op::Gln {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, s))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = self.dims2(x, "slice_rows input")?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {c}",
                start + len
            )));
        }
        let out = self.value(x)[start * t..(start + len) * t].to_vec();
        Ok(self.push(out, vec![len, t], Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![s], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// `Σ w_k · x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("weighted_sum of no terms".into()));
        }
        let mut acc = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum terms must be scalars".into()));
            }
            acc = acc + w * self.scalar(v);
        }
        Ok(self.push(vec![acc], vec![1], Op::WeightedSum(terms.to_vec())))
    }

    /// Negative SI-SDR in dB of `est` against a constant reference of the same length.
    /// With `zero_mean`, both signals are centred first.
    pub fn neg_si_sdr(&mut self, est: Var, reference: &[T], zero_mean: bool) -> Result<Var> {
        let ev = self.value(est);
        if ev.len() != reference.len() {
            return Err(Error::LengthMismatch(ev.len(), reference.len()));
        }
        let centered_ref = center(reference, zero_mean);
        let e = center(ev, zero_mean);
        let value = -si_sdr_core(&e, &centered_ref).value;
        Ok(self.push(
            vec![value],
            vec![1],
            Op::NegSiSdr {
                est,
                centered_ref,
                zero_mean,
            },
        ))
    }

    /// Frame-averaged InfoNCE with cosine similarity.
    ///
    /// `pred` is `dim × t` (channels × frames). `candidates[f]` lists the candidate vectors of
    /// frame `f`, positive first; every frame must have the same number of candidates. Only the
    /// first `candidates.len()` frames of `pred` are scored.
    pub fn info_nce(
        &mut self,
        pred: Var,
        candidates: &[Vec<Vec<T>>],
        temperature: T,
    ) -> Result<Var> {
        let (dim, t) = self.dims2(pred, "info_nce prediction")?;
        let frames = candidates.len();
        if frames == 0 || frames > t {
            return Err(Error::Shape(format!(
                "{frames} candidate frames for {t} predicted frames"
            )));
        }
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        let n_cands = candidates[0].len();
        if n_cands == 0 {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        let eps = T::lit(NORM_EPS);
        let mut cands = Vec::with_capacity(frames * n_cands * dim);
        for frame in candidates {
            if frame.len() != n_cands {
                return Err(Error::Shape("ragged candidate sets".into()));
            }
            for c in frame {
                if c.len() != dim {
                    return Err(Error::Shape(format!(
                        "candidate dim {} vs predicted dim {dim}",
                        c.len()
                    )));
                }
                let norm = c.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                cands.extend(c.iter().map(|&v| v / norm));
            }
        }
        let pv = self.value(pred);
        let mut probs = Vec::with_capacity(frames * n_cands);
        let mut total = T::zero();
        let mut p = vec![T::zero(); dim];
        for f in 0..frames {
            for (d, slot) in p.iter_mut().enumerate() {
                *slot = pv[d * t + f];
            }
            let norm = p.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            let logits: Vec<T> = (0..n_cands)
                .map(|k| {
                    let c = &cands[(f * n_cands + k) * dim..(f * n_cands + k + 1) * dim];
                    p.iter().zip(c).map(|(&a, &b)| a * b).sum::<T>() / norm / temperature
                })
                .collect();
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let z = logits.iter().map(|&l| (l - m).exp()).sum::<T>();
            let lse = m + z.ln();
            total = total + (lse - logits[0]);
            probs.extend(logits.iter().map(|&l| (l - lse).exp()));
        }
        let value = total / T::from_usize(frames).unwrap();
        Ok(self.push(
            vec![value],
            vec![1],
            Op::InfoNce {
                pred,
                cands,
                n_cands,
                frames,
                temperature,
                probs,
            },
        ))
    }

    /// Reverse pass from scalar `loss`; gradients are accumulated into `store`.
    /// Every parameter in `store` ends with a populated gradient (zeros when unreachable).
    /// The tape is consumed.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "non-scalar loss of shape {:?}",
                self.shape(loss)
            )));
        }
        let exec = self.exec;
        let fault = self.grad_fault;
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for (_, p) in store.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![T::zero(); p.value.len()]);
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let p = store
                        .get_mut(name)
                        .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                    let acc = p.grad.as_mut().unwrap();
                    for (a, &g) in acc.iter_mut().zip(&gout) {
                        *a = *a + fault.map_or(g, |f| g * f);
                    }
                }
                Op::Conv1d { x, w, geom } => {
                    let gx = kernels::conv1d_backward_input(&gout, &nodes[w.0].value, geom, exec);
                    let gw = kernels::conv1d_backward_weight(&gout, &nodes[x.0].value, geom, exec);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Depthwise { x, w, geom } => {
                    let (gx, gw) = kernels::depthwise_backward(
                        &gout,
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        geom,
                        exec,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::ConvT { x, w, geom } => {
                    let gx = kernels::conv_transpose_backward_input(
                        &gout,
                        &nodes[w.0].value,
                        geom,
                        exec,
                    );
                    let gw = kernels::conv_transpose_backward_weight(
                        &gout,
                        &nodes[x.0].value,
                        geom,
                        exec,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::AddBias { x, b } => {
                    let t = node.shape[1];
                    let gb = gout
                        .chunks(t)
                        .map(|r| r.iter().copied().sum::<T>())
                        .collect();
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, gout);
                }
                Op::Act { x, kind } => {
                    let out = &node.value;
                    let gx = match kind {
                        Activation::Relu => gout
                            .iter()
                            .zip(out)
                            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => gout
                            .iter()
                            .zip(out)
                            .map(|(&g, &y)| g * y * (T::one() - y))
                            .collect(),
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::Prelu { x, slope } => {
                    let t = node.shape[1];
                    let xv = &nodes[x.0].value;
                    let a = &nodes[slope.0].value;
                    let mut gx = Vec::with_capacity(xv.len());
                    let mut ga = vec![T::zero(); a.len()];
                    for (ch, (grow, xrow)) in gout.chunks(t).zip(xv.chunks(t)).enumerate() {
                        for (&g, &v) in grow.iter().zip(xrow) {
                            if v > T::zero() {
                                gx.push(g);
                            } else {
                                gx.push(g * a[ch]);
                                ga[ch] = ga[ch] + g * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *slope, ga);
                }
                Op::Gln {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let t = node.shape[1];
                    let gv = &nodes[gain.0].value;
                    let n = T::from_usize(normed.len()).unwrap();
                    let mut ggain = vec![T::zero(); gv.len()];
                    let mut gbias = vec![T::zero(); gv.len()];
                    let mut gxhat = Vec::with_capacity(normed.len());
                    for (ch, (grow, nrow)) in gout.chunks(t).zip(normed.chunks(t)).enumerate() {
                        for (&g, &xh) in grow.iter().zip(nrow) {
                            ggain[ch] = ggain[ch] + g * xh;
                            gbias[ch] = gbias[ch] + g;
                            gxhat.push(g * gv[ch]);
                        }
                    }
                    let mean_g = gxhat.iter().copied().sum::<T>() / n;
                    let mean_gx = gxhat.iter().zip(normed).map(|(&g, &xh)| g * xh).sum::<T>() / n;
                    let gx = gxhat
                        .iter()
                        .zip(normed)
                        .map(|(&g, &xh)| *inv_std * (g - mean_g - xh * mean_gx))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Mul(a, b) => {
                    let ga = gout
                        .iter()
                        .zip(&nodes[b.0].value)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    let gb = gout
                        .iter()
                        .zip(&nodes[a.0].value)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let ga = gout.iter().map(|&g| g * *s).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows { x, start } => {
                    let t = node.shape[1];
                    let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                    gx[start * t..start * t + gout.len()].copy_from_slice(&gout);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![gout[0]; n]);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, vec![gout[0] * w]);
                    }
                }
                Op::NegSiSdr {
                    est,
                    centered_ref,
                    zero_mean,
                } => {
                    let e = center(&nodes[est.0].value, *zero_mean);
                    let core = si_sdr_core(&e, centered_ref);
                    let ge = core.grad_wrt_est(&e, centered_ref, -gout[0]);
                    let ge = if *zero_mean { center(&ge, true) } else { ge };
                    accumulate(&mut grads, *est, ge);
                }
                Op::InfoNce {
                    pred,
                    cands,
                    n_cands,
                    frames,
                    temperature,
                    probs,
                } => {
                    let (dim, t) = (nodes[pred.0].shape[0], nodes[pred.0].shape[1]);
                    let pv = &nodes[pred.0].value;
                    let eps = T::lit(NORM_EPS);
                    let scale = gout[0] / T::from_usize(*frames).unwrap() / *temperature;
                    let mut gp = vec![T::zero(); pv.len()];
                    let mut p = vec![T::zero(); dim];
                    let mut acc = vec![T::zero(); dim];
                    for f in 0..*frames {
                        for (d, slot) in p.iter_mut().enumerate() {
                            *slot = pv[d * t + f];
                        }
                        let raw = p.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let clamped = raw < eps;
                        let norm = raw.max(eps);
                        acc.iter_mut().for_each(|v| *v = T::zero());
                        for k in 0..*n_cands {
                            let c = &cands[(f * n_cands + k) * dim..(f * n_cands + k + 1) * dim];
                            let dz =
                                probs[f * n_cands + k] - if k == 0 { T::one() } else { T::zero() };
                            let cos = p.iter().zip(c).map(|(&a, &b)| a * b).sum::<T>() / norm;
                            for d in 0..dim {
                                let dcos = if clamped {
                                    c[d] / norm
                                } else {
                                    (c[d] - cos * p[d] / norm) / norm
                                };
                                acc[d] = acc[d] + dz * dcos;
                            }
                        }
                        for d in 0..dim {
                            gp[d * t + f] = acc[d] * scale;
                        }
                    }
                    accumulate(&mut grads, *pred, gp);
                }
            }
            // Drop intermediate values as soon as nothing later needs them.
            if id != loss.0 {
                nodes[id].value = Vec::new();
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn center<T: Scalar>(x: &[T], zero_mean: bool) -> Vec<T> {
    if !zero_mean || x.is_empty() {
        return x.to_vec();
    }
    let m = x.iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
    x.iter().map(|&v| v - m).collect()
}

struct SiSdrCore<T> {
    value: T,
    alpha: T,
    ref_energy: T,
    target_energy: T,
    noise_energy: T,
}

/// `10·log10((‖αs‖² + ε) / (‖ŝ − αs‖² + ε))` with `α = ⟨ŝ,s⟩ / (‖s‖² + ε)`.
fn si_sdr_core<T: Scalar>(est: &[T], reference: &[T]) -> SiSdrCore<T> {
    let eps = T::lit(SI_SDR_EPS);
    let dot = est.iter().zip(reference).map(|(&a, &b)| a * b).sum::<T>();
    let ref_energy = reference.iter().map(|&v| v * v).sum::<T>();
    let alpha = dot / (ref_energy + eps);
    let target_energy = alpha * alpha * ref_energy;
    let noise_energy = est
        .iter()
        .zip(reference)
        .map(|(&e, &r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum::<T>();
    let ten = T::lit(10.0);
    let value = ten * ((target_energy + eps) / (noise_energy + eps)).log10();
    SiSdrCore {
        value,
        alpha,
        ref_energy,
        target_energy,
        noise_energy,
    }
}

impl<T: Scalar> SiSdrCore<T> {
    /// `upstream · d(value)/d(est)` for centred inputs.
    fn grad_wrt_est(&self, est: &[T], reference: &[T], upstream: T) -> Vec<T> {
        let eps = T::lit(SI_SDR_EPS);
        let two = T::lit(2.0);
        let k = T::lit(10.0 / std::f64::consts::LN_10) * upstream;
        let denom = self.ref_energy + eps;
        let a = self.target_energy + eps;
        let b = self.noise_energy + eps;
        // d‖αs‖²/dŝ = 2α‖s‖²/(‖s‖²+ε) · s
        // d‖ŝ−αs‖²/dŝ = 2ŝ − 2α(2 − ‖s‖²/(‖s‖²+ε)) · s
        let ct = two * self.alpha * self.ref_energy / denom;
        let cn = two * self.alpha * (two - self.ref_energy / denom);
        est.iter()
            .zip(reference)
            .map(|(&e, &r)| k * (ct * r / a - (two * e - cn * r) / b))
            .collect()
    }
}

/// SI-SDR in dB on plain slices, evaluated in f64.
pub fn si_sdr_value(est: &[f64], reference: &[f64], zero_mean: bool) -> f64 {
    let e = center(est, zero_mean);
    let r = center(reference, zero_mean);
    si_sdr_core(&e, &r).value
}
