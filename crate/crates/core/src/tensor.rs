//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied during a forward pass in
//! order. Calling [`Graph::backward`] on a scalar node replays the record in
//! reverse and leaves `∂loss/∂node` for every node that depends on a leaf.
//! Graphs are built fresh for every forward pass and thrown away afterwards.
//!
//! Spatial tensors are laid out as `[channels, rows, cols]`, row-major, one
//! sample per graph.

use rand::Rng;
use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerState(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient accumulator. The length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::BadShape {
                op,
                shape: self.shape.clone(),
                reason: "expected [channels, rows, cols]",
            }),
        }
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Prelu {
        input: NodeId,
        slope: NodeId,
    },
    Clip {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    Abs(NodeId),
    Maximum(NodeId, NodeId),
    MaxAll {
        input: NodeId,
        argmax: usize,
    },
    Sum(NodeId),
    MaskedMean {
        input: NodeId,
        mask: Vec<f64>,
        count: f64,
    },
    UpsampleBilinear {
        input: NodeId,
        factor_rows: usize,
        factor_cols: usize,
    },
    PixelShuffle {
        input: NodeId,
        rows: usize,
        cols: usize,
    },
    PixelUnshuffle {
        input: NodeId,
        rows: usize,
        cols: usize,
    },
    SpatialDropout {
        input: NodeId,
        scale: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    Channel {
        input: NodeId,
        channel: usize,
    },
    SortChannels {
        input: NodeId,
        perm: Vec<u8>,
    },
    Pinball {
        input: NodeId,
        tau: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source index pairs and weights for half-pixel-centred linear
/// interpolation along one axis.
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Records a differentiable input (parameter or probe).
    pub fn leaf(&mut self, mut value: Tensor) -> NodeId {
        value.grad = None;
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient of the last backward pass with respect to `id`. `None` if
    /// the node was not reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient with unreached nodes reported as zeros.
    pub fn grad_or_zero(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    fn binary_same(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data, grad: None }, record, needs))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, record: Op) -> NodeId {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let needs = self.needs(&[a]);
        self.push(Tensor { shape, data, grad: None }, record, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `b`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip { input: a, lo, hi })
    }

    /// Pinball loss applied elementwise to residuals `e = y - q`.
    pub fn pinball(&mut self, residual: NodeId, tau: f64) -> NodeId {
        self.unary(
            residual,
            |e| (tau * e).max((tau - 1.0) * e),
            Op::Pinball {
                input: residual,
                tau,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Largest element, as a scalar.
    pub fn max_all(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (argmax, &v) = t
            .data
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (i, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            })
            .ok_or(TensorError::BadShape {
                op: "max_all",
                shape: t.shape.clone(),
                reason: "empty tensor",
            })?;
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::MaxAll { input: a, argmax }, needs))
    }

    /// Mean of `input` over positions where `mask` is non-zero, weighted by
    /// the mask value. `mask` must match the trailing dimensions of
    /// `input` (it is broadcast over leading ones).
    pub fn masked_mean(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let t = self.value(a);
        if mask.is_empty() || t.numel() % mask.len() != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let reps = t.numel() / mask.len();
        let count = mask.iter().sum::<f64>() * reps as f64;
        if count <= 0.0 {
            return Err(TensorError::BadShape {
                op: "masked_mean",
                shape: t.shape.clone(),
                reason: "mask selects no elements",
            });
        }
        let s: f64 = t
            .data
            .chunks(mask.len())
            .map(|row| row.iter().zip(mask).map(|(x, m)| x * m).sum::<f64>())
            .sum();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::scalar(s / count),
            Op::MaskedMean {
                input: a,
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (&ta.shape[..], &tb.shape[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", ta, tb)),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                let brow = &tb.data[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, grad: None },
            Op::MatMul(a, b),
            needs,
        ))
    }

    /// Same-padded (zero) 2-D convolution. `weight` is
    /// `[out, in, kernel_rows, kernel_cols]` with odd kernel extents; `bias`
    /// is `[out]`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let tx = self.value(x);
        let tw = self.value(weight);
        let (c, h, w) = tx.chw("conv2d")?;
        let (o, kh, kw) = match tw.shape[..] {
            [o, ci, kh, kw] if ci == c => (o, kh, kw),
            _ => return Err(mismatch("conv2d", tx, tw)),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                shape: tw.shape.clone(),
                reason: "same padding needs odd kernel extents",
            });
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape != [o] {
                return Err(mismatch("conv2d bias", tw, tb));
            }
        }
        let mut out = vec![0.0; o * h * w];
        if let Some(b) = bias {
            let tb = &self.value(b).data;
            for (oc, plane) in out.chunks_mut(h * w).enumerate() {
                plane.iter_mut().for_each(|v| *v = tb[oc]);
            }
        }
        conv_forward(&tx.data, &tw.data, &mut out, c, h, w, o, kh, kw);
        let mut ids = vec![x, weight];
        ids.extend(bias);
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor { shape: vec![o, h, w], data: out, grad: None },
            Op::Conv2d { input: x, weight, bias },
            needs,
        ))
    }

    /// Parametric rectifier with one learnable negative slope per channel.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let ts = self.value(slope);
        let (c, h, w) = tx.chw("prelu")?;
        if ts.shape != [c] {
            return Err(mismatch("prelu", tx, ts));
        }
        let data = tx
            .data
            .chunks(h * w)
            .zip(&ts.data)
            .flat_map(|(plane, &a)| plane.iter().map(move |&v| if v > 0.0 { v } else { a * v }))
            .collect();
        let needs = self.needs(&[x, slope]);
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data, grad: None },
            Op::Prelu { input: x, slope },
            needs,
        ))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor_rows: usize, factor_cols: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (c, h, w) = tx.chw("upsample_bilinear")?;
        if factor_rows == 0 || factor_cols == 0 {
            return Err(TensorError::BadShape {
                op: "upsample_bilinear",
                shape: vec![factor_rows, factor_cols],
                reason: "factors must be positive",
            });
        }
        let data = bilinear_forward(&tx.data, c, h, w, factor_rows, factor_cols);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, h * factor_rows, w * factor_cols],
                data,
                grad: None,
            },
            Op::UpsampleBilinear {
                input: x,
                factor_rows,
                factor_cols,
            },
            needs,
        ))
    }

    /// Channel-to-space rearrangement: `[c·r·s, h, w] → [c, h·r, w·s]`.
    pub fn pixel_shuffle(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (cin, h, w) = tx.chw("pixel_shuffle")?;
        if rows == 0 || cols == 0 || cin % (rows * cols) != 0 {
            return Err(TensorError::BadShape {
                op: "pixel_shuffle",
                shape: tx.shape.clone(),
                reason: "channels must be divisible by rows*cols",
            });
        }
        let c = cin / (rows * cols);
        let mut out = vec![0.0; tx.numel()];
        shuffle_copy(&tx.data, &mut out, c, h, w, rows, cols, false);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, h * rows, w * cols],
                data: out,
                grad: None,
            },
            Op::PixelShuffle { input: x, rows, cols },
            needs,
        ))
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (c, hh, ww) = tx.chw("pixel_unshuffle")?;
        if rows == 0 || cols == 0 || hh % rows != 0 || ww % cols != 0 {
            return Err(TensorError::BadShape {
                op: "pixel_unshuffle",
                shape: tx.shape.clone(),
                reason: "spatial extents must be divisible by the factors",
            });
        }
        let (h, w) = (hh / rows, ww / cols);
        let mut out = vec![0.0; tx.numel()];
        shuffle_copy(&tx.data, &mut out, c, h, w, rows, cols, true);
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c * rows * cols, h, w],
                data: out,
                grad: None,
            },
            Op::PixelUnshuffle { input: x, rows, cols },
            needs,
        ))
    }

    /// Zeroes whole channels with probability `rate` and rescales the
    /// survivors by `1/(1-rate)`. With `rng = None` (eval mode) the input is
    /// passed through unchanged and nothing is sampled.
    pub fn spatial_dropout(&mut self, x: NodeId, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<NodeId> {
        let tx = self.value(x);
        let (c, h, w) = tx.chw("spatial_dropout")?;
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadShape {
                op: "spatial_dropout",
                shape: vec![c],
                reason: "rate must lie in [0, 1)",
            });
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx
            .data
            .chunks(h * w)
            .zip(&scale)
            .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data, grad: None },
            Op::SpatialDropout { input: x, scale },
            needs,
        ))
    }

    /// Stacks `[c_i, h, w]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or(TensorError::BadShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs",
        })?);
        let (_, h, w) = first.chw("concat")?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.chw("concat")?;
            if (ph, pw) != (h, w) {
                return Err(mismatch("concat", self.value(parts[0]), t));
            }
            channels += c;
            data.extend_from_slice(&t.data);
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor { shape: vec![channels, h, w], data, grad: None },
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    /// Selects one channel, keeping a channel axis of extent 1.
    pub fn channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let t = self.value(x);
        let (c, h, w) = t.chw("channel")?;
        if channel >= c {
            return Err(TensorError::BadShape {
                op: "channel",
                shape: t.shape.clone(),
                reason: "channel index out of range",
            });
        }
        let data = t.data[channel * h * w..(channel + 1) * h * w].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor { shape: vec![1, h, w], data, grad: None },
            Op::Channel { input: x, channel },
            needs,
        ))
    }

    /// Sorts channels ascending at every pixel. The gradient follows the
    /// permutation chosen in the forward pass.
    pub fn sort_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (c, h, w) = t.chw("sort_channels")?;
        if c > u8::MAX as usize {
            return Err(TensorError::BadShape {
                op: "sort_channels",
                shape: t.shape.clone(),
                reason: "too many channels",
            });
        }
        let hw = h * w;
        let mut data = vec![0.0; t.numel()];
        let mut perm = vec![0u8; t.numel()];
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for p in 0..hw {
            order.clear();
            order.extend(0..c);
            order.sort_by(|&i, &j| t.data[i * hw + p].total_cmp(&t.data[j * hw + p]));
            for (rank, &src) in order.iter().enumerate() {
                data[rank * hw + p] = t.data[src * hw + p];
                perm[rank * hw + p] = src as u8;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data, grad: None },
            Op::SortChannels { input: x, perm },
            needs,
        ))
    }

    /// Per-pixel source channel for each output rank of a sort node,
    /// laid out like the output (`[rank, rows, cols]`).
    pub fn sort_permutation(&self, id: NodeId) -> Option<&[u8]> {
        match &self.nodes[id.0].op {
            Op::SortChannels { perm, .. } => Some(perm),
            _ => None,
        }
    }

    /// Computes `∂loss/∂node` for every node the loss depends on.
    /// Previous gradients are discarded first, so repeated calls agree.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.clone()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(self.grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is cloned out so the accumulators can be borrowed mutably.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(ga) = self.acc(id) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data.clone();
                let vb = self.nodes[b.0].value.data.clone();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).zip(&vb).for_each(|((x, y), v)| *x += y * v);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g).zip(&va).for_each(|((x, y), v)| *x += y * v);
                }
            }
            Op::Maximum(a, b) => {
                let va = self.nodes[a.0].value.data.clone();
                let vb = self.nodes[b.0].value.data.clone();
                if let Some(ga) = self.acc(a) {
                    for (k, x) in ga.iter_mut().enumerate() {
                        if va[k] > vb[k] {
                            *x += g[k];
                        }
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (k, x) in gb.iter_mut().enumerate() {
                        if va[k] <= vb[k] {
                            *x += g[k];
                        }
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Softplus(a) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Abs(a) => {
                let input = self.nodes[a.0].value.data.clone();
                let out = self.nodes[i].value.data.clone();
                let deriv: Box<dyn Fn(f64, f64) -> f64> = match op {
                    Op::Softplus(_) => Box::new(|x, _| sigmoid(x)),
                    Op::Sigmoid(_) => Box::new(|_, y| y * (1.0 - y)),
                    Op::Tanh(_) => Box::new(|_, y| 1.0 - y * y),
                    _ => Box::new(|x, _| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                };
                if let Some(ga) = self.acc(a) {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * deriv(input[k], out[k]);
                    }
                }
            }
            Op::Pinball { input, tau } => {
                let e = self.nodes[input.0].value.data.clone();
                if let Some(ga) = self.acc(input) {
                    for k in 0..ga.len() {
                        if e[k] > 0.0 {
                            ga[k] += g[k] * tau;
                        } else if e[k] < 0.0 {
                            ga[k] += g[k] * (tau - 1.0);
                        }
                    }
                }
            }
            Op::Clip { input, lo, hi } => {
                let x = self.nodes[input.0].value.data.clone();
                if let Some(ga) = self.acc(input) {
                    for k in 0..ga.len() {
                        if x[k] > lo && x[k] < hi {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MaxAll { input, argmax } => {
                if let Some(ga) = self.acc(input) {
                    ga[argmax] += g[0];
                }
            }
            Op::MaskedMean { input, mask, count } => {
                if let Some(ga) = self.acc(input) {
                    let s = g[0] / count;
                    for row in ga.chunks_mut(mask.len()) {
                        row.iter_mut().zip(&mask).for_each(|(x, m)| *x += s * m);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape[0], self.nodes[a.0].value.shape[1]);
                let n = self.nodes[b.0].value.shape[1];
                let va = self.nodes[a.0].value.data.clone();
                let vb = self.nodes[b.0].value.data.clone();
                if let Some(ga) = self.acc(a) {
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] += (0..n).map(|j| g[r * n + j] * vb[p * n + j]).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for r in 0..m {
                        for p in 0..k {
                            let av = va[r * k + p];
                            let grow = &g[r * n..(r + 1) * n];
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(x, y)| *x += av * y);
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let (c, h, w) = {
                    let s = &self.nodes[input.0].value.shape;
                    (s[0], s[1], s[2])
                };
                let (o, kh, kw) = {
                    let s = &self.nodes[weight.0].value.shape;
                    (s[0], s[2], s[3])
                };
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(b) {
                        for (oc, plane) in g.chunks(h * w).enumerate() {
                            gb[oc] += plane.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[weight.0].needs_grad {
                    let x = std::mem::take(&mut self.nodes[input.0].value.data);
                    if let Some(gw) = self.acc(weight) {
                        conv_grad_weight(&x, g, gw, c, h, w, o, kh, kw);
                    }
                    self.nodes[input.0].value.data = x;
                }
                if self.nodes[input.0].needs_grad {
                    let wt = std::mem::take(&mut self.nodes[weight.0].value.data);
                    if let Some(gx) = self.acc(input) {
                        conv_grad_input(&wt, g, gx, c, h, w, o, kh, kw);
                    }
                    self.nodes[weight.0].value.data = wt;
                }
            }
            Op::Prelu { input, slope } => {
                let (c, h, w) = {
                    let s = &self.nodes[input.0].value.shape;
                    (s[0], s[1], s[2])
                };
                let hw = h * w;
                let x = self.nodes[input.0].value.data.clone();
                let a = self.nodes[slope.0].value.data.clone();
                if let Some(gs) = self.acc(slope) {
                    for ch in 0..c {
                        gs[ch] += (0..hw)
                            .filter(|&p| x[ch * hw + p] <= 0.0)
                            .map(|p| g[ch * hw + p] * x[ch * hw + p])
                            .sum::<f64>();
                    }
                }
                if let Some(gx) = self.acc(input) {
                    for ch in 0..c {
                        for p in ch * hw..(ch + 1) * hw {
                            gx[p] += if x[p] > 0.0 { g[p] } else { a[ch] * g[p] };
                        }
                    }
                }
            }
            Op::UpsampleBilinear {
                input,
                factor_rows,
                factor_cols,
            } => {
                let (c, h, w) = {
                    let s = &self.nodes[input.0].value.shape;
                    (s[0], s[1], s[2])
                };
                if let Some(gx) = self.acc(input) {
                    bilinear_backward(g, gx, c, h, w, factor_rows, factor_cols);
                }
            }
            Op::PixelShuffle { input, rows, cols } => {
                let s = self.nodes[i].value.shape.clone();
                let (c, h, w) = (s[0], s[1] / rows, s[2] / cols);
                if let Some(gx) = self.acc(input) {
                    let mut tmp = vec![0.0; g.len()];
                    shuffle_copy(g, &mut tmp, c, h, w, rows, cols, true);
                    gx.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                }
            }
            Op::PixelUnshuffle { input, rows, cols } => {
                let s = self.nodes[input.0].value.shape.clone();
                let (c, h, w) = (s[0], s[1] / rows, s[2] / cols);
                if let Some(gx) = self.acc(input) {
                    let mut tmp = vec![0.0; g.len()];
                    shuffle_copy(g, &mut tmp, c, h, w, rows, cols, false);
                    gx.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                }
            }
            Op::SpatialDropout { input, scale } => {
                if let Some(gx) = self.acc(input) {
                    let hw = gx.len() / scale.len();
                    for (k, x) in gx.iter_mut().enumerate() {
                        *x += g[k] * scale[k / hw];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(gp) = self.acc(p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::Channel { input, channel } => {
                let n = g.len();
                if let Some(gx) = self.acc(input) {
                    gx[channel * n..(channel + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::SortChannels { input, perm } => {
                let s = &self.nodes[input.0].value.shape;
                let hw = s[1] * s[2];
                if let Some(gx) = self.acc(input) {
                    for (k, &src) in perm.iter().enumerate() {
                        gx[src as usize * hw + k % hw] += g[k];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &[f64], wt: &[f64], out: &mut [f64], c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    for oc in 0..o {
        let oplane = &mut out[oc * h * w..(oc + 1) * h * w];
        for ic in 0..c {
            let iplane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(w, kx, pw);
                    for y in valid_rows(h, ky, ph) {
                        let iy = y + ky - ph;
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        let irow = &iplane[iy * w + x0 + kx - pw..iy * w + x1 + kx - pw];
                        orow.iter_mut().zip(irow).for_each(|(a, b)| *a += wv * b);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_input(wt: &[f64], g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    for oc in 0..o {
        let gplane = &g[oc * h * w..(oc + 1) * h * w];
        for ic in 0..c {
            let xplane = &mut gx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                    let (x0, x1) = valid_range(w, kx, pw);
                    for y in valid_rows(h, ky, ph) {
                        let iy = y + ky - ph;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let xrow = &mut xplane[iy * w + x0 + kx - pw..iy * w + x1 + kx - pw];
                        xrow.iter_mut().zip(grow).for_each(|(a, b)| *a += wv * b);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_weight(x: &[f64], g: &[f64], gw: &mut [f64], c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    for oc in 0..o {
        let gplane = &g[oc * h * w..(oc + 1) * h * w];
        for ic in 0..c {
            let iplane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let (x0, x1) = valid_range(w, kx, pw);
                    let mut s = 0.0;
                    for y in valid_rows(h, ky, ph) {
                        let iy = y + ky - ph;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let irow = &iplane[iy * w + x0 + kx - pw..iy * w + x1 + kx - pw];
                        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((oc * c + ic) * kh + ky) * kw + kx] += s;
                }
            }
        }
    }
}

/// Output columns `[x0, x1)` whose tap at offset `k` lands inside the input.
fn valid_range(n: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

fn valid_rows(n: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(n, k, pad);
    lo..hi
}

/// Bilinear upsampling of `c` planes of `h×w` by integer factors, with
/// half-pixel alignment and edge clamping.
pub fn bilinear_forward(x: &[f64], c: usize, h: usize, w: usize, fr: usize, fc: usize) -> Vec<f64> {
    let rt = linear_taps(h, fr);
    let ct = linear_taps(w, fc);
    let (oh, ow) = (h * fr, w * fc);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(r0, r1, tr)) in rt.iter().enumerate() {
            for (ox, &(c0, c1, tc)) in ct.iter().enumerate() {
                let top = plane[r0 * w + c0] * (1.0 - tc) + plane[r0 * w + c1] * tc;
                let bot = plane[r1 * w + c0] * (1.0 - tc) + plane[r1 * w + c1] * tc;
                out[ch * oh * ow + oy * ow + ox] = top * (1.0 - tr) + bot * tr;
            }
        }
    }
    out
}

fn bilinear_backward(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, fr: usize, fc: usize) {
    let rt = linear_taps(h, fr);
    let ct = linear_taps(w, fc);
    let (oh, ow) = (h * fr, w * fc);
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(r0, r1, tr)) in rt.iter().enumerate() {
            for (ox, &(c0, c1, tc)) in ct.iter().enumerate() {
                let v = g[ch * oh * ow + oy * ow + ox];
                plane[r0 * w + c0] += v * (1.0 - tr) * (1.0 - tc);
                plane[r0 * w + c1] += v * (1.0 - tr) * tc;
                plane[r1 * w + c0] += v * tr * (1.0 - tc);
                plane[r1 * w + c1] += v * tr * tc;
            }
        }
    }
}

/// Copies between the packed `[c·r·s, h, w]` layout and the spatial
/// `[c, h·r, w·s]` layout. `inverse = false` packs → spatial.
#[allow(clippy::too_many_arguments)]
fn shuffle_copy(src: &[f64], dst: &mut [f64], c: usize, h: usize, w: usize, r: usize, s: usize, inverse: bool) {
    let (oh, ow) = (h * r, w * s);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..s {
                let packed_ch = (ch * r + i) * s + j;
                for y in 0..h {
                    for x in 0..w {
                        let packed = (packed_ch * h + y) * w + x;
                        let spatial = (ch * oh + y * r + i) * ow + x * s + j;
                        if inverse {
                            dst[packed] = src[spatial];
                        } else {
                            dst[spatial] = src[packed];
                        }
                    }
                }
            }
        }
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First/second moment accumulators for a fixed parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Uninitialized state; any step taken with it is rejected.
    pub fn empty(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: vec![],
            second: vec![],
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient; all gradients are zeroed afterwards.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(TensorError::OptimizerState(format!(
            "{} moment slots for {} parameters",
            state.first.len(),
            params.len()
        )));
    }
    for (k, p) in params.iter().enumerate() {
        if state.first[k].len() != p.numel() {
            return Err(TensorError::OptimizerState(format!(
                "parameter {k} has {} elements, moments have {}",
                p.numel(),
                state.first[k].len()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        if let Some(g) = p.grad.as_deref() {
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            }
        } else {
            m.iter_mut().for_each(|x| *x *= beta1);
            v.iter_mut().for_each(|x| *x *= beta2);
        }
        for j in 0..p.data.len() {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] -= lr * mh / (vh.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}
