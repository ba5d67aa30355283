//! Residual super-resolution backbone and its output heads.
//!
//! Coarse input `[C, H, W]` → stem conv → residual blocks (conv, PReLU,
//! spatial dropout, conv) → trunk conv + stem skip → conv to `F·r·s`
//! channels → pixel shuffle `(r, s)` → PReLU, plus a 1×1 projection of the
//! bilinearly upsampled input. The fine-grid features feed one of the heads
//! in [`HeadKind`].

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::NormStats;
use crate::exec::Exec;
use crate::seed;
use crate::stats::empirical_quantile_sorted;
use crate::tensor::{softplus, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match the configured {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("quantile levels must be strictly increasing inside (0, 1): {0:?}")]
    Levels(Vec<f64>),
    #[error("{0}")]
    Inference(String),
    #[error("caps must be non-decreasing in the level and match the output count: {0:?}")]
    Caps(Vec<f64>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Bound applied to the median channel before the increments, in
/// normalized target units.
pub const MEDIAN_BOUND: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: usize,
    pub filters: usize,
    /// Kernel extent of the backbone convolutions.
    pub kernel: usize,
    /// Kernel extent of the output convolutions.
    pub head_kernel: usize,
    /// Upsample factors (rows, cols).
    pub upsample: (usize, usize),
    pub dropout: f64,
    /// Extra conv + PReLU stage in front of the top-level head (separate
    /// heads only).
    pub deep_top_head: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            blocks: 4,
            filters: 32,
            kernel: 3,
            head_kernel: 9,
            upsample: (4, 4),
            dropout: 0.1,
            deep_top_head: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.in_channels == 0 || self.filters == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.upsample.0 == 0 || self.upsample.1 == 0 {
            return Err(ModelError::Config(format!("upsample factors {:?} must be >= 1", self.upsample)));
        }
        if !odd(self.kernel) || !odd(self.head_kernel) {
            return Err(ModelError::Config("kernel extents must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn fine_shape(&self, coarse: (usize, usize)) -> (usize, usize) {
        (coarse.0 * self.upsample.0, coarse.1 * self.upsample.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Single output channel (weighted-MAE baseline).
    Deterministic,
    /// One conv per level, cumulative-softplus bound.
    IncrementSeparate,
    /// Shared K-channel conv, cumulative-softplus bound.
    IncrementShared,
    /// Shared K-channel conv, per-pixel channel sort.
    SharedSorted,
    /// Shared K-channel conv, no ordering constraint.
    SharedUnconstrained,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Deterministic,
        HeadKind::IncrementSeparate,
        HeadKind::IncrementShared,
        HeadKind::SharedSorted,
        HeadKind::SharedUnconstrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Deterministic => "deterministic",
            HeadKind::IncrementSeparate => "increment_separate",
            HeadKind::IncrementShared => "increment_shared",
            HeadKind::SharedSorted => "shared_sorted",
            HeadKind::SharedUnconstrained => "shared_unconstrained",
        }
    }

    pub fn is_quantile(self) -> bool {
        self != HeadKind::Deterministic
    }

    pub fn is_monotone(self) -> bool {
        matches!(
            self,
            HeadKind::IncrementSeparate | HeadKind::IncrementShared | HeadKind::SharedSorted
        )
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown head kind `{s}`")))
    }
}

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        let inside = levels.iter().all(|&t| t > 0.0 && t < 1.0);
        let increasing = levels.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(ModelError::Levels(levels));
        }
        Ok(QuantileLevels(levels))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, tau: f64) -> Option<usize> {
        self.0.iter().position(|&t| (t - tau).abs() < 1e-12)
    }
}

impl Default for QuantileLevels {
    fn default() -> Self {
        QuantileLevels(vec![0.5, 0.95, 0.99, 0.999])
    }
}

impl TryFrom<Vec<f64>> for QuantileLevels {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        QuantileLevels::new(v)
    }
}

impl From<QuantileLevels> for Vec<f64> {
    fn from(l: QuantileLevels) -> Self {
        l.0
    }
}

/// Per-pixel values at each quantile level on the fine grid. Stored as `K`
/// row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePrediction {
    pub levels: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl QuantilePrediction {
    pub fn new(levels: Vec<f64>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != levels.len() * rows * cols {
            return Err(ModelError::Inference(format!(
                "{} values for {} levels on {rows}x{cols}",
                values.len(),
                levels.len()
            )));
        }
        Ok(QuantilePrediction { levels, rows, cols, values })
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn level_by_tau(&self, tau: f64) -> Option<&[f64]> {
        self.levels
            .iter()
            .position(|&t| (t - tau).abs() < 1e-12)
            .map(|k| self.level(k))
    }

    /// True when every pixel's values are non-decreasing in the level.
    pub fn is_monotone(&self) -> bool {
        let n = self.pixels();
        (1..self.levels.len()).all(|k| (0..n).all(|p| self.values[(k - 1) * n + p] <= self.values[k * n + p]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    first: Conv,
    act: usize,
    second: Conv,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: Conv,
    stem_act: usize,
    blocks: Vec<Block>,
    trunk: Conv,
    up: Conv,
    up_act: usize,
    skip: Conv,
    deep_top: Option<(Conv, usize)>,
    /// Per-head 1×1 conv + PReLU stage (separate heads only).
    head_hidden: Vec<(Conv, usize)>,
    heads: Vec<Conv>,
}

/// Parameter specification collected while laying out a model.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    HeNormal { fan_in: usize },
    Zero,
    Const(f64),
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> Conv {
        Conv {
            weight: self.add(format!("{name}.weight"), vec![out, inp, k, k], Init::HeNormal { fan_in: inp * k * k }),
            bias: self.add(format!("{name}.bias"), vec![out], Init::Zero),
        }
    }

    fn prelu(&mut self, name: &str, channels: usize) -> usize {
        self.add(format!("{name}.slope"), vec![channels], Init::Const(0.25))
    }
}

fn layout(cfg: &BackboneConfig, head: HeadKind, k: usize) -> (Layout, Vec<ParamSpec>) {
    let f = cfg.filters;
    let mut b = Builder { specs: vec![] };
    let stem = b.conv("stem", f, cfg.in_channels, cfg.kernel);
    let stem_act = b.prelu("stem", f);
    let blocks = (0..cfg.blocks)
        .map(|i| Block {
            first: b.conv(&format!("block{i}.conv1"), f, f, cfg.kernel),
            act: b.prelu(&format!("block{i}"), f),
            second: b.conv(&format!("block{i}.conv2"), f, f, cfg.kernel),
        })
        .collect();
    let trunk = b.conv("trunk", f, f, cfg.kernel);
    let (r, s) = cfg.upsample;
    let up = b.conv("upsample", f * r * s, f, cfg.kernel);
    let up_act = b.prelu("upsample", f);
    let skip = b.conv("bilinear_skip", f, cfg.in_channels, 1);
    let separate = head == HeadKind::IncrementSeparate;
    let deep_top = (separate && cfg.deep_top_head).then(|| (b.conv("deep_top", f, f, cfg.kernel), b.prelu("deep_top", f)));
    let mut head_hidden = vec![];
    let heads = match head {
        HeadKind::Deterministic => vec![b.conv("head", 1, f, cfg.head_kernel)],
        HeadKind::IncrementSeparate => (0..k)
            .map(|i| {
                head_hidden.push((b.conv(&format!("head{i}.hidden"), f, f, 1), b.prelu(&format!("head{i}.hidden"), f)));
                b.conv(&format!("head{i}"), 1, f, cfg.head_kernel)
            })
            .collect(),
        _ => vec![b.conv("head", k, f, cfg.head_kernel)],
    };
    (
        Layout {
            stem,
            stem_act,
            blocks,
            trunk,
            up,
            up_act,
            skip,
            deep_top,
            head_hidden,
            heads,
        },
        b.specs,
    )
}

/// A built downscaling model: configuration plus flat parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub head: HeadKind,
    pub levels: QuantileLevels,
    pub params: Vec<Tensor>,
    names: Vec<String>,
    layout: Layout,
}

/// Nodes recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[outputs, rows, cols]` after the head transform.
    pub output: NodeId,
    /// Head channels before the monotone transform.
    pub raw: NodeId,
    /// Parameter leaves, in `Model::params` order.
    pub params: Vec<NodeId>,
}

impl Model {
    /// Builds a model with He-normal convolution weights drawn from a stream
    /// derived from `seed`.
    pub fn build(config: BackboneConfig, head: HeadKind, levels: QuantileLevels, seed: u64) -> Result<Self> {
        config.validate()?;
        if head.is_quantile() && levels.is_empty() {
            return Err(ModelError::Config(format!("head `{head}` needs at least one quantile level")));
        }
        let (layout, specs) = layout(&config, head, levels.len());
        let mut rng = seed::stream(seed, &[seed::tag::INIT]);
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::HeNormal { fan_in } => {
                        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Zero => vec![0.0; n],
                    Init::Const(v) => vec![v; n],
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Model {
            config,
            head,
            levels,
            params,
            names,
            layout,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: BackboneConfig, head: HeadKind, levels: QuantileLevels, params: Vec<Tensor>) -> Result<Self> {
        let mut m = Model::build(config, head, levels, 0)?;
        if params.len() != m.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                m.params.len(),
                params.len()
            )));
        }
        for (i, (a, b)) in m.params.iter().zip(&params).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    m.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameter count of each output head (its hidden stage, if any, plus
    /// the output convolution; the optional deep top stage is excluded).
    pub fn head_param_counts(&self) -> Vec<usize> {
        let n = |c: &Conv| self.params[c.weight].numel() + self.params[c.bias].numel();
        self.layout
            .heads
            .iter()
            .enumerate()
            .map(|(k, c)| n(c) + self.layout.head_hidden.get(k).map_or(0, |(h, a)| n(h) + self.params[*a].numel()))
            .collect()
    }

    pub fn outputs(&self) -> usize {
        if self.head.is_quantile() {
            self.levels.len()
        } else {
            1
        }
    }

    /// True when `other` could be an ensemble sibling of `self`.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.config == other.config && self.head == other.head && self.levels == other.levels
    }

    /// Records a forward pass. Passing an RNG enables spatial dropout
    /// (train mode); `None` is eval mode.
    pub fn record(&self, g: &mut Graph, x: &Tensor, mut rng: Option<&mut dyn RngCore>) -> Result<Forward> {
        let c = self.config.in_channels;
        match x.shape() {
            [ci, _, _] if *ci == c => {}
            s => {
                return Err(ModelError::InputShape {
                    expected: vec![c, 0, 0],
                    got: s.to_vec(),
                })
            }
        }
        let p: Vec<NodeId> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        let conv = |g: &mut Graph, x: NodeId, c: Conv| g.conv2d(x, p[c.weight], Some(p[c.bias]));
        let l = &self.layout;
        let input = g.constant(x.clone());

        let stem = conv(g, input, l.stem)?;
        let stem = g.prelu(stem, p[l.stem_act])?;
        let mut h = stem;
        for blk in &l.blocks {
            let y = conv(g, h, blk.first)?;
            let y = g.prelu(y, p[blk.act])?;
            let r: Option<&mut dyn RngCore> = match rng {
                Some(ref mut r) => Some(&mut **r),
                None => None,
            };
            let y = g.spatial_dropout(y, self.config.dropout, r)?;
            let y = conv(g, y, blk.second)?;
            h = g.add(h, y)?;
        }
        let t = conv(g, h, l.trunk)?;
        let t = g.add(t, stem)?;
        let (r, s) = self.config.upsample;
        let u = conv(g, t, l.up)?;
        let u = g.pixel_shuffle(u, r, s)?;
        let u = g.prelu(u, p[l.up_act])?;
        let bl = g.upsample_bilinear(input, r, s)?;
        let bl = conv(g, bl, l.skip)?;
        let feats = g.add(u, bl)?;

        let raw = match self.head {
            HeadKind::IncrementSeparate => {
                let last = l.heads.len() - 1;
                let mut outs = Vec::with_capacity(l.heads.len());
                for (k, hc) in l.heads.iter().enumerate() {
                    let src = match (k == last, l.deep_top) {
                        (true, Some((dc, act))) => {
                            let d = conv(g, feats, dc)?;
                            g.prelu(d, p[act])?
                        }
                        _ => feats,
                    };
                    let (hidden, act) = l.head_hidden[k];
                    let h = conv(g, src, hidden)?;
                    let h = g.prelu(h, p[act])?;
                    outs.push(conv(g, h, *hc)?);
                }
                g.concat(&outs)?
            }
            _ => conv(g, feats, l.heads[0])?,
        };
        let output = match self.head {
            HeadKind::IncrementSeparate | HeadKind::IncrementShared => increment_bound(g, raw)?,
            HeadKind::SharedSorted => sorted_head(g, raw)?,
            HeadKind::Deterministic | HeadKind::SharedUnconstrained => raw,
        };
        Ok(Forward { output, raw, params: p })
    }

    /// Eval-mode output in normalized target space, `outputs()` planes.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.record(&mut g, x, None)?;
        Ok(g.value(f.output).data().to_vec())
    }

    /// Eval-mode prediction wrapped with its levels. Deterministic models
    /// report their single channel at level 0.5.
    pub fn predict_quantiles(&self, x: &Tensor) -> Result<QuantilePrediction> {
        let (rows, cols) = self.config.fine_shape((x.shape()[1], x.shape()[2]));
        let levels = if self.head.is_quantile() {
            self.levels.as_slice().to_vec()
        } else {
            vec![0.5]
        };
        QuantilePrediction::new(levels, rows, cols, self.predict(x)?)
    }
}

/// `q₀ = 8·tanh(r₀/8)`, `q_k = q_{k-1} + softplus(r_k)` along the channel
/// axis of a `[K, rows, cols]` node.
pub fn increment_bound(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let k = g.shape(raw)[0];
    let r0 = g.channel(raw, 0)?;
    let scaled = g.mul_scalar(r0, 1.0 / MEDIAN_BOUND);
    let t = g.tanh(scaled);
    let mut prev = g.mul_scalar(t, MEDIAN_BOUND);
    let mut outs = vec![prev];
    for j in 1..k {
        let rj = g.channel(raw, j)?;
        let inc = g.softplus(rj);
        prev = g.add(prev, inc)?;
        outs.push(prev);
    }
    Ok(g.concat(&outs)?)
}

/// Per-pixel ascending sort of the head channels. The permutation is
/// available through [`Graph::sort_permutation`].
pub fn sorted_head(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    Ok(g.sort_channels(raw)?)
}

/// [`increment_bound`] for one pixel's raw vector.
pub fn increment_bound_pixel(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut prev = 0.0;
    for (k, &r) in raw.iter().enumerate() {
        prev = if k == 0 {
            MEDIAN_BOUND * (r / MEDIAN_BOUND).tanh()
        } else {
            prev + softplus(r)
        };
        out.push(prev);
    }
    out
}

/// Empirical quantiles across `samples` fields (each `pixels` long).
fn pixelwise_quantiles(samples: &[Vec<f64>], levels: &[f64], rows: usize, cols: usize) -> Result<QuantilePrediction> {
    let n = rows * cols;
    let mut values = vec![0.0; levels.len() * n];
    let mut column = Vec::with_capacity(samples.len());
    for p in 0..n {
        column.clear();
        column.extend(samples.iter().map(|s| s[p]));
        column.sort_by(f64::total_cmp);
        for (k, &tau) in levels.iter().enumerate() {
            values[k * n + p] = empirical_quantile_sorted(&column, tau);
        }
    }
    QuantilePrediction::new(levels.to_vec(), rows, cols, values)
}

/// Empirical per-pixel quantiles over `passes` train-mode forward passes.
/// Uses the first output channel of the model.
pub fn mc_dropout_predict(model: &Model, x: &Tensor, passes: usize, levels: &[f64], seed: u64, exec: Exec) -> Result<QuantilePrediction> {
    if passes < 2 {
        return Err(ModelError::Inference(format!("mc dropout needs at least 2 passes, got {passes}")));
    }
    QuantileLevels::new(levels.to_vec())?;
    let (rows, cols) = model.config.fine_shape((x.shape()[1], x.shape()[2]));
    let n = rows * cols;
    let samples = exec
        .map_range(passes, |i| -> Result<Vec<f64>> {
            let mut rng = seed::stream(seed, &[seed::tag::MC, i as u64]);
            let mut g = Graph::new();
            let f = model.record(&mut g, x, Some(&mut rng))?;
            Ok(g.value(f.output).data()[..n].to_vec())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    pixelwise_quantiles(&samples, levels, rows, cols)
}

/// Empirical per-pixel quantiles across ensemble members (first output
/// channel of each).
pub fn ensemble_predict(models: &[Model], x: &Tensor, levels: &[f64], exec: Exec) -> Result<QuantilePrediction> {
    if models.len() < 2 {
        return Err(ModelError::Inference(format!("an ensemble needs at least 2 members, got {}", models.len())));
    }
    if let Some(i) = models.iter().position(|m| !m.same_architecture(&models[0])) {
        return Err(ModelError::Inference(format!("ensemble member {i} has a different configuration")));
    }
    QuantileLevels::new(levels.to_vec())?;
    let (rows, cols) = models[0].config.fine_shape((x.shape()[1], x.shape()[2]));
    let n = rows * cols;
    let samples = exec
        .map(models, |m| m.predict(x).map(|v| v[..n].to_vec()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    pixelwise_quantiles(&samples, levels, rows, cols)
}

/// Physical caps per level: 600 mm/day below τ = 0.99, 1200 mm/day at and
/// above it.
pub fn default_caps(levels: &[f64]) -> Vec<f64> {
    levels.iter().map(|&t| if t < 0.99 { 600.0 } else { 1200.0 }).collect()
}

/// Inverse z-score, `expm1`, then clamp to `[0, cap]`.
pub fn postprocess(pred: &QuantilePrediction, stats: &NormStats, caps: &[f64]) -> Result<QuantilePrediction> {
    if caps.len() != pred.levels.len() || caps.windows(2).any(|w| w[0] > w[1]) {
        return Err(ModelError::Caps(caps.to_vec()));
    }
    let n = pred.pixels();
    let values = pred
        .values
        .iter()
        .enumerate()
        .map(|(i, &z)| stats.denormalize_target(z).clamp(0.0, caps[i / n]))
        .collect();
    QuantilePrediction::new(pred.levels.clone(), pred.rows, pred.cols, values)
}
