//! Synthetic downscaling world with an explicit conditional precipitation
//! law, plus normalization, augmentation and the dataset directory format.
//!
//! Each sample draws smooth coarse fields (storm, moisture, background and
//! optional distractor channels). Every fine pixel sees the bilinearly
//! interpolated fields plus independent noise, which fixes a [`PixelLaw`]:
//!
//! * `0` with probability `p_dry`,
//! * `LogNormal(μ, σ)` with probability `(1 - p_dry)(1 - q)`,
//! * `LogNormal(μ, σ) · Pareto(scale, α)` with probability `(1 - p_dry)·q`.
//!
//! The CDF of the mixture is closed-form, so conditional quantiles are exact
//! up to the bisection tolerance.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::exec::Exec;
use crate::seed;
use crate::tensor::{bilinear_forward, sigmoid, Tensor};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

pub const FORMAT_VERSION: u32 = 1;

/// Absolute tolerance of [`PixelLaw::quantile`], mm/day.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryLink {
    /// Upper bound on `p_dry`; 0 disables dry pixels.
    pub max_prob: f64,
    pub intercept: f64,
    pub storm: f64,
    pub moisture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyLink {
    pub intercept: f64,
    pub storm: f64,
    pub moisture: f64,
    pub background: f64,
    /// Log-scale standard deviation of the wet body.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeLink {
    /// Upper bound on the extreme-branch probability `q`.
    pub max_prob: f64,
    pub intercept: f64,
    pub storm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    pub alpha: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Coarse grid (rows, cols).
    pub coarse_shape: (usize, usize),
    pub upsample: (usize, usize),
    /// Coarse channels: storm, moisture, background, then distractors.
    pub channels: usize,
    /// Coarse cells per smooth-field lattice cell.
    pub smoothness: usize,
    /// Amplitude of each coarse channel.
    pub amplitude: Vec<f64>,
    pub dry: DryLink,
    pub body: BodyLink,
    pub extreme: ExtremeLink,
    pub tail: TailConfig,
    /// Standard deviation of the per-pixel conditioning noise.
    pub noise: f64,
    pub land_fraction: f64,
    pub test_fraction: f64,
    /// Levels at which oracle quantiles are produced; empty disables them.
    pub oracle_levels: Vec<f64>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            coarse_shape: (12, 12),
            upsample: (4, 4),
            channels: 3,
            smoothness: 4,
            amplitude: vec![1.6, 1.6, 1.0],
            dry: DryLink {
                max_prob: 1.0,
                intercept: 1.0,
                storm: -1.2,
                moisture: -1.5,
            },
            body: BodyLink {
                intercept: 1.0,
                storm: 0.5,
                moisture: 0.3,
                background: 0.1,
                sigma: 0.9,
            },
            extreme: ExtremeLink {
                max_prob: 0.3,
                intercept: -4.0,
                storm: 2.0,
            },
            tail: TailConfig { alpha: 2.0, scale: 3.0 },
            noise: 0.3,
            land_fraction: 0.6,
            test_fraction: 0.2,
            oracle_levels: vec![0.5, 0.95, 0.99, 0.999],
            seed: 11,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DatagenError::Config(m));
        let (h, w) = self.coarse_shape;
        if h == 0 || w == 0 || self.upsample.0 == 0 || self.upsample.1 == 0 {
            return err(format!("empty grid {:?} x {:?}", self.coarse_shape, self.upsample));
        }
        if self.smoothness == 0 || h % self.smoothness != 0 || w % self.smoothness != 0 {
            return err(format!("smoothness {} must divide the coarse shape {:?}", self.smoothness, self.coarse_shape));
        }
        if self.channels == 0 || self.amplitude.len() != self.channels {
            return err(format!("{} amplitudes for {} channels", self.amplitude.len(), self.channels));
        }
        if let Some(c) = self.amplitude.iter().position(|&a| !(a > 0.0)) {
            return Err(DatagenError::Degenerate(format!("channel {c} has zero variance (amplitude {})", self.amplitude[c])));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.dry.max_prob) || !prob(self.extreme.max_prob) {
            return err("probability bounds must lie in [0, 1]".into());
        }
        if !(self.tail.alpha > 1.0) || !(self.tail.scale > 0.0) {
            return err(format!("tail index {} must exceed 1 and scale {} be positive", self.tail.alpha, self.tail.scale));
        }
        if !(self.body.sigma > 0.0) || !(self.noise >= 0.0) {
            return err("body sigma must be positive and noise non-negative".into());
        }
        if !(self.land_fraction > 0.0 && self.land_fraction <= 1.0) || !(0.0..1.0).contains(&self.test_fraction) {
            return err("land fraction must lie in (0, 1] and test fraction in [0, 1)".into());
        }
        let lv = &self.oracle_levels;
        if !lv.iter().all(|&t| t > 0.0 && t < 1.0) || lv.windows(2).any(|p| p[0] >= p[1]) {
            return err(format!("oracle levels {lv:?} must be increasing in (0, 1)"));
        }
        Ok(())
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        (self.coarse_shape.0 * self.upsample.0, self.coarse_shape.1 * self.upsample.1)
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels)
            .map(|c| match c {
                0 => "storm".to_string(),
                1 => "moisture".to_string(),
                2 => "background".to_string(),
                _ => format!("distractor{}", c - 2),
            })
            .collect()
    }

    /// Conditional law of a fine pixel seeing the given (noisy) fields.
    /// `extreme_boost` multiplies the extreme-branch probability.
    pub fn pixel_law(&self, storm: f64, moisture: f64, background: f64, extreme_boost: f64) -> PixelLaw {
        let p_dry = self.dry.max_prob * sigmoid(self.dry.intercept + self.dry.storm * storm + self.dry.moisture * moisture);
        let b = &self.body;
        let mu = b.intercept + b.storm * storm + b.moisture * moisture + b.background * background;
        let q = (self.extreme.max_prob * sigmoid(self.extreme.intercept + self.extreme.storm * storm) * extreme_boost).min(1.0);
        PixelLaw {
            p_dry,
            mu,
            sigma: b.sigma,
            q,
            tail_alpha: self.tail.alpha,
            tail_scale: self.tail.scale,
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Conditional precipitation law of one fine pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelLaw {
    pub p_dry: f64,
    pub mu: f64,
    pub sigma: f64,
    pub q: f64,
    pub tail_alpha: f64,
    pub tail_scale: f64,
}

impl PixelLaw {
    /// `P(LogNormal · Pareto ≤ y)` for `y > 0`.
    fn extreme_cdf(&self, y: f64) -> f64 {
        let (a, s, m) = (self.tail_alpha, self.sigma, self.mu);
        let ly = y.ln();
        let z = (ly - self.tail_scale.ln() - m) / s;
        let log_tail = a * (self.tail_scale.ln() - ly + m) + 0.5 * a * a * s * s;
        let phi_shift = std_normal_cdf(z - a * s);
        let tail = if phi_shift > 0.0 { (log_tail + phi_shift.ln()).exp() } else { 0.0 };
        (std_normal_cdf(z) - tail).clamp(0.0, 1.0)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        if y == 0.0 {
            return self.p_dry;
        }
        let body = std_normal_cdf((y.ln() - self.mu) / self.sigma);
        let extreme = if self.q > 0.0 { self.extreme_cdf(y) } else { 0.0 };
        self.p_dry + (1.0 - self.p_dry) * ((1.0 - self.q) * body + self.q * extreme)
    }

    /// Inverse CDF by bisection to [`ORACLE_TOLERANCE`]; 0 whenever
    /// `τ ≤ p_dry`.
    pub fn quantile(&self, tau: f64) -> f64 {
        if tau <= self.p_dry {
            return 0.0;
        }
        let mut hi = (self.mu + 4.0 * self.sigma).exp().max(1.0);
        let mut guard = 0;
        while self.cdf(hi) < tau && guard < 2000 {
            hi *= 2.0;
            guard += 1;
        }
        let mut lo = 0.0;
        for _ in 0..400 {
            if hi - lo <= ORACLE_TOLERANCE {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Quantiles at increasing levels, forced non-decreasing.
    pub fn quantiles(&self, levels: &[f64]) -> Vec<f64> {
        let mut prev = 0.0f64;
        levels
            .iter()
            .map(|&t| {
                prev = prev.max(self.quantile(t));
                prev
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let branch: f64 = rng.gen();
        let z: f64 = StandardNormal.sample(rng);
        let v: f64 = rng.gen();
        if u < self.p_dry {
            return 0.0;
        }
        let body = (self.mu + self.sigma * z).exp();
        if branch < self.q {
            // Pareto by inversion; 1 - v lies in (0, 1].
            body * self.tail_scale * (1.0 - v).powf(-1.0 / self.tail_alpha)
        } else {
            body
        }
    }
}

/// Per-channel input statistics and log1p-target statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_log_mean: f64,
    pub target_log_std: f64,
}

impl NormStats {
    pub fn normalize_target(&self, y_mm: f64) -> f64 {
        (y_mm.ln_1p() - self.target_log_mean) / self.target_log_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        (z * self.target_log_std + self.target_log_mean).exp_m1()
    }

    pub fn normalize_input(&self, coarse: &Tensor) -> Result<Tensor> {
        let c = self.input_mean.len();
        if coarse.shape().first() != Some(&c) {
            return Err(DatagenError::Format(format!(
                "input has shape {:?}, statistics cover {c} channels",
                coarse.shape()
            )));
        }
        let plane = coarse.numel() / c;
        let data = coarse
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.input_mean[i / plane]) / self.input_std[i / plane])
            .collect();
        Ok(Tensor::new(coarse.shape().to_vec(), data).expect("same shape"))
    }
}

/// One day: coarse predictors, fine target, land mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    /// `[C, H, W]` raw predictor fields.
    pub coarse: Tensor,
    /// Fine-grid target, mm/day.
    pub target: Vec<f64>,
    pub mask: Arc<Vec<f64>>,
    /// `K` planes of conditional quantiles at the world's oracle levels.
    pub oracle: Option<Vec<f64>>,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded partition of `0..n`; each part is returned in ascending order.
    pub fn new(n: usize, test_fraction: f64, world_seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seed::stream(world_seed, &[seed::tag::SPLIT]);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = (n as f64 * test_fraction).round() as usize;
        let mut test = idx[..n_test].to_vec();
        let mut train = idx[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Split { train, test }
    }
}

/// Oracle marginal quantile over a split's land pixel-days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalQuantile {
    pub level: f64,
    pub threshold_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub records: Vec<SampleRecord>,
    pub mask: Arc<Vec<f64>>,
    pub split: Split,
    pub stats: NormStats,
    /// Marginal oracle quantiles over the test split.
    pub oracle_marginal: Vec<MarginalQuantile>,
}

impl Dataset {
    pub fn train(&self) -> Vec<&SampleRecord> {
        self.split.train.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn test(&self) -> Vec<&SampleRecord> {
        self.split.test.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn land_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

/// Values stored on disk are 32-bit; generated fields are rounded to that
/// precision immediately so in-memory and reloaded datasets agree.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn smooth_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, cell: usize) -> Vec<f64> {
    let (lr, lc) = (rows / cell, cols / cell);
    let lattice: Vec<f64> = (0..lr * lc).map(|_| StandardNormal.sample(rng)).collect();
    bilinear_forward(&lattice, 1, lr, lc, cell, cell)
}

/// Land mask from a smooth random field thresholded at the quantile giving
/// the configured land fraction.
pub fn land_mask(cfg: &WorldConfig) -> Vec<f64> {
    let (h, w) = cfg.coarse_shape;
    let (r, s) = cfg.upsample;
    let mut rng = seed::stream(cfg.seed, &[seed::tag::MASK]);
    let coarse = smooth_field(&mut rng, h, w, cfg.smoothness);
    let fine = bilinear_forward(&coarse, 1, h, w, r, s);
    let mut sorted = fine.clone();
    sorted.sort_by(f64::total_cmp);
    let n = fine.len();
    let n_land = ((cfg.land_fraction * n as f64).round() as usize).clamp(1, n);
    let threshold = sorted[n - n_land];
    fine.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
}

/// Draws one sample. Returns the raw coarse fields, the fine target and
/// the per-pixel conditional laws.
pub fn draw_sample(cfg: &WorldConfig, stream: &mut ChaCha8Rng, extreme_boost: f64) -> (Tensor, Vec<f64>, Vec<PixelLaw>) {
    let (h, w) = cfg.coarse_shape;
    let (r, s) = cfg.upsample;
    let mut coarse = Vec::with_capacity(cfg.channels * h * w);
    for c in 0..cfg.channels {
        let f = smooth_field(stream, h, w, cfg.smoothness);
        coarse.extend(f.into_iter().map(|v| f32_round(v * cfg.amplitude[c])));
    }
    let used = cfg.channels.min(3);
    let fine = bilinear_forward(&coarse[..used * h * w], used, h, w, r, s);
    let n = h * r * w * s;
    let mut laws = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for p in 0..n {
        let mut cond = [0.0; 3];
        for (c, v) in cond.iter_mut().enumerate().take(used) {
            let z: f64 = StandardNormal.sample(stream);
            *v = fine[c * n + p] + cfg.noise * z;
        }
        let law = cfg.pixel_law(cond[0], cond[1], cond[2], extreme_boost);
        target.push(f32_round(law.sample(stream)));
        laws.push(law);
    }
    (Tensor::new(vec![cfg.channels, h, w], coarse).expect("shape"), target, laws)
}

fn oracle_planes(laws: &[PixelLaw], levels: &[f64]) -> Vec<f64> {
    let n = laws.len();
    let mut out = vec![0.0; levels.len() * n];
    for (p, law) in laws.iter().enumerate() {
        for (k, q) in law.quantiles(levels).into_iter().enumerate() {
            out[k * n + p] = f32_round(q);
        }
    }
    out
}

/// Regenerates the conditional laws of sample `index`.
pub fn sample_laws(cfg: &WorldConfig, index: usize) -> Vec<PixelLaw> {
    let mut rng = seed::stream(cfg.seed, &[seed::tag::SAMPLE, index as u64]);
    draw_sample(cfg, &mut rng, 1.0).2
}

/// Generates `n` samples; sample `i` uses the stream
/// `mix(mix(seed, SAMPLE), i)` and is independent of every other sample.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, exec: Exec) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(DatagenError::Config("dataset needs at least one sample".into()));
    }
    let mask = Arc::new(land_mask(cfg));
    let levels = cfg.oracle_levels.clone();
    let split = Split::new(n, cfg.test_fraction, cfg.seed);
    let mut is_test = vec![false; n];
    split.test.iter().for_each(|&i| is_test[i] = true);
    let land: Vec<usize> = (0..mask.len()).filter(|&p| mask[p] > 0.0).collect();
    let drawn = exec.map_range(n, |i| {
        let mut rng = seed::stream(cfg.seed, &[seed::tag::SAMPLE, i as u64]);
        let (coarse, target, laws) = draw_sample(cfg, &mut rng, 1.0);
        // Oracle planes are only needed for evaluation.
        let oracle = (is_test[i] && !levels.is_empty()).then(|| oracle_planes(&laws, &levels));
        // A strided subset of test-split laws feeds the marginal thresholds.
        let kept: Vec<PixelLaw> = if is_test[i] {
            land.iter().step_by(MARGINAL_STRIDE).map(|&p| laws[p]).collect()
        } else {
            vec![]
        };
        (
            SampleRecord {
                index: i,
                coarse,
                target,
                mask: mask.clone(),
                oracle,
                synthetic: false,
            },
            kept,
        )
    });
    let mut records = Vec::with_capacity(n);
    let mut marginal_laws = Vec::new();
    for (rec, kept) in drawn {
        records.push(rec);
        marginal_laws.extend(kept);
    }
    let train: Vec<&SampleRecord> = split.train.iter().map(|&i| &records[i]).collect();
    let stats = compute_stats(&train, cfg.channels)?;
    let oracle_marginal = if marginal_laws.is_empty() {
        vec![]
    } else {
        levels
            .iter()
            .map(|&level| MarginalQuantile {
                level,
                threshold_mm: marginal_quantile(&marginal_laws, level),
            })
            .collect()
    };
    Ok(Dataset {
        config: cfg.clone(),
        records,
        mask,
        split,
        stats,
        oracle_marginal,
    })
}

/// Land pixels of each test sample sampled for the marginal thresholds.
const MARGINAL_STRIDE: usize = 7;

/// τ-quantile of the equal-weight mixture of `laws`, by bisection in log
/// space to a relative tolerance of 1e-10.
pub fn marginal_quantile(laws: &[PixelLaw], tau: f64) -> f64 {
    let cdf = |y: f64| laws.iter().map(|l| l.cdf(y)).sum::<f64>() / laws.len() as f64;
    if cdf(0.0) >= tau {
        return 0.0;
    }
    let (mut lo, mut hi) = (1e-6f64, 1.0f64);
    while cdf(hi) < tau && hi < 1e12 {
        lo = hi;
        hi *= 4.0;
    }
    while hi / lo > 1.0 + 1e-10 {
        let mid = (lo * hi).sqrt();
        if cdf(mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Input statistics over all coarse pixels and log1p-target statistics over
/// land pixels of `records`.
pub fn compute_stats(records: &[&SampleRecord], channels: usize) -> Result<NormStats> {
    if records.is_empty() {
        return Err(DatagenError::Degenerate("no training samples for normalization".into()));
    }
    let mut input_mean = vec![0.0; channels];
    let mut input_std = vec![0.0; channels];
    for c in 0..channels {
        let vals = records.iter().flat_map(|r| {
            let plane = r.coarse.numel() / channels;
            r.coarse.data()[c * plane..(c + 1) * plane].iter().copied()
        });
        let (m, s) = mean_std(vals);
        if !(s > 0.0) {
            return Err(DatagenError::Degenerate(format!("input channel {c} has zero variance")));
        }
        input_mean[c] = m;
        input_std[c] = s;
    }
    let logs = records
        .iter()
        .flat_map(|r| r.target.iter().zip(r.mask.iter()).filter(|(_, &m)| m > 0.0).map(|(&y, _)| y.ln_1p()));
    let (target_log_mean, target_log_std) = mean_std(logs);
    if !(target_log_std > 0.0) {
        return Err(DatagenError::Degenerate("log1p target has zero variance".into()));
    }
    Ok(NormStats {
        input_mean,
        input_std,
        target_log_mean,
        target_log_std,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Model-ready sample: normalized input and target plus the physical target.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSample {
    pub index: usize,
    pub input: Tensor,
    pub target: Vec<f64>,
    pub target_mm: Vec<f64>,
    pub mask: Arc<Vec<f64>>,
    pub synthetic: bool,
}

pub fn normalize(records: &[&SampleRecord], stats: &NormStats) -> Result<Vec<NormalizedSample>> {
    records
        .iter()
        .map(|r| {
            Ok(NormalizedSample {
                index: r.index,
                input: stats.normalize_input(&r.coarse)?,
                target: r.target.iter().map(|&y| stats.normalize_target(y)).collect(),
                target_mm: r.target.clone(),
                mask: r.mask.clone(),
                synthetic: r.synthetic,
            })
        })
        .collect()
}

/// Inverse of the target normalization.
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&z| stats.denormalize_target(z)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Synthetic samples as a fraction of the training set.
    pub ratio: f64,
    /// Multiplier on the extreme-branch probability of synthetic days.
    pub boost: f64,
    /// Minimum wet-pixel mean of a synthetic day relative to the training
    /// set's mean wet-day intensity.
    pub min_intensity_ratio: f64,
    pub max_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ratio: 0.0,
            boost: 4.0,
            min_intensity_ratio: 1.03,
            max_attempts: 10_000,
        }
    }
}

/// Rain above this counts as a wet pixel-day, mm/day.
pub const WET_THRESHOLD_MM: f64 = 1.0;

/// Mean intensity over wet land pixel-days.
pub fn wet_intensity<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for r in records {
        for (&y, &m) in r.target.iter().zip(r.mask.iter()) {
            if m > 0.0 && y > WET_THRESHOLD_MM {
                n += 1;
                s += y;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Number of synthetic samples added for `ratio` on `n_train` samples.
pub fn augmentation_count(ratio: f64, n_train: usize) -> usize {
    (ratio * n_train as f64).ceil() as usize
}

/// Draws `⌈ratio·n_train⌉` boosted synthetic days that pass the intensity
/// filter. Synthetic indices continue after the dataset's records.
pub fn inject_augmentation(data: &Dataset, cfg: &AugmentConfig) -> Result<Vec<SampleRecord>> {
    if !(0.0..1.0).contains(&cfg.ratio) {
        return Err(DatagenError::Augment(format!("ratio {} must lie in [0, 1)", cfg.ratio)));
    }
    if !(cfg.boost >= 0.0) {
        return Err(DatagenError::Augment(format!("boost {} must be non-negative", cfg.boost)));
    }
    let train = data.train();
    let count = augmentation_count(cfg.ratio, train.len());
    if count == 0 {
        return Ok(vec![]);
    }
    let floor = cfg.min_intensity_ratio * wet_intensity(train.iter().copied());
    let mut rng = seed::stream(data.config.seed, &[seed::tag::AUGMENT]);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= cfg.max_attempts {
            return Err(DatagenError::Augment(format!(
                "only {} of {count} synthetic days passed the intensity filter in {attempts} attempts",
                out.len()
            )));
        }
        attempts += 1;
        let (coarse, target, _) = draw_sample(&data.config, &mut rng, cfg.boost);
        let rec = SampleRecord {
            index: data.records.len() + out.len(),
            coarse,
            target,
            mask: data.mask.clone(),
            oracle: None,
            synthetic: true,
        };
        if wet_intensity([&rec]) > floor {
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n: usize,
    pub seed: u64,
    /// `[C, H, W]`.
    pub coarse_shape: Vec<usize>,
    /// `[H', W']`.
    pub fine_shape: Vec<usize>,
    pub channel_names: Vec<String>,
    pub land_fraction: f64,
    pub norm_stats: NormStats,
    pub split: Split,
    pub oracle_levels: Vec<f64>,
    pub oracle_marginal: Vec<MarginalQuantile>,
    pub world: WorldConfig,
}

pub fn sample_file(i: usize) -> String {
    format!("sample_{i:06}.bin")
}

pub fn oracle_file(i: usize) -> String {
    format!("oracle_{i:06}.bin")
}

fn write_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Writes the dataset directory. `dir` is created if needed.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &data.config;
    let (h, w) = cfg.coarse_shape;
    let (fh, fw) = cfg.fine_shape();
    for r in &data.records {
        let mut buf = Vec::with_capacity(4 * (r.coarse.numel() + 2 * fh * fw));
        write_f32(&mut buf, r.coarse.data());
        write_f32(&mut buf, &r.target);
        write_f32(&mut buf, &r.mask);
        fs::File::create(dir.join(sample_file(r.index)))?.write_all(&buf)?;
        if let Some(o) = &r.oracle {
            let mut buf = Vec::with_capacity(4 * o.len());
            write_f32(&mut buf, o);
            fs::File::create(dir.join(oracle_file(r.index)))?.write_all(&buf)?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n: data.records.len(),
        seed: cfg.seed,
        coarse_shape: vec![cfg.channels, h, w],
        fine_shape: vec![fh, fw],
        channel_names: cfg.channel_names(),
        land_fraction: data.land_fraction(),
        norm_stats: data.stats.clone(),
        split: data.split.clone(),
        oracle_levels: cfg.oracle_levels.clone(),
        oracle_marginal: data.oracle_marginal.clone(),
        world: cfg.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(DatagenError::Format(format!("unsupported format version {}", m.format_version)));
    }
    if m.coarse_shape.len() != 3 || m.fine_shape.len() != 2 {
        return Err(DatagenError::Format("manifest shapes must be [C,H,W] and [H',W']".into()));
    }
    Ok(m)
}

/// Loads a dataset directory; shapes come from the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let (c, h, w) = (m.coarse_shape[0], m.coarse_shape[1], m.coarse_shape[2]);
    let fine = m.fine_shape[0] * m.fine_shape[1];
    let expected = 4 * (c * h * w + 2 * fine);
    let mut records = Vec::with_capacity(m.n);
    let mut mask: Option<Arc<Vec<f64>>> = None;
    for i in 0..m.n {
        let mut bytes = Vec::with_capacity(expected);
        fs::File::open(dir.join(sample_file(i)))?.read_to_end(&mut bytes)?;
        if bytes.len() != expected {
            return Err(DatagenError::Format(format!(
                "{} has {} bytes, manifest shapes imply {expected}",
                sample_file(i),
                bytes.len()
            )));
        }
        let vals = read_f32(&bytes);
        let coarse = Tensor::new(vec![c, h, w], vals[..c * h * w].to_vec()).expect("shape");
        let target = vals[c * h * w..c * h * w + fine].to_vec();
        let mask_vals = &vals[c * h * w + fine..];
        let shared = match &mask {
            Some(existing) if existing.as_slice() == mask_vals => existing.clone(),
            Some(_) => return Err(DatagenError::Format(format!("{} has a different land mask", sample_file(i)))),
            None => {
                let a = Arc::new(mask_vals.to_vec());
                mask = Some(a.clone());
                a
            }
        };
        let opath = dir.join(oracle_file(i));
        let oracle = if opath.exists() {
            let bytes = fs::read(&opath)?;
            let vals = read_f32(&bytes);
            if vals.len() != m.oracle_levels.len() * fine {
                return Err(DatagenError::Format(format!("{} has the wrong length", oracle_file(i))));
            }
            Some(vals)
        } else {
            None
        };
        records.push(SampleRecord {
            index: i,
            coarse,
            target,
            mask: shared,
            oracle,
            synthetic: false,
        });
    }
    Ok(Dataset {
        config: m.world,
        records,
        mask: mask.ok_or_else(|| DatagenError::Format("dataset has no samples".into()))?,
        split: m.split,
        stats: m.norm_stats,
        oracle_marginal: m.oracle_marginal,
    })
}
