//! Verification scores for point and quantile forecasts on masked grids.
//!
//! Undefined scores (empty denominators, empty bands) are `NaN` and are
//! written as `null` in JSON.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::pinball;
use crate::model::QuantilePrediction;
use crate::stats::median;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("field lengths differ: {0}")]
    Shape(String),
    #[error("no masked values to score")]
    Empty,
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// Serializes `NaN` as `null` and back.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

fn check(pred: usize, obs: usize, mask: usize) -> Result<()> {
    if pred != obs || obs != mask {
        return Err(VerifyError::Shape(format!("pred {pred}, obs {obs}, mask {mask}")));
    }
    Ok(())
}

/// 2×2 counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Hits: forecast and observed above the threshold.
    pub a: u64,
    /// False alarms.
    pub b: u64,
    /// Misses.
    pub c: u64,
    /// Correct rejections.
    pub d: u64,
    pub threshold: f64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

impl Add for ContingencyTable {
    type Output = ContingencyTable;
    fn add(mut self, o: ContingencyTable) -> ContingencyTable {
        self += o;
        self
    }
}

impl AddAssign for ContingencyTable {
    fn add_assign(&mut self, o: ContingencyTable) {
        debug_assert!(self.total() == 0 || o.total() == 0 || self.threshold == o.threshold);
        if self.total() == 0 {
            self.threshold = o.threshold;
        }
        self.a += o.a;
        self.b += o.b;
        self.c += o.c;
        self.d += o.d;
    }
}

/// Counts with strict inequalities `ŷ > T`, `y > T` over masked pixels.
pub fn contingency(pred: &[f64], obs: &[f64], mask: &[f64], threshold: f64) -> Result<ContingencyTable> {
    check(pred.len(), obs.len(), mask.len())?;
    let mut t = ContingencyTable {
        threshold,
        ..Default::default()
    };
    for ((&p, &y), &m) in pred.iter().zip(obs).zip(mask) {
        if m <= 0.0 {
            continue;
        }
        match (p > threshold, y > threshold) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    Ok(t)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// `a / (a + c)`.
pub fn pod(t: &ContingencyTable) -> f64 {
    ratio(t.a, t.a + t.c)
}

/// `b / (a + b)`.
pub fn far(t: &ContingencyTable) -> f64 {
    ratio(t.b, t.a + t.b)
}

/// False-alarm rate `b / (b + d)`.
pub fn false_alarm_rate(t: &ContingencyTable) -> f64 {
    ratio(t.b, t.b + t.d)
}

/// Symmetric extremal dependence index. Hit and false-alarm rates are
/// clamped to `[ε, 1-ε]` with `ε = 1/(2n)` before the logarithms.
pub fn sedi(t: &ContingencyTable) -> f64 {
    if t.a + t.c == 0 || t.b + t.d == 0 {
        return f64::NAN;
    }
    let eps = 0.5 / t.total() as f64;
    let h = pod(t).clamp(eps, 1.0 - eps);
    let f = false_alarm_rate(t).clamp(eps, 1.0 - eps);
    let (lf, lh, l1h, l1f) = (f.ln(), h.ln(), (1.0 - h).ln(), (1.0 - f).ln());
    (lf - lh + l1h - l1f) / (lf + lh + l1h + l1f)
}

/// Histogram bin edges: a zero bin `[0, 0.1]` followed by 50 log-spaced
/// bins over `(0.1, 1200]` mm/day; values above 1200 fall in the last bin.
pub const KL_BINS: usize = 51;
pub const KL_LOW: f64 = 0.1;
pub const KL_HIGH: f64 = 1200.0;
/// Additive smoothing applied to bin probabilities.
pub const KL_EPS: f64 = 1e-6;

pub fn kl_bin(v: f64) -> usize {
    if v <= KL_LOW {
        return 0;
    }
    let frac = (v / KL_LOW).ln() / (KL_HIGH / KL_LOW).ln();
    1 + ((frac * (KL_BINS - 1) as f64).ceil() as usize).saturating_sub(1).min(KL_BINS - 2)
}

pub fn histogram(values: &[f64], mask: &[f64]) -> Vec<u64> {
    let mut h = vec![0u64; KL_BINS];
    for (&v, &m) in values.iter().zip(mask) {
        if m > 0.0 {
            h[kl_bin(v)] += 1;
        }
    }
    h
}

/// `Σ p ln(p/q)` between two count histograms after normalizing each and
/// adding `eps` to every bin probability.
pub fn kl_from_counts(p: &[u64], q: &[u64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(VerifyError::Shape(format!("{} vs {} bins", p.len(), q.len())));
    }
    let (np, nq) = (p.iter().sum::<u64>(), q.iter().sum::<u64>());
    if np == 0 || nq == 0 {
        return Err(VerifyError::Empty);
    }
    let b = p.len() as f64;
    let norm = |c: u64, n: u64| (c as f64 / n as f64 + eps) / (1.0 + b * eps);
    Ok(p.iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            let (pp, qq) = (norm(pc, np), norm(qc, nq));
            pp * (pp / qq).ln()
        })
        .sum())
}

/// KL(observed ‖ predicted) between the masked marginal histograms.
pub fn kl_divergence(pred: &[f64], obs: &[f64], mask: &[f64]) -> Result<f64> {
    check(pred.len(), obs.len(), mask.len())?;
    kl_from_counts(&histogram(obs, mask), &histogram(pred, mask), KL_EPS)
}

/// Observed-intensity band edges for CRPS and sharpness, mm/day.
pub const BAND_EDGES: [f64; 7] = [0.0, 1.0, 10.0, 50.0, 100.0, 200.0, f64::INFINITY];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandValue {
    pub lo: f64,
    #[serde(with = "nan_as_null")]
    pub hi: f64,
    pub count: usize,
    #[serde(with = "nan_as_null")]
    pub value: f64,
}

fn band_of(y: f64, edges: &[f64]) -> Option<usize> {
    edges.windows(2).position(|w| y >= w[0] && y < w[1])
}

fn pinball_unchecked(e: f64, tau: f64) -> f64 {
    (tau * e).max((tau - 1.0) * e)
}

/// Per-pixel `(1/K) Σ_τ ρ_τ(y - q̂_τ)`.
pub fn crps_proxy_pixels(pred: &QuantilePrediction, obs: &[f64]) -> Result<Vec<f64>> {
    if pred.pixels() != obs.len() {
        return Err(VerifyError::Shape(format!("{} pixels vs {} observations", pred.pixels(), obs.len())));
    }
    for &t in &pred.levels {
        pinball(0.0, t).map_err(|e| VerifyError::Invalid(e.to_string()))?;
    }
    let k = pred.levels.len() as f64;
    Ok((0..obs.len())
        .map(|p| {
            pred.levels
                .iter()
                .enumerate()
                .map(|(j, &t)| pinball_unchecked(obs[p] - pred.level(j)[p], t))
                .sum::<f64>()
                / k
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpsReport {
    #[serde(with = "nan_as_null")]
    pub overall: f64,
    pub bands: Vec<BandValue>,
}

/// Masked mean CRPS proxy, overall and per observed-intensity band.
pub fn crps_proxy(pred: &QuantilePrediction, obs: &[f64], mask: &[f64], edges: &[f64]) -> Result<CrpsReport> {
    check(pred.pixels(), obs.len(), mask.len())?;
    if pred.levels.is_empty() {
        return Err(VerifyError::Invalid("no quantile levels".into()));
    }
    let per = crps_proxy_pixels(pred, obs)?;
    let mut sums = vec![(0usize, 0.0); edges.len().saturating_sub(1)];
    let (mut n, mut s) = (0usize, 0.0);
    for p in 0..obs.len() {
        if mask[p] <= 0.0 {
            continue;
        }
        n += 1;
        s += per[p];
        if let Some(b) = band_of(obs[p], edges) {
            sums[b].0 += 1;
            sums[b].1 += per[p];
        }
    }
    if n == 0 {
        return Err(VerifyError::Empty);
    }
    let bands = sums
        .iter()
        .enumerate()
        .map(|(b, &(c, v))| BandValue {
            lo: edges[b],
            hi: edges[b + 1],
            count: c,
            value: if c == 0 { f64::NAN } else { v / c as f64 },
        })
        .collect();
    Ok(CrpsReport {
        overall: s / n as f64,
        bands,
    })
}

/// `(base - aug) / base`.
pub fn crps_skill(base: f64, aug: f64) -> f64 {
    if base == 0.0 {
        f64::NAN
    } else {
        (base - aug) / base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCalibration {
    pub level: f64,
    /// `Pr(y > q̂_τ)` over all masked pixel-days.
    pub exceedance_all: f64,
    /// Same, restricted to wet pixel-days.
    #[serde(with = "nan_as_null")]
    pub exceedance_wet: f64,
    /// `exceedance_all / (1 - τ)`.
    pub ratio_all: f64,
    /// `exceedance_wet / (1 - τ)`.
    #[serde(with = "nan_as_null")]
    pub ratio_wet: f64,
    pub n_all: usize,
    pub n_wet: usize,
}

/// Per-level empirical exceedance and calibration ratio.
pub fn calibration(pred: &QuantilePrediction, obs: &[f64], mask: &[f64], wet_threshold: f64) -> Result<Vec<LevelCalibration>> {
    check(pred.pixels(), obs.len(), mask.len())?;
    let land: Vec<usize> = (0..obs.len()).filter(|&p| mask[p] > 0.0).collect();
    if land.is_empty() {
        return Err(VerifyError::Empty);
    }
    let wet: Vec<usize> = land.iter().copied().filter(|&p| obs[p] > wet_threshold).collect();
    if wet.is_empty() {
        return Err(VerifyError::Invalid("no wet pixel-days".into()));
    }
    Ok(pred
        .levels
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let q = pred.level(k);
            let exceed = |set: &[usize]| set.iter().filter(|&&p| obs[p] > q[p]).count() as f64 / set.len() as f64;
            let (ea, ew) = (exceed(&land), exceed(&wet));
            LevelCalibration {
                level: tau,
                exceedance_all: ea,
                exceedance_wet: ew,
                ratio_all: ea / (1.0 - tau),
                ratio_wet: ew / (1.0 - tau),
                n_all: land.len(),
                n_wet: wet.len(),
            }
        })
        .collect())
}

/// Relative reduction of the calibration gap, `1 - (r_aug - 1)/(r_base - 1)`.
pub fn gap_closure(ratio_base: f64, ratio_aug: f64) -> f64 {
    if ratio_base == 1.0 {
        f64::NAN
    } else {
        1.0 - (ratio_aug - 1.0) / (ratio_base - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalCoverage {
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
    pub nominal: f64,
}

/// Fraction of masked pixel-days with `q̂_lower < y ≤ q̂_upper`.
pub fn interval_coverage(pred: &QuantilePrediction, obs: &[f64], mask: &[f64], lower: f64, upper: f64) -> Result<IntervalCoverage> {
    check(pred.pixels(), obs.len(), mask.len())?;
    if !(lower < upper) {
        return Err(VerifyError::Invalid(format!("lower level {lower} must be below upper {upper}")));
    }
    let lo = pred.level_by_tau(lower).ok_or_else(|| VerifyError::Invalid(format!("level {lower} not predicted")))?;
    let hi = pred.level_by_tau(upper).ok_or_else(|| VerifyError::Invalid(format!("level {upper} not predicted")))?;
    let (mut n, mut inside) = (0usize, 0usize);
    for p in 0..obs.len() {
        if mask[p] > 0.0 {
            n += 1;
            if lo[p] < obs[p] && obs[p] <= hi[p] {
                inside += 1;
            }
        }
    }
    if n == 0 {
        return Err(VerifyError::Empty);
    }
    Ok(IntervalCoverage {
        lower,
        upper,
        coverage: inside as f64 / n as f64,
        nominal: upper - lower,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessBand {
    pub lo: f64,
    #[serde(with = "nan_as_null")]
    pub hi: f64,
    pub count: usize,
    /// Median spread for each requested level pair.
    pub spreads: Vec<SpreadValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadValue {
    pub upper: f64,
    pub lower: f64,
    #[serde(with = "nan_as_null")]
    pub median: f64,
}

/// Level pairs reported by default: P99−P50 and P999−P95.
pub const DEFAULT_SPREADS: [(f64, f64); 2] = [(0.99, 0.5), (0.999, 0.95)];

/// Per-band (lower) medians of `q̂_upper - q̂_lower`, banded by the
/// observed value.
pub fn sharpness(pred: &QuantilePrediction, obs: &[f64], mask: &[f64], edges: &[f64], pairs: &[(f64, f64)]) -> Result<Vec<SharpnessBand>> {
    check(pred.pixels(), obs.len(), mask.len())?;
    if edges.len() < 2 {
        return Err(VerifyError::Invalid("need at least one band".into()));
    }
    let mut planes = Vec::with_capacity(pairs.len());
    for &(u, l) in pairs {
        let up = pred.level_by_tau(u).ok_or_else(|| VerifyError::Invalid(format!("level {u} not predicted")))?;
        let lo = pred.level_by_tau(l).ok_or_else(|| VerifyError::Invalid(format!("level {l} not predicted")))?;
        planes.push((u, l, up, lo));
    }
    let mut members: Vec<Vec<usize>> = vec![vec![]; edges.len() - 1];
    for p in 0..obs.len() {
        if mask[p] > 0.0 {
            if let Some(b) = band_of(obs[p], edges) {
                members[b].push(p);
            }
        }
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(b, idx)| SharpnessBand {
            lo: edges[b],
            hi: edges[b + 1],
            count: idx.len(),
            spreads: planes
                .iter()
                .map(|&(u, l, up, lo)| SpreadValue {
                    upper: u,
                    lower: l,
                    median: if idx.is_empty() {
                        f64::NAN
                    } else {
                        median(&idx.iter().map(|&p| up[p] - lo[p]).collect::<Vec<_>>())
                    },
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bulk {
    pub rmse: f64,
    #[serde(with = "nan_as_null")]
    pub pearson: f64,
}

/// Masked RMSE and Pearson correlation.
pub fn bulk(pred: &[f64], obs: &[f64], mask: &[f64]) -> Result<Bulk> {
    check(pred.len(), obs.len(), mask.len())?;
    let idx: Vec<usize> = (0..obs.len()).filter(|&p| mask[p] > 0.0).collect();
    if idx.is_empty() {
        return Err(VerifyError::Empty);
    }
    let n = idx.len() as f64;
    let mse = idx.iter().map(|&p| (pred[p] - obs[p]).powi(2)).sum::<f64>() / n;
    let mp = idx.iter().map(|&p| pred[p]).sum::<f64>() / n;
    let mo = idx.iter().map(|&p| obs[p]).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &p in &idx {
        let (dx, dy) = (pred[p] - mp, obs[p] - mo);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let pearson = if sxx > 0.0 && syy > 0.0 { sxy / (sxx.sqrt() * syy.sqrt()) } else { f64::NAN };
    Ok(Bulk {
        rmse: mse.sqrt(),
        pearson,
    })
}

/// Contingency scores at one threshold for one output level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    /// Threshold as requested, e.g. `20` or `T999`.
    pub label: String,
    pub threshold_mm: f64,
    /// `None` for a deterministic (single-output) model.
    pub level: Option<f64>,
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
    #[serde(with = "nan_as_null")]
    pub pod: f64,
    #[serde(with = "nan_as_null")]
    pub far: f64,
    #[serde(with = "nan_as_null")]
    pub sedi: f64,
}

impl ThresholdRow {
    pub fn new(label: &str, level: Option<f64>, t: &ContingencyTable) -> Self {
        ThresholdRow {
            label: label.into(),
            threshold_mm: t.threshold,
            level,
            a: t.a,
            b: t.b,
            c: t.c,
            d: t.d,
            pod: pod(t),
            far: far(t),
            sedi: sedi(t),
        }
    }

    pub fn table(&self) -> ContingencyTable {
        ContingencyTable {
            a: self.a,
            b: self.b,
            c: self.c,
            d: self.d,
            threshold: self.threshold_mm,
        }
    }
}

/// Everything `eval` reports for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub head: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_pixels: usize,
    /// On the point prediction, or the τ = 0.5 level.
    pub bulk: Bulk,
    /// KL(observed ‖ predicted) on all-sky land histograms of the point
    /// prediction or the τ = 0.5 level.
    #[serde(with = "nan_as_null")]
    pub kl: f64,
    pub thresholds: Vec<ThresholdRow>,
    pub calibration: Option<Vec<LevelCalibration>>,
    pub interval: Option<IntervalCoverage>,
    pub crps: Option<CrpsReport>,
    pub sharpness: Option<Vec<SharpnessBand>>,
    /// Full configuration that produced the report.
    pub config: serde_json::Value,
}

/// Column order of [`MetricsReport::to_csv`].
pub const CSV_COLUMNS: [&str; 10] = ["label", "threshold_mm", "level", "a", "b", "c", "d", "pod", "far", "sedi"];

fn csv_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl MetricsReport {
    /// One row per (threshold, level); undefined scores are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for r in &self.thresholds {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.threshold_mm,
                r.level.map(|l| l.to_string()).unwrap_or_default(),
                r.a,
                r.b,
                r.c,
                r.d,
                csv_num(r.pod),
                csv_num(r.far),
                csv_num(r.sedi)
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Row for `label` at `level` (`None` for the point prediction).
    pub fn row(&self, label: &str, level: Option<f64>) -> Option<&ThresholdRow> {
        self.thresholds.iter().find(|r| r.label == label && r.level == level)
    }
}
