//! Training objectives: pinball loss with per-quantile event weighting, and
//! the intensity-weighted MAE used by the deterministic baseline.
//!
//! Graph builders return a scalar node for one sample; batch losses are the
//! mean over samples. Land-pixel normalization is per sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("mask selects no land pixels")]
    EmptyMask,
    #[error("exempt level {0} is not among the configured levels")]
    UnknownExemptLevel(f64),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `ρ_τ(e) = max(τe, (τ-1)e)`.
pub fn pinball(residual: f64, tau: f64) -> Result<f64, LossError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::InvalidLevel(tau));
    }
    Ok((tau * residual).max((tau - 1.0) * residual))
}

/// Per-quantile event weighting: upper heads get `1 + α` on pixels whose
/// normalized target exceeds `z_thresh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventWeightConfig {
    pub alpha: f64,
    /// Threshold in log1p z-score units.
    pub z_thresh: f64,
    /// Levels whose weight is always 1.
    pub exempt: Vec<f64>,
}

impl Default for EventWeightConfig {
    fn default() -> Self {
        EventWeightConfig {
            alpha: 5.0,
            z_thresh: 0.5,
            exempt: vec![0.5],
        }
    }
}

impl EventWeightConfig {
    pub fn validate(&self, levels: &[f64]) -> Result<(), LossError> {
        if !(self.alpha >= 0.0) {
            return Err(LossError::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        for &e in &self.exempt {
            if !levels.iter().any(|&l| (l - e).abs() < 1e-12) {
                return Err(LossError::UnknownExemptLevel(e));
            }
        }
        Ok(())
    }

    pub fn is_exempt(&self, tau: f64) -> bool {
        self.exempt.iter().any(|&e| (e - tau).abs() < 1e-12)
    }
}

/// `1 + α·1[y > z_thresh]`, or exactly 1 for exempt levels.
pub fn event_weight(y_normalized: f64, tau: f64, cfg: &EventWeightConfig) -> f64 {
    if cfg.is_exempt(tau) || y_normalized <= cfg.z_thresh {
        1.0
    } else {
        1.0 + cfg.alpha
    }
}

/// `w = clip(y / scale, floor, ceiling)` on the physical target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeWeightConfig {
    /// mm/day.
    pub scale: f64,
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for MaeWeightConfig {
    fn default() -> Self {
        MaeWeightConfig {
            scale: 11.7,
            floor: 0.1,
            ceiling: 2.0,
        }
    }
}

impl MaeWeightConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.scale > 0.0 && self.floor > 0.0 && self.floor < self.ceiling) {
            return Err(LossError::InvalidConfig(format!(
                "need scale > 0 and 0 < floor < ceiling, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn mae_weight(y_mm: f64, cfg: &MaeWeightConfig) -> f64 {
    (y_mm / cfg.scale).clamp(cfg.floor, cfg.ceiling)
}

fn land_count(mask: &[f64]) -> Result<f64, LossError> {
    let n: f64 = mask.iter().sum();
    if n > 0.0 {
        Ok(n)
    } else {
        Err(LossError::EmptyMask)
    }
}

/// Records `Σ_τ (1/N_land) Σ m·w_τ·ρ_τ(y - q̂_τ)` for one sample.
///
/// `pred` is a `[K, rows, cols]` node in normalized target space; `target`
/// holds the normalized target and `mask` the 0/1 land mask, both
/// `rows·cols` long.
pub fn masked_quantile_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    mask: &[f64],
    levels: &[f64],
    cfg: &EventWeightConfig,
) -> Result<NodeId, LossError> {
    for &tau in levels {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(LossError::InvalidLevel(tau));
        }
    }
    land_count(mask)?;
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != levels.len() || shape[1] * shape[2] != target.len() || target.len() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "masked_quantile_loss",
            lhs: shape,
            rhs: vec![levels.len(), target.len(), mask.len()],
        }
        .into());
    }
    let plane = vec![1, shape[1], shape[2]];
    let y = g.constant(Tensor::new(plane.clone(), target.to_vec())?);
    let mut total: Option<NodeId> = None;
    for (k, &tau) in levels.iter().enumerate() {
        let q = g.channel(pred, k)?;
        let e = g.sub(y, q)?;
        let mut r = g.pinball(e, tau);
        if !cfg.is_exempt(tau) {
            let w: Vec<f64> = target.iter().map(|&t| event_weight(t, tau, cfg)).collect();
            let w = g.constant(Tensor::new(plane.clone(), w)?);
            r = g.mul(r, w)?;
        }
        let term = g.masked_mean(r, mask)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(LossError::InvalidConfig("no quantile levels".into()))
}

/// Records the masked mean of `w(y_mm)·|y - ŷ|` for one sample.
///
/// The residual is taken in the model's (normalized) output space; the
/// weight uses the physical target.
pub fn weighted_mae(
    g: &mut Graph,
    pred: NodeId,
    target: &[f64],
    target_mm: &[f64],
    mask: &[f64],
    cfg: &MaeWeightConfig,
) -> Result<NodeId, LossError> {
    land_count(mask)?;
    let shape = g.shape(pred).to_vec();
    if shape.iter().product::<usize>() != target.len() || target.len() != target_mm.len() || target.len() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_mae",
            lhs: shape,
            rhs: vec![target.len(), target_mm.len(), mask.len()],
        }
        .into());
    }
    let y = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let w = target_mm.iter().map(|&v| mae_weight(v, cfg)).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let e = g.sub(y, pred)?;
    let a = g.abs(e);
    let wa = g.mul(a, w)?;
    Ok(g.masked_mean(wa, mask)?)
}

/// Value of [`masked_quantile_loss`] on plain arrays (`pred` is `K` planes).
pub fn quantile_loss_value(
    pred: &[f64],
    target: &[f64],
    mask: &[f64],
    levels: &[f64],
    cfg: &EventWeightConfig,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let hw = target.len();
    let p = g.constant(Tensor::new(vec![levels.len(), 1, hw], pred.to_vec())?);
    let l = masked_quantile_loss(&mut g, p, target, mask, levels, cfg)?;
    Ok(g.value(l).data()[0])
}
