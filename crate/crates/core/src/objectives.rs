//! Training losses and the DDI-controlled blend between them.

use std::collections::BTreeSet;

use medrec_tensor::{NodeId, Tape, Tensor};

use crate::config::{HyperParams, PairConvention};
use crate::error::{CoreError, Result};
use crate::metrics::ddi_rate;
use crate::model::prescriber::threshold;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub tau: f64,
    pub rho: f64,
    pub eps: f64,
    /// Decision threshold for the predicted set that drives `λ_DDI`.
    pub threshold: f64,
    pub pairs: PairConvention,
}

impl LossConfig {
    pub fn from_hyper(hp: &HyperParams) -> Self {
        Self {
            lambda_rec: hp.lambda_rec,
            tau: hp.tau,
            rho: hp.rho,
            eps: hp.bce_eps,
            threshold: hp.threshold,
            pairs: hp.ddi_pairs,
        }
    }
}

/// Summed binary cross-entropy over every visit row.
pub fn bce_loss(tape: &mut Tape, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
    Ok(tape.bce_loss(pred, target, eps)?)
}

/// Multi-label margin loss summed over visit rows.
pub fn margin_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    Ok(tape.margin_loss(pred, target)?)
}

/// `Σ_t Σ_{i,j} R[i,j] m̂_t[i] m̂_t[j]`.
pub fn ddi_loss(tape: &mut Tape, pred: NodeId, ddi: NodeId) -> Result<NodeId> {
    Ok(tape.ddi_loss(pred, ddi)?)
}

/// `1` at or below `τ`, then falling linearly to `0` at `τ + ρ`.
pub fn lambda_ddi(delta: f64, tau: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(CoreError::Config(format!("rho must be positive, got {rho}")));
    }
    if delta < 0.0 || tau < 0.0 {
        return Err(CoreError::Config(format!("negative DDI rate {delta} or threshold {tau}")));
    }
    Ok(if delta <= tau { 1.0 } else { (1.0 - (delta - tau) / rho).max(0.0) })
}

/// `λ_DDI (λ_rec L_bce + (1-λ_rec) L_multi) + (1-λ_DDI) L_DDI`.
pub fn total_loss(tape: &mut Tape, parts: &LossNodes, lambda_rec: f64, lambda_ddi: f64) -> Result<NodeId> {
    let b = tape.scale(parts.bce, lambda_ddi * lambda_rec)?;
    let m = tape.scale(parts.margin, lambda_ddi * (1.0 - lambda_rec))?;
    let d = tape.scale(parts.ddi, 1.0 - lambda_ddi)?;
    let s = tape.add(b, m)?;
    Ok(tape.add(s, d)?)
}

/// The same blend on plain values.
pub fn total_value(bce: f64, margin: f64, ddi: f64, lambda_rec: f64, lambda_ddi: f64) -> f64 {
    lambda_ddi * (lambda_rec * bce + (1.0 - lambda_rec) * margin) + (1.0 - lambda_ddi) * ddi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossNodes {
    pub bce: NodeId,
    pub margin: NodeId,
    pub ddi: NodeId,
}

/// Loss components of one step, as recorded in the training log.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub bce: f64,
    pub margin: f64,
    pub ddi: f64,
    pub lambda_ddi: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.bce, self.margin, self.ddi, self.lambda_ddi, self.total].iter().all(|v| v.is_finite())
    }
}

/// Builds the full objective for one visit prediction `pred` (`1 × |M|`).
/// `λ_DDI` follows the DDI rate of the thresholded prediction and carries
/// no gradient.
pub fn visit_objective(
    tape: &mut Tape,
    pred: NodeId,
    truth: &BTreeSet<usize>,
    ddi: &Tensor,
    cfg: &LossConfig,
) -> Result<(NodeId, LossValues)> {
    let [_, m] = tape.shape(pred);
    let target = tape.constant(Tensor::row(crate::cohort::encode_multi_hot(truth, m)?)?);
    let adj = tape.constant(ddi.clone());
    let parts = LossNodes {
        bce: bce_loss(tape, pred, target, cfg.eps)?,
        margin: margin_loss(tape, pred, target)?,
        ddi: ddi_loss(tape, pred, adj)?,
    };
    let set = threshold(tape.value(pred).data(), cfg.threshold)?;
    let delta = ddi_rate(std::slice::from_ref(&set), ddi, cfg.pairs);
    let lam = lambda_ddi(delta, cfg.tau, cfg.rho)?;
    let total = total_loss(tape, &parts, cfg.lambda_rec, lam)?;
    let values = LossValues {
        bce: tape.value(parts.bce).item()?,
        margin: tape.value(parts.margin).item()?,
        ddi: tape.value(parts.ddi).item()?,
        lambda_ddi: lam,
        total: tape.value(total).item()?,
    };
    Ok((total, values))
}
