//! Preference objective: margin, loss, gradients, and the combined
//! loss with a length-normalized likelihood term on the preferred response.
//!
//! The loss is `-log sigmoid(margin) = softplus(-margin)` where the margin is
//! `beta * [(policy_pos - ref_pos) - (policy_neg - ref_neg)]`. The first
//! synthesis stage scores the reference on the anchor clip only; that
//! requirement is carried in the types here (`RefContext`) and enforced by
//! `stage1_loss`, so the two scoring regimes cannot be mixed silently.

pub mod toy;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("beta must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("stage-1 loss requires anchor-only reference scores; sample {index} was scored against the full composite")]
    RefContextViolation { index: usize },
    #[error("token_count_pos must be >= 1")]
    ZeroTokenCount,
    #[error("nll_sum_pos must be non-negative and finite, got {0}")]
    BadNll(f64),
    #[error("alpha must be non-negative and finite, got {0}")]
    BadAlpha(f64),
    #[error("token id {token} out of range for vocab_size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("empty response")]
    EmptyResponse,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset stage {found} does not match requested stage {requested}")]
    StageMismatch { requested: String, found: String },
}

/// Which context produced the reference-side scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefContext {
    FullComposite,
    AnchorOnly,
}

/// The four log-probabilities entering one margin, tagged with the context
/// regime the reference scores came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginInputs {
    pub policy_pos: f64,
    pub policy_neg: f64,
    pub ref_pos: f64,
    pub ref_neg: f64,
    pub ref_context: RefContext,
}

impl MarginInputs {
    fn check_finite(&self) -> Result<(), ObjectiveError> {
        if !self.policy_pos.is_finite() {
            return Err(ObjectiveError::NonFinite("policy_pos"));
        }
        if !self.policy_neg.is_finite() {
            return Err(ObjectiveError::NonFinite("policy_neg"));
        }
        if !self.ref_pos.is_finite() {
            return Err(ObjectiveError::NonFinite("ref_pos"));
        }
        if !self.ref_neg.is_finite() {
            return Err(ObjectiveError::NonFinite("ref_neg"));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<(), ObjectiveError> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(ObjectiveError::BadBeta(beta))
    }
}

/// Overflow-free softplus: max(x, 0) + log1p(exp(-|x|)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// beta * [(policy_pos - ref_pos) - (policy_neg - ref_neg)].
pub fn dpo_margin(m: &MarginInputs, beta: f64) -> Result<f64, ObjectiveError> {
    check_beta(beta)?;
    m.check_finite()?;
    Ok(beta * ((m.policy_pos - m.ref_pos) - (m.policy_neg - m.ref_neg)))
}

/// Loss as a function of a precomputed margin. Exposed so callers comparing
/// swapped and negated margins share one code path.
pub fn dpo_loss_from_margin(margin: f64) -> f64 {
    softplus(-margin)
}

/// -log sigmoid(margin): strictly positive, ln 2 at zero margin.
pub fn dpo_loss(m: &MarginInputs, beta: f64) -> Result<f64, ObjectiveError> {
    Ok(dpo_loss_from_margin(dpo_margin(m, beta)?))
}

/// Gradient of `dpo_loss` over the four log-probabilities. The reference
/// model is frozen, so its components are identically zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoGrad {
    pub d_policy_pos: f64,
    pub d_policy_neg: f64,
    pub d_ref_pos: f64,
    pub d_ref_neg: f64,
}

pub fn dpo_loss_grad(m: &MarginInputs, beta: f64) -> Result<DpoGrad, ObjectiveError> {
    let margin = dpo_margin(m, beta)?;
    let s = sigmoid(-margin);
    Ok(DpoGrad {
        d_policy_pos: -beta * s,
        d_policy_neg: beta * s,
        d_ref_pos: 0.0,
        d_ref_neg: 0.0,
    })
}

/// Mean per-sample loss over a batch whose reference scores must all come
/// from anchor-only contexts. Any full-composite element is a contract
/// violation, not a silent fallback to the plain objective.
pub fn stage1_loss(batch: &[MarginInputs], beta: f64) -> Result<f64, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for (index, m) in batch.iter().enumerate() {
        if m.ref_context == RefContext::FullComposite {
            return Err(ObjectiveError::RefContextViolation { index });
        }
    }
    let mut sum = 0.0;
    for m in batch {
        sum += dpo_loss(m, beta)?;
    }
    Ok(sum / batch.len() as f64)
}

/// dpo_part + alpha * (nll_sum_pos / token_count_pos).
pub fn total_loss(
    dpo_part: f64,
    nll_sum_pos: f64,
    token_count_pos: u64,
    alpha: f64,
) -> Result<f64, ObjectiveError> {
    if !dpo_part.is_finite() {
        return Err(ObjectiveError::NonFinite("dpo_part"));
    }
    if !(nll_sum_pos.is_finite() && nll_sum_pos >= 0.0) {
        return Err(ObjectiveError::BadNll(nll_sum_pos));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(ObjectiveError::BadAlpha(alpha));
    }
    if token_count_pos == 0 {
        return Err(ObjectiveError::ZeroTokenCount);
    }
    Ok(dpo_part + alpha * (nll_sum_pos / token_count_pos as f64))
}
