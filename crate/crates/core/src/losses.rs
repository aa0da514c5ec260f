//! Boundary, proposal and regularization losses with gradients.
//!
//! All gradients are with respect to the predicted probabilities. Probabilities
//! are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms; clamped
//! entries receive zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BoundaryScores;
use crate::labels::BoundaryLabels;

pub const PROB_EPS: f64 = 1e-6;

/// Loss weights and label binarization thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the squared parameter norm.
    pub lambda: f64,
    /// Weight of the completeness regression term.
    pub lambda_c: f64,
    pub label_binarize_thresh: f64,
    pub map_binarize_thresh: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2e-4,
            lambda_c: 10.0,
            label_binarize_thresh: 0.5,
            map_binarize_thresh: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(rename = "L_b")]
    pub boundary: f64,
    #[serde(rename = "L_p")]
    pub proposal: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_com")]
    pub com: f64,
    #[serde(rename = "L_norm")]
    pub norm: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.boundary,
            self.proposal,
            self.cls,
            self.com,
            self.norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_lengths(a: usize, b: usize, mask: Option<&[bool]>) -> Result<()> {
    if a != b || mask.is_some_and(|m| m.len() != a) {
        return Err(Error::invalid(format!(
            "length mismatch: predictions {a}, targets {b}{}",
            mask.map(|m| format!(", mask {}", m.len()))
                .unwrap_or_default()
        )));
    }
    Ok(())
}

/// Class-balanced binary logistic loss.
///
/// Targets are binarized at `thresh`; with `n+` positives and `n-` negatives
/// among the `n` unmasked entries, positives are weighted by `n / (2 n+)` and
/// negatives by `n / (2 n-)`. An empty side gets weight zero.
pub fn weighted_logistic_loss(
    probs: &[f64],
    targets: &[f64],
    mask: Option<&[bool]>,
    thresh: f64,
) -> Result<LossGrad> {
    check_lengths(probs.len(), targets.len(), mask)?;
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    let mut n = 0usize;
    let mut n_pos = 0usize;
    for (i, &g) in targets.iter().enumerate() {
        if active(i) {
            n += 1;
            n_pos += usize::from(g > thresh);
        }
    }
    let mut grad = vec![0.0; probs.len()];
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let n_neg = n - n_pos;
    let nf = n as f64;
    let w_pos = if n_pos > 0 {
        nf / (2.0 * n_pos as f64)
    } else {
        0.0
    };
    let w_neg = if n_neg > 0 {
        nf / (2.0 * n_neg as f64)
    } else {
        0.0
    };
    let mut acc = 0.0;
    for (i, (&p, &g)) in probs.iter().zip(targets).enumerate() {
        if !active(i) {
            continue;
        }
        let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = clamped == p;
        if g > thresh {
            acc += w_pos * clamped.ln();
            if inside {
                grad[i] = -w_pos / (nf * p);
            }
        } else {
            acc += w_neg * (1.0 - clamped).ln();
            if inside {
                grad[i] = w_neg / (nf * (1.0 - p));
            }
        }
    }
    Ok(LossGrad {
        value: -acc / nf,
        grad,
    })
}

/// Mean squared error over unmasked entries.
pub fn masked_mse(preds: &[f64], targets: &[f64], mask: Option<&[bool]>) -> Result<LossGrad> {
    check_lengths(preds.len(), targets.len(), mask)?;
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    let n = (0..preds.len()).filter(|&i| active(i)).count();
    let mut grad = vec![0.0; preds.len()];
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let nf = n as f64;
    let mut acc = 0.0;
    for (i, (&p, &g)) in preds.iter().zip(targets).enumerate() {
        if active(i) {
            acc += (p - g) * (p - g);
            grad[i] = 2.0 * (p - g) / nf;
        }
    }
    Ok(LossGrad {
        value: acc / nf,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLoss {
    pub value: f64,
    pub grad_start: Vec<f64>,
    pub grad_end: Vec<f64>,
}

/// Mean of the start and end weighted logistic losses.
pub fn boundary_loss(
    scores: &BoundaryScores,
    labels: &BoundaryLabels,
    mask: Option<&[bool]>,
    thresh: f64,
) -> Result<BoundaryLoss> {
    let start = weighted_logistic_loss(
        scores.start.as_slice().unwrap(),
        labels.start.as_slice().unwrap(),
        mask,
        thresh,
    )?;
    let end = weighted_logistic_loss(
        scores.end.as_slice().unwrap(),
        labels.end.as_slice().unwrap(),
        mask,
        thresh,
    )?;
    Ok(BoundaryLoss {
        value: 0.5 * (start.value + end.value),
        grad_start: start.grad.iter().map(|g| 0.5 * g).collect(),
        grad_end: end.grad.iter().map(|g| 0.5 * g).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLoss {
    pub value: f64,
    pub cls: f64,
    pub com: f64,
    pub grad_cls: Vec<f64>,
    pub grad_com: Vec<f64>,
}

/// `L_cls + lambda_c * L_com` over the unmasked (valid) anchors.
pub fn proposal_loss(
    cls: &[f64],
    com: &[f64],
    targets: &[f64],
    mask: Option<&[bool]>,
    lambda_c: f64,
    thresh: f64,
) -> Result<ProposalLoss> {
    let c = weighted_logistic_loss(cls, targets, mask, thresh)?;
    let m = masked_mse(com, targets, mask)?;
    Ok(ProposalLoss {
        value: c.value + lambda_c * m.value,
        cls: c.value,
        com: m.value,
        grad_cls: c.grad,
        grad_com: m.grad.iter().map(|g| lambda_c * g).collect(),
    })
}

/// `L_b + L_p + lambda * ||theta||^2`.
pub fn total_loss(
    boundary: f64,
    proposal: f64,
    cls: f64,
    com: f64,
    sq_norm: f64,
    lambda: f64,
) -> LossBreakdown {
    LossBreakdown {
        total: boundary + proposal + lambda * sq_norm,
        boundary,
        proposal,
        cls,
        com,
        norm: sq_norm,
    }
}
