//! Training objectives: masked autoregressive text loss, matched-pair
//! segmentation loss (BCE + Dice), per-slot presence loss, and their
//! weighted total.
//!
//! Each objective exists twice: as plain math over tensors (used for
//! reporting and as the analytic reference) and as a tape expression (used
//! for gradients). Both routes share the same underlying formulas.

use serde::Serialize;

use crate::mask::Mask;
use crate::matching::{bce_mean_probs, dice_loss, MatchAssignment, BCE_CLAMP, DICE_EPS};
use crate::net_core::{Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Weights of the total objective and of the segmentation mixture.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossWeights {
    pub text: f64,
    pub seg: f64,
    pub presence: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { text: 1.0, seg: 1.0, presence: 1.0, bce: 2.0, dice: 0.5 }
    }
}

/// Next-token supervision aligned with a block of logit rows.
///
/// `supervised` is 0 exactly at query positions and the mask-end; at least
/// one position must be supervised.
#[derive(Debug, Clone)]
pub struct TextTarget {
    pub targets: Vec<usize>,
    pub supervised: Vec<f64>,
}

impl TextTarget {
    pub fn new(targets: Vec<usize>, supervised: Vec<f64>) -> Result<Self> {
        if targets.len() != supervised.len() {
            return Err(Error::Loss("targets and supervision mask differ in length".into()));
        }
        if !supervised.iter().any(|&m| m > 0.0) {
            return Err(Error::Loss("text target supervises no positions".into()));
        }
        Ok(TextTarget { targets, supervised })
    }

    pub fn supervised_count(&self) -> f64 {
        self.supervised.iter().sum()
    }
}

/// Masked autoregressive loss: `-(sum_i m_i log p(y_i)) / sum_i m_i`.
pub fn text_loss(logits: &Tensor, target: &TextTarget) -> Result<f64> {
    let rows = logits.rows();
    if rows != target.targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            rows,
            target.targets.len()
        )));
    }
    let msum = target.supervised_count();
    if msum <= 0.0 {
        return Err(Error::Loss("text target supervises no positions".into()));
    }
    let mut loss = 0.0;
    for i in 0..rows {
        let m = target.supervised[i];
        if m == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss -= m * (row[target.targets[i]] - lse);
    }
    Ok(loss / msum)
}

/// Segmentation loss over matched pairs, in probability space:
/// `w_bce * mean(BCE) + w_dice * mean(Dice)`; exactly 0 when nothing is
/// matched.
pub fn seg_loss(
    pred_masks: &[Vec<f64>],
    gt_masks: &[Mask],
    assign: &MatchAssignment,
    weights: &LossWeights,
) -> f64 {
    if assign.pairs.is_empty() {
        return 0.0;
    }
    let n = assign.pairs.len() as f64;
    let mut bce_sum = 0.0;
    let mut dice_sum = 0.0;
    for &(k, i) in &assign.pairs {
        bce_sum += bce_mean_probs(&pred_masks[k], &gt_masks[i]);
        dice_sum += dice_loss(&pred_masks[k], &gt_masks[i]);
    }
    weights.bce * (bce_sum / n) + weights.dice * (dice_sum / n)
}

/// Per-slot presence loss: `(1/K) sum_k BCE(score_k, t_k)` with probability
/// clamping.
pub fn presence_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} presence scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let k = scores.len() as f64;
    let mut total = 0.0;
    for (&s, &t) in scores.iter().zip(targets) {
        let p = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / k)
}

/// Per-component values of one training step, stable keys for the log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub loss: f64,
    pub text: f64,
    pub seg: f64,
    pub presence: f64,
    pub matched: usize,
}

/// Weighted total: `w_text * text + w_seg * seg + w_presence * presence`.
pub fn total_loss(text: f64, seg: f64, presence: f64, matched: usize, weights: &LossWeights) -> LossReport {
    LossReport {
        loss: weights.text * text + weights.seg * seg + weights.presence * presence,
        text,
        seg,
        presence,
        matched,
    }
}

/// Tape expression of the text loss.
pub fn text_loss_op(tape: &mut Tape, logits: ValueId, target: &TextTarget) -> Result<ValueId> {
    tape.masked_cross_entropy(logits, target.targets.clone(), target.supervised.clone())
}

/// Tape expression of the segmentation loss over matched pairs.
///
/// `mask_logits` is the `K x G^2` grid of mask logits. Unmatched slots and
/// the empty-target case contribute neither value nor gradient.
pub fn seg_loss_op(
    tape: &mut Tape,
    mask_logits: ValueId,
    gt_masks: &[Mask],
    assign: &MatchAssignment,
    weights: &LossWeights,
) -> ValueId {
    if assign.pairs.is_empty() {
        return tape.leaf(Tensor::scalar(0.0));
    }
    let n = assign.pairs.len() as f64;
    let mut bce_terms = Vec::with_capacity(assign.pairs.len());
    let mut dice_terms = Vec::with_capacity(assign.pairs.len());
    for &(k, i) in &assign.pairs {
        let gt = &gt_masks[i];
        let gt_row = Tensor::row_vector(gt.cells().iter().map(|&b| f64::from(b)).collect());
        let logit_row = tape.slice_rows(mask_logits, k, 1);
        bce_terms.push(tape.bce_logits_mean(logit_row, gt_row.clone()));
        let probs = tape.sigmoid(logit_row);
        let inter = tape.dot_const(probs, gt_row);
        let psum = tape.sum_all(probs);
        let gsum = gt.count_ones() as f64;
        let num = tape.affine(inter, 2.0, DICE_EPS);
        let den = tape.affine(psum, 1.0, gsum + DICE_EPS);
        let ratio = tape.div_elem(num, den);
        dice_terms.push(tape.affine(ratio, -1.0, 1.0));
    }
    let bce_sum = tape.addn(&bce_terms);
    let dice_sum = tape.addn(&dice_terms);
    let bce_part = tape.affine(bce_sum, weights.bce / n, 0.0);
    let dice_part = tape.affine(dice_sum, weights.dice / n, 0.0);
    tape.add(bce_part, dice_part)
}

/// Tape expression of the presence loss from per-slot logits.
pub fn presence_loss_op(tape: &mut Tape, presence_logits: ValueId, targets: &[f64]) -> ValueId {
    let t = Tensor::from_rows(targets.len(), 1, targets.to_vec());
    tape.bce_logits_mean(presence_logits, t)
}

/// Tape expression of the weighted total.
pub fn total_loss_op(
    tape: &mut Tape,
    text: ValueId,
    seg: ValueId,
    presence: ValueId,
    weights: &LossWeights,
) -> ValueId {
    let t = tape.affine(text, weights.text, 0.0);
    let s = tape.affine(seg, weights.seg, 0.0);
    let p = tape.affine(presence, weights.presence, 0.0);
    tape.addn(&[t, s, p])
}
