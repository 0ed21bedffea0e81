//! Instance-level evaluation: COCO-style mAP over IoU thresholds
//! 0.50:0.05:0.95, semantic gIoU/cIoU over per-sample mask unions,
//! no-target accuracy, and single/multi/no-target stratification.

use serde::{Deserialize, Serialize};

use crate::mask::{mask_iou, Mask};
use crate::{Error, Result};

/// Target-count stratum of one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    SingleTarget,
    MultiTarget,
    NoTarget,
}

impl Stratum {
    pub fn from_target_count(n: usize) -> Self {
        match n {
            0 => Stratum::NoTarget,
            1 => Stratum::SingleTarget,
            _ => Stratum::MultiTarget,
        }
    }
}

/// Ground truth for one instruction.
#[derive(Debug, Clone)]
pub struct SampleGroundTruth {
    pub id: u64,
    pub masks: Vec<Mask>,
}

impl SampleGroundTruth {
    pub fn stratum(&self) -> Stratum {
        Stratum::from_target_count(self.masks.len())
    }
}

/// Selected predictions for one instruction (already thresholded).
#[derive(Debug, Clone)]
pub struct SamplePredictions {
    pub id: u64,
    pub masks: Vec<Mask>,
    pub scores: Vec<f64>,
}

/// JSON Lines form of one prediction record.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub masks: Vec<String>,
    pub scores: Vec<f64>,
}

impl SamplePredictions {
    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.id,
            masks: self.masks.iter().map(Mask::to_rle).collect(),
            scores: self.scores.clone(),
        }
    }

    pub fn from_record(record: &PredictionRecord, side: usize) -> Result<Self> {
        if record.masks.len() != record.scores.len() {
            return Err(Error::Metrics(format!(
                "prediction {} has {} masks but {} scores",
                record.id,
                record.masks.len(),
                record.scores.len()
            )));
        }
        let masks = record
            .masks
            .iter()
            .map(|rle| Mask::from_rle(side, rle))
            .collect::<Result<Vec<_>>>()?;
        Ok(SamplePredictions { id: record.id, masks, scores: record.scores.clone() })
    }
}

/// Per-stratum slice of the report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StratumReport {
    pub count: usize,
    pub map: f64,
    pub ap50: f64,
    pub giou: f64,
}

/// The benchmark report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    /// Mean AP over IoU thresholds 0.50:0.05:0.95, single+multi strata.
    pub map: f64,
    pub ap50: f64,
    pub giou: f64,
    pub ciou: f64,
    pub no_target_accuracy: f64,
    pub single: StratumReport,
    pub multi: StratumReport,
    pub no_target_count: usize,
    pub no_target_giou: f64,
}

/// The ten COCO IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

struct PooledPrediction {
    sample_index: usize,
    slot: usize,
    score: f64,
}

/// Average precision at one IoU threshold over a pooled prediction set.
///
/// Predictions across the dataset are sorted by score (ties broken by
/// instruction id, then slot index) and greedily matched to the
/// highest-IoU unmatched ground truth of their own instruction. AP is the
/// area under the 101-point interpolated precision-recall curve.
pub fn average_precision(
    predictions: &[SamplePredictions],
    ground_truth: &[SampleGroundTruth],
    threshold: f64,
) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Metrics("prediction/ground-truth sample count mismatch".into()));
    }
    let total_gt: usize = ground_truth.iter().map(|g| g.masks.len()).sum();
    let mut pooled = Vec::new();
    for (si, p) in predictions.iter().enumerate() {
        if p.id != ground_truth[si].id {
            return Err(Error::Metrics(format!(
                "prediction id {} does not line up with ground truth id {}",
                p.id, ground_truth[si].id
            )));
        }
        for (slot, &score) in p.scores.iter().enumerate() {
            pooled.push(PooledPrediction { sample_index: si, slot, score });
        }
    }
    if total_gt == 0 {
        // No instances to recover anywhere; conventionally perfect only when
        // nothing was predicted.
        return Ok(if pooled.is_empty() { 1.0 } else { 0.0 });
    }
    if pooled.is_empty() {
        return Ok(0.0);
    }
    pooled.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| predictions[a.sample_index].id.cmp(&predictions[b.sample_index].id))
            .then_with(|| a.slot.cmp(&b.slot))
    });

    let mut gt_used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.masks.len()]).collect();
    let mut tp = vec![false; pooled.len()];
    for (rank, p) in pooled.iter().enumerate() {
        let gts = &ground_truth[p.sample_index];
        let pred_mask = &predictions[p.sample_index].masks[p.slot];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gm) in gts.masks.iter().enumerate() {
            if gt_used[p.sample_index][gi] {
                continue;
            }
            let iou = mask_iou(pred_mask, gm)?;
            if iou >= threshold {
                match best {
                    Some((_, b)) if b >= iou => {}
                    _ => best = Some((gi, iou)),
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_used[p.sample_index][gi] = true;
            tp[rank] = true;
        }
    }

    // Precision/recall along the ranking, then 101-point interpolation.
    let mut precisions = Vec::with_capacity(pooled.len());
    let mut recalls = Vec::with_capacity(pooled.len());
    let mut tp_count = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            tp_count += 1;
        }
        precisions.push(tp_count as f64 / (rank + 1) as f64);
        recalls.push(tp_count as f64 / total_gt as f64);
    }
    // Envelope: best precision at recall >= r.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let idx = recalls.partition_point(|&rec| rec < r);
        if idx < precisions.len() {
            ap += precisions[idx];
        }
    }
    Ok(ap / 101.0)
}

/// Dataset mean of per-sample union IoU. No-target samples score 1 when the
/// prediction set is empty and 0 otherwise.
pub fn g_iou(predictions: &[SamplePredictions], ground_truth: &[SampleGroundTruth]) -> Result<f64> {
    if ground_truth.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (p, g) in predictions.iter().zip(ground_truth) {
        total += sample_union_iou(p, g)?;
    }
    Ok(total / ground_truth.len() as f64)
}

fn sample_union_iou(p: &SamplePredictions, g: &SampleGroundTruth) -> Result<f64> {
    match (Mask::union_of(&p.masks), Mask::union_of(&g.masks)) {
        (None, None) => Ok(1.0),
        (Some(_), None) => Ok(0.0),
        (None, Some(_)) => Ok(0.0),
        (Some(pu), Some(gu)) => mask_iou(&pu, &gu),
    }
}

/// Cumulative intersection over cumulative union across the dataset; 1 when
/// every sample is no-target with an empty prediction set.
pub fn c_iou(predictions: &[SamplePredictions], ground_truth: &[SampleGroundTruth]) -> Result<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in predictions.iter().zip(ground_truth) {
        let pu = Mask::union_of(&p.masks);
        let gu = Mask::union_of(&g.masks);
        match (pu, gu) {
            (None, None) => {}
            (Some(pu), None) => union += pu.count_ones(),
            (None, Some(gu)) => union += gu.count_ones(),
            (Some(pu), Some(gu)) => {
                if pu.len() != gu.len() {
                    return Err(Error::Shape("cIoU over masks of different sizes".into()));
                }
                inter += pu.intersection_count(&gu);
                union += pu.union_count(&gu);
            }
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Compute the full report.
///
/// mAP pools only single- and multi-target samples (no-target samples have
/// no instances); false positives on no-target samples surface through
/// `no_target_accuracy` instead.
pub fn evaluate(predictions: &[SamplePredictions], ground_truth: &[SampleGroundTruth]) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} instructions",
            predictions.len(),
            ground_truth.len()
        )));
    }
    for (p, g) in predictions.iter().zip(ground_truth) {
        if p.id != g.id {
            return Err(Error::Metrics(format!("missing prediction for instruction {}", g.id)));
        }
    }
    let with_stratum = |s: Stratum| -> (Vec<SamplePredictions>, Vec<SampleGroundTruth>) {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for (p, g) in predictions.iter().zip(ground_truth) {
            if g.stratum() == s {
                ps.push(p.clone());
                gs.push(g.clone());
            }
        }
        (ps, gs)
    };
    let (single_p, single_g) = with_stratum(Stratum::SingleTarget);
    let (multi_p, multi_g) = with_stratum(Stratum::MultiTarget);
    let (nt_p, nt_g) = with_stratum(Stratum::NoTarget);

    let mut pooled_p = single_p.clone();
    pooled_p.extend(multi_p.iter().cloned());
    let mut pooled_g = single_g.clone();
    pooled_g.extend(multi_g.iter().cloned());

    let thresholds = iou_thresholds();
    let ap_over = |p: &[SamplePredictions], g: &[SampleGroundTruth]| -> Result<(f64, f64)> {
        let mut sum = 0.0;
        let mut ap50 = 0.0;
        for (i, &t) in thresholds.iter().enumerate() {
            let ap = average_precision(p, g, t)?;
            if i == 0 {
                ap50 = ap;
            }
            sum += ap;
        }
        Ok((sum / thresholds.len() as f64, ap50))
    };
    let (map, ap50) = ap_over(&pooled_p, &pooled_g)?;
    let (single_map, single_ap50) = ap_over(&single_p, &single_g)?;
    let (multi_map, multi_ap50) = ap_over(&multi_p, &multi_g)?;

    let giou = g_iou(predictions, ground_truth)?;
    let ciou = c_iou(predictions, ground_truth)?;
    let single_giou = g_iou(&single_p, &single_g)?;
    let multi_giou = g_iou(&multi_p, &multi_g)?;
    let nt_giou = g_iou(&nt_p, &nt_g)?;

    let no_target_accuracy = if nt_g.is_empty() {
        1.0
    } else {
        nt_p.iter().filter(|p| p.masks.is_empty()).count() as f64 / nt_g.len() as f64
    };

    Ok(MetricsReport {
        samples: ground_truth.len(),
        map,
        ap50,
        giou,
        ciou,
        no_target_accuracy,
        single: StratumReport { count: single_g.len(), map: single_map, ap50: single_ap50, giou: single_giou },
        multi: StratumReport { count: multi_g.len(), map: multi_map, ap50: multi_ap50, giou: multi_giou },
        no_target_count: nt_g.len(),
        no_target_giou: nt_giou,
    })
}

impl MetricsReport {
    /// Aligned text table for humans; the JSON form is the machine surface.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14} {:>8} {:>8} {:>8} {:>8}\n", "stratum", "count", "mAP", "AP50", "gIoU"));
        out.push_str(&format!(
            "{:<14} {:>8} {:>8.4} {:>8.4} {:>8.4}\n",
            "overall",
            self.single.count + self.multi.count,
            self.map,
            self.ap50,
            self.giou
        ));
        out.push_str(&format!(
            "{:<14} {:>8} {:>8.4} {:>8.4} {:>8.4}\n",
            "single-target", self.single.count, self.single.map, self.single.ap50, self.single.giou
        ));
        out.push_str(&format!(
            "{:<14} {:>8} {:>8.4} {:>8.4} {:>8.4}\n",
            "multi-target", self.multi.count, self.multi.map, self.multi.ap50, self.multi.giou
        ));
        out.push_str(&format!(
            "{:<14} {:>8} {:>8} {:>8} {:>8.4}\n",
            "no-target", self.no_target_count, "-", "-", self.no_target_giou
        ));
        out.push_str(&format!("cIoU {:.4}  no-target accuracy {:.4}\n", self.ciou, self.no_target_accuracy));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(id: u64, masks: Vec<Mask>) -> SampleGroundTruth {
        SampleGroundTruth { id, masks }
    }

    fn pred(id: u64, masks: Vec<Mask>, scores: Vec<f64>) -> SamplePredictions {
        SamplePredictions { id, masks, scores }
    }

    fn block(side: usize, cells: &[usize]) -> Mask {
        Mask::from_cells(side, cells)
    }

    #[test]
    fn perfect_predictions_are_perfect_everywhere() {
        let g = vec![
            gt(0, vec![block(4, &[0, 1]), block(4, &[8, 9])]),
            gt(1, vec![block(4, &[5])]),
            gt(2, vec![]),
        ];
        let p = vec![
            pred(0, vec![block(4, &[0, 1]), block(4, &[8, 9])], vec![0.9, 0.8]),
            pred(1, vec![block(4, &[5])], vec![0.95]),
            pred(2, vec![], vec![]),
        ];
        let r = evaluate(&p, &g).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.giou, 1.0);
        assert_eq!(r.ciou, 1.0);
        assert_eq!(r.no_target_accuracy, 1.0);
    }

    #[test]
    fn empty_predictions_zero_ap_full_no_target_accuracy() {
        let g = vec![gt(0, vec![block(4, &[0])]), gt(1, vec![])];
        let p = vec![pred(0, vec![], vec![]), pred(1, vec![], vec![])];
        let r = evaluate(&p, &g).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.no_target_accuracy, 1.0);
    }

    #[test]
    fn ap_zero_predictions_nonzero_gt() {
        let g = vec![gt(0, vec![block(2, &[0])])];
        let p = vec![pred(0, vec![], vec![])];
        assert_eq!(average_precision(&p, &g, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ap_all_matched_in_rank_order_is_one() {
        let g = vec![gt(0, vec![block(2, &[0]), block(2, &[3])])];
        let p = vec![pred(0, vec![block(2, &[0]), block(2, &[3])], vec![0.9, 0.7])];
        assert_eq!(average_precision(&p, &g, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn duplicate_prediction_strictly_decreases_ap() {
        // Two GT instances; clean ranking [TP(0.9), TP(0.6)].
        let g = vec![gt(0, vec![block(4, &[0, 1]), block(4, &[8, 9])])];
        let clean = vec![pred(0, vec![block(4, &[0, 1]), block(4, &[8, 9])], vec![0.9, 0.6])];
        // Duplicate of the first mask lands between the two TPs.
        let dup = vec![pred(
            0,
            vec![block(4, &[0, 1]), block(4, &[0, 1]), block(4, &[8, 9])],
            vec![0.9, 0.7, 0.6],
        )];
        for t in iou_thresholds() {
            let a = average_precision(&clean, &g, t).unwrap();
            let b = average_precision(&dup, &g, t).unwrap();
            assert!(b < a, "duplicate must strictly lower AP at {t}: {b} vs {a}");
        }
    }

    #[test]
    fn map_is_rank_invariant_under_monotone_score_transforms() {
        let g = vec![
            gt(0, vec![block(4, &[0, 1]), block(4, &[8])]),
            gt(1, vec![block(4, &[5, 6])]),
        ];
        let base = vec![
            pred(0, vec![block(4, &[0, 1]), block(4, &[2])], vec![0.9, 0.4]),
            pred(1, vec![block(4, &[5, 6]), block(4, &[10])], vec![0.7, 0.2]),
        ];
        let reference = average_precision(&base, &g, 0.5).unwrap();
        let mut rng = crate::rng::Rng::new(8);
        for _ in 0..100 {
            let (a, b) = (0.05 + rng.next_f64() * 3.0, rng.next_f64() * 2.0);
            let transformed: Vec<SamplePredictions> = base
                .iter()
                .map(|p| SamplePredictions {
                    id: p.id,
                    masks: p.masks.clone(),
                    scores: p.scores.iter().map(|s| a * s + b).collect(),
                })
                .collect();
            let ap = average_precision(&transformed, &g, 0.5).unwrap();
            assert_eq!(ap, reference);
        }
    }

    #[test]
    fn no_target_sample_with_prediction_contributes_zero_giou() {
        let g = vec![gt(0, vec![])];
        let p = vec![pred(0, vec![block(2, &[0])], vec![0.9])];
        assert_eq!(g_iou(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn giou_mixed_four_samples() {
        let g = vec![
            gt(0, vec![block(2, &[0, 1])]),
            gt(1, vec![block(2, &[0])]),
            gt(2, vec![]),
            gt(3, vec![block(2, &[3])]),
        ];
        let p = vec![
            pred(0, vec![block(2, &[0, 1])], vec![0.9]), // IoU 1
            pred(1, vec![block(2, &[0, 1])], vec![0.9]), // IoU 1/2
            pred(2, vec![], vec![]),                     // no-target, empty: 1
            pred(3, vec![block(2, &[0])], vec![0.9]),    // IoU 0
        ];
        let expect = (1.0 + 0.5 + 1.0 + 0.0) / 4.0;
        assert!((g_iou(&p, &g).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ciou_weights_by_size_unlike_giou() {
        // One perfect big sample plus one fully-wrong small sample.
        let g = vec![
            gt(0, vec![block(4, &(0..12).collect::<Vec<_>>())]),
            gt(1, vec![block(4, &[15])]),
        ];
        let p = vec![
            pred(0, vec![block(4, &(0..12).collect::<Vec<_>>())], vec![0.9]),
            pred(1, vec![block(4, &[0])], vec![0.9]),
        ];
        let ciou = c_iou(&p, &g).unwrap();
        let giou = g_iou(&p, &g).unwrap();
        assert!((ciou - 12.0 / 14.0).abs() < 1e-12);
        assert!((giou - 0.5).abs() < 1e-12);
        assert!(ciou > giou);
    }

    #[test]
    fn ciou_empty_everything_is_one() {
        let g = vec![gt(0, vec![]), gt(1, vec![])];
        let p = vec![pred(0, vec![], vec![]), pred(1, vec![], vec![])];
        assert_eq!(c_iou(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn single_sample_ciou_equals_union_iou() {
        let g = vec![gt(0, vec![block(3, &[0, 1, 2]), block(3, &[6])])];
        let p = vec![pred(0, vec![block(3, &[0, 1]), block(3, &[6, 7])], vec![0.9, 0.8])];
        let gu = Mask::union_of(&g[0].masks).unwrap();
        let pu = Mask::union_of(&p[0].masks).unwrap();
        let expected = mask_iou(&pu, &gu).unwrap();
        assert!((c_iou(&p, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluate_order_independent() {
        let g = vec![
            gt(0, vec![block(4, &[0, 1])]),
            gt(1, vec![block(4, &[8, 9]), block(4, &[3])]),
            gt(2, vec![]),
        ];
        let p = vec![
            pred(0, vec![block(4, &[0, 1])], vec![0.5]),
            pred(1, vec![block(4, &[8])], vec![0.5]),
            pred(2, vec![block(4, &[15])], vec![0.5]),
        ];
        let a = evaluate(&p, &g).unwrap();
        let order = [2usize, 0, 1];
        let p2: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
        let g2: Vec<_> = order.iter().map(|&i| g[i].clone()).collect();
        let b = evaluate(&p2, &g2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_requires_aligned_ids() {
        let g = vec![gt(3, vec![])];
        let p = vec![pred(4, vec![], vec![])];
        assert!(evaluate(&p, &g).is_err());
    }
}
