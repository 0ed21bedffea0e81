//! Optimal one-to-one assignment between query slots and ground-truth
//! instances.
//!
//! The cost of pairing a slot with an instance reuses the training-loss
//! components (clamped-probability BCE + Dice) minus a presence reward, and
//! the assignment minimizing the total pairwise cost is found with an
//! O(n^3) shortest-augmenting-path solver. Gradients never flow through the
//! assignment; within a step it is a constant.

use serde::Serialize;

use crate::losses::LossWeights;
use crate::mask::Mask;
use crate::{Error, Result};

/// Probability clamp applied inside the BCE cost so every cell stays finite.
pub const BCE_CLAMP: f64 = 1e-7;

/// Smoothing constant in the Dice ratio.
pub const DICE_EPS: f64 = 1.0;

/// Pairwise slot-to-instance costs with the per-component breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct CostMatrix {
    pub slots: usize,
    pub targets: usize,
    /// Row-major `slots x targets` combined costs.
    pub costs: Vec<f64>,
    pub bce_cost: Vec<f64>,
    pub dice_cost: Vec<f64>,
    pub presence_cost: Vec<f64>,
}

impl CostMatrix {
    pub fn at(&self, slot: usize, target: usize) -> f64 {
        self.costs[slot * self.targets + target]
    }
}

/// One-to-one slot/instance pairing.
#[derive(Debug, Clone, Serialize)]
pub struct MatchAssignment {
    /// `(slot, target)` pairs, sorted by slot index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched cell costs, accumulated in ascending target order.
    pub total_cost: f64,
    pub unmatched_slots: Vec<usize>,
}

impl MatchAssignment {
    pub fn matched_count(&self) -> usize {
        self.pairs.len()
    }

    /// The target matched to `slot`, if any.
    pub fn target_of(&self, slot: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(k, _)| k == slot).map(|&(_, i)| i)
    }
}

/// Mean clamped-probability binary cross entropy between a predicted
/// probability grid and a binary target.
pub fn bce_mean_probs(pred: &[f64], target: &Mask) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target.cells()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= if *t { p.ln() } else { (1.0 - p).ln() };
    }
    total / pred.len() as f64
}

/// Smoothed Dice loss `1 - (2 sum(p*g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &[f64], target: &Mask) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (p, t) in pred.iter().zip(target.cells()) {
        inter += if *t { *p } else { 0.0 };
        psum += p;
    }
    let gsum = target.count_ones() as f64;
    1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
}

/// Build the `K x N` matching cost matrix:
/// `cost[k][i] = w_bce * BCE(mask_k, M_i) + w_dice * Dice(mask_k, M_i)
///  - w_presence * score_k`.
pub fn build_cost(
    pred_masks: &[Vec<f64>],
    scores: &[f64],
    gt_masks: &[Mask],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let slots = pred_masks.len();
    let targets = gt_masks.len();
    if scores.len() != slots {
        return Err(Error::Matching(format!(
            "{} masks but {} presence scores",
            slots,
            scores.len()
        )));
    }
    for (k, m) in pred_masks.iter().enumerate() {
        for g in gt_masks {
            if m.len() != g.len() {
                return Err(Error::Shape(format!(
                    "prediction grid {} has {} cells but ground truth has {}",
                    k,
                    m.len(),
                    g.len()
                )));
            }
        }
    }
    let mut costs = vec![0.0; slots * targets];
    let mut bce = vec![0.0; slots * targets];
    let mut dice = vec![0.0; slots * targets];
    let mut presence = vec![0.0; slots * targets];
    for k in 0..slots {
        for i in 0..targets {
            let b = bce_mean_probs(&pred_masks[k], &gt_masks[i]);
            let d = dice_loss(&pred_masks[k], &gt_masks[i]);
            let p = -scores[k];
            let cell = k * targets + i;
            bce[cell] = b;
            dice[cell] = d;
            presence[cell] = p;
            costs[cell] = weights.bce * b + weights.dice * d + weights.presence * p;
        }
    }
    Ok(CostMatrix { slots, targets, costs, bce_cost: bce, dice_cost: dice, presence_cost: presence })
}

/// Minimum-cost assignment of every target to a distinct slot.
///
/// Requires `slots >= targets`; the scene generator caps instance counts at
/// the slot count, so a violation signals an over-dense scene.
pub fn hungarian(costs: &CostMatrix) -> Result<MatchAssignment> {
    if costs.slots < costs.targets {
        return Err(Error::Matching(format!(
            "{} ground-truth instances exceed {} query slots",
            costs.targets, costs.slots
        )));
    }
    for (idx, &c) in costs.costs.iter().enumerate() {
        if !c.is_finite() {
            return Err(Error::Matching(format!("non-finite cost at cell {idx}")));
        }
    }
    let slot_of = solve_assignment(costs);
    let mut pairs: Vec<(usize, usize)> = slot_of.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    // Fixed summation order: ascending target index.
    let total_cost: f64 = pairs.iter().map(|&(k, i)| costs.at(k, i)).sum();
    pairs.sort_unstable_by_key(|&(k, _)| k);
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(k, _)| k).collect();
    let unmatched_slots: Vec<usize> = (0..costs.slots).filter(|k| !matched.contains(k)).collect();
    Ok(MatchAssignment { pairs, total_cost, unmatched_slots })
}

/// Shortest-augmenting-path assignment: returns `slot_of[target]`.
fn solve_assignment(costs: &CostMatrix) -> Vec<usize> {
    let n = costs.targets; // workers: ground-truth instances
    let m = costs.slots; // jobs: query slots
    if n == 0 {
        return Vec::new();
    }
    // Potentials with a virtual 0th index, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j] = worker occupying job j (0 = free); jobs are 1-based, slot j-1.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs.at(j - 1, i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut slot_of = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            slot_of[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(slot_of.iter().all(|&k| k != usize::MAX));
    slot_of
}

/// Per-slot presence labels: 1 for matched slots, 0 otherwise.
pub fn presence_targets(assign: &MatchAssignment, slots: usize) -> Vec<f64> {
    let mut t = vec![0.0; slots];
    for &(k, _) in &assign.pairs {
        t[k] = 1.0;
    }
    t
}

/// Convenience for debug dumps: cost matrix plus its assignment.
#[derive(Debug, Serialize)]
pub struct MatchingDump {
    pub costs: CostMatrix,
    pub assignment: MatchAssignment,
}

impl CostMatrix {
    /// Rebuild a matrix from raw rows (used by debug tooling and tests).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let slots = rows.len();
        let targets = rows.first().map_or(0, |r| r.len());
        let mut costs = Vec::with_capacity(slots * targets);
        for r in rows {
            assert_eq!(r.len(), targets, "ragged cost matrix");
            costs.extend_from_slice(r);
        }
        CostMatrix {
            slots,
            targets,
            costs: costs.clone(),
            bce_cost: vec![0.0; slots * targets],
            dice_cost: vec![0.0; slots * targets],
            presence_cost: vec![0.0; slots * targets],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exhaustive_min_assignment;
    use crate::rng::Rng;

    #[test]
    fn identity_favoring_matrix() {
        let m = CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]);
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn off_diagonal_minimum() {
        let m = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]);
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn empty_target_set_yields_no_pairs() {
        let masks = vec![vec![0.5; 4]; 3];
        let scores = vec![0.2, 0.4, 0.9];
        let cm = build_cost(&masks, &scores, &[], &LossWeights::default()).unwrap();
        assert_eq!(cm.targets, 0);
        let a = hungarian(&cm).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.unmatched_slots, vec![0, 1, 2]);
    }

    #[test]
    fn more_targets_than_slots_is_an_error() {
        let m = CostMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(hungarian(&m).is_err());
    }

    #[test]
    fn perfect_mask_with_full_confidence_costs_about_minus_one() {
        let gt = Mask::from_bits(2, &[true, false, true, true]);
        let pred: Vec<f64> = gt.cells().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let cm = build_cost(&[pred], &[1.0], &[gt], &LossWeights::default()).unwrap();
        // BCE is ~1e-7 under clamping, Dice exactly 0, presence reward -1.
        assert!((cm.at(0, 0) + 1.0).abs() < 1e-5, "cost {}", cm.at(0, 0));
        assert_eq!(cm.dice_cost[0], 0.0);
    }

    #[test]
    fn cost_components_match_direct_recomputation() {
        let mut rng = Rng::new(5);
        let g = 3;
        let gt: Vec<Mask> = (0..2)
            .map(|_| Mask::from_bits(g, &(0..g * g).map(|_| rng.next_f64() < 0.4).collect::<Vec<_>>()))
            .collect();
        let masks: Vec<Vec<f64>> = (0..3).map(|_| (0..g * g).map(|_| rng.next_f64()).collect()).collect();
        let scores: Vec<f64> = (0..3).map(|_| rng.next_f64()).collect();
        let w = LossWeights::default();
        let cm = build_cost(&masks, &scores, &gt, &w).unwrap();
        for k in 0..3 {
            for i in 0..2 {
                // Straight-line recomputation, cell by cell.
                let mut bce = 0.0;
                let mut inter = 0.0;
                let mut psum = 0.0;
                for (c, &p) in masks[k].iter().enumerate() {
                    let t = gt[i].cells()[c];
                    let pc = p.clamp(1e-7, 1.0 - 1e-7);
                    bce -= if t { pc.ln() } else { (1.0 - pc).ln() };
                    if t {
                        inter += p;
                    }
                    psum += p;
                }
                bce /= (g * g) as f64;
                let gsum = gt[i].count_ones() as f64;
                let dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
                let expected = 2.0 * bce + 0.5 * dice - scores[k];
                assert!((cm.at(k, i) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let n = rng.range(0, 5);
            let k = rng.range(n.max(1), 6);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.next_gaussian() * 3.0).collect())
                .collect();
            let cm = CostMatrix::from_rows(&rows);
            let ours = hungarian(&cm).unwrap();
            let (pairs, total) = exhaustive_min_assignment(&rows);
            assert_eq!(ours.total_cost, total, "totals must agree exactly");
            // With random continuous costs the argmin is unique.
            let mut sorted = pairs.clone();
            sorted.sort_unstable_by_key(|&(k, _)| k);
            assert_eq!(ours.pairs, sorted);
        }
    }

    #[test]
    fn adding_constant_shifts_total_and_keeps_argmin() {
        let mut rng = Rng::new(123);
        for _ in 0..50 {
            let n = rng.range(1, 4);
            let k = rng.range(n, 5);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.next_gaussian()).collect())
                .collect();
            let c = 2.5;
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
            let a = hungarian(&CostMatrix::from_rows(&rows)).unwrap();
            let b = hungarian(&CostMatrix::from_rows(&shifted)).unwrap();
            assert_eq!(a.pairs, b.pairs);
            assert!((b.total_cost - a.total_cost - n as f64 * c).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_targets_permutes_matches() {
        let mut rng = Rng::new(321);
        for _ in 0..50 {
            let n = rng.range(2, 4);
            let k = rng.range(n, 6);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.next_gaussian()).collect())
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| perm.iter().map(|&j| r[j]).collect())
                .collect();
            let a = hungarian(&CostMatrix::from_rows(&rows)).unwrap();
            let b = hungarian(&CostMatrix::from_rows(&permuted)).unwrap();
            // Pair (k, i) in the original corresponds to (k, perm^-1(i)) after permuting.
            let mut expect: Vec<(usize, usize)> = a
                .pairs
                .iter()
                .map(|&(slot, i)| (slot, perm.iter().position(|&pj| pj == i).unwrap()))
                .collect();
            expect.sort_unstable_by_key(|&(s, _)| s);
            assert_eq!(b.pairs, expect);
        }
    }

    #[test]
    fn presence_targets_count_matches() {
        let m = CostMatrix::from_rows(&[
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
            vec![5.0, 5.0, 5.0],
            vec![5.0, 5.0, 5.0],
        ]);
        let a = hungarian(&m).unwrap();
        let t = presence_targets(&a, 5);
        assert_eq!(t.iter().sum::<f64>(), 3.0);
        assert_eq!(t, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn presence_targets_all_zero_without_targets() {
        let cm = CostMatrix::from_rows(&[vec![], vec![]]);
        let a = hungarian(&cm).unwrap();
        assert_eq!(presence_targets(&a, 2), vec![0.0, 0.0]);
    }
}
