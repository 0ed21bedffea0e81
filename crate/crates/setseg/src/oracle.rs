//! Independent reference implementations used by the test suites.
//!
//! Everything here is written as straight-line math with no dependency on
//! the tape, the solver, or the metric pipeline it is meant to check, so the
//! two routes can disagree when one of them is wrong.

use crate::net_core::tape::AttnMask;
use crate::net_core::Tensor;

/// Dense multi-head attention with explicit `-inf` logit masking, computed
/// directly from the definition.
pub fn dense_attention_reference(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttnMask,
) -> Tensor {
    let (lq, d) = (q.rows(), q.cols());
    let lk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(lq, d);
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let mut logits = vec![f64::NEG_INFINITY; lk];
            for j in 0..lk {
                if mask.allowed(i, j) {
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += q.at(i, off + t) * k.at(j, off + t);
                    }
                    logits[j] = dot * scale;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits
                .iter()
                .map(|&x| if x.is_finite() { (x - max).exp() } else { 0.0 })
                .collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..lk {
                let w = exps[j] / denom;
                for t in 0..dh {
                    let cur = out.at(i, off + t);
                    out.set(i, off + t, cur + w * v.at(j, off + t));
                }
            }
        }
    }
    out
}

/// Minimum-cost injective assignment of every column (ground truth) to a
/// distinct row (slot), found by enumerating all injective maps.
///
/// Returns `(pairs sorted by row, total)` where the total is summed over
/// ascending column index — the same order the production solver reports.
/// Requires `rows >= cols`; the number of rows must stay small (<= ~8).
pub fn exhaustive_min_assignment(costs: &[Vec<f64>]) -> (Vec<(usize, usize)>, f64) {
    let rows = costs.len();
    let cols = if rows == 0 { 0 } else { costs[0].len() };
    assert!(rows >= cols, "need at least as many rows as columns");
    if cols == 0 {
        return (Vec::new(), 0.0);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut chosen = vec![usize::MAX; cols];
    let mut used = vec![false; rows];
    fn rec(
        costs: &[Vec<f64>],
        col: usize,
        cols: usize,
        rows: usize,
        chosen: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if col == cols {
            // Sum in ascending column order.
            let mut total = 0.0;
            for (c, &r) in chosen.iter().enumerate() {
                total += costs[r][c];
            }
            match best {
                Some((_, t)) if *t <= total => {}
                _ => *best = Some((chosen.clone(), total)),
            }
            return;
        }
        for r in 0..rows {
            if used[r] {
                continue;
            }
            used[r] = true;
            chosen[col] = r;
            rec(costs, col + 1, cols, rows, chosen, used, best);
            used[r] = false;
        }
    }
    rec(costs, 0, cols, rows, &mut chosen, &mut used, &mut best);
    let (rows_for_col, total) = best.unwrap();
    let mut pairs: Vec<(usize, usize)> =
        rows_for_col.iter().enumerate().map(|(c, &r)| (r, c)).collect();
    pairs.sort_unstable_by_key(|&(r, _)| r);
    (pairs, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_identity_matrix() {
        let costs = vec![vec![0.0, 9.0], vec![9.0, 0.0]];
        let (pairs, total) = exhaustive_min_assignment(&costs);
        assert_eq!(total, 0.0);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn exhaustive_prefers_cross_assignment() {
        let costs = vec![vec![10.0, 1.0], vec![1.0, 10.0]];
        let (pairs, total) = exhaustive_min_assignment(&costs);
        assert_eq!(total, 2.0);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn exhaustive_rectangular_leaves_rows_unused() {
        let costs = vec![vec![5.0], vec![1.0], vec![3.0]];
        let (pairs, total) = exhaustive_min_assignment(&costs);
        assert_eq!(pairs, vec![(1, 0)]);
        assert_eq!(total, 1.0);
    }
}
