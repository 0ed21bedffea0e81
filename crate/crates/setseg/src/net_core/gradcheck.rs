//! Central finite-difference verification of recorded gradients.

use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, ValueId};
use crate::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    /// max over coordinates of |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// A deterministic scalar function of the parameters, recorded on a tape.
pub type LossFn<'a> = dyn Fn(&ParamStore, &mut Tape) -> Result<ValueId> + Sync + 'a;

fn eval(f: &LossFn, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compare recorded gradients of `f` against central finite differences at
/// every parameter coordinate.
///
/// `f` must be deterministic; two base evaluations that disagree bit-for-bit
/// abort the check.
pub fn grad_check(store: &ParamStore, f: &LossFn, step: f64) -> Result<GradCheckReport> {
    let base_a = eval(f, store)?;
    let base_b = eval(f, store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::GradCheck(format!(
            "loss function is not deterministic: {base_a} vs {base_b}"
        )));
    }

    // Recorded gradients.
    let mut ad = clone_store(store);
    ad.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = f(&ad, &mut tape)?;
        tape.backward_into(loss, &mut ad)?;
    }

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();

    let chunks: Vec<&[(ParamId, usize)]> = coords.chunks(512).collect();
    let results: Result<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut local = clone_store(store);
            let mut fd = Vec::with_capacity(chunk.len());
            for &(pid, idx) in *chunk {
                let orig = local.value(pid).data()[idx];
                local.value_mut(pid).data_mut()[idx] = orig + step;
                let plus = eval(f, &local)?;
                local.value_mut(pid).data_mut()[idx] = orig - step;
                let minus = eval(f, &local)?;
                local.value_mut(pid).data_mut()[idx] = orig;
                fd.push((plus - minus) / (2.0 * step));
            }
            Ok(fd)
        })
        .collect();
    let fd: Vec<f64> = results?.into_iter().flatten().collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    for ((pid, idx), &g_fd) in coords.iter().zip(&fd) {
        let g_ad = ad.grad(*pid).data()[*idx];
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs() + 1e-12);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = store.name(*pid).to_string();
            report.worst_coord = *idx;
        }
    }
    Ok(report)
}

fn clone_store(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for id in store.ids() {
        out.add_in_group(store.name(id), store.value(id).clone(), store.group(id));
    }
    out
}
