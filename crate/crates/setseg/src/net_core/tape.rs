//! Reverse-mode automatic differentiation over tensor-granular operations.
//!
//! A `Tape` records one forward computation as a sequence of nodes, each
//! holding its output tensor and a backward closure that scatters the
//! incoming gradient to its parents. Ops are coarse (matmul, attention,
//! layer norm, fused losses) so a full model forward stays in the hundreds
//! of nodes.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nn, matmul_nn_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc, normalize_rows, Tensor};
use crate::{Error, Result};

/// Epsilon inside layer-norm's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Additive penalty applied to disallowed attention logits. Large enough
/// that `exp` underflows to exactly +0.0 after max subtraction.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Attention permission matrix shared across tape nodes.
///
/// `allow[i * cols + j]` is true when query row `i` may attend to key row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, allow: vec![true; rows * cols] }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row_has_any(&self, i: usize) -> bool {
        self.allow[i * self.cols..(i + 1) * self.cols].iter().any(|&b| b)
    }
}

type BackwardFn = Box<dyn Fn(&Tape, &Tensor, &mut GradSink) + Send + Sync>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Per-node gradient accumulators for everything upstream of one node.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    shapes: &'a [(usize, usize)],
}

impl<'a> GradSink<'a> {
    /// Mutable access to the gradient of `id`, allocating zeros on first touch.
    pub fn get_mut(&mut self, id: ValueId) -> &mut Tensor {
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            let (r, c) = self.shapes[id.0];
            *slot = Some(Tensor::zeros(r, c));
        }
        slot.as_mut().unwrap()
    }
}

/// Gradients produced by one backward sweep, indexed by node id.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, ValueId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter nodes recorded on this tape, in load order.
    pub fn bindings(&self) -> &[(ParamId, ValueId)] {
        &self.bindings
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> ValueId {
        self.nodes.push(Node { value, backward });
        ValueId(self.nodes.len() - 1)
    }

    /// A constant input; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, None)
    }

    /// Load a parameter onto the tape, remembering the binding so its
    /// gradient can be routed back to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        let vid = self.push(store.value(id).clone(), None);
        self.bindings.push((id, vid));
        vid
    }

    /// Register a fused operation with a custom backward closure.
    pub fn custom(&mut self, value: Tensor, backward: BackwardFn) -> ValueId {
        self.push(value, Some(backward))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut out = va.clone();
        out.data_mut().iter_mut().zip(vb.data()).for_each(|(x, y)| *x += y);
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                acc(sink.get_mut(a), g.data());
                acc(sink.get_mut(b), g.data());
            }),
        )
    }

    /// Sum a list of same-shape nodes.
    pub fn addn(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let vp = self.value(p);
            assert!(out.same_shape(vp), "addn shape mismatch");
            out.data_mut().iter_mut().zip(vp.data()).for_each(|(x, y)| *x += y);
        }
        let parts: Vec<ValueId> = parts.to_vec();
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                for &p in &parts {
                    acc(sink.get_mut(p), g.data());
                }
            }),
        )
    }

    /// Broadcast-add a `1 x C` bias to every row of `a`.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> ValueId {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "bias width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (x, y) in r.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                acc(sink.get_mut(a), g.data());
                let gb = sink.get_mut(bias);
                let c = gb.cols();
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    let brow = gb.row_mut(0);
                    for j in 0..c {
                        brow[j] += grow[j];
                    }
                }
            }),
        )
    }

    /// Elementwise `k * a + c`.
    pub fn affine(&mut self, a: ValueId, k: f64, c: f64) -> ValueId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = k * *x + c);
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                let ga = sink.get_mut(a);
                for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += k * y;
                }
            }),
        )
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.same_shape(vb), "mul_elem shape mismatch");
        let mut out = va.clone();
        out.data_mut().iter_mut().zip(vb.data()).for_each(|(x, y)| *x *= y);
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                let (va, vb) = (t.value(a).data().to_vec(), t.value(b).data().to_vec());
                {
                    let ga = sink.get_mut(a);
                    for ((x, gy), y) in ga.data_mut().iter_mut().zip(g.data()).zip(&vb) {
                        *x += gy * y;
                    }
                }
                let gb = sink.get_mut(b);
                for ((x, gy), y) in gb.data_mut().iter_mut().zip(g.data()).zip(&va) {
                    *x += gy * y;
                }
            }),
        )
    }

    /// Elementwise `a / b`.
    pub fn div_elem(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(va.same_shape(vb), "div_elem shape mismatch");
        let mut out = va.clone();
        out.data_mut().iter_mut().zip(vb.data()).for_each(|(x, y)| *x /= y);
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                let va = t.value(a).data().to_vec();
                let vb = t.value(b).data().to_vec();
                {
                    let ga = sink.get_mut(a);
                    for ((x, gy), y) in ga.data_mut().iter_mut().zip(g.data()).zip(&vb) {
                        *x += gy / y;
                    }
                }
                let gb = sink.get_mut(b);
                for i in 0..vb.len() {
                    gb.data_mut()[i] -= g.data()[i] * va[i] / (vb[i] * vb[i]);
                }
            }),
        )
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = matmul_nn(self.value(a), self.value(b));
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                matmul_nt_acc(g, t.value(b), sink.get_mut(a));
                matmul_tn_acc(t.value(a), g, sink.get_mut(b));
            }),
        )
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = matmul_nt(self.value(a), self.value(b));
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                matmul_nn_acc(g, t.value(b), sink.get_mut(a));
                matmul_tn_acc(g, t.value(a), sink.get_mut(b));
            }),
        )
    }

    /// Gaussian error linear unit (tanh form); smooth everywhere.
    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a);
        let mut out = va.clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu_scalar(*x));
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                let va = t.value(a);
                let ga = sink.get_mut(a);
                for i in 0..va.len() {
                    ga.data_mut()[i] += g.data()[i] * gelu_grad_scalar(va.data()[i]);
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a);
        let mut out = va.clone();
        out.data_mut().iter_mut().for_each(|x| *x = sigmoid_scalar(*x));
        let cached = out.clone();
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                let ga = sink.get_mut(a);
                for i in 0..cached.len() {
                    let s = cached.data()[i];
                    ga.data_mut()[i] += g.data()[i] * s * (1.0 - s);
                }
            }),
        )
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let vg = self.value(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.cols(), c, "gamma width");
        assert_eq!(vb.cols(), c, "beta width");
        let (xhat, inv_std) = normalize_rows(vx, LAYER_NORM_EPS);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let xr = xhat.row(i);
            let or = out.row_mut(i);
            for j in 0..c {
                or[j] = vg.at(0, j) * xr[j] + vb.at(0, j);
            }
        }
        self.custom(
            out,
            Box::new(move |t, g, sink| {
                let vg = t.value(gamma).data().to_vec();
                {
                    let gx = sink.get_mut(x);
                    for i in 0..r {
                        let grow = g.row(i);
                        let xr = xhat.row(i);
                        let istd = inv_std[i];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxhat = grow[j] * vg[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xr[j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        let gxr = gx.row_mut(i);
                        for j in 0..c {
                            let dxhat = grow[j] * vg[j];
                            gxr[j] += istd * (dxhat - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                }
                {
                    let gg = sink.get_mut(gamma);
                    for i in 0..r {
                        let grow = g.row(i);
                        let xr = xhat.row(i);
                        let ggr = gg.row_mut(0);
                        for j in 0..c {
                            ggr[j] += grow[j] * xr[j];
                        }
                    }
                }
                let gb = sink.get_mut(beta);
                for i in 0..r {
                    let grow = g.row(i);
                    let gbr = gb.row_mut(0);
                    for j in 0..c {
                        gbr[j] += grow[j];
                    }
                }
            }),
        )
    }

    /// Embedding lookup: stack `table` rows selected by `ids`.
    pub fn gather_rows(&mut self, table: ValueId, ids: Vec<usize>) -> ValueId {
        let vt = self.value(table);
        let c = vt.cols();
        let mut out = Tensor::zeros(ids.len(), c);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vt.row(id));
        }
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                let gt = sink.get_mut(table);
                for (i, &id) in ids.iter().enumerate() {
                    let grow = g.row(i);
                    let trow = gt.row_mut(id);
                    for j in 0..trow.len() {
                        trow[j] += grow[j];
                    }
                }
            }),
        )
    }

    /// Stack parts vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, c);
        let mut offset = 0;
        let mut ranges = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), c, "concat_rows column mismatch");
            for i in 0..vp.rows() {
                out.row_mut(offset + i).copy_from_slice(vp.row(i));
            }
            ranges.push((p, offset, vp.rows()));
            offset += vp.rows();
        }
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                for &(p, start, rows) in &ranges {
                    let gp = sink.get_mut(p);
                    for i in 0..rows {
                        let grow = g.row(start + i);
                        let prow = gp.row_mut(i);
                        for j in 0..prow.len() {
                            prow[j] += grow[j];
                        }
                    }
                }
            }),
        )
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let va = self.value(a);
        let c = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let mut out = Tensor::zeros(len, c);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(va.row(start + i));
        }
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                let ga = sink.get_mut(a);
                for i in 0..len {
                    let grow = g.row(i);
                    let arow = ga.row_mut(start + i);
                    for j in 0..arow.len() {
                        arow[j] += grow[j];
                    }
                }
            }),
        )
    }

    /// Column-wise mean over rows: `R x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        assert!(r > 0);
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            let row = va.row(i);
            let orow = out.row_mut(0);
            for j in 0..c {
                orow[j] += row[j];
            }
        }
        out.data_mut().iter_mut().for_each(|x| *x /= r as f64);
        self.custom(
            out,
            Box::new(move |_t, g, sink| {
                let ga = sink.get_mut(a);
                let scale = 1.0 / r as f64;
                for i in 0..r {
                    let arow = ga.row_mut(i);
                    for j in 0..c {
                        arow[j] += g.at(0, j) * scale;
                    }
                }
            }),
        )
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.value(a).data().iter().sum();
        self.custom(
            Tensor::scalar(s),
            Box::new(move |_t, g, sink| {
                let gv = g.item();
                let ga = sink.get_mut(a);
                ga.data_mut().iter_mut().for_each(|x| *x += gv);
            }),
        )
    }

    /// Inner product with a constant tensor, as a scalar node.
    pub fn dot_const(&mut self, a: ValueId, weights: Tensor) -> ValueId {
        let va = self.value(a);
        assert!(va.same_shape(&weights), "dot_const shape mismatch");
        let s: f64 = va.data().iter().zip(weights.data()).map(|(x, y)| x * y).sum();
        self.custom(
            Tensor::scalar(s),
            Box::new(move |_t, g, sink| {
                let gv = g.item();
                let ga = sink.get_mut(a);
                for (x, w) in ga.data_mut().iter_mut().zip(weights.data()) {
                    *x += gv * w;
                }
            }),
        )
    }

    /// Multi-head scaled dot-product attention with an optional permission
    /// mask. Disallowed logits receive an additive `MASK_NEG` before the
    /// softmax, which makes their post-softmax weight exactly +0.0.
    pub fn masked_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        heads: usize,
        mask: Option<Arc<AttnMask>>,
    ) -> Result<ValueId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = (vq.rows(), vq.cols());
        let lk = vk.rows();
        if vk.cols() != d || vv.cols() != d || vv.rows() != lk {
            return Err(Error::Shape(format!(
                "attention shapes incompatible: q {:?} k {:?} v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        if d % heads != 0 {
            return Err(Error::Shape(format!("model dim {d} not divisible by {heads} heads")));
        }
        if let Some(m) = &mask {
            if m.rows != lq || m.cols != lk {
                return Err(Error::Shape(format!(
                    "mask {}x{} does not cover attention {}x{}",
                    m.rows, m.cols, lq, lk
                )));
            }
            for i in 0..lq {
                if !m.row_has_any(i) {
                    return Err(Error::Shape(format!("attention mask row {i} allows no positions")));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(lq, d);
        // weights[h][i * lk + j]
        let mut weights = vec![vec![0.0; lq * lk]; heads];
        for h in 0..heads {
            let off = h * dh;
            let w = &mut weights[h];
            for i in 0..lq {
                let qrow = &vq.row(i)[off..off + dh];
                let logits = &mut w[i * lk..(i + 1) * lk];
                for j in 0..lk {
                    let krow = &vk.row(j)[off..off + dh];
                    let mut dot = 0.0;
                    for t in 0..dh {
                        dot += qrow[t] * krow[t];
                    }
                    let mut logit = dot * scale;
                    if let Some(m) = &mask {
                        if !m.allowed(i, j) {
                            logit += MASK_NEG;
                        }
                    }
                    logits[j] = logit;
                }
                softmax_in_place(logits);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for j in 0..lk {
                    let wj = logits[j];
                    if wj == 0.0 {
                        continue;
                    }
                    let vrow = &vv.row(j)[off..off + dh];
                    for t in 0..dh {
                        orow[t] += wj * vrow[t];
                    }
                }
            }
        }
        Ok(self.custom(
            out,
            Box::new(move |t, g, sink| {
                let vq = t.value(q);
                let vk = t.value(k);
                let vv = t.value(v);
                let mut gq = Tensor::zeros(lq, d);
                let mut gk = Tensor::zeros(lk, d);
                let mut gv = Tensor::zeros(lk, d);
                for h in 0..heads {
                    let off = h * dh;
                    let w = &weights[h];
                    for i in 0..lq {
                        let grow = &g.row(i)[off..off + dh];
                        let wrow = &w[i * lk..(i + 1) * lk];
                        // dw[j] = <g_i, v_j>; also accumulate dv.
                        let mut dw = vec![0.0; lk];
                        for j in 0..lk {
                            let wj = wrow[j];
                            let vrow = &vv.row(j)[off..off + dh];
                            let mut dot = 0.0;
                            for t in 0..dh {
                                dot += grow[t] * vrow[t];
                            }
                            dw[j] = dot;
                            if wj != 0.0 {
                                let gvrow = &mut gv.row_mut(j)[off..off + dh];
                                for t in 0..dh {
                                    gvrow[t] += wj * grow[t];
                                }
                            }
                        }
                        // softmax backward: ds = w * (dw - <dw, w>)
                        let mut dot_dw_w = 0.0;
                        for j in 0..lk {
                            dot_dw_w += dw[j] * wrow[j];
                        }
                        let qrow = &vq.row(i)[off..off + dh];
                        let gqrow = &mut gq.row_mut(i)[off..off + dh];
                        for j in 0..lk {
                            let ds = wrow[j] * (dw[j] - dot_dw_w);
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &vk.row(j)[off..off + dh];
                            let gkrow = &mut gk.row_mut(j)[off..off + dh];
                            for t in 0..dh {
                                gqrow[t] += ds * scale * krow[t];
                                gkrow[t] += ds * scale * qrow[t];
                            }
                        }
                    }
                }
                acc(sink.get_mut(q), gq.data());
                acc(sink.get_mut(k), gk.data());
                acc(sink.get_mut(v), gv.data());
            }),
        ))
    }

    /// Masked token-level cross entropy: `-sum_i m_i log p(target_i) / sum_i m_i`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: Vec<usize>,
        supervised: Vec<f64>,
    ) -> Result<ValueId> {
        let vl = self.value(logits);
        let (r, vocab) = (vl.rows(), vl.cols());
        if targets.len() != r || supervised.len() != r {
            return Err(Error::Shape(format!(
                "cross entropy rows {} vs targets {} / mask {}",
                r,
                targets.len(),
                supervised.len()
            )));
        }
        for &t in &targets {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t as u32, vocab });
            }
        }
        let msum: f64 = supervised.iter().sum();
        if msum <= 0.0 {
            return Err(Error::Loss("text loss has no supervised positions".into()));
        }
        let mut loss = 0.0;
        for i in 0..r {
            if supervised[i] == 0.0 {
                continue;
            }
            let row = vl.row(i);
            let lse = log_sum_exp(row);
            loss -= supervised[i] * (row[targets[i]] - lse);
        }
        loss /= msum;
        Ok(self.custom(
            Tensor::scalar(loss),
            Box::new(move |t, g, sink| {
                let gv = g.item();
                let vl = t.value(logits);
                let gl = sink.get_mut(logits);
                for i in 0..r {
                    let m = supervised[i];
                    if m == 0.0 {
                        continue;
                    }
                    let row = vl.row(i);
                    let lse = log_sum_exp(row);
                    let grow = gl.row_mut(i);
                    let coeff = gv * m / msum;
                    for j in 0..vocab {
                        let p = (row[j] - lse).exp();
                        grow[j] += coeff * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
            }),
        ))
    }

    /// Mean binary cross entropy between logits and constant {0,1} targets.
    pub fn bce_logits_mean(&mut self, logits: ValueId, targets: Tensor) -> ValueId {
        let vl = self.value(logits);
        assert!(vl.same_shape(&targets), "bce target shape mismatch");
        let n = vl.len() as f64;
        let mut loss = 0.0;
        for (&x, &t) in vl.data().iter().zip(targets.data()) {
            loss += bce_logit_scalar(x, t);
        }
        loss /= n;
        self.custom(
            Tensor::scalar(loss),
            Box::new(move |t, g, sink| {
                let gv = g.item() / n;
                let vl = t.value(logits);
                let gl = sink.get_mut(logits);
                for i in 0..vl.len() {
                    let s = sigmoid_scalar(vl.data()[i]);
                    gl.data_mut()[i] += gv * (s - targets.data()[i]);
                }
            }),
        )
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(backward) = &self.nodes[i].backward {
                let (before, _) = grads.split_at_mut(i);
                let mut sink = GradSink { grads: before, shapes: &shapes[..i] };
                backward(self, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Backward plus accumulation of parameter gradients into the store.
    ///
    /// Calling this repeatedly without zeroing the store adds gradients.
    pub fn backward_into(&self, loss: ValueId, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(pid, vid) in &self.bindings {
            if let Some(g) = grads.grad(vid) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }
}

fn acc(target: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (x, y) in target.data_mut().iter_mut().zip(src) {
        *x += y;
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `BCE(sigmoid(x), t)` for a single logit.
pub fn bce_logit_scalar(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
