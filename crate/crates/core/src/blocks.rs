//! Tape-level attention block shared by the re-alignment and aggregation
//! modules.

use std::rc::Rc;

use crate::kernels::AttentionParams;
use crate::tape::{RowIndex, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wpos: Option<Var>,
    pub wo: Option<(Var, Var)>,
    pub heads: usize,
}

impl AttentionParams {
    /// Records the weights on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            wq: tape.param(self.w_q.clone()),
            wk: tape.param(self.w_k.clone()),
            wv: tape.param(self.w_v.clone()),
            wpos: self.w_pos.as_ref().map(|w| tape.param(w.clone())),
            wo: self.w_o.as_ref().map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone()))),
            heads: self.n_heads,
        }
    }
}

/// Batched attention block. `q_in: [b·m, C]`, `kv_in: [b·n, C]`.
/// `geo` (same rows as `q_in`, only valid for self-attention) is added to
/// each of the three projections. `deltas: [b, m, n, 4]` feeds the relative
/// positional term. Returns `[b·m, C_out]`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    (b, m, n): (usize, usize, usize),
    p: &AttnVars,
    deltas: Option<Rc<Tensor>>,
    mask: Option<Rc<[bool]>>,
    geo: Option<Var>,
) -> Var {
    let mut q = tape.linear(q_in, p.wq, None);
    let mut k = tape.linear(kv_in, p.wk, None);
    let mut v = tape.linear(kv_in, p.wv, None);
    if let Some(g) = geo {
        q = tape.add(q, g);
        k = tape.add(k, g);
        v = tape.add(v, g);
    }
    let (d, dv) = (tape.value(q).last_dim(), tape.value(v).last_dim());
    let q = tape.reshape(q, &[b, m, d]);
    let k = tape.reshape(k, &[b, n, d]);
    let v = tape.reshape(v, &[b, n, dv]);
    let mut y = tape.attention(q, k, v, p.heads, mask.clone());
    if let (Some(wpos), Some(deltas)) = (p.wpos, deltas) {
        let e = tape.rel_pos(wpos, deltas, mask);
        y = tape.add(y, e);
    }
    let y = tape.reshape(y, &[b * m, dv]);
    match p.wo {
        Some((w, bias)) => tape.linear(y, w, Some(bias)),
        None => y,
    }
}

/// Gather list from plain indices.
pub fn rows(idx: impl IntoIterator<Item = usize>) -> RowIndex {
    idx.into_iter().map(|i| Some(i as u32)).collect()
}

/// Gather list from optional indices; `None` rows are zero.
pub fn padded_rows(idx: &[Option<usize>]) -> RowIndex {
    idx.iter().map(|i| i.map(|i| i as u32)).collect()
}

/// Key mask for a padded plan, or `None` when nothing is padded.
pub fn plan_mask(idx: &[Option<usize>]) -> Option<Rc<[bool]>> {
    if idx.iter().all(Option::is_some) {
        None
    } else {
        Some(idx.iter().map(Option::is_some).collect())
    }
}
