//! Batched multi-head dot-product attention and the relative positional
//! encoding added to its output.

use crate::tensor::Tensor;

/// Key-validity mask over `[batch, n_keys]`; `None` means all keys are valid.
pub type KeyMask<'a> = Option<&'a [bool]>;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Tensor,
    /// `[batch, heads, m, n]`, zero at masked keys.
    pub probs: Vec<f64>,
}

fn dims(q: &Tensor, k: &Tensor, v: &Tensor) -> (usize, usize, usize, usize, usize) {
    let (b, m, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let n = k.shape()[1];
    assert_eq!(k.shape(), &[b, n, d], "attention: key shape");
    assert_eq!(v.shape()[..2], [b, n], "attention: value shape");
    (b, m, n, d, v.shape()[2])
}

/// `softmax(Q Kᵀ / √d_head) V` per batch item and head.
/// `q: [B, m, d]`, `k: [B, n, d]`, `v: [B, n, dv]`; `d` and `dv` split
/// evenly across `heads`. Rows whose keys are all masked produce zeros.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: KeyMask) -> AttentionOutput {
    let (b, m, n, d, dv) = dims(q, k, v);
    assert!(d % heads == 0 && dv % heads == 0, "attention: dims not divisible by heads");
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * m * dv];
    let mut probs = vec![0.0; b * heads * m * n];
    let mut row = vec![0.0; n];
    for bi in 0..b {
        let valid = |j: usize| mask.map_or(true, |mk| mk[bi * n + j]);
        for h in 0..heads {
            for i in 0..m {
                let qrow = &qd[(bi * m + i) * d + h * dh..(bi * m + i) * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    if !valid(j) {
                        continue;
                    }
                    let krow = &kd[(bi * n + j) * d + h * dh..(bi * n + j) * d + (h + 1) * dh];
                    *s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    if valid(j) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                }
                let p = &mut probs[((bi * heads + h) * m + i) * n..((bi * heads + h) * m + i + 1) * n];
                let orow = &mut out[(bi * m + i) * dv + h * dvh..(bi * m + i) * dv + (h + 1) * dvh];
                for j in 0..n {
                    if !valid(j) {
                        continue;
                    }
                    let pj = row[j] / sum;
                    p[j] = pj;
                    let vrow = &vd[(bi * n + j) * dv + h * dvh..(bi * n + j) * dv + (h + 1) * dvh];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    AttentionOutput {
        out: Tensor::new(vec![b, m, dv], out).unwrap(),
        probs,
    }
}

pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

pub fn scaled_dot_attention_vjp(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, probs: &[f64], up: &Tensor) -> AttentionGrads {
    let (b, m, n, d, dv) = dims(q, k, v);
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, ud) = (q.data(), k.data(), v.data(), up.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; n];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..m {
                let p = &probs[((bi * heads + h) * m + i) * n..((bi * heads + h) * m + i + 1) * n];
                let urow = &ud[(bi * m + i) * dv + h * dvh..(bi * m + i) * dv + (h + 1) * dvh];
                let mut dot = 0.0;
                for j in 0..n {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let voff = (bi * n + j) * dv + h * dvh;
                    let vrow = &vd[voff..voff + dvh];
                    dp[j] = urow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                    dot += p[j] * dp[j];
                    for (g, u) in gv[voff..voff + dvh].iter_mut().zip(urow) {
                        *g += p[j] * u;
                    }
                }
                let qoff = (bi * m + i) * d + h * dh;
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let koff = (bi * n + j) * d + h * dh;
                    for c in 0..dh {
                        gq[qoff + c] += ds * kd[koff + c];
                        gk[koff + c] += ds * qd[qoff + c];
                    }
                }
            }
        }
    }
    AttentionGrads {
        dq: Tensor::new(q.shape().to_vec(), gq).unwrap(),
        dk: Tensor::new(k.shape().to_vec(), gk).unwrap(),
        dv: Tensor::new(v.shape().to_vec(), gv).unwrap(),
    }
}

/// Pairwise encoding `ReLU((p_key - p_query) · W_pos)`, shape `[m, n, d]`.
pub fn pairwise_pos_encoding(p_query: &Tensor, p_key: &Tensor, w_pos: &Tensor) -> Tensor {
    let (m, pd) = (p_query.shape()[0], p_query.shape()[1]);
    let n = p_key.shape()[0];
    let d = w_pos.shape()[1];
    let mut out = vec![0.0; m * n * d];
    for i in 0..m {
        for j in 0..n {
            let o = &mut out[(i * n + j) * d..(i * n + j + 1) * d];
            for p in 0..pd {
                let delta = p_key.data()[j * pd + p] - p_query.data()[i * pd + p];
                for (ov, wv) in o.iter_mut().zip(&w_pos.data()[p * d..(p + 1) * d]) {
                    *ov += delta * wv;
                }
            }
            for ov in o.iter_mut() {
                *ov = ov.max(0.0);
            }
        }
    }
    Tensor::new(vec![m, n, d], out).unwrap()
}

/// Query-shaped encoding: the pairwise encoding averaged uniformly over the
/// valid keys. `deltas: [B, m, n, P]` holds `p_key - p_query`.
pub fn relative_pos_encoding(deltas: &Tensor, w_pos: &Tensor, mask: KeyMask) -> Tensor {
    let s = deltas.shape();
    let (b, m, n, pd) = (s[0], s[1], s[2], s[3]);
    let d = w_pos.shape()[1];
    assert_eq!(w_pos.shape()[0], pd, "relative_pos_encoding: position width");
    let (dd, wd) = (deltas.data(), w_pos.data());
    let mut out = vec![0.0; b * m * d];
    let mut z = vec![0.0; d];
    for bi in 0..b {
        let valid = |j: usize| mask.map_or(true, |mk| mk[bi * n + j]);
        let count = (0..n).filter(|&j| valid(j)).count();
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        for i in 0..m {
            let o = &mut out[(bi * m + i) * d..(bi * m + i + 1) * d];
            for j in (0..n).filter(|&j| valid(j)) {
                let drow = &dd[((bi * m + i) * n + j) * pd..((bi * m + i) * n + j + 1) * pd];
                z.iter_mut().for_each(|v| *v = 0.0);
                for (p, &dv) in drow.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (zv, wv) in z.iter_mut().zip(&wd[p * d..(p + 1) * d]) {
                        *zv += dv * wv;
                    }
                }
                for (ov, zv) in o.iter_mut().zip(&z) {
                    *ov += zv.max(0.0) * inv;
                }
            }
        }
    }
    Tensor::new(vec![b, m, d], out).unwrap()
}

/// Gradient of [`relative_pos_encoding`] with respect to `w_pos`.
pub fn relative_pos_encoding_vjp(deltas: &Tensor, w_pos: &Tensor, mask: KeyMask, up: &Tensor) -> Tensor {
    let s = deltas.shape();
    let (b, m, n, pd) = (s[0], s[1], s[2], s[3]);
    let d = w_pos.shape()[1];
    let (dd, wd, ud) = (deltas.data(), w_pos.data(), up.data());
    let mut gw = vec![0.0; wd.len()];
    let mut z = vec![0.0; d];
    for bi in 0..b {
        let valid = |j: usize| mask.map_or(true, |mk| mk[bi * n + j]);
        let count = (0..n).filter(|&j| valid(j)).count();
        if count == 0 {
            continue;
        }
        let inv = 1.0 / count as f64;
        for i in 0..m {
            let urow = &ud[(bi * m + i) * d..(bi * m + i + 1) * d];
            for j in (0..n).filter(|&j| valid(j)) {
                let drow = &dd[((bi * m + i) * n + j) * pd..((bi * m + i) * n + j + 1) * pd];
                z.iter_mut().for_each(|v| *v = 0.0);
                for (p, &dv) in drow.iter().enumerate() {
                    for (zv, wv) in z.iter_mut().zip(&wd[p * d..(p + 1) * d]) {
                        *zv += dv * wv;
                    }
                }
                for (p, &dv) in drow.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let g = &mut gw[p * d..(p + 1) * d];
                    for c in 0..d {
                        if z[c] > 0.0 {
                            g[c] += dv * urow[c] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(w_pos.shape().to_vec(), gw).unwrap()
}
