//! Representative-row re-alignment: condense every angular column to a few
//! representative pixels, mix them across azimuth with shifted window
//! attention, and broadcast the result back onto the map.

use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::blocks::{attend, padded_rows, plan_mask, rows, AttnVars};
use crate::error::{Error, Result};
use crate::kernels::{AttentionParams, POS_DIM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view::GridView;
use crate::voxelize::FeatureMap;
use crate::window::{inverse, plan_1d};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrrConfig {
    /// Radial max-filter neighborhood (odd).
    pub s: usize,
    /// Representatives per column.
    pub n: usize,
    /// Angular window width in columns.
    pub w_a: usize,
    /// Column shift of every second stack.
    pub shift: usize,
    pub n_stacks: usize,
}

impl Default for GrrConfig {
    fn default() -> Self {
        Self {
            s: 3,
            n: 4,
            w_a: 8,
            shift: 4,
            n_stacks: 2,
        }
    }
}

impl GrrConfig {
    pub fn validate(&self, view: &GridView) -> Result<()> {
        if self.s % 2 == 0 {
            return Err(Error::config("grr.s must be odd"));
        }
        if self.n == 0 || self.n > view.rows {
            return Err(Error::config(format!("grr.n must be in 1..={}", view.rows)));
        }
        if self.w_a == 0 || (view.circular && view.cols % self.w_a != 0) {
            return Err(Error::config(format!("grr.w_a={} does not divide {} columns", self.w_a, view.cols)));
        }
        if self.shift >= self.w_a {
            return Err(Error::config("grr.shift must be below grr.w_a"));
        }
        Ok(())
    }

    /// Shift used by stack `i`: unshifted, then shifted, alternating.
    pub fn stack_shift(&self, i: usize) -> usize {
        if i % 2 == 1 {
            self.shift
        } else {
            0
        }
    }
}

/// Representatives chosen for every column.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSet {
    /// `indices[a][k]`: radial index of the k-th representative of column a.
    pub indices: Vec<Vec<usize>>,
    /// Condensed features, `(N, A, C)`.
    pub features: FeatureMap,
    /// `(r, a, x, y)` of each representative, laid out `(N, A)`.
    pub positions: Vec<[f64; 4]>,
}

/// Per-pixel score, row-major `(R, A)`: the channel maximum.
pub fn radial_scores(f: &FeatureMap) -> Vec<f64> {
    f.tensor()
        .data()
        .chunks(f.channels())
        .map(|px| px.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Keeps scores equal to the maximum of their `s x 1` radial neighborhood
/// (zero beyond the borders); everything else becomes `-inf`.
pub fn radial_local_max_suppress(scores: &[f64], n_rows: usize, n_cols: usize, s: usize) -> Vec<f64> {
    let h = (s / 2) as isize;
    let mut out = vec![f64::NEG_INFINITY; scores.len()];
    for i in 0..n_rows {
        for j in 0..n_cols {
            let mut m = f64::NEG_INFINITY;
            for di in -h..=h {
                let r = i as isize + di;
                let v = if r < 0 || r >= n_rows as isize { 0.0 } else { scores[r as usize * n_cols + j] };
                m = m.max(v);
            }
            let v = scores[i * n_cols + j];
            if v >= m {
                out[i * n_cols + j] = v;
            }
        }
    }
    out
}

fn by_score(col: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| col[*b].total_cmp(&col[*a]).then(a.cmp(b))
}

/// Top-`n` radial indices of one column. Surviving local maxima come first;
/// if fewer than `n` survive, the rest are filled from the remaining
/// positions by original score. The result is ordered by score, lower
/// index first on ties.
pub fn column_topk(scores: &[f64], suppressed: &[f64], n: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..scores.len()).filter(|&i| suppressed[i].is_finite()).collect();
    kept.sort_by(by_score(scores));
    kept.truncate(n);
    if kept.len() < n {
        let mut rest: Vec<usize> = (0..scores.len()).filter(|i| !kept.contains(i)).collect();
        rest.sort_by(by_score(scores));
        kept.extend(rest.into_iter().take(n - kept.len()));
    }
    kept.sort_by(by_score(scores));
    kept
}

/// Representative indices for every column, `[a][k]`.
pub fn select_topk(scores: &[f64], suppressed: &[f64], n_rows: usize, n_cols: usize, n: usize) -> Vec<Vec<usize>> {
    (0..n_cols)
        .map(|j| {
            let col: Vec<f64> = (0..n_rows).map(|i| scores[i * n_cols + j]).collect();
            let sup: Vec<f64> = (0..n_rows).map(|i| suppressed[i * n_cols + j]).collect();
            column_topk(&col, &sup, n)
        })
        .collect()
}

/// Selection for a row-major `(R·A, C)` feature tensor.
pub fn select_representatives(f: &Tensor, view: &GridView, cfg: &GrrConfig) -> Vec<Vec<usize>> {
    let fm = FeatureMap(f.clone().reshape(&[view.rows, view.cols, f.last_dim()]).expect("feature shape"));
    let scores = radial_scores(&fm);
    let sup = radial_local_max_suppress(&scores, view.rows, view.cols, cfg.s);
    select_topk(&scores, &sup, view.rows, view.cols, cfg.n)
}

/// Gather list that reads the map column by column: row `a·R + r`.
fn column_major(view: &GridView) -> Vec<usize> {
    (0..view.cols).flat_map(|a| (0..view.rows).map(move |r| r * view.cols + a)).collect()
}

/// Condense attention. `f`: row-major `(R·A, C)`; `fcol`: the same map in
/// column-major order. Returns representatives `(A·N, C)`, column-major.
pub fn condense_t(tape: &mut Tape, f: Var, fcol: Var, view: &GridView, idx: &[Vec<usize>], p: &AttnVars) -> Var {
    let (rr, aa, n) = (view.rows, view.cols, idx[0].len());
    let fsel = tape.gather(f, rows((0..aa).flat_map(|a| idx[a].iter().map(move |&r| r * aa + a))));
    let mut deltas = Vec::with_capacity(aa * n * rr * POS_DIM);
    for (a, col) in idx.iter().enumerate() {
        for &rq in col {
            for rk in 0..rr {
                deltas.extend(view.rel_delta((rq, a), (rk, a)));
            }
        }
    }
    let deltas = Rc::new(Tensor::new(vec![aa, n, rr, POS_DIM], deltas).unwrap());
    attend(tape, fsel, fcol, (aa, n, rr), p, Some(deltas), None, None)
}

/// Window attention across azimuth over the representatives `(A·N, C)`,
/// column-major. Windows span `w_a` columns and all `N` representatives.
pub fn angular_t(tape: &mut Tape, frep: Var, view: &GridView, idx: &[Vec<usize>], w_a: usize, shift: usize, p: &AttnVars) -> Var {
    let n = idx[0].len();
    let plan = plan_1d(view.cols, w_a, shift, view.circular);
    let tokens: Vec<Option<(usize, usize)>> = plan
        .iter()
        .flat_map(|c| (0..n).map(move |k| c.map(|a| (a, k))))
        .collect();
    let t = w_a * n;
    let n_win = tokens.len() / t;
    let mut deltas = vec![0.0; tokens.len() * t * POS_DIM];
    for w in 0..n_win {
        for i in 0..t {
            let Some((aq, kq)) = tokens[w * t + i] else { continue };
            for j in 0..t {
                let Some((ak, kk)) = tokens[w * t + j] else { continue };
                let off = ((w * t + i) * t + j) * POS_DIM;
                deltas[off..off + POS_DIM].copy_from_slice(&view.rel_delta((idx[aq][kq], aq), (idx[ak][kk], ak)));
            }
        }
    }
    let flat: Vec<Option<usize>> = tokens.iter().map(|tk| tk.map(|(a, k)| a * n + k)).collect();
    let mask = plan_mask(&flat);
    let x = tape.gather(frep, padded_rows(&flat));
    let deltas = Rc::new(Tensor::new(vec![n_win, t, t, POS_DIM], deltas).unwrap());
    let y = attend(tape, x, x, (n_win, t, t), p, Some(deltas), mask, None);
    tape.gather(y, rows(inverse(&flat, view.cols * n)))
}

/// Reverse condense: every pixel of a column attends to the column's
/// re-aligned representatives; the result is added to `f`.
pub fn broadcast_t(tape: &mut Tape, f: Var, fcol: Var, fa: Var, view: &GridView, idx: &[Vec<usize>], p: &AttnVars) -> Var {
    let (rr, aa, n) = (view.rows, view.cols, idx[0].len());
    let mut deltas = Vec::with_capacity(aa * rr * n * POS_DIM);
    for (a, col) in idx.iter().enumerate() {
        for rq in 0..rr {
            for &rk in col {
                deltas.extend(view.rel_delta((rq, a), (rk, a)));
            }
        }
    }
    let deltas = Rc::new(Tensor::new(vec![aa, rr, n, POS_DIM], deltas).unwrap());
    let y = attend(tape, fcol, fa, (aa, rr, n), p, Some(deltas), None, None);
    let back = tape.gather(y, rows((0..rr).flat_map(|r| (0..aa).map(move |a| a * rr + r))));
    tape.add(f, back)
}

/// Weights of one condense / angular / broadcast stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GrrBlockParams {
    pub condense: AttentionParams,
    pub angular: AttentionParams,
    pub broadcast: AttentionParams,
}

#[derive(Debug, Clone, Copy)]
pub struct GrrBlockVars {
    pub condense: AttnVars,
    pub angular: AttnVars,
    pub broadcast: AttnVars,
}

impl GrrBlockParams {
    pub fn bind(&self, tape: &mut Tape) -> GrrBlockVars {
        GrrBlockVars {
            condense: self.condense.bind(tape),
            angular: self.angular.bind(tape),
            broadcast: self.broadcast.bind(tape),
        }
    }
}

fn rep_set(tape: &Tape, frep: Var, view: &GridView, idx: Vec<Vec<usize>>) -> RepresentativeSet {
    let (aa, n) = (view.cols, idx[0].len());
    let src = tape.value(frep);
    let c = src.last_dim();
    let mut data = Vec::with_capacity(n * aa * c);
    let mut positions = Vec::with_capacity(n * aa);
    for k in 0..n {
        for (a, col) in idx.iter().enumerate() {
            data.extend_from_slice(&src.data()[(a * n + k) * c..(a * n + k + 1) * c]);
            positions.push(view.pixel_position(col[k], a));
        }
    }
    RepresentativeSet {
        indices: idx,
        features: FeatureMap(Tensor::new(vec![n, aa, c], data).unwrap()),
        positions,
    }
}

/// Stacked re-alignment on a row-major `(R·A, C)` map. Selection indices
/// are recomputed from the current features at every stack and are not
/// differentiated; everything downstream of them is.
pub fn grr_forward_t(tape: &mut Tape, f: Var, view: &GridView, cfg: &GrrConfig, blocks: &[GrrBlockVars]) -> (Var, Vec<RepresentativeSet>) {
    let mut cur = f;
    let mut reps = Vec::with_capacity(cfg.n_stacks);
    for (i, b) in blocks.iter().enumerate().take(cfg.n_stacks) {
        let idx = select_representatives(tape.value(cur), view, cfg);
        let fcol = tape.gather(cur, rows(column_major(view)));
        let frep = condense_t(tape, cur, fcol, view, &idx, &b.condense);
        let fa = angular_t(tape, frep, view, &idx, cfg.w_a, cfg.stack_shift(i), &b.angular);
        cur = broadcast_t(tape, cur, fcol, fa, view, &idx, &b.broadcast);
        reps.push(rep_set(tape, frep, view, idx));
    }
    (cur, reps)
}

fn flat(f: &FeatureMap) -> Tensor {
    f.tensor().clone().reshape(&[f.rows() * f.cols(), f.channels()]).unwrap()
}

fn to_map(t: &Tensor, r: usize, a: usize) -> FeatureMap {
    FeatureMap(t.clone().reshape(&[r, a, t.last_dim()]).unwrap())
}

/// Condensed map `(N, A, C)` for given representatives.
pub fn condense_attention(f: &FeatureMap, view: &GridView, idx: &[Vec<usize>], params: &AttentionParams) -> FeatureMap {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let fv = tape.constant(flat(f));
    let fcol = tape.gather(fv, rows(column_major(view)));
    let y = condense_t(&mut tape, fv, fcol, view, idx, &p);
    rep_set(&tape, y, view, idx.to_vec()).features
}

fn reps_column_major(frep: &FeatureMap) -> Tensor {
    let (n, aa, c) = (frep.rows(), frep.cols(), frep.channels());
    let mut data = Vec::with_capacity(n * aa * c);
    for a in 0..aa {
        for k in 0..n {
            data.extend_from_slice(frep.pixel(k, a));
        }
    }
    Tensor::new(vec![aa * n, c], data).unwrap()
}

/// Shifted window attention over a condensed map `(N, A, C)`.
pub fn angular_window_attention(
    frep: &FeatureMap,
    view: &GridView,
    idx: &[Vec<usize>],
    w_a: usize,
    shift: usize,
    params: &AttentionParams,
) -> FeatureMap {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(reps_column_major(frep));
    let y = angular_t(&mut tape, x, view, idx, w_a, shift, &p);
    rep_set(&tape, y, view, idx.to_vec()).features
}

/// Broadcast of re-aligned representatives `(N, A, C)` onto `f`.
pub fn broadcast_attention(f: &FeatureMap, fa: &FeatureMap, view: &GridView, idx: &[Vec<usize>], params: &AttentionParams) -> FeatureMap {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let fv = tape.constant(flat(f));
    let fcol = tape.gather(fv, rows(column_major(view)));
    let fa = tape.constant(reps_column_major(fa));
    let y = broadcast_t(&mut tape, fv, fcol, fa, view, idx, &p);
    to_map(tape.value(y), f.rows(), f.cols())
}

/// Full re-alignment on a feature map.
pub fn grr_forward(f: &FeatureMap, view: &GridView, cfg: &GrrConfig, blocks: &[GrrBlockParams]) -> Result<(FeatureMap, Vec<RepresentativeSet>)> {
    if cfg.n_stacks > 0 {
        cfg.validate(view)?;
        if blocks.len() < cfg.n_stacks {
            return Err(Error::config(format!("{} stacks configured, {} weight sets given", cfg.n_stacks, blocks.len())));
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<GrrBlockVars> = blocks.iter().take(cfg.n_stacks).map(|b| b.bind(&mut tape)).collect();
    let fv = tape.constant(flat(f));
    let (y, reps) = grr_forward_t(&mut tape, fv, view, cfg, &vars);
    Ok((to_map(tape.value(y), f.rows(), f.cols()), reps))
}
