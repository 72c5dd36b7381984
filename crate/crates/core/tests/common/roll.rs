//! Roll-attend-unroll references for both shifted window attentions. The
//! references physically roll (angular) or pad (radial) the map, attend in
//! consecutive windows and scatter back, using only value-level kernels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use polarbev::ga::{ga_window_attention, GaConfig};
use polarbev::grr::angular_window_attention;
use polarbev::kernels::attention::{relative_pos_encoding, scaled_dot_attention};
use polarbev::kernels::dense::linear;
use polarbev::kernels::{AttentionParams, POS_DIM};
use polarbev::view::GridView;
use polarbev::voxelize::FeatureMap;
use polarbev::Tensor;

use super::{rand_tensor, rng, Check};

pub const ROLL_CASES: u64 = 40;

pub fn random_attention(rng: &mut ChaCha8Rng, c: usize, heads: usize, with_pos: bool) -> AttentionParams {
    AttentionParams {
        w_q: rand_tensor(rng, &[c, c]),
        w_k: rand_tensor(rng, &[c, c]),
        w_v: rand_tensor(rng, &[c, c]),
        w_pos: with_pos.then(|| rand_tensor(rng, &[POS_DIM, c])),
        w_o: with_pos.then(|| (rand_tensor(rng, &[c, c]), rand_tensor(rng, &[c]))),
        n_heads: heads,
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// One window of `tokens` rows through the attention block. `x`, `g` are
/// `[T, C]`; `valid` marks real tokens.
fn attend_window(x: &Tensor, g: Option<&Tensor>, deltas: Option<&Tensor>, valid: &[bool], p: &AttentionParams) -> Tensor {
    let t = x.rows();
    let add = |a: Tensor, b: Option<&Tensor>| match b {
        Some(b) => Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(u, v)| u + v).collect()).unwrap(),
        None => a,
    };
    let q = add(linear(x, &p.w_q, None), g);
    let k = add(linear(x, &p.w_k, None), g);
    let v = add(linear(x, &p.w_v, None), g);
    let (d, dv) = (q.last_dim(), v.last_dim());
    let q = q.reshape(&[1, t, d]).unwrap();
    let k = k.reshape(&[1, t, d]).unwrap();
    let v = v.reshape(&[1, t, dv]).unwrap();
    let mask = (!valid.iter().all(|&b| b)).then_some(valid);
    let mut y = scaled_dot_attention(&q, &k, &v, p.n_heads, mask).out;
    if let (Some(w), Some(dl)) = (&p.w_pos, deltas) {
        y = add(y, Some(&relative_pos_encoding(dl, w, mask)));
    }
    let y = y.reshape(&[t, dv]).unwrap();
    match &p.w_o {
        Some((w, b)) => linear(&y, w, Some(b)),
        None => y,
    }
}

/// Angular reference over a condensed map `(N, A, C)`: roll the columns
/// left by `shift`, attend in runs of `w_a` columns, roll back.
pub fn angular_reference(frep: &FeatureMap, view: &GridView, idx: &[Vec<usize>], w_a: usize, shift: usize, p: &AttentionParams) -> FeatureMap {
    let (n, aa, c) = (frep.rows(), frep.cols(), frep.channels());
    let rolled: Vec<usize> = (0..aa).map(|pos| (pos + shift) % aa).collect();
    let mut out = vec![0.0; n * aa * c];
    for win in rolled.chunks(w_a) {
        let tokens: Vec<(usize, usize)> = win.iter().flat_map(|&a| (0..n).map(move |k| (a, k))).collect();
        let t = tokens.len();
        let x = Tensor::new(vec![t, c], tokens.iter().flat_map(|&(a, k)| frep.pixel(k, a).to_vec()).collect()).unwrap();
        let mut dl = Vec::with_capacity(t * t * POS_DIM);
        for &(aq, kq) in &tokens {
            for &(ak, kk) in &tokens {
                dl.extend(view.rel_delta((idx[aq][kq], aq), (idx[ak][kk], ak)));
            }
        }
        let dl = Tensor::new(vec![1, t, t, POS_DIM], dl).unwrap();
        let y = attend_window(&x, None, Some(&dl), &vec![true; t], p);
        for (i, &(a, k)) in tokens.iter().enumerate() {
            out[(k * aa + a) * c..(k * aa + a + 1) * c].copy_from_slice(&y.data()[i * c..(i + 1) * c]);
        }
    }
    FeatureMap(Tensor::new(vec![n, aa, c], out).unwrap())
}

/// One aggregation stack by hand: zero-pad the radial axis in front by the
/// shift (plus the remainder that makes it a whole number of windows), roll
/// the angular axis left by the shift, attend per `w x w` window with the
/// padding masked, and add the result back in place.
pub fn ga_stack_reference(cur: &FeatureMap, geo: &FeatureMap, w: usize, shift: usize, p: &AttentionParams) -> FeatureMap {
    let (rr, aa, c) = (cur.rows(), cur.cols(), cur.channels());
    let front = shift + (w - rr % w) % w;
    let padded_rows = (rr + front).div_ceil(w) * w;
    let row_of = |pr: usize| pr.checked_sub(front).filter(|&i| i < rr);
    let col_of = |pa: usize| (pa + shift) % aa;
    let mut out = cur.tensor().data().to_vec();
    for wr in 0..padded_rows / w {
        for wa in 0..aa / w {
            let mut cells = Vec::with_capacity(w * w);
            for tr in 0..w {
                for ta in 0..w {
                    cells.push(row_of(wr * w + tr).map(|i| (i, col_of(wa * w + ta))));
                }
            }
            let gather = |m: &FeatureMap| {
                let data = cells.iter().flat_map(|cell| match cell {
                    Some((i, j)) => m.pixel(*i, *j).to_vec(),
                    None => vec![0.0; c],
                });
                Tensor::new(vec![w * w, c], data.collect()).unwrap()
            };
            let valid: Vec<bool> = cells.iter().map(Option::is_some).collect();
            let y = attend_window(&gather(cur), Some(&gather(geo)), None, &valid, p);
            for (t, cell) in cells.iter().enumerate() {
                if let Some((i, j)) = cell {
                    let o = (i * aa + j) * c;
                    for ch in 0..c {
                        out[o + ch] += y.data()[t * c + ch];
                    }
                }
            }
        }
    }
    FeatureMap(Tensor::new(vec![rr, aa, c], out).unwrap())
}

pub fn ga_reference(fneck: &FeatureMap, fgeo: &FeatureMap, cfg: &GaConfig, att: &[AttentionParams]) -> FeatureMap {
    let mut cur = fneck.clone();
    for (i, p) in att.iter().enumerate().take(cfg.n_stacks) {
        cur = ga_stack_reference(&cur, fgeo, cfg.w_g, cfg.stack_shift(i), p);
    }
    cur
}

/// Random representatives: `n` distinct rows per column.
pub fn random_indices(rng: &mut ChaCha8Rng, rows: usize, cols: usize, n: usize) -> Vec<Vec<usize>> {
    (0..cols)
        .map(|_| {
            let mut all: Vec<usize> = (0..rows).collect();
            all.shuffle(rng);
            all.truncate(n);
            all
        })
        .collect()
}

pub fn check_angular() -> Check {
    let mut windows = 0;
    for seed in 0..ROLL_CASES {
        let mut r = rng(seed);
        let w_a = r.gen_range(2..=4);
        let cols = w_a * r.gen_range(2..=4);
        let rows = r.gen_range(2..=6);
        let n = r.gen_range(1..=rows.min(3));
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=3);
        let view = GridView::toy(rows, cols);
        let idx = random_indices(&mut r, rows, cols, n);
        let frep = FeatureMap(rand_tensor(&mut r, &[n, cols, c]));
        let p = random_attention(&mut r, c, heads, true);
        for shift in 0..w_a {
            let got = angular_window_attention(&frep, &view, &idx, w_a, shift, &p);
            let want = angular_reference(&frep, &view, &idx, w_a, shift, &p);
            if !same_bits(got.tensor().data(), want.tensor().data()) {
                return Err(format!("angular case {seed}, shift {shift}: not bitwise equal"));
            }
            windows += cols / w_a;
        }
    }
    Ok(format!("angular {ROLL_CASES} maps x all shifts ({windows} windows) bitwise"))
}

pub fn check_ga() -> Check {
    for seed in 0..ROLL_CASES {
        let mut r = rng(1000 + seed);
        let w = r.gen_range(2..=4);
        let cfg = GaConfig { w_g: w, shift: r.gen_range(1..w), n_stacks: r.gen_range(1..=3), mlp_hidden: 4 };
        let cols = w * r.gen_range(2..=4);
        let rows = r.gen_range(2..=9);
        let heads = r.gen_range(1..=2);
        let c = heads * r.gen_range(1..=3);
        let view = GridView::toy(rows, cols);
        let fneck = FeatureMap(rand_tensor(&mut r, &[rows, cols, c]));
        let fgeo = FeatureMap(rand_tensor(&mut r, &[rows, cols, c]));
        let att: Vec<AttentionParams> = (0..cfg.n_stacks).map(|_| random_attention(&mut r, c, heads, false)).collect();
        let got = ga_window_attention(&fneck, &fgeo, &view, &cfg, &att);
        let want = ga_reference(&fneck, &fgeo, &cfg, &att);
        if !same_bits(got.tensor().data(), want.tensor().data()) {
            return Err(format!("aggregation case {seed} ({rows}x{cols}, w={w}, shift={}): not bitwise equal", cfg.shift));
        }
    }
    Ok(format!("aggregation {ROLL_CASES} maps bitwise"))
}

/// A window that straddles the -pi/pi seam: with shift `s` the last window
/// holds the final `w - s` columns followed by the first `s`.
pub fn check_seam() -> Check {
    let (rows, cols, w_a, n, c) = (3, 8, 4, 2, 4);
    let view = GridView::toy(rows, cols);
    let mut r = rng(99);
    let idx = random_indices(&mut r, rows, cols, n);
    let frep = FeatureMap(rand_tensor(&mut r, &[n, cols, c]));
    let p = random_attention(&mut r, c, 2, true);
    let got = angular_window_attention(&frep, &view, &idx, w_a, 2, &p);
    // Columns 6, 7, 0, 1 form one window; perturbing column 0 must move
    // column 7 and leave column 5 untouched.
    let mut bumped = frep.clone();
    for v in &mut bumped.0.data_mut()[..c] {
        *v += 1.0;
    }
    let moved = angular_window_attention(&bumped, &view, &idx, w_a, 2, &p);
    let col = |m: &FeatureMap, a: usize| m.pixel(0, a).to_vec();
    if col(&got, 7) == col(&moved, 7) {
        return Err("column 7 did not see column 0 across the seam".into());
    }
    if col(&got, 5) != col(&moved, 5) {
        return Err("column 5 saw column 0 outside its window".into());
    }
    Ok("seam window couples columns 7 and 0".into())
}

pub fn check_shift_roll() -> Check {
    Ok([check_angular()?, check_ga()?, check_seam()?].join("; "))
}
