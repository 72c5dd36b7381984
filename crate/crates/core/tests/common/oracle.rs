//! Independent brute-force references for rotated IoU, representative
//! selection, the foreground target and interpolated AP.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use polarbev::eval::{average_precision, Record, RECALL_POINTS};
use polarbev::ga::foreground_target;
use polarbev::geometry::{rotated_iou_bev, BoxBev, CartPoint, DiscretizationStrategy};
use polarbev::grr::{radial_local_max_suppress, select_topk};
use polarbev::voxelize::{GridConfig, GridSpec};

use super::{rng, uniform, Check};

pub const IOU_PAIRS: u64 = 1000;
pub const IOU_TOL: f64 = 1e-2;
pub const TOPK_CASES: u64 = 1000;
pub const FG_CASES: u64 = 100;

pub fn random_box(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> BoxBev {
    BoxBev::new(cx, cy, uniform(rng, 0.5, 5.0), uniform(rng, 0.5, 5.0), uniform(rng, -PI, PI)).unwrap()
}

/// Inside test by the sign of the cross product against each
/// counter-clockwise edge.
pub fn inside_polygon(p: CartPoint, b: &BoxBev) -> bool {
    let c = b.corners();
    (0..4).all(|k| {
        let (a, e) = (c[k], c[(k + 1) % 4]);
        (e.x - a.x) * (p.y - a.y) - (e.y - a.y) * (p.x - a.x) >= 0.0
    })
}

/// IoU by jittered stratified sampling over the joint bounding rectangle.
pub fn monte_carlo_iou(a: &BoxBev, b: &BoxBev, grid: usize, rng: &mut ChaCha8Rng) -> f64 {
    let pts: Vec<CartPoint> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let (dx, dy) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    let (mut both, mut any) = (0usize, 0usize);
    for i in 0..grid {
        for j in 0..grid {
            let p = CartPoint::new(x0 + (i as f64 + rng.gen::<f64>()) * dx, y0 + (j as f64 + rng.gen::<f64>()) * dy);
            let (ia, ib) = (inside_polygon(p, a), inside_polygon(p, b));
            both += usize::from(ia && ib);
            any += usize::from(ia || ib);
        }
    }
    if any == 0 {
        0.0
    } else {
        both as f64 / any as f64
    }
}

pub fn check_iou() -> Check {
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for seed in 0..IOU_PAIRS {
        let mut r = rng(seed);
        let (cx, cy) = (uniform(&mut r, -10.0, 10.0), uniform(&mut r, -10.0, 10.0));
        let a = random_box(&mut r, cx, cy);
        let (ox, oy) = (uniform(&mut r, -3.0, 3.0), uniform(&mut r, -3.0, 3.0));
        let b = random_box(&mut r, a.cx + ox, a.cy + oy);
        let exact = rotated_iou_bev(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 300, &mut r);
        overlapping += usize::from(exact > 0.0);
        let e = (exact - mc).abs();
        if e > IOU_TOL {
            return Err(format!("pair {seed}: exact {exact:.4} sampled {mc:.4}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{IOU_PAIRS} pairs ({overlapping} overlapping), worst |diff| {worst:.1e}"))
}

/// Selection by repeated arg-best: suppressed-survivor first, then higher
/// score, then lower index; the chosen rows are then listed by score.
pub fn brute_topk(col: &[f64], s: usize, n: usize) -> Vec<usize> {
    let h = (s / 2) as isize;
    let at = |i: isize| if i < 0 || i >= col.len() as isize { 0.0 } else { col[i as usize] };
    let kept: Vec<bool> = (0..col.len()).map(|i| (-h..=h).all(|d| at(i as isize + d) <= col[i])).collect();
    let better = |a: usize, b: usize| {
        if kept[a] != kept[b] {
            return kept[a];
        }
        if col[a] != col[b] {
            return col[a] > col[b];
        }
        a < b
    };
    let mut chosen = Vec::new();
    let mut left: Vec<usize> = (0..col.len()).collect();
    while chosen.len() < n {
        let mut best = 0;
        for k in 1..left.len() {
            if better(left[k], left[best]) {
                best = k;
            }
        }
        chosen.push(left.remove(best));
    }
    for i in 0..chosen.len() {
        for j in 0..chosen.len() - 1 - i {
            let (a, b) = (chosen[j], chosen[j + 1]);
            if col[b] > col[a] || (col[b] == col[a] && b < a) {
                chosen.swap(j, j + 1);
            }
        }
    }
    chosen
}

pub fn check_topk() -> Check {
    for seed in 0..TOPK_CASES {
        let mut r = rng(seed);
        let (rows, cols) = (r.gen_range(1..=8), r.gen_range(1..=4));
        let n = r.gen_range(1..=rows);
        let s = [1, 3, 5][r.gen_range(0..3)];
        // Small integers force ties; negatives exercise the zero padding.
        let scores: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-2..=5) as f64).collect();
        let sup = radial_local_max_suppress(&scores, rows, cols, s);
        let got = select_topk(&scores, &sup, rows, cols, n);
        for (a, g) in got.iter().enumerate() {
            let col: Vec<f64> = (0..rows).map(|i| scores[i * cols + a]).collect();
            let want = brute_topk(&col, s, n);
            if *g != want {
                return Err(format!("case {seed} column {a}: got {g:?}, expected {want:?} for {col:?} (s={s})"));
            }
        }
    }
    Ok(format!("{TOPK_CASES} cases exact"))
}

pub fn check_foreground() -> Check {
    let mut fg_pixels = 0usize;
    for seed in 0..FG_CASES {
        let mut r = rng(seed);
        let ds = [1, 2, 4][r.gen_range(0..3)];
        let cfg = GridConfig {
            range: DiscretizationStrategy::uniform(0.3, uniform(&mut r, 10.0, 30.0), ds * r.gen_range(2..=12)),
            n_azimuth: ds * r.gen_range(4..=24),
            downsample: ds,
            ..GridConfig::default()
        };
        let spec = GridSpec::new(cfg).unwrap();
        let boxes: Vec<BoxBev> = (0..r.gen_range(0..=4))
            .map(|_| {
                let (rr, aa) = (uniform(&mut r, 1.0, 25.0), uniform(&mut r, -PI, PI));
                random_box(&mut r, rr * aa.cos(), rr * aa.sin())
            })
            .collect();
        let got = foreground_target(&spec, &boxes);
        let (rows, cols) = spec.coarse_shape();
        let e = spec.edges();
        let mut want = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let rc = 0.5 * (e[i * ds] + e[(i + 1) * ds]);
            for j in 0..cols {
                let a = -PI + (j as f64 + 0.5) * 2.0 * PI / cols as f64;
                let p = CartPoint::new(rc * a.cos(), rc * a.sin());
                want.push(if boxes.iter().any(|b| inside_polygon(p, b)) { 1.0 } else { 0.0 });
            }
        }
        if got != want {
            let k = got.iter().zip(&want).position(|(g, w)| g != w).unwrap();
            return Err(format!("case {seed}: pixel {k} got {} expected {}", got[k], want[k]));
        }
        fg_pixels += want.iter().filter(|&&v| v > 0.0).count();
    }
    Ok(format!("{FG_CASES} grids exact, {fg_pixels} foreground pixels"))
}

/// Mean over recall levels k/40 of the best precision at any cutoff whose
/// recall reaches the level.
pub fn brute_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let cut: Vec<(f64, f64)> = (1..=ranked_tp.len())
        .map(|j| {
            let tp = ranked_tp[..j].iter().filter(|&&t| t).count() as f64;
            (tp / n_gt as f64, tp / j as f64)
        })
        .collect();
    let mut sum = 0.0;
    for k in 1..=RECALL_POINTS {
        let level = k as f64 / RECALL_POINTS as f64;
        sum += cut.iter().filter(|c| c.0 >= level - 1e-12).map(|c| c.1).fold(0.0, f64::max);
    }
    sum / RECALL_POINTS as f64
}

pub fn check_ap() -> Check {
    let mut cases = 0;
    let mut r = rng(7);
    for n_det in 0..=5usize {
        for bits in 0..(1u32 << n_det) {
            let ranked: Vec<bool> = (0..n_det).map(|i| bits >> i & 1 == 1).collect();
            let n_tp = ranked.iter().filter(|&&t| t).count();
            for n_gt in n_tp..=3 {
                let mut records: Vec<Record> = ranked
                    .iter()
                    .enumerate()
                    .map(|(i, &tp)| Record { score: 1.0 - i as f64 / 8.0, tp, h: 1.0 })
                    .collect();
                records.shuffle(&mut r);
                let got = average_precision(&records, n_gt);
                let want = brute_ap(&ranked, n_gt);
                if (got - want).abs() > 1e-12 {
                    return Err(format!("ranking {ranked:?} with {n_gt} GTs: got {got}, expected {want}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} exhaustive cases"))
}

pub fn check_oracles() -> Check {
    let parts = [check_iou()?, check_topk()?, check_foreground()?, check_ap()?];
    Ok(parts.join("; "))
}
