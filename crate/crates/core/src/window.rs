//! Window partitions for shifted window attention, expressed as gather
//! lists. A shift on a wrapping axis is a cyclic roll; on a bounded axis it
//! moves the window grid by `shift` cells and the overhang is padding.

/// Token order of a 1D partition, window by window; `None` marks padding.
///
/// Wrapping axis (`len % w == 0`): window `k` holds `(k·w + t + shift) mod len`.
/// Bounded axis: the axis is front-padded by `shift` plus whatever makes the
/// length a multiple of `w`, then cut into consecutive windows.
pub fn plan_1d(len: usize, w: usize, shift: usize, circular: bool) -> Vec<Option<usize>> {
    assert!(w > 0, "window size must be positive");
    if circular {
        assert!(len % w == 0, "window {w} does not divide wrapping length {len}");
        return (0..len).map(|p| Some((p + shift) % len)).collect();
    }
    let front = shift + (w - len % w) % w;
    let padded = (len + front).div_ceil(w) * w;
    (0..padded)
        .map(|p| p.checked_sub(front).filter(|&i| i < len))
        .collect()
}

/// 2D partition into `w x w` windows over a row-major `rows x cols` map.
/// Tokens are ordered window by window, row-major inside each window.
pub fn plan_2d(rows: usize, cols: usize, w: usize, shift_r: usize, shift_a: usize, circular_a: bool) -> Vec<Option<usize>> {
    let pr = plan_1d(rows, w, shift_r, false);
    let pa = plan_1d(cols, w, shift_a, circular_a);
    let (nr, na) = (pr.len() / w, pa.len() / w);
    let mut out = Vec::with_capacity(pr.len() * pa.len());
    for wr in 0..nr {
        for wa in 0..na {
            for tr in 0..w {
                for ta in 0..w {
                    out.push(match (pr[wr * w + tr], pa[wa * w + ta]) {
                        (Some(r), Some(a)) => Some(r * cols + a),
                        _ => None,
                    });
                }
            }
        }
    }
    out
}

/// For each source index, its slot in `plan`. Every index must appear once.
pub fn inverse(plan: &[Option<usize>], len: usize) -> Vec<usize> {
    let mut inv = vec![usize::MAX; len];
    for (slot, i) in plan.iter().enumerate() {
        if let Some(i) = i {
            inv[*i] = slot;
        }
    }
    assert!(inv.iter().all(|&s| s != usize::MAX), "plan does not cover every index");
    inv
}
