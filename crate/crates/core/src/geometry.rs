//! Coordinate transforms, range discretization and oriented-box geometry.
//!
//! Angles are radians wrapped into `[-π, π)`. Boxes live in the sensor's
//! Cartesian frame; `theta` is the heading of the box's long axis measured
//! from +x towards +y.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a - TWO_PI * ((a + PI) / TWO_PI).floor();
    if w >= PI {
        w -= TWO_PI;
    }
    if w < -PI {
        w += TWO_PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoint {
    pub x: f64,
    pub y: f64,
}

impl CartPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    pub r: f64,
    pub a: f64,
}

impl PolarPoint {
    pub fn new(r: f64, a: f64) -> Self {
        Self { r, a: wrap_angle(a) }
    }
}

pub fn cart_to_polar(p: CartPoint) -> PolarPoint {
    let r = p.x.hypot(p.y);
    if r == 0.0 {
        return PolarPoint { r: 0.0, a: 0.0 };
    }
    PolarPoint {
        r,
        a: wrap_angle(p.y.atan2(p.x)),
    }
}

pub fn polar_to_cart(p: PolarPoint) -> CartPoint {
    let (s, c) = p.a.sin_cos();
    CartPoint {
        x: p.r * c,
        y: p.r * s,
    }
}

/// Smallest absolute difference between two headings, in `[0, π]`.
pub fn heading_delta(t1: f64, t2: f64) -> f64 {
    wrap_angle(t1 - t2).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscretizationKind {
    /// Uniform bins.
    Ud,
    /// Log-spaced bins (spacing-increasing).
    Sid,
    /// Linearly increasing bin widths.
    Lid,
}

/// Range-axis partition of the polar grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationStrategy {
    pub kind: DiscretizationKind,
    pub r_min: f64,
    pub r_max: f64,
    pub n_bins: usize,
}

impl DiscretizationStrategy {
    pub fn uniform(r_min: f64, r_max: f64, n_bins: usize) -> Self {
        Self {
            kind: DiscretizationKind::Ud,
            r_min,
            r_max,
            n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min.is_finite() && self.r_max.is_finite()) {
            return Err(Error::Discretization("non-finite range bounds".into()));
        }
        if self.r_min < 0.0 || self.r_min >= self.r_max {
            return Err(Error::Discretization(format!(
                "need 0 <= r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.n_bins == 0 {
            return Err(Error::Discretization("n_bins must be positive".into()));
        }
        if self.kind == DiscretizationKind::Sid && self.r_min <= 0.0 {
            return Err(Error::Discretization(
                "log-spaced bins require r_min > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Returns the `n_bins + 1` bin edges, strictly increasing, with the first
/// and last edges pinned to `r_min` and `r_max`.
pub fn range_bin_edges(s: &DiscretizationStrategy) -> Result<Vec<f64>> {
    s.validate()?;
    let n = s.n_bins;
    let nf = n as f64;
    let mut edges: Vec<f64> = (0..=n)
        .map(|i| {
            let i = i as f64;
            match s.kind {
                DiscretizationKind::Ud => s.r_min + (s.r_max - s.r_min) * i / nf,
                DiscretizationKind::Sid => {
                    (s.r_min.ln() + (s.r_max / s.r_min).ln() * i / nf).exp()
                }
                DiscretizationKind::Lid => {
                    s.r_min + (s.r_max - s.r_min) / (nf * (nf + 1.0)) * i * (i + 1.0)
                }
            }
        })
        .collect();
    edges[0] = s.r_min;
    edges[n] = s.r_max;
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Discretization(
            "bin edges are not strictly increasing (bins too narrow)".into(),
        ));
    }
    Ok(edges)
}

/// Bin lookup against precomputed edges: `edge[i] <= r < edge[i+1]`, with
/// `r == r_max` folded into the last bin. `None` outside `[r_min, r_max]`.
pub fn range_to_bin_edges(r: f64, edges: &[f64]) -> Option<usize> {
    let n = edges.len() - 1;
    if !(r >= edges[0] && r <= edges[n]) {
        return None;
    }
    if r == edges[n] {
        return Some(n - 1);
    }
    let i = edges.partition_point(|&e| e <= r);
    Some(i - 1)
}

pub fn range_to_bin(r: f64, s: &DiscretizationStrategy) -> Result<Option<usize>> {
    let edges = range_bin_edges(s)?;
    Ok(range_to_bin_edges(r, &edges))
}

/// Oriented rectangle in the ground plane. `w` is the extent along the
/// heading axis, `h` the extent across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBev {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl BoxBev {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::config(format!("degenerate box extents {w} x {h}")));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: wrap_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Counter-clockwise corners.
    pub fn corners(&self) -> [CartPoint; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        let local = [(hw, hh), (-hw, hh), (-hw, -hh), (hw, -hh)];
        local.map(|(u, v)| CartPoint::new(self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    /// Coordinates of `p` in the box frame (u along heading, v across).
    pub fn to_local(&self, p: CartPoint) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn canonical_cmp(&self, other: &BoxBev) -> Ordering {
        self.cx
            .total_cmp(&other.cx)
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
            .then(self.theta.total_cmp(&other.theta))
    }
}

/// Boundary counts as inside.
pub fn point_in_rotated_box(p: CartPoint, b: &BoxBev) -> bool {
    let (u, v) = b.to_local(p);
    u.abs() <= 0.5 * b.w && v.abs() <= 0.5 * b.h
}

fn cross(o: CartPoint, a: CartPoint, b: CartPoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

pub fn polygon_area(poly: &[CartPoint]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[CartPoint], clip: &[CartPoint]) -> Vec<CartPoint> {
    let mut out: Vec<CartPoint> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(segment_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

fn segment_intersection(p: CartPoint, q: CartPoint, a: CartPoint, b: CartPoint) -> CartPoint {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    CartPoint::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

pub fn intersection_area_bev(a: &BoxBev, b: &BoxBev) -> f64 {
    let (first, second) = match a.canonical_cmp(b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let poly = clip_convex(&first.corners(), &second.corners());
    polygon_area(&poly)
}

/// Bird's-eye-view IoU of two oriented rectangles. Evaluation order is fixed
/// by a canonical box ordering, so the result is exactly symmetric.
pub fn rotated_iou_bev(a: &BoxBev, b: &BoxBev) -> f64 {
    let inter = intersection_area_bev(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Oriented 3D box resting in the sensor frame. `l` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            cz: v[2],
            w: v[3],
            l: v[4],
            h: v[5],
            theta: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta]
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.l > 0.0 && self.h > 0.0 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn bev(&self) -> BoxBev {
        BoxBev {
            cx: self.cx,
            cy: self.cy,
            w: self.l,
            h: self.w,
            theta: wrap_angle(self.theta),
        }
    }

    pub fn center_range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        (z - self.cz).abs() <= 0.5 * self.h && point_in_rotated_box(CartPoint::new(x, y), &self.bev())
    }
}
