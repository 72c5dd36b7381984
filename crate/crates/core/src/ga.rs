//! Geometry-aware aggregation: auxiliary foreground and center-offset
//! predictions, embedded with pixel positions, condition a shifted 2D
//! window attention in front of the detection head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{attend, padded_rows, plan_mask, rows, AttnVars};
use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, point_in_rotated_box, wrap_angle, BoxBev, CartPoint};
use crate::kernels::conv::ConvSpec;
use crate::kernels::dense::{mlp, Layer};
use crate::kernels::{conv2d, sigmoid, AttentionParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view::GridView;
use crate::voxelize::{FeatureMap, GridSpec};
use crate::window::{inverse, plan_2d};

/// Width of the geometric clue map: foreground probability plus
/// (Δx, Δy, Δρ, Δφ).
pub const GEO_DIM: usize = 5;
/// Embedding input: clues plus the pixel's (r, a, x, y).
pub const GEO_IN: usize = GEO_DIM + 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub w_g: usize,
    pub shift: usize,
    pub n_stacks: usize,
    /// Hidden width of the embedding MLP.
    pub mlp_hidden: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            w_g: 8,
            shift: 4,
            n_stacks: 2,
            mlp_hidden: 32,
        }
    }
}

impl GaConfig {
    pub fn validate(&self, view: &GridView) -> Result<()> {
        if self.w_g == 0 || self.shift >= self.w_g {
            return Err(Error::config("ga.w_g must be positive and ga.shift below it"));
        }
        if view.circular && view.cols % self.w_g != 0 {
            return Err(Error::config(format!("ga.w_g={} does not divide {} columns", self.w_g, view.cols)));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("ga.mlp_hidden must be positive"));
        }
        Ok(())
    }

    pub fn stack_shift(&self, i: usize) -> usize {
        if i % 2 == 1 {
            self.shift
        } else {
            0
        }
    }
}

/// Auxiliary supervision on the BEV grid, row-major `(R, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub h_hat: Vec<f64>,
    pub d_hat: Vec<[f64; 4]>,
    pub owner: Vec<Option<usize>>,
}

impl TargetMaps {
    pub fn n_foreground(&self) -> usize {
        self.h_hat.iter().filter(|&&h| h > 0.5).count()
    }
}

fn pixel_centers(view: &GridView) -> Vec<[f64; 4]> {
    (0..view.rows)
        .flat_map(|i| (0..view.cols).map(move |j| (i, j)))
        .map(|(i, j)| view.pixel_position(i, j))
        .collect()
}

/// 1 where the pixel center lies inside any box.
pub fn foreground_target_view(view: &GridView, boxes: &[BoxBev]) -> Vec<f64> {
    pixel_centers(view)
        .iter()
        .map(|p| {
            let c = CartPoint::new(p[2], p[3]);
            f64::from(u8::from(boxes.iter().any(|b| point_in_rotated_box(c, b))))
        })
        .collect()
}

pub fn foreground_target(spec: &GridSpec, boxes: &[BoxBev]) -> Vec<f64> {
    foreground_target_view(&GridView::full(spec), boxes)
}

/// Owner and offsets for arbitrary points given as `(r, a, x, y)`. A point
/// inside several boxes picks one of them uniformly with a generator seeded
/// by `seed`, drawn in point order.
pub fn center_offsets_at(points: &[[f64; 4]], boxes: &[BoxBev], seed: u64) -> (Vec<[f64; 4]>, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::with_capacity(points.len());
    let mut owner = Vec::with_capacity(points.len());
    for p in points {
        let c = CartPoint::new(p[2], p[3]);
        let inside: Vec<usize> = (0..boxes.len()).filter(|&k| point_in_rotated_box(c, &boxes[k])).collect();
        let k = match inside.len() {
            0 => None,
            1 => Some(inside[0]),
            n => Some(inside[rng.gen_range(0..n)]),
        };
        owner.push(k);
        d.push(match k {
            None => [0.0; 4],
            Some(k) => {
                let b = &boxes[k];
                let pc = cart_to_polar(CartPoint::new(b.cx, b.cy));
                [b.cx - p[2], b.cy - p[3], pc.r - p[0], wrap_angle(pc.a - p[1])]
            }
        });
    }
    (d, owner)
}

pub fn center_offset_target(view: &GridView, boxes: &[BoxBev], seed: u64) -> (Vec<[f64; 4]>, Vec<Option<usize>>) {
    center_offsets_at(&pixel_centers(view), boxes, seed)
}

/// Both auxiliary targets. The foreground map is derived from the owners so
/// the two always agree.
pub fn target_maps(view: &GridView, boxes: &[BoxBev], seed: u64) -> TargetMaps {
    let (d_hat, owner) = center_offset_target(view, boxes, seed);
    let h_hat = owner.iter().map(|o| f64::from(u8::from(o.is_some()))).collect();
    TargetMaps { h_hat, d_hat, owner }
}

/// Weights of the aggregation module.
#[derive(Debug, Clone, PartialEq)]
pub struct GaParams {
    /// Foreground branch, 3x3 conv C→1.
    pub fg: (Tensor, Tensor),
    /// Offset branch, 3x3 conv C→4.
    pub dis: (Tensor, Tensor),
    pub mlp: Vec<Layer>,
    pub att: Vec<AttentionParams>,
}

#[derive(Debug, Clone)]
pub struct GaVars {
    pub fg: (Var, Var),
    pub dis: (Var, Var),
    pub mlp: Vec<(Var, Var)>,
    pub att: Vec<AttnVars>,
}

impl GaParams {
    pub fn bind(&self, tape: &mut Tape) -> GaVars {
        GaVars {
            fg: (tape.param(self.fg.0.clone()), tape.param(self.fg.1.clone())),
            dis: (tape.param(self.dis.0.clone()), tape.param(self.dis.1.clone())),
            mlp: self.mlp.iter().map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone()))).collect(),
            att: self.att.iter().map(|a| a.bind(tape)).collect(),
        }
    }
}

fn conv_spec(circular: bool) -> ConvSpec {
    ConvSpec { stride: 1, circular }
}

/// Foreground probability `(R, A, 1)` and offsets `(R, A, 4)` from `F^neck`
/// given as `(R, A, C)`.
pub fn geometry_prediction_t(tape: &mut Tape, fneck: Var, circular: bool, v: &GaVars) -> (Var, Var) {
    let h = tape.conv2d(fneck, v.fg.0, v.fg.1, conv_spec(circular));
    let h = tape.sigmoid(h);
    let d = tape.conv2d(fneck, v.dis.0, v.dis.1, conv_spec(circular));
    (h, d)
}

/// Normalized `(r, a, x, y)` per pixel, row-major `(R·A, 4)`.
pub fn position_map(view: &GridView) -> Tensor {
    let data = (0..view.rows)
        .flat_map(|i| (0..view.cols).map(move |j| (i, j)))
        .flat_map(|(i, j)| view.normalized_position(i, j))
        .collect();
    Tensor::new(vec![view.rows * view.cols, 4], data).unwrap()
}

/// `F^geo = MLP([H, D, P])`, row-major `(R·A, C)`.
pub fn geometry_embedding_t(tape: &mut Tape, h: Var, d: Var, view: &GridView, mlp_vars: &[(Var, Var)]) -> Var {
    let n = view.rows * view.cols;
    let h = tape.reshape(h, &[n, 1]);
    let d = tape.reshape(d, &[n, 4]);
    let p = tape.constant(position_map(view));
    let mut x = tape.concat(&[h, d, p]);
    for (i, &(w, b)) in mlp_vars.iter().enumerate() {
        x = tape.linear(x, w, Some(b));
        if i + 1 < mlp_vars.len() {
            x = tape.relu(x);
        }
    }
    x
}

/// Stacked 2D window attention, row-major `(R·A, C)` in and out. Windows
/// are `w_g x w_g`; every second stack is shifted by `shift` on both axes.
/// The radial axis is bounded (padding is masked), the angular axis wraps
/// on a full sweep.
pub fn ga_window_attention_t(tape: &mut Tape, fneck: Var, fgeo: Var, view: &GridView, cfg: &GaConfig, att: &[AttnVars]) -> Var {
    let mut cur = fneck;
    let t = cfg.w_g * cfg.w_g;
    for (i, p) in att.iter().enumerate().take(cfg.n_stacks) {
        let s = cfg.stack_shift(i);
        let plan = plan_2d(view.rows, view.cols, cfg.w_g, s, s, view.circular);
        let n_win = plan.len() / t;
        let x = tape.gather(cur, padded_rows(&plan));
        let g = tape.gather(fgeo, padded_rows(&plan));
        let y = attend(tape, x, x, (n_win, t, t), p, None, plan_mask(&plan), Some(g));
        let back = tape.gather(y, rows(inverse(&plan, view.rows * view.cols)));
        cur = tape.add(cur, back);
    }
    cur
}

/// Value-level geometry prediction: `(H, D)` as `(R, A, 1)` and `(R, A, 4)`.
pub fn geometry_prediction(fneck: &FeatureMap, params: &GaParams, circular: bool) -> (Tensor, Tensor) {
    let h = sigmoid(&conv2d(fneck.tensor(), &params.fg.0, &params.fg.1, conv_spec(circular)));
    let d = conv2d(fneck.tensor(), &params.dis.0, &params.dis.1, conv_spec(circular));
    (h, d)
}

/// Value-level embedding of the clue maps.
pub fn geometry_embedding(h: &Tensor, d: &Tensor, view: &GridView, layers: &[Layer]) -> FeatureMap {
    let n = view.rows * view.cols;
    let p = position_map(view);
    let mut x = Vec::with_capacity(n * GEO_IN);
    for i in 0..n {
        x.push(h.data()[i]);
        x.extend_from_slice(&d.data()[i * 4..(i + 1) * 4]);
        x.extend_from_slice(&p.data()[i * 4..(i + 1) * 4]);
    }
    let (y, _) = mlp(&Tensor::new(vec![n, GEO_IN], x).unwrap(), layers);
    let c = y.last_dim();
    FeatureMap(y.reshape(&[view.rows, view.cols, c]).unwrap())
}

/// Value-level aggregation.
pub fn ga_window_attention(fneck: &FeatureMap, fgeo: &FeatureMap, view: &GridView, cfg: &GaConfig, att: &[AttentionParams]) -> FeatureMap {
    let (r, a, c) = (fneck.rows(), fneck.cols(), fneck.channels());
    let mut tape = Tape::new();
    let vars: Vec<AttnVars> = att.iter().map(|p| p.bind(&mut tape)).collect();
    let x = tape.constant(fneck.tensor().clone().reshape(&[r * a, c]).unwrap());
    let g = tape.constant(fgeo.tensor().clone().reshape(&[r * a, c]).unwrap());
    let y = ga_window_attention_t(&mut tape, x, g, view, cfg, &vars);
    FeatureMap(tape.value(y).clone().reshape(&[r, a, c]).unwrap())
}
