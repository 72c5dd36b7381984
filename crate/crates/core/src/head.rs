//! Neck, center-based detection head, box coding, decoding with rotated
//! NMS, and the training loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::blocks::rows;
use crate::error::{Error, Result};
use crate::ga::TargetMaps;
use crate::geometry::{cart_to_polar, polar_to_cart, rotated_iou_bev, wrap_angle, Box3D, BoxBev, CartPoint, PolarPoint};
use crate::kernels::conv::ConvSpec;
use crate::kernels::dense::sigmoid_scalar;
use crate::kernels::{conv2d, linear, relu, sigmoid, LossConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view::GridView;
use crate::voxelize::FeatureMap;

/// Regression channels: (Δr, Δa, z, log w, log l, log h, sin θ, cos θ).
pub const REG_DIM: usize = 8;
/// Heatmap targets use this overlap when sizing the Gaussian.
pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.1;
pub const GAUSSIAN_MIN_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Exponent of the IoU factor in the rectified score.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            nms_iou: 0.2,
            max_dets: 100,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    /// Rectified score.
    pub score: f64,
    pub cls: usize,
    pub iou_pred: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    cls: usize,
    score: f64,
    iou_pred: f64,
    #[serde(rename = "box")]
    box3d: [f64; 7],
}

impl Detection {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&DetectionRecord {
            cls: self.cls,
            score: self.score,
            iou_pred: self.iou_pred,
            box3d: self.box3d.to_array(),
        })
        .expect("detection serializes")
    }
}

/// One detection per line.
pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    dets.iter().map(|d| d.to_json() + "\n").collect()
}

pub fn detections_from_jsonl(text: &str) -> std::result::Result<Vec<Detection>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: DetectionRecord = serde_json::from_str(l)?;
            Ok(Detection {
                box3d: Box3D::from_array(r.box3d),
                score: r.score,
                cls: r.cls,
                iou_pred: r.iou_pred,
            })
        })
        .collect()
}

/// `score · iou^alpha`.
pub fn rectify_scores(score: f64, iou_pred: f64, alpha: f64) -> f64 {
    score * iou_pred.powf(alpha)
}

/// Weights of the two-branch neck.
#[derive(Debug, Clone, PartialEq)]
pub struct NeckParams {
    pub c1: (Tensor, Tensor),
    pub c2: (Tensor, Tensor),
    pub fuse: (Tensor, Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct NeckVars {
    pub c1: (Var, Var),
    pub c2: (Var, Var),
    pub fuse: (Var, Var),
}

fn bind_pair(tape: &mut Tape, p: &(Tensor, Tensor)) -> (Var, Var) {
    (tape.param(p.0.clone()), tape.param(p.1.clone()))
}

impl NeckParams {
    pub fn bind(&self, tape: &mut Tape) -> NeckVars {
        NeckVars {
            c1: bind_pair(tape, &self.c1),
            c2: bind_pair(tape, &self.c2),
            fuse: bind_pair(tape, &self.fuse),
        }
    }
}

/// Head weights: shared 3x3 conv, then per-pixel branches.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub shared: (Tensor, Tensor),
    pub cls: (Tensor, Tensor),
    pub reg: (Tensor, Tensor),
    pub iou: (Tensor, Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub shared: (Var, Var),
    pub cls: (Var, Var),
    pub reg: (Var, Var),
    pub iou: (Var, Var),
}

impl HeadParams {
    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            shared: bind_pair(tape, &self.shared),
            cls: bind_pair(tape, &self.cls),
            reg: bind_pair(tape, &self.reg),
            iou: bind_pair(tape, &self.iou),
        }
    }
}

fn spec(stride: usize, circular: bool) -> ConvSpec {
    ConvSpec { stride, circular }
}

/// `relu(conv s1)` beside `relu(conv s2)` upsampled back, concatenated and
/// fused by a 1x1 conv. `(R, A, C)` in and out.
pub fn neck_t(tape: &mut Tape, x: Var, circular: bool, v: &NeckVars) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (r, a) = (s[0], s[1]);
    let b1 = tape.conv2d(x, v.c1.0, v.c1.1, spec(1, circular));
    let b1 = tape.relu(b1);
    let b2 = tape.conv2d(x, v.c2.0, v.c2.1, spec(2, circular));
    let b2 = tape.relu(b2);
    let up = tape.upsample2(b2, r, a);
    let (c1, c2) = (tape.value(b1).last_dim(), tape.value(up).last_dim());
    let b1 = tape.reshape(b1, &[r * a, c1]);
    let up = tape.reshape(up, &[r * a, c2]);
    let cat = tape.concat(&[b1, up]);
    let cat = tape.reshape(cat, &[r, a, c1 + c2]);
    tape.conv2d(cat, v.fuse.0, v.fuse.1, spec(1, circular))
}

/// Head outputs on the tape, row-major `(R·A, ·)`.
#[derive(Debug, Clone, Copy)]
pub struct Predictions {
    pub heat: Var,
    pub reg: Var,
    pub iou: Var,
    /// Auxiliary foreground probability `(R, A, 1)`, when the aggregation
    /// module is present.
    pub fg: Option<Var>,
    /// Auxiliary offsets `(R, A, 4)`.
    pub dis: Option<Var>,
}

/// Returns `(heat, reg, iou)` for an `(R, A, C)` input.
pub fn head_t(tape: &mut Tape, x: Var, circular: bool, v: &HeadVars) -> (Var, Var, Var) {
    let s = tape.value(x).shape().to_vec();
    let h = tape.conv2d(x, v.shared.0, v.shared.1, spec(1, circular));
    let h = tape.relu(h);
    let c = tape.value(h).last_dim();
    let h = tape.reshape(h, &[s[0] * s[1], c]);
    let heat = tape.linear(h, v.cls.0, Some(v.cls.1));
    let heat = tape.sigmoid(heat);
    let reg = tape.linear(h, v.reg.0, Some(v.reg.1));
    let iou = tape.linear(h, v.iou.0, Some(v.iou.1));
    let iou = tape.sigmoid(iou);
    (heat, reg, iou)
}

/// Dense head outputs for one map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub rows: usize,
    pub cols: usize,
    pub n_cls: usize,
    /// `(R·A, n_cls)`.
    pub heat: Vec<f64>,
    /// `(R·A, 8)`.
    pub reg: Vec<f64>,
    /// `(R·A)`.
    pub iou: Vec<f64>,
}

impl HeadMaps {
    pub fn from_tape(tape: &Tape, p: &Predictions, rows: usize, cols: usize) -> Self {
        let heat = tape.value(p.heat);
        Self {
            rows,
            cols,
            n_cls: heat.last_dim(),
            heat: heat.data().to_vec(),
            reg: tape.value(p.reg).data().to_vec(),
            iou: tape.value(p.iou).data().to_vec(),
        }
    }
}

/// Value-level neck.
pub fn neck(f: &FeatureMap, p: &NeckParams, circular: bool) -> FeatureMap {
    let mut tape = Tape::new();
    let v = p.bind(&mut tape);
    let x = tape.constant(f.tensor().clone());
    let y = neck_t(&mut tape, x, circular, &v);
    FeatureMap(tape.value(y).clone())
}

/// Value-level head.
pub fn head_forward(f: &FeatureMap, p: &HeadParams, circular: bool) -> HeadMaps {
    let (r, a) = (f.rows(), f.cols());
    let h = relu(&conv2d(f.tensor(), &p.shared.0, &p.shared.1, spec(1, circular)));
    let h = h.reshape(&[r * a, p.shared.0.shape()[3]]).unwrap();
    HeadMaps {
        rows: r,
        cols: a,
        n_cls: p.cls.0.shape()[1],
        heat: sigmoid(&linear(&h, &p.cls.0, Some(&p.cls.1))).into_data(),
        reg: linear(&h, &p.reg.0, Some(&p.reg.1)).into_data(),
        iou: sigmoid(&linear(&h, &p.iou.0, Some(&p.iou.1))).into_data(),
    }
}

/// Pixel holding a box center and the regression target relative to it.
/// Center offsets are in pixel units of the holding cell.
pub fn encode_box(view: &GridView, b: &Box3D) -> Option<((usize, usize), [f64; REG_DIM])> {
    let pc = cart_to_polar(CartPoint::new(b.cx, b.cy));
    let i = view.row_of(pc.r)?;
    let j = view.col_of(pc.a)?;
    let dr = (pc.r - view.row_centers[i]) / view.row_height(i);
    let da = wrap_angle(pc.a - view.col_angle(j)) / view.col_width;
    let (s, c) = b.theta.sin_cos();
    Some(((i, j), [dr, da, b.cz, b.w.ln(), b.l.ln(), b.h.ln(), s, c]))
}

pub fn decode_box(view: &GridView, (i, j): (usize, usize), reg: &[f64]) -> Box3D {
    let r = view.row_centers[i] + reg[0] * view.row_height(i);
    let a = view.col_angle(j) + reg[1] * view.col_width;
    let c = polar_to_cart(PolarPoint { r, a });
    Box3D {
        cx: c.x,
        cy: c.y,
        cz: reg[2],
        w: reg[3].exp(),
        l: reg[4].exp(),
        h: reg[5].exp(),
        theta: reg[6].atan2(reg[7]),
    }
}

/// Gaussian radius (in pixels) for an object of `height x width` pixels so
/// that a corner-shifted box still overlaps by `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Box footprint in pixels along the range and azimuth axes at its center.
fn pixel_extent(view: &GridView, b: &Box3D, (i, _): (usize, usize)) -> (f64, f64) {
    let pc = cart_to_polar(CartPoint::new(b.cx, b.cy));
    let rel = b.theta - pc.a;
    let (s, c) = rel.sin_cos();
    let ext_r = (b.l * c).abs() + (b.w * s).abs();
    let ext_t = (b.l * s).abs() + (b.w * c).abs();
    (ext_r / view.row_height(i), ext_t / (pc.r.max(1e-6) * view.col_width))
}

/// Class heatmap targets `(R·A, n_cls)`: a Gaussian per box around its
/// center pixel, merged by maximum.
pub fn heatmap_targets(view: &GridView, boxes: &[(usize, Box3D)], n_cls: usize) -> Vec<f64> {
    let (rr, aa) = (view.rows, view.cols);
    let mut heat = vec![0.0f64; rr * aa * n_cls];
    for (cls, b) in boxes.iter().filter(|(c, _)| *c < n_cls) {
        let Some((center, _)) = encode_box(view, b) else { continue };
        let (hp, wp) = pixel_extent(view, b, center);
        let radius = (gaussian_radius(hp, wp, GAUSSIAN_MIN_OVERLAP).floor().max(0.0) as usize).max(GAUSSIAN_MIN_RADIUS);
        let sigma = (2 * radius + 1) as f64 / 6.0;
        let rad = radius as i64;
        for di in -rad..=rad {
            let i = center.0 as i64 + di;
            if i < 0 || i >= rr as i64 {
                continue;
            }
            for dj in -rad..=rad {
                let j = center.1 as i64 + dj;
                let j = if view.circular {
                    j.rem_euclid(aa as i64)
                } else if j < 0 || j >= aa as i64 {
                    continue;
                } else {
                    j
                };
                let g = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut heat[(i as usize * aa + j as usize) * n_cls + cls];
                *slot = slot.max(g);
            }
        }
    }
    heat
}

/// Everything the loss needs for one map.
#[derive(Debug, Clone)]
pub struct DetTargets {
    pub heat: Rc<[f64]>,
    /// `(flat pixel, regression target)` per supervised box.
    pub centers: Vec<(usize, [f64; REG_DIM])>,
    /// BEV footprints of the supervised boxes.
    pub gts: Vec<BoxBev>,
    pub aux: TargetMaps,
}

/// Targets for boxes with class below `n_cls`. When two boxes share a
/// center pixel the first one keeps it.
pub fn build_targets(view: &GridView, boxes: &[(usize, Box3D)], n_cls: usize, seed: u64) -> DetTargets {
    let kept: Vec<(usize, Box3D)> = boxes.iter().copied().filter(|(c, _)| *c < n_cls).collect();
    let mut centers: Vec<(usize, [f64; REG_DIM])> = Vec::new();
    let mut gts = Vec::new();
    for (_, b) in &kept {
        if let Some(((i, j), t)) = encode_box(view, b) {
            let px = i * view.cols + j;
            if centers.iter().all(|c| c.0 != px) {
                centers.push((px, t));
                gts.push(b.bev());
            }
        }
    }
    let footprints: Vec<BoxBev> = kept.iter().map(|(_, b)| b.bev()).collect();
    DetTargets {
        heat: heatmap_targets(view, &kept, n_cls).into(),
        centers,
        gts,
        aux: crate::ga::target_maps(view, &footprints, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub reg: f64,
    pub fg: f64,
    pub dis: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("cls", self.cls),
            ("reg", self.reg),
            ("fg", self.fg),
            ("dis", self.dis),
            ("iou", self.iou),
            ("total", self.total),
        ]
    }
}

/// IoU-quality targets: best BEV IoU between each decoded center
/// prediction and the ground truth. `reg` holds the gathered center rows.
pub fn iou_targets(reg: &[f64], t: &DetTargets, view: &GridView) -> Vec<f64> {
    t.centers
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let b = decode_box(view, (c.0 / view.cols, c.0 % view.cols), &reg[k * REG_DIM..(k + 1) * REG_DIM]);
            if !b.is_valid() {
                return 0.0;
            }
            t.gts.iter().map(|g| rotated_iou_bev(&b.bev(), g)).fold(0.0, f64::max)
        })
        .collect()
}

/// Weighted training loss on the tape. IoU targets are computed from the
/// current (detached) box predictions.
pub fn total_loss_t(tape: &mut Tape, p: &Predictions, t: &DetTargets, view: &GridView, cfg: &LossConfig) -> (Var, LossComponents) {
    let (v, c, _) = total_loss_frozen_t(tape, p, t, view, cfg, None);
    (v, c)
}

/// As [`total_loss_t`], but with IoU targets supplied by the caller when
/// `iou_t` is given. Also returns the targets used.
pub fn total_loss_frozen_t(
    tape: &mut Tape,
    p: &Predictions,
    t: &DetTargets,
    view: &GridView,
    cfg: &LossConfig,
    iou_t: Option<&[f64]>,
) -> (Var, LossComponents, Vec<f64>) {
    let l_cls = tape.gaussian_focal(p.heat, t.heat.clone());
    let m = t.centers.len();
    let mut terms = vec![(l_cls, 1.0)];
    let mut comp = LossComponents {
        cls: tape.value(l_cls).item(),
        ..Default::default()
    };
    let mut used = Vec::new();
    if m > 0 {
        let inv_m = 1.0 / m as f64;
        let idx = rows(t.centers.iter().map(|c| c.0));
        let reg_at = tape.gather(p.reg, idx.clone());
        let reg_t: Rc<[f64]> = t.centers.iter().flat_map(|c| c.1).collect();
        let l_reg = tape.smooth_l1(reg_at, reg_t, None, inv_m);
        let iou_at = tape.gather(p.iou, idx);
        used = match iou_t {
            Some(v) => v.to_vec(),
            None => iou_targets(tape.value(reg_at).data(), t, view),
        };
        let iou_t: Rc<[f64]> = used.clone().into();
        let l_iou = tape.smooth_l1(iou_at, iou_t, None, inv_m);
        comp.reg = tape.value(l_reg).item();
        comp.iou = tape.value(l_iou).item();
        terms.push((l_reg, cfg.w_reg));
        terms.push((l_iou, cfg.w_iou));
    }
    if let (Some(fg), Some(dis)) = (p.fg, p.dis) {
        let n_fg = t.aux.n_foreground();
        let l_fg = tape.focal(fg, t.aux.h_hat.clone().into(), cfg.focal_alpha, cfg.focal_gamma, n_fg.max(1) as f64);
        let d_t: Rc<[f64]> = t.aux.d_hat.iter().flatten().copied().collect();
        let mask: Rc<[f64]> = t.aux.h_hat.iter().flat_map(|&h| [h; 4]).collect();
        let l_dis = tape.smooth_l1(dis, d_t, Some(mask), 1.0 / n_fg.max(1) as f64);
        comp.fg = tape.value(l_fg).item();
        comp.dis = tape.value(l_dis).item();
        terms.push((l_fg, cfg.w_fg));
        terms.push((l_dis, cfg.w_dis));
    }
    let total = tape.weighted_sum(&terms);
    comp.total = tape.value(total).item();
    (total, comp, used)
}

/// Rectified score map `(R·A, n_cls)`.
pub fn rectified_scores(maps: &HeadMaps, alpha: f64) -> Vec<f64> {
    (0..maps.rows * maps.cols)
        .flat_map(|p| (0..maps.n_cls).map(move |c| (p, c)))
        .map(|(p, c)| rectify_scores(maps.heat[p * maps.n_cls + c], maps.iou[p], alpha))
        .collect()
}

/// Rotated BEV NMS over detections already sorted by priority.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64, max_dets: usize) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.len() >= max_dets {
            break;
        }
        let clash = keep
            .iter()
            .any(|k| k.cls == d.cls && rotated_iou_bev(&k.box3d.bev(), &d.box3d.bev()) > iou_threshold);
        if !clash {
            keep.push(d);
        }
    }
    keep
}

/// Peaks of the rectified heatmap (3x3 neighborhood, wrapping in azimuth on
/// a full sweep) above the threshold, decoded and filtered by NMS.
pub fn decode(maps: &HeadMaps, view: &GridView, cfg: &DecodeConfig) -> Vec<Detection> {
    let (rr, aa, nc) = (maps.rows, maps.cols, maps.n_cls);
    let s = rectified_scores(maps, cfg.alpha);
    let at = |i: i64, j: i64, c: usize| -> Option<f64> {
        if i < 0 || i >= rr as i64 {
            return None;
        }
        let j = if view.circular {
            j.rem_euclid(aa as i64)
        } else if j < 0 || j >= aa as i64 {
            return None;
        } else {
            j
        };
        Some(s[(i as usize * aa + j as usize) * nc + c])
    };
    let mut cands: Vec<(f64, usize, Detection)> = Vec::new();
    for i in 0..rr {
        for j in 0..aa {
            for c in 0..nc {
                let v = s[(i * aa + j) * nc + c];
                if !(v > cfg.score_threshold) {
                    continue;
                }
                let peak = (-1..=1i64)
                    .flat_map(|di| (-1..=1i64).map(move |dj| (di, dj)))
                    .filter_map(|(di, dj)| at(i as i64 + di, j as i64 + dj, c))
                    .all(|n| n <= v);
                if !peak {
                    continue;
                }
                let px = i * aa + j;
                let b = decode_box(view, (i, j), &maps.reg[px * REG_DIM..(px + 1) * REG_DIM]);
                if !b.is_valid() {
                    continue;
                }
                cands.push((
                    v,
                    px * nc + c,
                    Detection {
                        box3d: b,
                        score: v,
                        cls: c,
                        iou_pred: maps.iou[px],
                    },
                ));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    nms(cands.into_iter().map(|c| c.2).collect(), cfg.nms_iou, cfg.max_dets)
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) || self.alpha < 0.0 {
            return Err(Error::config("decode thresholds must lie in [0, 1] and alpha >= 0"));
        }
        Ok(())
    }
}

/// Logit of a probability, for constructing exact head outputs in tests.
pub fn logit(p: f64) -> f64 {
    let y = (p / (1.0 - p)).ln();
    debug_assert!((sigmoid_scalar(y) - p).abs() < 1e-9);
    y
}
