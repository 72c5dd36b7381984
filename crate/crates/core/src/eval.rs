//! Greedy detection matching on rotated BEV IoU, 40-point interpolated AP,
//! heading-weighted APH, difficulty levels and range breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{heading_delta, rotated_iou_bev, Box3D};
use crate::head::Detection;
use crate::synth::{Scene, CLASS_NAMES};

pub const RECALL_POINTS: usize = 40;

/// Range bins `[lo, hi)` in meters; the last one is open-ended.
pub const RANGE_BINS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 50.0), (50.0, f64::INFINITY)];

pub fn range_bin_label(k: usize) -> String {
    let (lo, hi) = RANGE_BINS[k];
    if hi.is_finite() {
        format!("{lo}-{hi}")
    } else {
        format!("{lo}-inf")
    }
}

pub fn range_bin_of(r: f64) -> usize {
    RANGE_BINS.iter().position(|&(lo, hi)| r >= lo && r < hi).unwrap_or(RANGE_BINS.len() - 1)
}

/// Matching threshold: 0.7 for vehicles (class 0), 0.5 otherwise.
pub fn iou_threshold(cls: usize) -> f64 {
    if cls == 0 {
        0.7
    } else {
        0.5
    }
}

/// Difficulty level: a ground-truth box takes part only if it holds enough
/// points; the rest become don't-care regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// More than 5 points.
    L1,
    /// At least 1 point.
    L2,
}

impl Level {
    pub fn admits(self, n_points: usize) -> bool {
        match self {
            Level::L1 => n_points > 5,
            Level::L2 => n_points >= 1,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Level::L1 => 1,
            Level::L2 => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Level::L1),
            2 => Some(Level::L2),
            _ => None,
        }
    }
}

/// Heading accuracy weight `max(0, 1 - Δθ/π)`.
pub fn heading_weight(t_det: f64, t_gt: f64) -> f64 {
    (1.0 - heading_delta(t_det, t_gt) / std::f64::consts::PI).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMatch {
    pub gt: Option<usize>,
    pub iou: f64,
    /// Heading weight, 0 when unmatched.
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indexed like the input detections.
    pub dets: Vec<DetMatch>,
    pub gt_matched: Vec<bool>,
}

/// Detection order used everywhere: descending score, then input index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy matching of same-class detections `(score, box)` to `gts`.
pub fn match_dets(dets: &[(f64, Box3D)], gts: &[Box3D], iou_thr: f64) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.0).collect();
    let gt_bev: Vec<_> = gts.iter().map(Box3D::bev).collect();
    let mut gt_matched = vec![false; gts.len()];
    let mut out = vec![DetMatch { gt: None, iou: 0.0, h: 0.0 }; dets.len()];
    for d in score_order(&scores) {
        let bev = dets[d].1.bev();
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt_bev.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let iou = rotated_iou_bev(&bev, gb);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            out[d].iou = iou;
            if iou >= iou_thr {
                gt_matched[g] = true;
                out[d].gt = Some(g);
                out[d].h = heading_weight(dets[d].1.theta, gts[g].theta);
            }
        }
    }
    MatchResult { dets: out, gt_matched }
}

/// One scored detection after matching: true positives carry their heading
/// weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub score: f64,
    pub tp: bool,
    pub h: f64,
}

fn interpolated_ap(records: &[Record], n_gt: usize, weight: impl Fn(&Record) -> f64) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let mut curve = Vec::with_capacity(records.len());
    let (mut tp, mut wtp) = (0usize, 0.0);
    for (rank, &i) in score_order(&scores).iter().enumerate() {
        if records[i].tp {
            tp += 1;
            wtp += weight(&records[i]);
        }
        curve.push((tp, wtp / (rank + 1) as f64));
    }
    // Envelope from the right, then sample recall k/40 for k = 1..=40.
    let mut env = vec![0.0; curve.len()];
    let mut run = 0.0f64;
    for i in (0..curve.len()).rev() {
        run = run.max(curve[i].1);
        env[i] = run;
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 1..=RECALL_POINTS {
        // First rank whose recall tp/n_gt reaches k/40, in exact integers.
        while i < curve.len() && curve[i].0 * RECALL_POINTS < k * n_gt {
            i += 1;
        }
        if i == curve.len() {
            break;
        }
        sum += env[i];
    }
    sum / RECALL_POINTS as f64
}

/// Mean interpolated precision over 40 recall points.
pub fn average_precision(records: &[Record], n_gt: usize) -> f64 {
    interpolated_ap(records, n_gt, |_| 1.0)
}

/// As [`average_precision`], but each true positive adds its heading weight
/// to the precision numerator. Recall still counts whole matches.
pub fn average_precision_heading(records: &[Record], n_gt: usize) -> f64 {
    interpolated_ap(records, n_gt, |r| r.h)
}

/// One frame of evaluation input.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub cls: usize,
    pub box3d: Box3D,
    pub n_points: usize,
}

impl Frame {
    pub fn from_scene(scene: &Scene, dets: Vec<Detection>) -> Self {
        let counts = scene.points_per_box();
        let gts = scene
            .boxes
            .iter()
            .zip(counts)
            .map(|(b, n)| GroundTruth { cls: b.cls, box3d: b.box3d, n_points: n })
            .collect();
        Self { dets, gts }
    }
}

/// Records of one class over all frames, tagged with a range bin. Detections
/// matched to don't-care boxes are dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassRecords {
    pub records: Vec<(Record, usize)>,
    pub n_gt: [usize; RANGE_BINS.len()],
}

impl ClassRecords {
    pub fn total_gt(&self) -> usize {
        self.n_gt.iter().sum()
    }

    pub fn all(&self) -> Vec<Record> {
        self.records.iter().map(|r| r.0).collect()
    }

    pub fn in_bin(&self, k: usize) -> Vec<Record> {
        self.records.iter().filter(|r| r.1 == k).map(|r| r.0).collect()
    }
}

pub fn collect_records(frames: &[Frame], cls: usize, level: Level) -> ClassRecords {
    let mut out = ClassRecords::default();
    for f in frames {
        let gts: Vec<&GroundTruth> = f.gts.iter().filter(|g| g.cls == cls).collect();
        let dets: Vec<&Detection> = f.dets.iter().filter(|d| d.cls == cls).collect();
        let m = match_dets(
            &dets.iter().map(|d| (d.score, d.box3d)).collect::<Vec<_>>(),
            &gts.iter().map(|g| g.box3d).collect::<Vec<_>>(),
            iou_threshold(cls),
        );
        for g in &gts {
            if level.admits(g.n_points) {
                out.n_gt[range_bin_of(g.box3d.center_range())] += 1;
            }
        }
        for (d, dm) in dets.iter().zip(&m.dets) {
            let (tp, bin) = match dm.gt {
                Some(g) if !level.admits(gts[g].n_points) => continue,
                Some(g) => (true, range_bin_of(gts[g].box3d.center_range())),
                None => (false, range_bin_of(d.box3d.center_range())),
            };
            out.records.push((Record { score: d.score, tp, h: dm.h }, bin));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApPair {
    pub ap: f64,
    pub aph: f64,
}

/// Per-bin AP/APH keyed by bin label; bins without ground truth are absent.
pub fn range_breakdown(rec: &ClassRecords) -> BTreeMap<String, ApPair> {
    (0..RANGE_BINS.len())
        .filter(|&k| rec.n_gt[k] > 0)
        .map(|k| {
            let r = rec.in_bin(k);
            let pair = ApPair {
                ap: average_precision(&r, rec.n_gt[k]),
                aph: average_precision_heading(&r, rec.n_gt[k]),
            };
            (range_bin_label(k), pair)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub aph: f64,
    pub per_range: BTreeMap<String, ApPair>,
    pub level: u8,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Metrics keyed by class name, for classes with ground truth at `level`.
pub type Metrics = BTreeMap<String, ClassMetrics>;

pub fn class_name(cls: usize) -> String {
    CLASS_NAMES.get(cls).map_or_else(|| format!("class{cls}"), |s| s.to_string())
}

pub fn evaluate(frames: &[Frame], n_classes: usize, level: Level) -> Metrics {
    let mut out = Metrics::new();
    for cls in 0..n_classes {
        let rec = collect_records(frames, cls, level);
        let n_gt = rec.total_gt();
        if n_gt == 0 {
            continue;
        }
        let all = rec.all();
        out.insert(
            class_name(cls),
            ClassMetrics {
                ap: average_precision(&all, n_gt),
                aph: average_precision_heading(&all, n_gt),
                per_range: range_breakdown(&rec),
                level: level.number(),
                n_gt,
                n_det: all.len(),
            },
        );
    }
    out
}

/// Mean AP / APH over the classes present.
pub fn mean_ap(m: &Metrics) -> ApPair {
    if m.is_empty() {
        return ApPair { ap: 0.0, aph: 0.0 };
    }
    let n = m.len() as f64;
    ApPair {
        ap: m.values().map(|c| c.ap).sum::<f64>() / n,
        aph: m.values().map(|c| c.aph).sum::<f64>() / n,
    }
}

/// AP at a custom IoU threshold for one class at level 2, used for the
/// overfit check.
pub fn ap_at(frames: &[Frame], cls: usize, iou_thr: f64) -> f64 {
    let mut records = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let gts: Vec<Box3D> = f.gts.iter().filter(|g| g.cls == cls).map(|g| g.box3d).collect();
        let dets: Vec<(f64, Box3D)> = f.dets.iter().filter(|d| d.cls == cls).map(|d| (d.score, d.box3d)).collect();
        let m = match_dets(&dets, &gts, iou_thr);
        n_gt += gts.len();
        records.extend(dets.iter().zip(&m.dets).map(|(d, dm)| Record { score: d.0, tp: dm.gt.is_some(), h: dm.h }));
    }
    average_precision(&records, n_gt)
}
