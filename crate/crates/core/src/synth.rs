//! Ray-cast LiDAR scenes: a spinning sensor over a flat ground plane with
//! oriented cuboid objects. Randomness comes from ChaCha8 seeded with the
//! scene seed, so a (config, seed) pair always yields the same scene.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polar_to_cart, rotated_iou_bev, wrap_angle, Box3D, PolarPoint};
use crate::voxelize::{fine_cells, GridSpec, PointCloud};

pub const CLASS_NAMES: [&str; 3] = ["vehicle", "pedestrian", "cyclist"];

/// Size ranges `[w, l, h]` (min, max) per class.
const SIZES: [[(f64, f64); 3]; 3] = [
    [(1.7, 2.1), (3.8, 5.0), (1.4, 1.8)],
    [(0.5, 0.9), (0.5, 0.9), (1.6, 1.9)],
    [(0.5, 0.8), (1.6, 1.9), (1.5, 1.8)],
];

pub const GROUND_INTENSITY: f64 = 0.2;
pub const OBJECT_INTENSITY: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_azimuth_rays: usize,
    pub n_elevation_rays: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub sensor_height: f64,
    /// Rays beyond this distance return nothing.
    pub max_range: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Box-center range interval, meters.
    pub box_range: (f64, f64),
    /// Relative frequency of vehicle, pedestrian, cyclist.
    pub class_weights: [f64; 3],
    /// Half-width of the uniform intensity jitter.
    pub intensity_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_azimuth_rays: 1024,
            n_elevation_rays: 64,
            elevation_min: (-25.0f64).to_radians(),
            elevation_max: 3.0f64.to_radians(),
            sensor_height: 1.8,
            max_range: 80.0,
            min_boxes: 4,
            max_boxes: 8,
            box_range: (6.0, 34.0),
            class_weights: [1.0, 0.0, 0.0],
            intensity_jitter: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_azimuth_rays == 0 || self.n_elevation_rays == 0 {
            return Err(Error::config("ray counts must be positive"));
        }
        if !(self.elevation_min < self.elevation_max) || !(self.sensor_height > 0.0) || !(self.max_range > 0.0) {
            return Err(Error::config("invalid sensor geometry"));
        }
        if self.min_boxes > self.max_boxes || !(0.0 < self.box_range.0 && self.box_range.0 < self.box_range.1) {
            return Err(Error::config("invalid box sampler"));
        }
        if self.class_weights.iter().any(|w| *w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("class weights must be non-negative with a positive sum"));
        }
        Ok(())
    }

    pub fn elevation(&self, k: usize) -> f64 {
        if self.n_elevation_rays == 1 {
            return self.elevation_min;
        }
        self.elevation_min + (self.elevation_max - self.elevation_min) * k as f64 / (self.n_elevation_rays - 1) as f64
    }

    pub fn azimuth(&self, k: usize) -> f64 {
        -PI + (k as f64 + 0.5) * 2.0 * PI / self.n_azimuth_rays as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub cls: usize,
    #[serde(rename = "box", with = "box_array")]
    pub box3d: Box3D,
}

mod box_array {
    use super::Box3D;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &Box3D, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Box3D, D::Error> {
        Ok(Box3D::from_array(<[f64; 7]>::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub config: SceneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<LabeledBox>,
    pub meta: SceneMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    points: Vec<[f64; 4]>,
    boxes: Vec<LabeledBox>,
    meta: SceneMeta,
}

impl Scene {
    pub fn to_json(&self) -> String {
        let f = SceneFile {
            points: self.cloud.points.iter().map(|p| [p.x, p.y, p.z, p.i]).collect(),
            boxes: self.boxes.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&f).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let f: SceneFile = serde_json::from_str(text)?;
        Ok(Self {
            cloud: PointCloud::from_xyzi(f.points),
            boxes: f.boxes,
            meta: f.meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// `(class, box)` pairs.
    pub fn labeled(&self) -> Vec<(usize, Box3D)> {
        self.boxes.iter().map(|b| (b.cls, b.box3d)).collect()
    }

    /// Returns inside each box (slightly inflated against rounding).
    pub fn points_per_box(&self) -> Vec<usize> {
        self.boxes
            .iter()
            .map(|lb| {
                let mut b = lb.box3d;
                b.w += 1e-6;
                b.l += 1e-6;
                b.h += 1e-6;
                self.cloud.points.iter().filter(|p| b.contains(p.x, p.y, p.z)).count()
            })
            .collect()
    }
}

/// Entry distance of a ray into a box, if it hits in front of the origin.
pub fn ray_box_hit(origin: [f64; 3], dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.theta.sin_cos();
    let (ox, oy) = (origin[0] - b.cx, origin[1] - b.cy);
    let o = [ox * c + oy * s, -ox * s + oy * c, origin[2] - b.cz];
    let d = [dir[0] * c + dir[1] * s, -dir[0] * s + dir[1] * c, dir[2]];
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let (a, bb) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Distance at which a ray from height `h` meets the ground, if it does.
pub fn ray_ground_hit(origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    (dir[2] < 0.0).then(|| -origin[2] / dir[2])
}

fn sample_box(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> LabeledBox {
    let total: f64 = cfg.class_weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut cls = 0;
    for (k, w) in cfg.class_weights.iter().enumerate() {
        if u < *w {
            cls = k;
            break;
        }
        u -= w;
        cls = k;
    }
    let [wr, lr, hr] = SIZES[cls];
    let w = rng.gen_range(wr.0..=wr.1);
    let l = rng.gen_range(lr.0..=lr.1);
    let h = rng.gen_range(hr.0..=hr.1);
    let r = rng.gen_range(cfg.box_range.0..=cfg.box_range.1);
    let a = rng.gen_range(-PI..PI);
    let theta = wrap_angle(rng.gen_range(-PI..PI));
    let c = polar_to_cart(PolarPoint { r, a });
    LabeledBox {
        cls,
        box3d: Box3D { cx: c.x, cy: c.y, cz: 0.5 * h, w, l, h, theta },
    }
}

fn overlaps(a: &Box3D, b: &Box3D) -> bool {
    let mut inflated = a.bev();
    inflated.w += 0.5;
    inflated.h += 0.5;
    rotated_iou_bev(&inflated, &b.bev()) > 0.0
}

/// Places non-overlapping boxes (rejection sampling, bounded attempts).
pub fn sample_boxes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<LabeledBox> {
    let n = rng.gen_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while boxes.len() < n && attempts < 100 * n.max(1) {
        attempts += 1;
        let cand = sample_box(cfg, rng);
        if boxes.iter().all(|b| !overlaps(&b.box3d, &cand.box3d)) {
            boxes.push(cand);
        }
    }
    boxes
}

/// Casts every ray against `boxes` and the ground; first hit wins. Points
/// are emitted in (azimuth, elevation) ray order.
pub fn cast(cfg: &SceneConfig, boxes: &[LabeledBox], rng: &mut ChaCha8Rng) -> PointCloud {
    let origin = [0.0, 0.0, cfg.sensor_height];
    let mut pts = Vec::new();
    for ia in 0..cfg.n_azimuth_rays {
        let (sa, ca) = cfg.azimuth(ia).sin_cos();
        for ie in 0..cfg.n_elevation_rays {
            let (se, ce) = cfg.elevation(ie).sin_cos();
            let dir = [ce * ca, ce * sa, se];
            let mut best: Option<(f64, f64)> = ray_ground_hit(origin, dir).map(|t| (t, GROUND_INTENSITY));
            for b in boxes {
                if let Some(t) = ray_box_hit(origin, dir, &b.box3d) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, OBJECT_INTENSITY));
                    }
                }
            }
            let Some((t, base)) = best.filter(|(t, _)| *t <= cfg.max_range) else { continue };
            let jitter = rng.gen_range(-1.0..=1.0) * cfg.intensity_jitter;
            let z = if base == GROUND_INTENSITY { 0.0 } else { origin[2] + t * dir[2] };
            pts.push([t * dir[0], t * dir[1], z, (base + jitter).clamp(0.0, 1.0)]);
        }
    }
    PointCloud::from_xyzi(pts)
}

/// Scene for `seed`: boxes are drawn first, then intensity jitter per
/// return, from one ChaCha8 stream.
pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = sample_boxes(cfg, &mut rng);
    let cloud = cast(cfg, &boxes, &mut rng);
    Ok(Scene {
        cloud,
        boxes,
        meta: SceneMeta { seed, config: cfg.clone() },
    })
}

/// Occupied fine radial bins per fine azimuth column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcclusionReport {
    pub columns: Vec<Vec<usize>>,
    pub mean_occupied: f64,
    pub n_radial_bins: usize,
}

pub fn occlusion_demo(scene: &Scene, spec: &GridSpec) -> OcclusionReport {
    let mut columns = vec![Vec::new(); spec.fine_cols()];
    for (row, col, _, _) in fine_cells(&scene.cloud, spec).cells {
        columns[col].push(row);
    }
    for c in &mut columns {
        c.sort_unstable();
    }
    let mean_occupied = columns.iter().map(Vec::len).sum::<usize>() as f64 / columns.len() as f64;
    OcclusionReport {
        columns,
        mean_occupied,
        n_radial_bins: spec.fine_rows(),
    }
}
