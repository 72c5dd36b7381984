//! Sector streaming: a sweep is cut into azimuth wedges that arrive one by
//! one as the sensor rotates and are processed sequentially. Times come from
//! an analytic latency model so reports are deterministic.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_ap, Frame, Level};
use crate::head::Detection;
use crate::model::Pipeline;
use crate::synth::Scene;
use crate::voxelize::{sectorize, GridSpec, PointCloud, C_FINE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    /// Seconds per sensor revolution.
    pub rotation_period: f64,
    /// Seconds of compute per BEV column.
    pub per_column_compute_cost: f64,
    /// Seconds of compute added to every sector.
    pub fixed_overhead_per_sector: f64,
    /// Replace modeled compute time by measured wall-clock time. Profiling
    /// only: reports are no longer reproducible.
    pub wall_clock: bool,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            rotation_period: 0.1,
            per_column_compute_cost: 2e-4,
            fixed_overhead_per_sector: 5e-4,
            wall_clock: false,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let v = [self.rotation_period, self.per_column_compute_cost, self.fixed_overhead_per_sector];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("latency model values must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    /// Modeled compute time of a sector with `cols` BEV columns.
    pub fn compute_time(&self, cols: usize) -> f64 {
        self.per_column_compute_cost * cols as f64 + self.fixed_overhead_per_sector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SectorTiming {
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
}

impl SectorTiming {
    pub fn latency(&self) -> f64 {
        self.finish - self.arrival
    }
}

/// Sector `k` arrives at `(k+1)/n` of a revolution and starts once both
/// its data and the previous sector are done.
pub fn schedule(rotation_period: f64, compute: &[f64]) -> Vec<SectorTiming> {
    let n = compute.len();
    let mut out = Vec::with_capacity(n);
    let mut prev_finish = f64::NEG_INFINITY;
    for (k, c) in compute.iter().enumerate() {
        let arrival = (k + 1) as f64 / n as f64 * rotation_period;
        let start = arrival.max(prev_finish);
        let finish = start + c;
        prev_finish = finish;
        out.push(SectorTiming { arrival, start, finish });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorReport {
    pub timing: SectorTiming,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamReport {
    pub n_sectors: usize,
    pub sectors: Vec<SectorReport>,
    pub mean_latency: f64,
    pub max_latency: f64,
    /// Fine grid cells (rows · columns · channels) held for one sector.
    pub peak_cells: usize,
}

impl StreamReport {
    /// Concatenated detections in sector order.
    pub fn detections(&self) -> Vec<Detection> {
        self.sectors.iter().flat_map(|s| s.detections.iter().copied()).collect()
    }
}

pub fn peak_cells(spec: &GridSpec, n_sectors: usize) -> usize {
    spec.fine_rows() * (spec.fine_cols() / n_sectors) * C_FINE
}

pub fn run_streaming(cloud: &PointCloud, n_sectors: usize, pipeline: &Pipeline, model: &LatencyModel) -> Result<StreamReport> {
    model.validate()?;
    let sectors = sectorize(cloud, &pipeline.grid, n_sectors)?;
    let cols = pipeline.grid.coarse_shape().1 / n_sectors;
    let mut dets = Vec::with_capacity(n_sectors);
    let mut compute = Vec::with_capacity(n_sectors);
    for (k, s) in sectors.iter().enumerate() {
        let t0 = Instant::now();
        dets.push(pipeline.detect_sector(s, k, n_sectors)?);
        compute.push(if model.wall_clock { t0.elapsed().as_secs_f64() } else { model.compute_time(cols) });
    }
    let timings = schedule(model.rotation_period, &compute);
    let lat: Vec<f64> = timings.iter().map(SectorTiming::latency).collect();
    Ok(StreamReport {
        n_sectors,
        mean_latency: lat.iter().sum::<f64>() / n_sectors as f64,
        max_latency: lat.iter().copied().fold(0.0, f64::max),
        peak_cells: peak_cells(&pipeline.grid, n_sectors),
        sectors: timings.into_iter().zip(dets).map(|(timing, detections)| SectorReport { timing, detections }).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareRow {
    pub n_sectors: usize,
    pub mean_latency_s: f64,
    pub peak_cells: usize,
    pub ap: f64,
    pub aph: f64,
}

pub const COMPARE_COLUMNS: [&str; 5] = ["n_sectors", "mean_latency_s", "peak_cells", "ap", "aph"];

/// One row per sector count: modeled latency, memory and accuracy against
/// the scene's ground truth.
pub fn compare_streaming_vs_full(
    scene: &Scene,
    n_list: &[usize],
    pipeline: &Pipeline,
    model: &LatencyModel,
    level: Level,
) -> Result<Vec<CompareRow>> {
    n_list
        .iter()
        .map(|&n| {
            let rep = run_streaming(&scene.cloud, n, pipeline, model)?;
            let m = evaluate(&[Frame::from_scene(scene, rep.detections())], pipeline.model.n_classes, level);
            let pair = mean_ap(&m);
            Ok(CompareRow {
                n_sectors: n,
                mean_latency_s: rep.mean_latency,
                peak_cells: rep.peak_cells,
                ap: pair.ap,
                aph: pair.aph,
            })
        })
        .collect()
}
