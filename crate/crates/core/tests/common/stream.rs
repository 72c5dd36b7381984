//! Sector streaming against the full sweep.

use polarbev::config::RunConfig;
use polarbev::head::{Detection, HeadMaps};
use polarbev::model::{infer, init_params, ModelParams, Pipeline};
use polarbev::streaming::{peak_cells, run_streaming, LatencyModel};
use polarbev::synth::{generate, Scene, SceneConfig};
use polarbev::view::GridView;
use polarbev::voxelize::{sectorize, voxelize, PointCloud};

use super::Check;

/// Columns a detection must keep from either sector edge to count as
/// interior.
pub const INTERIOR_MARGIN: usize = 16;
pub const INTERIOR_TOL: f64 = 1e-9;
pub const SECTOR_COUNTS: [usize; 4] = [1, 2, 4, 8];

pub fn reference_pipeline(params: Option<ModelParams>) -> Pipeline {
    let cfg = RunConfig::reference();
    let params = params.unwrap_or_else(|| init_params(&cfg.model, cfg.train.seed));
    Pipeline::new(cfg.grid_spec().unwrap(), cfg.model, params, cfg.decode).unwrap()
}

pub fn scene(seed: u64) -> Scene {
    generate(&SceneConfig::default(), seed).unwrap()
}

fn head_maps(p: &Pipeline, cloud: &PointCloud, view: &GridView) -> HeadMaps {
    let input = voxelize(cloud, &p.grid).columns(view.col_offset, view.col_offset + view.cols);
    infer(&p.params, &p.model, &input, view)
}

/// Largest difference of any head output between each sector and the full
/// sweep, per local sector column.
pub fn column_profile(p: &Pipeline, cloud: &PointCloud, n: usize) -> Vec<f64> {
    let full_view = GridView::full(&p.grid);
    let full = head_maps(p, cloud, &full_view);
    let sectors = sectorize(cloud, &p.grid, n).unwrap();
    let per = full_view.cols / n;
    let mut prof = vec![0.0f64; per];
    for (k, s) in sectors.iter().enumerate() {
        let view = GridView::sector(&p.grid, k, n).unwrap();
        let m = head_maps(p, s, &view);
        for i in 0..view.rows {
            for j in 0..per {
                let (ps, pf) = (i * per + j, i * full_view.cols + k * per + j);
                let mut d = (m.iou[ps] - full.iou[pf]).abs();
                for c in 0..m.n_cls {
                    d = d.max((m.heat[ps * m.n_cls + c] - full.heat[pf * m.n_cls + c]).abs());
                }
                for c in 0..8 {
                    d = d.max((m.reg[ps * 8 + c] - full.reg[pf * 8 + c]).abs());
                }
                prof[j] = prof[j].max(d);
            }
        }
    }
    prof
}

pub fn check_single_sector(p: &Pipeline, cloud: &PointCloud) -> Check {
    let full = p.detect(cloud);
    let rep = run_streaming(cloud, 1, p, &LatencyModel::default()).map_err(|e| e.to_string())?;
    if rep.detections() != full {
        return Err("one-sector stream differs from the full sweep".into());
    }
    Ok(format!("n=1 equals full sweep ({} detections)", full.len()))
}

pub fn check_sector_columns(p: &Pipeline, cloud: &PointCloud) -> Check {
    let full = voxelize(cloud, &p.grid);
    let cols = full.cols();
    for n in [2, 4, 6, 8] {
        let sectors = sectorize(cloud, &p.grid, n).map_err(|e| e.to_string())?;
        if sectors.iter().map(PointCloud::len).sum::<usize>() != cloud.len() {
            return Err(format!("n={n}: sectors do not partition the sweep"));
        }
        let per = cols / n;
        for (k, s) in sectors.iter().enumerate() {
            let m = voxelize(s, &p.grid);
            if m.columns(k * per, (k + 1) * per) != full.columns(k * per, (k + 1) * per) {
                return Err(format!("n={n} sector {k}: voxel columns differ from the full sweep"));
            }
            let outside = (0..cols).filter(|&j| j / per != k).any(|j| m.columns(j, j + 1).tensor().data().iter().any(|&v| v != 0.0));
            if outside {
                return Err(format!("n={n} sector {k}: points outside its columns"));
            }
        }
    }
    Ok("sector voxel columns equal full-sweep columns for n=2,4,6,8".into())
}

fn detection_col(p: &Pipeline, d: &Detection) -> usize {
    p.grid.coarse_col_of(d.box3d.cy.atan2(d.box3d.cx))
}

fn close(a: &Detection, b: &Detection) -> bool {
    a.cls == b.cls
        && (a.score - b.score).abs() <= INTERIOR_TOL
        && (a.iou_pred - b.iou_pred).abs() <= INTERIOR_TOL
        && a.box3d.to_array().iter().zip(b.box3d.to_array()).all(|(x, y)| (x - y).abs() <= INTERIOR_TOL)
}

fn interior(p: &Pipeline, n: usize, j: usize) -> bool {
    let per = p.grid.coarse_shape().1 / n;
    j % per >= INTERIOR_MARGIN && j % per + INTERIOR_MARGIN < per
}

/// Head outputs at interior columns agree between the two-sector stream
/// and the full sweep.
pub fn check_interior_maps(p: &Pipeline, cloud: &PointCloud) -> Check {
    let prof = column_profile(p, cloud, 2);
    let worst = (0..prof.len()).filter(|&j| interior(p, 2, j)).map(|j| prof[j]).fold(0.0, f64::max);
    if worst > INTERIOR_TOL {
        return Err(format!("interior head outputs differ by {worst:.2e}"));
    }
    Ok(format!("n=2 interior head outputs within {worst:.1e}"))
}

/// Detections centered in interior columns agree between the two-sector
/// stream and the full sweep. Needs a trained model: untrained boxes land
/// far from the pixel that produced them.
pub fn check_interior_detections(p: &Pipeline, cloud: &PointCloud) -> Check {
    let full: Vec<Detection> = p.detect(cloud).into_iter().filter(|d| interior(p, 2, detection_col(p, d))).collect();
    let rep = run_streaming(cloud, 2, p, &LatencyModel::default()).map_err(|e| e.to_string())?;
    let streamed: Vec<Detection> = rep.detections().into_iter().filter(|d| interior(p, 2, detection_col(p, d))).collect();
    if full.len() != streamed.len() {
        return Err(format!("{} interior detections in the full sweep, {} streamed", full.len(), streamed.len()));
    }
    if full.is_empty() {
        return Err("no interior detections to compare".into());
    }
    for d in &full {
        if !streamed.iter().any(|s| close(d, s)) {
            return Err(format!("interior detection at {:?} has no streamed match", d.box3d.to_array()));
        }
    }
    Ok(format!("{} interior detections identical", full.len()))
}

pub fn check_latency_memory(p: &Pipeline, cloud: &PointCloud) -> Check {
    let model = LatencyModel::default();
    let mut lat = Vec::new();
    for n in SECTOR_COUNTS {
        let rep = run_streaming(cloud, n, p, &model).map_err(|e| e.to_string())?;
        if rep.peak_cells * n != peak_cells(&p.grid, 1) {
            return Err(format!("n={n}: peak memory {} is not full/{n}", rep.peak_cells));
        }
        lat.push(rep.mean_latency);
    }
    if !lat.windows(2).all(|w| w[1] < w[0]) {
        return Err(format!("mean latency not strictly decreasing: {lat:?}"));
    }
    let shown: Vec<String> = lat.iter().map(|l| format!("{:.1}ms", l * 1e3)).collect();
    Ok(format!("latency {} for n=1,2,4,8; memory full/n", shown.join(" > ")))
}

pub fn check_streaming(p: &Pipeline, cloud: &PointCloud) -> Check {
    let parts = [
        check_single_sector(p, cloud)?,
        check_sector_columns(p, cloud)?,
        check_interior_maps(p, cloud)?,
        check_interior_detections(p, cloud)?,
        check_latency_memory(p, cloud)?,
    ];
    Ok(parts.join("; "))
}
