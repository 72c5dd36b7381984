//! Voxel-size sweeps: how evenly points spread over occupied cells, and how
//! many are lost to a per-cell capacity, for the polar grid versus a square
//! Cartesian grid with the same number of cells.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::voxelize::{cartesian_occupancy, density_cov, fine_cells, GridConfig, GridSpec, PointCloud, RowOccupancy};

/// Base grid coarsened by `scale`: range bins rounded to a multiple of the
/// downsample factor, azimuth bins to a multiple of `az_multiple`.
pub fn scaled_grid(base: &GridConfig, scale: usize, az_multiple: usize) -> Result<GridConfig> {
    if scale == 0 || az_multiple == 0 {
        return Err(Error::config("scale and azimuth multiple must be positive"));
    }
    let ds = base.downsample;
    let round_to = |n: usize, m: usize| (((n as f64 / scale as f64) / m as f64).round().max(1.0) as usize) * m;
    let mut g = base.clone();
    g.range.n_bins = round_to(base.range.n_bins, ds);
    g.n_azimuth = round_to(base.n_azimuth, az_multiple);
    GridSpec::new(g.clone())?;
    Ok(g)
}

/// Side of a square cell whose area equals the mean polar cell area.
pub fn matched_cartesian_cell(spec: &GridSpec) -> f64 {
    let (r0, r1) = (spec.edges()[0], spec.r_max());
    let area = PI * (r1 * r1 - r0 * r0);
    (area / (spec.fine_rows() * spec.fine_cols()) as f64).sqrt()
}

/// Range edges of the coarse rows, used as bands for both grids.
pub fn band_edges(spec: &GridSpec) -> Vec<f64> {
    spec.edges().iter().step_by(spec.downsample()).copied().collect()
}

/// Pools two row statistics as if their cells were one population.
pub fn merge_rows(a: &RowOccupancy, b: &RowOccupancy) -> RowOccupancy {
    let n = a.occupied_cells + b.occupied_cells;
    if n == 0 {
        return RowOccupancy::default();
    }
    let (na, nb) = (a.occupied_cells as f64, b.occupied_cells as f64);
    let mean = (na * a.mean_points + nb * b.mean_points) / n as f64;
    let ex2 = (na * (a.var_points + a.mean_points.powi(2)) + nb * (b.var_points + b.mean_points.powi(2))) / n as f64;
    RowOccupancy {
        occupied_cells: n,
        mean_points: mean,
        var_points: (ex2 - mean * mean).max(0.0),
    }
}

fn rows_from_cells(spec: &GridSpec, cells: &[(usize, usize)]) -> Vec<RowOccupancy> {
    let rr = spec.coarse_shape().0;
    let mut sum = vec![(0usize, 0.0f64, 0.0f64); rr];
    for &(row, n) in cells {
        let s = &mut sum[row / spec.downsample()];
        s.0 += 1;
        s.1 += n as f64;
        s.2 += (n * n) as f64;
    }
    sum.into_iter()
        .map(|(k, s, s2)| {
            if k == 0 {
                return RowOccupancy::default();
            }
            let mean = s / k as f64;
            RowOccupancy { occupied_cells: k, mean_points: mean, var_points: (s2 / k as f64 - mean * mean).max(0.0) }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityRow {
    pub scale: usize,
    pub radial_bins: usize,
    pub azimuth_bins: usize,
    pub cart_cell_m: f64,
    pub polar_cov: f64,
    pub cart_cov: f64,
    pub polar_loss: f64,
    pub cart_loss: f64,
}

/// Density statistics pooled over `clouds` at one scale.
pub fn density_row(clouds: &[PointCloud], grid: &GridConfig, scale: usize, capacity: usize) -> Result<DensityRow> {
    let spec = GridSpec::new(grid.clone())?;
    let cell = matched_cartesian_cell(&spec);
    let bands = band_edges(&spec);
    let mut polar = vec![RowOccupancy::default(); bands.len() - 1];
    let mut cart = polar.clone();
    let (mut p_tot, mut p_lost, mut c_tot, mut c_lost) = (0usize, 0usize, 0usize, 0usize);
    for cloud in clouds {
        let cells: Vec<(usize, usize)> = fine_cells(cloud, &spec).cells.iter().map(|c| (c.0, c.2)).collect();
        p_tot += cells.iter().map(|c| c.1).sum::<usize>();
        p_lost += cells.iter().map(|c| c.1.saturating_sub(capacity)).sum::<usize>();
        for (acc, r) in polar.iter_mut().zip(rows_from_cells(&spec, &cells)) {
            *acc = merge_rows(acc, &r);
        }
        let (rows, counts) = cartesian_occupancy(cloud, &spec, cell, &bands);
        for (acc, r) in cart.iter_mut().zip(&rows) {
            *acc = merge_rows(acc, r);
        }
        c_tot += counts.iter().sum::<usize>();
        c_lost += counts.iter().map(|c| c.saturating_sub(capacity)).sum::<usize>();
    }
    let frac = |lost: usize, tot: usize| if tot == 0 { 0.0 } else { lost as f64 / tot as f64 };
    Ok(DensityRow {
        scale,
        radial_bins: spec.fine_rows(),
        azimuth_bins: spec.fine_cols(),
        cart_cell_m: cell,
        polar_cov: density_cov(&polar),
        cart_cov: density_cov(&cart),
        polar_loss: frac(p_lost, p_tot),
        cart_loss: frac(c_lost, c_tot),
    })
}

pub fn density_table(clouds: &[PointCloud], base: &GridConfig, scales: &[usize], az_multiple: usize, capacity: usize) -> Result<Vec<DensityRow>> {
    scales
        .iter()
        .map(|&s| density_row(clouds, &scaled_grid(base, s, az_multiple)?, s, capacity))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scales() {
        let base = GridConfig::default();
        let shapes: Vec<(usize, usize)> = [1, 2, 3, 4, 5]
            .iter()
            .map(|&s| {
                let g = scaled_grid(&base, s, 32).unwrap();
                (g.range.n_bins, g.n_azimuth)
            })
            .collect();
        assert_eq!(shapes, [(192, 384), (96, 192), (64, 128), (48, 96), (40, 64)]);
    }

    #[test]
    fn merge_matches_direct() {
        let spec = GridSpec::new(GridConfig::default()).unwrap();
        let a = rows_from_cells(&spec, &[(0, 1), (1, 3)]);
        let b = rows_from_cells(&spec, &[(2, 5)]);
        let both = rows_from_cells(&spec, &[(0, 1), (1, 3), (2, 5)]);
        let m = merge_rows(&a[0], &b[0]);
        assert!((m.mean_points - both[0].mean_points).abs() < 1e-12);
        assert!((m.var_points - both[0].var_points).abs() < 1e-12);
        assert_eq!(m.occupied_cells, 3);
    }

    #[test]
    fn matched_cell_preserves_area() {
        let spec = GridSpec::new(GridConfig::default()).unwrap();
        let c = matched_cartesian_cell(&spec);
        let n = (spec.fine_rows() * spec.fine_cols()) as f64;
        let area = PI * (38.7f64.powi(2) - 0.3f64.powi(2));
        assert!((c * c * n - area).abs() < 1e-6 * area);
    }
}
