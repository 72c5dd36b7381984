//! Point clouds, the polar grid, and the pillar-style encoder that turns a
//! sweep into a dense polar feature map.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, polar_to_cart, range_bin_edges, range_to_bin_edges, CartPoint, DiscretizationStrategy, PolarPoint};
use crate::tensor::Tensor;

const TWO_PI: f64 = 2.0 * PI;

/// Raw channels computed per fine cell.
pub const C_FINE: usize = 10;

pub const CHANNEL_NAMES: [&str; C_FINE] = [
    "log_count", "mean_dr", "mean_arc", "mean_z", "max_z", "mean_i", "max_i", "mean_dx", "mean_dy", "occupied",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub i: f64,
    pub r: f64,
    pub a: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, i: f64) -> Self {
        let p = cart_to_polar(CartPoint::new(x, y));
        Self { x, y, z, i, r: p.r, a: p.a }
    }

    fn canonical_cmp(&self, o: &Self) -> Ordering {
        self.x
            .total_cmp(&o.x)
            .then(self.y.total_cmp(&o.y))
            .then(self.z.total_cmp(&o.z))
            .then(self.i.total_cmp(&o.i))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn from_xyzi(pts: impl IntoIterator<Item = [f64; 4]>) -> Self {
        Self {
            points: pts.into_iter().map(|[x, y, z, i]| LidarPoint::new(x, y, z, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Serializable grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub range: DiscretizationStrategy,
    pub n_azimuth: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub downsample: usize,
}

impl Default for GridConfig {
    /// Desk-scale reference grid: 0.2 m range bins out to 38.7 m, 384
    /// azimuth bins, 4x BEV stride → 48 x 96 BEV map.
    fn default() -> Self {
        Self {
            range: DiscretizationStrategy::uniform(0.3, 38.7, 192),
            n_azimuth: 384,
            z_min: -0.5,
            z_max: 4.0,
            downsample: 4,
        }
    }
}

/// Number of azimuth bins for a requested angular voxel size: `2π / size`
/// rounded to the nearest multiple of `multiple`.
pub fn azimuth_bins_for_size(size: f64, multiple: usize) -> usize {
    let raw = TWO_PI / size / multiple as f64;
    (raw.round().max(1.0) as usize) * multiple
}

/// Polar BEV grid with cached range edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub config: GridConfig,
    edges: Vec<f64>,
}

impl GridSpec {
    pub fn new(config: GridConfig) -> Result<Self> {
        let edges = range_bin_edges(&config.range)?;
        let ds = config.downsample;
        if ds == 0 || config.n_azimuth == 0 {
            return Err(Error::config("downsample and n_azimuth must be positive"));
        }
        if config.n_azimuth % ds != 0 || config.range.n_bins % ds != 0 {
            return Err(Error::config(format!(
                "grid {}x{} is not divisible by downsample {}",
                config.range.n_bins, config.n_azimuth, ds
            )));
        }
        if !(config.z_min < config.z_max) {
            return Err(Error::config("z_min must be below z_max"));
        }
        Ok(Self { config, edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn fine_rows(&self) -> usize {
        self.config.range.n_bins
    }

    pub fn fine_cols(&self) -> usize {
        self.config.n_azimuth
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample
    }

    /// BEV map shape `(R, A)` after downsampling.
    pub fn coarse_shape(&self) -> (usize, usize) {
        let ds = self.config.downsample;
        (self.fine_rows() / ds, self.fine_cols() / ds)
    }

    pub fn r_max(&self) -> f64 {
        self.config.range.r_max
    }

    pub fn fine_col_width(&self) -> f64 {
        TWO_PI / self.fine_cols() as f64
    }

    pub fn coarse_col_width(&self) -> f64 {
        TWO_PI / self.coarse_shape().1 as f64
    }

    pub fn azimuth_bin(&self, a: f64) -> usize {
        let n = self.fine_cols();
        (((a + PI) / TWO_PI * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    pub fn range_bin(&self, r: f64) -> Option<usize> {
        range_to_bin_edges(r, &self.edges)
    }

    /// Fine cell `(row, col)` of a point, or `None` when outside the grid.
    pub fn fine_cell(&self, p: &LidarPoint) -> Option<(usize, usize)> {
        if !(p.z >= self.config.z_min && p.z <= self.config.z_max) {
            return None;
        }
        let row = self.range_bin(p.r)?;
        Some((row, self.azimuth_bin(p.a)))
    }

    pub fn fine_center(&self, row: usize, col: usize) -> PolarPoint {
        PolarPoint {
            r: 0.5 * (self.edges[row] + self.edges[row + 1]),
            a: -PI + (col as f64 + 0.5) * self.fine_col_width(),
        }
    }

    /// Range of a coarse row center: midpoint of its outer fine edges.
    pub fn coarse_row_center(&self, row: usize) -> f64 {
        let ds = self.config.downsample;
        0.5 * (self.edges[row * ds] + self.edges[(row + 1) * ds])
    }

    pub fn coarse_col_center(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.coarse_col_width()
    }

    /// Real-world `(r, a, x, y)` of a coarse pixel center.
    pub fn coarse_pixel_position(&self, row: usize, col: usize) -> [f64; 4] {
        let r = self.coarse_row_center(row);
        let a = self.coarse_col_center(col);
        let c = polar_to_cart(PolarPoint { r, a });
        [r, a, c.x, c.y]
    }

    /// Coarse row containing range `r`, if inside the grid.
    pub fn coarse_row_of(&self, r: f64) -> Option<usize> {
        self.range_bin(r).map(|b| b / self.config.downsample)
    }

    pub fn coarse_col_of(&self, a: f64) -> usize {
        self.azimuth_bin(a) / self.config.downsample
    }
}

/// Dense `(R, A, C)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self(Tensor::zeros(&[rows, cols, channels]))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::shape(format!("feature map must be rank 3, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let (a, c) = (self.cols(), self.channels());
        &self.0.data()[(row * a + col) * c..(row * a + col + 1) * c]
    }

    /// Columns `[start, end)` as a new map.
    pub fn columns(&self, start: usize, end: usize) -> FeatureMap {
        let (r, c) = (self.rows(), self.channels());
        let mut out = Vec::with_capacity(r * (end - start) * c);
        for i in 0..r {
            for j in start..end {
                out.extend_from_slice(self.pixel(i, j));
            }
        }
        FeatureMap(Tensor::new(vec![r, end - start, c], out).unwrap())
    }
}

/// Occupied fine cells in canonical order with their raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct FineCells {
    /// `(row, col, point count, features)`.
    pub cells: Vec<(usize, usize, usize, [f64; C_FINE])>,
}

impl FineCells {
    pub fn total_points(&self) -> usize {
        self.cells.iter().map(|c| c.2).sum()
    }
}

/// Bins points into fine cells and computes the raw per-cell channels.
/// Points are reduced in a canonical order (cell, then coordinates), so the
/// result does not depend on input order.
pub fn fine_cells(cloud: &PointCloud, spec: &GridSpec) -> FineCells {
    let n_cols = spec.fine_cols();
    let mut keyed: Vec<(usize, &LidarPoint)> = cloud
        .points
        .iter()
        .filter_map(|p| spec.fine_cell(p).map(|(r, c)| (r * n_cols + c, p)))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.canonical_cmp(b.1)));

    let mut cells = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let key = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|k| k.0 == key).count();
        let (row, col) = (key / n_cols, key % n_cols);
        let center = spec.fine_center(row, col);
        let cc = polar_to_cart(center);
        let n = (end - start) as f64;
        let mut sum = [0.0; 6];
        let (mut max_z, mut max_i) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(_, p) in &keyed[start..end] {
            sum[0] += p.r - center.r;
            sum[1] += (p.a - center.a) * p.r;
            sum[2] += p.z;
            sum[3] += p.i;
            sum[4] += p.x - cc.x;
            sum[5] += p.y - cc.y;
            max_z = max_z.max(p.z);
            max_i = max_i.max(p.i);
        }
        let feat = [
            (1.0 + n).ln(),
            sum[0] / n,
            sum[1] / n,
            sum[2] / n,
            max_z,
            sum[3] / n,
            max_i,
            sum[4] / n,
            sum[5] / n,
            1.0,
        ];
        cells.push((row, col, end - start, feat));
        start = end;
    }
    FineCells { cells }
}

/// Dense `(R, A, C_FINE)` BEV map: fine-cell channels max-pooled over each
/// `downsample x downsample` block (empty cells contribute zeros).
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> FeatureMap {
    let fine = fine_cells(cloud, spec);
    let ds = spec.downsample();
    let (rr, aa) = spec.coarse_shape();
    let mut data = vec![f64::NEG_INFINITY; rr * aa * C_FINE];
    let mut occupied = vec![0usize; rr * aa];
    for (row, col, _, feat) in &fine.cells {
        let b = (row / ds) * aa + col / ds;
        occupied[b] += 1;
        for (d, f) in data[b * C_FINE..(b + 1) * C_FINE].iter_mut().zip(feat) {
            *d = d.max(*f);
        }
    }
    for (b, &occ) in occupied.iter().enumerate() {
        if occ < ds * ds {
            for d in &mut data[b * C_FINE..(b + 1) * C_FINE] {
                *d = d.max(0.0);
            }
        }
    }
    FeatureMap(Tensor::new(vec![rr, aa, C_FINE], data).unwrap())
}

/// Occupancy of one coarse radial row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RowOccupancy {
    pub occupied_cells: usize,
    pub mean_points: f64,
    pub var_points: f64,
}

fn row_stats(counts_by_row: &[Vec<usize>]) -> Vec<RowOccupancy> {
    counts_by_row
        .iter()
        .map(|counts| {
            if counts.is_empty() {
                return RowOccupancy::default();
            }
            let n = counts.len() as f64;
            let mean = counts.iter().sum::<usize>() as f64 / n;
            let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
            RowOccupancy {
                occupied_cells: counts.len(),
                mean_points: mean,
                var_points: var,
            }
        })
        .collect()
}

/// Per coarse radial row: occupied fine cells and the mean / variance of
/// points per occupied cell.
pub fn occupancy_stats(cloud: &PointCloud, spec: &GridSpec) -> Vec<RowOccupancy> {
    let fine = fine_cells(cloud, spec);
    let (rr, _) = spec.coarse_shape();
    let mut by_row = vec![Vec::new(); rr];
    for (row, _, n, _) in &fine.cells {
        by_row[row / spec.downsample()].push(*n);
    }
    row_stats(&by_row)
}

/// Occupancy of a square Cartesian grid of side `cell` covering the same
/// annulus, with cells grouped into the radial bands given by `band_edges`
/// (by cell-center range). Only points inside the annulus and z range count.
pub fn cartesian_occupancy(cloud: &PointCloud, spec: &GridSpec, cell: f64, band_edges: &[f64]) -> (Vec<RowOccupancy>, Vec<usize>) {
    let mut keys: Vec<(i64, i64)> = cloud
        .points
        .iter()
        .filter(|p| spec.fine_cell(p).is_some())
        .map(|p| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64))
        .collect();
    keys.sort_unstable();
    let mut counts: Vec<((i64, i64), usize)> = Vec::new();
    for k in keys {
        match counts.last_mut() {
            Some((last, n)) if *last == k => *n += 1,
            _ => counts.push((k, 1)),
        }
    }
    let n_bands = band_edges.len() - 1;
    let mut by_band = vec![Vec::new(); n_bands];
    for ((ix, iy), n) in &counts {
        let cx = (*ix as f64 + 0.5) * cell;
        let cy = (*iy as f64 + 0.5) * cell;
        let r = cx.hypot(cy);
        let band = range_to_bin_edges(r.clamp(band_edges[0], band_edges[n_bands]), band_edges).unwrap_or(n_bands - 1);
        by_band[band].push(*n);
    }
    (row_stats(&by_band), counts.into_iter().map(|c| c.1).collect())
}

/// Points-per-occupied-cell counts of the polar grid.
pub fn polar_cell_counts(cloud: &PointCloud, spec: &GridSpec) -> Vec<usize> {
    fine_cells(cloud, spec).cells.iter().map(|c| c.2).collect()
}

/// Coefficient of variation of the per-row mean points per occupied cell,
/// over rows that have at least one occupied cell.
pub fn density_cov(rows: &[RowOccupancy]) -> f64 {
    let means: Vec<f64> = rows.iter().filter(|r| r.occupied_cells > 0).map(|r| r.mean_points).collect();
    if means.len() < 2 {
        return 0.0;
    }
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n;
    var.sqrt() / mu
}

/// Fraction of points that do not fit when every cell holds at most
/// `capacity` points.
pub fn overflow_fraction(counts: &[usize], capacity: usize) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let lost: usize = counts.iter().map(|&c| c.saturating_sub(capacity)).sum();
    lost as f64 / total as f64
}

/// Splits a sweep into `n_sectors` equal azimuth wedges, ordered from -π.
/// Sector membership follows the fine azimuth bin, so each sector's points
/// land exactly in that sector's BEV columns.
pub fn sectorize(cloud: &PointCloud, spec: &GridSpec, n_sectors: usize) -> Result<Vec<PointCloud>> {
    let (_, aa) = spec.coarse_shape();
    if n_sectors == 0 || aa % n_sectors != 0 {
        return Err(Error::config(format!(
            "{n_sectors} sectors do not divide the {aa} BEV columns"
        )));
    }
    let per = spec.fine_cols() / n_sectors;
    let mut out = vec![PointCloud::default(); n_sectors];
    for p in &cloud.points {
        out[spec.azimuth_bin(p.a) / per].points.push(*p);
    }
    Ok(out)
}
