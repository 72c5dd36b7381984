//! Placement of a BEV map (full sweep or one sector) on the polar grid.
//! Attention modules read pixel positions and relative offsets from here.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{polar_to_cart, PolarPoint};
use crate::voxelize::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct GridView {
    pub rows: usize,
    pub cols: usize,
    /// Global coarse column of local column 0.
    pub col_offset: usize,
    /// Coarse columns of the full sweep.
    pub total_cols: usize,
    /// Range of each row center, meters.
    pub row_centers: Vec<f64>,
    /// Row boundaries, `rows + 1` ranges.
    pub row_edges: Vec<f64>,
    /// Column width, radians.
    pub col_width: f64,
    /// Range scale used to normalize positional inputs.
    pub r_norm: f64,
    /// Whether the angular axis wraps (full sweep only).
    pub circular: bool,
}

impl GridView {
    pub fn full(spec: &GridSpec) -> Self {
        let (rows, cols) = spec.coarse_shape();
        Self {
            rows,
            cols,
            col_offset: 0,
            total_cols: cols,
            row_centers: (0..rows).map(|i| spec.coarse_row_center(i)).collect(),
            row_edges: (0..=rows).map(|i| spec.edges()[i * spec.downsample()]).collect(),
            col_width: spec.coarse_col_width(),
            r_norm: spec.r_max(),
            circular: true,
        }
    }

    /// Sector `k` of `n`. A single sector is the full sweep and stays
    /// circular; otherwise the angular axis ends at the sector edges.
    pub fn sector(spec: &GridSpec, k: usize, n: usize) -> Result<Self> {
        let full = Self::full(spec);
        if n == 0 || full.cols % n != 0 || k >= n {
            return Err(Error::config(format!("sector {k} of {n} does not tile {} columns", full.cols)));
        }
        if n == 1 {
            return Ok(full);
        }
        let per = full.cols / n;
        Ok(Self {
            cols: per,
            col_offset: k * per,
            circular: false,
            ..full
        })
    }

    /// Small synthetic view with unit-spaced rows, for toy maps and tests.
    pub fn toy(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            col_offset: 0,
            total_cols: cols,
            row_centers: (0..rows).map(|i| 2.0 + i as f64).collect(),
            row_edges: (0..=rows).map(|i| 1.5 + i as f64).collect(),
            col_width: 2.0 * PI / cols as f64,
            r_norm: (rows + 2) as f64,
            circular: true,
        }
    }

    pub fn row_height(&self, row: usize) -> f64 {
        self.row_edges[row + 1] - self.row_edges[row]
    }

    /// Row whose range interval holds `r` (upper edge folded into the last row).
    pub fn row_of(&self, r: f64) -> Option<usize> {
        crate::geometry::range_to_bin_edges(r, &self.row_edges)
    }

    /// Local column holding azimuth `a`, if it falls inside this view.
    pub fn col_of(&self, a: f64) -> Option<usize> {
        let g = (((a + PI) / self.col_width).floor().max(0.0) as usize).min(self.total_cols - 1);
        g.checked_sub(self.col_offset).filter(|&j| j < self.cols)
    }

    pub fn col_angle(&self, col: usize) -> f64 {
        -PI + ((self.col_offset + col) as f64 + 0.5) * self.col_width
    }

    /// `(r, a, x, y)` of a pixel center.
    pub fn pixel_position(&self, row: usize, col: usize) -> [f64; 4] {
        let r = self.row_centers[row];
        let a = self.col_angle(col);
        let c = polar_to_cart(PolarPoint { r, a });
        [r, a, c.x, c.y]
    }

    /// Pixel position scaled to order-one values: ranges by `r_norm`,
    /// angles by π.
    pub fn normalized_position(&self, row: usize, col: usize) -> [f64; 4] {
        let [r, a, x, y] = self.pixel_position(row, col);
        [r / self.r_norm, a / PI, x / self.r_norm, y / self.r_norm]
    }

    /// Signed column step from `from` to `to`, taking the short way round
    /// when the view wraps.
    pub fn col_diff(&self, from: usize, to: usize) -> i64 {
        let d = to as i64 - from as i64;
        if !self.circular {
            return d;
        }
        let n = self.cols as i64;
        let m = d.rem_euclid(n);
        if m >= (n + 1) / 2 {
            m - n
        } else {
            m
        }
    }

    /// Relative offset of key pixel `k` seen from query pixel `q`:
    /// (Δr, Δa, Δx, Δy), with the Cartesian part in the query's local frame
    /// (x along the query ray). Depends only on the two ranges and the
    /// column step, so it is unchanged by rotating the sweep.
    pub fn rel_delta(&self, q: (usize, usize), k: (usize, usize)) -> [f64; 4] {
        let (rq, rk) = (self.row_centers[q.0], self.row_centers[k.0]);
        let da = self.col_diff(q.1, k.1) as f64 * self.col_width;
        [
            (rk - rq) / self.r_norm,
            da / PI,
            (rk * da.cos() - rq) / self.r_norm,
            rk * da.sin() / self.r_norm,
        ]
    }
}
