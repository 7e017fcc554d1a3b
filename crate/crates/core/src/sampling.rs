//! Bilinear sampling with a zero-padded border, and per-pixel warping.
//!
//! Coordinates are `(y, x)` = (row, column) with the origin at the top-left
//! pixel centre. Any of the four neighbours that falls outside the grid
//! contributes zero.

use crate::error::{input_err, shape_err, Result};
use crate::tensor::{FeatureMap, FlowField};

/// Integer tap position `p_k` of a convolution kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BaseOffset {
    pub dy: i32,
    pub dx: i32,
}

impl BaseOffset {
    pub const ZERO: BaseOffset = BaseOffset { dy: 0, dx: 0 };

    pub fn new(dy: i32, dx: i32) -> Self {
        Self { dy, dx }
    }
}

/// Learned per-pixel displacement; same layout and convention as a flow field.
pub type Displacement = FlowField;

/// The four-neighbour interpolation cell around a real coordinate.
///
/// With `left_limit` set, integer coordinates are assigned to the cell on
/// their lower side (`top = y - 1`, `fy = 1`). The sampled value is the
/// same either way; only the coordinate derivative differs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub top: isize,
    pub left: isize,
    pub fy: f64,
    pub fx: f64,
}

impl Cell {
    /// `None` when all four neighbours lie outside `height × width`.
    #[inline]
    pub fn locate(y: f64, x: f64, height: usize, width: usize, left_limit: bool) -> Option<Cell> {
        if y <= -1.0 || x <= -1.0 || y >= height as f64 || x >= width as f64 {
            return None;
        }
        let (y0, x0) = if left_limit {
            (y.ceil() - 1.0, x.ceil() - 1.0)
        } else {
            (y.floor(), x.floor())
        };
        Some(Cell {
            top: y0 as isize,
            left: x0 as isize,
            fy: y - y0,
            fx: x - x0,
        })
    }

    /// Flat indices of the (top-left, top-right, bottom-left, bottom-right)
    /// neighbours, `None` where out of bounds.
    #[inline]
    pub fn corners(&self, height: usize, width: usize) -> [Option<usize>; 4] {
        let idx = |r: isize, c: isize| {
            (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width)
                .then(|| r as usize * width + c as usize)
        };
        [
            idx(self.top, self.left),
            idx(self.top, self.left + 1),
            idx(self.top + 1, self.left),
            idx(self.top + 1, self.left + 1),
        ]
    }

    #[inline]
    pub fn values(&self, plane: &[f64], height: usize, width: usize) -> [f64; 4] {
        self.corners(height, width)
            .map(|c| c.map_or(0.0, |i| plane[i]))
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fy, fx) = (self.fy, self.fx);
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ]
    }

    #[inline]
    pub fn interpolate(&self, v: [f64; 4]) -> f64 {
        let (fy, fx) = (self.fy, self.fx);
        (1.0 - fy) * ((1.0 - fx) * v[0] + fx * v[1]) + fy * ((1.0 - fx) * v[2] + fx * v[3])
    }
}

/// Unchecked sampling for the inner loops.
#[inline]
pub(crate) fn sample(plane: &[f64], height: usize, width: usize, y: f64, x: f64) -> f64 {
    match Cell::locate(y, x, height, width, false) {
        Some(cell) => cell.interpolate(cell.values(plane, height, width)),
        None => 0.0,
    }
}

/// Bilinear interpolation of a row-major `height × width` plane at `(y, x)`.
pub fn bilinear_sample(plane: &[f64], height: usize, width: usize, y: f64, x: f64) -> Result<f64> {
    if height == 0 || width == 0 || plane.len() != height * width {
        return shape_err(format!(
            "plane of {} values does not match {height}x{width}",
            plane.len()
        ));
    }
    if y.is_nan() || x.is_nan() {
        return input_err("NaN sampling coordinate");
    }
    Ok(sample(plane, height, width, y, x))
}

/// Sample location for output pixel `(i, j)`.
#[inline]
pub(crate) fn source_coord(i: usize, j: usize, base: BaseOffset, dy: f64, dx: f64) -> (f64, f64) {
    (
        (i as i64 + base.dy as i64) as f64 + dy,
        (j as i64 + base.dx as i64) as f64 + dx,
    )
}

/// Warps one plane: `out[i, j] = src(i + base.dy + dy[i, j], j + base.dx + dx[i, j])`.
pub(crate) fn warp_plane(
    src: &[f64],
    height: usize,
    width: usize,
    dx: &[f64],
    dy: &[f64],
    base: BaseOffset,
    out: &mut [f64],
) {
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let (y, x) = source_coord(i, j, base, dy[p], dx[p]);
            out[p] = sample(src, height, width, y, x);
        }
    }
}

/// Backward-warps every channel of `feature` by `disp` shifted by the
/// integer tap `base`.
pub fn warp(feature: &FeatureMap, disp: &Displacement, base: BaseOffset) -> Result<FeatureMap> {
    let (h, w) = (feature.height(), feature.width());
    if disp.height() != h || disp.width() != w {
        return shape_err(format!(
            "displacement {}x{} does not match feature {h}x{w}",
            disp.height(),
            disp.width()
        ));
    }
    let mut out = FeatureMap::zeros(feature.channels(), h, w)?;
    for c in 0..feature.channels() {
        warp_plane(
            feature.plane(c),
            h,
            w,
            disp.dx(),
            disp.dy(),
            base,
            out.plane_mut(c),
        );
    }
    Ok(out)
}
