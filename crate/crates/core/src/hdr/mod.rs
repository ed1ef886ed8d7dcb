//! HDR environment map storage, file I/O and log-domain normalization.
//!
//! Linear radiance spans many orders of magnitude, so losses computed in
//! linear space are dominated by the brightest pixels. The field therefore
//! regresses natural-log radiance rescaled to `[-1, 1]` using extrema taken
//! over the whole training set; this module owns those statistics and the
//! forward/inverse maps between the two domains.

mod pfm;
mod rgbe;

pub use pfm::{read_pfm, read_pfm_raw, write_pfm, PfmImage};
pub use rgbe::read_rgbe;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::DirectionGrid;

/// Radiance floor applied before taking logs so zero pixels stay finite.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// An equirectangular HDR radiance image with its direction grid.
///
/// Radiance is stored as a 3xP matrix, one column per pixel in row-major
/// pixel order, all values finite and non-negative.
#[derive(Debug, Clone)]
pub struct EnvironmentMap {
    grid: DirectionGrid,
    rgb: DMatrix<f64>,
}

impl EnvironmentMap {
    pub fn new(grid: DirectionGrid, rgb: DMatrix<f64>) -> Result<Self> {
        if rgb.nrows() != 3 || rgb.ncols() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "radiance shape {}x{} does not match grid with {} pixels",
                rgb.nrows(),
                rgb.ncols(),
                grid.len()
            )));
        }
        if !rgb.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("radiance has non-finite values".into()));
        }
        if rgb.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("radiance has negative values".into()));
        }
        Ok(EnvironmentMap { grid, rgb })
    }

    /// Builds a map by evaluating `f(row, col, pixel index)` per pixel.
    pub fn from_fn(
        grid: DirectionGrid,
        mut f: impl FnMut(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut rgb = DMatrix::zeros(3, grid.len());
        for i in 0..grid.height() {
            for j in 0..grid.width() {
                let idx = grid.index(i, j);
                let v = f(i, j, idx);
                rgb[(0, idx)] = v[0];
                rgb[(1, idx)] = v[1];
                rgb[(2, idx)] = v[2];
            }
        }
        EnvironmentMap::new(grid, rgb)
    }

    pub fn grid(&self) -> &DirectionGrid {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear radiance, 3xP with one column per pixel.
    pub fn rgb(&self) -> &DMatrix<f64> {
        &self.rgb
    }

    pub fn pixel(&self, idx: usize) -> [f64; 3] {
        [self.rgb[(0, idx)], self.rgb[(1, idx)], self.rgb[(2, idx)]]
    }

    /// Maximum value over all pixels and channels.
    pub fn max_value(&self) -> f64 {
        self.rgb.max()
    }

    /// Area-weighted block-average downsampling to height `new_h`.
    ///
    /// Each output pixel averages the covered block of input pixels weighted
    /// by their sine factors, so radiance is conserved per solid angle. The
    /// current height must be a multiple of `new_h`.
    pub fn downsample_area(&self, new_h: usize) -> Result<EnvironmentMap> {
        let h = self.height();
        if new_h == 0 || h % new_h != 0 {
            return Err(Error::InvalidInput(format!(
                "cannot downsample height {h} to {new_h}: not an integer factor"
            )));
        }
        let factor = h / new_h;
        if factor == 1 {
            return Ok(self.clone());
        }
        let grid = DirectionGrid::equirect(new_h)?;
        let w = self.width();
        let mut rgb = DMatrix::zeros(3, grid.len());
        for oi in 0..new_h {
            for oj in 0..grid.width() {
                let mut acc = [0.0f64; 3];
                let mut wsum = 0.0;
                for di in 0..factor {
                    let ii = oi * factor + di;
                    for dj in 0..factor {
                        let jj = oj * factor + dj;
                        let idx = ii * w + jj;
                        let sw = self.grid.sin_weights()[idx];
                        wsum += sw;
                        for c in 0..3 {
                            acc[c] += sw * self.rgb[(c, idx)];
                        }
                    }
                }
                let out = grid.index(oi, oj);
                for c in 0..3 {
                    rgb[(c, out)] = acc[c] / wsum;
                }
            }
        }
        EnvironmentMap::new(grid, rgb)
    }
}

/// Log-radiance extrema of a training set, used for normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub log_min: f64,
    pub log_max: f64,
}

impl NormStats {
    pub fn new(log_min: f64, log_max: f64) -> Result<Self> {
        if !log_min.is_finite() || !log_max.is_finite() {
            return Err(Error::Numerical("normalization stats are non-finite".into()));
        }
        if log_max <= log_min {
            return Err(Error::Numerical(format!(
                "degenerate normalization range: log_min {log_min} >= log_max {log_max}"
            )));
        }
        Ok(NormStats { log_min, log_max })
    }

    pub fn range(&self) -> f64 {
        self.log_max - self.log_min
    }
}

/// Extrema of `ln(max(rgb, floor))` over every pixel and channel of `maps`.
///
/// Fails on an empty list or when all values coincide (no usable range).
pub fn compute_stats(maps: &[EnvironmentMap], floor: f64) -> Result<NormStats> {
    if maps.is_empty() {
        return Err(Error::InvalidInput("cannot compute stats of an empty set".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps {
        for v in m.rgb.iter() {
            let l = v.max(floor).ln();
            lo = lo.min(l);
            hi = hi.max(l);
        }
    }
    NormStats::new(lo, hi)
}

/// Maps linear radiance to normalized log values in `[-1, 1]`.
///
/// `out = 2 (ln(max(rgb, floor)) - log_min) / (log_max - log_min) - 1`,
/// clamped to the unit range so test images brighter or darker than the
/// training extrema saturate rather than escape the model's output range.
pub fn normalize_log(map: &EnvironmentMap, stats: &NormStats, floor: f64) -> DMatrix<f64> {
    map.rgb.map(|v| {
        let l = v.max(floor).ln();
        (2.0 * (l - stats.log_min) / stats.range() - 1.0).clamp(-1.0, 1.0)
    })
}

/// Inverse of [`normalize_log`] on non-clamped inputs.
///
/// `exp(0.5 (v + 1)(log_max - log_min) + log_min)`. Inputs are not clamped;
/// values outside `[-1, 1]` extrapolate smoothly.
pub fn denormalize_log(values: &DMatrix<f64>, stats: &NormStats) -> DMatrix<f64> {
    values.map(|v| (0.5 * (v + 1.0) * stats.range() + stats.log_min).exp())
}

/// Fixed tone map for LDR previews: `x / (1 + x)` then gamma 2.2.
pub fn tonemap_ldr(linear: f64) -> u8 {
    let x = linear.max(0.0);
    let t = (x / (1.0 + x)).powf(1.0 / 2.2);
    (t * 255.0).round().clamp(0.0, 255.0) as u8
}
