//! Unit directions, equirectangular direction grids and y-axis rotations.
//!
//! Conventions used throughout the crate: the world frame is y-up, the polar
//! angle `theta` is measured from +y, and the azimuth `phi` is measured from
//! +z toward +x, so a direction decomposes as
//! `d = (sin(theta)sin(phi), cos(theta), sin(theta)cos(phi))`.
//! Equirectangular pixel centers sit at half-integer coordinates, which keeps
//! the poles (where `sin(theta) = 0`) out of every grid.

use nalgebra::{DVector, Matrix3, Matrix3xX, Vector3};

use crate::equivariant::LatentCode;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// A unit-norm direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Builds a direction from components, normalizing them.
    ///
    /// Fails on non-finite components or a near-zero vector.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vector3::new(x, y, z);
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("direction has non-finite components".into()));
        }
        let norm = v.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidInput("direction has near-zero norm".into()));
        }
        Ok(Direction(v / norm))
    }

    /// Wraps a vector that is already unit-norm within tolerance.
    pub fn from_unit(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-6, "vector is not unit norm");
        Direction(v)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// Polar angle from +y, in `[0, pi]`.
    pub fn polar_angle(&self) -> f64 {
        self.0.y.clamp(-1.0, 1.0).acos()
    }

    /// Azimuth from +z toward +x, in `(-pi, pi]`.
    pub fn azimuth(&self) -> f64 {
        self.0.x.atan2(self.0.z)
    }

    /// True when the norm deviates from 1 by less than `1e-9`.
    pub fn is_unit(&self) -> bool {
        (self.0.norm() - 1.0).abs() < UNIT_TOL
    }
}

/// Row-major equirectangular grid of directions with per-pixel sine weights.
///
/// A grid of height `H` has width `W = 2H` and `P = 2H^2` pixels. Pixel
/// `(row i, col j)` maps to `theta = pi(i+0.5)/H`, `phi = 2pi(j+0.5)/W`.
/// `sin_weights[j] = sin(theta_j)` is the equirectangular area weight; the
/// weighted Riemann sum over the grid approximates the sphere area `4pi`.
#[derive(Debug, Clone)]
pub struct DirectionGrid {
    height: usize,
    width: usize,
    dirs: Matrix3xX<f64>,
    sin_weights: DVector<f64>,
}

impl DirectionGrid {
    /// Builds the equirectangular grid for image height `h >= 1`.
    pub fn equirect(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::InvalidInput("grid height must be at least 1".into()));
        }
        let w = 2 * h;
        let p = w * h;
        let mut dirs = Matrix3xX::zeros(p);
        let mut sin_weights = DVector::zeros(p);
        for i in 0..h {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / h as f64;
            let (sin_t, cos_t) = theta.sin_cos();
            for j in 0..w {
                let phi = std::f64::consts::TAU * (j as f64 + 0.5) / w as f64;
                let (sin_p, cos_p) = phi.sin_cos();
                let idx = i * w + j;
                dirs.set_column(idx, &Vector3::new(sin_t * sin_p, cos_t, sin_t * cos_p));
                sin_weights[idx] = sin_t;
            }
        }
        Ok(DirectionGrid {
            height: h,
            width: w,
            dirs,
            sin_weights,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels `P = 2H^2`.
    pub fn len(&self) -> usize {
        self.dirs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major pixel index.
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub fn direction(&self, idx: usize) -> Direction {
        Direction::from_unit(self.dirs.column(idx).into())
    }

    /// All directions as a 3xP matrix, one column per pixel.
    pub fn directions(&self) -> &Matrix3xX<f64> {
        &self.dirs
    }

    pub fn sin_weights(&self) -> &DVector<f64> {
        &self.sin_weights
    }

    /// Angular pixel footprint `dtheta * dphi = (pi/H)(2pi/W)`.
    ///
    /// `sin_weights[j] * pixel_footprint()` is the solid angle of pixel `j`.
    pub fn pixel_footprint(&self) -> f64 {
        (std::f64::consts::PI / self.height as f64) * (std::f64::consts::TAU / self.width as f64)
    }
}

/// A rotation about the vertical (y) axis by `angle` radians.
///
/// The matrix convention is
/// `R_y(psi) = [[cos, 0, -sin], [0, 1, 0], [sin, 0, cos]]`,
/// which maps a direction of azimuth `phi` to azimuth `phi - psi`. A signal
/// rotated "by `psi`" in the sense of [`crate::dataset::rotate_map`] is
/// represented by the latent `R_y(psi) * Z` when the original is `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YRotation {
    angle: f64,
}

impl YRotation {
    pub fn new(angle: f64) -> Self {
        YRotation { angle }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn inverse(&self) -> Self {
        YRotation { angle: -self.angle }
    }

    /// The orthonormal 3x3 matrix with determinant +1 fixing (0, 1, 0).
    pub fn matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
    }

    /// Rotates a direction; the norm and y-component are preserved.
    pub fn rotate_direction(&self, d: Direction) -> Direction {
        let v = d.vector();
        let (s, c) = self.angle.sin_cos();
        Direction::from_unit(Vector3::new(c * v.x - s * v.z, v.y, s * v.x + c * v.z))
    }

    /// Rotates every column vector of a latent code; Frobenius norm preserved.
    pub fn rotate_latent(&self, z: &LatentCode) -> LatentCode {
        let m = self.matrix();
        let rotated = &m * z.matrix();
        LatentCode::from_matrix_unchecked(Matrix3xX::from(rotated))
    }
}
