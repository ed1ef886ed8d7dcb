//! Rotation-invariant input transforms for the conditional field.
//!
//! The field is made invariant to a simultaneous rotation of the query
//! direction `d` and the latent code `Z` by feeding it only quantities that
//! such rotations cannot change. Three variants are supported:
//!
//! * [`EquivMode::So3`]: invariant under any 3D rotation. Directional input
//!   is `Z^T d` (length N), conditioning input is the Gram matrix `Z^T Z`
//!   flattened row-major (length N^2).
//! * [`EquivMode::So2`]: invariant under rotations about the vertical axis
//!   only. The y components pass through untouched while x/z components
//!   enter via planar inner products and norms.
//! * [`EquivMode::None`]: raw pass-through, the no-equivariance baseline.
//!
//! Invariance of the features under a joint rotation makes the field
//! equivariant under latent rotation alone: `f(d, R Z) = f(R^T d, Z)`,
//! because both sides see identical features.

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3xX, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::Direction;

/// Hard cap on the latent vector count; the Gram matrix grows as N^2.
pub const MAX_LATENT_COUNT: usize = 100;

/// Which invariance the input transform enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquivMode {
    /// Full 3D rotation invariance.
    #[serde(rename = "SO3")]
    So3,
    /// Invariance under rotations about the vertical axis only.
    #[serde(rename = "SO2")]
    So2,
    /// No invariance; raw direction and flattened latent.
    #[serde(rename = "NONE")]
    None,
}

impl EquivMode {
    /// Length of the per-direction feature vector for latent count `n`.
    pub fn dir_len(&self, n: usize) -> usize {
        match self {
            EquivMode::So3 => n,
            EquivMode::So2 => n + 2,
            EquivMode::None => 3,
        }
    }

    /// Length of the conditioning feature vector for latent count `n`.
    pub fn cond_len(&self, n: usize) -> usize {
        match self {
            EquivMode::So3 => n * n,
            EquivMode::So2 => n + n * n,
            EquivMode::None => 3 * n,
        }
    }

    /// Total network input width for latent count `n`.
    pub fn input_width(&self, n: usize) -> usize {
        self.dir_len(n) + self.cond_len(n)
    }
}

impl std::str::FromStr for EquivMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SO3" => Ok(EquivMode::So3),
            "SO2" => Ok(EquivMode::So2),
            "NONE" => Ok(EquivMode::None),
            other => Err(Error::InvalidInput(format!(
                "unknown equivariance mode {other:?}, expected SO3, SO2 or NONE"
            ))),
        }
    }
}

impl std::fmt::Display for EquivMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EquivMode::So3 => write!(f, "SO3"),
            EquivMode::So2 => write!(f, "SO2"),
            EquivMode::None => write!(f, "NONE"),
        }
    }
}

/// A 3xN matrix of latent column vectors conditioning the field.
///
/// The flattened form interleaves coordinates per column: flat index `3n + r`
/// holds row `r` of column `n`. This matches the layout of the variational
/// means so a latent can be reshaped from a flat sample without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    z: Matrix3xX<f64>,
}

impl LatentCode {
    pub fn new(z: Matrix3xX<f64>) -> Result<Self> {
        let n = z.ncols();
        if n == 0 {
            return Err(Error::InvalidInput("latent code needs at least one column".into()));
        }
        if n > MAX_LATENT_COUNT {
            return Err(Error::InvalidInput(format!(
                "latent count {n} exceeds the supported maximum {MAX_LATENT_COUNT}"
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("latent code has non-finite entries".into()));
        }
        Ok(LatentCode { z })
    }

    /// Wraps a matrix known to satisfy the invariants.
    pub(crate) fn from_matrix_unchecked(z: Matrix3xX<f64>) -> Self {
        LatentCode { z }
    }

    /// The all-zero code with `n` columns (the mean environment).
    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(Matrix3xX::zeros(n))
    }

    /// Reshapes a flat vector of length `3n` laid out as described above.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 3 != 0 {
            return Err(Error::InvalidInput(format!(
                "flat latent length {} is not a positive multiple of 3",
                flat.len()
            )));
        }
        Self::new(Matrix3xX::from_column_slice(flat))
    }

    /// Flattens column-by-column; the inverse of [`LatentCode::from_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.z.as_slice().to_vec()
    }

    /// Number of latent column vectors.
    pub fn n(&self) -> usize {
        self.z.ncols()
    }

    /// Model dimensionality `D = 3N`.
    pub fn dim(&self) -> usize {
        3 * self.z.ncols()
    }

    pub fn matrix(&self) -> &Matrix3xX<f64> {
        &self.z
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.z.norm()
    }

    fn xz_rows(&self) -> Matrix2xX<f64> {
        let mut m = Matrix2xX::zeros(self.n());
        m.row_mut(0).copy_from(&self.z.row(0));
        m.row_mut(1).copy_from(&self.z.row(2));
        m
    }

    fn y_row(&self) -> RowDVector<f64> {
        self.z.row(1).into_owned()
    }
}

/// Network inputs produced by an invariant transform of one `(d, Z)` pair.
#[derive(Debug, Clone)]
pub struct InvariantFeatures {
    pub dir_feat: DVector<f64>,
    pub cond_feat: DVector<f64>,
    pub mode: EquivMode,
}

impl InvariantFeatures {
    /// Concatenation `(dir_feat, cond_feat)` as a single column.
    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dir_feat.len() + self.cond_feat.len());
        out.rows_mut(0, self.dir_feat.len()).copy_from(&self.dir_feat);
        out.rows_mut(self.dir_feat.len(), self.cond_feat.len())
            .copy_from(&self.cond_feat);
        out
    }
}

/// Dispatches to the transform matching `mode`.
pub fn transform(mode: EquivMode, d: &Direction, z: &LatentCode) -> InvariantFeatures {
    match mode {
        EquivMode::So3 => transform_so3(d, z),
        EquivMode::So2 => transform_so2(d, z),
        EquivMode::None => transform_none(d, z),
    }
}

/// Full-rotation invariant features: `Z^T d` and the Gram matrix `Z^T Z`.
pub fn transform_so3(d: &Direction, z: &LatentCode) -> InvariantFeatures {
    let n = z.n();
    let dir_feat = DVector::from_iterator(n, (z.matrix().transpose() * d.vector()).iter().copied());
    let gram = z.matrix().transpose() * z.matrix();
    let mut cond_feat = DVector::zeros(n * n);
    for a in 0..n {
        for b in 0..n {
            cond_feat[a * n + b] = gram[(a, b)];
        }
    }
    InvariantFeatures {
        dir_feat,
        cond_feat,
        mode: EquivMode::So3,
    }
}

/// Vertical-axis invariant features.
///
/// Directional part: the y component of `d`, the planar products
/// `(S_xz Z)^T (S_xz d)`, and the planar norm of `d`. Conditioning part: the
/// y row of `Z` followed by the planar Gram matrix, flattened row-major.
pub fn transform_so2(d: &Direction, z: &LatentCode) -> InvariantFeatures {
    let n = z.n();
    let zxz = z.xz_rows();
    let dxz = nalgebra::Vector2::new(d.x(), d.z());

    let mut dir_feat = DVector::zeros(n + 2);
    dir_feat[0] = d.y();
    let prods = zxz.transpose() * dxz;
    dir_feat.rows_mut(1, n).copy_from(&prods);
    dir_feat[n + 1] = dxz.norm();

    let mut cond_feat = DVector::zeros(n + n * n);
    for (i, v) in z.y_row().iter().enumerate() {
        cond_feat[i] = *v;
    }
    let gram = zxz.transpose() * &zxz;
    for a in 0..n {
        for b in 0..n {
            cond_feat[n + a * n + b] = gram[(a, b)];
        }
    }
    InvariantFeatures {
        dir_feat,
        cond_feat,
        mode: EquivMode::So2,
    }
}

/// Raw pass-through used by the no-equivariance baseline.
pub fn transform_none(d: &Direction, z: &LatentCode) -> InvariantFeatures {
    InvariantFeatures {
        dir_feat: DVector::from_column_slice(d.vector().as_slice()),
        cond_feat: DVector::from_column_slice(z.matrix().as_slice()),
        mode: EquivMode::None,
    }
}

/// Per-direction features for a whole batch of directions.
///
/// `dir` holds one column per direction; `cond` is shared across the batch
/// because the conditioning features depend on `Z` alone.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub dir: DMatrix<f64>,
    pub cond: DVector<f64>,
    pub mode: EquivMode,
}

impl FeatureBatch {
    /// Builds features for every column of `dirs` at once.
    pub fn new(mode: EquivMode, dirs: &Matrix3xX<f64>, z: &LatentCode) -> Self {
        let n = z.n();
        let p = dirs.ncols();
        let cond = match mode {
            EquivMode::So3 => transform_so3(&Direction::from_unit(nalgebra::Vector3::y()), z).cond_feat,
            EquivMode::So2 => transform_so2(&Direction::from_unit(nalgebra::Vector3::y()), z).cond_feat,
            EquivMode::None => DVector::from_column_slice(z.matrix().as_slice()),
        };
        let dir = match mode {
            EquivMode::So3 => {
                let mut m = DMatrix::zeros(n, p);
                m.gemm(1.0, &z.matrix().transpose(), dirs, 0.0);
                m
            }
            EquivMode::So2 => {
                let zxz = z.xz_rows();
                let mut dxz = Matrix2xX::zeros(p);
                dxz.row_mut(0).copy_from(&dirs.row(0));
                dxz.row_mut(1).copy_from(&dirs.row(2));
                let mut m = DMatrix::zeros(n + 2, p);
                m.row_mut(0).copy_from(&dirs.row(1));
                let prods = zxz.transpose() * &dxz;
                m.rows_mut(1, n).copy_from(&prods);
                for j in 0..p {
                    m[(n + 1, j)] = dxz.column(j).norm();
                }
                m
            }
            EquivMode::None => {
                let mut m = DMatrix::zeros(3, p);
                m.copy_from(dirs);
                m
            }
        };
        FeatureBatch { dir, cond, mode }
    }

    pub fn dir_len(&self) -> usize {
        self.dir.nrows()
    }

    pub fn cond_len(&self) -> usize {
        self.cond.len()
    }

    /// Network input matrix for columns `cols` of the batch: direction
    /// features stacked over the broadcast conditioning features.
    pub fn input_block(&self, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let dd = self.dir_len();
        let dc = self.cond_len();
        let width = cols.len();
        let mut x = DMatrix::zeros(dd + dc, width);
        x.rows_mut(0, dd)
            .copy_from(&self.dir.columns(cols.start, width));
        for j in 0..width {
            x.view_mut((dd, j), (dc, 1)).copy_from(&self.cond);
        }
        x
    }
}

/// Gradient with respect to `Z` contributed by the per-direction features.
///
/// `d_dir` is the upstream gradient on the direction features of exactly the
/// columns in `dirs`. Safe to call per chunk and sum, since the contribution
/// is additive over directions.
pub fn dir_feature_grad_to_latent(
    mode: EquivMode,
    dirs: &Matrix3xX<f64>,
    z: &LatentCode,
    d_dir: &DMatrix<f64>,
) -> Matrix3xX<f64> {
    let n = z.n();
    let mut dz = Matrix3xX::zeros(n);
    match mode {
        EquivMode::So3 => {
            debug_assert_eq!(d_dir.nrows(), n);
            // dir_feat = Z^T d  =>  dZ += d g^T, summed over directions.
            let mut acc = DMatrix::zeros(3, n);
            acc.gemm(1.0, dirs, &d_dir.transpose(), 0.0);
            for c in 0..n {
                for r in 0..3 {
                    dz[(r, c)] += acc[(r, c)];
                }
            }
        }
        EquivMode::So2 => {
            debug_assert_eq!(d_dir.nrows(), n + 2);
            // Only the planar products (rows 1..=n) depend on Z.
            let mut dxz = Matrix2xX::zeros(dirs.ncols());
            dxz.row_mut(0).copy_from(&dirs.row(0));
            dxz.row_mut(1).copy_from(&dirs.row(2));
            let mid = d_dir.rows(1, n);
            let mut acc = DMatrix::zeros(2, n);
            acc.gemm(1.0, &dxz, &mid.transpose(), 0.0);
            for c in 0..n {
                dz[(0, c)] += acc[(0, c)];
                dz[(2, c)] += acc[(1, c)];
            }
        }
        EquivMode::None => {}
    }
    dz
}

/// Gradient with respect to `Z` contributed by the conditioning features.
///
/// `d_cond_sum` must already be summed over the batch, since the conditioning
/// features are broadcast to every direction.
pub fn cond_feature_grad_to_latent(
    mode: EquivMode,
    z: &LatentCode,
    d_cond_sum: &DVector<f64>,
) -> Matrix3xX<f64> {
    let n = z.n();
    let mut dz = Matrix3xX::zeros(n);
    match mode {
        EquivMode::So3 => {
            // cond = vec(Z^T Z) row-major  =>  dZ = Z (G + G^T).
            let mut g = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    g[(a, b)] = d_cond_sum[a * n + b];
                }
            }
            let sym = &g + g.transpose();
            let grad = z.matrix() * sym;
            for c in 0..n {
                for r in 0..3 {
                    dz[(r, c)] += grad[(r, c)];
                }
            }
        }
        EquivMode::So2 => {
            // y row passes through unchanged.
            for c in 0..n {
                dz[(1, c)] += d_cond_sum[c];
            }
            // Planar Gram: dZ_xz = Z_xz (G + G^T).
            let mut g = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    g[(a, b)] = d_cond_sum[n + a * n + b];
                }
            }
            let sym = &g + g.transpose();
            let zxz = z.xz_rows();
            let grad = zxz * sym;
            for c in 0..n {
                dz[(0, c)] += grad[(0, c)];
                dz[(2, c)] += grad[(1, c)];
            }
        }
        EquivMode::None => {
            // cond = vec(Z) in column-major order.
            for c in 0..n {
                for r in 0..3 {
                    dz[(r, c)] += d_cond_sum[3 * c + r];
                }
            }
        }
    }
    dz
}

/// Combined gradient with respect to `Z` from both feature groups.
pub fn feature_grad_to_latent(
    mode: EquivMode,
    dirs: &Matrix3xX<f64>,
    z: &LatentCode,
    d_dir: &DMatrix<f64>,
    d_cond_sum: &DVector<f64>,
) -> Matrix3xX<f64> {
    dir_feature_grad_to_latent(mode, dirs, z, d_dir)
        + cond_feature_grad_to_latent(mode, z, d_cond_sum)
}
