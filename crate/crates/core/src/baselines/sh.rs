//! Real spherical harmonics and closed-form least-squares lighting fits.
//!
//! Convention: orthonormal real basis without the Condon-Shortley phase,
//! expressed in this crate's y-up frame (`cos(theta) = d_y`, azimuth
//! `atan2(d_x, d_z)`). Basis index `l(l+1) + m` for `-l <= m <= l`.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::hdr::EnvironmentMap;
use crate::sphere::{Direction, DirectionGrid};

/// RGB spherical-harmonic coefficients up to order `l_max`.
///
/// `coeffs` is `(l_max+1)^2 x 3`, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    pub l_max: usize,
    pub coeffs: DMatrix<f64>,
}

impl ShCoeffs {
    pub fn basis_count(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    /// Total dimensionality `3 (l_max + 1)^2`.
    pub fn dim(&self) -> usize {
        3 * self.basis_count()
    }
}

/// Normalization constant `K(l, m) = sqrt((2l+1)/(4pi) (l-m)!/(l+m)!)`.
fn k_norm(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for i in (l - m + 1)..=(l + m) {
        ratio *= i as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) / ratio).sqrt()
}

/// Evaluates all real SH basis functions up to `l_max` at a direction.
pub fn sh_basis(d: &Direction, l_max: usize) -> DVector<f64> {
    let n = (l_max + 1) * (l_max + 1);
    let mut out = DVector::zeros(n);
    let ct = d.y().clamp(-1.0, 1.0);
    let st = (1.0 - ct * ct).max(0.0).sqrt();
    let phi = d.x().atan2(d.z());

    // Associated Legendre values P_l^m(ct) without the Condon-Shortley
    // phase, built per column m by the standard upward recurrences.
    for m in 0..=l_max {
        // P_m^m = (2m-1)!! st^m
        let mut pmm = 1.0;
        for i in 1..=m {
            pmm *= (2 * i - 1) as f64 * st;
        }
        let (sin_m, cos_m) = (m as f64 * phi).sin_cos();
        let mut p_prev = 0.0; // P_{l-1}^m
        let mut p_curr = pmm; // P_l^m starting at l = m
        for l in m..=l_max {
            let k = k_norm(l, m);
            let base = l * (l + 1);
            if m == 0 {
                out[base] = k * p_curr;
            } else {
                let sq2 = std::f64::consts::SQRT_2;
                out[base + m] = sq2 * k * cos_m * p_curr;
                out[base - m] = sq2 * k * sin_m * p_curr;
            }
            // Advance to P_{l+1}^m.
            let next = if l == m {
                ct * (2 * m + 1) as f64 * p_curr
            } else {
                ((2 * l + 1) as f64 * ct * p_curr - (l + m) as f64 * p_prev) / (l + 1 - m) as f64
            };
            p_prev = p_curr;
            p_curr = next;
        }
    }
    out
}

/// Sine-weighted linear least-squares fit of the basis to per-pixel values.
///
/// `values` is 3xP over the grid pixels. Solves the normal equations with a
/// Cholesky factorization per channel; a singular system (possible only when
/// the grid is too coarse for the order) is an error.
pub fn sh_fit(grid: &DirectionGrid, values: &DMatrix<f64>, l_max: usize) -> Result<ShCoeffs> {
    let n = (l_max + 1) * (l_max + 1);
    let p = grid.len();
    if values.nrows() != 3 || values.ncols() != p {
        return Err(Error::InvalidInput("value shape does not match grid".into()));
    }
    if n > p {
        return Err(Error::Numerical(format!(
            "order {l_max} needs {n} samples but the grid has {p} pixels"
        )));
    }
    let mut ata = DMatrix::zeros(n, n);
    let mut atb = DMatrix::zeros(n, 3);
    for j in 0..p {
        let b = sh_basis(&grid.direction(j), l_max);
        let w = grid.sin_weights()[j];
        // ata += w b b^T (upper triangle, symmetrized after the loop)
        for r in 0..n {
            let wbr = w * b[r];
            for c in r..n {
                ata[(r, c)] += wbr * b[c];
            }
            for ch in 0..3 {
                atb[(r, ch)] += wbr * values[(ch, j)];
            }
        }
    }
    for r in 0..n {
        for c in 0..r {
            ata[(r, c)] = ata[(c, r)];
        }
    }
    let chol = nalgebra::Cholesky::new(ata)
        .ok_or_else(|| Error::Numerical("rank-deficient spherical-harmonic system".into()))?;
    let mut coeffs = DMatrix::zeros(n, 3);
    for ch in 0..3 {
        let rhs = DVector::from_iterator(n, atb.column(ch).iter().copied());
        coeffs.set_column(ch, &chol.solve(&rhs));
    }
    Ok(ShCoeffs { l_max, coeffs })
}

/// Least-squares fit of a linear-radiance environment map.
pub fn sh_fit_map(map: &EnvironmentMap, l_max: usize) -> Result<ShCoeffs> {
    sh_fit(map.grid(), map.rgb(), l_max)
}

/// Evaluates the expansion at one direction.
pub fn sh_eval(coeffs: &ShCoeffs, d: &Direction) -> Vector3<f64> {
    let b = sh_basis(d, coeffs.l_max);
    let mut out = Vector3::zeros();
    for ch in 0..3 {
        out[ch] = b.dot(&DVector::from_iterator(
            b.len(),
            coeffs.coeffs.column(ch).iter().copied(),
        ));
    }
    out
}

/// Evaluates the expansion at every grid pixel, 3xP.
pub fn sh_eval_grid(coeffs: &ShCoeffs, grid: &DirectionGrid) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3, grid.len());
    for j in 0..grid.len() {
        let v = sh_eval(coeffs, &grid.direction(j));
        for ch in 0..3 {
            out[(ch, j)] = v[ch];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_direction(rng: &mut ChaCha8Rng) -> Direction {
        loop {
            let v = nalgebra::Vector3::new(
                rng.gen_range(-1.0f64..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return Direction::from_unit(v / n);
            }
        }
    }

    #[test]
    fn dc_term_is_constant() {
        let want = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = random_direction(&mut rng);
            let b = sh_basis(&d, 0);
            assert_relative_eq!(b[0], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn order_one_terms_are_linear_in_components() {
        // Each l=1 basis function equals sqrt(3/4pi) times one coordinate.
        let c = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = random_direction(&mut rng);
            let b = sh_basis(&d, 1);
            let got: Vec<f64> = (1..4).map(|i| b[i] / c).collect();
            let mut coords = [d.x(), d.y(), d.z()];
            coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut got_sorted = got.clone();
            got_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, c) in got_sorted.iter().zip(coords.iter()) {
                assert_relative_eq!(g, c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_orthonormality() {
        // 1e6 uniform sphere samples; all pairwise integrals up to order 3
        // within 1e-2 of the identity.
        let l_max = 3;
        let n = (l_max + 1) * (l_max + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let samples = 1_000_000;
        let mut acc = DMatrix::<f64>::zeros(n, n);
        for _ in 0..samples {
            // Uniform on the sphere via normal deviates.
            let v = nalgebra::Vector3::new(
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            );
            let d = Direction::from_unit(v.normalize());
            let b = sh_basis(&d, l_max);
            for r in 0..n {
                for c in r..n {
                    acc[(r, c)] += b[r] * b[c];
                }
            }
        }
        let scale = 4.0 * std::f64::consts::PI / samples as f64;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r..n {
                let want = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((acc[(r, c)] * scale - want).abs());
            }
        }
        assert!(worst < 1e-2, "max orthonormality error {worst}");
    }

    #[test]
    fn grid_quadrature_orthonormality_high_order() {
        // Deterministic Riemann-sum cross-check up to order 9.
        let l_max = 9;
        let n = (l_max + 1) * (l_max + 1);
        let grid = DirectionGrid::equirect(64).unwrap();
        let mut acc = DMatrix::<f64>::zeros(n, n);
        for j in 0..grid.len() {
            let b = sh_basis(&grid.direction(j), l_max);
            let w = grid.sin_weights()[j] * grid.pixel_footprint();
            for r in 0..n {
                for c in r..n {
                    acc[(r, c)] += w * b[r] * b[c];
                }
            }
        }
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r..n {
                let want = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((acc[(r, c)] - want).abs());
            }
        }
        assert!(worst < 1e-3, "max quadrature error {worst}");
    }

    #[test]
    fn fit_recovers_band_limited_signal() {
        let l_max = 2;
        let n = (l_max + 1) * (l_max + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let coeffs = ShCoeffs { l_max, coeffs: truth.clone() };
        let grid = DirectionGrid::equirect(16).unwrap();
        let values = sh_eval_grid(&coeffs, &grid);
        let fit = sh_fit(&grid, &values, l_max).unwrap();
        for (a, b) in fit.coeffs.iter().zip(truth.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-6);
        }
        let recon = sh_eval_grid(&fit, &grid);
        let rmse = ((&recon - &values).map(|v| v * v).sum() / values.len() as f64).sqrt();
        assert!(rmse < 1e-6, "reconstruction rmse {rmse}");
    }

    #[test]
    fn constant_map_projects_onto_dc_only() {
        let grid = DirectionGrid::equirect(8).unwrap();
        let v = 2.5;
        let values = DMatrix::from_element(3, grid.len(), v);
        let fit = sh_fit(&grid, &values, 2).unwrap();
        // DC coefficient v * 2 sqrt(pi); everything else ~0.
        let want = v * 2.0 * std::f64::consts::PI.sqrt();
        for ch in 0..3 {
            assert_relative_eq!(fit.coeffs[(0, ch)], want, max_relative = 1e-9);
            for r in 1..fit.basis_count() {
                assert!(fit.coeffs[(r, ch)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn order_zero_fit_of_noise_is_weighted_mean() {
        let grid = DirectionGrid::equirect(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = DMatrix::from_fn(3, grid.len(), |_, _| rng.gen_range(0.0..1.0));
        let fit = sh_fit(&grid, &values, 0).unwrap();
        let y00 = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        for ch in 0..3 {
            let num: f64 = (0..grid.len())
                .map(|j| grid.sin_weights()[j] * values[(ch, j)])
                .sum();
            let den: f64 = grid.sin_weights().sum();
            let mean = num / den;
            // c0 * Y00 is the weighted mean.
            assert_relative_eq!(fit.coeffs[(0, ch)] * y00, mean, max_relative = 1e-9);
        }
    }

    #[test]
    fn residual_non_increasing_in_order() {
        let grid = DirectionGrid::equirect(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A map with mixed-frequency content.
        let values = DMatrix::from_fn(3, grid.len(), |_, j| {
            let d = grid.direction(j);
            (3.0 * d.x()).sin() + (5.0 * d.y()).cos() + 0.1 * rng.gen_range(-1.0..1.0) + 2.0
        });
        let mut prev = f64::INFINITY;
        for l in 0..5 {
            let fit = sh_fit(&grid, &values, l).unwrap();
            let recon = sh_eval_grid(&fit, &grid);
            let res: f64 = (0..grid.len())
                .map(|j| grid.sin_weights()[j] * (recon.column(j) - values.column(j)).norm_squared())
                .sum();
            assert!(res <= prev + 1e-9, "order {l}: {res} > {prev}");
            prev = res;
        }
    }

    #[test]
    fn too_coarse_grid_rejected() {
        let grid = DirectionGrid::equirect(1).unwrap(); // 2 pixels
        let values = DMatrix::zeros(3, grid.len());
        assert!(sh_fit(&grid, &values, 2).is_err());
    }
}
