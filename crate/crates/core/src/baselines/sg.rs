//! Spherical Gaussian lobes and gradient-descent lighting fits.
//!
//! Kernel: `G(d) = amplitude * exp(sharpness (<d, axis> - 1))`, six degrees
//! of freedom per lobe. The fit runs Adam on a sine-weighted MSE with the
//! sharpness log-parameterized, amplitudes through a softplus, and axes
//! renormalized to unit length after every step.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::optim::{AdamParams, AdamState, LrSchedule};
use crate::sphere::{Direction, DirectionGrid};

/// One Gaussian lobe on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SgLobe {
    /// Unit-norm lobe center.
    pub axis: Vector3<f64>,
    /// Positive sharpness; larger is narrower.
    pub sharpness: f64,
    /// Non-negative RGB amplitude.
    pub amplitude: Vector3<f64>,
}

/// A lighting environment as a sum of Gaussian lobes.
#[derive(Debug, Clone, PartialEq)]
pub struct SgLobes {
    pub lobes: Vec<SgLobe>,
}

impl SgLobes {
    /// Dimensionality `6k`.
    pub fn dim(&self) -> usize {
        6 * self.lobes.len()
    }
}

/// Evaluates the lobe mixture at a direction.
pub fn sg_eval(lobes: &SgLobes, d: &Direction) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for lobe in &lobes.lobes {
        let t = d.vector().dot(&lobe.axis);
        let e = (lobe.sharpness * (t - 1.0)).exp();
        out += lobe.amplitude * e;
    }
    out
}

/// Evaluates the mixture at every grid pixel, 3xP.
pub fn sg_eval_grid(lobes: &SgLobes, grid: &DirectionGrid) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3, grid.len());
    for j in 0..grid.len() {
        let v = sg_eval(lobes, &grid.direction(j));
        for c in 0..3 {
            out[(c, j)] = v[c];
        }
    }
    out
}

/// Gradient-fit hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgFitConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for SgFitConfig {
    fn default() -> Self {
        SgFitConfig {
            steps: 2500,
            lr_start: 0.1,
            lr_end: 2e-3,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    // Inverse for y > 0; ln(e^y - 1).
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).max(1e-12).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Evenly distributed unit vectors (spiral lattice) for lobe initialization.
fn fibonacci_sphere(k: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..k)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.sin(), y, r * phi.cos())
        })
        .collect()
}

/// Per-lobe raw parameters: axis (3), log sharpness, pre-softplus amplitude (3).
const LOBE_PARAMS: usize = 7;

fn lobes_from_raw(raw: &[f64], k: usize) -> SgLobes {
    let lobes = (0..k)
        .map(|l| {
            let o = l * LOBE_PARAMS;
            let axis = Vector3::new(raw[o], raw[o + 1], raw[o + 2]).normalize();
            SgLobe {
                axis,
                sharpness: raw[o + 3].exp(),
                amplitude: Vector3::new(
                    softplus(raw[o + 4]),
                    softplus(raw[o + 5]),
                    softplus(raw[o + 6]),
                ),
            }
        })
        .collect();
    SgLobes { lobes }
}

/// Fits `k` lobes to per-pixel target values by Adam on sine-weighted MSE.
///
/// Initialization: axes on a Fibonacci sphere, sharpness 10, amplitudes at
/// the weighted mean color. Deterministic (no randomness in the fit).
pub fn sg_fit(
    grid: &DirectionGrid,
    target: &DMatrix<f64>,
    k: usize,
    cfg: &SgFitConfig,
) -> Result<SgLobes> {
    if k == 0 {
        return Err(Error::InvalidInput("lobe count must be at least 1".into()));
    }
    if target.nrows() != 3 || target.ncols() != grid.len() {
        return Err(Error::InvalidInput("target shape does not match grid".into()));
    }
    if !target.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("target has non-finite values".into()));
    }

    // Weighted mean color for amplitude init.
    let wsum: f64 = grid.sin_weights().sum();
    let mut mean = [0.0f64; 3];
    for j in 0..grid.len() {
        let w = grid.sin_weights()[j];
        for c in 0..3 {
            mean[c] += w * target[(c, j)];
        }
    }
    for m in &mut mean {
        *m = (*m / wsum).max(1e-6);
    }

    let mut raw = Vec::with_capacity(k * LOBE_PARAMS);
    for axis in fibonacci_sphere(k) {
        raw.extend_from_slice(&[axis.x, axis.y, axis.z]);
        raw.push(10f64.ln());
        for m in &mean {
            raw.push(softplus_inv(*m));
        }
    }

    let schedule = LrSchedule::new(cfg.lr_start, cfg.lr_end, cfg.steps.max(1))?;
    let mut adam = AdamState::new(raw.len(), AdamParams::default());
    let p = grid.len() as f64;

    for step in 0..cfg.steps {
        // Decode current lobes.
        let lobes = lobes_from_raw(&raw, k);
        // Forward: residuals and loss.
        let mut grad = vec![0.0f64; raw.len()];
        let mut loss = 0.0;
        for j in 0..grid.len() {
            let dir = grid.direction(j);
            let dv = *dir.vector();
            let w = grid.sin_weights()[j];
            let mut pred = Vector3::zeros();
            let mut per_lobe = Vec::with_capacity(k);
            for lobe in &lobes.lobes {
                let t = dv.dot(&lobe.axis);
                let e = (lobe.sharpness * (t - 1.0)).exp();
                per_lobe.push((t, e));
                pred += lobe.amplitude * e;
            }
            let diff = pred
                - Vector3::new(target[(0, j)], target[(1, j)], target[(2, j)]);
            loss += w * diff.norm_squared();
            let g = diff * (2.0 * w / p);
            for (l, lobe) in lobes.lobes.iter().enumerate() {
                let (t, e) = per_lobe[l];
                let o = l * LOBE_PARAMS;
                let gdotmu = g.dot(&lobe.amplitude);
                // Axis via the unit-projection chain (axes are renormalized
                // each step, so |raw axis| = 1 here).
                let d_axis_raw = (dv - lobe.axis * t) * (gdotmu * e * lobe.sharpness);
                grad[o] += d_axis_raw.x;
                grad[o + 1] += d_axis_raw.y;
                grad[o + 2] += d_axis_raw.z;
                // d loss / d log(sharpness) = gdotmu e (t-1) sharpness
                grad[o + 3] += gdotmu * e * (t - 1.0) * lobe.sharpness;
                // Amplitude through the softplus.
                for c in 0..3 {
                    grad[o + 4 + c] += g[c] * e * sigmoid(raw[o + 4 + c]);
                }
            }
        }
        loss /= p;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: step,
                image: "sg fit target".into(),
            });
        }
        adam.step(&mut raw, &grad, schedule.at(step));
        // Keep axes unit norm.
        for l in 0..k {
            let o = l * LOBE_PARAMS;
            let a = Vector3::new(raw[o], raw[o + 1], raw[o + 2]);
            let n = a.norm().max(1e-12);
            raw[o] = a.x / n;
            raw[o + 1] = a.y / n;
            raw[o + 2] = a.z / n;
        }
    }
    Ok(lobes_from_raw(&raw, k))
}
