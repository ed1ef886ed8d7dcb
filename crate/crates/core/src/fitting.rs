//! Test-time latent optimization and evaluation metrics.
//!
//! The network stays frozen; only a point-estimate latent code is optimized
//! against full, masked or rotated observations, starting from zero (the
//! mean environment). The objective adds a sine-weighted cosine similarity
//! term and a squared-Frobenius prior to the reconstruction loss. Fitting
//! follows the same progressive resolution schedule as training.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::equivariant::{FeatureBatch, LatentCode};
use crate::error::{Error, Result};
use crate::hdr::{denormalize_log, normalize_log, read_pfm_raw, EnvironmentMap};
use crate::optim::{AdamParams, AdamState, LrSchedule};
use crate::siren::{backward_grid, forward_grid};
use crate::sphere::{DirectionGrid, YRotation};

const COSINE_EPS: f64 = 1e-8;

/// Per-pixel observation mask over a direction grid.
#[derive(Debug, Clone)]
pub struct PixelMask {
    bits: Vec<bool>,
    observed: usize,
}

impl PixelMask {
    /// At least one pixel must be observed.
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        let observed = bits.iter().filter(|b| **b).count();
        if observed == 0 {
            return Err(Error::InvalidInput("mask observes no pixels".into()));
        }
        Ok(PixelMask { bits, observed })
    }

    pub fn full(len: usize) -> Self {
        PixelMask {
            bits: vec![true; len],
            observed: len,
        }
    }

    /// Values above 0.5 are observed.
    pub fn from_values(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|v| *v > 0.5).collect())
    }

    /// Reads a grayscale or color PFM; the first channel thresholds at 0.5.
    pub fn from_pfm(path: impl AsRef<std::path::Path>) -> Result<(usize, Self)> {
        let img = read_pfm_raw(&path)?;
        let ch = img.channels;
        let vals: Vec<f32> = img.data.iter().step_by(ch).copied().collect();
        Ok((img.height, Self::from_values(&vals)?))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.observed
    }

    pub fn is_observed(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    /// Fraction-based downsampling: a coarse pixel is observed when more
    /// than half of its block's solid angle is observed.
    pub fn downsample(&self, fine: &DirectionGrid, coarse_h: usize) -> Result<PixelMask> {
        if self.bits.len() != fine.len() {
            return Err(Error::InvalidInput("mask length does not match grid".into()));
        }
        let h = fine.height();
        if coarse_h == 0 || h % coarse_h != 0 {
            return Err(Error::InvalidInput(format!(
                "cannot downsample mask from height {h} to {coarse_h}"
            )));
        }
        let factor = h / coarse_h;
        if factor == 1 {
            return Ok(self.clone());
        }
        let w = fine.width();
        let cw = 2 * coarse_h;
        let mut bits = vec![false; coarse_h * cw];
        for oi in 0..coarse_h {
            for oj in 0..cw {
                let mut seen = 0.0;
                let mut total = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        let idx = (oi * factor + di) * w + (oj * factor + dj);
                        let sw = fine.sin_weights()[idx];
                        total += sw;
                        if self.bits[idx] {
                            seen += sw;
                        }
                    }
                }
                bits[oi * cw + oj] = seen > 0.5 * total;
            }
        }
        PixelMask::new(bits).map_err(|_| {
            Error::InvalidInput(format!("mask vanishes when downsampled to height {coarse_h}"))
        })
    }
}

/// Test-time objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Cosine similarity weight.
    pub rho: f64,
    /// Latent prior weight.
    pub gamma: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Progressive resolution schedule: (image height, epochs at it).
    pub schedule: Vec<(usize, usize)>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rho: 1e-4,
            gamma: 1e-7,
            lr_start: 1e-2,
            lr_end: 1e-4,
            schedule: vec![(16, 800), (32, 800), (64, 400), (128, 400)],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|(h, e)| *h == 0 || *e == 0) {
            return Err(Error::InvalidInput("fit schedule entries must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|(_, e)| e).sum()
    }

    /// Convenience: a single-resolution schedule.
    pub fn at_resolution(mut self, h: usize, epochs: usize) -> Self {
        self.schedule = vec![(h, epochs)];
        self
    }
}

/// One row of the fit loss trace.
#[derive(Debug, Clone, Serialize)]
pub struct FitTraceRow {
    pub epoch: usize,
    pub resolution: usize,
    pub recon: f64,
    pub cosine: f64,
    pub prior: f64,
    pub total: f64,
}

/// Result of a latent fit.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub latent: LatentCode,
    /// PSNR over observed pixels at the final resolution (normalized domain).
    pub masked_psnr: f64,
    /// PSNR over unobserved pixels, when any exist.
    pub unmasked_psnr: Option<f64>,
    pub trace: Vec<FitTraceRow>,
    /// Final-resolution reconstruction in linear HDR.
    pub reconstruction: EnvironmentMap,
}

/// Sine-weighted cosine dissimilarity over observed pixels:
/// `(1/|m|) sum_j sin(theta_j) (1 - <p_j, t_j> / (|p_j||t_j| + eps))`.
pub fn cosine_loss(
    pred: &DMatrix<f64>,
    target: &DMatrix<f64>,
    sin_weights: &DVector<f64>,
    mask: &PixelMask,
) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.ncols(), mask.len());
    let m = mask.observed_count() as f64;
    let mut s = 0.0;
    for j in 0..pred.ncols() {
        if !mask.is_observed(j) {
            continue;
        }
        let p = pred.column(j);
        let t = target.column(j);
        let den = p.norm() * t.norm() + COSINE_EPS;
        s += sin_weights[j] * (1.0 - p.dot(&t) / den);
    }
    s / m
}

/// Squared Frobenius norm of the latent code.
pub fn prior_loss(z: &LatentCode) -> f64 {
    let n = z.frobenius_norm();
    n * n
}

/// Peak signal-to-noise ratio in dB with explicit peak.
///
/// The MSE is unweighted over all entries. Identical inputs return
/// `f64::INFINITY` as the sentinel.
pub fn psnr(pred: &DMatrix<f64>, target: &DMatrix<f64>, peak: f64) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    let mse = (pred - target).map(|v| v * v).sum() / pred.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// PSNR restricted to mask-selected columns (`observed = true` side when
/// `observed_side` is set, the complement otherwise).
pub fn psnr_masked(
    pred: &DMatrix<f64>,
    target: &DMatrix<f64>,
    mask: &PixelMask,
    observed_side: bool,
    peak: f64,
) -> Option<f64> {
    assert_eq!(pred.ncols(), mask.len());
    let mut se = 0.0;
    let mut count = 0usize;
    for j in 0..pred.ncols() {
        if mask.is_observed(j) == observed_side {
            let d = pred.column(j) - target.column(j);
            se += d.norm_squared();
            count += pred.nrows();
        }
    }
    if count == 0 {
        return None;
    }
    let mse = se / count as f64;
    Some(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Losses and the output gradient for one fit step at one resolution.
fn masked_losses_and_grad(
    y: &DMatrix<f64>,
    target: &DMatrix<f64>,
    grid: &DirectionGrid,
    mask: &PixelMask,
    rho: f64,
) -> (f64, f64, DMatrix<f64>) {
    let m = mask.observed_count() as f64;
    let mut recon = 0.0;
    let mut cosine = 0.0;
    let mut d_out = DMatrix::zeros(y.nrows(), y.ncols());
    for j in 0..y.ncols() {
        if !mask.is_observed(j) {
            continue;
        }
        let sw = grid.sin_weights()[j];
        let p = y.column(j);
        let t = target.column(j);
        let diff = &p - &t;
        recon += sw * diff.norm_squared();
        let mut g = diff * (2.0 * sw / m);

        let na = p.norm();
        let nb = t.norm();
        let den = na * nb + COSINE_EPS;
        let dot = p.dot(&t);
        cosine += sw * (1.0 - dot / den);
        if rho != 0.0 && na > 1e-300 {
            // d/dp (1 - dot/den) = -t/den + dot nb p / (na den^2)
            let coeff = rho * sw / m;
            let term = p * (dot * nb / (na * den * den)) - t / den;
            g += term * coeff;
        }
        d_out.column_mut(j).copy_from(&g);
    }
    (recon / m, cosine / m, d_out)
}

/// Optimizes a latent code against an observed environment map.
///
/// `Eq` objective: sine-weighted reconstruction + `rho` x cosine + `gamma` x
/// prior, restricted to observed pixels, with the latent initialized at
/// `init` (zeros by default, the mean environment). The observation must be
/// at a height every schedule entry divides.
pub fn fit(
    ckpt: &Checkpoint,
    target: &EnvironmentMap,
    mask: Option<&PixelMask>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    fit_with_init(ckpt, target, mask, cfg, None)
}

/// [`fit`] with an explicit starting latent.
pub fn fit_with_init(
    ckpt: &Checkpoint,
    target: &EnvironmentMap,
    mask: Option<&PixelMask>,
    cfg: &FitConfig,
    init: Option<&LatentCode>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let native_h = target.height();
    if let Some(m) = mask {
        if m.len() != target.len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} pixels, target has {}",
                m.len(),
                target.len()
            )));
        }
    }
    for (h, _) in &cfg.schedule {
        if *h > native_h || native_h % *h != 0 {
            return Err(Error::InvalidInput(format!(
                "schedule height {h} incompatible with target height {native_h}"
            )));
        }
    }

    let n = ckpt.n_latent;
    let mut z = match init {
        Some(z0) => {
            if z0.n() != n {
                return Err(Error::InvalidInput("init latent has wrong column count".into()));
            }
            z0.clone()
        }
        None => LatentCode::zeros(n)?,
    };

    let schedule = LrSchedule::new(cfg.lr_start, cfg.lr_end, cfg.total_epochs())?;
    let mut adam = AdamState::new(3 * n, AdamParams::default());
    let mut trace = Vec::with_capacity(cfg.total_epochs());
    let mut global_epoch = 0usize;

    let native_grid = target.grid();
    let full_mask_native;
    let mask_native = match mask {
        Some(m) => m,
        None => {
            full_mask_native = PixelMask::full(target.len());
            &full_mask_native
        }
    };

    let mut final_grid = None;
    let mut final_target = None;
    let mut final_mask = None;
    for &(h, epochs) in &cfg.schedule {
        let grid = DirectionGrid::equirect(h)?;
        let t_norm = normalize_log(&target.downsample_area(h)?, &ckpt.norm_stats, ckpt.floor);
        let m_h = mask_native.downsample(native_grid, h)?;

        for _ in 0..epochs {
            let lr = schedule.at(global_epoch);
            let feats = FeatureBatch::new(ckpt.mode, grid.directions(), &z);
            let y = forward_grid(&ckpt.params, &feats)?;
            let (recon, cosine, d_out) = masked_losses_and_grad(&y, &t_norm, &grid, &m_h, cfg.rho);
            let prior = prior_loss(&z);
            let total = recon + cfg.rho * cosine + cfg.gamma * prior;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: global_epoch,
                    image: "fit target".into(),
                });
            }
            let back = backward_grid(&ckpt.params, &feats, grid.directions(), &z, &d_out)?;
            let mut flat = z.to_flat();
            let mut grad = back.latent_grad.as_slice().to_vec();
            let zflat = z.matrix().as_slice();
            for i in 0..grad.len() {
                grad[i] += cfg.gamma * 2.0 * zflat[i];
            }
            adam.step(&mut flat, &grad, lr);
            z = LatentCode::from_flat(&flat)?;
            trace.push(FitTraceRow {
                epoch: global_epoch,
                resolution: h,
                recon,
                cosine,
                prior,
                total,
            });
            global_epoch += 1;
        }
        final_grid = Some(grid);
        final_target = Some(t_norm);
        final_mask = Some(m_h);
    }

    let grid = final_grid.expect("schedule is non-empty");
    let t_norm = final_target.expect("schedule is non-empty");
    let m_h = final_mask.expect("schedule is non-empty");
    let y = ckpt.eval_normalized(&z, &grid)?;
    let masked_psnr =
        psnr_masked(&y, &t_norm, &m_h, true, 2.0).expect("mask observes at least one pixel");
    let unmasked_psnr = psnr_masked(&y, &t_norm, &m_h, false, 2.0);
    let reconstruction = EnvironmentMap::new(grid, denormalize_log(&y, &ckpt.norm_stats))?;

    Ok(FitOutcome {
        latent: z,
        masked_psnr,
        unmasked_psnr,
        trace,
        reconstruction,
    })
}

/// Closed-form best y-rotation aligning `z1` onto `z2`.
///
/// Minimizes `|R_y(psi) Z1 - Z2|_F` over the one-parameter family of
/// vertical-axis rotations: with planar components (x, z) per column,
/// `psi* = atan2(sum(x1 z2 - z1 x2), sum(x1 x2 + z1 z2))`. Returns the angle
/// together with the relative error `E = |R Z1 - Z2|_F / |Z2|_F`.
pub fn align_rotation(z1: &LatentCode, z2: &LatentCode) -> Result<(f64, f64)> {
    if z1.n() != z2.n() {
        return Err(Error::InvalidInput("latent sizes differ".into()));
    }
    let norm2 = z2.frobenius_norm();
    if norm2 == 0.0 {
        return Err(Error::InvalidInput(
            "relative error undefined for a zero reference latent".into(),
        ));
    }
    let m1 = z1.matrix();
    let m2 = z2.matrix();
    let mut a = 0.0;
    let mut b = 0.0;
    for c in 0..z1.n() {
        let p1 = Vector2::new(m1[(0, c)], m1[(2, c)]);
        let p2 = Vector2::new(m2[(0, c)], m2[(2, c)]);
        a += p1.x * p2.x + p1.y * p2.y;
        b += p1.x * p2.y - p1.y * p2.x;
    }
    let psi = b.atan2(a);
    let rotated = YRotation::new(psi).rotate_latent(z1);
    let e = (rotated.matrix() - m2).norm() / norm2;
    Ok((psi, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(rng: &mut ChaCha8Rng, n: usize) -> LatentCode {
        let flat: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        LatentCode::from_flat(&flat).unwrap()
    }

    #[test]
    fn cosine_loss_on_matching_vectors_is_zero() {
        let grid = DirectionGrid::equirect(2).unwrap();
        let t = DMatrix::from_element(3, grid.len(), 0.7);
        let mask = PixelMask::full(grid.len());
        let c = cosine_loss(&t, &t, grid.sin_weights(), &mask);
        assert!(c.abs() < 1e-9);
    }

    #[test]
    fn cosine_loss_on_opposed_and_orthogonal_vectors() {
        let grid = DirectionGrid::equirect(1).unwrap();
        let mask = PixelMask::full(grid.len());
        let t = DMatrix::from_element(3, grid.len(), 1.0);
        // Opposed: per-pixel term 2 sin(theta).
        let anti = -t.clone();
        let c = cosine_loss(&anti, &t, grid.sin_weights(), &mask);
        let want = grid.sin_weights().iter().map(|s| 2.0 * s).sum::<f64>() / grid.len() as f64;
        assert_relative_eq!(c, want, epsilon = 1e-6);
        // Orthogonal colors: per-pixel term sin(theta).
        let mut ortho = DMatrix::zeros(3, grid.len());
        for j in 0..grid.len() {
            ortho[(0, j)] = 1.0;
        }
        let mut tz = DMatrix::zeros(3, grid.len());
        for j in 0..grid.len() {
            tz[(1, j)] = 1.0;
        }
        let c = cosine_loss(&ortho, &tz, grid.sin_weights(), &mask);
        let want = grid.sin_weights().iter().sum::<f64>() / grid.len() as f64;
        assert_relative_eq!(c, want, epsilon = 1e-6);
    }

    #[test]
    fn prior_loss_scales_quadratically() {
        let z = LatentCode::from_flat(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(prior_loss(&z), 1.0);
        let z0 = LatentCode::zeros(4).unwrap();
        assert_eq!(prior_loss(&z0), 0.0);
        let z2 = LatentCode::from_flat(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(prior_loss(&z2), 4.0);
    }

    #[test]
    fn prior_loss_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_latent(&mut rng, 5);
        let rz = YRotation::new(2.13).rotate_latent(&z);
        assert_relative_eq!(prior_loss(&z), prior_loss(&rz), epsilon = 1e-12);
    }

    #[test]
    fn psnr_values() {
        let a = DMatrix::from_element(3, 4, 0.5);
        assert_eq!(psnr(&a, &a, 2.0), f64::INFINITY);
        // MSE = peak^2 gives 0 dB.
        let b = DMatrix::from_element(3, 4, 2.5);
        assert_relative_eq!(psnr(&a, &b, 2.0), 0.0, epsilon = 1e-12);
        // Uniform half-peak error: 10 log10(4) = 6.0206 dB.
        let c = DMatrix::from_element(3, 4, 1.5);
        assert_relative_eq!(psnr(&a, &c, 2.0), 10.0 * 4.0f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(PixelMask::new(vec![false; 8]).is_err());
        assert!(PixelMask::from_values(&[0.0; 8]).is_err());
    }

    #[test]
    fn mask_downsample_majority_rule() {
        let fine = DirectionGrid::equirect(4).unwrap();
        // Observe the top half only.
        let bits: Vec<bool> = (0..fine.len()).map(|idx| idx / fine.width() < 2).collect();
        let mask = PixelMask::new(bits).unwrap();
        let coarse = mask.downsample(&fine, 2).unwrap();
        assert_eq!(coarse.len(), 8);
        for j in 0..4 {
            assert!(coarse.is_observed(j));
            assert!(!coarse.is_observed(4 + j));
        }
    }

    #[test]
    fn align_recovers_exact_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z1 = random_latent(&mut rng, 6);
        let z2 = YRotation::new(1.3).rotate_latent(&z1);
        let (psi, e) = align_rotation(&z1, &z2).unwrap();
        assert_relative_eq!(psi, 1.3, epsilon = 1e-12);
        assert!(e < 1e-9, "E = {e}");
    }

    #[test]
    fn align_identity_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_latent(&mut rng, 4);
        let (psi, e) = align_rotation(&z, &z).unwrap();
        assert_eq!(psi, 0.0);
        assert!(e < 1e-12);
    }

    #[test]
    fn align_rejects_zero_reference() {
        let z = LatentCode::from_flat(&[1.0, 2.0, 3.0]).unwrap();
        let zero = LatentCode::zeros(1).unwrap();
        assert!(align_rotation(&z, &zero).is_err());
    }

    #[test]
    fn align_matches_coarse_scan_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let z1 = random_latent(&mut rng, 5);
            let z2 = random_latent(&mut rng, 5);
            let (_, e) = align_rotation(&z1, &z2).unwrap();
            // Dense scan can only do worse or equal.
            let norm2 = z2.frobenius_norm();
            let mut best = f64::INFINITY;
            for k in 0..10_000 {
                let psi = k as f64 / 10_000.0 * std::f64::consts::TAU;
                let r = YRotation::new(psi).rotate_latent(&z1);
                let err = (r.matrix() - z2.matrix()).norm() / norm2;
                best = best.min(err);
            }
            assert!(e <= best + 1e-9, "closed form {e} vs scan {best}");
        }
    }

    #[test]
    fn align_rotation_of_any_latent_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let z = random_latent(&mut rng, 7);
            let psi = rng.gen_range(-3.0..3.0);
            let rz = YRotation::new(psi).rotate_latent(&z);
            let (_, e) = align_rotation(&z, &rz).unwrap();
            assert!(e < 1e-9);
        }
    }
}
