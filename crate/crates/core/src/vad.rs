//! Variational auto-decoder training.
//!
//! There is no encoder: each training image owns a mean and log-variance
//! over the flattened latent, sampled with the reparameterization trick each
//! epoch and optimized jointly with the network weights. The KL divergence
//! toward the standard normal keeps the latent space smooth enough to sample
//! from and to regularize test-time fits.
//!
//! Training is progressive: low-resolution targets first, doubling height on
//! a schedule, with targets produced by area-averaged downsampling of the
//! stored maps. Each image is one mini-batch (batch size 1), so an epoch is
//! one pass over the images in a fixed order.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::equivariant::{EquivMode, FeatureBatch, LatentCode};
use crate::error::{Error, Result};
use crate::hdr::{compute_stats, normalize_log, EnvironmentMap, DEFAULT_FLOOR};
use crate::optim::{AdamParams, AdamState, LrSchedule};
use crate::siren::{backward_grid, forward_grid, FieldGrads, FieldParams, DEFAULT_OMEGA0};
use crate::sphere::DirectionGrid;

/// Per-image latent distribution: mean and log-variance over the flattened
/// `3N` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLatent {
    pub mu: DVector<f64>,
    pub log_var: DVector<f64>,
}

impl VariationalLatent {
    pub fn new(mu: DVector<f64>, log_var: DVector<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::InvalidInput("mu and log-variance lengths differ".into()));
        }
        if mu.len() == 0 || mu.len() % 3 != 0 {
            return Err(Error::InvalidInput(
                "latent dimension must be a positive multiple of 3".into(),
            ));
        }
        if !mu.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("latent distribution has non-finite entries".into()));
        }
        Ok(VariationalLatent { mu, log_var })
    }

    /// Dimensionality `D = 3N`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Standard deviation `exp(0.5 log_var)`, positive by construction.
    pub fn sigma(&self) -> DVector<f64> {
        self.log_var.map(|v| (0.5 * v).exp())
    }

    /// Random initialization: `mu ~ N(0,1)`, `log_var ~ N(-5,1)` per entry.
    pub fn init_random(n_latent: usize, rng: &mut impl Rng) -> Self {
        let d = 3 * n_latent;
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let log_var = DVector::from_fn(d, |_, _| -5.0 + rng.sample::<f64, _>(StandardNormal));
        VariationalLatent { mu, log_var }
    }

    /// Draws `vec(Z) = mu + sigma .* eps` with `eps ~ N(0, I)` and reshapes
    /// to 3xN (flat index `3n + r` is row `r` of column `n`). Also returns
    /// the noise so gradients can flow back through the sample.
    pub fn sample(&self, rng: &mut impl Rng) -> (LatentCode, DVector<f64>) {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (self.realize(&eps), eps)
    }

    /// Deterministic sample for a given noise vector.
    pub fn realize(&self, eps: &DVector<f64>) -> LatentCode {
        let sigma = self.sigma();
        let flat: Vec<f64> = (0..self.dim())
            .map(|i| self.mu[i] + sigma[i] * eps[i])
            .collect();
        LatentCode::from_flat(&flat).expect("validated dimensions")
    }

    /// The distribution mean as a latent code.
    pub fn mean_code(&self) -> LatentCode {
        LatentCode::from_flat(self.mu.as_slice()).expect("validated dimensions")
    }

    /// KL divergence of this diagonal Gaussian from the standard normal.
    pub fn kld(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            let var = self.log_var[i].exp();
            s += 1.0 + self.log_var[i] - self.mu[i] * self.mu[i] - var;
        }
        -0.5 * s
    }
}

/// Total KL divergence loss over a set of per-image latents:
/// `-1/2 sum_i sum_j (1 + log var_ij - mu_ij^2 - var_ij)`.
pub fn kld_loss(latents: &[VariationalLatent]) -> f64 {
    latents.iter().map(VariationalLatent::kld).sum()
}

/// Sine-weighted mean squared reconstruction loss for one image:
/// `(1/P) sum_j sin(theta_j) ||pred_j - target_j||^2`.
pub fn recon_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>, sin_weights: &DVector<f64>) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.ncols(), sin_weights.len());
    let p = pred.ncols() as f64;
    let mut s = 0.0;
    for j in 0..pred.ncols() {
        let d = pred.column(j) - target.column(j);
        s += sin_weights[j] * d.norm_squared();
    }
    s / p
}

/// Combined training objective: `recon + (beta / D) * kld`.
pub fn train_loss(recon: f64, kld: f64, beta: f64, d: usize) -> f64 {
    recon + beta / d as f64 * kld
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: EquivMode,
    /// Number of 3D latent vectors N; the model dimensionality is D = 3N.
    pub n_latent: usize,
    /// Sine-activated layer count (a linear output layer is always added).
    pub sine_layers: usize,
    pub hidden_width: usize,
    pub omega0: f64,
    /// KLD weight.
    pub beta: f64,
    /// Progressive resolution schedule: (image height, epochs at it).
    pub schedule: Vec<(usize, usize)>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Radiance floor applied before logs.
    pub floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: EquivMode::So2,
            n_latent: 9,
            sine_layers: 5,
            hidden_width: 128,
            omega0: DEFAULT_OMEGA0,
            beta: 1e-4,
            schedule: vec![(16, 800), (32, 800), (64, 400), (128, 400)],
            lr_start: 1e-5,
            lr_end: 1e-7,
            seed: 0,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latent == 0 || self.n_latent > crate::equivariant::MAX_LATENT_COUNT {
            return Err(Error::InvalidInput(format!(
                "latent count {} out of range",
                self.n_latent
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidInput("beta must be non-negative".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::InvalidInput("resolution schedule is empty".into()));
        }
        if self.schedule.iter().any(|(h, e)| *h == 0 || *e == 0) {
            return Err(Error::InvalidInput("schedule entries must be positive".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidInput("hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|(_, e)| e).sum()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub resolution: usize,
    pub recon: f64,
    pub kld: f64,
    pub lr: f64,
}

/// Reconstruction loss and its gradients for one image at one resolution.
///
/// Returns the loss together with gradients for the network parameters and
/// the latent code. Shared by the training loop and the gradient checks.
pub fn image_recon_grads(
    params: &FieldParams,
    mode: EquivMode,
    z: &LatentCode,
    grid: &DirectionGrid,
    target: &DMatrix<f64>,
) -> Result<(f64, FieldGrads, nalgebra::Matrix3xX<f64>)> {
    let feats = FeatureBatch::new(mode, grid.directions(), z);
    let y = forward_grid(params, &feats)?;
    let p = grid.len() as f64;
    let mut d_out = &y - target;
    let mut recon = 0.0;
    for j in 0..grid.len() {
        let sw = grid.sin_weights()[j];
        recon += sw * d_out.column(j).norm_squared();
        d_out.column_mut(j).scale_mut(2.0 * sw / p);
    }
    recon /= p;
    let back = backward_grid(params, &feats, grid.directions(), z, &d_out)?;
    Ok((recon, back.param_grads, back.latent_grad))
}

/// Value of the per-image training objective for a fixed noise draw.
///
/// This is the deterministic function whose gradients the training step
/// computes; finite-difference tests probe it directly.
pub fn image_train_loss_value(
    params: &FieldParams,
    mode: EquivMode,
    latent: &VariationalLatent,
    eps: &DVector<f64>,
    grid: &DirectionGrid,
    target: &DMatrix<f64>,
    beta: f64,
) -> Result<f64> {
    let z = latent.realize(eps);
    let feats = FeatureBatch::new(mode, grid.directions(), &z);
    let y = forward_grid(params, &feats)?;
    let recon = recon_loss(&y, target, grid.sin_weights());
    Ok(train_loss(recon, latent.kld(), beta, latent.dim()))
}

/// Gradients of the per-image training objective for a fixed noise draw.
///
/// Returns `(recon, kld, param grads, d mu, d log_var)`.
pub fn image_train_grads(
    params: &FieldParams,
    mode: EquivMode,
    latent: &VariationalLatent,
    eps: &DVector<f64>,
    grid: &DirectionGrid,
    target: &DMatrix<f64>,
    beta: f64,
) -> Result<(f64, f64, FieldGrads, DVector<f64>, DVector<f64>)> {
    let d = latent.dim();
    let z = latent.realize(eps);
    let (recon, param_grads, latent_grad) = image_recon_grads(params, mode, &z, grid, target)?;
    let kld = latent.kld();

    // vec(Z) = mu + sigma .* eps, sigma = exp(0.5 log_var):
    //   d mu      = d vec(Z)
    //   d log_var = d vec(Z) .* eps .* 0.5 sigma
    // plus the KLD terms  (beta/D) * mu  and  (beta/D) * 0.5 (var - 1).
    let sigma = latent.sigma();
    let dvec = latent_grad.as_slice();
    let w = beta / d as f64;
    let mut d_mu = DVector::zeros(d);
    let mut d_log_var = DVector::zeros(d);
    for i in 0..d {
        d_mu[i] = dvec[i] + w * latent.mu[i];
        d_log_var[i] = dvec[i] * eps[i] * 0.5 * sigma[i] + w * 0.5 * (latent.log_var[i].exp() - 1.0);
    }
    Ok((recon, kld, param_grads, d_mu, d_log_var))
}

/// Trains the field on a set of named environment maps.
///
/// Every map must support each schedule height by integer-factor
/// downsampling. Returns the checkpoint plus the per-epoch loss log.
pub fn train(
    dataset: &[(String, EnvironmentMap)],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let maps: Vec<&EnvironmentMap> = dataset.iter().map(|(_, m)| m).collect();
    let owned: Vec<EnvironmentMap> = maps.iter().map(|m| (*m).clone()).collect();
    let stats = compute_stats(&owned, cfg.floor)?;

    let n = cfg.n_latent;
    let d = 3 * n;
    let input_width = cfg.mode.input_width(n);
    let mut params = FieldParams::init(
        cfg.sine_layers,
        cfg.hidden_width,
        input_width,
        cfg.omega0,
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut latents: Vec<VariationalLatent> = (0..dataset.len())
        .map(|_| VariationalLatent::init_random(n, &mut rng))
        .collect();

    let mut param_state = AdamState::new(params.param_count(), AdamParams::default());
    let mut latent_states: Vec<AdamState> = (0..dataset.len())
        .map(|_| AdamState::new(2 * d, AdamParams::default()))
        .collect();
    let schedule = LrSchedule::new(cfg.lr_start, cfg.lr_end, cfg.total_epochs())?;

    let mut log = Vec::with_capacity(cfg.total_epochs());
    let mut global_epoch = 0usize;
    for &(h, epochs) in &cfg.schedule {
        let grid = DirectionGrid::equirect(h)?;
        let targets: Vec<DMatrix<f64>> = dataset
            .iter()
            .map(|(_, m)| {
                let small = m.downsample_area(h)?;
                Ok(normalize_log(&small, &stats, cfg.floor))
            })
            .collect::<Result<_>>()?;

        for _ in 0..epochs {
            let lr = schedule.at(global_epoch);
            let mut epoch_recon = 0.0;
            let mut epoch_kld = 0.0;
            for (i, (id, _)) in dataset.iter().enumerate() {
                let (_, eps) = latents[i].sample(&mut rng);
                let (recon, kld, pgrads, d_mu, d_lv) = image_train_grads(
                    &params,
                    cfg.mode,
                    &latents[i],
                    &eps,
                    &grid,
                    &targets[i],
                    cfg.beta,
                )?;
                if !recon.is_finite() || !kld.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: global_epoch,
                        image: id.clone(),
                    });
                }
                epoch_recon += recon;
                epoch_kld += kld;

                let mut flat = params.to_flat();
                param_state.step(&mut flat, &pgrads.to_flat(), lr);
                params.set_from_flat(&flat);

                let mut lat_flat: Vec<f64> = latents[i]
                    .mu
                    .iter()
                    .chain(latents[i].log_var.iter())
                    .copied()
                    .collect();
                let lat_grad: Vec<f64> = d_mu.iter().chain(d_lv.iter()).copied().collect();
                latent_states[i].step(&mut lat_flat, &lat_grad, lr);
                latents[i] = VariationalLatent::new(
                    DVector::from_column_slice(&lat_flat[..d]),
                    DVector::from_column_slice(&lat_flat[d..]),
                )?;
            }
            log.push(TrainLogRow {
                epoch: global_epoch,
                resolution: h,
                recon: epoch_recon,
                kld: epoch_kld,
                lr,
            });
            global_epoch += 1;
        }
    }

    let ckpt = Checkpoint {
        mode: cfg.mode,
        n_latent: n,
        norm_stats: stats,
        floor: cfg.floor,
        params,
        latents: dataset
            .iter()
            .map(|(id, _)| id.clone())
            .zip(latents)
            .collect(),
    };
    Ok((ckpt, log))
}
