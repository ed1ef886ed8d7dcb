//! A conditional spherical neural field for HDR environment lighting.
//!
//! The library models an environment map as a continuous function on the
//! sphere, conditioned on a matrix of 3D latent vectors. The network inputs
//! are built from rotation-invariant combinations of the query direction and
//! the latent code, so rotating the latent code about the vertical axis
//! rotates the represented lighting without retraining or augmentation.
//!
//! Main pieces:
//!
//! * [`sphere`]: unit directions, equirectangular grids, y-axis rotations.
//! * [`hdr`]: HDR map storage, PFM/RGBE input and output, log normalization.
//! * [`equivariant`]: invariant input transforms (full SO(3), vertical-axis
//!   SO(2), or none) and their gradients with respect to the latent code.
//! * [`siren`]: the sine-activated conditional MLP with exact reverse-mode
//!   gradients for parameters, latents and inputs.
//! * [`optim`]: Adam and the exponential learning-rate schedule.
//! * [`vad`]: variational auto-decoder training (reparameterized latents,
//!   KL regularization, progressive multi-resolution schedule).
//! * [`fitting`]: test-time latent optimization against full, masked or
//!   rotated observations, PSNR, and closed-form rotation alignment.
//! * [`baselines`]: spherical-harmonic and spherical-Gaussian lighting
//!   representations of matched dimensionality.
//! * [`render`]: differentiable normalized Blinn-Phong environment shading of
//!   an analytic sphere and lighting recovery from renders.
//! * [`dataset`]: procedural HDR sky generation and dataset ingestion.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod equivariant;
mod error;
pub mod fitting;
pub mod hdr;
pub mod optim;
pub mod render;
pub mod siren;
pub mod sphere;
pub mod vad;

pub use checkpoint::Checkpoint;
pub use equivariant::{EquivMode, InvariantFeatures, LatentCode};
pub use error::{Error, Result};
pub use hdr::{EnvironmentMap, NormStats};
pub use siren::FieldParams;
pub use sphere::{Direction, DirectionGrid, YRotation};
pub use vad::{TrainConfig, VariationalLatent};
