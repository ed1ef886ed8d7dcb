//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON container holding the equivariance mode, the
//! network shape and weights, the frequency scale, the normalization
//! statistics, and every training latent distribution. Weight matrices are
//! stored row-major so the file layout is independent of the in-memory
//! representation.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equivariant::{EquivMode, LatentCode};
use crate::error::{Error, Result};
use crate::hdr::{denormalize_log, EnvironmentMap, NormStats};
use crate::siren::{eval_grid, FieldParams, Layer};
use crate::sphere::DirectionGrid;
use crate::vad::VariationalLatent;

const CHECKPOINT_VERSION: u32 = 1;

/// A trained model: network, normalization and per-image latents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mode: EquivMode,
    pub n_latent: usize,
    pub norm_stats: NormStats,
    pub floor: f64,
    pub params: FieldParams,
    /// Training image ids with their latent distributions.
    pub latents: Vec<(String, VariationalLatent)>,
}

impl Checkpoint {
    /// Model dimensionality `D = 3N`.
    pub fn dim(&self) -> usize {
        3 * self.n_latent
    }

    pub fn latent_by_id(&self, id: &str) -> Option<&VariationalLatent> {
        self.latents.iter().find(|(i, _)| i == id).map(|(_, v)| v)
    }

    /// Field output (normalized log radiance, 3xP) for a latent over a grid.
    pub fn eval_normalized(&self, z: &LatentCode, grid: &DirectionGrid) -> Result<DMatrix<f64>> {
        if z.n() != self.n_latent {
            return Err(Error::InvalidInput(format!(
                "latent has {} columns, model expects {}",
                z.n(),
                self.n_latent
            )));
        }
        eval_grid(&self.params, self.mode, z, grid.directions())
    }

    /// Decodes a latent into a linear HDR environment map.
    pub fn decode(&self, z: &LatentCode, grid: &DirectionGrid) -> Result<EnvironmentMap> {
        let y = self.eval_normalized(z, grid)?;
        let lin = denormalize_log(&y, &self.norm_stats);
        EnvironmentMap::new(grid.clone(), lin)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile::from_checkpoint(self);
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::format(path, format!("serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("bad checkpoint: {e}")))?;
        file.into_checkpoint(path)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major weight entries.
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LatentFile {
    id: String,
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    mode: EquivMode,
    n_latent: usize,
    sine_layers: usize,
    omega0: f64,
    norm_stats: NormStats,
    floor: f64,
    layers: Vec<LayerFile>,
    latents: Vec<LatentFile>,
}

impl CheckpointFile {
    fn from_checkpoint(c: &Checkpoint) -> Self {
        let layers = c
            .params
            .layers()
            .iter()
            .map(|l| {
                let (rows, cols) = l.w.shape();
                let mut w = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for col in 0..cols {
                        w.push(l.w[(r, col)]);
                    }
                }
                LayerFile {
                    rows,
                    cols,
                    w,
                    b: l.b.as_slice().to_vec(),
                }
            })
            .collect();
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            mode: c.mode,
            n_latent: c.n_latent,
            sine_layers: c.params.sine_layers(),
            omega0: c.params.omega0(),
            norm_stats: c.norm_stats,
            floor: c.floor,
            layers,
            latents: c
                .latents
                .iter()
                .map(|(id, v)| LatentFile {
                    id: id.clone(),
                    mu: v.mu.as_slice().to_vec(),
                    log_var: v.log_var.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    fn into_checkpoint(self, path: &Path) -> Result<Checkpoint> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", self.version),
            ));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for lf in &self.layers {
            if lf.w.len() != lf.rows * lf.cols || lf.b.len() != lf.rows {
                return Err(Error::format(path, "layer data length mismatch"));
            }
            let mut w = DMatrix::zeros(lf.rows, lf.cols);
            for r in 0..lf.rows {
                for c in 0..lf.cols {
                    w[(r, c)] = lf.w[r * lf.cols + c];
                }
            }
            layers.push(Layer {
                w,
                b: DVector::from_column_slice(&lf.b),
            });
        }
        let params = FieldParams::from_layers(self.omega0, self.sine_layers, layers)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let expected_width = self.mode.input_width(self.n_latent);
        if params.input_width() != expected_width {
            return Err(Error::format(
                path,
                format!(
                    "network input width {} does not match mode/latent ({expected_width})",
                    params.input_width()
                ),
            ));
        }
        let mut latents = Vec::with_capacity(self.latents.len());
        for lf in self.latents {
            let v = VariationalLatent::new(
                DVector::from_column_slice(&lf.mu),
                DVector::from_column_slice(&lf.log_var),
            )
            .map_err(|e| Error::format(path, e.to_string()))?;
            if v.dim() != 3 * self.n_latent {
                return Err(Error::format(path, "latent dimension mismatch"));
            }
            latents.push((lf.id, v));
        }
        Ok(Checkpoint {
            mode: self.mode,
            n_latent: self.n_latent,
            norm_stats: self.norm_stats,
            floor: self.floor,
            params,
            latents,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::DEFAULT_OMEGA0;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let n = 3;
        let mode = EquivMode::So2;
        let params = FieldParams::init(2, 8, mode.input_width(n), DEFAULT_OMEGA0, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let latents = vec![
            ("a".to_string(), VariationalLatent::init_random(n, &mut rng)),
            ("b".to_string(), VariationalLatent::init_random(n, &mut rng)),
        ];
        Checkpoint {
            mode,
            n_latent: n,
            norm_stats: NormStats::new(-2.0, 5.0).unwrap(),
            floor: 1e-8,
            params,
            latents,
        }
    }

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let ckpt = sample_checkpoint();
        let dir = std::env::temp_dir().join("envfield-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.mode, ckpt.mode);
        assert_eq!(loaded.n_latent, ckpt.n_latent);
        assert_eq!(loaded.latents.len(), 2);
        let grid = DirectionGrid::equirect(4).unwrap();
        let z = loaded.latents[0].1.mean_code();
        let a = ckpt.eval_normalized(&z, &grid).unwrap();
        let b = loaded.eval_normalized(&z, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_latent_size_rejected() {
        let ckpt = sample_checkpoint();
        let grid = DirectionGrid::equirect(2).unwrap();
        let z = LatentCode::zeros(5).unwrap();
        assert!(ckpt.eval_normalized(&z, &grid).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Checkpoint::load("/nonexistent/of/course.json").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
