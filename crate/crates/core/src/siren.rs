//! The sine-activated conditional MLP and its exact reverse-mode gradients.
//!
//! The network is a fixed chain: `sine_layers` hidden layers computing
//! `a = sin(omega0 (W a + b))` followed by a linear output layer, so the
//! backward pass is hand-derived layer by layer instead of using a general
//! autodiff tape. Everything runs in double precision; that keeps the
//! finite-difference gradient checks tight.
//!
//! Batched evaluation over a direction grid is split into fixed-size column
//! chunks processed in parallel. Chunk boundaries do not depend on the thread
//! count and partial results are combined in chunk order, so results are
//! deterministic for a given build.

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::equivariant::{
    cond_feature_grad_to_latent, dir_feature_grad_to_latent, EquivMode, FeatureBatch,
    InvariantFeatures, LatentCode,
};
use crate::error::{Error, Result};

/// Default SIREN frequency scale.
pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Columns per parallel work unit; fixed so reductions are deterministic.
const CHUNK: usize = 1024;

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros_like(other: &Layer) -> Layer {
        Layer {
            w: DMatrix::zeros(other.w.nrows(), other.w.ncols()),
            b: DVector::zeros(other.b.len()),
        }
    }
}

/// Weights and biases of the conditional field network.
///
/// `layers[0..sine_layers]` are sine-activated; the final layer is linear
/// with 3 outputs (normalized log radiance).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    omega0: f64,
    sine_layers: usize,
    layers: Vec<Layer>,
}

impl FieldParams {
    /// Standard SIREN initialization, deterministic in `seed`.
    ///
    /// First layer weights are drawn from `U(-1/fan_in, 1/fan_in)`, deeper
    /// weights from `U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)`, and
    /// biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(
        sine_layers: usize,
        hidden_width: usize,
        input_width: usize,
        omega0: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_width == 0 || hidden_width == 0 {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if !(omega0.is_finite() && omega0 > 0.0) {
            return Err(Error::InvalidInput("omega0 must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sine_layers + 1);
        let mut fan_in = input_width;
        for l in 0..=sine_layers {
            let fan_out = if l == sine_layers { 3 } else { hidden_width };
            let w_bound = if l == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega0
            };
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let w_data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.gen_range(-w_bound..w_bound))
                .collect();
            let b_data: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-b_bound..b_bound)).collect();
            layers.push(Layer {
                w: DMatrix::from_column_slice(fan_out, fan_in, &w_data),
                b: DVector::from_column_slice(&b_data),
            });
            fan_in = fan_out;
        }
        Ok(FieldParams {
            omega0,
            sine_layers,
            layers,
        })
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn sine_layers(&self) -> usize {
        self.sine_layers
    }

    pub fn hidden_width(&self) -> usize {
        if self.sine_layers == 0 {
            0
        } else {
            self.layers[0].w.nrows()
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Rebuilds parameters from explicit layer data (checkpoint loading).
    pub fn from_layers(omega0: f64, sine_layers: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != sine_layers + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} layers, got {}",
                sine_layers + 1,
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(Error::InvalidInput("layer shapes do not chain".into()));
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(Error::InvalidInput("bias length does not match weight rows".into()));
            }
            if !l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()) {
                return Err(Error::InvalidInput("non-finite parameter".into()));
            }
        }
        Ok(FieldParams {
            omega0,
            sine_layers,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flattens all parameters: per layer, column-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    /// Inverse of [`FieldParams::to_flat`].
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut o = 0;
        for l in &mut self.layers {
            let wn = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[o..o + wn]);
            o += wn;
            let bn = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[o..o + bn]);
            o += bn;
        }
    }

    /// Evaluates the field for one feature vector.
    pub fn forward(&self, feats: &InvariantFeatures) -> Result<Vector3<f64>> {
        let x = feats.stacked();
        if x.len() != self.input_width() {
            return Err(Error::InvalidInput(format!(
                "feature length {} does not match network input width {}",
                x.len(),
                self.input_width()
            )));
        }
        let mut a = x;
        for l in 0..self.sine_layers {
            let layer = &self.layers[l];
            let z = &layer.w * &a + &layer.b;
            a = z.map(|v| (self.omega0 * v).sin());
        }
        let out = self.layers.last().unwrap();
        let y = &out.w * &a + &out.b;
        Ok(Vector3::new(y[0], y[1], y[2]))
    }

    /// Straight (single-threaded) forward pass over input columns.
    pub fn forward_columns(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_width() {
            return Err(Error::InvalidInput(format!(
                "input rows {} do not match network input width {}",
                x.nrows(),
                self.input_width()
            )));
        }
        let (_, _, y) = self.forward_cached(x);
        Ok(y)
    }

    /// Forward pass keeping per-layer pre-activations and activations.
    fn forward_cached(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>) {
        let cols = x.ncols();
        let mut zs = Vec::with_capacity(self.sine_layers);
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(self.sine_layers + 1);
        acts.push(x.clone());
        for l in 0..self.sine_layers {
            let layer = &self.layers[l];
            let mut z = DMatrix::zeros(layer.w.nrows(), cols);
            z.gemm(1.0, &layer.w, &acts[l], 0.0);
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            let a = z.map(|v| (self.omega0 * v).sin());
            zs.push(z);
            acts.push(a);
        }
        let out = self.layers.last().unwrap();
        let mut y = DMatrix::zeros(out.w.nrows(), cols);
        y.gemm(1.0, &out.w, acts.last().unwrap(), 0.0);
        for mut col in y.column_iter_mut() {
            col += &out.b;
        }
        (zs, acts, y)
    }

    /// Backward pass for one chunk given the upstream output gradient.
    ///
    /// Returns parameter gradients and the gradient with respect to the
    /// network inputs.
    fn backward_cached(
        &self,
        zs: &[DMatrix<f64>],
        acts: &[DMatrix<f64>],
        d_out: &DMatrix<f64>,
    ) -> (FieldGrads, DMatrix<f64>) {
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let out_idx = self.layers.len() - 1;

        let mut dw = DMatrix::zeros(self.layers[out_idx].w.nrows(), self.layers[out_idx].w.ncols());
        dw.gemm(1.0, d_out, &acts[out_idx].transpose(), 0.0);
        grads[out_idx].w = dw;
        grads[out_idx].b = d_out.column_sum();
        let mut g = DMatrix::zeros(self.layers[out_idx].w.ncols(), d_out.ncols());
        g.gemm(1.0, &self.layers[out_idx].w.transpose(), d_out, 0.0);

        for l in (0..self.sine_layers).rev() {
            // a = sin(omega0 z)  =>  dz = g .* omega0 cos(omega0 z)
            let mut dz = zs[l].map(|v| self.omega0 * (self.omega0 * v).cos());
            dz.component_mul_assign(&g);
            let mut dw = DMatrix::zeros(self.layers[l].w.nrows(), self.layers[l].w.ncols());
            dw.gemm(1.0, &dz, &acts[l].transpose(), 0.0);
            grads[l].w = dw;
            grads[l].b = dz.column_sum();
            let mut g_prev = DMatrix::zeros(self.layers[l].w.ncols(), dz.ncols());
            g_prev.gemm(1.0, &self.layers[l].w.transpose(), &dz, 0.0);
            g = g_prev;
        }
        (FieldGrads { layers: grads }, g)
    }

    /// Single-batch backward pass (shape-checked), for small inputs.
    pub fn backward_columns(
        &self,
        x: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
    ) -> Result<(FieldGrads, DMatrix<f64>)> {
        if x.nrows() != self.input_width() || d_out.nrows() != self.output_width() {
            return Err(Error::InvalidInput("backward shape mismatch".into()));
        }
        if x.ncols() != d_out.ncols() {
            return Err(Error::InvalidInput("backward column count mismatch".into()));
        }
        let (zs, acts, _) = self.forward_cached(x);
        Ok(self.backward_cached(&zs, &acts, d_out))
    }
}

/// Parameter gradients, mirroring [`FieldParams`] layer shapes.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub layers: Vec<Layer>,
}

impl FieldGrads {
    pub fn zeros_like(params: &FieldParams) -> Self {
        FieldGrads {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    /// Same layout as [`FieldParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }
}

/// Gradients of a grid-level scalar loss with respect to the network
/// parameters and the latent code.
#[derive(Debug, Clone)]
pub struct GridBackward {
    pub param_grads: FieldGrads,
    pub latent_grad: Matrix3xX<f64>,
}

fn chunk_ranges(total: usize) -> Vec<std::ops::Range<usize>> {
    (0..total.div_ceil(CHUNK))
        .map(|ci| ci * CHUNK..((ci + 1) * CHUNK).min(total))
        .collect()
}

/// Evaluates the field over every column of a feature batch.
///
/// Output is 3xP normalized log radiance. Chunks run in parallel.
pub fn forward_grid(params: &FieldParams, feats: &FeatureBatch) -> Result<DMatrix<f64>> {
    let width = feats.dir_len() + feats.cond_len();
    if width != params.input_width() {
        return Err(Error::InvalidInput(format!(
            "feature width {} does not match network input width {}",
            width,
            params.input_width()
        )));
    }
    let p = feats.dir.ncols();
    let ranges = chunk_ranges(p);
    let outs: Vec<DMatrix<f64>> = ranges
        .par_iter()
        .map(|r| {
            let x = feats.input_block(r.clone());
            let (_, _, y) = params.forward_cached(&x);
            y
        })
        .collect();
    let mut y = DMatrix::zeros(params.output_width(), p);
    for (r, part) in ranges.iter().zip(outs) {
        y.columns_mut(r.start, r.len()).copy_from(&part);
    }
    Ok(y)
}

/// Convenience: build features for `(mode, z, dirs)` and evaluate the field.
pub fn eval_grid(
    params: &FieldParams,
    mode: EquivMode,
    z: &LatentCode,
    dirs: &Matrix3xX<f64>,
) -> Result<DMatrix<f64>> {
    let feats = FeatureBatch::new(mode, dirs, z);
    forward_grid(params, &feats)
}

/// Reverse pass over a grid given the upstream gradient on the output.
///
/// Recomputes per-chunk activations rather than caching them from the
/// forward pass; memory stays flat in the grid size. Partial parameter and
/// latent gradients are summed in chunk order.
pub fn backward_grid(
    params: &FieldParams,
    feats: &FeatureBatch,
    dirs: &Matrix3xX<f64>,
    z: &LatentCode,
    d_out: &DMatrix<f64>,
) -> Result<GridBackward> {
    let p = feats.dir.ncols();
    if d_out.ncols() != p || d_out.nrows() != params.output_width() {
        return Err(Error::InvalidInput("output gradient shape mismatch".into()));
    }
    if dirs.ncols() != p {
        return Err(Error::InvalidInput("direction count mismatch".into()));
    }
    let dd = feats.dir_len();
    let dc = feats.cond_len();
    if dd + dc != params.input_width() {
        return Err(Error::InvalidInput("feature width mismatch".into()));
    }
    let mode = feats.mode;

    let ranges = chunk_ranges(p);
    let partials: Vec<(FieldGrads, Matrix3xX<f64>, DVector<f64>)> = ranges
        .par_iter()
        .map(|r| {
            let x = feats.input_block(r.clone());
            let (zs, acts, _) = params.forward_cached(&x);
            let dy = d_out.columns(r.start, r.len()).into_owned();
            let (grads, dx) = params.backward_cached(&zs, &acts, &dy);
            let d_dir = dx.rows(0, dd).into_owned();
            let chunk_dirs = dirs.columns(r.start, r.len()).into_owned();
            let dir_grad = dir_feature_grad_to_latent(mode, &chunk_dirs, z, &d_dir);
            let mut cond_sum = DVector::zeros(dc);
            for j in 0..r.len() {
                cond_sum += dx.view((dd, j), (dc, 1));
            }
            (grads, dir_grad, cond_sum)
        })
        .collect();

    let mut param_grads = FieldGrads::zeros_like(params);
    let mut latent_grad = Matrix3xX::zeros(z.n());
    let mut cond_total = DVector::zeros(dc);
    for (g, dzl, cs) in &partials {
        param_grads.add_assign(g);
        latent_grad += dzl;
        cond_total += cs;
    }
    latent_grad += cond_feature_grad_to_latent(mode, z, &cond_total);
    Ok(GridBackward {
        param_grads,
        latent_grad,
    })
}
