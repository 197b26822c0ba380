//! Dense feed-forward networks.
//!
//! One `Mlp` type plays both roles in the pipeline: the surrogate regressor
//! and the source critic. Hidden layers apply a leaky rectifier, the output
//! layer is affine and scalar. Gradients are computed by hand-written
//! reverse-mode passes, both with respect to the parameters (training) and
//! with respect to the input (optimization).
//!
//! Scalar entry points (`forward`, `input_grad`) are thin wrappers over the
//! batched kernels with a single row, so batched and per-sample results are
//! produced by the same arithmetic.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::OfflineDataset;
use crate::error::{ensure_dim, Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Dense network with leaky-rectifier hidden layers and a scalar affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    // Layer `l` maps dims[l] -> dims[l + 1]; weights are (out x in).
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    slope: f64,
}

/// Parameter gradients, shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output sizes, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer sizes must be positive, got {dims:?}"
        )));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::InvalidArchitecture(format!(
            "output size must be 1, got {dims:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Builds a network with weights drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in))
    /// and zero biases. Identical `(dims, seed)` give bit-identical parameters.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..bound))
            })
            .collect();
        let biases = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// All-zero network.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect(),
            biases: dims[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn from_parameters(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        slope: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArchitecture(
                "weights and biases must be non-empty and of equal count".into(),
            ));
        }
        let mut dims = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            ensure_dim(*dims.last().unwrap(), w.ncols())?;
            ensure_dim(w.nrows(), b.len())?;
            dims.push(w.nrows());
        }
        validate_dims(&dims)?;
        if !(slope.is_finite() && slope >= 0.0) {
            return Err(Error::InvalidParameter(format!("leaky slope {slope}")));
        }
        Ok(Self {
            dims,
            weights,
            biases,
            slope,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to one layer's `(weights, bias)`.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }

    pub fn max_abs_parameter(&self) -> f64 {
        self.parameters().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_batch(&self, z: &ArrayView2<f64>) -> Result<()> {
        ensure_dim(self.input_dim(), z.ncols())?;
        if z.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(())
    }

    /// Runs the forward pass, keeping every layer input and every hidden
    /// pre-activation for the backward pass.
    fn forward_cached(&self, z: ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array1<f64>) {
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_acts = Vec::with_capacity(last);
        let mut h = z.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = h.dot(&w.t());
            a += b;
            inputs.push(h);
            if l == last {
                return (inputs, pre_acts, a.column(0).to_owned());
            }
            h = a.mapv(|v| if v > 0.0 { v } else { self.slope * v });
            pre_acts.push(a);
        }
        unreachable!("network has at least one layer")
    }

    fn activation_grad(&self, pre: &Array2<f64>) -> Array2<f64> {
        // Negative-branch slope at exactly zero.
        pre.mapv(|v| if v > 0.0 { 1.0 } else { self.slope })
    }

    /// Batched forward pass over the rows of `z`.
    pub fn forward_batch(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_batch(&z)?;
        let last = self.num_layers() - 1;
        let mut h = z.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = h.dot(&w.t());
            a += b;
            if l == last {
                return Ok(a.column(0).to_owned());
            }
            a.mapv_inplace(|v| if v > 0.0 { v } else { self.slope * v });
            h = a;
        }
        unreachable!("network has at least one layer")
    }

    /// Outputs and input gradients for every row of `z`.
    pub fn forward_and_input_grads(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_batch(&z)?;
        let (_, pre_acts, out) = self.forward_cached(z);
        let mut g = Array2::<f64>::ones((z.nrows(), 1));
        for l in (0..self.num_layers()).rev() {
            g = g.dot(&self.weights[l]);
            if l > 0 {
                g *= &self.activation_grad(&pre_acts[l - 1]);
            }
        }
        Ok((out, g))
    }

    /// Parameter gradients of `sum_i d_out[i] * net(z_i)`, plus the outputs.
    pub fn param_grads(
        &self,
        z: ArrayView2<f64>,
        d_out: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Gradients)> {
        self.check_batch(&z)?;
        ensure_dim(z.nrows(), d_out.len())?;
        let (inputs, pre_acts, out) = self.forward_cached(z);
        let n = self.num_layers();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut delta = d_out.to_owned().insert_axis(Axis(1));
        for l in (0..n).rev() {
            dw.push(delta.t().dot(&inputs[l]));
            db.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                delta = delta.dot(&self.weights[l]);
                delta *= &self.activation_grad(&pre_acts[l - 1]);
            }
        }
        dw.reverse();
        db.reverse();
        Ok((
            out,
            Gradients {
                weights: dw,
                biases: db,
            },
        ))
    }

    /// Scalar output for a single input.
    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        Ok(self.forward_batch(view)?[0])
    }

    /// Gradient of the scalar output with respect to the input.
    pub fn input_grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        let (_, g) = self.forward_and_input_grads(view)?;
        Ok(g.row(0).to_vec())
    }

    /// `theta += scale * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(scale, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(scale, g);
        }
    }

    /// Clamps every weight and bias into `[-bound, bound]` in place.
    pub fn clip_weights(&mut self, bound: f64) -> Result<()> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter(format!("clip bound {bound} must be > 0")));
        }
        for w in &mut self.weights {
            w.mapv_inplace(|v| v.clamp(-bound, bound));
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v.clamp(-bound, bound));
        }
        Ok(())
    }

    /// Copy of `self` with parameters clamped into `[-bound, bound]`.
    pub fn clipped(&self, bound: f64) -> Result<Self> {
        let mut net = self.clone();
        net.clip_weights(bound)?;
        Ok(net)
    }

    /// Certified Lipschitz constant: the product of per-layer spectral norms
    /// times the largest activation slope. Small layers use an exact SVD;
    /// layers with both sides above 512 fall back to `min(||W||_F, sqrt(||W||_1 ||W||_inf))`.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        let act = self.slope.max(1.0);
        let hidden = (self.num_layers() - 1) as i32;
        self.weights.iter().map(spectral_norm_bound).product::<f64>() * act.powi(hidden)
    }

    /// Multiplies the output layer by `factor`; the network computes `factor * net(z)`.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.num_layers() - 1;
        self.weights[last].mapv_inplace(|v| v * factor);
        self.biases[last].mapv_inplace(|v| v * factor);
    }
}

fn spectral_norm_bound(w: &Array2<f64>) -> f64 {
    if w.nrows().min(w.ncols()) <= 512 {
        let m = nalgebra::DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
        m.singular_values().max()
    } else {
        let fro = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let one = w
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let inf = w
            .axis_iter(Axis(0))
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        fro.min((one * inf).sqrt())
    }
}

/// Adam moments matching a network's parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let zeros = Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        };
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step on `net` along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        for l in 0..net.num_layers() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Surrogate training settings. Hidden width defaults to 256; the reference
/// setting is two hidden layers of 2048.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 3e-4,
            epochs: 100,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSurrogate {
    pub net: Mlp,
    pub train_mse: f64,
}

/// Fits a regressor to `(designs, targets)` by minibatch Adam on mean squared error.
pub fn fit_regressor(
    designs: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<TrainedSurrogate> {
    let n = designs.nrows();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    ensure_dim(n, targets.len())?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidParameter("batch_size and learning_rate must be positive".into()));
    }
    let mut dims = vec![designs.ncols()];
    dims.extend(&cfg.hidden);
    dims.push(1);
    let mut net = Mlp::new(&dims, crate::rng::derive_seed(seed, "surrogate-init"))?;
    let mut adam = AdamState::new(&net, cfg.learning_rate);
    let mut rng = crate::rng::stream(seed, "surrogate-batches");
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = designs.select(Axis(0), chunk);
            let yb = targets.select(Axis(0), chunk);
            let pred = net.forward_batch(xb.view())?;
            let scale = 2.0 / chunk.len() as f64;
            let d_out = (&pred - &yb) * scale;
            let (_, grads) = net.param_grads(xb.view(), d_out.view())?;
            adam.step(&mut net, &grads);
        }
    }
    let pred = net.forward_batch(designs)?;
    let train_mse = (&pred - &targets).mapv(|e| e * e).mean().unwrap_or(0.0);
    Ok(TrainedSurrogate { net, train_mse })
}

/// Trains the surrogate on a dataset's optimization-space designs against its
/// standardized scores.
pub fn train_surrogate(
    data: &OfflineDataset,
    cfg: &SurrogateConfig,
    seed: u64,
) -> Result<TrainedSurrogate> {
    fit_regressor(data.designs(), data.standardized_scores().view(), cfg, seed)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "gambo-mlp";
const CHECKPOINT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 4] = b"GMLP";

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    leaky_slope: f64,
    /// Row-major (out x in) per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn to_json(&self) -> String {
        let ckpt = JsonCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_dims: self.dims.clone(),
            leaky_slope: self.slope,
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: JsonCheckpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        validate_dims(&ckpt.layer_dims)?;
        if ckpt.weights.len() != ckpt.layer_dims.len() - 1 || ckpt.biases.len() != ckpt.weights.len() {
            return Err(Error::Checkpoint("layer count does not match layer_dims".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (w, b)) in ckpt.weights.into_iter().zip(ckpt.biases).enumerate() {
            let (rows, cols) = (ckpt.layer_dims[l + 1], ckpt.layer_dims[l]);
            weights.push(
                Array2::from_shape_vec((rows, cols), w)
                    .map_err(|e| Error::Checkpoint(format!("layer {l} weights: {e}")))?,
            );
            if b.len() != rows {
                return Err(Error::Checkpoint(format!("layer {l} bias length {}", b.len())));
            }
            biases.push(Array1::from(b));
        }
        Self::from_parameters(weights, biases, ckpt.leaky_slope)
    }

    /// Little-endian binary checkpoint with a trailing SHA-256 of the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_parameters());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.slope.to_le_bytes());
        for v in self.parameters() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 4 + 4 + 4 + 8 + 32 {
            return Err(corrupt("truncated"));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if &payload[..4] != BINARY_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut cursor = 4;
        let mut take = |len: usize| -> Result<&[u8]> {
            let chunk = payload
                .get(cursor..cursor + len)
                .ok_or_else(|| corrupt("truncated"))?;
            cursor += len;
            Ok(chunk)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let n_dims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if n_dims > 1024 {
            return Err(corrupt("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        validate_dims(&dims)?;
        let slope = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let raw = take(count.checked_mul(8).ok_or_else(|| corrupt("overflow"))?)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut weights = Vec::new();
        for w in dims.windows(2) {
            weights.push(Array2::from_shape_vec((w[1], w[0]), read_f64s(w[0] * w[1])?).unwrap());
        }
        let mut biases = Vec::new();
        for &n in &dims[1..] {
            biases.push(Array1::from(read_f64s(n)?));
        }
        if cursor != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        Self::from_parameters(weights, biases, slope)
    }

    /// Writes a checkpoint; `.json` paths get JSON, anything else binary.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            std::fs::write(path, self.to_json())?;
        } else {
            std::fs::write(path, self.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&std::fs::read_to_string(path)?)
        } else {
            Self::from_bytes(&std::fs::read(path)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable scalar fields
// ---------------------------------------------------------------------------

/// A batched, differentiable map `R^d -> R`.
///
/// Implemented by `Mlp` and by `Conditioned`, which freezes some input
/// coordinates so optimizers see only the free ones.
pub trait ScalarField {
    fn input_dim(&self) -> usize;
    fn values(&self, z: ArrayView2<f64>) -> Result<Array1<f64>>;
    fn values_and_grads(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

impl ScalarField for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn values(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.forward_batch(z)
    }

    fn values_and_grads(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.forward_and_input_grads(z)
    }
}

/// A field restricted to the `free` coordinates of `template`.
#[derive(Debug, Clone)]
pub struct Conditioned<'a, F: ScalarField + ?Sized> {
    inner: &'a F,
    template: Array1<f64>,
    free: Vec<usize>,
}

impl<'a, F: ScalarField + ?Sized> Conditioned<'a, F> {
    pub fn new(inner: &'a F, template: Array1<f64>, free: Vec<usize>) -> Result<Self> {
        ensure_dim(inner.input_dim(), template.len())?;
        if free.is_empty() || free.iter().any(|&i| i >= template.len()) {
            return Err(Error::InvalidParameter(format!("free coordinates {free:?}")));
        }
        Ok(Self {
            inner,
            template,
            free,
        })
    }

    /// Embeds free-coordinate rows into full-dimensional rows.
    pub fn embed(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut full = Array2::from_shape_fn((z.nrows(), self.template.len()), |(_, j)| self.template[j]);
        for (k, &j) in self.free.iter().enumerate() {
            full.column_mut(j).assign(&z.column(k));
        }
        full
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn template(&self) -> &Array1<f64> {
        &self.template
    }
}

impl<F: ScalarField + ?Sized> ScalarField for Conditioned<'_, F> {
    fn input_dim(&self) -> usize {
        self.free.len()
    }

    fn values(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        ensure_dim(self.free.len(), z.ncols())?;
        self.inner.values(self.embed(z).view())
    }

    fn values_and_grads(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        ensure_dim(self.free.len(), z.ncols())?;
        let (v, g) = self.inner.values_and_grads(self.embed(z).view())?;
        let g_free = g.select(Axis(1), &self.free);
        Ok((v, g_free))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand_distr::{Distribution, StandardNormal};

    fn affine(w: &[f64], b: f64) -> Mlp {
        Mlp::from_parameters(
            vec![Array2::from_shape_vec((1, w.len()), w.to_vec()).unwrap()],
            vec![array![b]],
            DEFAULT_LEAKY_SLOPE,
        )
        .unwrap()
    }

    /// Layer-by-layer forward pass written with explicit loops.
    fn reference_forward(net: &Mlp, z: &[f64]) -> f64 {
        let mut h = z.to_vec();
        let last = net.num_layers() - 1;
        for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            let mut next = vec![0.0; w.nrows()];
            for o in 0..w.nrows() {
                let mut acc = b[o];
                for i in 0..w.ncols() {
                    acc += w[[o, i]] * h[i];
                }
                next[o] = if l == last || acc > 0.0 { acc } else { net.slope() * acc };
            }
            h = next;
        }
        h[0]
    }

    fn central_difference(net: &Mlp, z: &[f64], h: f64) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let mut plus = z.to_vec();
                let mut minus = z.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (reference_forward(net, &plus) - reference_forward(net, &minus)) / (2.0 * h)
            })
            .collect()
    }

    fn kinked(net: &Mlp, z: &[f64], h: f64) -> bool {
        // True when a hidden pre-activation is within reach of a finite-difference step.
        let mut hcur = z.to_vec();
        let last = net.num_layers() - 1;
        for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            if l == last {
                break;
            }
            let mut next = vec![0.0; w.nrows()];
            for o in 0..w.nrows() {
                let mut acc = b[o];
                for i in 0..w.ncols() {
                    acc += w[[o, i]] * hcur[i];
                }
                let reach = h * w.row(o).iter().map(|v| v.abs()).sum::<f64>() * 10.0;
                if acc.abs() < reach {
                    return true;
                }
                next[o] = if acc > 0.0 { acc } else { net.slope() * acc };
            }
            hcur = next;
        }
        false
    }

    #[test]
    fn init_shapes_and_determinism() {
        let net = Mlp::new(&[2, 8, 8, 1], 0).unwrap();
        let shapes: Vec<_> = net.weights().iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(8, 2), (8, 8), (1, 8)]);
        assert!(net.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_eq!(net, Mlp::new(&[2, 8, 8, 1], 0).unwrap());
        assert_ne!(net, Mlp::new(&[2, 8, 8, 1], 1).unwrap());
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(Mlp::new(&[2], 0).is_err());
        assert!(Mlp::new(&[2, 0, 1], 0).is_err());
        assert!(Mlp::new(&[2, 4, 3], 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 1]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(net.input_grad(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(net.lipschitz_upper_bound(), 0.0);
    }

    #[test]
    fn affine_forward_and_gradient() {
        let net = affine(&[1.0, 2.0], 0.5);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), 3.5);
        assert_eq!(net.input_grad(&[-4.0, 9.0]).unwrap(), vec![1.0, 2.0]);
        assert!((net.lipschitz_upper_bound() - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::new(&[2, 4, 1], 3).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
        assert!(net.input_grad(&[1.0]).is_err());
    }

    #[test]
    fn forward_matches_explicit_arithmetic() {
        let net = Mlp::new(&[2, 8, 8, 1], 11).unwrap();
        let z = [0.3, -0.7];
        let expected = reference_forward(&net, &z);
        assert!((net.forward(&z).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, dims) in [vec![2, 8, 8, 1], vec![5, 16, 1], vec![3, 12, 6, 4, 1]].iter().enumerate() {
            let mut net = Mlp::new(dims, 100 + k as u64).unwrap();
            for b in &mut net.biases {
                b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            let mut checked = 0;
            while checked < 10 {
                let z: Vec<f64> = (0..dims[0]).map(|_| StandardNormal.sample(&mut rng)).collect();
                if kinked(&net, &z, 1e-4) {
                    continue;
                }
                let g = net.input_grad(&z).unwrap();
                let fd = central_difference(&net, &z, 1e-4);
                let scale = fd.iter().map(|v| v.abs()).fold(1e-8, f64::max);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() / scale < 1e-4, "grad {a} vs fd {b}");
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn batched_rows_equal_per_sample_calls() {
        let net = Mlp::new(&[3, 16, 16, 1], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_simple_fn((5, 3), || StandardNormal.sample(&mut rng));
        let (vals, grads) = net.forward_and_input_grads(z.view()).unwrap();
        for i in 0..5 {
            let row = z.row(i).to_vec();
            assert_eq!(vals[i], net.forward(&row).unwrap());
            assert_eq!(grads.row(i).to_vec(), net.input_grad(&row).unwrap());
        }
        let aff = affine(&[0.5, -1.0, 2.0], 0.1);
        let (_, g) = aff.forward_and_input_grads(z.slice(s![..3, ..])).unwrap();
        for row in g.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let net = Mlp::new(&[2, 6, 1], 4).unwrap();
        let z = array![[0.4, -1.2], [1.5, 0.3], [-0.2, 0.9]];
        let d_out = array![1.0, -0.5, 2.0];
        let (_, grads) = net.param_grads(z.view(), d_out.view()).unwrap();
        let objective = |n: &Mlp| n.forward_batch(z.view()).unwrap().dot(&d_out);
        let h = 1e-6;
        for l in 0..net.num_layers() {
            for idx in [(0, 0), (0, 1)] {
                if idx.1 >= net.weights[l].ncols() {
                    continue;
                }
                let mut plus = net.clone();
                plus.weights[l][idx] += h;
                let mut minus = net.clone();
                minus.weights[l][idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - grads.weights[l][idx]).abs() < 1e-6);
            }
            let mut plus = net.clone();
            plus.biases[l][0] += h;
            let mut minus = net.clone();
            minus.biases[l][0] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grads.biases[l][0]).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_bounds_and_idempotence() {
        let mut net = Mlp::new(&[2, 8, 8, 1], 0).unwrap();
        net.weights[0][[0, 0]] = 0.5;
        let once = net.clipped(0.01).unwrap();
        assert_eq!(once.weights()[0][[0, 0]], 0.01);
        assert!(once.max_abs_parameter() <= 0.01);
        assert_eq!(once.clipped(0.01).unwrap(), once);
        assert!(once.lipschitz_upper_bound().is_finite());
        let small = Mlp::zeros(&[2, 1]).unwrap();
        assert_eq!(small.clipped(1.0).unwrap(), small);
        assert!(net.clip_weights(0.0).is_err());
        assert!(net.clip_weights(-1.0).is_err());
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_ratios() {
        let mut net = Mlp::new(&[2, 8, 2, 1], 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in &mut net.biases {
            b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        net.clip_weights(0.01).unwrap();
        let k = net.lipschitz_upper_bound();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..2).map(|_| 3.0 * { let g: f64 = StandardNormal.sample(&mut rng); g }).collect();
            let b: Vec<f64> = (0..2).map(|_| 3.0 * { let g: f64 = StandardNormal.sample(&mut rng); g }).collect();
            let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let ratio = (net.forward(&a).unwrap() - net.forward(&b).unwrap()).abs() / dist;
            worst = worst.max(ratio);
        }
        assert!(k >= worst, "bound {k} < sampled ratio {worst}");
    }

    #[test]
    fn surrogate_learns_a_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train = Array2::from_shape_simple_fn((200, 1), || StandardNormal.sample(&mut rng));
        let target = train.column(0).mapv(|z| 2.0 * z + 1.0);
        let cfg = SurrogateConfig::default();
        let fit = fit_regressor(train.view(), target.view(), &cfg, 0).unwrap();
        let test = Array2::from_shape_simple_fn((200, 1), || StandardNormal.sample(&mut rng));
        let pred = fit.net.forward_batch(test.view()).unwrap();
        let mse = (&pred - &test.column(0).mapv(|z| 2.0 * z + 1.0))
            .mapv(|e| e * e)
            .mean()
            .unwrap();
        assert!(mse < 1e-2, "held-out mse {mse}");
    }

    #[test]
    fn surrogate_fits_constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = Array2::from_shape_simple_fn((1024, 2), || StandardNormal.sample(&mut rng));
        let target = Array1::from_elem(1024, 0.7);
        let fit = fit_regressor(train.view(), target.view(), &SurrogateConfig::default(), 1).unwrap();
        let mae = (fit.net.forward_batch(train.view()).unwrap() - 0.7)
            .mapv(f64::abs)
            .mean()
            .unwrap();
        assert!(mae < 0.05, "mae {mae}");
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let train = array![[0.0], [1.0]];
        let target = array![0.0, 1.0];
        let cfg = SurrogateConfig {
            epochs: 0,
            hidden: vec![4],
            ..Default::default()
        };
        let fit = fit_regressor(train.view(), target.view(), &cfg, 9).unwrap();
        assert_eq!(fit.net, Mlp::new(&[1, 4, 1], crate::rng::derive_seed(9, "surrogate-init")).unwrap());
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(fit_regressor(empty.view(), Array1::zeros(0).view(), &cfg, 0).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let train = array![[0.0, 1.0], [1.0, 0.5], [-1.0, 0.2], [0.3, -0.4]];
        let target = array![0.0, 1.0, -1.0, 0.5];
        let cfg = SurrogateConfig {
            epochs: 5,
            hidden: vec![8, 8],
            batch_size: 2,
            ..Default::default()
        };
        let a = fit_regressor(train.view(), target.view(), &cfg, 4).unwrap();
        let b = fit_regressor(train.view(), target.view(), &cfg, 4).unwrap();
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        let net = Mlp::new(&[3, 7, 5, 1], 12).unwrap();
        assert_eq!(Mlp::from_bytes(&net.to_bytes()).unwrap(), net);
        assert_eq!(Mlp::from_json(&net.to_json()).unwrap(), net);
    }

    #[test]
    fn corrupted_binary_checkpoint_is_rejected() {
        let net = Mlp::new(&[2, 4, 1], 1).unwrap();
        let mut bytes = net.to_bytes();
        bytes[30] ^= 0x40;
        assert!(matches!(Mlp::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Mlp::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn conditioned_field_only_exposes_free_coordinates() {
        let net = affine(&[1.0, 2.0, 3.0], 0.0);
        let cond = Conditioned::new(&net, array![10.0, 20.0, 30.0], vec![1]).unwrap();
        let z = array![[0.5], [-1.0]];
        let (v, g) = cond.values_and_grads(z.view()).unwrap();
        assert_eq!(v.to_vec(), vec![10.0 + 1.0 + 90.0, 10.0 - 2.0 + 90.0]);
        assert_eq!(g, array![[2.0], [2.0]]);
    }
}
