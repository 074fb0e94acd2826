//! Two-head MLP mapping raw features to vMF parameters, with reverse-mode
//! gradients of the training objective and a momentum SGD trainer.
//!
//! The final linear layer has width `d + 1`: the first `d` outputs `v` give the
//! mean direction `mu = v / |v|`, the last output `s` gives the concentration
//! `kappa = softplus(s) + kappa_floor`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{check_dim, Error, Result};
use crate::objective::{self, InstanceBatch, LossWeights, ObjectiveValue, ParamGrad, Selection};
use crate::proxy::ProxySet;
use crate::rng;
use crate::vmf::{UnitVector, VmfParams};

const MODEL_MAGIC: &[u8; 4] = b"GCPM";
const MODEL_VERSION: u32 = 1;
const DEGENERATE_NORM: f64 = 1e-12;
/// Largest model accepted by [`finite_diff_check`].
pub const FINITE_DIFF_PARAM_CAP: usize = 10_000;

/// One affine layer; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    /// Hidden layers use tanh; the last layer is linear with `d + 1` outputs.
    pub layers: Vec<Layer>,
    pub kappa_floor: f64,
}

/// Output of one forward pass for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub params: VmfParams,
    /// Direction-head output had norm below 1e-12; `mu` fell back to `e_1`.
    pub degenerate: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Forward {
    /// activations[0] is the input; the last entry is the raw head output.
    activations: Vec<DMatrix<f64>>,
}

impl EncoderModel {
    /// Random initialization with `N(0, 1 / fan_in)` weights and zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], embed_dim: usize, kappa_floor: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if embed_dim < 2 {
            return Err(Error::config(format!("embedding dimension must be >= 2, got {embed_dim}")));
        }
        if !(kappa_floor > 0.0 && kappa_floor.is_finite()) {
            return Err(Error::config(format!("kappa_floor must be positive, got {kappa_floor}")));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim + 1);
        let mut r = rng::seeded(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        scale * z
                    }),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers, kappa_floor })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("model has layers").weights.nrows() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for i in 0..l.weights.nrows() {
                out.extend(l.weights.row(i).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.param_count(), values.len())?;
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    l.weights[(i, j)] = it.next().expect("length checked");
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[1].weights.ncols() != pair[0].weights.nrows() {
                return Err(Error::config(format!("layer {} input width does not match layer {k}", k + 1)));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::config("bias length differs from layer output width"));
            }
        }
        if self.embed_dim() < 2 {
            return Err(Error::config("output layer must have at least 3 units"));
        }
        if !(self.kappa_floor > 0.0 && self.kappa_floor.is_finite()) {
            return Err(Error::config("kappa_floor must be positive"));
        }
        Ok(())
    }

    fn forward(&self, features: &DMatrix<f64>) -> Result<Forward> {
        check_dim(self.input_dim(), features.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(features.clone());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = &activations[k] * l.weights.transpose();
            for mut row in z.row_iter_mut() {
                row += l.bias.transpose();
            }
            if k < last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(Forward { activations })
    }

    fn head(&self, out: &DMatrix<f64>, i: usize) -> Result<Encoding> {
        let d = self.embed_dim();
        let v: Vec<f64> = (0..d).map(|j| out[(i, j)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let kappa = softplus(out[(i, d)]) + self.kappa_floor;
        if !norm.is_finite() || !kappa.is_finite() {
            return Err(Error::Numerical(format!("non-finite encoder output for instance {i}")));
        }
        let (mu, degenerate) = if norm < DEGENERATE_NORM {
            (UnitVector::basis(d, 0)?, true)
        } else {
            (UnitVector::normalize(v)?, false)
        };
        Ok(Encoding {
            params: VmfParams::new(mu, kappa)?,
            degenerate,
        })
    }

    pub fn encode(&self, features: &[f64]) -> Result<VmfParams> {
        Ok(self.encode_detailed(features)?.params)
    }

    pub fn encode_detailed(&self, features: &[f64]) -> Result<Encoding> {
        let x = DMatrix::from_row_slice(1, features.len(), features);
        let mut out = self.encode_batch(&x)?;
        Ok(out.remove(0))
    }

    /// Encodes every row of `features`.
    pub fn encode_batch(&self, features: &DMatrix<f64>) -> Result<Vec<Encoding>> {
        self.validate()?;
        let fwd = self.forward(features)?;
        let out = fwd.activations.last().expect("output layer");
        (0..features.nrows()).map(|i| self.head(out, i)).collect()
    }

    /// Unit mean directions of every row, as an `N x d` matrix.
    pub fn encode_directions(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let enc = self.encode_batch(features)?;
        let d = self.embed_dim();
        Ok(DMatrix::from_fn(enc.len(), d, |i, j| enc[i].params.mu.as_slice()[j]))
    }

    /// Back-propagates per-instance `(mu, kappa)` gradients to parameter gradients.
    fn backward(&self, fwd: &Forward, grads: &[ParamGrad]) -> Vec<Layer> {
        let d = self.embed_dim();
        let out = fwd.activations.last().expect("output layer");
        let n = out.nrows();
        let mut delta = DMatrix::zeros(n, d + 1);
        for (i, g) in grads.iter().enumerate() {
            let v: Vec<f64> = (0..d).map(|j| out[(i, j)]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= DEGENERATE_NORM {
                let mu: Vec<f64> = v.iter().map(|x| x / norm).collect();
                let t = objective::tangent_project(&mu, &g.mu);
                for j in 0..d {
                    delta[(i, j)] = t[j] / norm;
                }
            }
            delta[(i, d)] = g.kappa * sigmoid(out[(i, d)]);
        }
        let mut result: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        for k in (0..self.layers.len()).rev() {
            let input = &fwd.activations[k];
            result[k].weights = delta.transpose() * input;
            result[k].bias = delta.row_sum().transpose();
            if k > 0 {
                let mut prev = &delta * &self.layers[k].weights;
                prev.zip_apply(input, |g, a| *g *= 1.0 - a * a);
                delta = prev;
            }
        }
        result
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.weights.nrows() as u32);
            w.u32(l.weights.ncols() as u32);
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    w.f64(l.weights[(i, j)]);
                }
            }
            for &b in l.bias.iter() {
                w.f64(b);
            }
        }
        w.f64(self.kappa_floor);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        r.expect_version(MODEL_VERSION)?;
        let count_at = r.offset();
        let count = r.u32("layer count")? as usize;
        if count == 0 {
            return Err(Error::format(count_at, "model has no layers"));
        }
        let mut layers = Vec::with_capacity(count.min(64));
        for k in 0..count {
            let shape_at = r.offset();
            let rows = r.u32("layer rows")? as usize;
            let cols = r.u32("layer cols")? as usize;
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if cols != prev.weights.nrows() {
                    return Err(Error::format(shape_at, format!("layer {k} expects {cols} inputs, previous layer emits {}", prev.weights.nrows())));
                }
            }
            let w = r.f64_vec(rows * cols, "layer weights")?;
            let b = r.f64_vec(rows, "layer biases")?;
            layers.push(Layer {
                weights: DMatrix::from_row_slice(rows, cols, &w),
                bias: DVector::from_vec(b),
            });
        }
        let floor_at = r.offset();
        let kappa_floor = r.f64("kappa floor")?;
        r.finish()?;
        let model = Self { layers, kappa_floor };
        model.validate().map_err(|e| Error::format(floor_at, e.to_string()))?;
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One base minibatch and one unlabeled minibatch of raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct Batches {
    pub base_features: DMatrix<f64>,
    pub base_labels: Vec<usize>,
    pub unlabeled_features: DMatrix<f64>,
}

impl Batches {
    fn validate(&self, model: &EncoderModel) -> Result<()> {
        check_dim(model.input_dim(), self.base_features.ncols())?;
        check_dim(model.input_dim(), self.unlabeled_features.ncols())?;
        if self.base_labels.len() != self.base_features.nrows() {
            return Err(Error::Contract(format!(
                "{} labels for {} base rows",
                self.base_labels.len(),
                self.base_features.nrows()
            )));
        }
        Ok(())
    }
}

struct Pass {
    base_fwd: Forward,
    unl_fwd: Forward,
    base_batch: InstanceBatch,
    unl_batch: InstanceBatch,
}

fn forward_pass(model: &EncoderModel, batches: &Batches) -> Result<Pass> {
    model.validate()?;
    batches.validate(model)?;
    let base_fwd = model.forward(&batches.base_features)?;
    let unl_fwd = model.forward(&batches.unlabeled_features)?;
    let params = |fwd: &Forward| -> Result<Vec<VmfParams>> {
        let out = fwd.activations.last().expect("output layer");
        (0..out.nrows()).map(|i| Ok(model.head(out, i)?.params)).collect()
    };
    let base_batch = InstanceBatch::base(params(&base_fwd)?, batches.base_labels.clone())?;
    let unl_batch = InstanceBatch::unlabeled(params(&unl_fwd)?)?;
    Ok(Pass {
        base_fwd,
        unl_fwd,
        base_batch,
        unl_batch,
    })
}

fn add_layers(acc: &mut [Layer], other: &[Layer]) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.weights += &b.weights;
        a.bias += &b.bias;
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    EncoderModel {
        layers: layers.to_vec(),
        kappa_floor: 1.0,
    }
    .parameters()
}

/// Objective value and exact parameter gradients; discrete selections are
/// computed once from the forward pass and then held fixed.
pub fn backprop(
    model: &EncoderModel,
    batches: &Batches,
    proxies: &ProxySet,
    weights: &LossWeights,
) -> Result<(ObjectiveValue, Vec<Layer>)> {
    let pass = forward_pass(model, batches)?;
    let selection = objective::select_terms(&pass.unl_batch, proxies, weights)?;
    backprop_with(model, &pass, proxies, weights, &selection)
}

fn backprop_with(
    model: &EncoderModel,
    pass: &Pass,
    proxies: &ProxySet,
    weights: &LossWeights,
    selection: &Selection,
) -> Result<(ObjectiveValue, Vec<Layer>)> {
    let g = objective::evaluate_with_selection(&pass.base_batch, &pass.unl_batch, proxies, weights, selection, true)?;
    let mut grads = model.backward(&pass.base_fwd, &g.base);
    add_layers(&mut grads, &model.backward(&pass.unl_fwd, &g.unlabeled));
    Ok((g.value, grads))
}

/// `|a - b| / max(|a| + |b|, 1e-8)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Largest relative error between [`backprop`] and central differences of the
/// objective over every parameter, with selections frozen at `model`.
pub fn finite_diff_check(
    model: &EncoderModel,
    batches: &Batches,
    proxies: &ProxySet,
    weights: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 1e-8 && epsilon < 1e-2) {
        return Err(Error::config(format!("epsilon must lie in (1e-8, 1e-2), got {epsilon}")));
    }
    let n = model.param_count();
    if n > FINITE_DIFF_PARAM_CAP {
        return Err(Error::Size(format!(
            "model has {n} parameters, finite-difference check is capped at {FINITE_DIFF_PARAM_CAP}"
        )));
    }
    let pass = forward_pass(model, batches)?;
    let selection = objective::select_terms(&pass.unl_batch, proxies, weights)?;
    let (_, grads) = backprop_with(model, &pass, proxies, weights, &selection)?;
    let analytic = flatten(&grads);
    let theta = model.parameters();
    let mut probe = model.clone();
    let mut objective_at = |values: &[f64]| -> Result<f64> {
        probe.set_parameters(values)?;
        let pass = forward_pass(&probe, batches)?;
        let g = objective::evaluate_with_selection(&pass.base_batch, &pass.unl_batch, proxies, weights, &selection, false)?;
        Ok(g.value.total)
    };
    let mut worst: f64 = 0.0;
    let mut shifted = theta.clone();
    for k in 0..n {
        shifted[k] = theta[k] + epsilon;
        let up = objective_at(&shifted)?;
        shifted[k] = theta[k] - epsilon;
        let down = objective_at(&shifted)?;
        shifted[k] = theta[k];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(numeric, analytic[k]));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size_base: usize,
    pub batch_size_unlabeled: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Hidden widths used when a fresh model is initialized for training.
    pub hidden: Vec<usize>,
    pub kappa_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size_base: 64,
            batch_size_unlabeled: 64,
            step_size: 1e-3,
            momentum: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            hidden: vec![64],
            kappa_floor: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_base == 0 || self.batch_size_unlabeled == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be finite and >= 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if !(self.kappa_floor > 0.0 && self.kappa_floor.is_finite()) {
            return Err(Error::config("kappa_floor must be positive"));
        }
        self.weights.validate()
    }

    /// A freshly initialized model for `input_dim` features and a `proxies`-sized sphere.
    pub fn init_model(&self, input_dim: usize, embed_dim: usize) -> Result<EncoderModel> {
        EncoderModel::new(input_dim, &self.hidden, embed_dim, self.kappa_floor, rng::derive_seed(self.seed, 0))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Objective on the sampled minibatches at each iteration, before its update.
    pub trace: Vec<ObjectiveValue>,
}

fn sample_rows(r: &mut rng::SeededRng, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        (0..n).collect()
    } else {
        index::sample(r, n, size).into_vec()
    }
}

fn gather(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Momentum SGD on minibatches drawn from the base and unlabeled features.
/// Base label `c` is anchored to `proxies.base_indices[c]`.
pub fn train(
    model: &EncoderModel,
    base_features: &DMatrix<f64>,
    base_labels: &[usize],
    unlabeled_features: &DMatrix<f64>,
    proxies: &ProxySet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    check_dim(proxies.dim(), model.embed_dim())?;
    if base_labels.len() != base_features.nrows() {
        return Err(Error::Data(format!(
            "{} labels for {} base instances",
            base_labels.len(),
            base_features.nrows()
        )));
    }
    if let Some(&bad) = base_labels.iter().find(|&&c| c >= proxies.base_indices.len()) {
        return Err(Error::Data(format!(
            "base label {bad} outside the roster of {} base classes",
            proxies.base_indices.len()
        )));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok(TrainOutcome { model, trace });
    }
    if base_features.nrows() == 0 || unlabeled_features.nrows() == 0 {
        return Err(Error::Data("training needs non-empty base and unlabeled sets".into()));
    }
    let mut r = rng::seeded(rng::derive_seed(config.seed, 1));
    let mut theta = model.parameters();
    let mut velocity = vec![0.0; theta.len()];
    for it in 0..config.iterations {
        let bi = sample_rows(&mut r, base_features.nrows(), config.batch_size_base);
        let ui = sample_rows(&mut r, unlabeled_features.nrows(), config.batch_size_unlabeled);
        let batches = Batches {
            base_features: gather(base_features, &bi),
            base_labels: bi.iter().map(|&i| base_labels[i]).collect(),
            unlabeled_features: gather(unlabeled_features, &ui),
        };
        let (value, grads) = backprop(&model, &batches, proxies, &config.weights)?;
        let g = flatten(&grads);
        if !value.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {it}")));
        }
        for ((t, v), gk) in theta.iter_mut().zip(&mut velocity).zip(&g) {
            *v = config.momentum * *v - config.step_size * gk;
            *t += *v;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters after iteration {it}")));
        }
        model.set_parameters(&theta)?;
        trace.push(value);
    }
    Ok(TrainOutcome { model, trace })
}
