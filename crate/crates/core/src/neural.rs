//! Feed-forward quantile network: rectifier hidden layers, logistic outputs,
//! hand-written backpropagation and Adam.
//!
//! Each input scalar can be expanded by a fixed multi-octave sinusoidal
//! encoding (`x, sin(2^j pi x), cos(2^j pi x)` for `j < octaves`) before the
//! first learned layer. Raw rectifier networks resolve the fine spacing of
//! same-category tokens only after very long training; the encoding makes
//! neighbouring tokens far apart in feature space.
//!
//! Parameters are held as `f64` but always hold values that are exactly
//! representable as `f32` (initialization and every Adam step round through
//! `f32`). Arithmetic runs in `f64`, and checkpoints store `f32` without
//! losing a bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{ActionId, ACTION_COUNT, OBS_DIM};

pub const QUANTILES: usize = 7;
pub const DEFAULT_DIMS: [usize; 4] = [OBS_DIM, 128, 128, ACTION_COUNT * QUANTILES];
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NETOPQR1";
pub const CHECKPOINT_SCHEMA: &str = "netop-ckpt-1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }
}

/// A set of tensors shaped like a model's parameters (gradients, Adam moments).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    /// Tensors in declared order: weights then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn len(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn same_shape(&self, other: &ParamSet) -> bool {
        self.dims() == other.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    pub params: ParamSet,
    /// Width of the raw observation.
    pub input_width: usize,
    /// Number of sinusoidal octaves per input scalar; 0 feeds raw inputs.
    pub octaves: usize,
}

/// Width of the encoded input for `width` raw scalars.
pub fn encoded_width(width: usize, octaves: usize) -> usize {
    width * (1 + 2 * octaves)
}

/// Expands every scalar of `inputs` into `x, sin(2^j pi x), cos(2^j pi x)`.
pub fn encode_inputs(inputs: &[f64], octaves: usize) -> Vec<f64> {
    if octaves == 0 {
        return inputs.to_vec();
    }
    let mut out = Vec::with_capacity(inputs.len() * (1 + 2 * octaves));
    for &x in inputs {
        out.push(x);
        let mut freq = std::f64::consts::PI;
        for _ in 0..octaves {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

/// Cached activations of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub batch: usize,
    /// `activations[0]` is the encoded input, `activations[l + 1]` the output
    /// of layer `l`.
    pub activations: Vec<Vec<f64>>,
    /// Actions whose output columns were computed, when only a subset was.
    pub actions: Option<Vec<ActionId>>,
}

impl ForwardTrace {
    pub fn outputs(&self) -> &[f64] {
        self.activations.last().expect("trace has an output layer")
    }

    /// Output row for sample `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.outputs().len() / self.batch;
        &self.outputs()[i * width..(i + 1) * width]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dense(layer: &Layer, x: &[f64], rows: impl Iterator<Item = usize>, out: &mut Vec<f64>) {
    for j in rows {
        let dot: f64 = layer.row(j).iter().zip(x).map(|(w, v)| w * v).sum();
        out.push(dot + layer.bias[j]);
    }
}

impl QuantileModel {
    /// Fan-in scaled uniform initialization with zero biases: He range
    /// `sqrt(6 / fan_in)` for rectifier layers, `sqrt(3 / fan_in)` for the
    /// logistic output layer. `dims[0]` is the raw input width.
    pub fn init(seed: u64, dims: &[usize]) -> Result<Self, NeuralError> {
        Self::init_encoded(seed, dims, 0)
    }

    pub fn init_encoded(seed: u64, dims: &[usize], octaves: usize) -> Result<Self, NeuralError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NeuralError::Shape(format!("invalid dims {dims:?}")));
        }
        if !dims[dims.len() - 1].is_multiple_of(QUANTILES) {
            return Err(NeuralError::Shape(format!(
                "output width {} is not a multiple of {QUANTILES}",
                dims[dims.len() - 1]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::zeros(&Self::layer_dims(dims, octaves));
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let gain = if l == last { 3.0 } else { 6.0 };
            let bound = (gain / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = round_f32(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self { params, input_width: dims[0], octaves })
    }

    /// Learned layer widths for logical `dims`.
    pub fn layer_dims(dims: &[usize], octaves: usize) -> Vec<usize> {
        let mut d = dims.to_vec();
        d[0] = encoded_width(dims[0], octaves);
        d
    }

    /// Logical dims: raw input width, hidden widths, output width.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = self.params.dims();
        d[0] = self.input_width;
        d
    }

    pub fn input_dim(&self) -> usize {
        self.input_width
    }

    pub fn action_count(&self) -> usize {
        self.params.layers.last().unwrap().outputs / QUANTILES
    }

    fn check_input(&self, inputs: &[f64], batch: usize) -> Result<(), NeuralError> {
        if batch == 0 || inputs.len() != batch * self.input_dim() {
            return Err(NeuralError::Shape(format!(
                "{} input values for batch {batch} of width {}",
                inputs.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn hidden_forward(&self, inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts = vec![encode_inputs(inputs, self.octaves)];
        let hidden = &self.params.layers[..self.params.layers.len() - 1];
        for layer in hidden {
            let x = acts.last().unwrap();
            let mut out = Vec::with_capacity(batch * layer.outputs);
            for s in 0..batch {
                dense(layer, &x[s * layer.inputs..(s + 1) * layer.inputs], 0..layer.outputs, &mut out);
            }
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(out);
        }
        acts
    }

    /// Full forward pass. `inputs` is `batch` rows of `input_dim` values; each
    /// output row holds `A x Q` scores with entry `a * Q + k` the `k`-th
    /// quantile score of action `a`.
    pub fn forward(&self, inputs: &[f64], batch: usize) -> Result<ForwardTrace, NeuralError> {
        self.check_input(inputs, batch)?;
        let mut acts = self.hidden_forward(inputs, batch);
        let layer = self.params.layers.last().unwrap();
        let x = acts.last().unwrap();
        let mut out = Vec::with_capacity(batch * layer.outputs);
        for s in 0..batch {
            dense(layer, &x[s * layer.inputs..(s + 1) * layer.inputs], 0..layer.outputs, &mut out);
        }
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        acts.push(out);
        Ok(ForwardTrace { batch, activations: acts, actions: None })
    }

    /// Forward pass that only evaluates the `Q` output columns of one action
    /// per sample. Output rows are `Q` wide.
    pub fn forward_actions(
        &self,
        inputs: &[f64],
        actions: &[ActionId],
    ) -> Result<ForwardTrace, NeuralError> {
        let batch = actions.len();
        self.check_input(inputs, batch)?;
        if let Some(a) = actions.iter().find(|a| a.index() >= self.action_count()) {
            return Err(NeuralError::Shape(format!("action {} out of range", a.0)));
        }
        let mut acts = self.hidden_forward(inputs, batch);
        let layer = self.params.layers.last().unwrap();
        let x = acts.last().unwrap();
        let mut out = Vec::with_capacity(batch * QUANTILES);
        for (s, a) in actions.iter().enumerate() {
            let cols = a.index() * QUANTILES..(a.index() + 1) * QUANTILES;
            dense(layer, &x[s * layer.inputs..(s + 1) * layer.inputs], cols, &mut out);
        }
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        acts.push(out);
        Ok(ForwardTrace { batch, activations: acts, actions: Some(actions.to_vec()) })
    }

    /// Score grid for one observation.
    pub fn scores(&self, obs: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(obs, 1)?.activations.pop().unwrap())
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<ActionId, NeuralError> {
        Ok(greedy_action(&self.scores(obs)?))
    }

    /// Exact gradients of a scalar loss given its gradient with respect to
    /// the traced outputs (same layout as `trace.outputs()`).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_outputs: &[f64],
    ) -> Result<ParamSet, NeuralError> {
        if grad_outputs.len() != trace.outputs().len()
            || trace.activations.len() != self.params.layers.len() + 1
            || trace.activations[0].len() != trace.batch * self.params.layers[0].inputs
        {
            return Err(NeuralError::Shape("trace and output gradient do not match the model".into()));
        }
        let batch = trace.batch;
        let mut grads = ParamSet::zeros(&self.params.dims());
        let last = self.params.layers.len() - 1;

        // Output layer: logistic derivative, possibly on a column subset.
        let layer = &self.params.layers[last];
        let width = grad_outputs.len() / batch;
        let x = &trace.activations[last];
        let mut dx = vec![0.0; batch * layer.inputs];
        {
            let g = &mut grads.layers[last];
            for s in 0..batch {
                let xs = &x[s * layer.inputs..(s + 1) * layer.inputs];
                let dxs = &mut dx[s * layer.inputs..(s + 1) * layer.inputs];
                for c in 0..width {
                    let y = trace.outputs()[s * width + c];
                    let dz = grad_outputs[s * width + c] * y * (1.0 - y);
                    if dz == 0.0 {
                        continue;
                    }
                    let j = match &trace.actions {
                        Some(actions) => actions[s].index() * QUANTILES + c,
                        None => c,
                    };
                    g.bias[j] += dz;
                    let gw = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    gw.iter_mut().zip(xs).for_each(|(gw, xv)| *gw += dz * xv);
                    dxs.iter_mut().zip(layer.row(j)).for_each(|(d, w)| *d += dz * w);
                }
            }
        }

        for l in (0..last).rev() {
            let layer = &self.params.layers[l];
            let out = &trace.activations[l + 1];
            let x = &trace.activations[l];
            // Rectifier: the activation is zero exactly where the unit is off.
            let dz: Vec<f64> =
                dx.iter().zip(out).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            let mut next = vec![0.0; batch * layer.inputs];
            let g = &mut grads.layers[l];
            for s in 0..batch {
                let xs = &x[s * layer.inputs..(s + 1) * layer.inputs];
                let nx = &mut next[s * layer.inputs..(s + 1) * layer.inputs];
                for j in 0..layer.outputs {
                    let d = dz[s * layer.outputs + j];
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[j] += d;
                    let gw = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    gw.iter_mut().zip(xs).for_each(|(gw, xv)| *gw += d * xv);
                    if l > 0 {
                        nx.iter_mut().zip(layer.row(j)).for_each(|(n, w)| *n += d * w);
                    }
                }
            }
            dx = next;
        }
        Ok(grads)
    }

    /// SHA-256 over the little-endian `f32` parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params.tensors() {
            for v in t {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Mean over the quantile axis of an `A x Q` grid.
pub fn mean_scores(grid: &[f64]) -> Vec<f64> {
    grid.chunks_exact(QUANTILES)
        .map(|q| q.iter().sum::<f64>() / QUANTILES as f64)
        .collect()
}

/// Action with the highest mean score; ties go to the lowest id.
pub fn greedy_action(grid: &[f64]) -> ActionId {
    let means = mean_scores(grid);
    let mut best = 0;
    for (a, m) in means.iter().enumerate() {
        if *m > means[best] {
            best = a;
        }
    }
    ActionId(best as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &QuantileModel) -> Self {
        let dims = model.params.dims();
        let dims = dims.as_slice();
        Self { first_moment: ParamSet::zeros(dims), second_moment: ParamSet::zeros(dims), step: 0 }
    }
}

/// Bias-corrected Adam update of one tensor. `step` is the 1-based index of
/// this update. Parameters and moments are rounded to `f32` afterwards.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hyper: &AdamHyper,
) {
    let c1 = 1.0 - hyper.beta1.powf(step as f64);
    let c2 = 1.0 - hyper.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = round_f32(hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g);
        v[i] = round_f32(hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g);
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        params[i] = round_f32(params[i] - hyper.learning_rate * mhat / (vhat.sqrt() + hyper.epsilon));
    }
}

impl QuantileModel {
    pub fn adam_step(
        &mut self,
        grads: &ParamSet,
        state: &mut AdamState,
        hyper: &AdamHyper,
    ) -> Result<(), NeuralError> {
        if !self.params.same_shape(grads)
            || !self.params.same_shape(&state.first_moment)
            || !self.params.same_shape(&state.second_moment)
        {
            return Err(NeuralError::Shape("adam tensors do not match the model".into()));
        }
        state.step += 1;
        let step = state.step;
        let tensors = self
            .params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(state.first_moment.tensors_mut())
            .zip(state.second_moment.tensors_mut());
        for (((p, g), m), v) in tensors {
            adam_update(p, g, m, v, step, hyper);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedLineage {
    pub model_seed: u64,
    pub train_seed: u64,
    pub validation_seed: u64,
}

/// Checkpoint metadata. Fields are in alphabetical order so the JSON keys
/// come out sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub actions: usize,
    pub adam: AdamHyper,
    pub adam_step: u64,
    pub collection_steps: u64,
    pub dims: Vec<usize>,
    pub input_octaves: usize,
    /// 1 at the end of the uniform-weight phase, 2 after fine-tuning.
    pub phase: u8,
    pub quantiles: usize,
    pub schema: String,
    pub seeds: SeedLineage,
    pub training_step: u64,
    pub validation_accuracy: Option<f64>,
    pub vocab_hash: String,
}

impl CheckpointMeta {
    pub fn check_vocab(&self, expected: &str) -> Result<(), NeuralError> {
        if self.vocab_hash != expected {
            return Err(NeuralError::VocabMismatch {
                expected: expected.to_string(),
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: QuantileModel,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Layout: magic, `u32` LE metadata length, metadata JSON, then `f32` LE
    /// parameters, first moments and second moments, each in declared
    /// tensor order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let floats = 3 * self.model.params.len();
        let mut out = Vec::with_capacity(12 + meta.len() + 4 * floats);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for set in [&self.model.params, &self.adam.first_moment, &self.adam.second_moment] {
            for t in set.tensors() {
                for v in t {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(NeuralError::Truncated { needed, have: bytes.len() })
            } else {
                Ok(())
            }
        };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(NeuralError::BadMagic);
        }
        need(12)?;
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        need(12 + meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len])
            .map_err(|e| NeuralError::Metadata(e.to_string()))?;
        if meta.schema != CHECKPOINT_SCHEMA {
            return Err(NeuralError::Metadata(format!("unsupported schema `{}`", meta.schema)));
        }
        let dims = &meta.dims;
        if dims.len() < 2
            || dims.contains(&0)
            || *dims.last().unwrap() != meta.actions * meta.quantiles
            || meta.quantiles != QUANTILES
        {
            return Err(NeuralError::Metadata(format!(
                "inconsistent dims {dims:?} for {} actions x {} quantiles",
                meta.actions, meta.quantiles
            )));
        }
        let layer_dims = QuantileModel::layer_dims(dims, meta.input_octaves);
        let mut sets = [
            ParamSet::zeros(&layer_dims),
            ParamSet::zeros(&layer_dims),
            ParamSet::zeros(&layer_dims),
        ];
        let body = 12 + meta_len;
        let total = body + 4 * 3 * sets[0].len();
        need(total)?;
        if bytes.len() > total {
            return Err(NeuralError::TrailingBytes(bytes.len() - total));
        }
        let mut floats = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for set in &mut sets {
            for t in set.tensors_mut() {
                t.iter_mut().for_each(|v| *v = floats.next().unwrap());
            }
        }
        let [params, m, v] = sets;
        Ok(Self {
            model: QuantileModel { params, input_width: dims[0], octaves: meta.input_octaves },
            adam: AdamState { first_moment: m, second_moment: v, step: meta.adam_step },
            meta,
        })
    }
}
