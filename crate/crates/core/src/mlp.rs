//! Small dense networks with hand-derived backpropagation.
//!
//! These are the frozen task models the collaboration operators act on.
//! Parameters live in one flat [`ParamVec`] with a canonical layout that is
//! part of the public contract (merging two models' vectors is only
//! meaningful if both flatten identically):
//!
//! ```text
//! layer 0 weights (out x in, row-major), layer 0 bias,
//! layer 1 weights, layer 1 bias, ...
//! ```
//!
//! Hidden layers apply the activation; the output layer emits raw logits.
//! Tanh is the default activation: it is smooth everywhere, which the
//! residual-order experiments in [`crate::taylor`] rely on. Relu is offered
//! for training-robustness ablations only.

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::num::{softmax, ParamVec, Rng};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Where a model's initial parameters came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    /// Fine-tuned from a shared checkpoint.
    SharedInit,
    /// Randomly initialized and trained from scratch.
    IndependentInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dim, hidden dims, output dim. At least [input, output].
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(
                "MlpSpec needs at least input and output dims".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all layer dims must be >= 1".into()));
        }
        Ok(MlpSpec {
            layer_dims,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Total parameter count implied by the layout contract.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block in the flat vector.
    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_dims[..layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum::<usize>()
            + if layer > 0 {
                // windows over the truncated prefix misses the (l-1, l) pair
                self.layer_dims[layer - 1] * self.layer_dims[layer] + self.layer_dims[layer]
            } else {
                0
            }
    }
}

/// One frozen (or in-training) task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub spec: MlpSpec,
    pub params: ParamVec,
    pub origin: Origin,
    pub task_id: usize,
}

impl TaskModel {
    pub fn new(spec: MlpSpec, params: ParamVec, origin: Origin, task_id: usize) -> Result<Self> {
        if params.dim() != spec.param_count() {
            return Err(Error::DimMismatch {
                index: task_id,
                expected: spec.param_count(),
                got: params.dim(),
            });
        }
        Ok(TaskModel {
            spec,
            params,
            origin,
            task_id,
        })
    }

    /// Random init: normal weights scaled by 1/sqrt(fan_in), zero biases.
    pub fn init(spec: MlpSpec, origin: Origin, task_id: usize, rng: &mut Rng) -> Self {
        let mut values = vec![0.0; spec.param_count()];
        let mut off = 0;
        for w in spec.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            rng.fill_normal(&mut values[off..off + fan_in * fan_out], std);
            off += fan_in * fan_out + fan_out; // biases stay zero
        }
        TaskModel {
            spec,
            params: ParamVec::new(values).unwrap(),
            origin,
            task_id,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, x)
    }
}

/// Forward pass through `params` laid out per `spec`.
///
/// Split out from [`TaskModel`] so merged parameter vectors can be evaluated
/// without constructing a model.
pub fn forward(spec: &MlpSpec, params: &ParamVec, x: &[f64]) -> Result<Vec<f64>> {
    if params.dim() != spec.param_count() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: spec.param_count(),
            got: params.dim(),
        });
    }
    if x.len() != spec.input_dim() {
        return Err(Error::DimMismatch {
            index: 0,
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    let p = params.as_slice();
    let mut act = x.to_vec();
    let mut off = 0;
    let n_layers = spec.n_layers();
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let (in_d, out_d) = (w[0], w[1]);
        let weights = &p[off..off + in_d * out_d];
        let bias = &p[off + in_d * out_d..off + in_d * out_d + out_d];
        off += in_d * out_d + out_d;
        let mut next = vec![0.0; out_d];
        for o in 0..out_d {
            let row = &weights[o * in_d..(o + 1) * in_d];
            let mut z = bias[o];
            for (wi, xi) in row.iter().zip(&act) {
                z += wi * xi;
            }
            next[o] = z;
        }
        if l + 1 < n_layers {
            match spec.activation {
                Activation::Tanh => next.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Relu => next.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        act = next;
    }
    Ok(act)
}

/// Forward pass that also records pre- and post-activation values per layer,
/// for backprop.
struct ForwardTrace {
    /// activations[0] = input, activations[l+1] = layer l output (post-act).
    activations: Vec<Vec<f64>>,
}

fn forward_trace(spec: &MlpSpec, params: &ParamVec, x: &[f64]) -> ForwardTrace {
    let p = params.as_slice();
    let mut activations = vec![x.to_vec()];
    let mut off = 0;
    let n_layers = spec.n_layers();
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let (in_d, out_d) = (w[0], w[1]);
        let weights = &p[off..off + in_d * out_d];
        let bias = &p[off + in_d * out_d..off + in_d * out_d + out_d];
        off += in_d * out_d + out_d;
        let prev = activations.last().unwrap();
        let mut next = vec![0.0; out_d];
        for o in 0..out_d {
            let row = &weights[o * in_d..(o + 1) * in_d];
            let mut z = bias[o];
            for (wi, xi) in row.iter().zip(prev) {
                z += wi * xi;
            }
            next[o] = z;
        }
        if l + 1 < n_layers {
            match spec.activation {
                Activation::Tanh => next.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Relu => next.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        activations.push(next);
    }
    ForwardTrace { activations }
}

/// One labeled example in the unified label space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Mean cross-entropy of `model` over `batch`.
pub fn batch_loss(model: &TaskModel, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch_loss requires a nonempty batch"));
    }
    let losses = par::map_slice(batch, |ex| {
        let logits = forward(&model.spec, &model.params, &ex.x)?;
        let p = softmax(&logits)?;
        Ok::<f64, Error>(-p[ex.y].max(f64::MIN_POSITIVE).ln())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of mean cross-entropy over `batch`, flattened in the canonical
/// parameter order. Per-sample gradients are computed independently and
/// accumulated in datum-index order, so the result is bit-deterministic.
pub fn backward(model: &TaskModel, batch: &[Example]) -> Result<ParamVec> {
    if batch.is_empty() {
        return Err(Error::Empty("backward requires a nonempty batch"));
    }
    let c = model.spec.output_dim();
    for (i, ex) in batch.iter().enumerate() {
        if ex.y >= c {
            return Err(Error::InvalidValue(format!(
                "label {} out of range [0, {}) at batch index {}",
                ex.y, c, i
            )));
        }
    }
    let grads = par::map_slice(batch, |ex| sample_gradient(&model.spec, &model.params, ex));
    let mut acc = vec![0.0; model.spec.param_count()];
    for g in &grads {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    ParamVec::new(acc)
}

/// Gradient of `-ln softmax(f(x))[y]` for a single example.
fn sample_gradient(spec: &MlpSpec, params: &ParamVec, ex: &Example) -> Vec<f64> {
    let trace = forward_trace(spec, params, &ex.x);
    let logits = trace.activations.last().unwrap();
    let p = softmax(logits).expect("logits finite");

    // delta at the output layer: p - onehot(y)
    let mut delta: Vec<f64> = p;
    delta[ex.y] -= 1.0;

    let mut grad = vec![0.0; spec.param_count()];
    let n_layers = spec.n_layers();
    for l in (0..n_layers).rev() {
        let in_d = spec.layer_dims[l];
        let out_d = spec.layer_dims[l + 1];
        let off = spec.layer_offset(l);
        let prev = &trace.activations[l];

        for o in 0..out_d {
            let d = delta[o];
            let row = &mut grad[off + o * in_d..off + (o + 1) * in_d];
            for (g, a) in row.iter_mut().zip(prev) {
                *g += d * a;
            }
            grad[off + in_d * out_d + o] += d;
        }

        if l > 0 {
            let p_all = params.as_slice();
            let weights = &p_all[off..off + in_d * out_d];
            let mut prev_delta = vec![0.0; in_d];
            for o in 0..out_d {
                let d = delta[o];
                let row = &weights[o * in_d..(o + 1) * in_d];
                for (pd, w) in prev_delta.iter_mut().zip(row) {
                    *pd += d * w;
                }
            }
            // activation derivative in terms of the stored post-activation
            match spec.activation {
                Activation::Tanh => {
                    for (pd, a) in prev_delta.iter_mut().zip(prev) {
                        *pd *= 1.0 - a * a;
                    }
                }
                Activation::Relu => {
                    for (pd, a) in prev_delta.iter_mut().zip(prev) {
                        if *a <= 0.0 {
                            *pd = 0.0;
                        }
                    }
                }
            }
            delta = prev_delta;
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    /// Classical momentum with coefficient 0.9.
    SgdMomentum,
}

const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                self.batch_size, dataset_len
            )));
        }
        Ok(())
    }
}

/// Train `model` on `examples` with mini-batch SGD. Deterministic given
/// `cfg.seed`. Returns the trained model plus the per-epoch mean loss.
pub fn train(
    model: &TaskModel,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(TaskModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Empty("train requires a nonempty dataset"));
    }
    cfg.validate(examples.len())?;
    let mut current = model.clone();
    let mut rng = Rng::new(cfg.seed);
    let mut velocity = vec![0.0; current.spec.param_count()];
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss = batch_loss(&current, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let grad = backward(&current, &batch)?;
            let p = current.params.as_slice();
            let g = grad.as_slice();
            let mut next = Vec::with_capacity(p.len());
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (pi, gi) in p.iter().zip(g) {
                        next.push(pi - cfg.learning_rate * gi);
                    }
                }
                Optimizer::SgdMomentum => {
                    for ((pi, gi), v) in p.iter().zip(g).zip(velocity.iter_mut()) {
                        *v = MOMENTUM * *v - cfg.learning_rate * gi;
                        next.push(pi + *v);
                    }
                }
            }
            current.params = ParamVec::new(next).map_err(|_| Error::Diverged {
                epoch,
                loss: f64::INFINITY,
            })?;
        }
        trajectory.push(epoch_loss / examples.len() as f64);
    }
    Ok((current, trajectory))
}

/// Top-1 accuracy of a parameter vector over examples, in [0, 1].
pub fn accuracy(spec: &MlpSpec, params: &ParamVec, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("accuracy requires a nonempty dataset"));
    }
    let hits = par::map_slice(examples, |ex| {
        let logits = forward(spec, params, &ex.x).expect("dims validated");
        (argmax(&logits) == ex.y) as u32
    });
    Ok(hits.iter().sum::<u32>() as f64 / examples.len() as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ── Checkpoint format ────────────────────────────────────────────────

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Versioned on-disk form of a [`TaskModel`]. Key order is fixed and floats
/// serialize as shortest round-trip decimals, so checkpoints are diffable.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: MlpSpec,
    pub origin: Origin,
    pub task_id: usize,
    pub params: Vec<f64>,
}

pub fn save_checkpoint(path: &std::path::Path, model: &TaskModel) -> Result<()> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: model.spec.clone(),
        origin: model.origin,
        task_id: model.task_id,
        params: model.params.as_slice().to_vec(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<TaskModel> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format_version {}",
            ck.format_version
        )));
    }
    TaskModel::new(ck.spec, ParamVec::new(ck.params)?, ck.origin, ck.task_id)
}

/// Convenience: examples of a dataset split.
pub fn split_examples(ds: &TaskDataset, train: bool) -> Vec<Example> {
    let source = if train { &ds.train } else { &ds.test };
    source.clone()
}
