//! Device / aggregator partition of a model at a block boundary and the
//! split forward/backward exchange around the cut layer.

mod checkpoint;
mod step;

pub use checkpoint::{load_params, read_checkpoint, save_params, write_checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use step::{evaluate, split_gradients, train_step, Link, SplitGrads, StepStats};

use crate::error::{Error, Result};
use crate::nn::{backward, forward, sgd_step, ActivationTrace, DType, Gradients, ModelConfig, Parameters, Real, Tensor};

/// Cut placed right after conv block `block` (1-based), i.e. after its
/// pooling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CutPoint(usize);

impl CutPoint {
    pub fn new(block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::config("cut block index is 1-based"));
        }
        Ok(Self(block))
    }

    pub fn block(self) -> usize {
        self.0
    }

    /// Number of layers that stay on the device.
    pub fn layer_index(self, cfg: &ModelConfig) -> Result<usize> {
        let bounds = cfg.block_boundaries();
        bounds.get(self.0 - 1).copied().ok_or_else(|| {
            Error::config(format!(
                "cut after block {} but the model has {} blocks",
                self.0,
                bounds.len()
            ))
        })
    }
}

impl std::fmt::Display for CutPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-Conv", self.0)
    }
}

/// One side of the split: its layer fragment and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Half<T> {
    pub cfg: ModelConfig,
    pub params: Parameters<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair<T> {
    pub device: Half<T>,
    pub aggregator: Half<T>,
    pub cut: CutPoint,
}

/// Which side of the channel a smashed tensor was observed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PreChannel,
    PostChannel,
}

/// Cut-layer activations, the forward payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedData<T> {
    pub tensor: Tensor<T>,
    pub stage: Stage,
}

impl<T: Real> SmashedData<T> {
    pub fn byte_size(&self) -> u64 {
        (self.tensor.len() * T::DTYPE.size()) as u64
    }
}

/// Gradient of the loss at the cut layer, the backward payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedGrad<T> {
    pub tensor: Tensor<T>,
}

/// Partitions `cfg`/`params` at `cut`. The device keeps every layer up to
/// and including the pooling layer of block `cut`.
pub fn split_at<T: Real>(cfg: &ModelConfig, params: &Parameters<T>, cut: CutPoint) -> Result<SplitPair<T>> {
    cfg.validate()?;
    let at = cut.layer_index(cfg)?;
    if params.num_layers() != cfg.layers.len() {
        return Err(Error::config("parameters do not match the model"));
    }
    let shapes = cfg.shapes()?;
    let (dp, ap) = params.split_at(at);
    Ok(SplitPair {
        device: Half {
            cfg: ModelConfig {
                layers: cfg.layers[..at].to_vec(),
                input_shape: cfg.input_shape.clone(),
                num_classes: cfg.num_classes,
            },
            params: dp,
        },
        aggregator: Half {
            cfg: ModelConfig {
                layers: cfg.layers[at..].to_vec(),
                input_shape: shapes[at].clone(),
                num_classes: cfg.num_classes,
            },
            params: ap,
        },
        cut,
    })
}

impl<T: Real> SplitPair<T> {
    /// Seeded initialization of the monolithic model, then split.
    pub fn init(cfg: &ModelConfig, cut: CutPoint, seed: u64) -> Result<Self> {
        split_at(cfg, &Parameters::init(cfg, seed)?, cut)
    }

    /// Reassembles the monolithic model.
    pub fn join(&self) -> (ModelConfig, Parameters<T>) {
        let mut layers = self.device.cfg.layers.clone();
        layers.extend(self.aggregator.cfg.layers.iter().copied());
        (
            ModelConfig {
                layers,
                input_shape: self.device.cfg.input_shape.clone(),
                num_classes: self.aggregator.cfg.num_classes,
            },
            self.device.params.concat(&self.aggregator.params),
        )
    }

    /// Per-item shape of the smashed data.
    pub fn smashed_shape(&self) -> &[usize] {
        &self.aggregator.cfg.input_shape
    }

    pub fn checksum(&self) -> (u32, u32) {
        (self.device.params.checksum(), self.aggregator.params.checksum())
    }

    /// Plain SGD on both halves.
    pub fn sgd(&mut self, device: &Gradients<T>, aggregator: &Gradients<T>, lr: f64) -> Result<()> {
        sgd_step(&mut self.aggregator.params, aggregator, lr)?;
        sgd_step(&mut self.device.params, device, lr)
    }
}

impl<T: Real> Half<T> {
    /// Device half of the seeded initialization of `cfg`.
    pub fn init_device(cfg: &ModelConfig, cut: CutPoint, seed: u64) -> Result<Self> {
        Ok(SplitPair::init(cfg, cut, seed)?.device)
    }

    /// Aggregator half of the seeded initialization of `cfg`.
    pub fn init_aggregator(cfg: &ModelConfig, cut: CutPoint, seed: u64) -> Result<Self> {
        Ok(SplitPair::init(cfg, cut, seed)?.aggregator)
    }

    /// Device side: raw batch to smashed data.
    pub fn device_forward(&self, batch: &Tensor<T>) -> Result<(SmashedData<T>, ActivationTrace<T>)> {
        let trace = forward(&self.params, &self.cfg, batch)?;
        let smashed = SmashedData {
            tensor: trace.output().clone(),
            stage: Stage::PreChannel,
        };
        Ok((smashed, trace))
    }

    /// Aggregator side: received smashed data to logits.
    pub fn aggregator_forward(&self, received: &SmashedData<T>) -> Result<(Tensor<T>, ActivationTrace<T>)> {
        let shape = received.tensor.shape();
        let want = &self.cfg.input_shape;
        if shape.len() != want.len() + 1 || shape[1..] != want[..] || shape[0] == 0 {
            return Err(Error::protocol(
                0,
                format!("smashed data of shape {shape:?} does not match the cut (per-item {want:?})"),
            ));
        }
        let trace = forward(&self.params, &self.cfg, &received.tensor)?;
        Ok((trace.output().clone(), trace))
    }

    pub fn aggregator_backward(&self, trace: &ActivationTrace<T>, grad_logits: &Tensor<T>) -> Result<(Gradients<T>, SmashedGrad<T>)> {
        let (grads, input_grad) = backward(&self.params, &self.cfg, trace, grad_logits)?;
        Ok((grads, SmashedGrad { tensor: input_grad }))
    }

    pub fn device_backward(&self, trace: &ActivationTrace<T>, received: &SmashedGrad<T>) -> Result<Gradients<T>> {
        if received.tensor.shape() != trace.output().shape() {
            return Err(Error::protocol(
                0,
                format!(
                    "smashed gradient {:?} does not match forward smashed data {:?}",
                    received.tensor.shape(),
                    trace.output().shape()
                ),
            ));
        }
        let (grads, _) = backward(&self.params, &self.cfg, trace, &received.tensor)?;
        Ok(grads)
    }
}

pub fn device_forward<T: Real>(pair: &SplitPair<T>, batch: &Tensor<T>) -> Result<(SmashedData<T>, ActivationTrace<T>)> {
    pair.device.device_forward(batch)
}

pub fn aggregator_forward<T: Real>(
    pair: &SplitPair<T>,
    received: &SmashedData<T>,
) -> Result<(Tensor<T>, ActivationTrace<T>)> {
    pair.aggregator.aggregator_forward(received)
}

pub fn aggregator_backward<T: Real>(
    pair: &SplitPair<T>,
    trace: &ActivationTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Gradients<T>, SmashedGrad<T>)> {
    pair.aggregator.aggregator_backward(trace, grad_logits)
}

pub fn device_backward<T: Real>(
    pair: &SplitPair<T>,
    trace: &ActivationTrace<T>,
    received: &SmashedGrad<T>,
) -> Result<Gradients<T>> {
    pair.device.device_backward(trace, received)
}

/// Exact size of one forward transmission of smashed data.
pub fn smashed_payload_bytes(cfg: &ModelConfig, cut: CutPoint, batch: usize, dtype: DType) -> Result<u64> {
    let at = cut.layer_index(cfg)?;
    let per_item: usize = cfg.shapes()?[at].iter().product();
    Ok((batch * per_item * dtype.size()) as u64)
}
