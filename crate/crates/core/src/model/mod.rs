//! Spike-driven transformer assembly: patch splitting with a membrane-level
//! position embedding, `L` encoder blocks with membrane shortcuts, and a
//! linear classification head over globally pooled spikes.

pub mod checkpoint;
mod config;
mod forward;
pub(crate) mod layers;
mod probe;

use indexmap::IndexMap;
use ndarray::{Array, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{default_stages, ModelConfig, CONFIG_FIELDS};
pub use forward::{repeat_over_time, Forward, ForwardCache, Gradients, PassOptions, Shortcut};
pub use probe::{OperatorInput, Probe, ResidualAdd, Signal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Learnable parameter.
    Weight,
    /// Running statistic, updated by forward passes in training mode.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub role: TensorRole,
    pub value: ArrayD<f64>,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Handle(usize);

/// Flat, ordered list of every tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, role: TensorRole, value: ArrayD<f64>) -> Handle {
        self.tensors.push(NamedTensor { name, role, value });
        Handle(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Tensor viewed as `[dim0, rest]`.
    pub(crate) fn mat(&self, h: Handle) -> ArrayView2<'_, f64> {
        let v = &self.tensors[h.0].value;
        let rows = v.shape()[0];
        let cols = v.len() / rows.max(1);
        v.view().into_shape_with_order((rows, cols)).expect("standard layout")
    }

    pub(crate) fn vec(&self, h: Handle) -> ArrayView1<'_, f64> {
        let v = &self.tensors[h.0].value;
        v.view().into_shape_with_order(v.len()).expect("standard layout")
    }

    pub(crate) fn value_mut(&mut self, h: Handle) -> &mut ArrayD<f64> {
        &mut self.tensors[h.0].value
    }
}

/// Convolution (no bias) followed by normalization.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvNorm {
    pub conv: Handle,
    pub norm: Norm,
}

/// Linear map with bias followed by normalization.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearNorm {
    pub weight: Handle,
    pub bias: Handle,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: Handle,
    pub beta: Handle,
    pub mean: Handle,
    pub var: Handle,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub q: LinearNorm,
    pub k: LinearNorm,
    pub v: LinearNorm,
    pub proj: LinearNorm,
    pub fc1: LinearNorm,
    pub fc2: LinearNorm,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) stages: [ConvNorm; 4],
    pub(crate) rpe: ConvNorm,
    pub(crate) blocks: Vec<Block>,
    pub(crate) head_weight: Handle,
    pub(crate) head_bias: Handle,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Array::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let ones = ArrayD::from_elem(IxDyn(&[c]), 1.0);
        let zeros = ArrayD::zeros(IxDyn(&[c]));
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), TensorRole::Weight, ones.clone()),
            beta: self.store.add(format!("{name}.beta"), TensorRole::Weight, zeros.clone()),
            mean: self.store.add(format!("{name}.running_mean"), TensorRole::Buffer, zeros),
            var: self.store.add(format!("{name}.running_var"), TensorRole::Buffer, ones),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvNorm {
        let w = self.uniform(&[c_out, c_in, 3, 3], c_in * 9);
        let conv = self.store.add(format!("{name}.weight"), TensorRole::Weight, w);
        let norm = self.norm(&format!("{name}.bn"), c_out);
        ConvNorm { conv, norm }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> (Handle, Handle) {
        let w = self.uniform(&[d_out, d_in], d_in);
        let weight = self.store.add(format!("{name}.weight"), TensorRole::Weight, w);
        let bias =
            self.store.add(format!("{name}.bias"), TensorRole::Weight, ArrayD::zeros(IxDyn(&[d_out])));
        (weight, bias)
    }

    fn linear_norm(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearNorm {
        let (weight, bias) = self.linear(name, d_in, d_out);
        let norm = self.norm(&format!("{name}.bn"), d_out);
        LinearNorm { weight, bias, norm }
    }
}

/// Builds a model with deterministic weights for `seed`.
///
/// Convolution and linear weights are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
/// biases and normalization shifts start at zero, normalization scales at one.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let st = config.sps_stage_channels;
    let ins = [config.in_channels, st[0], st[1], st[2]];
    let stages = [0, 1, 2, 3].map(|k| b.conv(&format!("sps.conv{}", k + 1), ins[k], st[k]));
    let rpe = b.conv("sps.rpe", config.channels, config.channels);
    let d = config.channels;
    let hidden = config.hidden();
    let blocks = (0..config.blocks)
        .map(|l| Block {
            q: b.linear_norm(&format!("blocks.{l}.attn.q"), d, d),
            k: b.linear_norm(&format!("blocks.{l}.attn.k"), d, d),
            v: b.linear_norm(&format!("blocks.{l}.attn.v"), d, d),
            proj: b.linear_norm(&format!("blocks.{l}.attn.proj"), d, d),
            fc1: b.linear_norm(&format!("blocks.{l}.mlp.fc1"), d, hidden),
            fc2: b.linear_norm(&format!("blocks.{l}.mlp.fc2"), hidden, d),
        })
        .collect();
    let (head_weight, head_bias) = b.linear("head", d, config.num_classes);
    Ok(Model {
        config: config.clone(),
        store: b.store,
        stages,
        rpe,
        blocks,
        head_weight,
        head_bias,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the number of timesteps; no parameter depends on it.
    pub fn set_timesteps(&mut self, timesteps: usize) -> Result<()> {
        if timesteps == 0 {
            return Err(Error::InvalidParam("timesteps must be positive".into()));
        }
        self.config.timesteps = timesteps;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Learnable scalars: weights, biases and normalization affine parameters.
    pub fn count_params(&self) -> usize {
        self.store
            .tensors()
            .iter()
            .filter(|t| t.role == TensorRole::Weight)
            .map(|t| t.value.len())
            .sum()
    }

    /// Learnable scalars grouped by module (`sps`, `blocks.<l>.attn`, `blocks.<l>.mlp`, `head`).
    pub fn param_breakdown(&self) -> IndexMap<String, usize> {
        let mut out = IndexMap::new();
        for t in self.store.tensors().iter().filter(|t| t.role == TensorRole::Weight) {
            let parts: Vec<&str> = t.name.split('.').collect();
            let module = match parts[0] {
                "blocks" => format!("blocks.{}.{}", parts[1], parts[2]),
                other => other.to_string(),
            };
            *out.entry(module).or_insert(0) += t.value.len();
        }
        out
    }

    /// Copies tensor values from `other`, which must have the same layout.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.store.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors supplied, model has {}",
                tensors.len(),
                self.store.tensors.len()
            )));
        }
        for (dst, src) in self.store.tensors.iter_mut().zip(tensors) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }

    /// Rounds every tensor to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.store.tensors.iter_mut() {
            t.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}
