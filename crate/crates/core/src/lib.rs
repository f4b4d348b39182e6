//! Spike-driven transformer: LIF dynamics, spike-driven self-attention,
//! the membrane-shortcut architecture, surrogate-gradient training and a
//! firing-rate based energy profiler.

pub mod error;
pub mod model;
pub mod neuron;
pub mod profiler;
pub mod sdsa;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use neuron::{heaviside, lif_backward, lif_forward, surrogate_grad, Firing, LifParams};
pub use sdsa::{sdsa_addition_count, sdsa_per_channel, sdsa_v1, sdsa_v2, vsa_reference, AttentionInputs, SdsaForm};
pub use tensor::{MembraneTensor, SpikeTensor};
pub use model::{build_model, Model, ModelConfig};
