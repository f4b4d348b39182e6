//! Forward-pass instrumentation.

use indexmap::IndexMap;
use ndarray::Array2;

/// What kind of value an operand of a residual addition carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Membrane,
    Spike,
}

#[derive(Clone, Debug)]
pub struct OperatorInput {
    pub site: String,
    pub binary: bool,
    pub max_value: f64,
}

#[derive(Clone, Debug)]
pub struct ResidualAdd {
    pub site: String,
    pub lhs: Signal,
    pub rhs: Signal,
}

/// Collects per-site firing rates, the inputs of every weighted operator and every
/// residual addition during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    /// Firing rate per timestep for each spike site, in forward order.
    pub rates: IndexMap<String, Vec<f64>>,
    /// Fraction of nonzero input pixels per timestep (first convolution's input).
    pub input_density: Vec<f64>,
    pub operator_inputs: Vec<OperatorInput>,
    pub residual_adds: Vec<ResidualAdd>,
    /// When set, `(V_S, SDSA output)` is kept for every block, rows ordered `(t, b, n)`.
    pub capture_attention: bool,
    pub attention: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Probe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capturing_attention() -> Self {
        Self { capture_attention: true, ..Self::default() }
    }

    /// Sites whose weighted operator saw a non-binary input.
    pub fn non_binary_inputs(&self) -> Vec<&OperatorInput> {
        self.operator_inputs.iter().filter(|o| !o.binary).collect()
    }

    /// Residual additions that combined two spike tensors.
    pub fn spike_level_shortcuts(&self) -> Vec<&ResidualAdd> {
        self.residual_adds
            .iter()
            .filter(|r| r.lhs == Signal::Spike || r.rhs == Signal::Spike)
            .collect()
    }

    /// Every weighted operator input was binary and every shortcut joined membranes.
    pub fn certifies_spike_driven(&self) -> bool {
        !self.operator_inputs.is_empty()
            && self.non_binary_inputs().is_empty()
            && self.spike_level_shortcuts().is_empty()
    }

    pub(crate) fn record_rate(&mut self, site: &str, per_step: Vec<f64>) {
        self.rates.insert(site.to_string(), per_step);
    }
}
