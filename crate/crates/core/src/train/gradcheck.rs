use ndarray::{ArrayView4, ArrayView5};

use super::cross_entropy;
use crate::error::Result;
use crate::model::{repeat_over_time, Model, PassOptions, TensorRole};
use crate::neuron::Firing;

/// Whole-vector cosine similarity required between analytic and numeric gradients.
pub const MIN_COSINE: f64 = 0.99;

/// Default central-difference step.
pub const STEP: f64 = 1e-6;
/// Groups whose gradients are both below this norm are dead paths and pass trivially.
/// Finite-difference round-off at the default step is around 1e-10 per entry.
const DEAD: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation moved a membrane, gate sum or pooling choice across a kink.
    pub excluded: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub cosine: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed) && self.cosine >= MIN_COSINE
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.groups.iter().map(|g| g.excluded).sum()
    }
}

fn smooth_options() -> PassOptions {
    PassOptions { training: true, firing: Firing::Smooth, ..PassOptions::inference() }
}

/// Compares backpropagated gradients of the smoothed relaxation with central differences.
///
/// The smoothed pass replaces the threshold by the integral of the surrogate window.
/// Perturbed passes reuse the base pass's reset gates, matching the backward pass,
/// which treats the reset as constant. Entries whose perturbation changes any
/// piecewise regime are excluded rather than compared.
pub fn grad_check(model: &Model, images: ArrayView4<'_, f64>, labels: &[usize], tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with_step(model, images, labels, tolerance, STEP)
}

pub fn grad_check_with_step(
    model: &Model,
    images: ArrayView4<'_, f64>,
    labels: &[usize],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let t = model.config().timesteps;
    let x = repeat_over_time(images, t);
    let base = model.forward(
        x.view(),
        PassOptions { keep_cache: true, record_gates: true, track_kinks: true, ..smooth_options() },
        None,
    )?;
    let (_, dlogits) = cross_entropy(base.logits.view(), labels);
    let grads = model.backward(base.cache.as_ref().expect("cache requested"), dlogits.view())?;

    let mut probe_model = model.clone();
    let loss_at = |m: &Model, x: ArrayView5<'_, f64>| -> Result<(f64, u64)> {
        let opts = PassOptions { track_kinks: true, ..smooth_options() };
        let f = m.forward_with_gates(x, opts, &base.gates)?;
        Ok((cross_entropy(f.logits.view(), labels).0, f.kink_signature))
    };

    let mut groups = Vec::new();
    let (mut dot, mut aa, mut nn) = (0.0, 0.0, 0.0);
    for (ti, tensor) in model.store().tensors().iter().enumerate() {
        if tensor.role != TensorRole::Weight {
            continue;
        }
        let analytic = &grads.values[ti];
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut checked, mut excluded) = (0, 0);
        for (flat, &a) in analytic.iter().enumerate() {
            let original = tensor.value.as_slice().expect("standard layout")[flat];
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                probe_model.store_mut().tensors_mut()[ti].value.as_slice_mut().expect("standard layout")[flat] =
                    original + delta;
                loss_at(&probe_model, x.view())
            };
            let (lp, sp) = eval(step)?;
            let (lm, sm) = eval(-step)?;
            probe_model.store_mut().tensors_mut()[ti].value.as_slice_mut().expect("standard layout")[flat] = original;
            if sp != base.kink_signature || sm != base.kink_signature {
                excluded += 1;
                continue;
            }
            let n = (lp - lm) / (2.0 * step);
            checked += 1;
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            dot += a * n;
            aa += a * a;
            nn += n * n;
        }
        let (an, nm) = (a2.sqrt(), n2.sqrt());
        let rel_error = if an.max(nm) < DEAD { 0.0 } else { diff2.sqrt() / an.max(nm) };
        groups.push(GroupCheck {
            name: tensor.name.clone(),
            checked,
            excluded,
            analytic_norm: an,
            numeric_norm: nm,
            rel_error,
            passed: rel_error <= tolerance,
        });
    }
    let cosine = if aa.sqrt().max(nn.sqrt()) < DEAD { 1.0 } else { dot / (aa.sqrt() * nn.sqrt()).max(f64::MIN_POSITIVE) };
    Ok(GradCheckReport { groups, cosine, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::train::{synth_dataset, DatasetKind, Geometry};

    #[test]
    fn tiny_model_passes() {
        let model = build_model(&ModelConfig::small(1, 8, 4), 11).unwrap();
        let data = synth_dataset(DatasetKind::Stripes, 1, Geometry { channels: 3, height: 32, width: 32 }, 4).unwrap();
        let (images, labels) = data.batch(&[0]);
        let report = grad_check(&model, images.view(), &labels, 1e-2).unwrap();
        for g in &report.groups {
            eprintln!("{:32} n={:4} x={:3} |a|={:.3e} |n|={:.3e} rel={:.2e}", g.name, g.checked, g.excluded, g.analytic_norm, g.numeric_norm, g.rel_error);
        }
        eprintln!("cosine {}", report.cosine);
        assert!(report.passed());
    }

    #[test]
    fn window_crossings_are_excluded() {
        let model = build_model(&ModelConfig::small(1, 8, 4), 11).unwrap();
        let data = synth_dataset(DatasetKind::Stripes, 1, Geometry { channels: 3, height: 32, width: 32 }, 4).unwrap();
        let (images, labels) = data.batch(&[0]);
        // A step this large pushes many membranes across a window edge.
        let report = grad_check_with_step(&model, images.view(), &labels, 1e-2, 0.05).unwrap();
        assert!(report.excluded() > 0);
        let conv1 = &report.groups[0];
        assert_eq!(conv1.checked + conv1.excluded, 3 * 9);
    }
}
