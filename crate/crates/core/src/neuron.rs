//! Leaky integrate-and-fire layer.
//!
//! Forward dynamics per element, with `H[0] = 0`:
//!
//! ```text
//! U[t] = H[t-1] + X[t]
//! S[t] = Hea(U[t] - u_th)
//! H[t] = v_reset * S[t] + (beta * U[t]) * (1 - S[t])
//! ```
//!
//! The backward pass replaces `Hea'` with a rectangular surrogate and treats
//! the gate `S[t]` inside the `H` update as a constant.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor::{MembraneTensor, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    /// Firing threshold.
    pub u_th: f64,
    /// Membrane decay factor, strictly inside (0, 1).
    pub beta: f64,
    /// Potential written back after a spike.
    pub v_reset: f64,
    /// Half-width of the rectangular surrogate derivative.
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { u_th: 1.0, beta: 0.5, v_reset: 0.0, surrogate_width: 0.5 }
    }
}

impl LifParams {
    pub fn new(u_th: f64, beta: f64, v_reset: f64, surrogate_width: f64) -> Result<Self> {
        let params = Self { u_th, beta, v_reset, surrogate_width };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.u_th, self.beta, self.v_reset, self.surrogate_width];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite LIF parameter in {self:?}")));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParam(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.u_th <= self.v_reset {
            return Err(Error::InvalidParam(format!(
                "threshold {} must exceed reset potential {}",
                self.u_th, self.v_reset
            )));
        }
        if self.surrogate_width <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "surrogate width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Heaviside step: 1 iff `x >= 0`.
pub fn heaviside(x: f64) -> Result<u8> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("heaviside input {x}")));
    }
    Ok(u8::from(x >= 0.0))
}

/// Rectangular surrogate for `Hea'`: `1 / (2 * width)` on `|x| <= width`, else 0.
pub fn surrogate_grad(x: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::InvalidParam(format!("surrogate width must be positive, got {width}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("surrogate input {x}")));
    }
    Ok(window(x, width))
}

/// Integral of the rectangular surrogate: a clamped ramp from 0 to 1 across `[-width, width]`.
pub fn surrogate_integral(x: f64, width: f64) -> f64 {
    ((x + width) / (2.0 * width)).clamp(0.0, 1.0)
}

#[inline]
pub(crate) fn window(x: f64, width: f64) -> f64 {
    if x.abs() <= width {
        1.0 / (2.0 * width)
    } else {
        0.0
    }
}

/// How a neuron turns `U - u_th` into an output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Firing {
    /// Binary Heaviside spikes.
    #[default]
    Hard,
    /// Surrogate integral (piecewise-linear ramp). Differentiable almost everywhere,
    /// used to check gradients against finite differences.
    Smooth,
}

impl Firing {
    #[inline]
    pub fn fire(self, x: f64, width: f64) -> f64 {
        match self {
            Firing::Hard => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Firing::Smooth => surrogate_integral(x, width),
        }
    }
}

/// Full time-major record of one LIF run over a `[T, M]` input.
#[derive(Clone, Debug)]
pub(crate) struct LifRun {
    pub membrane: Array2<f64>,
    pub spikes: Array2<f64>,
    pub state: Array2<f64>,
}

/// Runs the dynamics over axis 0. When `gates` is given, the `H` update uses those
/// values in place of `S[t]` (used to freeze the temporal gate in finite-difference checks).
pub(crate) fn run(
    x: ArrayView2<'_, f64>,
    p: &LifParams,
    firing: Firing,
    gates: Option<ArrayView2<'_, f64>>,
) -> LifRun {
    let (steps, width) = x.dim();
    let mut membrane = Array2::zeros((steps, width));
    let mut spikes = Array2::zeros((steps, width));
    let mut state = Array2::zeros((steps, width));
    let mut h = ndarray::Array1::<f64>::zeros(width);
    for t in 0..steps {
        let mut u_row = membrane.row_mut(t);
        Zip::from(&mut u_row).and(&h).and(x.row(t)).for_each(|u, &h, &x| *u = h + x);
        let mut s_row = spikes.row_mut(t);
        Zip::from(&mut s_row)
            .and(&u_row)
            .for_each(|s, &u| *s = firing.fire(u - p.u_th, p.surrogate_width));
        match gates {
            Some(g) => Zip::from(&mut h).and(&u_row).and(g.row(t)).for_each(|h, &u, &s| {
                *h = p.v_reset * s + (p.beta * u) * (1.0 - s);
            }),
            None => Zip::from(&mut h).and(&u_row).and(&s_row).for_each(|h, &u, &s| {
                *h = p.v_reset * s + (p.beta * u) * (1.0 - s);
            }),
        }
        state.row_mut(t).assign(&h);
    }
    LifRun { membrane, spikes, state }
}

/// Gradient w.r.t. the input `X` given `dL/dS` for every step and the saved membrane.
pub(crate) fn backprop(
    upstream: ArrayView2<'_, f64>,
    membrane: ArrayView2<'_, f64>,
    p: &LifParams,
    firing: Firing,
) -> Array2<f64> {
    let (steps, width) = membrane.dim();
    let mut grad = Array2::zeros((steps, width));
    // dL/dH[t], flowing back from step t + 1.
    let mut carry = ndarray::Array1::<f64>::zeros(width);
    for t in (0..steps).rev() {
        let mut g_row = grad.row_mut(t);
        Zip::from(&mut g_row)
            .and(&mut carry)
            .and(upstream.row(t))
            .and(membrane.row(t))
            .for_each(|g, c, &ds, &u| {
                let x = u - p.u_th;
                let s = firing.fire(x, p.surrogate_width);
                let du = ds * window(x, p.surrogate_width) + *c * p.beta * (1.0 - s);
                *g = du;
                *c = du;
            });
    }
    grad
}

fn flat(view: ArrayView3<'_, f64>) -> ArrayView2<'_, f64> {
    let (t, n, d) = view.dim();
    view.into_shape_with_order((t, n * d)).expect("standard layout")
}

fn to_3d(a: Array2<f64>, dims: (usize, usize, usize)) -> Array3<f64> {
    a.into_shape_with_order(dims).expect("element count preserved")
}

/// Everything a forward pass produces: spikes, membrane `U[t]` and state `H[t]` for all steps.
#[derive(Clone, Debug)]
pub struct LifRecord {
    pub spikes: SpikeTensor,
    pub membrane: MembraneTensor,
    pub state: Array3<f64>,
}

impl LifRecord {
    /// `H[T]`, shape `[N, D]`.
    pub fn final_state(&self) -> Array2<f64> {
        let last = self.state.len_of(Axis(0)) - 1;
        self.state.index_axis(Axis(0), last).to_owned()
    }
}

pub fn lif_forward_record(x: &MembraneTensor, p: &LifParams) -> Result<LifRecord> {
    p.validate()?;
    let dims = x.dims();
    if dims.0 == 0 {
        return Err(Error::Empty("LIF input has no timesteps".into()));
    }
    let out = run(flat(x.view()), p, Firing::Hard, None);
    if out.membrane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LIF membrane".into()));
    }
    let bits = to_3d(out.spikes, dims).mapv(|s| s as u8);
    Ok(LifRecord {
        spikes: SpikeTensor::from_bits_unchecked(bits),
        membrane: MembraneTensor::new(to_3d(out.membrane, dims))?,
        state: to_3d(out.state, dims),
    })
}

/// Spikes and final state `H[T]` for a `[T, N, D]` input. State starts at zero.
pub fn lif_forward(x: &MembraneTensor, p: &LifParams) -> Result<(SpikeTensor, Array2<f64>)> {
    let record = lif_forward_record(x, p)?;
    let last = record.final_state();
    Ok((record.spikes, last))
}

/// Same as [`lif_forward`] for inputs given one `[N, D]` step at a time.
pub fn lif_forward_steps(steps: &[Array2<f64>], p: &LifParams) -> Result<(SpikeTensor, Array2<f64>)> {
    let first = steps.first().ok_or_else(|| Error::Empty("no LIF input steps".into()))?;
    let (n, d) = first.dim();
    let mut data = Array3::zeros((steps.len(), n, d));
    for (t, step) in steps.iter().enumerate() {
        if step.dim() != (n, d) {
            return Err(Error::Shape(format!(
                "step {t} has shape {:?}, expected {:?}",
                step.dim(),
                (n, d)
            )));
        }
        data.index_axis_mut(Axis(0), t).assign(step);
    }
    lif_forward(&MembraneTensor::new(data)?, p)
}

/// Surrogate-gradient backward of [`lif_forward`].
pub fn lif_backward(
    upstream: ArrayView3<'_, f64>,
    saved: &MembraneTensor,
    p: &LifParams,
) -> Result<Array3<f64>> {
    backward_with(upstream, saved.view(), p, Firing::Hard)
}

/// Forward of the smoothed relaxation: `Hea` replaced by the surrogate integral.
/// Returns `(S, U)`. With `frozen_gates`, the `H` update uses those values as constants.
pub fn lif_forward_smooth(
    x: ArrayView3<'_, f64>,
    p: &LifParams,
    frozen_gates: Option<ArrayView3<'_, f64>>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    p.validate()?;
    let dims = x.dim();
    if let Some(g) = &frozen_gates {
        if g.dim() != dims {
            return Err(Error::Shape(format!("gates {:?} vs input {:?}", g.dim(), dims)));
        }
    }
    let out = run(flat(x), p, Firing::Smooth, frozen_gates.map(flat));
    Ok((to_3d(out.spikes, dims), to_3d(out.membrane, dims)))
}

/// Backward of [`lif_forward_smooth`] with the gate detached in the temporal path.
pub fn lif_backward_smooth(
    upstream: ArrayView3<'_, f64>,
    saved_membrane: ArrayView3<'_, f64>,
    p: &LifParams,
) -> Result<Array3<f64>> {
    backward_with(upstream, saved_membrane, p, Firing::Smooth)
}

fn backward_with(
    upstream: ArrayView3<'_, f64>,
    saved: ArrayView3<'_, f64>,
    p: &LifParams,
    firing: Firing,
) -> Result<Array3<f64>> {
    p.validate()?;
    let dims = upstream.dim();
    if saved.dim().0 < dims.0 {
        return Err(Error::MissingState(format!(
            "membrane saved for {} steps, gradient has {}",
            saved.dim().0,
            dims.0
        )));
    }
    if saved.dim() != dims {
        return Err(Error::Shape(format!("upstream {:?} vs saved {:?}", dims, saved.dim())));
    }
    Ok(to_3d(backprop(flat(upstream), flat(saved), p, firing), dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_trace(xs: &[f64]) -> MembraneTensor {
        MembraneTensor::from_shape_vec((xs.len(), 1, 1), xs.to_vec()).unwrap()
    }

    #[test]
    fn heaviside_examples() {
        assert_eq!(heaviside(-0.1).unwrap(), 0);
        assert_eq!(heaviside(0.0).unwrap(), 1);
        assert_eq!(heaviside(2.5).unwrap(), 1);
        assert!(heaviside(f64::NAN).is_err());
        assert!(heaviside(f64::INFINITY).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_grad(0.0, 0.5).unwrap(), 1.0);
        assert_eq!(surrogate_grad(0.6, 0.5).unwrap(), 0.0);
        assert_eq!(surrogate_grad(0.49, 0.5).unwrap(), 1.0);
        assert!(surrogate_grad(0.0, 0.0).is_err());
        assert!(surrogate_grad(0.0, -1.0).is_err());
    }

    #[test]
    fn zero_input_never_fires() {
        let x = MembraneTensor::zeros(4, 3, 5);
        let (s, h) = lif_forward(&x, &LifParams::default()).unwrap();
        assert_eq!(s.count_ones(), 0);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_trace_two_steps() {
        let p = LifParams::new(1.0, 0.5, 0.0, 0.5).unwrap();
        let rec = lif_forward_record(&scalar_trace(&[0.7, 0.7]), &p).unwrap();
        assert_eq!(rec.spikes.data().iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(rec.state[[0, 0, 0]], 0.35);
        assert!((rec.membrane.data()[[1, 0, 0]] - 1.05).abs() < 1e-12);
        assert_eq!(rec.state[[1, 0, 0]], 0.0);
    }

    #[test]
    fn threshold_equality_fires() {
        let (s, _) = lif_forward(&scalar_trace(&[1.0]), &LifParams::default()).unwrap();
        assert_eq!(s.data()[[0, 0, 0]], 1);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LifParams::new(1.0, 1.0, 0.0, 0.5).is_err());
        assert!(LifParams::new(1.0, 0.0, 0.0, 0.5).is_err());
        assert!(LifParams::new(0.0, 0.5, 0.0, 0.5).is_err());
        assert!(LifParams::new(1.0, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_shape_mismatch_rejected() {
        let steps = vec![Array2::zeros((2, 2)), Array2::zeros((2, 3))];
        assert!(matches!(lif_forward_steps(&steps, &LifParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let x = scalar_trace(&[0.9, 0.3, 1.2]);
        let rec = lif_forward_record(&x, &LifParams::default()).unwrap();
        let g = lif_backward(Array3::zeros((3, 1, 1)).view(), &rec.membrane, &LifParams::default())
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outside_window_blocks_spatial_path() {
        // U - u_th = -0.8 lies outside the half-width 0.5 window.
        let p = LifParams::default();
        let x = scalar_trace(&[0.2]);
        let rec = lif_forward_record(&x, &p).unwrap();
        let g = lif_backward(array![[[1.0]]].view(), &rec.membrane, &p).unwrap();
        assert_eq!(g[[0, 0, 0]], 0.0);
    }

    #[test]
    fn backward_requires_all_saved_steps() {
        let p = LifParams::default();
        let rec = lif_forward_record(&scalar_trace(&[0.5]), &p).unwrap();
        let up = Array3::zeros((2, 1, 1));
        assert!(matches!(lif_backward(up.view(), &rec.membrane, &p), Err(Error::MissingState(_))));
    }

    #[test]
    fn smooth_two_step_matches_central_differences() {
        // Loss = sum_t c_t * S[t]; gate frozen at the base trajectory.
        let p = LifParams::default();
        let x0 = array![[[0.8]], [[0.45]]];
        let c = array![[[0.7]], [[-1.3]]];
        let loss = |x: &Array3<f64>, gates: ArrayView3<'_, f64>| {
            let (s, _) = lif_forward_smooth(x.view(), &p, Some(gates)).unwrap();
            (&s * &c).sum()
        };
        let (s0, u0) = lif_forward_smooth(x0.view(), &p, None).unwrap();
        let analytic = lif_backward_smooth(c.view(), u0.view(), &p).unwrap();
        let h = 1e-4;
        for t in 0..2 {
            let mut xp = x0.clone();
            xp[[t, 0, 0]] += h;
            let mut xm = x0.clone();
            xm[[t, 0, 0]] -= h;
            let fd = (loss(&xp, s0.view()) - loss(&xm, s0.view())) / (2.0 * h);
            let a = analytic[[t, 0, 0]];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(1e-12), "t={t} analytic={a} fd={fd}");
        }
    }
}
