//! Spike-driven self-attention.
//!
//! All three forms reduce to channel-wise masks and column sums over the token axis:
//!
//! * V1: `SN(SUM_c(Q_S ⊗ K_S)) ⊗ V_S`
//! * V2: `Q_S ⊗ SN(SUM_c(K_S ⊗ V_S))`
//! * per-channel (one channel per head): gate `g_i = SN(K_i · V_i)`, output `Q_i * g_i`
//!
//! `SN` here is a stateless threshold at `u_th`. No scale factor is applied.
//! Heads slice the channel axis into `D / H` wide groups; since every gate is
//! computed per channel, the slicing never changes the numbers, only the layout
//! of the reported attention vectors.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};

use crate::error::{Error, Result};
use crate::neuron::{window, Firing, LifParams};
use crate::tensor::{MembraneTensor, SpikeTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SdsaForm {
    #[default]
    V1,
    V2,
    PerChannel,
}

impl SdsaForm {
    pub fn name(self) -> &'static str {
        match self {
            SdsaForm::V1 => "v1",
            SdsaForm::V2 => "v2",
            SdsaForm::PerChannel => "per_channel",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "v1" => Some(SdsaForm::V1),
            "v2" => Some(SdsaForm::V2),
            "per_channel" => Some(SdsaForm::PerChannel),
            _ => None,
        }
    }
}

/// Spike-form query, key and value for one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q_s: SpikeTensor,
    pub k_s: SpikeTensor,
    pub v_s: SpikeTensor,
    pub heads: usize,
}

impl AttentionInputs {
    pub fn new(q_s: SpikeTensor, k_s: SpikeTensor, v_s: SpikeTensor, heads: usize) -> Result<Self> {
        let dims = q_s.dims();
        if k_s.dims() != dims || v_s.dims() != dims {
            return Err(Error::Shape(format!(
                "Q_S {:?}, K_S {:?}, V_S {:?} must agree",
                dims,
                k_s.dims(),
                v_s.dims()
            )));
        }
        if heads == 0 || dims.2 % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide {} channels", dims.2)));
        }
        Ok(Self { q_s, k_s, v_s, heads })
    }

    /// Converts real `Q`, `K`, `V` projections into spikes with one LIF layer each.
    pub fn from_membranes(
        q: &MembraneTensor,
        k: &MembraneTensor,
        v: &MembraneTensor,
        heads: usize,
        lif: &LifParams,
    ) -> Result<Self> {
        let (q_s, _) = crate::neuron::lif_forward(q, lif)?;
        let (k_s, _) = crate::neuron::lif_forward(k, lif)?;
        let (v_s, _) = crate::neuron::lif_forward(v, lif)?;
        Self::new(q_s, k_s, v_s, heads)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.q_s.dims()
    }

    pub fn head_width(&self) -> usize {
        self.dims().2 / self.heads
    }
}

/// Arithmetic performed by one SDSA evaluation. Masks (AND of two bits) and
/// threshold comparisons are tallied separately because they cost no energy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub additions: u64,
    pub multiplications: u64,
    pub masks: u64,
    pub comparisons: u64,
}

/// Output of an instrumented SDSA call.
#[derive(Clone, Debug)]
pub struct SdsaOutput {
    pub output: SpikeTensor,
    /// Binary attention vectors, shape `[T, H, D / H]`.
    pub attention: Array3<u8>,
    pub counts: OpCounts,
}

/// Event-driven core: accumulate `a ⊗ b` column sums, threshold them, and mask `target`.
fn masked_gate(
    a: ArrayView3<'_, u8>,
    b: ArrayView3<'_, u8>,
    target: ArrayView3<'_, u8>,
    u_th: f64,
    heads: usize,
) -> SdsaOutput {
    let (steps, tokens, channels) = a.dim();
    let mut counts = OpCounts::default();
    let mut gates = Array2::<u8>::zeros((steps, channels));
    let mut output = Array3::<u8>::zeros((steps, tokens, channels));
    for t in 0..steps {
        let mut sums = vec![0u32; channels];
        for n in 0..tokens {
            for d in 0..channels {
                counts.masks += 1;
                if a[[t, n, d]] & b[[t, n, d]] == 1 {
                    sums[d] += 1;
                    counts.additions += 1;
                }
            }
        }
        for d in 0..channels {
            counts.comparisons += 1;
            gates[[t, d]] = u8::from(f64::from(sums[d]) - u_th >= 0.0);
        }
        for n in 0..tokens {
            for d in 0..channels {
                counts.masks += 1;
                output[[t, n, d]] = gates[[t, d]] & target[[t, n, d]];
            }
        }
    }
    let attention = gates
        .into_shape_with_order((steps, heads, channels / heads))
        .expect("heads divide channels");
    SdsaOutput { output: SpikeTensor::from_bits_unchecked(output), attention, counts }
}

/// V1 with its attention vectors and operation counts.
pub fn sdsa_v1_counted(inputs: &AttentionInputs, lif: &LifParams) -> Result<SdsaOutput> {
    lif.validate()?;
    Ok(masked_gate(
        inputs.q_s.view(),
        inputs.k_s.view(),
        inputs.v_s.view(),
        lif.u_th,
        inputs.heads,
    ))
}

/// V2 with its attention vectors and operation counts.
pub fn sdsa_v2_counted(inputs: &AttentionInputs, lif: &LifParams) -> Result<SdsaOutput> {
    lif.validate()?;
    Ok(masked_gate(
        inputs.k_s.view(),
        inputs.v_s.view(),
        inputs.q_s.view(),
        lif.u_th,
        inputs.heads,
    ))
}

pub fn sdsa_v1(inputs: &AttentionInputs, lif: &LifParams) -> Result<SpikeTensor> {
    Ok(sdsa_v1_counted(inputs, lif)?.output)
}

pub fn sdsa_v2(inputs: &AttentionInputs, lif: &LifParams) -> Result<SpikeTensor> {
    Ok(sdsa_v2_counted(inputs, lif)?.output)
}

/// One channel per head: each channel's gate is the thresholded dot product of
/// its key and value columns, and masks the matching query column.
pub fn sdsa_per_channel(inputs: &AttentionInputs, lif: &LifParams) -> Result<SpikeTensor> {
    lif.validate()?;
    let (steps, tokens, channels) = inputs.dims();
    if inputs.heads != channels {
        return Err(Error::InvalidParam(format!(
            "per-channel attention needs heads == channels, got {} heads for {channels} channels",
            inputs.heads
        )));
    }
    let (q, k, v) = (inputs.q_s.view(), inputs.k_s.view(), inputs.v_s.view());
    let mut out = Array3::<u8>::zeros((steps, tokens, channels));
    for t in 0..steps {
        for i in 0..channels {
            let k_col = k.slice(s![t, .., i]);
            let v_col = v.slice(s![t, .., i]);
            let dot: u32 = k_col.iter().zip(v_col.iter()).map(|(&a, &b)| u32::from(a & b)).sum();
            let gate = u8::from(f64::from(dot) - lif.u_th >= 0.0);
            out.slice_mut(s![t, .., i]).assign(&q.slice(s![t, .., i]).mapv(|x| x & gate));
        }
    }
    Ok(SpikeTensor::from_bits_unchecked(out))
}

pub fn sdsa(form: SdsaForm, inputs: &AttentionInputs, lif: &LifParams) -> Result<SpikeTensor> {
    match form {
        SdsaForm::V1 => sdsa_v1(inputs, lif),
        SdsaForm::V2 => sdsa_v2(inputs, lif),
        SdsaForm::PerChannel => sdsa_per_channel(inputs, lif),
    }
}

/// Scalar additions spent in V1's column sums: the nonzero count of `Q_S ⊗ K_S`
/// over all timesteps and heads.
pub fn sdsa_addition_count(inputs: &AttentionInputs) -> u64 {
    inputs
        .q_s
        .data()
        .iter()
        .zip(inputs.k_s.data().iter())
        .filter(|(&q, &k)| q & k == 1)
        .count() as u64
}

/// Fraction of output elements on which V1 and V2 agree. The two forms are
/// not algebraically identical once the threshold sits inside the column sum.
pub fn form_agreement(inputs: &AttentionInputs, lif: &LifParams) -> Result<f64> {
    let a = sdsa_v1(inputs, lif)?;
    let b = sdsa_v2(inputs, lif)?;
    if a.is_empty() {
        return Err(Error::Empty("attention inputs".into()));
    }
    let same = a.data().iter().zip(b.data().iter()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Dense softmax attention, `softmax(Q Kᵀ · scale) V` per timestep and head.
/// `scale` defaults to `1 / sqrt(D / H)`.
pub fn vsa_reference(
    q: ArrayView3<'_, f64>,
    k: ArrayView3<'_, f64>,
    v: ArrayView3<'_, f64>,
    heads: usize,
    scale: Option<f64>,
) -> Result<Array3<f64>> {
    let dims = q.dim();
    if k.dim() != dims || v.dim() != dims {
        return Err(Error::Shape(format!("Q {:?}, K {:?}, V {:?}", dims, k.dim(), v.dim())));
    }
    let (steps, tokens, channels) = dims;
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide {channels} channels")));
    }
    let width = channels / heads;
    let scale = scale.unwrap_or(1.0 / (width as f64).sqrt());
    let mut out = Array3::zeros(dims);
    for t in 0..steps {
        for h in 0..heads {
            let cols = h * width..(h + 1) * width;
            let qh = q.slice(s![t, .., cols.clone()]);
            let kh = k.slice(s![t, .., cols.clone()]);
            let vh = v.slice(s![t, .., cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let total = row.sum();
                row /= total;
            }
            debug_assert_eq!(scores.dim(), (tokens, tokens));
            out.slice_mut(s![t, .., cols.clone()]).assign(&scores.dot(&vh));
        }
    }
    Ok(out)
}

// Real-valued kernels shared with the model. They accept relaxed (non-binary)
// spikes so the smoothed network stays differentiable.

/// Cache of one gate evaluation over a `[N, D]` group.
#[derive(Clone, Debug)]
pub(crate) struct GateCache {
    pub sums: Array1<f64>,
    pub gate: Array1<f64>,
}

/// `out = target ⊗ SN(colsum(a ⊗ b))` for a single (timestep, sample) group.
pub(crate) fn gate_forward(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mut out: ArrayViewMut2<'_, f64>,
    lif: &LifParams,
    firing: Firing,
) -> GateCache {
    let sums = (&a * &b).sum_axis(Axis(0));
    let gate = sums.mapv(|x| firing.fire(x - lif.u_th, lif.surrogate_width));
    Zip::from(out.rows_mut()).and(target.rows()).for_each(|mut o, t| {
        Zip::from(&mut o).and(&t).and(&gate).for_each(|o, &t, &g| *o = t * g);
    });
    GateCache { sums, gate }
}

/// Backward of [`gate_forward`]: returns `(d_a, d_b, d_target)`.
pub(crate) fn gate_backward(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    d_out: ArrayView2<'_, f64>,
    cache: &GateCache,
    lif: &LifParams,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d_target = &d_out * &cache.gate;
    let d_gate = (&d_out * &target).sum_axis(Axis(0));
    let d_sums = Zip::from(&d_gate)
        .and(&cache.sums)
        .map_collect(|&dg, &s| dg * window(s - lif.u_th, lif.surrogate_width));
    let d_a = &b * &d_sums;
    let d_b = &a * &d_sums;
    (d_a, d_b, d_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spikes(rows: Vec<Vec<u8>>) -> SpikeTensor {
        let n = rows.len();
        let d = rows[0].len();
        SpikeTensor::from_shape_vec((1, n, d), rows.concat()).unwrap()
    }

    fn hand_case() -> AttentionInputs {
        AttentionInputs::new(
            spikes(vec![vec![1, 0], vec![1, 1]]),
            spikes(vec![vec![1, 1], vec![0, 1]]),
            spikes(vec![vec![1, 1], vec![0, 1]]),
            1,
        )
        .unwrap()
    }

    fn lif(u_th: f64) -> LifParams {
        LifParams { u_th, ..LifParams::default() }
    }

    #[test]
    fn v1_hand_case() {
        let inputs = hand_case();
        let out = sdsa_v1_counted(&inputs, &lif(1.0)).unwrap();
        assert_eq!(out.output, inputs.v_s);
        assert_eq!(out.attention, array![[[1u8, 1]]]);
        assert_eq!(out.counts.additions, 2);
        assert_eq!(out.counts.multiplications, 0);
    }

    #[test]
    fn v1_high_threshold_masks_everything() {
        let out = sdsa_v1(&hand_case(), &lif(2.0)).unwrap();
        assert_eq!(out.count_ones(), 0);
    }

    #[test]
    fn v1_empty_query() {
        let mut inputs = hand_case();
        inputs.q_s = SpikeTensor::zeros(1, 2, 2);
        assert_eq!(sdsa_v1(&inputs, &lif(1.0)).unwrap().count_ones(), 0);
        assert_eq!(sdsa_addition_count(&inputs), 0);
    }

    #[test]
    fn v2_hand_case() {
        let inputs = hand_case();
        let out = sdsa_v2(&inputs, &lif(1.0)).unwrap();
        assert_eq!(out, inputs.q_s);
    }

    #[test]
    fn v2_empty_key() {
        let mut inputs = hand_case();
        inputs.k_s = SpikeTensor::zeros(1, 2, 2);
        assert_eq!(sdsa_v2(&inputs, &lif(1.0)).unwrap().count_ones(), 0);
    }

    #[test]
    fn v2_broadcast_mask() {
        // Gate [1, 0]: channel 0 has K·V sum 2, channel 1 has 0.
        let inputs = AttentionInputs::new(
            spikes(vec![vec![1, 1], vec![1, 1]]),
            spikes(vec![vec![1, 0], vec![1, 0]]),
            spikes(vec![vec![1, 1], vec![1, 1]]),
            1,
        )
        .unwrap();
        let out = sdsa_v2(&inputs, &lif(1.0)).unwrap();
        assert_eq!(out.data().slice(s![0, .., 0]).to_vec(), vec![1, 1]);
        assert_eq!(out.data().slice(s![0, .., 1]).to_vec(), vec![0, 0]);
    }

    #[test]
    fn per_channel_gate_from_dot_product() {
        let inputs = AttentionInputs::new(
            spikes(vec![vec![1, 1], vec![0, 1]]),
            spikes(vec![vec![1, 0], vec![0, 0]]),
            spikes(vec![vec![1, 0], vec![1, 0]]),
            2,
        )
        .unwrap();
        let out = sdsa_per_channel(&inputs, &lif(1.0)).unwrap();
        // Channel 0: K·V = 1 -> gate 1 -> Q column kept. Channel 1: gate 0.
        assert_eq!(out.data().slice(s![0, .., 0]).to_vec(), vec![1, 0]);
        assert_eq!(out.data().slice(s![0, .., 1]).to_vec(), vec![0, 0]);
    }

    #[test]
    fn per_channel_zero_value() {
        let mut inputs = hand_case();
        inputs.heads = 2;
        inputs.v_s = SpikeTensor::zeros(1, 2, 2);
        assert_eq!(sdsa_per_channel(&inputs, &lif(1.0)).unwrap().count_ones(), 0);
    }

    #[test]
    fn per_channel_requires_one_channel_per_head() {
        assert!(matches!(sdsa_per_channel(&hand_case(), &lif(1.0)), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn shape_and_head_checks() {
        let a = SpikeTensor::zeros(1, 2, 4);
        let b = SpikeTensor::zeros(1, 3, 4);
        assert!(AttentionInputs::new(a.clone(), b, a.clone(), 1).is_err());
        assert!(AttentionInputs::new(a.clone(), a.clone(), a, 3).is_err());
    }

    #[test]
    fn vsa_single_token_returns_value() {
        let q = array![[[0.3, -1.2]]];
        let k = array![[[2.0, 0.5]]];
        let v = array![[[4.0, -7.0]]];
        let out = vsa_reference(q.view(), k.view(), v.view(), 1, None).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn vsa_two_token_closed_form() {
        // scale = 1: scores row0 = [1, 0], row1 = [0, 2].
        let q = array![[[1.0, 0.0], [0.0, 1.0]]];
        let k = array![[[1.0, 0.0], [0.0, 2.0]]];
        let v = array![[[1.0, 0.0], [0.0, 1.0]]];
        let out = vsa_reference(q.view(), k.view(), v.view(), 1, Some(1.0)).unwrap();
        let e = std::f64::consts::E;
        let r0 = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let r1 = [1.0 / (1.0 + e * e), e * e / (1.0 + e * e)];
        for (j, want) in r0.iter().enumerate() {
            assert!((out[[0, 0, j]] - want).abs() < 1e-12);
        }
        for (j, want) in r1.iter().enumerate() {
            assert!((out[[0, 1, j]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn vsa_identical_queries_give_identical_rows() {
        let q = array![[[0.5, 1.0], [0.5, 1.0], [-1.0, 0.2]]];
        let k = array![[[0.1, 0.9], [1.1, -0.3], [0.0, 0.4]]];
        let v = array![[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]];
        let out = vsa_reference(q.view(), k.view(), v.view(), 2, None).unwrap();
        assert_eq!(out.slice(s![0, 0, ..]), out.slice(s![0, 1, ..]));
    }

    #[test]
    fn real_kernel_matches_typed_kernel_on_bits() {
        let inputs = hand_case();
        let p = lif(1.0);
        let real = |s: &SpikeTensor| s.to_real().index_axis(Axis(0), 0).to_owned();
        let (q, k, v) = (real(&inputs.q_s), real(&inputs.k_s), real(&inputs.v_s));
        let mut out = Array2::zeros((2, 2));
        gate_forward(q.view(), k.view(), v.view(), out.view_mut(), &p, Firing::Hard);
        let typed = sdsa_v1(&inputs, &p).unwrap().to_real().index_axis(Axis(0), 0).to_owned();
        assert_eq!(out, typed);
    }
}
