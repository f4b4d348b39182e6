//! Forward and backward passes. Activations are `[rows, channels]` matrices with rows
//! ordered `(t, b, y, x)` in the patch-splitting stages and `(t, b, n)` afterwards, so
//! each timestep owns a contiguous block of rows.

use ndarray::{s, Array1, Array2, Array5, ArrayD, ArrayView2, ArrayView4, ArrayView5, Axis, IxDyn};

use super::layers::{
    batch_norm, batch_norm_backward, conv3x3, conv3x3_backward, linear, linear_backward, maxpool2,
    maxpool2_backward, NormCache, NormStats, BN_MOMENTUM,
};
use super::probe::{OperatorInput, Probe, ResidualAdd, Signal};
use super::{ConvNorm, Handle, LinearNorm, Model, Norm};
use crate::error::{Error, Result};
use crate::neuron::{self, Firing, LifParams};
use crate::sdsa::{gate_backward, gate_forward, GateCache, SdsaForm};
use crate::tensor::MembraneTensor;

/// Operand of the MLP sub-block's input neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Shortcut {
    /// `S' = SN(A' + U_in)`: the attention output joins the membrane stream.
    #[default]
    Membrane,
    /// `S' = A + S`: spike-level shortcut. Inference only; used as a negative control.
    SpikeSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassOptions {
    /// Batch statistics in normalization (and running-stat updates reported in [`Forward`]).
    pub training: bool,
    pub firing: Firing,
    pub shortcut: Shortcut,
    /// Keep intermediate values for [`Model::backward`].
    pub keep_cache: bool,
    /// Return every LIF layer's spike matrix so a later pass can reuse them as reset gates.
    pub record_gates: bool,
    /// Hash the piecewise regime of every nonsmooth point into [`Forward::kink_signature`].
    pub track_kinks: bool,
}

impl PassOptions {
    pub fn inference() -> Self {
        Self {
            training: false,
            firing: Firing::Hard,
            shortcut: Shortcut::Membrane,
            keep_cache: false,
            record_gates: false,
            track_kinks: false,
        }
    }

    pub fn training() -> Self {
        Self { training: true, keep_cache: true, ..Self::inference() }
    }
}

impl Default for PassOptions {
    fn default() -> Self {
        Self::inference()
    }
}

pub struct Forward {
    /// Time-averaged logits `[B, classes]`.
    pub logits: Array2<f64>,
    pub cache: Option<ForwardCache>,
    /// Spike matrices of every LIF layer in call order, when requested.
    pub gates: Vec<Array2<f64>>,
    pub kink_signature: u64,
    /// First layer whose output contained a non-finite value.
    pub first_non_finite: Option<String>,
    pub(crate) norm_stats: Vec<(Norm, NormStats)>,
}

/// Gradient of the loss with respect to every tensor of the model, in store order.
/// Buffers receive zeros.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub values: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    fn add(&mut self, h: Handle, g: ArrayView2<'_, f64>) {
        let dst = &mut self.values[h.0];
        let shape = dst.shape().to_vec();
        *dst += &g.into_shape_with_order(IxDyn(&shape)).expect("gradient shape");
    }

    fn add_vec(&mut self, h: Handle, g: &Array1<f64>) {
        let dst = &mut self.values[h.0];
        *dst += &g.view().into_shape_with_order(dst.len()).expect("gradient shape");
    }
}

struct ConvCache {
    input: Array2<f64>,
    norm: NormCache,
    images: usize,
    h: usize,
    w: usize,
}

struct LinCache {
    input: Array2<f64>,
    norm: NormCache,
}

struct StageCache {
    conv: ConvCache,
    /// LIF input for the first three stages; the fourth pools the membrane directly.
    membrane: Option<Array2<f64>>,
    arg: Vec<u32>,
    pre_pool_rows: usize,
}

struct BlockCache {
    s_mem: Array2<f64>,
    s: Array2<f64>,
    q: NormCache,
    k: NormCache,
    v: NormCache,
    q_mem: Array2<f64>,
    k_mem: Array2<f64>,
    v_mem: Array2<f64>,
    q_s: Array2<f64>,
    k_s: Array2<f64>,
    v_s: Array2<f64>,
    gates: Vec<GateCache>,
    proj: LinCache,
    s1_mem: Array2<f64>,
    fc1: LinCache,
    h_mem: Array2<f64>,
    fc2: LinCache,
}

/// Everything [`Model::backward`] needs from a forward pass.
pub struct ForwardCache {
    firing: Firing,
    batch: usize,
    stages: Vec<StageCache>,
    s_mem: Array2<f64>,
    rpe: ConvCache,
    blocks: Vec<BlockCache>,
    final_mem: Array2<f64>,
    gap: Array2<f64>,
}

enum Tape<'a> {
    Off,
    Record(Vec<Array2<f64>>),
    Replay { gates: &'a [Array2<f64>], next: usize },
}

struct Pass<'a> {
    opts: PassOptions,
    lif: LifParams,
    steps: usize,
    probe: Option<&'a mut Probe>,
    tape: Tape<'a>,
    kinks: Option<Fingerprint>,
    first_non_finite: Option<String>,
    norm_stats: Vec<(Norm, NormStats)>,
}

impl<'a> Pass<'a> {
    fn lif(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (rows, c) = x.dim();
        let flat = x.view().into_shape_with_order((self.steps, rows / self.steps * c)).expect("t-major rows");
        let gates = match &mut self.tape {
            Tape::Replay { gates, next } => {
                let all: &'a [Array2<f64>] = gates;
                let g = all.get(*next).ok_or_else(|| Error::MissingState(format!("reset gate {next}")))?;
                if g.dim() != flat.dim() {
                    return Err(Error::Shape(format!("gate {} is {:?}, layer needs {:?}", next, g.dim(), flat.dim())));
                }
                *next += 1;
                Some(g.view())
            }
            _ => None,
        };
        let run = neuron::run(flat, &self.lif, self.opts.firing, gates);
        if let Tape::Record(v) = &mut self.tape {
            v.push(run.spikes.clone());
        }
        if let Some(hasher) = &mut self.kinks {
            let w = self.lif.surrogate_width;
            for &u in run.membrane.iter() {
                hasher.push(regime(u - self.lif.u_th, w) as u64);
            }
        }
        let spikes = run.spikes.into_shape_with_order((rows, c)).expect("same size");
        let membrane = run.membrane.into_shape_with_order((rows, c)).expect("same size");
        Ok((spikes, membrane))
    }

    fn check(&mut self, layer: impl FnOnce() -> String, x: &Array2<f64>) {
        if self.first_non_finite.is_none() && x.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(layer());
        }
    }

    fn rate(&mut self, site: impl FnOnce() -> String, x: &Array2<f64>) {
        if let Some(p) = self.probe.as_deref_mut() {
            p.record_rate(&site(), per_step_rate(x, self.steps));
        }
    }

    fn operand(&mut self, site: impl FnOnce() -> String, x: &Array2<f64>) {
        if let Some(p) = self.probe.as_deref_mut() {
            let binary = x.iter().all(|&v| v == 0.0 || v == 1.0);
            let max_value = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            p.operator_inputs.push(OperatorInput { site: site(), binary, max_value });
        }
    }

    fn residual(&mut self, site: impl FnOnce() -> String, lhs: Signal, rhs: Signal) {
        if let Some(p) = self.probe.as_deref_mut() {
            p.residual_adds.push(ResidualAdd { site: site(), lhs, rhs });
        }
    }

    fn pool_args(&mut self, arg: &[u32]) {
        if let Some(hasher) = &mut self.kinks {
            for &a in arg {
                hasher.push(a as u64);
            }
        }
    }
}

/// Order-sensitive running hash of small integers.
#[derive(Default)]
struct Fingerprint(u64);

impl Fingerprint {
    fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(5);
    }
}

/// 0 below the surrogate window, 1 inside, 2 above.
fn regime(x: f64, width: f64) -> u8 {
    if x < -width {
        0
    } else if x > width {
        2
    } else {
        1
    }
}

fn per_step_rate(x: &Array2<f64>, steps: usize) -> Vec<f64> {
    let per = x.nrows() / steps;
    (0..steps)
        .map(|t| {
            let block = x.slice(s![t * per..(t + 1) * per, ..]);
            block.iter().filter(|&&v| v != 0.0).count() as f64 / block.len().max(1) as f64
        })
        .collect()
}

/// Replicates static images `[B, C, H, W]` over `timesteps`.
pub fn repeat_over_time(images: ArrayView4<'_, f64>, timesteps: usize) -> Array5<f64> {
    let (b, c, h, w) = images.dim();
    let mut out = Array5::zeros((timesteps, b, c, h, w));
    for mut step in out.outer_iter_mut() {
        step.assign(&images);
    }
    out
}

fn lif_backward_rows(
    upstream: &Array2<f64>,
    membrane: &Array2<f64>,
    steps: usize,
    lif: &LifParams,
    firing: Firing,
) -> Array2<f64> {
    let (rows, c) = membrane.dim();
    let shape = (steps, rows / steps * c);
    let up = upstream.view().into_shape_with_order(shape).expect("t-major rows");
    let mem = membrane.view().into_shape_with_order(shape).expect("t-major rows");
    neuron::backprop(up, mem, lif, firing).into_shape_with_order((rows, c)).expect("same size")
}

impl Model {
    fn norm(&self, n: Norm, x: &Array2<f64>, pass: &mut Pass<'_>) -> (Array2<f64>, NormCache) {
        let st = self.store();
        let running = (!pass.opts.training).then(|| (st.vec(n.mean), st.vec(n.var)));
        let (y, cache, stats) = batch_norm(x.view(), st.vec(n.gamma), st.vec(n.beta), running);
        if let Some(stats) = stats {
            pass.norm_stats.push((n, stats));
        }
        (y, cache)
    }

    fn conv_norm(
        &self,
        layer: ConvNorm,
        name: &str,
        x: Array2<f64>,
        images: usize,
        h: usize,
        w: usize,
        pass: &mut Pass<'_>,
    ) -> (Array2<f64>, ConvCache) {
        let y = conv3x3(x.view(), images, h, w, self.store().mat(layer.conv));
        pass.check(|| name.to_string(), &y);
        let (y, norm) = self.norm(layer.norm, &y, pass);
        pass.check(|| format!("{name}.bn"), &y);
        (y, ConvCache { input: x, norm, images, h, w })
    }

    fn linear_norm(&self, layer: LinearNorm, name: &str, x: Array2<f64>, pass: &mut Pass<'_>) -> (Array2<f64>, LinCache) {
        let st = self.store();
        let y = linear(x.view(), st.mat(layer.weight), st.vec(layer.bias));
        pass.check(|| name.to_string(), &y);
        let (y, norm) = self.norm(layer.norm, &y, pass);
        pass.check(|| format!("{name}.bn"), &y);
        (y, LinCache { input: x, norm })
    }

    /// Full pass over `images` `[T, B, C, H, W]`.
    pub fn forward(&self, images: ArrayView5<'_, f64>, opts: PassOptions, probe: Option<&mut Probe>) -> Result<Forward> {
        self.run(images, opts, probe, None)
    }

    /// Pass whose LIF reset gates are taken from `gates` (as recorded by an earlier pass)
    /// instead of the current spikes.
    pub fn forward_with_gates(
        &self,
        images: ArrayView5<'_, f64>,
        opts: PassOptions,
        gates: &[Array2<f64>],
    ) -> Result<Forward> {
        self.run(images, opts, None, Some(gates))
    }

    fn run(
        &self,
        images: ArrayView5<'_, f64>,
        opts: PassOptions,
        probe: Option<&mut Probe>,
        replay: Option<&[Array2<f64>]>,
    ) -> Result<Forward> {
        let cfg = self.config();
        let (steps, batch, c, h, w) = images.dim();
        if c != cfg.in_channels || h != cfg.height || w != cfg.width || steps == 0 || batch == 0 {
            return Err(Error::Geometry(format!(
                "input [{steps}, {batch}, {c}, {h}, {w}] does not match a model for {}x{}x{}",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input images".into()));
        }
        if opts.keep_cache && opts.shortcut == Shortcut::SpikeSum {
            return Err(Error::InvalidParam("the spike-level shortcut has no backward pass".into()));
        }
        let tape = match (replay, opts.record_gates) {
            (Some(gates), _) => Tape::Replay { gates, next: 0 },
            (None, true) => Tape::Record(Vec::new()),
            (None, false) => Tape::Off,
        };
        let mut pass = Pass {
            opts,
            lif: cfg.lif,
            steps,
            probe,
            tape,
            kinks: opts.track_kinks.then(Fingerprint::default),
            first_non_finite: None,
            norm_stats: Vec::new(),
        };
        let groups = steps * batch;
        let x = to_rows(images);
        if let Some(p) = pass.probe.as_deref_mut() {
            p.input_density = per_step_rate(&x, steps);
        }
        let (u0, stages, s_mem, rpe) = self.sps_rows(x, groups, h, w, &mut pass)?;
        let mut u = u0;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (out, cache) = self.block_rows(l, u, groups, &mut pass)?;
            u = out;
            block_caches.push(cache);
        }
        let (s_l, final_mem) = pass.lif(&u)?;
        pass.rate(|| "Head/FC".into(), &s_l);
        // The head is linear, so CH(GAP(S)) = GAP(CH(S)): its operand is the spike map.
        pass.operand(|| "head".into(), &s_l);
        let d = cfg.channels;
        let tokens = s_l.nrows() / groups;
        let gap = s_l
            .view()
            .into_shape_with_order((groups, tokens, d))
            .expect("rows are (group, token)")
            .mean_axis(Axis(1))
            .expect("tokens > 0");
        let z = linear(gap.view(), self.store().mat(self.head_weight), self.store().vec(self.head_bias));
        pass.check(|| "head".into(), &z);
        let logits = z
            .view()
            .into_shape_with_order((steps, batch, cfg.num_classes))
            .expect("rows are (t, b)")
            .mean_axis(Axis(0))
            .expect("steps > 0");
        let cache = opts.keep_cache.then(|| ForwardCache {
            firing: opts.firing,
            batch,
            stages,
            s_mem,
            rpe,
            blocks: block_caches,
            final_mem,
            gap,
        });
        let gates = match pass.tape {
            Tape::Record(v) => v,
            _ => Vec::new(),
        };
        Ok(Forward {
            logits,
            cache,
            gates,
            kink_signature: pass.kinks.map_or(0, |h| h.0),
            first_non_finite: pass.first_non_finite,
            norm_stats: pass.norm_stats,
        })
    }

    #[allow(clippy::type_complexity)]
    fn sps_rows(
        &self,
        mut x: Array2<f64>,
        groups: usize,
        mut h: usize,
        mut w: usize,
        pass: &mut Pass<'_>,
    ) -> Result<(Array2<f64>, Vec<StageCache>, Array2<f64>, ConvCache)> {
        let mut caches = Vec::with_capacity(4);
        let mut u = Array2::zeros((0, 0));
        for (k, stage) in self.stages.iter().enumerate() {
            let name = format!("sps.conv{}", k + 1);
            if k > 0 {
                pass.operand(|| name.clone(), &x);
            }
            let (y, conv) = self.conv_norm(*stage, &name, x, groups, h, w, pass);
            let pre_pool_rows = y.nrows();
            if k < 3 {
                let (spikes, membrane) = pass.lif(&y)?;
                let (pooled, arg) = maxpool2(spikes.view(), groups, h, w);
                pass.pool_args(&arg);
                pass.rate(|| format!("SPS/Conv{}", k + 1), &pooled);
                caches.push(StageCache { conv, membrane: Some(membrane), arg, pre_pool_rows });
                x = pooled;
            } else {
                let (pooled, arg) = maxpool2(y.view(), groups, h, w);
                pass.pool_args(&arg);
                caches.push(StageCache { conv, membrane: None, arg, pre_pool_rows });
                u = pooled;
                x = Array2::zeros((0, 0));
            }
            h /= 2;
            w /= 2;
        }
        let (s, s_mem) = pass.lif(&u)?;
        pass.rate(|| "SPS/Conv4".into(), &s);
        pass.operand(|| "sps.rpe".into(), &s);
        let (rpe, rpe_cache) = self.conv_norm(self.rpe, "sps.rpe", s, groups, h, w, pass);
        pass.residual(|| "sps.rpe".into(), Signal::Membrane, Signal::Membrane);
        Ok((u + &rpe, caches, s_mem, rpe_cache))
    }

    fn block_rows(
        &self,
        l: usize,
        u_in: Array2<f64>,
        groups: usize,
        pass: &mut Pass<'_>,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let blk = &self.blocks[l];
        let site = |part: &str| format!("Block{}/{part}", l + 1);
        let name = |part: &str| format!("blocks.{l}.{part}");
        let (s, s_mem) = pass.lif(&u_in)?;
        pass.rate(|| site("SDSA/Input"), &s);
        pass.operand(|| name("attn.qkv"), &s);
        let (q, q_lin) = self.linear_norm(blk.q, &name("attn.q"), s.clone(), pass);
        let (k, k_lin) = self.linear_norm(blk.k, &name("attn.k"), s.clone(), pass);
        let (v, v_lin) = self.linear_norm(blk.v, &name("attn.v"), s.clone(), pass);
        let (q_s, q_mem) = pass.lif(&q)?;
        let (k_s, k_mem) = pass.lif(&k)?;
        let (v_s, v_mem) = pass.lif(&v)?;
        pass.rate(|| site("SDSA/V_S"), &v_s);
        pass.rate(|| site("SDSA/Q_S"), &q_s);
        pass.rate(|| site("SDSA/K_S"), &k_s);

        let form = self.config().attention;
        let tokens = s.nrows() / groups;
        let d = s.ncols();
        let mut attn = Array2::zeros((s.nrows(), d));
        let mut gates = Vec::with_capacity(groups);
        let mut gate_rows = Array2::zeros((groups, d));
        for g in 0..groups {
            let rows = s![g * tokens..(g + 1) * tokens, ..];
            let out = attn.slice_mut(rows);
            let cache = match form {
                SdsaForm::V1 => gate_forward(q_s.slice(rows), k_s.slice(rows), v_s.slice(rows), out, &pass.lif, pass.opts.firing),
                SdsaForm::V2 | SdsaForm::PerChannel => {
                    gate_forward(k_s.slice(rows), v_s.slice(rows), q_s.slice(rows), out, &pass.lif, pass.opts.firing)
                }
            };
            if let Some(hasher) = &mut pass.kinks {
                for &x in cache.sums.iter() {
                    hasher.push(regime(x - pass.lif.u_th, pass.lif.surrogate_width) as u64);
                }
            }
            gate_rows.row_mut(g).assign(&cache.gate);
            gates.push(cache);
        }
        pass.rate(|| site("SDSA/g"), &gate_rows);
        pass.rate(|| site("SDSA/Output"), &attn);
        if let Some(p) = pass.probe.as_deref_mut() {
            if p.capture_attention {
                p.attention.push((v_s.clone(), attn.clone()));
            }
        }
        pass.operand(|| name("attn.proj"), &attn);
        let (o, proj) = self.linear_norm(blk.proj, &name("attn.proj"), attn.clone(), pass);
        pass.residual(|| name("attn"), Signal::Membrane, Signal::Membrane);
        let u1 = o + &u_in;

        let (s1, s1_mem) = match pass.opts.shortcut {
            Shortcut::Membrane => pass.lif(&u1)?,
            Shortcut::SpikeSum => {
                pass.residual(|| name("attn.spike"), Signal::Spike, Signal::Spike);
                (&attn + &s, Array2::zeros((0, 0)))
            }
        };
        pass.rate(|| site("MLP/Layer1"), &s1);
        pass.operand(|| name("mlp.fc1"), &s1);
        let (hid, fc1) = self.linear_norm(blk.fc1, &name("mlp.fc1"), s1, pass);
        let (hs, h_mem) = pass.lif(&hid)?;
        pass.rate(|| site("MLP/Layer2"), &hs);
        pass.operand(|| name("mlp.fc2"), &hs);
        let (m, fc2) = self.linear_norm(blk.fc2, &name("mlp.fc2"), hs, pass);
        pass.residual(|| name("mlp"), Signal::Membrane, Signal::Membrane);
        let u_out = m + &u1;
        let cache = BlockCache {
            s_mem,
            s,
            q: q_lin.norm,
            k: k_lin.norm,
            v: v_lin.norm,
            q_mem,
            k_mem,
            v_mem,
            q_s,
            k_s,
            v_s,
            gates,
            proj,
            s1_mem,
            fc1,
            h_mem,
            fc2,
        };
        Ok((u_out, cache))
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_norm_stats(&mut self, fwd: &Forward) {
        for (n, stats) in &fwd.norm_stats {
            let store = self.store_mut();
            for (h, batch) in [(n.mean, &stats.mean), (n.var, &stats.var_unbiased)] {
                let dst = store.value_mut(h);
                let flat = dst.view_mut().into_shape_with_order(batch.len()).expect("1-D buffer");
                let mut flat = flat;
                flat.zip_mut_with(batch, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }

    /// Gradients of a loss with respect to every tensor, given `dlogits` `[B, classes]`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: ArrayView2<'_, f64>) -> Result<Gradients> {
        let cfg = self.config();
        let st = self.store();
        let lif = cfg.lif;
        let firing = cache.firing;
        let groups = cache.gap.nrows();
        let steps = groups / cache.batch;
        if dlogits.dim() != (cache.batch, cfg.num_classes) {
            return Err(Error::Shape(format!(
                "dlogits {:?}, expected {:?}",
                dlogits.dim(),
                (cache.batch, cfg.num_classes)
            )));
        }
        let mut grads = Gradients { values: st.tensors().iter().map(|t| ArrayD::zeros(t.value.raw_dim())).collect() };
        let lif_back = |up: &Array2<f64>, mem: &Array2<f64>| lif_backward_rows(up, mem, steps, &lif, firing);

        let mut dz = Array2::zeros((groups, cfg.num_classes));
        for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
            row.assign(&(&dlogits.row(i % cache.batch) / steps as f64));
        }
        let (dgap, dw, db) = linear_backward(cache.gap.view(), dz.view(), st.mat(self.head_weight));
        grads.add(self.head_weight, dw.view());
        grads.add_vec(self.head_bias, &db);
        let tokens = cache.final_mem.nrows() / groups;
        let mut ds_l = Array2::zeros(cache.final_mem.raw_dim());
        for (r, mut row) in ds_l.rows_mut().into_iter().enumerate() {
            row.assign(&(&dgap.row(r / tokens) / tokens as f64));
        }
        let mut du = lif_back(&ds_l, &cache.final_mem);

        let norm_back = |grads: &mut Gradients, n: Norm, dy: &Array2<f64>, c: &NormCache| {
            let (dx, dg, dbeta) = batch_norm_backward(dy.view(), c, st.vec(n.gamma));
            grads.add_vec(n.gamma, &dg);
            grads.add_vec(n.beta, &dbeta);
            dx
        };
        let lin_back = |grads: &mut Gradients, layer: LinearNorm, dy: &Array2<f64>, input: &Array2<f64>, c: &NormCache| {
            let dlin = norm_back(grads, layer.norm, dy, c);
            let (dx, dw, db) = linear_backward(input.view(), dlin.view(), st.mat(layer.weight));
            grads.add(layer.weight, dw.view());
            grads.add_vec(layer.bias, &db);
            dx
        };

        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dhs = lin_back(&mut grads, blk.fc2, &du, &bc.fc2.input, &bc.fc2.norm);
            let dhid = lif_back(&dhs, &bc.h_mem);
            let ds1 = lin_back(&mut grads, blk.fc1, &dhid, &bc.fc1.input, &bc.fc1.norm);
            let du1 = du + lif_back(&ds1, &bc.s1_mem);
            let dattn = lin_back(&mut grads, blk.proj, &du1, &bc.proj.input, &bc.proj.norm);

            let tokens = bc.s.nrows() / groups;
            let mut dq_s = Array2::zeros(bc.q_s.raw_dim());
            let mut dk_s = Array2::zeros(bc.k_s.raw_dim());
            let mut dv_s = Array2::zeros(bc.v_s.raw_dim());
            for (g, gc) in bc.gates.iter().enumerate() {
                let rows = s![g * tokens..(g + 1) * tokens, ..];
                let d_out = dattn.slice(rows);
                match cfg.attention {
                    SdsaForm::V1 => {
                        let (da, db, dt) =
                            gate_backward(bc.q_s.slice(rows), bc.k_s.slice(rows), bc.v_s.slice(rows), d_out, gc, &lif);
                        dq_s.slice_mut(rows).assign(&da);
                        dk_s.slice_mut(rows).assign(&db);
                        dv_s.slice_mut(rows).assign(&dt);
                    }
                    SdsaForm::V2 | SdsaForm::PerChannel => {
                        let (da, db, dt) =
                            gate_backward(bc.k_s.slice(rows), bc.v_s.slice(rows), bc.q_s.slice(rows), d_out, gc, &lif);
                        dk_s.slice_mut(rows).assign(&da);
                        dv_s.slice_mut(rows).assign(&db);
                        dq_s.slice_mut(rows).assign(&dt);
                    }
                }
            }
            let dq = lif_back(&dq_s, &bc.q_mem);
            let dk = lif_back(&dk_s, &bc.k_mem);
            let dv = lif_back(&dv_s, &bc.v_mem);
            let mut ds = lin_back(&mut grads, blk.q, &dq, &bc.s, &bc.q);
            ds += &lin_back(&mut grads, blk.k, &dk, &bc.s, &bc.k);
            ds += &lin_back(&mut grads, blk.v, &dv, &bc.s, &bc.v);
            du = du1 + lif_back(&ds, &bc.s_mem);
        }

        // U_0 = u + BN(conv(SN(u)))
        let rc = &cache.rpe;
        let drpe = norm_back(&mut grads, self.rpe.norm, &du, &rc.norm);
        let (ds, dw) = conv3x3_backward(rc.input.view(), drpe.view(), rc.images, rc.h, rc.w, st.mat(self.rpe.conv), true);
        grads.add(self.rpe.conv, dw.view());
        let mut dx = du + lif_back(&ds.expect("input gradient requested"), &cache.s_mem);

        for (k, (stage, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let pooled_grad = maxpool2_backward(dx.view(), &sc.arg, sc.pre_pool_rows);
            let dy = match &sc.membrane {
                Some(mem) => lif_back(&pooled_grad, mem),
                None => pooled_grad,
            };
            let dconv = norm_back(&mut grads, stage.norm, &dy, &sc.conv.norm);
            let c = &sc.conv;
            let (dinput, dw) = conv3x3_backward(c.input.view(), dconv.view(), c.images, c.h, c.w, st.mat(stage.conv), k > 0);
            grads.add(stage.conv, dw.view());
            if let Some(d) = dinput {
                dx = d;
            }
        }
        Ok(grads)
    }

    /// Patch splitting for one sample `[T, C, H, W]`, inference mode. Returns `U_0` `[T, N, D]`.
    pub fn sps_forward(&self, images: ArrayView4<'_, f64>) -> Result<MembraneTensor> {
        let cfg = self.config();
        let (steps, c, h, w) = images.dim();
        if c != cfg.in_channels || h != cfg.height || w != cfg.width || steps == 0 {
            return Err(Error::Geometry(format!(
                "input [{steps}, {c}, {h}, {w}] does not match a model for {}x{}x{}",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let x5 = images.insert_axis(Axis(1));
        let mut pass = self.single_pass(steps);
        let (u0, ..) = self.sps_rows(to_rows(x5), steps, h, w, &mut pass)?;
        MembraneTensor::from_shape_vec((steps, cfg.tokens(), cfg.channels), u0.into_raw_vec_and_offset().0)
    }

    /// One encoder block applied to `u_in` `[T, N, D]`, inference mode.
    pub fn encoder_block_forward(&self, block: usize, u_in: &MembraneTensor) -> Result<MembraneTensor> {
        let cfg = self.config();
        if block >= self.blocks.len() {
            return Err(Error::InvalidParam(format!("block {block} of {}", self.blocks.len())));
        }
        let (steps, n, d) = u_in.dims();
        if d != cfg.channels || steps == 0 || n == 0 {
            return Err(Error::Shape(format!("block input {:?}, model width {}", u_in.dims(), cfg.channels)));
        }
        let rows = u_in.data().to_owned().into_shape_with_order((steps * n, d)).expect("contiguous");
        let mut pass = self.single_pass(steps);
        let (out, _) = self.block_rows(block, rows, steps, &mut pass)?;
        if let Some(layer) = pass.first_non_finite {
            return Err(Error::NonFinite(layer));
        }
        MembraneTensor::from_shape_vec((steps, n, d), out.into_raw_vec_and_offset().0)
    }

    /// Logits `[classes]` for one sample `[T, C, H, W]`, inference mode.
    pub fn model_forward(&self, images: ArrayView4<'_, f64>) -> Result<Array1<f64>> {
        let fwd = self.forward(images.insert_axis(Axis(1)), PassOptions::inference(), None)?;
        Ok(fwd.logits.row(0).to_owned())
    }

    fn single_pass(&self, steps: usize) -> Pass<'static> {
        Pass {
            opts: PassOptions::inference(),
            lif: self.config().lif,
            steps,
            probe: None,
            tape: Tape::Off,
            kinks: None,
            first_non_finite: None,
            norm_stats: Vec::new(),
        }
    }
}

/// `[T, B, C, H, W]` to rows `(t, b, y, x)` by channel.
fn to_rows(images: ArrayView5<'_, f64>) -> Array2<f64> {
    let (t, b, c, h, w) = images.dim();
    let permuted = images.permuted_axes([0, 1, 3, 4, 2]);
    let owned: Array5<f64> = permuted.as_standard_layout().into_owned();
    owned.into_shape_with_order((t * b * h * w, c)).expect("standard layout")
}
