//! Firing-rate instrumentation, operation counting and the theoretical energy model.

mod attention;

use std::fmt::Write as _;

use indexmap::IndexMap;
use ndarray::{ArrayView4, Axis};

pub use attention::{attention_map_export, attention_maps, token_rates, write_pgm, AttentionMap};

use crate::error::{Error, Result};
use crate::model::{repeat_over_time, Model, ModelConfig, PassOptions, Probe};
use crate::tensor::SpikeTensor;

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    /// 45 nm figures: 4.6 pJ per multiply-accumulate, 0.9 pJ per accumulate.
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyConstants {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        let c = Self { e_mac, e_ac };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) || !self.e_mac.is_finite() || !self.e_ac.is_finite() {
            return Err(Error::InvalidParam(format!(
                "energy constants must be positive, got e_mac={} e_ac={}",
                self.e_mac, self.e_ac
            )));
        }
        Ok(())
    }
}

/// Proportion of nonzero elements.
pub fn firing_rate(spikes: &SpikeTensor) -> Result<f64> {
    if spikes.is_empty() {
        return Err(Error::Empty("spike tensor".into()));
    }
    Ok(spikes.count_ones() as f64 / spikes.len() as f64)
}

fn positive(dims: &[(&str, usize)]) -> Result<()> {
    match dims.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::InvalidParam(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// `k² · h_out · w_out · c_in · c_out`.
pub fn flops_conv(k: usize, h_out: usize, w_out: usize, c_in: usize, c_out: usize) -> Result<u64> {
    positive(&[("k", k), ("h_out", h_out), ("w_out", w_out), ("c_in", c_in), ("c_out", c_out)])?;
    Ok([k, k, h_out, w_out, c_in, c_out].iter().map(|&v| v as u64).product())
}

/// `i · o`.
pub fn flops_mlp(i: usize, o: usize) -> Result<u64> {
    positive(&[("i", i), ("o", o)])?;
    Ok(i as u64 * o as u64)
}

/// How the attention product of vanilla self-attention is costed in [`energy_vsa_layer_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VsaAccounting {
    /// `e_mac·(3ND² + 2ND² + 2N²) + e_m·N²`: attention product costed as `2ND²` and the
    /// output linear excluded. Reproduces the published per-layer figures.
    #[default]
    Reported,
    /// `e_mac·(3ND² + 2N²D + 2N² + ND²) + e_m·N²`, the operator table taken literally.
    Literal,
}

impl VsaAccounting {
    pub fn name(self) -> &'static str {
        match self {
            VsaAccounting::Reported => "reported",
            VsaAccounting::Literal => "literal",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "reported" => Some(VsaAccounting::Reported),
            "literal" => Some(VsaAccounting::Literal),
            _ => None,
        }
    }
}

/// Energy of one vanilla self-attention layer with the default accounting.
pub fn energy_vsa_layer(n_tokens: usize, d_channels: usize, constants: &EnergyConstants) -> f64 {
    energy_vsa_layer_with(n_tokens, d_channels, constants, VsaAccounting::Reported)
}

/// Energy of one vanilla self-attention layer. The multiply-only scale row uses `e_mac`.
pub fn energy_vsa_layer_with(
    n_tokens: usize,
    d_channels: usize,
    constants: &EnergyConstants,
    accounting: VsaAccounting,
) -> f64 {
    let (n, d) = (n_tokens as f64, d_channels as f64);
    let macs = match accounting {
        VsaAccounting::Reported => 3.0 * n * d * d + 2.0 * n * d * d + 2.0 * n * n,
        VsaAccounting::Literal => 3.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * n + n * d * d,
    };
    constants.e_mac * macs + constants.e_mac * n * n
}

/// Per-timestep firing rates for each instrumented site, plus the image input density.
#[derive(Clone, Debug, PartialEq)]
pub struct FiringRateTrace {
    pub timesteps: usize,
    pub sites: IndexMap<String, Vec<f64>>,
    pub input_density: Vec<f64>,
}

impl FiringRateTrace {
    /// Every site of `config` at a constant rate, including the input density.
    pub fn uniform(config: &ModelConfig, rate: f64) -> Self {
        let t = config.timesteps;
        Self {
            timesteps: t,
            sites: site_schema(config).into_iter().map(|s| (s, vec![rate; t])).collect(),
            input_density: vec![rate; t],
        }
    }

    pub fn from_probe(probe: &Probe, timesteps: usize) -> Self {
        Self { timesteps, sites: probe.rates.clone(), input_density: probe.input_density.clone() }
    }

    pub fn average(&self, site: &str) -> Result<f64> {
        let v = self.sites.get(site).ok_or_else(|| Error::MissingSite(site.to_string()))?;
        Ok(mean(v))
    }

    pub fn input_average(&self) -> f64 {
        mean(&self.input_density)
    }

    /// `site,t1,...,tT,average` with the input density as a leading comment.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        let _ = writeln!(out, "# input_density,{},{}", join(&self.input_density), fmt(self.input_average()));
        out.push_str("site");
        for t in 1..=self.timesteps {
            let _ = write!(out, ",t{t}");
        }
        out.push_str(",average\n");
        for (site, rates) in &self.sites {
            let _ = writeln!(out, "{site},{},{}", join(rates), fmt(mean(rates)));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(",")
}

/// Instrumented site names for `config`, in forward order.
pub fn site_schema(config: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (1..=4).map(|k| format!("SPS/Conv{k}")).collect();
    for l in 1..=config.blocks {
        for part in ["SDSA/Input", "SDSA/V_S", "SDSA/Q_S", "SDSA/K_S", "SDSA/g", "SDSA/Output", "MLP/Layer1", "MLP/Layer2"] {
            out.push(format!("Block{l}/{part}"));
        }
    }
    out.push("Head/FC".into());
    out
}

const TRACE_BATCH: usize = 32;

/// Firing rates of `model` on `images` `[B, C, H, W]`, averaged over the batch.
pub fn sfr_trace(model: &Model, images: ArrayView4<'_, f64>) -> Result<FiringRateTrace> {
    let b = images.len_of(Axis(0));
    if b == 0 {
        return Err(Error::Empty("trace batch".into()));
    }
    let t = model.config().timesteps;
    let mut total: Option<FiringRateTrace> = None;
    for start in (0..b).step_by(TRACE_BATCH) {
        let end = (start + TRACE_BATCH).min(b);
        let chunk = images.slice_axis(Axis(0), (start..end).into());
        let mut probe = Probe::new();
        model.forward(repeat_over_time(chunk, t).view(), PassOptions::inference(), Some(&mut probe))?;
        let weight = (end - start) as f64 / b as f64;
        let part = FiringRateTrace::from_probe(&probe, t);
        match total.as_mut() {
            None => {
                let mut first = part;
                scale_trace(&mut first, weight);
                total = Some(first);
            }
            Some(acc) => {
                for (site, rates) in &part.sites {
                    let dst = acc.sites.get_mut(site).expect("same model, same sites");
                    dst.iter_mut().zip(rates).for_each(|(d, r)| *d += weight * r);
                }
                acc.input_density.iter_mut().zip(&part.input_density).for_each(|(d, r)| *d += weight * r);
            }
        }
    }
    Ok(total.expect("at least one chunk"))
}

fn scale_trace(trace: &mut FiringRateTrace, w: f64) {
    trace.sites.values_mut().flat_map(|v| v.iter_mut()).for_each(|r| *r *= w);
    trace.input_density.iter_mut().for_each(|r| *r *= w);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Mac,
    Ac,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Mac => "MAC",
            OpKind::Ac => "AC",
        }
    }
}

/// Which firing rate scales a layer's operation count.
#[derive(Clone, Debug, PartialEq)]
pub enum RateSource {
    /// Nonzero fraction of the image input.
    InputDensity,
    Site(String),
    /// Mean of the sites' average rates.
    Mean(Vec<String>),
    /// Sum of the sites' average rates.
    Sum(Vec<String>),
    /// Dense operator, rate 1.
    Dense,
}

impl RateSource {
    fn resolve(&self, trace: &FiringRateTrace) -> Result<f64> {
        Ok(match self {
            RateSource::InputDensity => trace.input_average(),
            RateSource::Site(s) => trace.average(s)?,
            RateSource::Mean(v) => v.iter().map(|s| trace.average(s)).sum::<Result<f64>>()? / v.len() as f64,
            RateSource::Sum(v) => v.iter().map(|s| trace.average(s)).sum::<Result<f64>>()?,
            RateSource::Dense => 1.0,
        })
    }
}

/// One energy row: `kind` operations, `flops` of them per timestep at rate 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: OpKind,
    pub flops: u64,
    pub rate: RateSource,
}

fn spec(name: String, kind: OpKind, flops: u64, rate: RateSource) -> LayerSpec {
    LayerSpec { name, kind, flops, rate }
}

/// Energy rows of the spike-driven model: the first convolution multiplies a real image,
/// every other operator accumulates weights selected by spikes.
pub fn spike_layers(config: &ModelConfig) -> Result<Vec<LayerSpec>> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let st = config.sps_stage_channels;
    let ins = [config.in_channels, st[0], st[1], st[2]];
    let (n, d, hid) = (config.tokens() as u64, config.channels, config.hidden());
    let mut rows = Vec::new();
    for k in 0..4 {
        let fl = flops_conv(3, h >> k, w >> k, ins[k], st[k])?;
        let (kind, rate) = match k {
            0 => (OpKind::Mac, RateSource::InputDensity),
            _ => (OpKind::Ac, RateSource::Site(format!("SPS/Conv{k}"))),
        };
        rows.push(spec(format!("sps.conv{}", k + 1), kind, fl, rate));
    }
    rows.push(spec("sps.rpe".into(), OpKind::Ac, flops_conv(3, h / 16, w / 16, d, d)?, RateSource::Site("SPS/Conv4".into())));
    for l in 0..config.blocks {
        let site = |p: &str| format!("Block{}/{p}", l + 1);
        let qkv = RateSource::Mean(vec![site("SDSA/Q_S"), site("SDSA/K_S"), site("SDSA/V_S")]);
        rows.push(spec(format!("blocks.{l}.attn.qkv"), OpKind::Ac, 3 * n * flops_mlp(d, d)?, qkv));
        let gate = RateSource::Sum(vec![site("SDSA/Q_S"), site("SDSA/K_S")]);
        rows.push(spec(format!("blocks.{l}.attn.fqkv"), OpKind::Ac, n * d as u64, gate));
        rows.push(spec(format!("blocks.{l}.attn.proj"), OpKind::Ac, n * flops_mlp(d, d)?, RateSource::Site(site("SDSA/Output"))));
        rows.push(spec(format!("blocks.{l}.mlp.fc1"), OpKind::Ac, n * flops_mlp(d, hid)?, RateSource::Site(site("MLP/Layer1"))));
        rows.push(spec(format!("blocks.{l}.mlp.fc2"), OpKind::Ac, n * flops_mlp(hid, d)?, RateSource::Site(site("MLP/Layer2"))));
    }
    rows.push(spec("head".into(), OpKind::Ac, flops_mlp(d, config.num_classes)?, RateSource::Site("Head/FC".into())));
    Ok(rows)
}

/// Energy rows of the ANN counterpart: every operator is a dense MAC, attention is
/// vanilla self-attention row by row (`Q,K,V`, `f(Q,K,V)`, scale, softmax, linear).
pub fn ann_layers(config: &ModelConfig) -> Result<Vec<LayerSpec>> {
    let mut rows = Vec::new();
    let (n, d) = (config.tokens() as u64, config.channels as u64);
    for mut r in spike_layers(config)? {
        r.kind = OpKind::Mac;
        r.rate = RateSource::Dense;
        if r.name.ends_with("attn.fqkv") {
            let prefix = r.name.trim_end_matches("fqkv").to_string();
            rows.push(spec(r.name.clone(), OpKind::Mac, 2 * n * n * d, RateSource::Dense));
            rows.push(spec(format!("{prefix}scale"), OpKind::Mac, n * n, RateSource::Dense));
            rows.push(spec(format!("{prefix}softmax"), OpKind::Mac, 2 * n * n, RateSource::Dense));
        } else {
            rows.push(r);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub layer: String,
    pub kind: OpKind,
    pub macs: f64,
    pub acs: f64,
    pub rate: f64,
    pub timesteps: usize,
    pub energy_pj: f64,
}

/// Energy rows for `layers` given `trace`, each `e · T · R · FL`.
pub fn energy_of_layers(layers: &[LayerSpec], trace: &FiringRateTrace, constants: &EnergyConstants) -> Result<Vec<EnergyRow>> {
    constants.validate()?;
    let t = trace.timesteps;
    layers
        .iter()
        .map(|l| {
            let rate = l.rate.resolve(trace)?;
            let ops = t as f64 * rate * l.flops as f64;
            let (macs, acs, e) = match l.kind {
                OpKind::Mac => (ops, 0.0, constants.e_mac),
                OpKind::Ac => (0.0, ops, constants.e_ac),
            };
            Ok(EnergyRow { layer: l.name.clone(), kind: l.kind, macs, acs, rate, timesteps: t, energy_pj: e * ops })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    /// Same network as a dense ANN with vanilla self-attention, one timestep.
    pub ann_rows: Vec<EnergyRow>,
    pub constants: EnergyConstants,
    pub accounting: VsaAccounting,
    /// One vanilla self-attention layer under `accounting`.
    pub vsa_layer_pj: f64,
    pub notes: Vec<String>,
}

fn total(rows: &[EnergyRow]) -> (f64, f64, f64) {
    rows.iter().fold((0.0, 0.0, 0.0), |(m, a, e), r| (m + r.macs, a + r.acs, e + r.energy_pj))
}

impl EnergyReport {
    pub fn total_pj(&self) -> f64 {
        total(&self.rows).2
    }

    pub fn ann_total_pj(&self) -> f64 {
        total(&self.ann_rows).2
    }

    /// ANN energy over spike-driven energy; infinite when the spike model spends nothing.
    pub fn ratio(&self) -> f64 {
        self.ann_total_pj() / self.total_pj()
    }

    /// Spike-driven self-attention energy of block `l`: Q/K/V generation, gating and output linear.
    pub fn sdsa_layer_pj(&self, l: usize) -> f64 {
        let prefix = format!("blocks.{l}.attn.");
        self.rows.iter().filter(|r| r.layer.starts_with(&prefix)).map(|r| r.energy_pj).sum()
    }

    fn csv(rows: &[EnergyRow], header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        out.push_str("layer,kind,macs,acs,rate,timesteps,energy_pj\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.layer,
                r.kind.name(),
                fmt(r.macs),
                fmt(r.acs),
                fmt(r.rate),
                r.timesteps,
                fmt(r.energy_pj)
            );
        }
        let (m, a, e) = total(rows);
        let _ = writeln!(out, "TOTAL,,{},{},,,{}", fmt(m), fmt(a), fmt(e));
        out
    }

    pub fn to_csv(&self, header: &[String]) -> String {
        let mut h = header.to_vec();
        h.extend(self.notes.iter().cloned());
        Self::csv(&self.rows, &h)
    }

    pub fn ann_csv(&self, header: &[String]) -> String {
        let mut h = header.to_vec();
        h.extend(self.notes.iter().cloned());
        Self::csv(&self.ann_rows, &h)
    }
}

/// Full energy report for `config` under the measured `trace`.
pub fn energy_spike_model(config: &ModelConfig, trace: &FiringRateTrace, constants: &EnergyConstants) -> Result<EnergyReport> {
    energy_spike_model_with(config, trace, constants, VsaAccounting::default())
}

pub fn energy_spike_model_with(
    config: &ModelConfig,
    trace: &FiringRateTrace,
    constants: &EnergyConstants,
    accounting: VsaAccounting,
) -> Result<EnergyReport> {
    let rows = energy_of_layers(&spike_layers(config)?, trace, constants)?;
    let dense = FiringRateTrace { timesteps: 1, sites: IndexMap::new(), input_density: vec![1.0] };
    let ann_rows = energy_of_layers(&ann_layers(config)?, &dense, constants)?;
    let vsa_layer_pj = energy_vsa_layer_with(config.tokens(), config.channels, constants, accounting);
    let notes = vec![
        format!("e_mac={} pJ, e_ac={} pJ", constants.e_mac, constants.e_ac),
        "scale row (multiply only) is costed at e_mac".into(),
        format!(
            "vsa layer energy is per layer, accounting={}: {}",
            accounting.name(),
            match accounting {
                VsaAccounting::Reported => "e_mac*(3ND^2 + 2ND^2 + 2N^2) + e_mac*N^2",
                VsaAccounting::Literal => "e_mac*(3ND^2 + 2N^2D + 2N^2 + ND^2) + e_mac*N^2",
            }
        ),
        "qkv rate is the mean of the Q_S, K_S and V_S rates; fqkv rate is Q_S + K_S".into(),
    ];
    Ok(EnergyReport { rows, ann_rows, constants: *constants, accounting, vsa_layer_pj, notes })
}
