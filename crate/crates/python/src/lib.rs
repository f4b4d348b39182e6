//! Python bindings. Tensors cross the boundary as nested lists.

use std::path::PathBuf;

use ndarray::{Array3, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spikedrive::model::checkpoint::{load_checkpoint, save_checkpoint};
use spikedrive::model::{repeat_over_time, PassOptions};
use spikedrive::profiler::{self, EnergyConstants, FiringRateTrace, VsaAccounting};
use spikedrive::train::argmax_rows;
use spikedrive::{build_model, lif_forward, LifParams, MembraneTensor, ModelConfig};

fn err(e: spikedrive::Error) -> PyErr {
    if e.is_numeric() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn constants(e_mac: f64, e_ac: f64) -> PyResult<EnergyConstants> {
    EnergyConstants::new(e_mac, e_ac).map_err(err)
}

fn accounting(name: &str) -> PyResult<VsaAccounting> {
    VsaAccounting::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown accounting `{name}`")))
}

fn images_from(nested: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Array4<f64>> {
    let b = nested.len();
    let c = nested.first().map_or(0, Vec::len);
    let h = nested.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let w = nested.first().and_then(|x| x.first()).and_then(|x| x.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = nested.into_iter().flatten().flatten().flatten().collect();
    Array4::from_shape_vec((b, c, h, w), flat)
        .map_err(|_| PyValueError::new_err("images must be a rectangular [B][C][H][W] nested list"))
}

/// LIF spikes for a `[T][M]` input current.
#[pyfunction]
#[pyo3(signature = (inputs, u_th = 1.0, beta = 0.5, v_reset = 0.0))]
fn lif(inputs: Vec<Vec<f64>>, u_th: f64, beta: f64, v_reset: f64) -> PyResult<Vec<Vec<u32>>> {
    let t = inputs.len();
    let m = inputs.first().map_or(0, Vec::len);
    let flat: Vec<f64> = inputs.into_iter().flatten().collect();
    let x = Array3::from_shape_vec((t, 1, m), flat)
        .map_err(|_| PyValueError::new_err("inputs must be a rectangular [T][M] nested list"))?;
    let p = LifParams::new(u_th, beta, v_reset, LifParams::default().surrogate_width).map_err(err)?;
    let (s, _) = lif_forward(&MembraneTensor::new(x).map_err(err)?, &p).map_err(err)?;
    Ok(s.data().outer_iter().map(|row| row.iter().map(|&s| u32::from(s)).collect()).collect())
}

#[pyfunction]
fn flops_conv(k: usize, h_out: usize, w_out: usize, c_in: usize, c_out: usize) -> PyResult<u64> {
    profiler::flops_conv(k, h_out, w_out, c_in, c_out).map_err(err)
}

#[pyfunction]
fn flops_mlp(i: usize, o: usize) -> PyResult<u64> {
    profiler::flops_mlp(i, o).map_err(err)
}

/// Energy of one vanilla self-attention layer in pJ.
#[pyfunction]
#[pyo3(signature = (n_tokens, d_channels, e_mac = 4.6, e_ac = 0.9, accounting = "reported"))]
fn energy_vsa_layer(n_tokens: usize, d_channels: usize, e_mac: f64, e_ac: f64, accounting: &str) -> PyResult<f64> {
    Ok(profiler::energy_vsa_layer_with(n_tokens, d_channels, &constants(e_mac, e_ac)?, self::accounting(accounting)?))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: spikedrive::Model,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised `blocks-channels` model.
    #[new]
    #[pyo3(signature = (blocks, channels, num_classes = 1000, height = 224, width = 224, in_channels = 3, timesteps = 4, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        blocks: usize,
        channels: usize,
        num_classes: usize,
        height: usize,
        width: usize,
        in_channels: usize,
        timesteps: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let base = ModelConfig::small(blocks, channels, num_classes);
        let config = ModelConfig { height, width, in_channels, timesteps, ..base };
        Ok(Self { inner: build_model(&config, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &[], &path).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.count_params()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.config();
        let d = PyDict::new(py);
        d.set_item("timesteps", c.timesteps)?;
        d.set_item("blocks", c.blocks)?;
        d.set_item("channels", c.channels)?;
        d.set_item("heads", c.heads)?;
        d.set_item("in_channels", c.in_channels)?;
        d.set_item("height", c.height)?;
        d.set_item("width", c.width)?;
        d.set_item("num_classes", c.num_classes)?;
        d.set_item("attention", c.attention.name())?;
        Ok(d)
    }

    /// Time-averaged logits for a `[B][C][H][W]` batch (static encoding, inference mode).
    fn forward(&self, images: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<Vec<f64>>> {
        let x = images_from(images)?;
        let t = self.inner.config().timesteps;
        let out = self
            .inner
            .forward(repeat_over_time(x.view(), t).view(), PassOptions::inference(), None)
            .map_err(err)?;
        Ok(out.logits.outer_iter().map(|r| r.to_vec()).collect())
    }

    fn predict(&self, images: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<usize>> {
        let x = images_from(images)?;
        let t = self.inner.config().timesteps;
        let out = self
            .inner
            .forward(repeat_over_time(x.view(), t).view(), PassOptions::inference(), None)
            .map_err(err)?;
        Ok(argmax_rows(out.logits.view()))
    }

    /// Energy estimate from firing rates traced on `images`; with `images=None` every rate is `rate`.
    #[pyo3(signature = (images = None, rate = 0.0, e_mac = 4.6, e_ac = 0.9, accounting = "reported"))]
    fn energy<'py>(
        &self,
        py: Python<'py>,
        images: Option<Vec<Vec<Vec<Vec<f64>>>>>,
        rate: f64,
        e_mac: f64,
        e_ac: f64,
        accounting: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let config = self.inner.config();
        let trace = match images {
            Some(images) => profiler::sfr_trace(&self.inner, images_from(images)?.view()).map_err(err)?,
            None => FiringRateTrace::uniform(config, rate),
        };
        let report = profiler::energy_spike_model_with(config, &trace, &constants(e_mac, e_ac)?, self::accounting(accounting)?)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("total_pj", report.total_pj())?;
        d.set_item("ann_total_pj", report.ann_total_pj())?;
        d.set_item("ratio", report.ratio())?;
        d.set_item("vsa_layer_pj", report.vsa_layer_pj)?;
        let rows = PyDict::new(py);
        for r in &report.rows {
            rows.set_item(&r.layer, r.energy_pj)?;
        }
        d.set_item("rows", rows)?;
        Ok(d)
    }
}

#[pymodule(name = "spikedrive")]
fn spikedrive_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lif, m)?)?;
    m.add_function(wrap_pyfunction!(flops_conv, m)?)?;
    m.add_function(wrap_pyfunction!(flops_mlp, m)?)?;
    m.add_function(wrap_pyfunction!(energy_vsa_layer, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
