use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::model::Probe;

/// Per-token firing rate of `V_S` and of the attention output `V̂_S` on a token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub v_s: Array2<f64>,
    pub v_hat: Array2<f64>,
}

/// Mean over timesteps and channels (hence heads) of `x` `[T, N, D]`, per token.
pub fn token_rates(x: ArrayView3<'_, f64>) -> Array1<f64> {
    let (t, n, d) = x.dim();
    if t == 0 || d == 0 {
        return Array1::zeros(n);
    }
    x.sum_axis(Axis(2)).sum_axis(Axis(0)) / (t * d) as f64
}

fn to_grid(rates: Array1<f64>, grid: (usize, usize)) -> Result<Array2<f64>> {
    let n = rates.len();
    rates.into_shape_with_order(grid).map_err(|_| {
        Error::Geometry(format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1))
    })
}

/// Maps for every block captured by `probe` (which must have been run with attention
/// capture over `batch` samples and `steps` timesteps), averaged over the batch.
pub fn attention_maps(probe: &Probe, steps: usize, batch: usize, grid: (usize, usize)) -> Result<Vec<AttentionMap>> {
    if probe.attention.is_empty() {
        return Err(Error::MissingSite("attention capture".into()));
    }
    probe
        .attention
        .iter()
        .enumerate()
        .map(|(block, (v_s, out))| {
            let per_sample = |x: &Array2<f64>| -> Result<Array1<f64>> {
                let (rows, d) = x.dim();
                let n = rows / (steps * batch).max(1);
                if n * steps * batch != rows {
                    return Err(Error::Shape(format!("{rows} rows for T={steps}, B={batch}")));
                }
                let x4 = x.view().into_shape_with_order((steps, batch, n, d)).expect("row count checked");
                Ok(x4.sum_axis(Axis(3)).sum_axis(Axis(1)).sum_axis(Axis(0)) / (steps * batch * d) as f64)
            };
            Ok(AttentionMap { block, v_s: to_grid(per_sample(v_s)?, grid)?, v_hat: to_grid(per_sample(out)?, grid)? })
        })
        .collect()
}

fn write_csv(map: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Binary 8-bit graymap, values scaled linearly so the minimum maps to 0 and the maximum
/// to 255. A constant map is written as all zeros.
pub fn write_pgm(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `{stem}_vs.{csv,pgm}` and `{stem}_vhat.{csv,pgm}` into `dir` from `[T, N, D]`
/// spike tensors. Returns the two grids and the written paths.
pub fn attention_map_export(
    v_s: ArrayView3<'_, f64>,
    v_hat: ArrayView3<'_, f64>,
    grid: (usize, usize),
    dir: &Path,
    stem: &str,
) -> Result<(Array2<f64>, Array2<f64>, Vec<PathBuf>)> {
    if v_s.dim() != v_hat.dim() {
        return Err(Error::Shape(format!("V_S {:?} vs output {:?}", v_s.dim(), v_hat.dim())));
    }
    let a = to_grid(token_rates(v_s), grid)?;
    let b = to_grid(token_rates(v_hat), grid)?;
    let paths = write_maps(&a, &b, dir, stem)?;
    Ok((a, b, paths))
}

pub(crate) fn write_maps(v_s: &Array2<f64>, v_hat: &Array2<f64>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (suffix, map) in [("vs", v_s), ("vhat", v_hat)] {
        let csv = dir.join(format!("{stem}_{suffix}.csv"));
        let pgm = dir.join(format!("{stem}_{suffix}.pgm"));
        write_csv(map, &csv)?;
        write_pgm(map, &pgm)?;
        paths.push(csv);
        paths.push(pgm);
    }
    Ok(paths)
}

impl AttentionMap {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        write_maps(&self.v_s, &self.v_hat, dir, &format!("block{}", self.block + 1))
    }
}
