//! Dense kernels on row-major activations `[rows, channels]`.
//!
//! Spatial tensors use rows ordered `(image, y, x)` with channels last, so a
//! token sequence is the same matrix once the grid is flattened.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

/// Fixed split of work for reductions, independent of the thread count.
const REDUCE_CHUNKS: usize = 16;

fn im2col(x: ArrayView2<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let c_in = x.ncols();
    let mut cols = Array2::zeros((h * w, c_in * 9));
    for y in 0..h {
        for xx in 0..w {
            let mut row = cols.row_mut(y * w + xx);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = x.row(sy as usize * w + sx as usize);
                    for (ci, &v) in src.iter().enumerate() {
                        row[ci * 9 + ky * 3 + kx] = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: ArrayView2<'_, f64>, mut dx: ndarray::ArrayViewMut2<'_, f64>, h: usize, w: usize) {
    let c_in = dx.ncols();
    for y in 0..h {
        for xx in 0..w {
            let row = cols.row(y * w + xx);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let mut dst = dx.row_mut(sy as usize * w + sx as usize);
                    for ci in 0..c_in {
                        dst[ci] += row[ci * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1, no bias. `weight` is `[c_out, c_in * 9]`
/// with column index `ci * 9 + ky * 3 + kx`.
pub(crate) fn conv3x3(
    x: ArrayView2<'_, f64>,
    images: usize,
    h: usize,
    w: usize,
    weight: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let hw = h * w;
    debug_assert_eq!(x.nrows(), images * hw);
    let mut out = Array2::zeros((images * hw, weight.nrows()));
    out.axis_chunks_iter_mut(Axis(0), hw)
        .into_par_iter()
        .zip(x.axis_chunks_iter(Axis(0), hw).into_par_iter())
        .for_each(|(mut dst, src)| {
            let cols = im2col(src, h, w);
            dst.assign(&cols.dot(&weight.t()));
        });
    out
}

/// Returns `(dx, dweight)`; `dx` is skipped when `need_input_grad` is false.
pub(crate) fn conv3x3_backward(
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    images: usize,
    h: usize,
    w: usize,
    weight: ArrayView2<'_, f64>,
    need_input_grad: bool,
) -> (Option<Array2<f64>>, Array2<f64>) {
    let hw = h * w;
    let per_chunk = images.div_ceil(REDUCE_CHUNKS).max(1);
    let mut dx = need_input_grad.then(|| Array2::zeros(x.raw_dim()));
    let partials: Vec<Array2<f64>> = match dx.as_mut() {
        Some(dx) => dx
            .axis_chunks_iter_mut(Axis(0), hw * per_chunk)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), hw * per_chunk).into_par_iter())
            .zip(dy.axis_chunks_iter(Axis(0), hw * per_chunk).into_par_iter())
            .map(|((mut dx_chunk, x_chunk), dy_chunk)| {
                let mut dw = Array2::zeros(weight.raw_dim());
                let n = x_chunk.nrows() / hw;
                for i in 0..n {
                    let rows = s![i * hw..(i + 1) * hw, ..];
                    let cols = im2col(x_chunk.slice(rows), h, w);
                    let g = dy_chunk.slice(rows);
                    dw += &g.t().dot(&cols);
                    let dcols = g.dot(&weight);
                    col2im_add(dcols.view(), dx_chunk.slice_mut(rows), h, w);
                }
                dw
            })
            .collect(),
        None => x
            .axis_chunks_iter(Axis(0), hw * per_chunk)
            .into_par_iter()
            .zip(dy.axis_chunks_iter(Axis(0), hw * per_chunk).into_par_iter())
            .map(|(x_chunk, dy_chunk)| {
                let mut dw = Array2::zeros(weight.raw_dim());
                let n = x_chunk.nrows() / hw;
                for i in 0..n {
                    let rows = s![i * hw..(i + 1) * hw, ..];
                    let cols = im2col(x_chunk.slice(rows), h, w);
                    dw += &dy_chunk.slice(rows).t().dot(&cols);
                }
                dw
            })
            .collect(),
    };
    let mut dweight = Array2::zeros(weight.raw_dim());
    for p in partials {
        dweight += &p;
    }
    (dx, dweight)
}

/// 2×2 max pooling with stride 2. Returns the pooled rows and, for every output
/// element, the input row that won (first maximum in scan order).
pub(crate) fn maxpool2(
    x: ArrayView2<'_, f64>,
    images: usize,
    h: usize,
    w: usize,
) -> (Array2<f64>, Vec<u32>) {
    let c = x.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((images * oh * ow, c));
    let mut arg = vec![0u32; images * oh * ow * c];
    for img in 0..images {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (img * oh + oy) * ow + ox;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_row = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let r = (img * h + 2 * oy + dy) * w + 2 * ox + dx;
                            let v = x[[r, ch]];
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                    }
                    out[[o, ch]] = best;
                    arg[o * c + ch] = best_row as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dy: ArrayView2<'_, f64>, arg: &[u32], input_rows: usize) -> Array2<f64> {
    let c = dy.ncols();
    let mut dx = Array2::zeros((input_rows, c));
    for (o, row) in dy.rows().into_iter().enumerate() {
        for (ch, &g) in row.iter().enumerate() {
            dx[[arg[o * c + ch] as usize, ch]] += g;
        }
    }
    dx
}

/// `x · Wᵀ + b` with `W: [out, in]`.
pub(crate) fn linear(x: ArrayView2<'_, f64>, weight: ArrayView2<'_, f64>, bias: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    y += &bias;
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&weight), dy.t().dot(&x), dy.sum_axis(Axis(0)))
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_stats: bool,
}

/// Batch statistics observed in training mode: mean and unbiased variance.
#[derive(Clone, Debug)]
pub(crate) struct NormStats {
    pub mean: Array1<f64>,
    pub var_unbiased: Array1<f64>,
}

/// Per-channel normalization. With `running = None` the statistics come from the
/// rows of `x` (training); otherwise the stored running mean and variance are used.
pub(crate) fn batch_norm(
    x: ArrayView2<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    running: Option<(ArrayView1<'_, f64>, ArrayView1<'_, f64>)>,
) -> (Array2<f64>, NormCache, Option<NormStats>) {
    let m = x.nrows() as f64;
    let (mean, var, stats) = match running {
        Some((mean, var)) => (mean.to_owned(), var.to_owned(), None),
        None => {
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let mut var = Array1::zeros(x.ncols());
            for row in x.rows() {
                Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &mu| *v += (x - mu) * (x - mu));
            }
            var /= m;
            let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
            (mean.clone(), var, Some(NormStats { mean, var_unbiased: unbiased }))
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.to_owned();
    for mut row in xhat.rows_mut() {
        Zip::from(&mut row).and(&mean).and(&inv_std).for_each(|v, &mu, &is| *v = (*v - mu) * is);
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row).and(&gamma).and(&beta).for_each(|v, &g, &b| *v = *v * g + b);
    }
    let cache = NormCache { xhat, inv_std, batch_stats: stats.is_some() };
    (y, cache, stats)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward(
    dy: ArrayView2<'_, f64>,
    cache: &NormCache,
    gamma: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = dy.nrows() as f64;
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let scale = &gamma * &cache.inv_std;
    let mut dx = dy.to_owned();
    if cache.batch_stats {
        Zip::from(dx.rows_mut()).and(cache.xhat.rows()).for_each(|mut d, xh| {
            Zip::from(&mut d)
                .and(&xh)
                .and(&scale)
                .and(&dbeta)
                .and(&dgamma)
                .for_each(|d, &xh, &sc, &db, &dg| *d = sc / m * (m * *d - db - xh * dg));
        });
    } else {
        for mut row in dx.rows_mut() {
            row *= &scale;
        }
    }
    (dx, dgamma, dbeta)
}
