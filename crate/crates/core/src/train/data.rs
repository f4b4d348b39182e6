use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Four classes: stripe orientation 0°, 45°, 90° or 135°, random period and phase.
    Stripes,
    /// Three classes: one, two or three bright blobs at random positions.
    Blobs,
    /// Two classes: XOR of the brightness of two fixed patches.
    XorPatch,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Stripes => "stripes",
            DatasetKind::Blobs => "blobs",
            DatasetKind::XorPatch => "xor-patch",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "stripes" => Some(DatasetKind::Stripes),
            "blobs" => Some(DatasetKind::Blobs),
            "xor-patch" | "xor_patch" => Some(DatasetKind::XorPatch),
            _ => None,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Stripes => 4,
            DatasetKind::Blobs => 3,
            DatasetKind::XorPatch => 2,
        }
    }
}

/// Image geometry `C × H × W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, C, H, W]`, values in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len_of(Axis(0)), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidParam(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        let (_, channels, height, width) = self.images.dim();
        Geometry { channels, height, width }
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        (self.images.select(Axis(0), indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Deterministic synthetic image set with `n_per_class` samples per class, classes
/// interleaved (`label = i mod classes`).
pub fn synth_dataset(kind: DatasetKind, n_per_class: usize, geometry: Geometry, seed: u64) -> Result<Dataset> {
    let Geometry { channels, height, width } = geometry;
    if channels == 0 || height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Geometry(format!(
            "{channels}x{height}x{width}: need channels > 0 and sides that are positive multiples of 16"
        )));
    }
    let classes = kind.num_classes();
    let n = n_per_class * classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::zeros((n, channels, height, width));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &label) in labels.iter().enumerate() {
        let mut plane = ndarray::Array2::<f64>::zeros((height, width));
        match kind {
            DatasetKind::Stripes => {
                let theta = label as f64 * std::f64::consts::FRAC_PI_4;
                let period = rng.random_range(4.0..8.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let (c, s) = (theta.cos(), theta.sin());
                for ((y, x), v) in plane.indexed_iter_mut() {
                    let proj = x as f64 * c + y as f64 * s;
                    *v = 0.5 + 0.5 * (std::f64::consts::TAU * proj / period + phase).sin();
                }
            }
            DatasetKind::Blobs => {
                for _ in 0..=label {
                    let cy = rng.random_range(0.0..height as f64);
                    let cx = rng.random_range(0.0..width as f64);
                    let sigma = rng.random_range(0.08..0.12) * height.min(width) as f64;
                    for ((y, x), v) in plane.indexed_iter_mut() {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        *v = v.max((-d2 / (2.0 * sigma * sigma)).exp());
                    }
                }
            }
            DatasetKind::XorPatch => {
                let a = rng.random_bool(0.5);
                let b = a ^ (label == 1);
                let (hh, hw) = (height / 2, width / 2);
                let level = |on: bool| if on { 0.9 } else { 0.1 };
                plane.slice_mut(s![..hh, ..hw]).fill(level(a));
                plane.slice_mut(s![hh.., hw..]).fill(level(b));
                plane.slice_mut(s![..hh, hw..]).fill(0.5);
                plane.slice_mut(s![hh.., ..hw]).fill(0.5);
            }
        }
        for ch in 0..channels {
            let gain = rng.random_range(0.8..1.0);
            for ((y, x), &v) in plane.indexed_iter() {
                let noise = rng.random_range(-0.05..0.05);
                images[[i, ch, y, x]] = (gain * v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Dataset::new(images, labels, classes)
}
