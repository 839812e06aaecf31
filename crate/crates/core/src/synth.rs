//! Synthetic two-class ridge textures.
//!
//! Each pair shares one oriented sinusoidal ridge field. The live image adds
//! strong per-pixel speckle; the fake image is the same field low-pass
//! filtered (a "smooth" or "flat" material) with faint speckle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Label, Sample, UNKNOWN_MATERIAL};
use crate::error::{contract_err, Result};
use crate::model::{min_input_extent, CONV1_GEOM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FREQ_BAND: (f64, f64) = (0.08, 0.14);
const CONTRAST_BAND: (f64, f64) = (0.6, 0.9);
const LIVE_SPECKLE: f64 = 0.12;
const FAKE_SPECKLE: f64 = 0.03;

/// Fake materials and the box-filter passes that produce them.
pub const FAKE_MATERIALS: [(&str, usize, usize); 2] = [("smooth", 5, 2), ("flat", 7, 1)];

/// `n_per_class` live and `n_per_class` fake samples, interleaved
/// `live, fake, live, fake, …`.
pub fn synth_textures<T: Scalar>(n_per_class: usize, size: (usize, usize), seed: u64) -> Result<Vec<Sample<T>>> {
    let (h, w) = size;
    let min = min_input_extent(CONV1_GEOM);
    if h < min || w < min {
        return contract_err(format!("synthetic size {h}×{w} is below the network minimum {min}×{min}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let ridge = ridge_field(h, w, &mut rng);
        let live = add_speckle(&ridge, LIVE_SPECKLE, &mut rng);
        let (material, k, passes) = FAKE_MATERIALS[i % FAKE_MATERIALS.len()];
        let mut smooth = ridge;
        for _ in 0..passes {
            smooth = box_blur(&smooth, h, w, k);
        }
        let fake = add_speckle(&smooth, FAKE_SPECKLE, &mut rng);
        out.push(sample(live, h, w, Label::Live, UNKNOWN_MATERIAL)?);
        out.push(sample(fake, h, w, Label::Fake, material)?);
    }
    Ok(out)
}

fn sample<T: Scalar>(pixels: Vec<f64>, h: usize, w: usize, label: Label, material: &str) -> Result<Sample<T>> {
    // quantize to k/255 so that writing and re-reading is lossless
    let data = pixels.into_iter().map(|v| T::cast((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)).collect();
    Ok(Sample {
        image: Tensor::from_vec(&[1, h, w], data)?,
        label,
        material: material.to_string(),
        subject: None,
        source: None,
    })
}

fn ridge_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.gen_range(0.0..PI);
    let freq = rng.gen_range(FREQ_BAND.0..FREQ_BAND.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(CONTRAST_BAND.0..CONTRAST_BAND.1);
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let t = x as f64 * c + y as f64 * s;
            out.push(0.5 + 0.5 * contrast * (2.0 * PI * freq * t + phase).sin());
        }
    }
    out
}

fn add_speckle(field: &[f64], amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    field.iter().map(|&v| v + rng.gen_range(-amplitude..=amplitude)).collect()
}

/// `k×k` mean filter with edge clamping.
fn box_blur(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let at = |y: isize, x: isize| src[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = acc / (k * k) as f64;
        }
    }
    out
}

/// Mean absolute response of the 4-neighbour Laplacian over interior pixels.
pub fn mean_abs_laplacian<T: Scalar>(image: &Tensor<T>) -> f64 {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let p = |y: usize, x: usize| image.data()[y * w + x].to_f64_lossy();
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            acc += (4.0 * p(y, x) - p(y - 1, x) - p(y + 1, x) - p(y, x - 1) - p(y, x + 1)).abs();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

pub fn pixel_variance<T: Scalar>(image: &Tensor<T>) -> f64 {
    let n = image.len() as f64;
    let mean = image.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    image.data().iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n
}
