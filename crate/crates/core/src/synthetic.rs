//! Paired synthetic audio-visual data with controllable cross-modal structure.
//!
//! Each sample draws three independent uniform factors: a shared class, a
//! visual factor and an audio factor. The image shows a class-specific
//! low-frequency grating plus a blob whose position encodes the visual
//! factor; the spectrogram shows a class-specific frequency band plus a
//! broadband burst whose onset encodes the audio factor. The cross label is
//! `(visual_factor + audio_factor) mod classes`, so it is independent of
//! either modality on its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use std::f64::consts::TAU;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub spec_bins: usize,
    pub spec_frames: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 64,
            channels: 3,
            spec_bins: 32,
            spec_frames: 48,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticAVSample<T: Scalar> {
    /// `[C, H, W]`
    pub image: Tensor<T>,
    /// `[1, bins, frames]`
    pub spectrogram: Tensor<T>,
    pub class_id: usize,
    pub visual_factor: usize,
    pub audio_factor: usize,
    pub cross_label: usize,
}

const GRATINGS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
];
const BLOB_COLOR: [f64; 3] = [1.0, 0.6, -0.4];

fn image_value(cfg: &SyntheticConfig, class: usize, visual: usize, ch: usize, y: usize, x: usize) -> f64 {
    let k = cfg.classes as f64;
    let s = cfg.image_size as f64;
    let (u, w) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
    let (fx, fy) = GRATINGS[class % GRATINGS.len()];
    let phase = 0.7 * (class / GRATINGS.len()) as f64 + TAU * ch as f64 / 3.0;
    let grating = 0.5 * (TAU * (fx * u + fy * w) + phase).cos();
    let theta = TAU * visual as f64 / k;
    let (cx, cy) = (0.5 + 0.28 * theta.cos(), 0.5 + 0.28 * theta.sin());
    let d2 = (u - cx).powi(2) + (w - cy).powi(2);
    let blob = BLOB_COLOR[ch % 3] * (-d2 / (2.0 * 0.12 * 0.12)).exp();
    grating + blob
}

fn spec_value(cfg: &SyntheticConfig, class: usize, audio: usize, f: usize, t: usize) -> f64 {
    let k = cfg.classes as f64;
    let fu = (f as f64 + 0.5) / cfg.spec_bins as f64;
    let tu = (t as f64 + 0.5) / cfg.spec_frames as f64;
    let bw = 0.35 / k;
    let band = (-(fu - (class as f64 + 0.5) / k).powi(2) / (2.0 * bw * bw)).exp() * (0.8 + 0.2 * (2.0 * TAU * tu).cos());
    let tw = 0.3 / k;
    let burst = 0.8 * (-(tu - (audio as f64 + 0.5) / k).powi(2) / (2.0 * tw * tw)).exp();
    band + burst
}

/// Generates `n` paired samples. Pure in `seed`.
pub fn generate_synthetic_batch<T: Scalar>(
    n: usize,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<SyntheticAVSample<T>>> {
    if cfg.classes < 2 {
        return Err(Error::config("data.classes", "at least 2 classes are required"));
    }
    if cfg.image_size == 0 || cfg.channels == 0 || cfg.spec_bins == 0 || cfg.spec_frames == 0 {
        return Err(Error::config("data", "all input extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::config("data.noise", e.to_string()))?;
    let (c, s) = (cfg.channels, cfg.image_size);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.random_range(0..cfg.classes);
        let visual_factor = rng.random_range(0..cfg.classes);
        let audio_factor = rng.random_range(0..cfg.classes);
        let mut img = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let v = image_value(cfg, class_id, visual_factor, ch, y, x) + noise.sample(&mut rng);
                    img.push(T::lit(v));
                }
            }
        }
        let mut spec = Vec::with_capacity(cfg.spec_bins * cfg.spec_frames);
        for f in 0..cfg.spec_bins {
            for t in 0..cfg.spec_frames {
                spec.push(T::lit(spec_value(cfg, class_id, audio_factor, f, t) + noise.sample(&mut rng)));
            }
        }
        out.push(SyntheticAVSample {
            image: Tensor::new(&[c, s, s], img)?,
            spectrogram: Tensor::new(&[1, cfg.spec_bins, cfg.spec_frames], spec)?,
            class_id,
            visual_factor,
            audio_factor,
            cross_label: (visual_factor + audio_factor) % cfg.classes,
        });
    }
    Ok(out)
}

/// Stacks per-sample tensors of identical shape along a new leading axis.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::dim("stack", &[], &[]))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::dim("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// `([B, C, H, W], [B, 1, bins, frames])` from a slice of samples.
pub fn stack_batch<T: Scalar>(samples: &[SyntheticAVSample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let imgs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    let specs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.spectrogram).collect();
    Ok((stack(&imgs)?, stack(&specs)?))
}
