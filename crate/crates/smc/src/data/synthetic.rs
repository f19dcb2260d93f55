//! Procedural class-structured image generator.
//!
//! Produces RGB datasets in the same shape and byte layout as CIFAR so the
//! full pipeline (binary files, loaders, augmentation, training) can run
//! self-contained. Each class pairs a radial ring frequency with one of two
//! color palettes; both cues survive crops and horizontal flips, while
//! per-sample phase, center jitter, amplitude and pixel noise leave enough
//! variation for a network to overfit when labels are corrupted.

use crate::rng::{self, DOMAIN_SYNTH};

use super::{DataError, Dataset, Split};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Signal amplitude in 8-bit pixel units.
    pub amplitude: f64,
    /// Uniform pixel noise half-range in 8-bit pixel units.
    pub noise: f64,
    /// Ring frequency of the first class pair, cycles per half-extent.
    pub freq_base: f64,
    /// Frequency spacing between class pairs.
    pub freq_step: f64,
    /// Per-sample frequency jitter half-range; brings neighbors closer.
    pub freq_jitter: f64,
    /// Per-sample channel tint half-range in 8-bit units. Tint survives
    /// crops and flips, giving every sample a stable fingerprint.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            train_per_class: 500,
            val_per_class: 100,
            height: 32,
            width: 32,
            amplitude: 46.0,
            noise: 25.0,
            freq_base: 1.1,
            freq_step: 0.55,
            freq_jitter: 0.22,
            tint: 0.0,
            seed: 0,
        }
    }
}

const PALETTES: [[f64; 3]; 2] = [[1.0, 0.55, 0.3], [0.3, 0.55, 1.0]];

fn render_sample(spec: &SynthSpec, class: usize, split_tag: u64, index: u64) -> Vec<u8> {
    let mut stream = rng::stream(spec.seed, DOMAIN_SYNTH, split_tag, index);
    let (h, w) = (spec.height, spec.width);
    let palette = &PALETTES[class % 2];
    let freq = spec.freq_base
        + spec.freq_step * (class / 2) as f64
        + (rng::uniform_f64(&mut stream) * 2.0 - 1.0) * spec.freq_jitter;

    let phase = rng::uniform_f64(&mut stream) * std::f64::consts::TAU;
    let cx = w as f64 / 2.0 + (rng::uniform_f64(&mut stream) - 0.5) * 6.0;
    let cy = h as f64 / 2.0 + (rng::uniform_f64(&mut stream) - 0.5) * 6.0;
    let amp = spec.amplitude * (0.75 + 0.25 * rng::uniform_f64(&mut stream));
    let tint: Vec<f64> = (0..3)
        .map(|_| (rng::uniform_f64(&mut stream) * 2.0 - 1.0) * spec.tint)
        .collect();

    let radius_scale = std::f64::consts::TAU / (w.min(h) as f64 / 2.0);
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let ring = (r * radius_scale * freq + phase).sin();
            for c in 0..3 {
                let noise = (rng::uniform_f64(&mut stream) - 0.5) * 2.0 * spec.noise;
                let v = 128.0 + amp * palette[c] * ring + tint[c] + noise;
                out[c * h * w + y * w + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn build_split(spec: &SynthSpec, per_class: usize, split: Split) -> Result<Dataset, DataError> {
    let tag = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    let n = per_class * spec.classes;
    let mut images = Vec::with_capacity(n * 3 * spec.height * spec.width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        images.extend_from_slice(&render_sample(spec, class, tag, i as u64));
        labels.push(class as u8);
    }
    Dataset::new(
        split,
        spec.classes,
        (3, spec.height, spec.width),
        images,
        labels,
    )
}

/// Generates a train/val pair; the val split inherits the train split's
/// normalization statistics, mirroring the file loaders.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Dataset), DataError> {
    let train = build_split(spec, spec.train_per_class, Split::Train)?;
    let mut val = build_split(spec, spec.val_per_class, Split::Val)?;
    val.set_normalization(train.norm.clone());
    Ok((train, val))
}
