//! Stochastic per-channel augmentation with counter-keyed randomness.
//!
//! Each sample's random draws come from a stream keyed by
//! `(base seed, global step, channel, sample index)`, so results do not
//! depend on execution order and channels can be evaluated concurrently or
//! in any order with identical output.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng::{self, DOMAIN_AUGMENT};
use crate::tensor::{Elem, Tensor};

use super::{DataError, Dataset, MiniBatch};

const PAD: usize = 4;

/// One augmentation stream: `A` carries gradients, the rest produce soft
/// labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelId(pub u8);

impl ChannelId {
    pub const A: ChannelId = ChannelId(0);
    pub const B: ChannelId = ChannelId(1);
    pub const C: ChannelId = ChannelId(2);
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 26 {
            write!(f, "{}", (b'A' + self.0) as char)
        } else {
            write!(f, "ch{}", self.0)
        }
    }
}

/// The augmentation set: pad-4 random crop, horizontal flip, cutout.
/// Normalization always runs last and is not part of the recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub pad4_crop: bool,
    pub hflip: bool,
    pub cutout: Option<usize>,
}

impl Recipe {
    pub fn empty() -> Self {
        Recipe {
            pad4_crop: false,
            hflip: false,
            cutout: None,
        }
    }

    pub fn standard() -> Self {
        Recipe {
            pad4_crop: true,
            hflip: true,
            cutout: None,
        }
    }

    /// Parses recipe element names; `cutout` takes its square size from
    /// `cutout_size`.
    pub fn parse(elements: &[String], cutout_size: usize) -> Result<Self, DataError> {
        let mut recipe = Recipe::empty();
        for e in elements {
            match e.as_str() {
                "pad4_crop" => recipe.pad4_crop = true,
                "hflip" => recipe.hflip = true,
                "cutout" => recipe.cutout = Some(cutout_size),
                other => return Err(DataError::UnknownRecipe(other.to_string())),
            }
        }
        Ok(recipe)
    }

    pub fn is_empty(&self) -> bool {
        !self.pad4_crop && !self.hflip && self.cutout.is_none()
    }
}

/// One channel's augmented, normalized view of a mini-batch.
pub struct ChannelView<E: Elem> {
    pub channel: ChannelId,
    pub indices: Vec<u32>,
    /// Shape `(n, C, H, W)`.
    pub tensor: Tensor<E>,
}

fn sample_stream(base_seed: u64, step: u64, channel: ChannelId, sample: u32) -> ChaCha8Rng {
    rng::stream(
        base_seed,
        DOMAIN_AUGMENT | (channel.0 as u32) << 8,
        step,
        sample as u64,
    )
}

/// Augments a single raw sample, returning 8-bit pixels before
/// normalization. Draw order per sample is fixed: crop dy, crop dx, flip,
/// cutout cx, cutout cy.
pub fn augment_raw(
    ds: &Dataset,
    sample_index: u32,
    channel: ChannelId,
    global_step: u64,
    base_seed: u64,
    recipe: &Recipe,
) -> Vec<u8> {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let src = ds.image(sample_index as usize);
    let mut out = vec![0u8; c * h * w];
    let mut stream = sample_stream(base_seed, global_step, channel, sample_index);

    let (dy, dx) = if recipe.pad4_crop {
        (
            rng::uniform_usize(&mut stream, 2 * PAD + 1) as isize,
            rng::uniform_usize(&mut stream, 2 * PAD + 1) as isize,
        )
    } else {
        (PAD as isize, PAD as isize)
    };
    let flip = recipe.hflip && rng::coin(&mut stream);

    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = y as isize + dy - PAD as isize;
            for x in 0..w {
                let x_read = if flip { w - 1 - x } else { x };
                let sx = x_read as isize + dx - PAD as isize;
                dst[y * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    0
                } else {
                    plane[sy as usize * w + sx as usize]
                };
            }
        }
    }

    if let Some(s) = recipe.cutout {
        let cx = rng::uniform_usize(&mut stream, w) as isize;
        let cy = rng::uniform_usize(&mut stream, h) as isize;
        let half = (s / 2) as isize;
        let y0 = (cy - half).max(0) as usize;
        let y1 = ((cy - half + s as isize).max(0) as usize).min(h);
        let x0 = (cx - half).max(0) as usize;
        let x1 = ((cx - half + s as isize).max(0) as usize).min(w);
        for ch in 0..c {
            for y in y0..y1 {
                out[ch * h * w + y * w + x0..ch * h * w + y * w + x1].fill(0);
            }
        }
    }
    out
}

fn normalize_into<E: Elem>(ds: &Dataset, pixels: &[u8], dst: &mut [E]) {
    let plane = ds.height * ds.width;
    for c in 0..ds.channels {
        let mean = ds.norm.mean[c];
        let inv_std = 1.0 / ds.norm.std[c];
        for (d, &v) in dst[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(&pixels[c * plane..(c + 1) * plane])
        {
            *d = E::from_f64((v as f64 / 255.0 - mean) * inv_std);
        }
    }
}

/// Builds one channel's augmented, normalized `(n, C, H, W)` tensor for a
/// mini-batch.
pub fn augment<E: Elem>(
    ds: &Dataset,
    batch: &MiniBatch,
    channel: ChannelId,
    global_step: u64,
    base_seed: u64,
    recipe: &Recipe,
) -> ChannelView<E> {
    let sample = ds.sample_len();
    let mut tensor = Tensor::zeros(&[batch.len(), ds.channels, ds.height, ds.width]);
    // Per-sample randomness is keyed, not sequential, so the batch loop can
    // run on any thread layout and still produce identical bytes.
    tensor
        .data_mut()
        .par_chunks_mut(sample)
        .zip(batch.indices.par_iter())
        .for_each(|(dst, &index)| {
            let pixels = if recipe.is_empty() {
                ds.image(index as usize).to_vec()
            } else {
                augment_raw(ds, index, channel, global_step, base_seed, recipe)
            };
            normalize_into(ds, &pixels, dst);
        });
    ChannelView {
        channel,
        indices: batch.indices.clone(),
        tensor,
    }
}

/// Normalization-only view used at evaluation time.
pub fn normalize_batch<E: Elem>(ds: &Dataset, indices: &[u32]) -> Tensor<E> {
    let sample = ds.sample_len();
    let mut tensor = Tensor::zeros(&[indices.len(), ds.channels, ds.height, ds.width]);
    for (i, &index) in indices.iter().enumerate() {
        normalize_into(
            ds,
            ds.image(index as usize),
            &mut tensor.data_mut()[i * sample..(i + 1) * sample],
        );
    }
    tensor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn dataset() -> Dataset {
        let n = 6;
        let images: Vec<u8> = (0..n * 3 * 32 * 32).map(|v| 1 + (v % 254) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|v| (v % 3) as u8).collect();
        Dataset::new(Split::Train, 3, (3, 32, 32), images, labels).unwrap()
    }

    #[test]
    fn empty_recipe_channels_agree_exactly() {
        let ds = dataset();
        let batch = ds.minibatch(&[0, 3, 5]).unwrap();
        let recipe = Recipe::empty();
        let a: ChannelView<f64> = augment(&ds, &batch, ChannelId::A, 9, 42, &recipe);
        let b: ChannelView<f64> = augment(&ds, &batch, ChannelId::B, 9, 42, &recipe);
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.tensor, normalize_batch::<f64>(&ds, &batch.indices));
    }

    #[test]
    fn same_key_reproduces_same_output() {
        let ds = dataset();
        let recipe = Recipe {
            pad4_crop: true,
            hflip: true,
            cutout: Some(8),
        };
        let one = augment_raw(&ds, 2, ChannelId::B, 17, 5, &recipe);
        let two = augment_raw(&ds, 2, ChannelId::B, 17, 5, &recipe);
        assert_eq!(one, two);
        let other_step = augment_raw(&ds, 2, ChannelId::B, 18, 5, &recipe);
        assert_ne!(one, other_step);
    }

    #[test]
    fn channels_diverge_under_stochastic_recipe() {
        let ds = dataset();
        let recipe = Recipe::standard();
        let a = augment_raw(&ds, 1, ChannelId::A, 3, 11, &recipe);
        let b = augment_raw(&ds, 1, ChannelId::B, 3, 11, &recipe);
        assert_ne!(a, b);
    }

    #[test]
    fn cutout_zero_count_matches_clipped_rectangle() {
        let ds = {
            // All-255 pixels so zeros can only come from the cutout.
            let n = 4;
            let images = vec![255u8; n * 3 * 32 * 32];
            let labels = vec![0u8; n];
            Dataset::new(Split::Train, 2, (3, 32, 32), images, labels).unwrap()
        };
        let recipe = Recipe {
            pad4_crop: false,
            hflip: false,
            cutout: Some(16),
        };
        for step in 0..50u64 {
            let out = augment_raw(&ds, 0, ChannelId::A, step, 123, &recipe);
            let zeros = out.iter().filter(|&&v| v == 0).count() / 3;
            // Independent geometric oracle: replay the draws and clip.
            let mut stream = sample_stream(123, step, ChannelId::A, 0);
            let cx = rng::uniform_usize(&mut stream, 32) as isize;
            let cy = rng::uniform_usize(&mut stream, 32) as isize;
            let clip = |c: isize| -> (usize, usize) {
                let lo = (c - 8).max(0) as usize;
                let hi = ((c + 8).max(0) as usize).min(32);
                (lo, hi)
            };
            let (y0, y1) = clip(cy);
            let (x0, x1) = clip(cx);
            let area = (y1 - y0) * (x1 - x0);
            assert_eq!(zeros, area);
            assert!((64..=256).contains(&zeros), "zeros {zeros}");
        }
    }

    #[test]
    fn unknown_recipe_element_rejected() {
        let err = Recipe::parse(&["mixup".to_string()], 16);
        assert!(matches!(err, Err(DataError::UnknownRecipe(name)) if name == "mixup"));
    }

    #[test]
    fn crop_offsets_stay_in_range() {
        // With an all-255 image and no flip/cutout, the count of zero pixels
        // reveals the crop shift; it must be at most 4 pixels in each axis.
        let images = vec![255u8; 32 * 32];
        let ds = Dataset::new(Split::Train, 2, (1, 32, 32), images, vec![1]).unwrap();
        let recipe = Recipe {
            pad4_crop: true,
            hflip: false,
            cutout: None,
        };
        for step in 0..30 {
            let out = augment_raw(&ds, 0, ChannelId::A, step, 7, &recipe);
            let zero_rows = (0..32)
                .filter(|&y| (0..32).all(|x| out[y * 32 + x] == 0))
                .count();
            let zero_cols = (0..32)
                .filter(|&x| (0..32).all(|y| out[y * 32 + x] == 0))
                .count();
            assert!(zero_rows <= 4 && zero_cols <= 4);
        }
    }
}
