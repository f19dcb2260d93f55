//! Datasets, loaders, epoch sampling, per-channel augmentation and label
//! noise.

mod augment;
mod cifar;
mod idx;
mod noise;
mod sampler;
mod synthetic;

pub use augment::{augment, augment_raw, normalize_batch, ChannelId, ChannelView, Recipe};
pub use cifar::{
    load_cifar10, write_cifar10_layout, write_cifar_batch, CIFAR_CLASSES, CIFAR_RECORD_BYTES,
};
pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use noise::{inject_label_noise, CorruptionMask, MaskEntry, NoiseSpec};
pub use sampler::EpochSampler;
pub use synthetic::{generate_synthetic, SynthSpec};

use std::path::PathBuf;

use crate::rng::{self, DOMAIN_SUBSET};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: truncated, {len} bytes is not a positive multiple of {record} bytes")]
    Truncated {
        path: PathBuf,
        record: usize,
        len: u64,
    },
    #[error("{path}: bad magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("images file holds {images} samples but labels file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("sample {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch size {batch} exceeds dataset size {dataset}")]
    BatchTooLarge { batch: usize, dataset: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("duplicate sample index {index} within a mini-batch")]
    DuplicateIndex { index: u32 },
    #[error("noise fraction {eta} outside {{0}} union (0, 1)")]
    InvalidEta { eta: f64 },
    #[error("operation requires the {expected:?} split, dataset is {got:?}")]
    WrongSplit { expected: Split, got: Split },
    #[error("split is empty")]
    EmptySplit,
    #[error("class {class} has only {have} samples, {want} requested")]
    SubsetTooLarge {
        class: usize,
        have: usize,
        want: usize,
    },
    #[error("unknown augmentation recipe element {0:?}")]
    UnknownRecipe(String),
    #[error("dataset shape mismatch: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Per-channel-plane normalization statistics on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An immutable labeled image collection. Images are stored as 8-bit
/// plane-major (CHW) samples, exactly as CIFAR binary records lay them out.
#[derive(Clone)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    pub norm: Normalization,
}

impl Dataset {
    /// Builds a dataset and computes its per-plane normalization statistics.
    pub fn new(
        split: Split,
        classes: usize,
        shape: (usize, usize, usize),
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self, DataError> {
        let (channels, height, width) = shape;
        let sample = channels * height * width;
        if sample == 0 || images.len() % sample != 0 {
            return Err(DataError::Malformed(format!(
                "image buffer of {} bytes does not tile into {channels}x{height}x{width} samples",
                images.len()
            )));
        }
        if images.len() / sample != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len() / sample,
                labels: labels.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label: label as usize,
                    classes,
                });
            }
        }
        let mut ds = Dataset {
            images,
            labels,
            classes,
            channels,
            height,
            width,
            split,
            norm: Normalization {
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            },
        };
        ds.norm = ds.compute_normalization();
        Ok(ds)
    }

    /// Population mean/stddev per channel plane on the `[0, 1]` scale. A
    /// constant plane gets stddev 1 so normalization stays defined.
    pub fn compute_normalization(&self) -> Normalization {
        let plane = self.height * self.width;
        let sample = self.channels * plane;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.images.chunks_exact(sample) {
            for (c, p) in img.chunks_exact(plane).enumerate() {
                for &v in p {
                    let x = v as f64 / 255.0;
                    mean[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mut std = vec![1.0f64; self.channels];
        for c in 0..self.channels {
            mean[c] /= count;
            let var = sq[c] / count - mean[c] * mean[c];
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.norm = norm;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let s = self.sample_len();
        &self.images[index * s..(index + 1) * s]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_images(&self) -> &[u8] {
        &self.images
    }

    /// Replaces the label vector (noise injection); counts must match.
    pub(crate) fn with_labels(&self, labels: Vec<u8>) -> Dataset {
        debug_assert_eq!(labels.len(), self.labels.len());
        Dataset {
            labels,
            images: self.images.clone(),
            ..self.clone()
        }
    }

    /// A seeded stratified subset with `per_class` samples of every class,
    /// in ascending original-index order. Normalization statistics are
    /// inherited, not recomputed.
    pub fn subset_stratified(&self, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
        let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i as u32);
        }
        let mut keep: Vec<u32> = Vec::with_capacity(per_class * self.classes);
        for (class, indices) in by_class.iter_mut().enumerate() {
            if indices.len() < per_class {
                return Err(DataError::SubsetTooLarge {
                    class,
                    have: indices.len(),
                    want: per_class,
                });
            }
            let mut rng = rng::stream(seed, DOMAIN_SUBSET, class as u64, 0);
            rng::shuffle(&mut rng, indices);
            keep.extend_from_slice(&indices[..per_class]);
        }
        keep.sort_unstable();
        let s = self.sample_len();
        let mut images = Vec::with_capacity(keep.len() * s);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            images.extend_from_slice(self.image(i as usize));
            labels.push(self.labels[i as usize]);
        }
        Ok(Dataset {
            images,
            labels,
            ..self.clone()
        })
    }

    /// Materializes the hard labels for a batch of indices, validating
    /// uniqueness and range.
    pub fn minibatch(&self, indices: &[u32]) -> Result<MiniBatch, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptyBatch);
        }
        let mut seen = vec![false; self.len()];
        for &i in indices {
            let i = i as usize;
            if i >= self.len() {
                return Err(DataError::Malformed(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            if seen[i] {
                return Err(DataError::DuplicateIndex { index: i as u32 });
            }
            seen[i] = true;
        }
        Ok(MiniBatch {
            indices: indices.to_vec(),
            labels: indices.iter().map(|&i| self.labels[i as usize]).collect(),
        })
    }
}

/// One sampled training batch: dataset indices plus their hard labels. Raw
/// pixels are read from the owning [`Dataset`] at augmentation time.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub indices: Vec<u32>,
    pub labels: Vec<u8>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Vec<u8>) -> Dataset {
        let n = labels.len();
        Dataset::new(
            Split::Train,
            4,
            (1, 2, 2),
            (0..n * 4).map(|v| (v % 251) as u8).collect(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn rejects_label_out_of_range() {
        let err = Dataset::new(Split::Train, 2, (1, 1, 1), vec![0, 1, 2], vec![0, 1, 2]);
        assert!(matches!(err, Err(DataError::LabelOutOfRange { .. })));
    }

    #[test]
    fn minibatch_rejects_duplicates() {
        let ds = tiny(vec![0, 1, 2, 3]);
        assert!(matches!(
            ds.minibatch(&[1, 1]),
            Err(DataError::DuplicateIndex { index: 1 })
        ));
        let b = ds.minibatch(&[2, 0]).unwrap();
        assert_eq!(b.labels, vec![2, 0]);
    }

    #[test]
    fn stratified_subset_is_balanced_and_deterministic() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
        let ds = tiny(labels);
        let a = ds.subset_stratified(3, 9).unwrap();
        let b = ds.subset_stratified(3, 9).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.len(), 12);
        for class in 0..4u8 {
            assert_eq!(a.labels().iter().filter(|&&l| l == class).count(), 3);
        }
        assert_eq!(a.norm, ds.norm);
    }

    #[test]
    fn normalization_is_population_statistics() {
        let ds = Dataset::new(Split::Train, 2, (1, 1, 2), vec![0, 255, 0, 255], vec![0, 1]).unwrap();
        assert!((ds.norm.mean[0] - 0.5).abs() < 1e-12);
        assert!((ds.norm.std[0] - 0.5).abs() < 1e-12);
    }
}
