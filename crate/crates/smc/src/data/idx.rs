//! IDX format (MNIST-class datasets): big-endian headers, magic 0x00000803
//! for 3-d image files and 0x00000801 for label files.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an images/labels IDX pair as a grayscale (`C = 1`) dataset. The
/// class count is inferred as `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    if img.len() < 16 {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            record: 16,
            len: img.len() as u64,
        });
    }
    let magic = be_u32(&img, 0);
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    if img.len() != 16 + n * rows * cols {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            record: rows * cols,
            len: img.len() as u64,
        });
    }

    let lab = read_file(labels_path)?;
    if lab.len() < 8 {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            record: 8,
            len: lab.len() as u64,
        });
    }
    let magic = be_u32(&lab, 0);
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n_labels = be_u32(&lab, 4) as usize;
    if lab.len() != 8 + n_labels {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            record: 1,
            len: lab.len() as u64,
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let labels = lab[8..].to_vec();
    let classes = labels.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    Dataset::new(split, classes, (1, rows, cols), img[16..].to_vec(), labels)
}

pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), DataError> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_header_read() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10_000;
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|v| (v % 255) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|v| (v % 10) as u8).collect();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx_images(&ip, n, 28, 28, &pixels).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        let ds = load_idx(&ip, &lp, Split::Val).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!((ds.channels, ds.height, ds.width), (1, 28, 28));
        assert_eq!(ds.raw_images(), &pixels[..]);
        assert_eq!(ds.classes, 10);
    }

    #[test]
    fn byte_swapped_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx_images(&ip, 1, 2, 2, &[1, 2, 3, 4]).unwrap();
        write_idx_labels(&lp, &[0]).unwrap();
        // Swap the magic of the image file.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[0..4].copy_from_slice(&IMAGES_MAGIC.swap_bytes().to_be_bytes());
        std::fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx_images(&ip, 3, 2, 2, &[0; 12]).unwrap();
        write_idx_labels(&lp, &[0, 1]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp, Split::Train),
            Err(DataError::CountMismatch {
                images: 3,
                labels: 2
            })
        ));
    }
}
