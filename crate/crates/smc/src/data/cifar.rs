//! CIFAR-10 binary format: 3073-byte records, one label byte followed by a
//! plane-major 32x32 RGB image.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Split};

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const IMAGE_BYTES: usize = 3072;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn read_records(path: &Path) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            record: CIFAR_RECORD_BYTES,
            len: bytes.len() as u64,
        });
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(records * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(records);
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(DataError::LabelOutOfRange {
                index,
                label: label as usize,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

/// Loads the standard six batch files from `dir` into a 50,000-sample train
/// split and a 10,000-sample test split. Pixel bytes are preserved exactly;
/// the test split inherits the train split's normalization statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let (im, la) = read_records(&dir.join(name))?;
        images.extend_from_slice(&im);
        labels.extend_from_slice(&la);
    }
    let train = Dataset::new(Split::Train, CIFAR_CLASSES, (3, 32, 32), images, labels)?;
    let (im, la) = read_records(&dir.join(TEST_FILE))?;
    let mut test = Dataset::new(Split::Val, CIFAR_CLASSES, (3, 32, 32), im, la)?;
    test.set_normalization(train.norm.clone());
    Ok((train, test))
}

/// Writes one batch file in the CIFAR binary record layout. `images` must be
/// plane-major 3x32x32 samples, matching [`Dataset`] storage.
pub fn write_cifar_batch(path: &Path, images: &[u8], labels: &[u8]) -> Result<(), DataError> {
    assert_eq!(images.len(), labels.len() * IMAGE_BYTES);
    let mut bytes = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
    for (label, image) in labels.iter().zip(images.chunks_exact(IMAGE_BYTES)) {
        bytes.push(*label);
        bytes.extend_from_slice(image);
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a full synthetic dataset pair as the six standard batch files.
pub fn write_cifar10_layout(dir: &Path, train: &Dataset, test: &Dataset) -> Result<(), DataError> {
    assert_eq!(train.len() % TRAIN_FILES.len(), 0);
    let per_file = train.len() / TRAIN_FILES.len();
    let sample = train.sample_len();
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let lo = i * per_file;
        let hi = (i + 1) * per_file;
        write_cifar_batch(
            &dir.join(name),
            &train.raw_images()[lo * sample..hi * sample],
            &train.labels()[lo..hi],
        )?;
    }
    write_cifar_batch(&dir.join(TEST_FILE), test.raw_images(), test.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_pair(n_train: usize, n_test: usize) -> (Dataset, Dataset) {
        let gen = |n: usize, split| {
            let images: Vec<u8> = (0..n * IMAGE_BYTES).map(|v| (v % 249) as u8).collect();
            let labels: Vec<u8> = (0..n).map(|v| (v % 10) as u8).collect();
            Dataset::new(split, 10, (3, 32, 32), images, labels).unwrap()
        };
        (gen(n_train, Split::Train), gen(n_test, Split::Val))
    }

    #[test]
    fn roundtrip_preserves_all_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = synth_pair(25, 7);
        write_cifar10_layout(dir.path(), &train, &test).unwrap();
        let (train2, test2) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.raw_images(), train2.raw_images());
        assert_eq!(train.labels(), train2.labels());
        assert_eq!(test.raw_images(), test2.raw_images());
        assert_eq!(test.labels(), test2.labels());
    }

    #[test]
    fn empty_file_is_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn partial_record_is_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_records(&{
            let p = dir.path().join("partial.bin");
            std::fs::write(&p, vec![0u8; CIFAR_RECORD_BYTES + 5]).unwrap();
            p
        });
        assert!(matches!(err, Err(DataError::Truncated { .. })));
    }

    #[test]
    fn first_record_label_matches_independent_byte_read() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = synth_pair(10, 5);
        write_cifar10_layout(dir.path(), &train, &test).unwrap();
        let raw = std::fs::read(dir.path().join("data_batch_1.bin")).unwrap();
        let (loaded, _) = load_cifar10(dir.path()).unwrap();
        assert_eq!(raw[0], loaded.label(0));
        // Second record's label sits exactly one record later.
        assert_eq!(raw[CIFAR_RECORD_BYTES], loaded.label(1));
    }

    #[test]
    fn bad_label_byte_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
        rec[0] = 10;
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, rec).unwrap();
        assert!(matches!(
            read_records(&p),
            Err(DataError::LabelOutOfRange { .. })
        ));
    }
}
