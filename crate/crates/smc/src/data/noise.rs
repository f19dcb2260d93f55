//! Symmetric label noise injection for robustness experiments.

use crate::rng::{self, DOMAIN_NOISE};

use super::{DataError, Dataset, Split};

/// Fraction of train labels to corrupt, and the seed that picks the victims.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskEntry {
    pub index: u32,
    pub old_label: u8,
    pub new_label: u8,
}

/// Which samples changed, sorted by index.
#[derive(Debug, Clone, Default)]
pub struct CorruptionMask {
    pub entries: Vec<MaskEntry>,
}

impl CorruptionMask {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,old_label,new_label\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.index, e.old_label, e.new_label));
        }
        out
    }
}

/// Replaces exactly `round(eta * N)` train labels (chosen uniformly without
/// replacement) with a uniform draw over the other `K - 1` classes. The
/// returned mask records every change; validation data is never touched
/// because only train-split datasets are accepted.
pub fn inject_label_noise(
    ds: &Dataset,
    spec: &NoiseSpec,
) -> Result<(Dataset, CorruptionMask), DataError> {
    if ds.split != Split::Train {
        return Err(DataError::WrongSplit {
            expected: Split::Train,
            got: ds.split,
        });
    }
    if !(spec.eta == 0.0 || (spec.eta > 0.0 && spec.eta < 1.0)) {
        return Err(DataError::InvalidEta { eta: spec.eta });
    }
    let n = ds.len();
    // Round half up: the paper states proportions only.
    let count = (spec.eta * n as f64 + 0.5).floor() as usize;
    if count == 0 {
        return Ok((ds.clone(), CorruptionMask::default()));
    }

    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut stream = rng::stream(spec.seed, DOMAIN_NOISE, 0, 0);
    rng::shuffle(&mut stream, &mut order);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();

    let mut labels = ds.labels().to_vec();
    let mut entries = Vec::with_capacity(count);
    for &index in &chosen {
        let old = labels[index as usize];
        // Per-index substream keeps the draw independent of iteration order.
        let mut s = rng::stream(spec.seed, DOMAIN_NOISE, 1, index as u64);
        let r = rng::uniform_usize(&mut s, ds.classes - 1) as u8;
        let new = if r >= old { r + 1 } else { r };
        labels[index as usize] = new;
        entries.push(MaskEntry {
            index,
            old_label: old,
            new_label: new,
        });
    }
    Ok((ds.with_labels(labels), CorruptionMask { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize, classes: usize) -> Dataset {
        let images: Vec<u8> = (0..n * 4).map(|v| (v % 200) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|v| (v % classes) as u8).collect();
        Dataset::new(Split::Train, classes, (1, 2, 2), images, labels).unwrap()
    }

    #[test]
    fn zero_eta_changes_nothing() {
        let ds = dataset(100, 10);
        let (out, mask) = inject_label_noise(&ds, &NoiseSpec { eta: 0.0, seed: 1 }).unwrap();
        assert!(mask.is_empty());
        assert_eq!(out.labels(), ds.labels());
    }

    #[test]
    fn exact_count_and_no_fixed_points() {
        let ds = dataset(1000, 10);
        let (out, mask) = inject_label_noise(&ds, &NoiseSpec { eta: 0.4, seed: 3 }).unwrap();
        assert_eq!(mask.len(), 400);
        let changed = ds
            .labels()
            .iter()
            .zip(out.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 400);
        for e in &mask.entries {
            assert_ne!(e.old_label, e.new_label);
            assert_eq!(out.label(e.index as usize), e.new_label);
            assert!((e.new_label as usize) < 10);
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let ds = dataset(500, 7);
        let spec = NoiseSpec { eta: 0.25, seed: 9 };
        let (a, ma) = inject_label_noise(&ds, &spec).unwrap();
        let (b, mb) = inject_label_noise(&ds, &spec).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(ma.entries, mb.entries);
    }

    #[test]
    fn rejects_bad_eta_and_val_split() {
        let ds = dataset(10, 3);
        assert!(matches!(
            inject_label_noise(&ds, &NoiseSpec { eta: -0.1, seed: 0 }),
            Err(DataError::InvalidEta { .. })
        ));
        assert!(matches!(
            inject_label_noise(&ds, &NoiseSpec { eta: 1.0, seed: 0 }),
            Err(DataError::InvalidEta { .. })
        ));
        let mut val = ds.clone();
        val.split = Split::Val;
        assert!(matches!(
            inject_label_noise(&val, &NoiseSpec { eta: 0.1, seed: 0 }),
            Err(DataError::WrongSplit { .. })
        ));
    }

    #[test]
    fn mask_csv_layout() {
        let ds = dataset(10, 3);
        let (_, mask) = inject_label_noise(&ds, &NoiseSpec { eta: 0.2, seed: 4 }).unwrap();
        let csv = mask.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("index,old_label,new_label"));
        assert_eq!(csv.lines().count(), 1 + mask.len());
    }
}
