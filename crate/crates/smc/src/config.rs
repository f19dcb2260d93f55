//! Strict JSON experiment configuration.
//!
//! Unknown keys are rejected, defaults are applied during resolution, and the
//! fully-resolved config is echoed into the run-log header so every run
//! records exactly what it did. Runs group by an identity hash that ignores
//! the seed, output paths and presentation toggles, which is what lets a
//! report average the same experiment across seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NoiseSpec, Recipe};
use crate::models::Arch;
use crate::trainer::{Method, Timing};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config field {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("dataset path {0} does not exist")]
    MissingPath(PathBuf),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// CIFAR binary batch files in `dir`, optionally subset per class.
    Cifar10 {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_per_class: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
    /// Procedurally generated CIFAR-shaped data.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        val_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetConfig {
    /// Class count when it is knowable before loading.
    pub fn classes_hint(&self) -> Option<usize> {
        match self {
            DatasetConfig::Cifar10 { .. } => Some(10),
            DatasetConfig::Idx { .. } => None,
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
        }
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let check = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath(p.to_path_buf()))
            }
        };
        match self {
            DatasetConfig::Cifar10 { dir, .. } => check(dir),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => {
                check(train_images)?;
                check(train_labels)?;
                check(val_images)?;
                check(val_labels)
            }
            DatasetConfig::Synthetic { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// The experiment file. Optional fields hold their defaults after
/// [`ExperimentConfig::resolve`]; method-specific fields may only be present
/// for their method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: String,
    pub dataset: DatasetConfig,
    pub out_dir: PathBuf,
    pub model: ModelConfig,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_milestones: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutout_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,

    // Method-specific.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsr_epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_rho: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// Reads and resolves a config file: strict parse, defaults applied, paths
/// checked, method/field consistency enforced.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    cfg.resolve()
}

impl ExperimentConfig {
    /// Applies defaults and validates. The result has every optional field
    /// populated (except fields belonging to other methods) and satisfies
    /// emit-then-parse round-tripping.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.dataset.check_paths()?;

        let method = self.method.as_str();
        if !["vanilla", "lsr", "dlb", "sam", "smc"].contains(&method) {
            return Err(invalid(
                "method",
                format!("unknown method {method:?}, expected vanilla|lsr|dlb|sam|smc"),
            ));
        }

        // Fields foreign to the method must be absent.
        let forbid = |present: bool, field: &'static str, cfg_method: &str| {
            if present {
                Err(invalid(
                    field,
                    format!("only valid for other methods, not {cfg_method:?}"),
                ))
            } else {
                Ok(())
            }
        };
        if method != "smc" {
            forbid(self.channels.is_some(), "channels", method)?;
        }
        if method != "smc" && method != "dlb" {
            forbid(self.tau.is_some(), "tau", method)?;
            forbid(self.alpha.is_some(), "alpha", method)?;
        }
        if method != "lsr" {
            forbid(self.lsr_epsilon.is_some(), "lsr_epsilon", method)?;
        }
        if method != "sam" {
            forbid(self.sam_rho.is_some(), "sam_rho", method)?;
        }

        // Shared defaults.
        let classes = self.dataset.classes_hint();
        self.epochs = Some(self.epochs.unwrap_or(30));
        self.batch_size = Some(self.batch_size.unwrap_or(64));
        self.lr = Some(self.lr.unwrap_or(0.05));
        self.lr_decay = Some(self.lr_decay.unwrap_or(0.1));
        self.lr_milestones = Some(self.lr_milestones.take().unwrap_or_else(|| vec![0.5, 0.75]));
        self.momentum = Some(self.momentum.unwrap_or(0.9));
        self.weight_decay = Some(self.weight_decay.unwrap_or(5e-4));
        self.seed = Some(self.seed.unwrap_or(1));
        self.precision = Some(self.precision.unwrap_or(Precision::F64));
        self.augmentation = Some(
            self.augmentation
                .take()
                .unwrap_or_else(|| vec!["pad4_crop".to_string(), "hflip".to_string()]),
        );
        self.noise_eta = Some(self.noise_eta.unwrap_or(0.0));
        self.noise_seed = Some(self.noise_seed.unwrap_or(0));
        self.svg = Some(self.svg.unwrap_or(false));
        self.timing = Some(self.timing.unwrap_or(Timing::Wall));

        let wants_cutout = self
            .augmentation
            .as_ref()
            .is_some_and(|a| a.iter().any(|e| e == "cutout"));
        if wants_cutout {
            // The 100-class convention halves the square; unknown class
            // counts fall back to the 10-class value.
            let default_cut = if classes.unwrap_or(10) >= 100 { 8 } else { 16 };
            self.cutout_size = Some(self.cutout_size.unwrap_or(default_cut));
        } else if self.cutout_size.is_some() {
            return Err(invalid(
                "cutout_size",
                "set but `cutout` is not in the augmentation list",
            ));
        }

        // Method defaults. Temperature follows the class count: 1.5 for
        // 100-class data, 1.0 otherwise.
        let default_tau = if classes.unwrap_or(10) >= 100 { 1.5 } else { 1.0 };
        match method {
            "smc" => {
                self.channels = Some(self.channels.unwrap_or(2));
                self.tau = Some(self.tau.unwrap_or(default_tau));
                self.alpha = Some(self.alpha.unwrap_or(0.9));
                if self.channels.unwrap() < 2 {
                    return Err(invalid("channels", "smc needs at least 2 channels"));
                }
            }
            "dlb" => {
                self.tau = Some(self.tau.unwrap_or(default_tau));
                self.alpha = Some(self.alpha.unwrap_or(0.9));
            }
            "lsr" => {
                self.lsr_epsilon = Some(self.lsr_epsilon.unwrap_or(0.1));
            }
            "sam" => {
                self.sam_rho = Some(self.sam_rho.unwrap_or(0.05));
            }
            _ => {}
        }

        self.validate_ranges()?;
        Ok(self)
    }

    fn validate_ranges(&self) -> Result<(), ConfigError> {
        let eta = self.noise_eta.unwrap_or(0.0);
        if !(eta == 0.0 || (eta > 0.0 && eta < 1.0)) {
            return Err(invalid("noise_eta", "must lie in {0} union (0, 1)"));
        }
        if let Some(eps) = self.lsr_epsilon {
            if !(0.0..1.0).contains(&eps) {
                return Err(invalid("lsr_epsilon", "must lie in [0, 1)"));
            }
        }
        if let Some(rho) = self.sam_rho {
            if !(rho >= 0.0) {
                return Err(invalid("sam_rho", "must be nonnegative"));
            }
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return Err(invalid("tau", "must be positive"));
            }
        }
        if let Some(alpha) = self.alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(invalid("alpha", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// The training method this config describes. Call on resolved configs.
    pub fn to_method(&self) -> Method {
        match self.method.as_str() {
            "vanilla" => Method::Vanilla,
            "lsr" => Method::Lsr {
                epsilon: self.lsr_epsilon.expect("resolved"),
            },
            "dlb" => Method::Dlb {
                tau: self.tau.expect("resolved"),
                alpha: self.alpha.expect("resolved"),
            },
            "sam" => Method::Sam {
                rho: self.sam_rho.expect("resolved"),
            },
            "smc" => Method::Smc {
                channels: self.channels.expect("resolved"),
                tau: self.tau.expect("resolved"),
                alpha: self.alpha.expect("resolved"),
            },
            other => unreachable!("unvalidated method {other}"),
        }
    }

    pub fn to_recipe(&self) -> Result<Recipe, crate::data::DataError> {
        Recipe::parse(
            self.augmentation.as_deref().unwrap_or(&[]),
            self.cutout_size.unwrap_or(16),
        )
    }

    pub fn to_noise(&self) -> Option<NoiseSpec> {
        let eta = self.noise_eta.unwrap_or(0.0);
        if eta > 0.0 {
            Some(NoiseSpec {
                eta,
                seed: self.noise_seed.unwrap_or(0),
            })
        } else {
            None
        }
    }

    /// Canonical single-line JSON of a resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hash identifying the experiment regardless of seed, output location
    /// and presentation toggles. Noise seeds stay in: they change the data.
    pub fn identity_hash(&self) -> String {
        let mut neutral = self.clone();
        neutral.seed = Some(0);
        neutral.out_dir = PathBuf::new();
        neutral.svg = Some(false);
        neutral.timing = Some(Timing::Fixed);
        let digest = Sha256::digest(neutral.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(method: &str) -> String {
        format!(
            r#"{{
              "schema_version": 1,
              "method": "{method}",
              "dataset": {{"kind": "synthetic", "classes": 10, "train_per_class": 50, "val_per_class": 10}},
              "out_dir": "runs/x",
              "model": {{"arch": "small_cnn"}}
            }}"#
        )
    }

    fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, text).unwrap();
        parse_config(&p)
    }

    #[test]
    fn minimal_config_fully_defaults() {
        let cfg = parse_str(&minimal("vanilla")).unwrap();
        assert_eq!(cfg.epochs, Some(30));
        assert_eq!(cfg.batch_size, Some(64));
        assert_eq!(cfg.seed, Some(1));
        assert_eq!(cfg.precision, Some(Precision::F64));
        assert_eq!(cfg.tau, None);
        assert_eq!(cfg.timing, Some(Timing::Wall));
    }

    #[test]
    fn smc_defaults_follow_class_count() {
        let cfg = parse_str(&minimal("smc")).unwrap();
        assert_eq!(cfg.channels, Some(2));
        assert_eq!(cfg.tau, Some(1.0));
        assert_eq!(cfg.alpha, Some(0.9));
        let hundred = minimal("smc").replace("\"classes\": 10", "\"classes\": 100");
        let cfg = parse_str(&hundred).unwrap();
        assert_eq!(cfg.tau, Some(1.5));
    }

    #[test]
    fn unknown_key_rejected_with_name() {
        let bad = minimal("vanilla").replace("\"out_dir\"", "\"mystery\": 1, \"out_dir\"");
        let err = parse_str(&bad).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn smc_channels_below_two_rejected() {
        let bad = minimal("smc").replace("\"model\"", "\"channels\": 1, \"model\"");
        let err = parse_str(&bad).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn foreign_method_field_rejected() {
        let bad = minimal("vanilla").replace("\"model\"", "\"sam_rho\": 0.05, \"model\"");
        let err = parse_str(&bad).unwrap_err();
        assert!(err.to_string().contains("sam_rho"), "{err}");
    }

    #[test]
    fn emit_then_parse_round_trips() {
        let cfg = parse_str(&minimal("smc")).unwrap();
        let echoed = cfg.canonical_json();
        let reparsed: ExperimentConfig = serde_json::from_str(&echoed).unwrap();
        let reresolved = reparsed.resolve().unwrap();
        assert_eq!(cfg, reresolved);
        assert_eq!(cfg.identity_hash(), reresolved.identity_hash());
    }

    #[test]
    fn identity_hash_ignores_seed_but_not_method() {
        let a = parse_str(&minimal("smc")).unwrap();
        let b = {
            let with_seed = minimal("smc").replace("\"model\"", "\"seed\": 999, \"model\"");
            parse_str(&with_seed).unwrap()
        };
        assert_eq!(a.identity_hash(), b.identity_hash());
        let c = parse_str(&minimal("vanilla")).unwrap();
        assert_ne!(a.identity_hash(), c.identity_hash());
    }

    #[test]
    fn missing_dataset_path_rejected() {
        let bad = r#"{
          "schema_version": 1,
          "method": "vanilla",
          "dataset": {"kind": "cifar10", "dir": "/no/such/dir"},
          "out_dir": "runs/x",
          "model": {"arch": "small_cnn"}
        }"#;
        assert!(matches!(
            parse_str(bad),
            Err(ConfigError::MissingPath(_))
        ));
    }

    #[test]
    fn parse_error_carries_line_and_column() {
        let err = parse_str("{ not json").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cutout_size_requires_cutout_element() {
        let bad = minimal("vanilla").replace("\"model\"", "\"cutout_size\": 8, \"model\"");
        assert!(parse_str(&bad).is_err());
        let good = minimal("vanilla").replace(
            "\"model\"",
            "\"augmentation\": [\"cutout\"], \"model\"",
        );
        let cfg = parse_str(&good).unwrap();
        assert_eq!(cfg.cutout_size, Some(16));
    }
}
