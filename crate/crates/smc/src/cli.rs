//! Drivers behind the `smc` binary's subcommands. Each function does the
//! whole job so the binary stays a thin argument parser; the runnable
//! examples call the same library surface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use crate::config::{parse_config, DatasetConfig, ExperimentConfig, Precision};
use crate::data::{load_cifar10, load_idx, Dataset, SynthSpec};
use crate::gradsuite::{max_teacher_gradient, run_gradient_suite, SUITE_TOLERANCE};
use crate::models::{save_checkpoint, ModelSpec};
use crate::report::{parse_run_log, render_svg, render_table, run_log_to_string, RunLog};
use crate::tensor::{Elem, Fault};
use crate::trainer::{run_experiment, RunOutcome, TrainConfig};

/// Loads the train/val pair a config describes, applying any subsetting.
pub fn load_datasets(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Cifar10 {
            dir,
            train_per_class,
            val_per_class,
            subset_seed,
        } => {
            let (mut train, mut val) =
                load_cifar10(dir).with_context(|| format!("loading CIFAR from {}", dir.display()))?;
            if let Some(per_class) = train_per_class {
                train = train.subset_stratified(*per_class, *subset_seed)?;
            }
            if let Some(per_class) = val_per_class {
                val = val.subset_stratified(*per_class, *subset_seed)?;
            }
            Ok((train, val))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            val_images,
            val_labels,
        } => {
            let train = load_idx(train_images, train_labels, crate::data::Split::Train)?;
            let mut val = load_idx(val_images, val_labels, crate::data::Split::Val)?;
            val.set_normalization(train.norm.clone());
            val.classes = val.classes.max(train.classes);
            Ok((train, val))
        }
        DatasetConfig::Synthetic {
            classes,
            train_per_class,
            val_per_class,
            seed,
        } => {
            let spec = SynthSpec {
                classes: *classes,
                train_per_class: *train_per_class,
                val_per_class: *val_per_class,
                seed: *seed,
                ..SynthSpec::default()
            };
            Ok(crate::data::generate_synthetic(&spec)?)
        }
    }
}

/// Builds the model spec from the config's architecture and the dataset's
/// shape and class count.
pub fn model_spec(cfg: &ExperimentConfig, train: &Dataset) -> ModelSpec {
    ModelSpec {
        arch: cfg.model.arch,
        input: (train.channels, train.height, train.width),
        classes: train.classes,
        hidden: cfg.model.hidden.clone().unwrap_or_else(|| vec![128]),
    }
}

/// Assembles the run-level training config from a resolved experiment config.
pub fn train_config(cfg: &ExperimentConfig, train: &Dataset) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig {
        method: cfg.to_method(),
        model: model_spec(cfg, train),
        epochs: cfg.epochs.expect("resolved"),
        batch_size: cfg.batch_size.expect("resolved"),
        lr: cfg.lr.expect("resolved"),
        lr_decay: cfg.lr_decay.expect("resolved"),
        lr_milestones: cfg.lr_milestones.clone().expect("resolved"),
        momentum: cfg.momentum.expect("resolved"),
        weight_decay: cfg.weight_decay.expect("resolved"),
        seed: cfg.seed.expect("resolved"),
        recipe: cfg.to_recipe()?,
        noise: cfg.to_noise(),
        timing: cfg.timing.expect("resolved"),
    })
}

fn run_and_write<E: Elem>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
) -> anyhow::Result<PathBuf> {
    let tc = train_config(cfg, train)?;
    let outcome: RunOutcome<E> = run_experiment(&tc, train, val)?;

    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let log_path = out_dir.join(format!("{}_seed{}.csv", cfg.method, tc.seed));
    let log = run_log_to_string(&cfg.canonical_json(), &cfg.identity_hash(), &outcome.records);
    std::fs::write(&log_path, log)
        .with_context(|| format!("writing run log {}", log_path.display()))?;

    save_checkpoint(&outcome.params, &out_dir.join("final.ckpt"))?;
    save_checkpoint(&outcome.best_params, &out_dir.join("best.ckpt"))?;
    if !outcome.mask.is_empty() {
        std::fs::write(out_dir.join("noise_mask.csv"), outcome.mask.to_csv())?;
    }
    if cfg.svg == Some(true) {
        let parsed = parse_run_log(&log_path)?;
        std::fs::write(out_dir.join("curves.svg"), render_svg(&[parsed])?)?;
    }

    println!(
        "method={} seed={} best={:.4} (epoch {}) final={:.4} steps={}",
        cfg.method,
        tc.seed,
        outcome.best_val_top1,
        outcome.best_epoch,
        outcome.final_val_top1,
        outcome.total_steps
    );
    Ok(log_path)
}

/// `smc train --config <file> [--seed N] [--out DIR]`.
pub fn cmd_train(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> anyhow::Result<PathBuf> {
    let mut cfg = parse_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = Some(seed);
    }
    if let Some(out) = out_override {
        cfg.out_dir = out;
    }
    let (train, val) = load_datasets(&cfg)?;
    if train.is_empty() || val.is_empty() {
        bail!("dataset has an empty split");
    }
    match cfg.precision.expect("resolved") {
        Precision::F64 => run_and_write::<f64>(&cfg, &train, &val),
        Precision::F32 => run_and_write::<f32>(&cfg, &train, &val),
    }
}

/// `smc gradcheck [--fault relu-backward]`; returns process exit code.
pub fn cmd_gradcheck(fault: Option<Fault>) -> anyhow::Result<i32> {
    let rows = run_gradient_suite(fault)?;
    println!("gradient checks (tolerance {SUITE_TOLERANCE:.0e}, 64-bit, central differences):");
    let mut failures = Vec::new();
    for row in &rows {
        println!(
            "  {:<26} max rel err {:>10.3e}  {}",
            row.name,
            row.max_rel_err,
            if row.passed { "ok" } else { "FAIL" }
        );
        if !row.passed {
            failures.push(row.name);
        }
    }
    let teacher = max_teacher_gradient()?;
    println!(
        "  {:<26} max |grad|   {:>10.3e}  {}",
        "teacher_detachment",
        teacher,
        if teacher == 0.0 { "ok" } else { "FAIL" }
    );
    if teacher != 0.0 {
        failures.push("teacher_detachment");
    }
    if failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("failing: {}", failures.join(", "));
        Ok(1)
    }
}

/// `smc report <logs...> [--svg out.svg]`.
pub fn cmd_report(log_paths: &[PathBuf], svg_out: Option<&Path>) -> anyhow::Result<()> {
    if log_paths.is_empty() {
        bail!("report needs at least one run log");
    }
    let logs: Vec<RunLog> = log_paths
        .iter()
        .map(|p| parse_run_log(p))
        .collect::<Result<_, _>>()?;
    print!("{}", render_table(&logs)?);
    if let Some(out) = svg_out {
        std::fs::write(out, render_svg(&logs)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

/// `smc inject-noise --config <file> --out mask.csv`: emits the corruption
/// mask the configured noise spec would apply, without training.
pub fn cmd_inject_noise(config_path: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = parse_config(config_path)?;
    let Some(spec) = cfg.to_noise() else {
        bail!("config has noise_eta = 0; nothing to inject");
    };
    let (train, _) = load_datasets(&cfg)?;
    let (_, mask) = crate::data::inject_label_noise(&train, &spec)?;
    std::fs::write(out, mask.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "corrupted {} of {} labels (eta {}), mask in {}",
        mask.len(),
        train.len(),
        spec.eta,
        out.display()
    );
    Ok(())
}
