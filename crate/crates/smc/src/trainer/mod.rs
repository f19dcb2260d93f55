//! The training loop: the multi-channel self-distillation method plus the
//! comparator methods (plain SGD, label smoothing, last-batch distillation,
//! sharpness-aware minimization) on one shared skeleton.

mod step;

pub use step::{MethodState, StepOutcome, Trainer};

use std::time::Instant;

use crate::data::{
    inject_label_noise, CorruptionMask, DataError, Dataset, EpochSampler, NoiseSpec, Recipe,
};
use crate::losses::{LossBreakdown, LossError};
use crate::models::{evaluate_top1, ModelError, ModelSpec};
use crate::tensor::{Elem, ParameterSet, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("step {step}: stored soft-label indices do not match the channel-A batch")]
    BufferMisaligned { step: u64 },
    #[error("step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Training method and its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Hard-label cross-entropy with SGD.
    Vanilla,
    /// Cross-entropy against `(1 - eps) * onehot + eps / K`.
    Lsr { epsilon: f64 },
    /// Self-distillation from the last mini-batch: the previous batch rides
    /// along, distilling its stored soft labels.
    Dlb { tau: f64, alpha: f64 },
    /// Sharpness-aware minimization, first-order, global L2 ascent radius.
    Sam { rho: f64 },
    /// Self-distillation on `channels` augmentation channels.
    Smc {
        channels: usize,
        tau: f64,
        alpha: f64,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Lsr { .. } => "lsr",
            Method::Dlb { .. } => "dlb",
            Method::Sam { .. } => "sam",
            Method::Smc { .. } => "smc",
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        match *self {
            Method::Vanilla => Ok(()),
            Method::Lsr { epsilon } => {
                if !(0.0..1.0).contains(&epsilon) {
                    return bad(format!("lsr epsilon {epsilon} outside [0, 1)"));
                }
                Ok(())
            }
            Method::Dlb { tau, alpha } => {
                if !(tau > 0.0) {
                    return bad(format!("dlb tau {tau} must be positive"));
                }
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("dlb alpha {alpha} outside [0, 1]"));
                }
                Ok(())
            }
            Method::Sam { rho } => {
                if !(rho >= 0.0) {
                    return bad(format!("sam rho {rho} must be nonnegative"));
                }
                Ok(())
            }
            Method::Smc {
                channels,
                tau,
                alpha,
            } => {
                if channels < 2 {
                    return bad(format!("smc needs at least 2 channels, got {channels}"));
                }
                if !(tau > 0.0) {
                    return bad(format!("smc tau {tau} must be positive"));
                }
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("smc alpha {alpha} outside [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

/// How the `seconds` column is filled: real wall-clock time, or a fixed zero
/// for byte-reproducible logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    Wall,
    Fixed,
}

/// Everything one training run needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of the epoch count.
    pub lr_milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub recipe: Recipe,
    pub noise: Option<NoiseSpec>,
    pub timing: Timing,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.method.validate()?;
        self.model.validate()?;
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr milestones must be fractions in [0, 1]".into());
        }
        if let Some(n) = &self.noise {
            if !(n.eta == 0.0 || (n.eta > 0.0 && n.eta < 1.0)) {
                return bad(format!("noise eta {} outside {{0}} union (0, 1)", n.eta));
            }
        }
        Ok(())
    }

    /// Learning rate for a 0-indexed epoch under the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&frac| {
                let milestone = (frac * self.epochs as f64).floor() as usize;
                epoch >= milestone && milestone > 0
            })
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// One run-log row. The init row (epoch 0) carries only the evaluation
/// columns; its loss fields are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl_sum: f64,
    pub train_top1: f64,
    pub val_top1: f64,
    pub seconds: f64,
}

/// Everything a finished run reports.
pub struct RunOutcome<E: Elem> {
    pub records: Vec<MetricsRecord>,
    /// Per-step loss decomposition, in step order.
    pub step_breakdowns: Vec<LossBreakdown>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub final_val_top1: f64,
    pub params: ParameterSet<E>,
    pub best_params: ParameterSet<E>,
    pub mask: CorruptionMask,
    pub total_steps: u64,
}

/// Runs one experiment end to end: noise injection (when configured), seeded
/// model build, the epoch loop with one-step lookahead, per-epoch evaluation,
/// and best/final tracking. Fully reproducible from the config.
pub fn run_experiment<E: Elem>(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<RunOutcome<E>, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let elapsed = |timing: Timing| -> f64 {
        match timing {
            Timing::Wall => started.elapsed().as_secs_f64(),
            Timing::Fixed => 0.0,
        }
    };

    let (train, mask) = match &cfg.noise {
        Some(spec) if spec.eta > 0.0 => inject_label_noise(train, spec)?,
        _ => (train.clone(), CorruptionMask::default()),
    };

    let sampler = EpochSampler::new(train.len(), cfg.batch_size, cfg.seed)?;
    let mut trainer = Trainer::<E>::new(cfg, &train, &sampler)?;

    let mut records = Vec::new();
    let mut step_breakdowns = Vec::new();

    let init_val = evaluate_top1(trainer.model(), trainer.params(), val)?;
    records.push(MetricsRecord {
        epoch: 0,
        step: 0,
        lambda: 0.0,
        loss_total: f64::NAN,
        loss_ce: f64::NAN,
        loss_kl_sum: f64::NAN,
        train_top1: f64::NAN,
        val_top1: init_val,
        seconds: elapsed(cfg.timing),
    });
    let mut best_epoch = 0;
    let mut best_val = init_val;
    let mut best_params = trainer.params().clone();

    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch_batches(epoch as u64);
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut total_sum = 0.0;
        let mut last_lambda = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (t, batch_indices) in batches.iter().enumerate() {
            let batch = train.minibatch(batch_indices)?;
            let lookahead = sampler.lookahead(epoch as u64, t, cfg.epochs as u64);
            let outcome = trainer.step(&batch, lookahead.as_deref())?;
            ce_sum += outcome.breakdown.ce;
            kl_sum += outcome.breakdown.kl_sum();
            total_sum += outcome.breakdown.total;
            last_lambda = outcome.breakdown.lambda;
            correct += outcome.correct;
            seen += batch.len();
            step_breakdowns.push(outcome.breakdown);
        }
        let steps = batches.len() as f64;
        let val_top1 = evaluate_top1(trainer.model(), trainer.params(), val)?;
        if val_top1 > best_val {
            best_val = val_top1;
            best_epoch = epoch + 1;
            best_params = trainer.params().clone();
        }
        records.push(MetricsRecord {
            epoch: epoch + 1,
            step: trainer.global_step(),
            lambda: last_lambda,
            loss_total: total_sum / steps,
            loss_ce: ce_sum / steps,
            loss_kl_sum: kl_sum / steps,
            train_top1: correct as f64 / seen as f64,
            val_top1,
            seconds: elapsed(cfg.timing),
        });
    }

    let final_val = records.last().map(|r| r.val_top1).unwrap_or(init_val);
    let total_steps = trainer.global_step();
    Ok(RunOutcome {
        records,
        step_breakdowns,
        best_epoch,
        best_val_top1: best_val,
        final_val_top1: final_val,
        params: trainer.into_params(),
        best_params,
        mask,
        total_steps,
    })
}
