//! Soft labels, KL consistency/distillation loss, hard-label cross-entropy,
//! the cosine mixing weight, and their combination into one training loss.

use crate::data::ChannelId;
use crate::tensor::{softmax_rows_with_temperature, Elem, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("soft-label indices misaligned with batch (broken channel offset): expected {expected:?}.., got {got:?}..")]
    IndexMisaligned { expected: Vec<u32>, got: Vec<u32> },
    #[error("class count mismatch: {lhs} vs {rhs}")]
    ClassMismatch { lhs: usize, rhs: usize },
    #[error("soft-label row {row} sums to {sum}, outside 1 +/- 1e-9")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("duplicate sample index {0} in a soft-label set")]
    DuplicateIndex(u32),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("schedule wants 0 <= current <= total and total >= 1, got s={current}, S={total}")]
    InvalidSchedule { current: u64, total: u64 },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
}

/// Temperature-softened class distributions produced at one step by one
/// channel, keyed by the sample indices they describe.
#[derive(Debug, Clone)]
pub struct SoftLabelSet<E: Elem> {
    /// Step whose weights produced these rows.
    pub step: u64,
    pub channel: ChannelId,
    pub temperature: f64,
    pub indices: Vec<u32>,
    /// `(n, K)` probability rows.
    pub probs: Tensor<E>,
}

impl<E: Elem> SoftLabelSet<E> {
    pub fn new(
        step: u64,
        channel: ChannelId,
        temperature: f64,
        indices: Vec<u32>,
        probs: Tensor<E>,
    ) -> Result<Self, LossError> {
        let classes = *probs.shape().last().unwrap_or(&0);
        if probs.shape().len() != 2 || probs.shape()[0] != indices.len() || classes == 0 {
            return Err(LossError::ClassMismatch {
                lhs: indices.len(),
                rhs: probs.shape().first().copied().unwrap_or(0),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &indices {
            if !seen.insert(i) {
                return Err(LossError::DuplicateIndex(i));
            }
        }
        for row in 0..indices.len() {
            let mut sum = 0.0f64;
            for &p in probs.row(row) {
                let p = p.to_f64();
                if !(p >= 0.0) {
                    return Err(LossError::RowNotNormalized { row, sum: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > E::ROW_SUM_TOL {
                return Err(LossError::RowNotNormalized { row, sum });
            }
        }
        Ok(SoftLabelSet {
            step,
            channel,
            temperature,
            indices,
            probs,
        })
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Row-wise `softmax(logits / tau)`, max-stabilized. Higher temperature
/// flattens the rows.
pub fn soften<E: Elem>(logits: &Tensor<E>, tau: f64) -> Result<Tensor<E>, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::NonPositiveTemperature(tau));
    }
    if !logits.data().iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite("logits"));
    }
    let cols = *logits.shape().last().unwrap_or(&0);
    if cols == 0 {
        return Err(LossError::ClassMismatch { lhs: 0, rhs: 0 });
    }
    let mut out = Tensor::zeros(logits.shape());
    softmax_rows_with_temperature(logits.data(), cols, tau, out.data_mut());
    Ok(out)
}

/// Mean `KL(teacher || student)` over aligned rows, `0 ln 0 := 0`. Index
/// misalignment is a hard error: it signals a broken channel offset, never a
/// condition to paper over. This is the plain-value route; the gradient path
/// lives on the tape and treats the teacher as detached.
pub fn kl_loss<E: Elem>(
    teacher: &SoftLabelSet<E>,
    student: &SoftLabelSet<E>,
) -> Result<f64, LossError> {
    if teacher.indices != student.indices {
        return Err(LossError::IndexMisaligned {
            expected: teacher.indices.iter().copied().take(4).collect(),
            got: student.indices.iter().copied().take(4).collect(),
        });
    }
    if teacher.classes() != student.classes() {
        return Err(LossError::ClassMismatch {
            lhs: teacher.classes(),
            rhs: student.classes(),
        });
    }
    let n = teacher.len() as f64;
    let mut acc = 0.0f64;
    for (&t, &s) in teacher.probs.data().iter().zip(student.probs.data()) {
        let t = t.to_f64();
        if t > 0.0 {
            acc += t * (t.ln() - s.to_f64().ln());
        }
    }
    Ok(acc / n)
}

/// Mean hard-label cross-entropy from temperature-1 log-probabilities,
/// `-(1/n) sum_i logp[i, y_i]`.
pub fn ce_loss<E: Elem>(log_probs: &Tensor<E>, labels: &[usize]) -> Result<f64, LossError> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::ClassMismatch {
            lhs: shape.first().copied().unwrap_or(0),
            rhs: labels.len(),
        });
    }
    let classes = shape[1];
    let mut acc = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(LossError::LabelOutOfRange { label: y, classes });
        }
        acc += log_probs.row(i)[y].to_f64();
    }
    Ok(-acc / labels.len() as f64)
}

/// Inputs of the cosine weight: the cap `alpha`, mini-batches trained so far,
/// and the total mini-batch count of the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub alpha: f64,
    pub current: u64,
    pub total: u64,
}

/// The cosine mixing weight
/// `lambda = alpha * (1 - 0.5 * (1 + cos(pi * s / S)))`:
/// 0 at the start, `alpha` at the end, monotone nondecreasing in between.
pub fn lambda_schedule(p: ScheduleParams) -> Result<f64, LossError> {
    if p.total < 1 || p.current > p.total {
        return Err(LossError::InvalidSchedule {
            current: p.current,
            total: p.total,
        });
    }
    if !(0.0..=1.0).contains(&p.alpha) {
        return Err(LossError::InvalidAlpha(p.alpha));
    }
    let frac = p.current as f64 / p.total as f64;
    Ok(p.alpha * (1.0 - 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())))
}

/// The weighted decomposition of one training step's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl_terms: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_terms.iter().sum()
    }
}

/// Combines the components: `total = (1 - lambda) * ce + lambda * sum(kl)`.
/// With no stored soft labels (cold start) the total is exactly the
/// cross-entropy, regardless of `lambda`.
pub fn total_loss(ce: f64, kl_terms: &[f64], lambda: f64) -> Result<LossBreakdown, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::InvalidLambda(lambda));
    }
    if !ce.is_finite() || kl_terms.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("loss component"));
    }
    let total = if kl_terms.is_empty() {
        ce
    } else {
        let kl_sum: f64 = kl_terms.iter().sum();
        (1.0 - lambda) * ce + lambda * kl_sum
    };
    Ok(LossBreakdown {
        ce,
        kl_terms: kl_terms.to_vec(),
        lambda,
        total,
    })
}
