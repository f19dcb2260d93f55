//! Named trainable parameters and the momentum SGD update.

use super::{Elem, Tensor, TensorError};

struct ParamEntry<E: Elem> {
    name: String,
    value: Tensor<E>,
    momentum: Tensor<E>,
}

/// An ordered map of named trainable tensors with per-parameter momentum
/// buffers. Iteration order is insertion order, which keeps runs
/// reproducible.
pub struct ParameterSet<E: Elem> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Elem> Default for ParameterSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Clone for ParameterSet<E> {
    fn clone(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    momentum: e.momentum.clone(),
                })
                .collect(),
        }
    }
}

impl<E: Elem> ParameterSet<E> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>) -> Result<(), TensorError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let momentum = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            momentum,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Adds `eps * direction` to every parameter; used by the SAM ascent step.
    pub fn add_scaled(&mut self, directions: &[Tensor<E>], eps: E) -> Result<(), TensorError> {
        check_alignment(&self.entries, directions, "add_scaled")?;
        for (entry, dir) in self.entries.iter_mut().zip(directions) {
            for (v, &d) in entry.value.data_mut().iter_mut().zip(dir.data()) {
                *v += eps * d;
            }
        }
        Ok(())
    }
}

/// Hyperparameters of one SGD update.
#[derive(Debug, Clone, Copy)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdHyper {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.lr > 0.0) {
            return Err(TensorError::InvalidHyper {
                what: "lr",
                value: self.lr,
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::InvalidHyper {
                what: "momentum",
                value: self.momentum,
            });
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TensorError::InvalidHyper {
                what: "weight_decay",
                value: self.weight_decay,
            });
        }
        Ok(())
    }
}

fn check_alignment<E: Elem>(
    entries: &[ParamEntry<E>],
    grads: &[Tensor<E>],
    op: &'static str,
) -> Result<(), TensorError> {
    if entries.len() != grads.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![entries.len()],
            rhs: vec![grads.len()],
        });
    }
    for (e, g) in entries.iter().zip(grads) {
        if e.value.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: e.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// One momentum SGD step with coupled L2 weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * w
/// w <- w - lr * v
/// ```
///
/// Gradients must be ordered exactly as the parameter entries.
pub fn sgd_step<E: Elem>(
    params: &mut ParameterSet<E>,
    grads: &[Tensor<E>],
    hyper: SgdHyper,
) -> Result<(), TensorError> {
    hyper.validate()?;
    check_alignment(&params.entries, grads, "sgd_step")?;
    let lr = E::from_f64(hyper.lr);
    let mom = E::from_f64(hyper.momentum);
    let wd = E::from_f64(hyper.weight_decay);
    for (entry, grad) in params.entries.iter_mut().zip(grads) {
        for ((w, v), &g) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(entry.momentum.data_mut())
            .zip(grad.data())
        {
            *v = mom * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn grad(value: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(value)]
    }

    #[test]
    fn plain_step() {
        let mut p = single(1.0);
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &grad(2.0), h).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.8);
    }

    #[test]
    fn zero_grad_leaves_params_on_first_step() {
        let mut p = single(3.0);
        let h = SgdHyper {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &grad(0.0), h).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 3.0);
    }

    #[test]
    fn two_momentum_steps_hand_recursion() {
        // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29.
        let mut p = single(0.0);
        let h = SgdHyper {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &grad(1.0), h).unwrap();
        sgd_step(&mut p, &grad(1.0), h).unwrap();
        assert!((p.get("w").unwrap().item() - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        let mut p = single(1.0);
        let bad_lr = SgdHyper {
            lr: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        assert!(sgd_step(&mut p, &grad(1.0), bad_lr).is_err());
        let ok = SgdHyper {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let wrong = vec![Tensor::zeros(&[2])];
        assert!(sgd_step(&mut p, &wrong, ok).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.insert("w", Tensor::scalar(2.0)),
            Err(TensorError::DuplicateParam(_))
        ));
    }
}
