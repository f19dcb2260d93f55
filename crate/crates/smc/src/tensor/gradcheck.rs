//! Central finite-difference validation of the backward pass.
//!
//! The numeric side uses forward evaluations only, so it stays independent of
//! the analytic rules it checks.

use super::{NodeId, ParameterSet, Tape, Tensor, TensorError};

const FD_STEP: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-6;

/// Per-parameter result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of checking one forward closure against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Checks the analytic gradient of `build` (a closure assembling a scalar
/// loss from parameter leaves, data inputs baked in) against central finite
/// differences with step `1e-5`, in 64-bit mode.
///
/// `make_tape` controls the tape used for the analytic pass, which lets
/// negative controls install a [`super::Fault`].
pub fn finite_difference_check<M, B>(
    params: &ParameterSet<f64>,
    tolerance: f64,
    make_tape: M,
    build: B,
) -> Result<GradCheckReport, TensorError>
where
    M: Fn() -> Tape<f64>,
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    // Analytic pass.
    let mut tape = make_tape();
    let ids: Vec<NodeId> = params
        .values()
        .map(|(_, v)| tape.leaf(v.clone()))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let eval = |perturbed: &ParameterSet<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::inference();
        let ids: Vec<NodeId> = perturbed
            .values()
            .map(|(_, v)| tape.leaf(v.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_err: 0.0,
        tolerance,
    };
    for (pi, (name, _)) in params.values().enumerate() {
        let mut worst = 0.0f64;
        let numel = analytic[pi].numel();
        for ei in 0..numel {
            let mut plus = params.clone();
            let mut minus = params.clone();
            {
                let v = plus.get_mut(name).unwrap();
                v.data_mut()[ei] += FD_STEP;
            }
            {
                let v = minus.get_mut(name).unwrap();
                v.data_mut()[ei] -= FD_STEP;
            }
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi].data()[ei], numeric));
        }
        report.params.push(ParamError {
            name: name.to_string(),
            max_rel_err: worst,
        });
        report.max_rel_err = report.max_rel_err.max(worst);
    }
    Ok(report)
}

pub use super::tape::Fault;

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_params() -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(&[1, 2], vec![0.7, -1.3]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn linear_model_passes_tight_tolerance() {
        let params = linear_params();
        let report = finite_difference_check(&params, 1e-6, Tape::new, |tape, ids| {
            let x = tape.constant(Tensor::from_vec(&[2, 2], vec![0.5, 2.0, -1.0, 0.25])?)?;
            let y = tape.matmul_bt(x, ids[0])?;
            tape.sum(y)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn two_layer_relu_mlp_passes() {
        let mut params = ParameterSet::new();
        params
            .insert(
                "w1",
                Tensor::from_vec(&[3, 2], vec![0.4, -0.9, 1.1, 0.3, -0.6, 0.8]).unwrap(),
            )
            .unwrap();
        params
            .insert("b1", Tensor::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap())
            .unwrap();
        params
            .insert(
                "w2",
                Tensor::from_vec(&[2, 3], vec![0.7, -0.5, 0.2, -0.3, 0.9, 0.6]).unwrap(),
            )
            .unwrap();
        let report = finite_difference_check(&params, 1e-4, Tape::new, |tape, ids| {
            let x = tape.constant(Tensor::from_vec(&[2, 2], vec![0.8, -0.4, 1.5, 0.9])?)?;
            let h = tape.affine(x, ids[0], ids[1])?;
            let h = tape.relu(h)?;
            let y = tape.matmul_bt(h, ids[2])?;
            let lp = tape.log_softmax(y)?;
            tape.nll_mean(lp, &[0, 1])
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_relu_backward_fails() {
        let mut params = ParameterSet::new();
        params
            .insert("w", Tensor::from_vec(&[2, 2], vec![0.5, 0.8, -0.7, 1.2]).unwrap())
            .unwrap();
        let build = |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0])?)?;
            let y = tape.matmul_bt(x, ids[0])?;
            let r = tape.relu(y)?;
            tape.sum(r)
        };
        let clean = finite_difference_check(&params, 1e-4, Tape::new, build).unwrap();
        assert!(clean.passed());
        let faulty = finite_difference_check(
            &params,
            1e-4,
            || Tape::new().with_fault(Fault::ReluBackward),
            build,
        )
        .unwrap();
        assert!(!faulty.passed());
    }
}
