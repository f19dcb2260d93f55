//! The standard gradient-check suite: every tape operation plus the composed
//! training losses, each validated against central finite differences in
//! 64-bit mode.

use rand_chacha::ChaCha8Rng;

use crate::losses::{lambda_schedule, ScheduleParams};
use crate::models::{build, Arch, ModelSpec};

use crate::rng::{self, DOMAIN_GRADCHECK};
use crate::tensor::{
    finite_difference_check, softmax_rows_with_temperature, Fault, NodeId, ParameterSet,
    Tape, Tensor, TensorError,
};

pub const SUITE_TOLERANCE: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 64;

/// One suite row.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_tensor(stream: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| (rng::uniform_f64(stream) * 2.0 - 1.0) * scale)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn rand_labels(stream: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng::uniform_usize(stream, classes)).collect()
}

fn simplex_rows(stream: &mut ChaCha8Rng, n: usize, classes: usize) -> Tensor<f64> {
    let logits = rand_tensor(stream, &[n, classes], 2.0);
    let mut probs = Tensor::zeros(&[n, classes]);
    softmax_rows_with_temperature(logits.data(), classes, 1.0, probs.data_mut());
    probs
}

struct Case {
    name: &'static str,
    /// Builds `(params, loss closure)` from a seeded stream.
    run: Box<dyn Fn(u64, Option<Fault>) -> Result<f64, TensorError>>,
}

fn check<B>(fault: Option<Fault>, params: ParameterSet<f64>, build: B) -> Result<f64, TensorError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    // Probe the trace first; a draw too close to a relu/pool kink makes the
    // caller resample rather than risk a one-sided finite difference.
    let mut probe = Tape::new();
    let ids: Vec<NodeId> = params
        .values()
        .map(|(_, v)| probe.leaf(v.clone()))
        .collect::<Result<_, _>>()?;
    build(&mut probe, &ids)?;
    if probe.kink_margin() <= KINK_MARGIN {
        return Ok(f64::NAN);
    }
    let make_tape = move || match fault {
        Some(f) => Tape::new().with_fault(f),
        None => Tape::new(),
    };
    let report = finite_difference_check(&params, SUITE_TOLERANCE, make_tape, &build)?;
    Ok(report.max_rel_err)
}

macro_rules! case {
    ($name:literal, $body:expr) => {
        Case {
            name: $name,
            run: Box::new($body),
        }
    };
}

fn suite_cases() -> Vec<Case> {
    vec![
        case!("matmul", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 0, 0);
            let mut p = ParameterSet::new();
            p.insert("a", rand_tensor(&mut s, &[3, 4], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[4, 2], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                t.sum(y)
            })
        }),
        case!("matmul_bt", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 1, 0);
            let mut p = ParameterSet::new();
            p.insert("a", rand_tensor(&mut s, &[3, 4], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[2, 4], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.matmul_bt(ids[0], ids[1])?;
                t.sum(y)
            })
        }),
        case!("affine", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 2, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[2, 3], 1.0))?;
            p.insert("w", rand_tensor(&mut s, &[4, 3], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[4], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.affine(ids[0], ids[1], ids[2])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("conv2d_pad0", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 3, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[2, 2, 5, 5], 1.0))?;
            p.insert("w", rand_tensor(&mut s, &[3, 2, 3, 3], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.conv2d(ids[0], ids[1], 0)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("conv2d_pad1", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 4, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[1, 2, 4, 4], 1.0))?;
            p.insert("w", rand_tensor(&mut s, &[2, 2, 3, 3], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.conv2d(ids[0], ids[1], 1)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("bias_channel", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 5, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[2, 3, 2, 2], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[3], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.bias_channel(ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("maxpool2", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 6, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[2, 2, 4, 4], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.maxpool2(ids[0])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("relu", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 7, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[3, 5], 1.0))?;
            check(fault, p, |t, ids| {
                let y = t.relu(ids[0])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            })
        }),
        case!("add_mul_scale", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 8, 0);
            let mut p = ParameterSet::new();
            p.insert("a", rand_tensor(&mut s, &[2, 3], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[2, 3], 1.0))?;
            check(fault, p, |t, ids| {
                let sum = t.add(ids[0], ids[1])?;
                let prod = t.mul(sum, ids[0])?;
                let scaled = t.scale(prod, -0.731)?;
                t.sum(scaled)
            })
        }),
        case!("reshape_flatten", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 9, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[2, 3, 2], 1.0))?;
            check(fault, p, |t, ids| {
                let r = t.reshape(ids[0], &[3, 4])?;
                let f = t.flatten(r)?;
                let sq = t.mul(f, f)?;
                t.sum(sq)
            })
        }),
        case!("log_softmax", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 10, 0);
            let mut p = ParameterSet::new();
            p.insert("x", rand_tensor(&mut s, &[3, 4], 2.0))?;
            let w = rand_tensor(&mut s, &[3, 4], 1.0);
            check(fault, p, move |t, ids| {
                let lp = t.log_softmax(ids[0])?;
                let ww = t.constant(w.clone())?;
                let prod = t.mul(lp, ww)?;
                t.sum(prod)
            })
        }),
        case!("nll_mean", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 11, 0);
            let mut p = ParameterSet::new();
            p.insert("logits", rand_tensor(&mut s, &[4, 5], 2.0))?;
            let labels = rand_labels(&mut s, 4, 5);
            check(fault, p, move |t, ids| {
                let lp = t.log_softmax(ids[0])?;
                t.nll_mean(lp, &labels)
            })
        }),
        case!("soft_ce_mean", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 12, 0);
            let mut p = ParameterSet::new();
            p.insert("logits", rand_tensor(&mut s, &[3, 4], 2.0))?;
            let targets = simplex_rows(&mut s, 3, 4);
            check(fault, p, move |t, ids| {
                let lp = t.log_softmax(ids[0])?;
                t.soft_ce_mean(lp, targets.clone())
            })
        }),
        case!("kl_teacher_mean", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 13, 0);
            let mut p = ParameterSet::new();
            p.insert("logits", rand_tensor(&mut s, &[3, 4], 2.0))?;
            let teacher = simplex_rows(&mut s, 3, 4);
            check(fault, p, move |t, ids| {
                let scaled = t.scale(ids[0], 1.0 / 1.5)?;
                let lp = t.log_softmax(scaled)?;
                let teach = t.constant(teacher.clone())?;
                t.kl_teacher_mean(lp, teach)
            })
        }),
        case!("concat_slice_rows", |seed, fault| {
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 14, 0);
            let mut p = ParameterSet::new();
            p.insert("a", rand_tensor(&mut s, &[2, 3], 1.0))?;
            p.insert("b", rand_tensor(&mut s, &[3, 3], 1.0))?;
            check(fault, p, |t, ids| {
                let cat = t.concat_rows(ids[0], ids[1])?;
                let mid = t.slice_rows(cat, 1, 3)?;
                let sq = t.mul(mid, mid)?;
                t.sum(sq)
            })
        }),
        case!("mlp_cross_entropy", |seed, fault| {
            let spec = ModelSpec {
                arch: Arch::Mlp,
                input: (1, 3, 3),
                classes: 3,
                hidden: vec![6],
            };
            let (model, params) = build::<f64>(&spec, seed).expect("valid model spec");
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 15, 0);
            let input = rand_tensor(&mut s, &[2, 1, 3, 3], 1.0);
            let labels = rand_labels(&mut s, 2, 3);
            check(fault, params, move |t, ids| {
                let x = t.constant(input.clone())?;
                let logits = model.forward(t, ids, x)?;
                let lp = t.log_softmax(logits)?;
                t.nll_mean(lp, &labels)
            })
        }),
        case!("conv_net_cross_entropy", |seed, fault| {
            // The small-CNN op chain (conv, bias, relu, pool, twice, then the
            // affine head) at toy widths so finite differences stay cheap.
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 16, 0);
            let mut p = ParameterSet::new();
            p.insert("c1.w", rand_tensor(&mut s, &[3, 2, 3, 3], 0.5))?;
            p.insert("c1.b", rand_tensor(&mut s, &[3], 0.3))?;
            p.insert("c2.w", rand_tensor(&mut s, &[4, 3, 3, 3], 0.5))?;
            p.insert("c2.b", rand_tensor(&mut s, &[4], 0.3))?;
            p.insert("fc.w", rand_tensor(&mut s, &[6, 4], 0.7))?;
            p.insert("fc.b", rand_tensor(&mut s, &[6], 0.3))?;
            p.insert("out.w", rand_tensor(&mut s, &[3, 6], 0.7))?;
            p.insert("out.b", rand_tensor(&mut s, &[3], 0.3))?;
            let input = rand_tensor(&mut s, &[2, 2, 6, 6], 1.0);
            let labels = rand_labels(&mut s, 2, 3);
            check(fault, p, move |t, ids| {
                let x = t.constant(input.clone())?;
                let c1 = t.conv2d(x, ids[0], 1)?;
                let c1 = t.bias_channel(c1, ids[1])?;
                let c1 = t.relu(c1)?;
                let p1 = t.maxpool2(c1)?;
                let c2 = t.conv2d(p1, ids[2], 1)?;
                let c2 = t.bias_channel(c2, ids[3])?;
                let c2 = t.relu(c2)?;
                let p2 = t.maxpool2(c2)?;
                let flat = t.flatten(p2)?;
                let h = t.affine(flat, ids[4], ids[5])?;
                let h = t.relu(h)?;
                let logits = t.affine(h, ids[6], ids[7])?;
                let lp = t.log_softmax(logits)?;
                t.nll_mean(lp, &labels)
            })
        }),
        case!("smc_total_loss", |seed, fault| {
            // The full composition: (1 - lambda) * CE + lambda * (KL1 + KL2)
            // with two stored teachers and a temperature-tau student head.
            let mut s = rng::stream(seed, DOMAIN_GRADCHECK, 17, 0);
            let mut p = ParameterSet::new();
            p.insert("logits", rand_tensor(&mut s, &[3, 5], 2.0))?;
            let labels = rand_labels(&mut s, 3, 5);
            let teachers = [simplex_rows(&mut s, 3, 5), simplex_rows(&mut s, 3, 5)];
            let tau = 1.5;
            let lambda = lambda_schedule(ScheduleParams {
                alpha: 0.9,
                current: 7,
                total: 10,
            })
            .expect("valid schedule");
            check(fault, p, move |t, ids| {
                let lp1 = t.log_softmax(ids[0])?;
                let ce = t.nll_mean(lp1, &labels)?;
                let scaled = t.scale(ids[0], 1.0 / tau)?;
                let lp_tau = t.log_softmax(scaled)?;
                let t1 = t.constant(teachers[0].clone())?;
                let t2 = t.constant(teachers[1].clone())?;
                let kl1 = t.kl_teacher_mean(lp_tau, t1)?;
                let kl2 = t.kl_teacher_mean(lp_tau, t2)?;
                let kl_sum = t.add(kl1, kl2)?;
                let wce = t.scale(ce, 1.0 - lambda)?;
                let wkl = t.scale(kl_sum, lambda)?;
                t.add(wce, wkl)
            })
        }),
    ]
}

/// Runs every case, resampling past kink-adjacent draws, and reports one row
/// per operation.
pub fn run_gradient_suite(fault: Option<Fault>) -> Result<Vec<OpCheck>, TensorError> {
    let mut rows = Vec::new();
    for case in suite_cases() {
        let mut max_rel_err = f64::NAN;
        for attempt in 0..MAX_ATTEMPTS {
            let e = (case.run)(attempt, fault)?;
            if e.is_finite() {
                max_rel_err = e;
                break;
            }
        }
        rows.push(OpCheck {
            name: case.name,
            max_rel_err,
            passed: max_rel_err.is_finite() && max_rel_err <= SUITE_TOLERANCE,
        });
    }
    Ok(rows)
}

/// Builds the composed loss with the teacher placed on the tape as a
/// trainable leaf and returns the largest absolute gradient entry that
/// reaches it. Detachment means this is exactly zero.
pub fn max_teacher_gradient() -> Result<f64, TensorError> {
    let mut s = rng::stream(99, DOMAIN_GRADCHECK, 18, 0);
    let logits_t = rand_tensor(&mut s, &[4, 6], 2.0);
    let teacher_t = simplex_rows(&mut s, 4, 6);
    let labels = rand_labels(&mut s, 4, 6);

    let mut tape = Tape::new();
    let logits = tape.leaf(logits_t)?;
    let teacher = tape.leaf(teacher_t)?;
    let lp1 = tape.log_softmax(logits)?;
    let ce = tape.nll_mean(lp1, &labels)?;
    let scaled = tape.scale(logits, 1.0 / 1.5)?;
    let lp_tau = tape.log_softmax(scaled)?;
    let kl = tape.kl_teacher_mean(lp_tau, teacher)?;
    let wce = tape.scale(ce, 0.4)?;
    let wkl = tape.scale(kl, 0.6)?;
    let loss = tape.add(wce, wkl)?;
    let grads = tape.backward(loss)?;
    Ok(grads
        .wrt(teacher)
        .data()
        .iter()
        .fold(0.0f64, |m, &g| m.max(g.abs())))
}
