//! Per-method training steps on a shared skeleton: channel-A augmentation,
//! one traced forward, method-specific loss assembly, SGD update.

use crate::data::{augment, ChannelId, Dataset, EpochSampler, MiniBatch};
use crate::losses::{
    lambda_schedule, soften, total_loss, LossBreakdown, ScheduleParams, SoftLabelSet,
};
use crate::models::{argmax, build, Model};
use crate::tensor::{sgd_step, Elem, NodeId, ParameterSet, SgdHyper, Tape, Tensor};

use super::{Method, TrainConfig, TrainError};

/// What one step reports back to the loop.
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Channel-A training predictions that matched their hard label.
    pub correct: usize,
}

/// Method-specific carryover between steps.
pub enum MethodState<E: Elem> {
    Vanilla,
    Lsr {
        epsilon: f64,
    },
    Dlb {
        tau: f64,
        alpha: f64,
        stash: Option<DlbStash<E>>,
    },
    Sam {
        rho: f64,
    },
    Smc {
        channels: usize,
        tau: f64,
        alpha: f64,
        /// Soft labels produced at the previous step, one set per non-A
        /// channel; `None` at the cold start and after the final lookahead.
        buffer: Option<Vec<SoftLabelSet<E>>>,
    },
}

/// The previous batch as DLB re-presents it: the exact augmented pixels, hard
/// labels, and temperature-softened outputs stored at the previous step.
pub struct DlbStash<E: Elem> {
    images: Tensor<E>,
    labels: Vec<usize>,
    soft: Tensor<E>,
}

impl<E: Elem> MethodState<E> {
    fn new(method: &Method) -> Self {
        match *method {
            Method::Vanilla => MethodState::Vanilla,
            Method::Lsr { epsilon } => MethodState::Lsr { epsilon },
            Method::Dlb { tau, alpha } => MethodState::Dlb {
                tau,
                alpha,
                stash: None,
            },
            Method::Sam { rho } => MethodState::Sam { rho },
            Method::Smc {
                channels,
                tau,
                alpha,
            } => MethodState::Smc {
                channels,
                tau,
                alpha,
                buffer: None,
            },
        }
    }
}

/// One experiment's mutable training state. [`Trainer::step`] consumes
/// mini-batches in sampler order; the loop in [`super::run_experiment`]
/// drives it, and tests can drive it directly.
pub struct Trainer<'a, E: Elem> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    model: Model,
    params: ParameterSet<E>,
    state: MethodState<E>,
    global_step: u64,
    steps_per_epoch: u64,
    total_steps: u64,
}

impl<'a, E: Elem> Trainer<'a, E> {
    pub fn new(
        cfg: &'a TrainConfig,
        train: &'a Dataset,
        sampler: &EpochSampler,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (model, params) = build::<E>(&cfg.model, cfg.seed)?;
        let steps_per_epoch = sampler.batches_per_epoch() as u64;
        Ok(Trainer {
            cfg,
            train,
            model,
            params,
            state: MethodState::new(&cfg.method),
            global_step: 0,
            steps_per_epoch,
            total_steps: cfg.epochs as u64 * steps_per_epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParameterSet<E> {
        &self.params
    }

    pub fn into_params(self) -> ParameterSet<E> {
        self.params
    }

    /// Mini-batches trained so far; drives the cosine weight.
    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn state(&self) -> &MethodState<E> {
        &self.state
    }

    fn hyper(&self) -> SgdHyper {
        let epoch = (self.global_step / self.steps_per_epoch.max(1)) as usize;
        SgdHyper {
            lr: self.cfg.lr_at_epoch(epoch),
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        }
    }

    fn view_a(&self, batch: &MiniBatch) -> Tensor<E> {
        augment::<E>(
            self.train,
            batch,
            ChannelId::A,
            self.global_step,
            self.cfg.seed,
            &self.cfg.recipe,
        )
        .tensor
    }

    /// Runs one training step. `lookahead` is the next batch's index list,
    /// empty only at the final step of the run.
    pub fn step(
        &mut self,
        batch: &MiniBatch,
        lookahead: Option<&[u32]>,
    ) -> Result<StepOutcome, TrainError> {
        let outcome = match &self.state {
            MethodState::Vanilla => self.ce_step(batch, None)?,
            MethodState::Lsr { epsilon } => self.ce_step(batch, Some(*epsilon))?,
            MethodState::Sam { rho } => self.sam_step(batch, *rho)?,
            MethodState::Dlb { tau, alpha, .. } => self.dlb_step(batch, *tau, *alpha)?,
            MethodState::Smc {
                channels,
                tau,
                alpha,
                ..
            } => self.smc_step(batch, lookahead, *channels, *tau, *alpha)?,
        };
        if !outcome.breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.global_step,
            });
        }
        self.global_step += 1;
        Ok(outcome)
    }

    fn count_correct(logits: &Tensor<E>, labels: &[u8], rows: std::ops::Range<usize>) -> usize {
        rows.filter(|&i| argmax(logits.row(i)) == labels[i - (logits.shape()[0] - labels.len())] as usize)
            .count()
    }

    /// Cross-entropy step; with `Some(epsilon)` the target rows are smoothed,
    /// which is the label-smoothing comparator.
    fn ce_step(&mut self, batch: &MiniBatch, epsilon: Option<f64>) -> Result<StepOutcome, TrainError> {
        let mut tape = Tape::new();
        let pids = self.model.register_params(&mut tape, &self.params)?;
        let x = tape.constant(self.view_a(batch))?;
        let logits = self.model.forward(&mut tape, &pids, x)?;
        let logp = tape.log_softmax(logits)?;
        let loss = match epsilon {
            None => tape.nll_mean(logp, &batch.label_indices())?,
            Some(eps) => {
                let targets = smoothed_targets::<E>(&batch.labels, self.model.spec.classes, eps);
                tape.soft_ce_mean(logp, targets)?
            }
        };
        let correct = Self::count_correct(tape.value(logits), &batch.labels, 0..batch.len());
        let breakdown = total_loss(tape.value(loss).item().to_f64(), &[], 0.0)?;
        let grads = {
            let g = tape.backward(loss)?;
            pids.iter().map(|&id| g.wrt(id)).collect::<Vec<_>>()
        };
        let hyper = self.hyper();
        sgd_step(&mut self.params, &grads, hyper)?;
        Ok(StepOutcome { breakdown, correct })
    }

    /// First-order sharpness-aware step: ascend `rho` along the normalized
    /// gradient, take the gradient there, apply it at the original weights.
    /// Zero radius or zero gradient norm reduce to the plain step.
    fn sam_step(&mut self, batch: &MiniBatch, rho: f64) -> Result<StepOutcome, TrainError> {
        let view = self.view_a(batch);
        let labels = batch.label_indices();

        let forward_backward = |params: &ParameterSet<E>,
                                model: &Model|
         -> Result<(Tensor<E>, f64, Vec<Tensor<E>>), TrainError> {
            let mut tape = Tape::new();
            let pids = model.register_params(&mut tape, params)?;
            let x = tape.constant(view.clone())?;
            let logits = model.forward(&mut tape, &pids, x)?;
            let logp = tape.log_softmax(logits)?;
            let loss = tape.nll_mean(logp, &labels)?;
            let logits_value = tape.value(logits).clone();
            let loss_value = tape.value(loss).item().to_f64();
            let g = tape.backward(loss)?;
            let grads = pids.iter().map(|&id| g.wrt(id)).collect();
            Ok((logits_value, loss_value, grads))
        };

        let (logits, loss_value, first_grads) = forward_backward(&self.params, &self.model)?;
        let norm = first_grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();

        let grads = if rho > 0.0 && norm > 0.0 {
            let mut perturbed = self.params.clone();
            perturbed.add_scaled(&first_grads, E::from_f64(rho / norm))?;
            let (_, _, second) = forward_backward(&perturbed, &self.model)?;
            second
        } else {
            first_grads
        };

        let correct = Self::count_correct(&logits, &batch.labels, 0..batch.len());
        let breakdown = total_loss(loss_value, &[], 0.0)?;
        let hyper = self.hyper();
        sgd_step(&mut self.params, &grads, hyper)?;
        Ok(StepOutcome { breakdown, correct })
    }

    /// Last-batch distillation: the stored previous batch rides along the
    /// current one for the hard-label loss, and its stored soft labels are
    /// distilled into the current weights' outputs on those same pixels.
    fn dlb_step(&mut self, batch: &MiniBatch, tau: f64, alpha: f64) -> Result<StepOutcome, TrainError> {
        let lambda = lambda_schedule(ScheduleParams {
            alpha,
            current: self.global_step,
            total: self.total_steps.max(1),
        })?;
        let view = self.view_a(batch);
        let n_cur = batch.len();

        let stash = match &mut self.state {
            MethodState::Dlb { stash, .. } => stash.take(),
            _ => unreachable!("dlb_step outside dlb state"),
        };

        let mut tape = Tape::new();
        let pids = self.model.register_params(&mut tape, &self.params)?;
        let (loss, logits, breakdown, n_prev) = match &stash {
            Some(st) => {
                let prev = tape.constant(st.images.clone())?;
                let cur = tape.constant(view.clone())?;
                let x = tape.concat_rows(prev, cur)?;
                let logits = self.model.forward(&mut tape, &pids, x)?;
                let logp = tape.log_softmax(logits)?;
                let mut labels = st.labels.clone();
                labels.extend(batch.label_indices());
                let ce = tape.nll_mean(logp, &labels)?;
                let prev_logits = tape.slice_rows(logits, 0, st.labels.len())?;
                let scaled = tape.scale(prev_logits, 1.0 / tau)?;
                let logp_tau = tape.log_softmax(scaled)?;
                let teacher = tape.constant(st.soft.clone())?;
                let kl = tape.kl_teacher_mean(logp_tau, teacher)?;
                let weighted_ce = tape.scale(ce, 1.0 - lambda)?;
                let weighted_kl = tape.scale(kl, lambda)?;
                let loss = tape.add(weighted_ce, weighted_kl)?;
                let breakdown = total_loss(
                    tape.value(ce).item().to_f64(),
                    &[tape.value(kl).item().to_f64()],
                    lambda,
                )?;
                (loss, logits, breakdown, st.labels.len())
            }
            None => {
                let x = tape.constant(view.clone())?;
                let logits = self.model.forward(&mut tape, &pids, x)?;
                let logp = tape.log_softmax(logits)?;
                let ce = tape.nll_mean(logp, &batch.label_indices())?;
                let breakdown = total_loss(tape.value(ce).item().to_f64(), &[], lambda)?;
                (ce, logits, breakdown, 0)
            }
        };

        let logits_value = tape.value(logits).clone();
        let correct = Self::count_correct(&logits_value, &batch.labels, n_prev..n_prev + n_cur);

        // Store this batch for the next step: its augmented pixels and the
        // temperature-softened outputs produced by the current weights.
        let rows = logits_value.shape()[1];
        let cur_logits = Tensor::from_vec(
            &[n_cur, rows],
            logits_value.data()[n_prev * rows..].to_vec(),
        )?;
        let soft = soften(&cur_logits, tau)?;
        let next_stash = DlbStash {
            images: view,
            labels: batch.label_indices(),
            soft,
        };

        let grads = {
            let g = tape.backward(loss)?;
            pids.iter().map(|&id| g.wrt(id)).collect::<Vec<_>>()
        };
        let hyper = self.hyper();
        sgd_step(&mut self.params, &grads, hyper)?;
        match &mut self.state {
            MethodState::Dlb { stash, .. } => *stash = Some(next_stash),
            _ => unreachable!(),
        }
        Ok(StepOutcome { breakdown, correct })
    }

    /// The multi-channel self-distillation step.
    ///
    /// Channel A carries the gradient on this batch; channels B, C, ...
    /// evaluate the lookahead batch at the *current* weights without a trace
    /// and store softened outputs for the next step, whose channel-A batch is
    /// exactly that lookahead. Stored labels from the previous step enter as
    /// detached KL teachers against channel A's temperature-tau rows.
    fn smc_step(
        &mut self,
        batch: &MiniBatch,
        lookahead: Option<&[u32]>,
        channels: usize,
        tau: f64,
        alpha: f64,
    ) -> Result<StepOutcome, TrainError> {
        let lambda = lambda_schedule(ScheduleParams {
            alpha,
            current: self.global_step,
            total: self.total_steps.max(1),
        })?;

        let mut tape = Tape::new();
        let pids = self.model.register_params(&mut tape, &self.params)?;
        let x = tape.constant(self.view_a(batch))?;
        let logits = self.model.forward(&mut tape, &pids, x)?;
        let logp1 = tape.log_softmax(logits)?;
        let ce = tape.nll_mean(logp1, &batch.label_indices())?;

        let buffer = match &mut self.state {
            MethodState::Smc { buffer, .. } => buffer.take(),
            _ => unreachable!("smc_step outside smc state"),
        };

        let mut kl_nodes: Vec<NodeId> = Vec::new();
        if let Some(sets) = &buffer {
            let scaled = tape.scale(logits, 1.0 / tau)?;
            let logp_tau = tape.log_softmax(scaled)?;
            for set in sets {
                if set.indices != batch.indices || set.step + 1 != self.global_step {
                    return Err(TrainError::BufferMisaligned {
                        step: self.global_step,
                    });
                }
                let teacher = tape.constant(set.probs.clone())?;
                kl_nodes.push(tape.kl_teacher_mean(logp_tau, teacher)?);
            }
        }

        let loss = if kl_nodes.is_empty() {
            ce
        } else {
            let mut kl_sum = kl_nodes[0];
            for &node in &kl_nodes[1..] {
                kl_sum = tape.add(kl_sum, node)?;
            }
            let weighted_ce = tape.scale(ce, 1.0 - lambda)?;
            let weighted_kl = tape.scale(kl_sum, lambda)?;
            tape.add(weighted_ce, weighted_kl)?
        };
        let kl_values: Vec<f64> = kl_nodes
            .iter()
            .map(|&n| tape.value(n).item().to_f64())
            .collect();
        let breakdown = total_loss(tape.value(ce).item().to_f64(), &kl_values, lambda)?;
        let correct = Self::count_correct(tape.value(logits), &batch.labels, 0..batch.len());

        // Fill the buffer for the next step before the weights move: sibling
        // channels must see this step's parameters.
        let next_buffer = match lookahead {
            Some(next_indices) => {
                let next_batch = self.train.minibatch(next_indices)?;
                let mut sets = Vec::with_capacity(channels - 1);
                for c in 1..channels {
                    let view = augment::<E>(
                        self.train,
                        &next_batch,
                        ChannelId(c as u8),
                        self.global_step,
                        self.cfg.seed,
                        &self.cfg.recipe,
                    );
                    let logits_c = self.model.logits(&self.params, view.tensor)?;
                    let probs = soften(&logits_c, tau)?;
                    sets.push(SoftLabelSet::new(
                        self.global_step,
                        ChannelId(c as u8),
                        tau,
                        next_batch.indices.clone(),
                        probs,
                    )?);
                }
                Some(sets)
            }
            None => None,
        };

        let grads = {
            let g = tape.backward(loss)?;
            pids.iter().map(|&id| g.wrt(id)).collect::<Vec<_>>()
        };
        let hyper = self.hyper();
        sgd_step(&mut self.params, &grads, hyper)?;
        match &mut self.state {
            MethodState::Smc { buffer, .. } => *buffer = next_buffer,
            _ => unreachable!(),
        }
        Ok(StepOutcome { breakdown, correct })
    }
}

/// `(1 - eps) * onehot + eps / K` target rows.
fn smoothed_targets<E: Elem>(labels: &[u8], classes: usize, epsilon: f64) -> Tensor<E> {
    let off = epsilon / classes as f64;
    let on = 1.0 - epsilon + off;
    let mut t = Tensor::filled(&[labels.len(), classes], E::from_f64(off));
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y as usize] = E::from_f64(on);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Recipe, Split};
    use crate::models::{Arch, ModelSpec};
    use crate::trainer::Timing;

    fn dataset(n: usize) -> Dataset {
        let images: Vec<u8> = (0..n * 3 * 8 * 8).map(|v| (v * 31 % 255) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|v| (v % 4) as u8).collect();
        Dataset::new(Split::Train, 4, (3, 8, 8), images, labels).unwrap()
    }

    fn config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            model: ModelSpec {
                arch: Arch::Mlp,
                input: (3, 8, 8),
                classes: 4,
                hidden: vec![16],
            },
            epochs: 2,
            batch_size: 4,
            lr: 0.05,
            lr_decay: 0.1,
            lr_milestones: vec![],
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 7,
            recipe: Recipe::standard(),
            noise: None,
            timing: Timing::Fixed,
        }
    }

    fn params_equal(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> bool {
        a.values()
            .zip(b.values())
            .all(|((_, x), (_, y))| x.data() == y.data())
    }

    fn run_steps(cfg: &TrainConfig, ds: &Dataset, steps: usize) -> (ParameterSet<f64>, Vec<LossBreakdown>) {
        let sampler = EpochSampler::new(ds.len(), cfg.batch_size, cfg.seed).unwrap();
        let mut trainer = Trainer::<f64>::new(cfg, ds, &sampler).unwrap();
        let per_epoch = sampler.batches_per_epoch();
        let mut breakdowns = Vec::new();
        for s in 0..steps {
            let epoch = (s / per_epoch) as u64;
            let t = s % per_epoch;
            let batch = ds.minibatch(&sampler.epoch_batches(epoch)[t]).unwrap();
            let la = sampler.lookahead(epoch, t, cfg.epochs as u64);
            breakdowns.push(trainer.step(&batch, la.as_deref()).unwrap().breakdown);
        }
        (trainer.into_params(), breakdowns)
    }

    #[test]
    fn smc_cold_start_is_pure_ce() {
        let ds = dataset(16);
        let cfg = config(Method::Smc {
            channels: 2,
            tau: 1.5,
            alpha: 0.9,
        });
        let (_, breakdowns) = run_steps(&cfg, &ds, 1);
        assert!(breakdowns[0].kl_terms.is_empty());
        assert_eq!(breakdowns[0].total, breakdowns[0].ce);
    }

    #[test]
    fn smc_has_k_minus_one_kl_terms_after_warmup() {
        let ds = dataset(16);
        for k in [2usize, 3] {
            let cfg = config(Method::Smc {
                channels: k,
                tau: 1.5,
                alpha: 0.9,
            });
            let (_, breakdowns) = run_steps(&cfg, &ds, 6);
            for b in &breakdowns[1..] {
                assert_eq!(b.kl_terms.len(), k - 1, "k = {k}");
                assert!(b.kl_terms.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn smc_alpha_zero_matches_vanilla_bitwise() {
        let ds = dataset(16);
        let smc = config(Method::Smc {
            channels: 2,
            tau: 1.5,
            alpha: 0.0,
        });
        let vanilla = config(Method::Vanilla);
        let (p_smc, b_smc) = run_steps(&smc, &ds, 8);
        let (p_van, b_van) = run_steps(&vanilla, &ds, 8);
        assert!(params_equal(&p_smc, &p_van));
        for (a, b) in b_smc.iter().zip(&b_van) {
            assert_eq!(a.total, b.total);
        }
        // The reduction still reports its KL terms; they are simply unweighted.
        assert_eq!(b_smc[1].kl_terms.len(), 1);
    }

    #[test]
    fn lsr_zero_epsilon_matches_vanilla_bitwise() {
        let ds = dataset(16);
        let (p_lsr, _) = run_steps(&config(Method::Lsr { epsilon: 0.0 }), &ds, 8);
        let (p_van, _) = run_steps(&config(Method::Vanilla), &ds, 8);
        assert!(params_equal(&p_lsr, &p_van));
    }

    #[test]
    fn sam_zero_rho_matches_vanilla_bitwise() {
        let ds = dataset(16);
        let (p_sam, _) = run_steps(&config(Method::Sam { rho: 0.0 }), &ds, 8);
        let (p_van, _) = run_steps(&config(Method::Vanilla), &ds, 8);
        assert!(params_equal(&p_sam, &p_van));
    }

    #[test]
    fn dlb_cold_start_is_ce_and_then_kl_appears() {
        let ds = dataset(16);
        let cfg = config(Method::Dlb {
            tau: 2.0,
            alpha: 0.9,
        });
        let (_, breakdowns) = run_steps(&cfg, &ds, 4);
        assert!(breakdowns[0].kl_terms.is_empty());
        for b in &breakdowns[1..] {
            assert_eq!(b.kl_terms.len(), 1);
        }
    }

    #[test]
    fn lsr_uniform_prediction_hand_value() {
        // With uniform predictions every target distribution costs ln K.
        let ds = dataset(16);
        let mut cfg = config(Method::Lsr { epsilon: 0.1 });
        // Zero the output layer so logits are exactly zero (uniform rows).
        cfg.lr = 1e-12;
        let sampler = EpochSampler::new(ds.len(), 4, cfg.seed).unwrap();
        let mut trainer = Trainer::<f64>::new(&cfg, &ds, &sampler).unwrap();
        for name in ["fc1.weight", "fc1.bias", "out.weight", "out.bias"] {
            let t = trainer.params.get_mut(name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        let batch = ds.minibatch(&sampler.epoch_batches(0)[0]).unwrap();
        let out = trainer.step(&batch, None).unwrap();
        assert!((out.breakdown.ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smc_final_step_accepts_missing_lookahead() {
        let ds = dataset(8);
        let mut cfg = config(Method::Smc {
            channels: 2,
            tau: 1.0,
            alpha: 0.9,
        });
        cfg.epochs = 1;
        let (_, breakdowns) = run_steps(&cfg, &ds, 2);
        assert_eq!(breakdowns.len(), 2);
    }

    #[test]
    fn misaligned_buffer_is_fatal() {
        let ds = dataset(16);
        let cfg = config(Method::Smc {
            channels: 2,
            tau: 1.0,
            alpha: 0.9,
        });
        let sampler = EpochSampler::new(16, 4, cfg.seed).unwrap();
        let mut trainer = Trainer::<f64>::new(&cfg, &ds, &sampler).unwrap();
        let batches = sampler.epoch_batches(0);
        let b0 = ds.minibatch(&batches[0]).unwrap();
        trainer.step(&b0, Some(&batches[1])).unwrap();
        // Feed a batch that is not the promised lookahead.
        let wrong = ds.minibatch(&batches[2]).unwrap();
        assert!(matches!(
            trainer.step(&wrong, Some(&batches[3])),
            Err(TrainError::BufferMisaligned { .. })
        ));
    }

    #[test]
    fn sam_perturbation_norm_is_rho() {
        // Quadratic check via the 1-d hand example: L = w^2 at w=1 with
        // rho = 0.5 and lr = 0.1 lands at w' = 0.7.
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        let grad = |p: &ParameterSet<f64>| -> Vec<Tensor<f64>> {
            // dL/dw = 2w.
            vec![Tensor::scalar(2.0 * p.get("w").unwrap().item())]
        };
        let g1 = grad(&params);
        let norm = g1[0].item().abs();
        let mut perturbed = params.clone();
        perturbed.add_scaled(&g1, 0.5 / norm).unwrap();
        assert_eq!(perturbed.get("w").unwrap().item(), 1.5);
        let g2 = grad(&perturbed);
        sgd_step(
            &mut params,
            &g2,
            SgdHyper {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        assert!((params.get("w").unwrap().item() - 0.7).abs() < 1e-15);
    }
}
