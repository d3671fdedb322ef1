//! The full search procedure: pre-train to the rewind step, freeze, learn
//! the mask distribution, clamp it to a ticket, and retrain the ticket.

use serde::{Deserialize, Serialize};

use crate::controllers::{
    adam_update, gradbalance_step, lagrange_step, AdamState, ControllerMode, ControllerState, StepOutcome,
    DEFAULT_ETA, DEFAULT_LAMBDA_LR,
};
use crate::data::{Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::mask::{clamp_topk, init_distribution, MaskDistribution, Ticket, DEFAULT_TAU};
use crate::nn::{Arch, Evaluation, LrSchedule, ModelState, TrainConfig, Trainer};
use crate::objectives::{objective_value, teacher_stats, ObjectiveKind};

/// Overshoot tolerated above the effective density once it has been reached.
pub const OVERSHOOT_TOLERANCE: f64 = 0.10;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Target density κ.
    pub kappa: f64,
    pub tau: f64,
    /// Search steps `S` before the quick factor is applied.
    pub search_steps: usize,
    pub objective: ObjectiveKind,
    pub controller: ControllerMode,
    pub eta: f64,
    pub lambda_lr: f64,
    /// Initial Adam rate for the logits.
    pub search_lr: f64,
    /// Scales `search_steps`; 1/8 gives the quick variant, 1/2 the half one.
    pub quick_factor: f64,
    pub init_seed: u64,
    pub search_seed: u64,
    /// Training schedule; `train.rewind_step` is `k`, `train.steps` is `T`
    /// and `train.seed` drives batch order.
    pub train: TrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            kappa: 0.05,
            tau: DEFAULT_TAU,
            search_steps: 1000,
            objective: ObjectiveKind::ReverseKl,
            controller: ControllerMode::GradBalance,
            eta: DEFAULT_ETA,
            lambda_lr: DEFAULT_LAMBDA_LR,
            search_lr: 0.1,
            quick_factor: 1.0,
            init_seed: 0,
            search_seed: 1,
            train: TrainConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Search steps after the quick factor, at least one unless `S = 0`.
    pub fn effective_search_steps(&self) -> usize {
        if self.search_steps == 0 {
            return 0;
        }
        ((self.search_steps as f64 * self.quick_factor).round() as usize).max(1)
    }

    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidDensity(self.kappa));
        }
        if !(self.tau > 0.0) || !(self.quick_factor > 0.0 && self.quick_factor <= 1.0) || !(self.search_lr > 0.0) {
            return Err(Error::Config("tau, search_lr and quick_factor must be positive (quick_factor ≤ 1)".into()));
        }
        self.train.validate()
    }

    /// One search epoch is one pass over the unaugmented training split.
    pub fn steps_for_epochs(&self, data: &Dataset, epochs: f64) -> usize {
        let per_epoch = BatchSampler::new(data.train.len(), self.train.batch_size, 0).batches_per_epoch();
        (epochs * per_epoch as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchRecord {
    pub step: usize,
    pub objective: f64,
    pub expected_density: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub records: Vec<SearchRecord>,
    /// `(step, counts)` of retention probabilities over equal-width bins of
    /// `[0, 1]`.
    pub histograms: Vec<(usize, Vec<u64>)>,
    /// Steps where, after first reaching the effective density, the
    /// expected density exceeded it by more than the tolerance.
    pub overshoot_violations: usize,
    /// Steps whose constraint gradient vanished while active.
    pub degenerate_steps: usize,
}

impl SearchTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective,expected_density,lambda\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.objective, r.expected_density, r.lambda));
        }
        out
    }
}

pub fn histogram(dist: &MaskDistribution) -> Vec<u64> {
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for p in dist.probabilities() {
        let bin = ((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    counts
}

/// Learns the mask distribution on frozen weights. Batches come from the
/// training split in a seeded order without augmentation; the relaxed
/// sample at step `t` uses noise stream `t` of the search seed.
pub fn search_phase(model: &ModelState, cfg: &SearchConfig, data: &Dataset) -> Result<(MaskDistribution, SearchTrace)> {
    cfg.validate()?;
    let steps = cfg.effective_search_steps();
    let mut dist = init_distribution(model.layout(), cfg.kappa, cfg.tau)?;
    let mut state = ControllerState::new(cfg.controller, cfg.kappa, cfg.eta, cfg.lambda_lr)?;
    let mut adam = AdamState::new(dist.d(), LrSchedule::step_drops(cfg.search_lr, steps, &[0.9], 0.1));
    let mut sampler = BatchSampler::new(data.train.len(), cfg.train.batch_size, cfg.search_seed);
    let mut trace = SearchTrace::default();
    let cadence = (steps / 100).max(1);
    let mut reached = false;
    let limit = state.kappa_eff * (1.0 + OVERSHOOT_TOLERANCE);

    for step in 0..steps {
        if step % cadence == 0 {
            trace.histograms.push((step, histogram(&dist)));
        }
        let batch = data.batch(&data.train, &sampler.indices(step));
        let teacher = if cfg.objective.needs_teacher() {
            Some(teacher_stats(model, &batch, cfg.objective == ObjectiveKind::GradMatch)?)
        } else {
            None
        };
        let sample = dist.sample_soft_mask(cfg.search_seed, step as u64);
        let out: StepOutcome = match cfg.controller {
            ControllerMode::GradBalance => {
                gradbalance_step(model, &dist, &mut state, &batch, cfg.objective, teacher.as_ref(), &sample)?
            }
            ControllerMode::Lagrange => {
                lagrange_step(model, &dist, &mut state, &batch, cfg.objective, teacher.as_ref(), &sample)?
            }
        };
        trace.degenerate_steps += out.degenerate as usize;
        adam_update(&mut dist, &out.grad, &mut adam)?;
        let density = dist.expected_density();
        if reached && density > limit {
            trace.overshoot_violations += 1;
        }
        reached |= density <= state.kappa_eff;
        trace.records.push(SearchRecord {
            step,
            objective: out.objective,
            expected_density: density,
            lambda: out.lambda,
        });
    }
    trace.histograms.push((steps, histogram(&dist)));
    Ok((dist, trace))
}

/// Evaluation batch for objective-at-draw values: the first `n` training
/// samples.
pub fn evaluation_batch(data: &Dataset, n: usize) -> Batch {
    let idx: Vec<usize> = (0..n.min(data.train.len())).collect();
    data.batch(&data.train, &idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    /// Objective of the hard ticket on θ_k over the evaluation batch.
    pub draw_objective: f64,
    /// Task loss and accuracy of the hard ticket on θ_k, test split.
    pub draw: Evaluation,
    /// After retraining, test split.
    pub final_eval: Evaluation,
}

#[derive(Clone, Debug)]
pub struct CtsOutcome {
    pub ticket: Ticket,
    pub distribution: MaskDistribution,
    /// Weights at the rewind step.
    pub rewound: ModelState,
    /// Trainer state at the rewind step, for retraining other tickets.
    pub pre: Trainer,
    pub model: ModelState,
    pub trace: SearchTrace,
    pub metrics: RunMetrics,
}

/// Objective of `ticket` applied to `model` on the evaluation batch.
pub fn draw_objective(model: &ModelState, data: &Dataset, kind: ObjectiveKind, ticket: &Ticket, batch_size: usize) -> Result<f64> {
    let batch = evaluation_batch(data, 10 * batch_size);
    let teacher = if kind.needs_teacher() {
        Some(teacher_stats(model, &batch, kind == ObjectiveKind::GradMatch)?)
    } else {
        None
    };
    objective_value(kind, model, &batch, Some(&ticket.as_overlay()), teacher.as_ref())
}

/// Dense training to the rewind step; returns the trainer positioned there.
pub fn pretrain(arch: Arch, data: &Dataset, train: &TrainConfig, init_seed: u64) -> Result<Trainer> {
    let model = ModelState::for_dataset(arch, data, init_seed)?;
    let mut trainer = Trainer::new(model, data, train.clone(), None)?;
    trainer.run_until(train.rewind_step, data)?;
    Ok(trainer)
}

/// Continues training a ticket from the rewind point to `T`. The learning
/// rate schedule stays indexed by global step and the momentum buffers from
/// pre-training carry over, so an all-ones ticket reproduces dense training.
pub fn retrain(rewound: &Trainer, ticket: &Ticket, data: &Dataset) -> Result<ModelState> {
    let mut t = rewind(rewound, ticket, data)?;
    t.run_until(t.config().steps, data)?;
    Ok(t.into_model())
}

/// A trainer at the rewind point with `ticket` applied to the weights.
pub fn rewind(rewound: &Trainer, ticket: &Ticket, data: &Dataset) -> Result<Trainer> {
    Trainer::new(rewound.model.clone(), data, rewound.config().clone(), Some(ticket))?
        .resume(rewound.step, rewound.momentum.clone())
}

/// Draw-time metrics of `ticket` on the rewound weights, then retraining
/// and final test metrics.
pub fn evaluate_ticket(pre: &Trainer, ticket: &Ticket, data: &Dataset, kind: ObjectiveKind) -> Result<(ModelState, RunMetrics)> {
    let batch_size = pre.config().batch_size;
    let draw_objective = draw_objective(&pre.model, data, kind, ticket, batch_size)?;
    let draw = pre.model.evaluate(data, &data.test, Some(&ticket.as_overlay()))?;
    let model = retrain(pre, ticket, data)?;
    let final_eval = model.evaluate(data, &data.test, None)?;
    Ok((
        model,
        RunMetrics {
            draw_objective,
            draw,
            final_eval,
        },
    ))
}

pub fn run_cts(cfg: &SearchConfig, arch: Arch, data: &Dataset) -> Result<CtsOutcome> {
    cfg.validate()?;
    let pre = pretrain(arch, data, &cfg.train, cfg.init_seed)?;
    let rewound = pre.model.clone();
    let (distribution, trace) = search_phase(&rewound, cfg, data)?;
    let ticket = clamp_topk(&distribution, cfg.kappa)?;
    let (model, metrics) = evaluate_ticket(&pre, &ticket, data, cfg.objective)?;
    Ok(CtsOutcome {
        ticket,
        distribution,
        rewound,
        pre,
        model,
        trace,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};
    use crate::nn::train;

    fn data() -> Dataset {
        synthetic_blobs(&BlobSpec::new(4, 12, 400, 2)).unwrap()
    }

    fn cfg(kappa: f64, steps: usize) -> SearchConfig {
        SearchConfig {
            kappa,
            search_steps: steps,
            objective: ObjectiveKind::ReverseKl,
            train: TrainConfig {
                steps: 40,
                rewind_step: 10,
                batch_size: 32,
                lr: LrSchedule::step_drops(0.05, 40, &[0.5], 0.1),
                ..TrainConfig::default()
            },
            ..SearchConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_init() {
        let data = data();
        let model = ModelState::for_dataset(Arch::Mlp2x256, &data, 0).unwrap();
        let c = cfg(0.2, 0);
        let (dist, trace) = search_phase(&model, &c, &data).unwrap();
        assert_eq!(dist, init_distribution(model.layout(), 0.2, DEFAULT_TAU).unwrap());
        assert!(trace.records.is_empty());
    }

    #[test]
    fn search_is_deterministic_and_leaves_weights() {
        let data = data();
        let model = ModelState::for_dataset(Arch::Mlp2x256, &data, 0).unwrap();
        let before = model.clone();
        let c = cfg(0.1, 30);
        let (a, ta) = search_phase(&model, &c, &data).unwrap();
        let (b, tb) = search_phase(&model, &c, &data).unwrap();
        assert_eq!(model, before);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.records.len(), 30);
        assert!(ta.histograms.iter().all(|(_, h)| h.iter().sum::<u64>() == model.d() as u64));
    }

    #[test]
    fn every_objective_and_controller_runs() {
        let data = data();
        let model = ModelState::for_dataset(Arch::Mlp2x256, &data, 0).unwrap();
        for kind in ObjectiveKind::ALL {
            for mode in [ControllerMode::GradBalance, ControllerMode::Lagrange] {
                let c = SearchConfig {
                    objective: kind,
                    controller: mode,
                    ..cfg(0.1, 3)
                };
                let (dist, _) = search_phase(&model, &c, &data).unwrap();
                assert!(dist.logits.iter().all(|l| l.is_finite()), "{kind} {mode}");
            }
        }
    }

    #[test]
    fn full_density_reproduces_dense_training() {
        let data = data();
        let c = cfg(1.0, 5);
        let out = run_cts(&c, Arch::Mlp2x256, &data).unwrap();
        assert!(out.ticket.mask.iter().all(|&m| m));
        let dense = train(ModelState::for_dataset(Arch::Mlp2x256, &data, c.init_seed).unwrap(), &data, &c.train, None)
            .unwrap();
        assert_eq!(out.model.flat_params(), dense.flat_params());
    }

    #[test]
    fn ticket_has_rounded_density_and_zeroes() {
        let data = data();
        let c = cfg(0.07, 20);
        let out = run_cts(&c, Arch::Mlp2x256, &data).unwrap();
        let d = out.ticket.d();
        assert_eq!(out.ticket.retained(), (0.07 * d as f64).round() as usize);
        for (w, &m) in out.model.maskable_flat().iter().zip(&out.ticket.mask) {
            if !m {
                assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn quick_factor_scales_steps() {
        let c = SearchConfig {
            search_steps: 800,
            quick_factor: 0.125,
            ..SearchConfig::default()
        };
        assert_eq!(c.effective_search_steps(), 100);
    }
}
