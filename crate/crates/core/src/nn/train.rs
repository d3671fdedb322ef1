use serde::{Deserialize, Serialize};

use super::model::{Overlay, ParamKind};
use super::ModelState;
use crate::data::{stream_rng, Augment, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::mask::Ticket;
use crate::tensor::{Graph, Tensor};

/// Consecutive non-finite steps tolerated before training gives up.
pub const DIVERGENCE_STREAK: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters and momentum are rounded to single precision after every
    /// update; the arithmetic itself stays in f64.
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "double" => Ok(Precision::F64),
            "f32" | "single" => Ok(Precision::F32),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub at_step: usize,
    pub factor: f64,
}

/// Piecewise-constant learning rate indexed by global step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub drops: Vec<LrDrop>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            drops: Vec::new(),
        }
    }

    /// Drops by `factor` at each of the given fractions of `total` steps.
    pub fn step_drops(initial: f64, total: usize, fractions: &[f64], factor: f64) -> Self {
        LrSchedule {
            initial,
            drops: fractions
                .iter()
                .map(|f| LrDrop {
                    at_step: (f * total as f64).round() as usize,
                    factor,
                })
                .collect(),
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.drops
            .iter()
            .filter(|d| step >= d.at_step)
            .fold(self.initial, |lr, d| lr * d.factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total steps `T`.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rewind step `k`.
    pub rewind_step: usize,
    pub seed: u64,
    pub precision: Precision,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            lr: LrSchedule::step_drops(0.05, 1000, &[0.5, 0.75], 0.1),
            momentum: 0.9,
            weight_decay: 5e-4,
            rewind_step: 0,
            seed: 0,
            precision: Precision::F64,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.rewind_step >= self.steps {
            return Err(Error::Config(format!(
                "rewind step {} must be below total steps {}",
                self.rewind_step, self.steps
            )));
        }
        let rates_ok = self.lr.initial > 0.0 && self.lr.drops.iter().all(|d| d.factor > 0.0);
        if !rates_ok || self.batch_size == 0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// SGD with momentum over a model, resumable at any global step.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelState,
    /// One buffer per parameter tensor.
    pub momentum: Vec<Tensor>,
    pub step: usize,
    cfg: TrainConfig,
    sampler: BatchSampler,
    /// Per-parameter keep flags; `None` for unmasked tensors.
    keep: Vec<Option<Vec<bool>>>,
}

impl Trainer {
    /// Starts at step 0 with zero momentum. With a mask, pruned weights are
    /// zeroed before the first step.
    pub fn new(mut model: ModelState, data: &Dataset, cfg: TrainConfig, mask: Option<&Ticket>) -> Result<Self> {
        cfg.validate()?;
        let mut keep = vec![None; model.params.len()];
        if let Some(ticket) = mask {
            model.apply_mask(ticket)?;
            let mut offset = 0;
            for i in model.maskable_params() {
                let n = model.params[i].numel();
                keep[i] = Some(ticket.mask[offset..offset + n].to_vec());
                offset += n;
            }
        }
        let momentum = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let sampler = BatchSampler::new(data.train.len(), cfg.batch_size, cfg.seed);
        Ok(Trainer {
            model,
            momentum,
            step: 0,
            cfg,
            sampler,
            keep,
        })
    }

    /// Continues from a saved step and momentum.
    pub fn resume(mut self, step: usize, momentum: Vec<Tensor>) -> Result<Self> {
        if momentum.len() != self.momentum.len()
            || momentum.iter().zip(&self.momentum).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("optimizer buffers do not match the model".into()));
        }
        self.step = step;
        self.momentum = momentum;
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs until the global step reaches `end`.
    pub fn run_until(&mut self, end: usize, data: &Dataset) -> Result<()> {
        let mut streak = 0;
        while self.step < end {
            let step = self.step;
            let mut batch = data.batch(&data.train, &self.sampler.indices(step));
            if !self.cfg.augment.is_identity() {
                let mut rng = stream_rng(self.cfg.seed ^ 0xA5A5_0000, step as u64);
                self.cfg.augment.apply(&mut batch, &mut rng);
            }
            match self.gradients(&batch) {
                Ok(grads) => {
                    streak = 0;
                    self.apply(&grads, self.cfg.lr.at(step));
                }
                Err(Error::NonFinite { .. }) => {
                    streak += 1;
                    if streak >= DIVERGENCE_STREAK {
                        return Err(Error::Divergence { step, streak });
                    }
                }
                Err(e) => return Err(e),
            }
            self.step += 1;
        }
        Ok(())
    }

    fn gradients(&self, batch: &crate::data::Batch) -> Result<Vec<Tensor>> {
        let graph = Graph::new();
        let pass = self.model.forward_graph(&graph, batch, Overlay::None, true)?;
        if !pass.loss.item().is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = graph.grad(pass.loss, &pass.params, false)?;
        let grads: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        Ok(grads)
    }

    fn apply(&mut self, grads: &[Tensor], lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let single = self.cfg.precision == Precision::F32;
        for (i, g) in grads.iter().enumerate() {
            let decay = match self.model.info[i].kind {
                ParamKind::Weight | ParamKind::Bias => wd,
                ParamKind::BnScale | ParamKind::BnShift => 0.0,
            };
            let keep = self.keep[i].as_deref();
            let theta = self.model.params[i].data_mut();
            let v = self.momentum[i].data_mut();
            for j in 0..theta.len() {
                if keep.is_some_and(|k| !k[j]) {
                    theta[j] = 0.0;
                    v[j] = 0.0;
                    continue;
                }
                v[j] = mu * v[j] + g.data()[j] + decay * theta[j];
                theta[j] -= lr * v[j];
                if single {
                    v[j] = v[j] as f32 as f64;
                    theta[j] = theta[j] as f32 as f64;
                }
            }
        }
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }
}

/// Trains `model` for `cfg.steps` steps from step 0.
pub fn train(model: ModelState, data: &Dataset, cfg: &TrainConfig, mask: Option<&Ticket>) -> Result<ModelState> {
    let mut trainer = Trainer::new(model, data, cfg.clone(), mask)?;
    trainer.run_until(cfg.steps, data)?;
    Ok(trainer.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};
    use crate::nn::Arch;
    use rand::Rng;

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            lr: LrSchedule::constant(0.05),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_drops_compound() {
        let s = LrSchedule::step_drops(1.0, 100, &[0.5, 0.75], 0.1);
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(49), 1.0);
        assert!((s.at(50) - 0.1).abs() < 1e-15);
        assert!((s.at(99) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_leaves_params() {
        let data = synthetic_blobs(&BlobSpec::new(4, 10, 200, 1)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 2).unwrap();
        let ones = Ticket::all_ones(m.layout(), "dense");
        let cfg = TrainConfig {
            steps: 0,
            ..quick_cfg(0)
        };
        let out = train(m.clone(), &data, &cfg, Some(&ones)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn masked_entries_stay_zero() {
        let data = synthetic_blobs(&BlobSpec::new(4, 10, 400, 1)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 2).unwrap();
        let mut rng = stream_rng(1, 1);
        let mask: Vec<bool> = (0..m.d()).map(|_| rng.gen_bool(0.2)).collect();
        let ticket = Ticket::new(mask, m.layout(), 0.2, "random").unwrap();
        let mut trainer = Trainer::new(m, &data, quick_cfg(30), Some(&ticket)).unwrap();
        trainer.run_until(30, &data).unwrap();
        let flat = trainer.model.maskable_flat();
        let mut moment = Vec::new();
        for i in trainer.model.maskable_params() {
            moment.extend_from_slice(trainer.momentum[i].data());
        }
        for (j, &keep) in ticket.mask.iter().enumerate() {
            if !keep {
                assert_eq!(flat[j], 0.0);
                assert_eq!(moment[j], 0.0);
            }
        }
        assert!(flat.iter().zip(&ticket.mask).any(|(w, &k)| k && *w != 0.0));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = synthetic_blobs(&BlobSpec::new(4, 10, 400, 3)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 4).unwrap();
        let before = m.evaluate(&data, &data.train, None).unwrap();
        let a = train(m.clone(), &data, &quick_cfg(60), None).unwrap();
        let b = train(m, &data, &quick_cfg(60), None).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let after = a.evaluate(&data, &data.train, None).unwrap();
        assert!(after.loss < before.loss);
    }

    #[test]
    fn split_run_matches_single_run() {
        let data = synthetic_blobs(&BlobSpec::new(3, 6, 300, 5)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 1).unwrap();
        let cfg = TrainConfig {
            lr: LrSchedule::step_drops(0.05, 40, &[0.5], 0.1),
            ..quick_cfg(40)
        };
        let whole = train(m.clone(), &data, &cfg, None).unwrap();
        let mut t = Trainer::new(m, &data, cfg, None).unwrap();
        t.run_until(15, &data).unwrap();
        t.run_until(40, &data).unwrap();
        assert_eq!(t.model.flat_params(), whole.flat_params());
    }

    #[test]
    fn single_precision_rounds_params() {
        let data = synthetic_blobs(&BlobSpec::new(3, 6, 200, 5)).unwrap();
        let m = ModelState::for_dataset(Arch::TinyMlp, &data, 1).unwrap();
        let cfg = TrainConfig {
            precision: Precision::F32,
            ..quick_cfg(5)
        };
        let out = train(m, &data, &cfg, None).unwrap();
        assert!(out.flat_params().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn diverging_run_errors() {
        let data = synthetic_blobs(&BlobSpec::new(3, 6, 200, 5)).unwrap();
        let m = ModelState::for_dataset(Arch::Mlp2x256, &data, 1).unwrap();
        let cfg = TrainConfig {
            lr: LrSchedule::constant(1e6),
            weight_decay: 0.0,
            ..quick_cfg(400)
        };
        match train(m, &data, &cfg, None) {
            Err(Error::Divergence { streak, .. }) => assert_eq!(streak, DIVERGENCE_STREAK),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rewind_must_precede_end() {
        let cfg = TrainConfig {
            steps: 10,
            rewind_step: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
