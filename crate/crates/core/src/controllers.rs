//! Sparsity-constraint enforcement during search and the Adam optimizer over
//! the mask logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mask::{MaskDistribution, SoftMask};
use crate::nn::{LrSchedule, ModelState, Overlay};
use crate::objectives::{objective_on_pass, ObjectiveKind, TeacherStats};
use crate::tensor::Graph;

pub const DEFAULT_ETA: f64 = 0.99;
pub const DEFAULT_LAMBDA_LR: f64 = 0.01;
/// GradBalance aims slightly above the requested density so the final clamp
/// never has to add weights.
pub const KAPPA_MARGIN: f64 = 1.1;
/// Constraint gradients smaller than this are treated as degenerate.
pub const MIN_SPARSITY_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerMode {
    Lagrange,
    #[default]
    #[serde(alias = "grad-balance", alias = "grad_balance")]
    GradBalance,
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerMode::Lagrange => "lagrange",
            ControllerMode::GradBalance => "gradbalance",
        })
    }
}

impl FromStr for ControllerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lagrange" => Ok(ControllerMode::Lagrange),
            "gradbalance" | "grad-balance" | "grad_balance" => Ok(ControllerMode::GradBalance),
            _ => Err(Error::Config(format!("unknown controller {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub mode: ControllerMode,
    /// Lagrange multiplier or gradient balancer.
    pub lambda: f64,
    /// EMA factor for the balancer.
    pub eta: f64,
    /// Density the constraint is evaluated against.
    pub kappa_eff: f64,
    /// Ascent rate for the multiplier.
    pub lambda_lr: f64,
}

impl ControllerState {
    pub fn new(mode: ControllerMode, kappa: f64, eta: f64, lambda_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1), got {eta}")));
        }
        let kappa_eff = match mode {
            ControllerMode::GradBalance => effective_density(kappa),
            ControllerMode::Lagrange => kappa,
        };
        Ok(ControllerState {
            mode,
            lambda: 0.0,
            eta,
            kappa_eff,
            lambda_lr,
        })
    }

    pub fn gradbalance(kappa: f64) -> Self {
        Self::new(ControllerMode::GradBalance, kappa, DEFAULT_ETA, DEFAULT_LAMBDA_LR).expect("default eta")
    }

    pub fn lagrange(kappa: f64) -> Self {
        Self::new(ControllerMode::Lagrange, kappa, DEFAULT_ETA, DEFAULT_LAMBDA_LR).expect("default eta")
    }
}

/// `min(1.1 κ, 1)`.
pub fn effective_density(kappa: f64) -> f64 {
    (KAPPA_MARGIN * kappa).min(1.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of one balancer update.
#[derive(Clone, Debug, PartialEq)]
pub struct Balanced {
    pub grad: Vec<f64>,
    pub lambda_target: f64,
    /// Smoothed balancer used in `grad`.
    pub lambda: f64,
    /// Set when the constraint was active but its gradient vanished.
    pub degenerate: bool,
}

/// Sets the balancer toward `‖g_obj‖ / ‖g_sp‖` while the constraint is
/// violated and toward zero once it is met, then mixes the two gradients.
pub fn gradbalance_combine(state: &mut ControllerState, g_obj: &[f64], g_sp: &[f64], sparsity_loss: f64) -> Balanced {
    let sp_norm = norm(g_sp);
    let mut degenerate = false;
    let lambda_target = if sparsity_loss > 0.0 {
        if sp_norm < MIN_SPARSITY_GRAD_NORM {
            degenerate = true;
            0.0
        } else {
            norm(g_obj) / sp_norm
        }
    } else {
        0.0
    };
    state.lambda = state.eta * state.lambda + (1.0 - state.eta) * lambda_target;
    let lambda = state.lambda;
    let grad = g_obj.iter().zip(g_sp).map(|(o, s)| o + lambda * s).collect();
    Balanced {
        grad,
        lambda_target,
        lambda,
        degenerate,
    }
}

/// Gradient of `R + λ L_sp` in the logits, and `g_λ = −L_sp`.
pub fn lagrange_combine(state: &ControllerState, g_obj: &[f64], g_sp: &[f64], sparsity_loss: f64) -> (Vec<f64>, f64) {
    let grad = g_obj.iter().zip(g_sp).map(|(o, s)| o + state.lambda * s).collect();
    (grad, -sparsity_loss)
}

/// Gradient ascent on the multiplier via its negated gradient.
pub fn lagrange_update_lambda(state: &mut ControllerState, g_lambda: f64) {
    state.lambda -= state.lambda_lr * g_lambda;
}

/// Objective value and its gradient in the logits for one relaxed sample.
pub fn objective_grad(
    model: &ModelState,
    dist: &MaskDistribution,
    batch: &Batch,
    kind: ObjectiveKind,
    teacher: Option<&TeacherStats>,
    sample: &SoftMask,
) -> Result<(f64, Vec<f64>)> {
    let graph = Graph::new();
    let (leaves, masks) = dist.soft_mask_vars(&graph, &sample.noise)?;
    let pass = model.forward_graph(&graph, batch, Overlay::Vars(&masks), false)?;
    let r = objective_on_pass(kind, &pass, teacher)?;
    let value = r.item();
    let grads = if r.is_tracked() {
        graph.grad(r, &leaves, false)?
    } else {
        leaves.iter().map(|l| graph.constant(crate::tensor::Tensor::zeros(&l.shape()))).collect()
    };
    let mut flat = Vec::with_capacity(dist.d());
    for g in grads {
        flat.extend_from_slice(g.value().data());
    }
    Ok((value, flat))
}

/// Everything one controller step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub grad: Vec<f64>,
    pub objective: f64,
    pub sparsity_loss: f64,
    pub lambda: f64,
    /// `g_λ` in Lagrange mode; the balancer target in GradBalance mode.
    pub lambda_signal: f64,
    pub degenerate: bool,
}

/// One Lagrange step. The multiplier is updated with its own rate after the
/// logit gradient has been formed with the current value.
pub fn lagrange_step(
    model: &ModelState,
    dist: &MaskDistribution,
    state: &mut ControllerState,
    batch: &Batch,
    kind: ObjectiveKind,
    teacher: Option<&TeacherStats>,
    sample: &SoftMask,
) -> Result<StepOutcome> {
    if state.mode != ControllerMode::Lagrange {
        return Err(Error::Config("lagrange step on a gradbalance controller".into()));
    }
    let (objective, g_obj) = objective_grad(model, dist, batch, kind, teacher, sample)?;
    let sparsity_loss = dist.sparsity_loss(state.kappa_eff);
    let g_sp = dist.sparsity_grad(state.kappa_eff);
    let (grad, g_lambda) = lagrange_combine(state, &g_obj, &g_sp, sparsity_loss);
    lagrange_update_lambda(state, g_lambda);
    Ok(StepOutcome {
        grad,
        objective,
        sparsity_loss,
        lambda: state.lambda,
        lambda_signal: g_lambda,
        degenerate: false,
    })
}

pub fn gradbalance_step(
    model: &ModelState,
    dist: &MaskDistribution,
    state: &mut ControllerState,
    batch: &Batch,
    kind: ObjectiveKind,
    teacher: Option<&TeacherStats>,
    sample: &SoftMask,
) -> Result<StepOutcome> {
    if state.mode != ControllerMode::GradBalance {
        return Err(Error::Config("gradbalance step on a lagrange controller".into()));
    }
    let (objective, g_obj) = objective_grad(model, dist, batch, kind, teacher, sample)?;
    let sparsity_loss = dist.sparsity_loss(state.kappa_eff);
    let g_sp = dist.sparsity_grad(state.kappa_eff);
    let b = gradbalance_combine(state, &g_obj, &g_sp, sparsity_loss);
    Ok(StepOutcome {
        grad: b.grad,
        objective,
        sparsity_loss,
        lambda: b.lambda,
        lambda_signal: b.lambda_target,
        degenerate: b.degenerate,
    })
}

/// Adam without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(d: usize, lr: LrSchedule) -> Self {
        AdamState {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Rate 0.1 with a tenfold drop at 90% of `steps`.
    pub fn search_default(d: usize, steps: usize) -> Self {
        Self::new(d, LrSchedule::step_drops(0.1, steps, &[0.9], 0.1))
    }
}

pub fn adam_update(dist: &mut MaskDistribution, grad: &[f64], adam: &mut AdamState) -> Result<()> {
    if grad.len() != dist.d() || adam.m.len() != dist.d() {
        return Err(Error::OverlayLength {
            expected: dist.d(),
            got: grad.len(),
        });
    }
    let lr = adam.lr.at(adam.t);
    adam.t += 1;
    let c1 = 1.0 - adam.beta1.powi(adam.t as i32);
    let c2 = 1.0 - adam.beta2.powi(adam.t as i32);
    for j in 0..grad.len() {
        adam.m[j] = adam.beta1 * adam.m[j] + (1.0 - adam.beta1) * grad[j];
        adam.v[j] = adam.beta2 * adam.v[j] + (1.0 - adam.beta2) * grad[j] * grad[j];
        let mhat = adam.m[j] / c1;
        let vhat = adam.v[j] / c2;
        dist.logits[j] -= lr * mhat / (vhat.sqrt() + adam.eps);
    }
    Ok(())
}
