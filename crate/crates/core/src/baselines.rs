//! Comparator pruners, the iterative magnitude pruning loop with rewinding,
//! the noisy-overlay saliency for teacher-comparing objectives, and the
//! sanity-check ablations.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Batch, Dataset};
use crate::error::{Error, Result};
use crate::mask::{invert_clamp, retained_count, MaskDistribution, MaskLayout, Ticket};
use crate::nn::{Arch, Layer, ModelState, Overlay, TrainConfig};
use crate::objectives::{objective_on_pass, teacher_stats, ObjectiveKind};
use crate::search::{pretrain, rewind};
use crate::tensor::{Graph, Tensor};

/// Standard deviation of the multiplicative overlay noise.
pub const DEFAULT_OVERLAY_SIGMA: f64 = 6e-2;
pub const DEFAULT_LTR_RATE: f64 = 0.2;
pub const DEFAULT_SYNFLOW_ITERATIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    Largest,
    LargestMagnitude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyScores {
    pub scores: Vec<f64>,
    pub method: String,
    pub rule: SelectionRule,
}

/// Methods that produce a ticket without search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Snip,
    Grasp,
    Synflow,
    Magnitude,
    Random,
    Ltr,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 6] = [
        BaselineMethod::Snip,
        BaselineMethod::Grasp,
        BaselineMethod::Synflow,
        BaselineMethod::Magnitude,
        BaselineMethod::Random,
        BaselineMethod::Ltr,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            BaselineMethod::Snip => "snip",
            BaselineMethod::Grasp => "grasp",
            BaselineMethod::Synflow => "synflow",
            BaselineMethod::Magnitude => "magnitude",
            BaselineMethod::Random => "random",
            BaselineMethod::Ltr => "ltr",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .iter()
            .find(|m| m.tag() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

/// A seeded random subset of training samples, `size` long.
pub fn scoring_batch(data: &Dataset, size: usize, seed: u64) -> Batch {
    let n = data.train.len();
    let mut idx: Vec<usize> = index::sample(&mut stream_rng(seed, 0x5C0E), n, size.min(n)).into_vec();
    idx.sort_unstable();
    data.batch(&data.train, &idx)
}

/// Task loss and its gradient over the maskable weights.
pub fn loss_grad(model: &ModelState, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let graph = Graph::new();
    let pass = model.forward_graph(&graph, batch, Overlay::None, true)?;
    let grads = graph.grad(pass.loss, &pass.effective, false)?;
    Ok((pass.loss.item(), grads.iter().flat_map(|g| g.value().data().to_vec()).collect()))
}

/// `|∂L/∂θ ⊙ θ|`.
pub fn snip_scores(model: &ModelState, batch: &Batch) -> Result<SaliencyScores> {
    let (_, g) = loss_grad(model, batch)?;
    let scores = g.iter().zip(model.maskable_flat()).map(|(g, w)| (g * w).abs()).collect();
    Ok(SaliencyScores {
        scores,
        method: "snip".into(),
        rule: SelectionRule::Largest,
    })
}

/// Central finite difference of a gradient field along `v`:
/// `(∇(θ + h v) − ∇(θ − h v)) / 2h` with `h = 1e-4 ‖θ‖ / ‖v‖`.
pub fn fd_hessian_vector(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    theta: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn < 1e-12 {
        return Err(Error::ZeroGradient);
    }
    let tn = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A zero parameter vector still needs a nonzero step.
    let h = if tn > 0.0 { 1e-4 * tn / vn } else { 1e-4 / vn };
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, v)| t + sign * h * v).collect() };
    let plus = grad(&shifted(1.0))?;
    let minus = grad(&shifted(-1.0))?;
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect())
}

/// `−(H g) ⊙ θ` with the Hessian-vector product by finite differences.
pub fn grasp_scores(model: &ModelState, batch: &Batch) -> Result<SaliencyScores> {
    let theta = model.maskable_flat();
    let (_, g) = loss_grad(model, batch)?;
    let mut probe = model.clone();
    let hg = fd_hessian_vector(
        |t| {
            probe.set_maskable_flat(t)?;
            Ok(loss_grad(&probe, batch)?.1)
        },
        &theta,
        &g,
    )?;
    Ok(SaliencyScores {
        scores: hg.iter().zip(&theta).map(|(h, w)| -h * w).collect(),
        method: "grasp".into(),
        rule: SelectionRule::Largest,
    })
}

fn strip_batch_norm(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .filter(|l| !matches!(l, Layer::BatchNorm { .. }))
        .map(|l| match l {
            Layer::Residual(body) => Layer::Residual(strip_batch_norm(body)),
            other => other.clone(),
        })
        .collect()
}

/// Synaptic-flow scores of the masked network: all parameters replaced by
/// their absolute values, batch norm bypassed, an all-ones input, and
/// `R = Σ outputs`. Scores are `∂R/∂|θ| ⊙ |θ|` over maskable weights.
pub fn synflow_scores(model: &ModelState, mask: &[bool]) -> Result<Vec<f64>> {
    let mut surrogate = model.clone();
    surrogate.layers = strip_batch_norm(&model.layers);
    for p in &mut surrogate.params {
        *p = p.map(f64::abs);
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&model.input_shape);
    let batch = Batch {
        x: Tensor::ones(&shape),
        y: vec![0],
    };
    let overlay: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
    let graph = Graph::new();
    let pass = surrogate.forward_graph(&graph, &batch, Overlay::Values(&overlay), true)?;
    let r = pass.logits.sum()?;
    let wrt: Vec<_> = surrogate.maskable_params().iter().map(|&i| pass.params[i]).collect();
    let grads = graph.grad(r, &wrt, false)?;
    let g: Vec<f64> = grads.iter().flat_map(|g| g.value().data().to_vec()).collect();
    Ok(g.iter().zip(surrogate.maskable_flat()).map(|(g, w)| g * w).collect())
}

/// Iterative synaptic-flow pruning; round `r` keeps density `κ^{r/iters}`.
pub fn synflow_prune(model: &ModelState, kappa: f64, iterations: usize) -> Result<Ticket> {
    let d = model.d();
    let layout = model.layout();
    retained_count(kappa, d)?;
    let mut mask = vec![true; d];
    let iterations = iterations.max(1);
    for r in 1..=iterations {
        let density = kappa.powf(r as f64 / iterations as f64);
        let n = retained_count(density, d)?;
        let scores = synflow_scores(model, &mask)?;
        // Already pruned entries rank below every surviving one.
        let ranked: Vec<f64> = scores
            .iter()
            .zip(&mask)
            .map(|(&s, &m)| if m { s } else { f64::NEG_INFINITY })
            .collect();
        mask = crate::mask::select(&ranked, n, true);
    }
    let ticket = Ticket::new(mask, layout, kappa, "synflow")?;
    if let Some((name, _)) = ticket.layer_densities().into_iter().find(|(_, dens)| *dens == 0.0) {
        return Err(Error::LayerCollapse(name));
    }
    Ok(ticket)
}

/// `|∂R/∂s|` at a noisy all-ones overlay `s = 1 + N(0, σ²)`. The noise is
/// fixed for the call.
pub fn noisy_overlay_scores(
    model: &ModelState,
    batch: &Batch,
    kind: ObjectiveKind,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyScores> {
    let mut rng = stream_rng(seed, 0x0E71);
    let layout = model.layout();
    let graph = Graph::new();
    let leaves: Vec<_> = layout
        .segments
        .iter()
        .map(|s| {
            let v = (0..s.len).map(|_| 1.0 + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            graph.param(Tensor::vector(v))
        })
        .collect();
    let teacher = if kind.needs_teacher() {
        Some(teacher_stats(model, batch, kind == ObjectiveKind::GradMatch)?)
    } else {
        None
    };
    let pass = model.forward_graph(&graph, batch, Overlay::Vars(&leaves), false)?;
    let r = objective_on_pass(kind, &pass, teacher.as_ref())?;
    let scores = if r.is_tracked() {
        graph
            .grad(r, &leaves, false)?
            .iter()
            .flat_map(|g| g.value().data().iter().map(|v| v.abs()).collect::<Vec<_>>())
            .collect()
    } else {
        vec![0.0; layout.d()]
    };
    Ok(SaliencyScores {
        scores,
        method: format!("overlay-{}", kind.tag()),
        rule: SelectionRule::LargestMagnitude,
    })
}

pub fn prune_by_scores(scores: &SaliencyScores, kappa: f64, layout: MaskLayout) -> Result<Ticket> {
    let ranked: Vec<f64> = match scores.rule {
        SelectionRule::Largest => scores.scores.clone(),
        SelectionRule::LargestMagnitude => scores.scores.iter().map(|s| s.abs()).collect(),
    };
    Ticket::from_scores(&ranked, layout, kappa, true, scores.method.clone())
}

/// Global top-|θ| selection.
pub fn magnitude_prune(model: &ModelState, kappa: f64) -> Result<Ticket> {
    let mags: Vec<f64> = model.maskable_flat().iter().map(|w| w.abs()).collect();
    Ticket::from_scores(&mags, model.layout(), kappa, true, "magnitude")
}

/// A uniformly random subset of `round(κd)` weights.
pub fn random_prune(layout: MaskLayout, kappa: f64, seed: u64) -> Result<Ticket> {
    let d = layout.d();
    let n = retained_count(kappa, d)?;
    let mut mask = vec![false; d];
    for i in index::sample(&mut stream_rng(seed, 0x4A4D), d, n) {
        mask[i] = true;
    }
    Ticket::new(mask, layout, kappa, "random")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LtrConfig {
    /// Fraction of surviving weights removed per round.
    pub rate: f64,
    pub rounds: usize,
    pub init_seed: u64,
    /// `train.rewind_step` is the rewind point `k`.
    pub train: TrainConfig,
}

impl Default for LtrConfig {
    fn default() -> Self {
        LtrConfig {
            rate: DEFAULT_LTR_RATE,
            rounds: 3,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LtrRound {
    pub ticket: Ticket,
    /// Masked weights at `k` that this round's training started from.
    pub rewound: ModelState,
    /// Weights after training this round's ticket to `T`.
    pub model: ModelState,
}

/// Number of rounds needed to reach density `kappa` at the given rate.
pub fn ltr_rounds_for(kappa: f64, rate: f64) -> usize {
    if kappa >= 1.0 {
        return 0;
    }
    (kappa.ln() / (1.0 - rate).ln()).round().max(1.0) as usize
}

/// Iterative magnitude pruning with rewinding. Round `r` holds the ticket
/// of density `(1 − p)^r` (rounded to whole weights) and the model trained
/// with it; round 0 is the dense network. Each round keeps the largest final
/// magnitudes among the survivors and rewinds them to the weights at `k`.
pub fn run_ltr(cfg: &LtrConfig, arch: Arch, data: &Dataset) -> Result<Vec<LtrRound>> {
    if !(cfg.rate > 0.0 && cfg.rate < 1.0) {
        return Err(Error::Config(format!("prune rate must lie in (0, 1), got {}", cfg.rate)));
    }
    let pre = pretrain(arch, data, &cfg.train, cfg.init_seed)?;
    let d = pre.model.d();
    let mut ticket = Ticket::all_ones(pre.model.layout(), "ltr");
    let mut rounds = Vec::with_capacity(cfg.rounds + 1);
    for r in 0..=cfg.rounds {
        let mut trainer = rewind(&pre, &ticket, data)?;
        let rewound = trainer.model.clone();
        trainer.run_until(cfg.train.steps, data)?;
        let model = trainer.into_model();
        rounds.push(LtrRound {
            ticket: ticket.clone(),
            rewound,
            model: model.clone(),
        });
        if r == cfg.rounds {
            break;
        }
        let density = (1.0 - cfg.rate).powi(r as i32 + 1);
        let n = retained_count(density, d)?;
        let ranked: Vec<f64> = model
            .maskable_flat()
            .iter()
            .zip(&ticket.mask)
            .map(|(w, &m)| if m { w.abs() } else { f64::NEG_INFINITY })
            .collect();
        ticket = Ticket::new(crate::mask::select(&ranked, n, true), pre.model.layout(), density, "ltr")?;
    }
    Ok(rounds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityKind {
    ShuffleLayerwise,
    Reinit,
    Invert,
}

impl SanityKind {
    pub const ALL: [SanityKind; 3] = [SanityKind::ShuffleLayerwise, SanityKind::Reinit, SanityKind::Invert];

    pub fn tag(&self) -> &'static str {
        match self {
            SanityKind::ShuffleLayerwise => "shuffle",
            SanityKind::Reinit => "reinit",
            SanityKind::Invert => "invert",
        }
    }
}

impl FromStr for SanityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" | "shuffle_layerwise" => Ok(SanityKind::ShuffleLayerwise),
            "reinit" => Ok(SanityKind::Reinit),
            "invert" => Ok(SanityKind::Invert),
            _ => Err(Error::Config(format!("unknown sanity check {s:?}"))),
        }
    }
}

/// Permutes mask bits uniformly within each layer.
pub fn shuffle_layerwise(ticket: &Ticket, seed: u64) -> Result<Ticket> {
    let mut rng = stream_rng(seed, 0x5F1E);
    let mut mask = Vec::with_capacity(ticket.d());
    for part in ticket.layout.split(&ticket.mask) {
        let mut part = part.to_vec();
        part.shuffle(&mut rng);
        mask.extend(part);
    }
    Ticket::new(mask, ticket.layout.clone(), ticket.kappa, format!("{}-shuffled", ticket.method))
}

/// A fresh draw of the same architecture with a new seed.
pub fn reinit(model: &ModelState, seed: u64) -> Result<ModelState> {
    ModelState::build(model.arch, &model.input_shape, model.num_classes, seed)
}

#[derive(Clone, Debug)]
pub enum Ablated {
    Ticket(Ticket),
    Model(ModelState),
}

pub fn sanity_ablate(
    kind: SanityKind,
    ticket: &Ticket,
    model: &ModelState,
    dist: Option<&MaskDistribution>,
    seed: u64,
) -> Result<Ablated> {
    if ticket.layout != model.layout() {
        return Err(Error::Config("ticket layout does not match the model".into()));
    }
    match kind {
        SanityKind::ShuffleLayerwise => Ok(Ablated::Ticket(shuffle_layerwise(ticket, seed)?)),
        SanityKind::Reinit => Ok(Ablated::Model(reinit(model, seed)?)),
        SanityKind::Invert => {
            let dist = dist.ok_or(Error::MissingDistribution)?;
            Ok(Ablated::Ticket(invert_clamp(dist, ticket.kappa)?))
        }
    }
}
