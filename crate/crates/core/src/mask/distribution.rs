use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MaskLayout;
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Graph, Tensor, Var};

/// Concrete temperature used unless configured otherwise.
pub const DEFAULT_TAU: f64 = 2.0 / 3.0;

/// Densities are clamped below this before taking the logit.
const MAX_INIT_DENSITY: f64 = 1.0 - 1e-9;

/// Independent Bernoulli retention probabilities, stored as logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    pub logits: Vec<f64>,
    pub tau: f64,
    pub layout: MaskLayout,
}

/// One relaxed sample `s = σ((logits + ε) / τ)` with its logistic noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn check_density(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa <= 1.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidDensity(kappa))
    }
}

/// Uniform initialization `α = κ·1`, so the sparsity constraint starts at
/// zero and every weight is equally likely to be kept.
pub fn init_distribution(layout: MaskLayout, kappa: f64, tau: f64) -> Result<MaskDistribution> {
    check_density(kappa)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let l = logit(kappa.min(MAX_INIT_DENSITY));
    Ok(MaskDistribution {
        logits: vec![l; layout.d()],
        tau,
        layout,
    })
}

/// `d` i.i.d. standard logistic draws by inverse CDF, from the stream keyed by
/// `(seed, stream)`. Uniform draws of exactly 0 are rejected.
pub fn logistic_noise(d: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..d)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 && u < 1.0 {
                break u.ln() - (1.0 - u).ln();
            }
        })
        .collect()
}

impl MaskDistribution {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("distribution serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dist: MaskDistribution =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("distribution file: {e}")))?;
        if dist.logits.len() != dist.layout.d() {
            return Err(Error::Format(format!(
                "distribution has {} logits for a layout of {}",
                dist.logits.len(),
                dist.layout.d()
            )));
        }
        Ok(dist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn d(&self) -> usize {
        self.logits.len()
    }

    /// Retention probabilities `α = σ(logits)`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// Mean retention probability, `E‖m‖₀ / d`.
    pub fn expected_density(&self) -> f64 {
        self.logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / self.d() as f64
    }

    /// Normalized sparsity constraint `E‖m‖₀ / (κd) − 1`.
    pub fn sparsity_loss(&self, kappa: f64) -> f64 {
        self.expected_density() / kappa - 1.0
    }

    /// Closed-form gradient of [`sparsity_loss`](Self::sparsity_loss) with
    /// respect to the logits: `σ′(ℓ_j) / (κd)`.
    pub fn sparsity_grad(&self, kappa: f64) -> Vec<f64> {
        let scale = 1.0 / (kappa * self.d() as f64);
        self.logits
            .iter()
            .map(|&l| {
                let s = sigmoid(l);
                s * (1.0 - s) * scale
            })
            .collect()
    }

    pub fn sample_soft_mask(&self, seed: u64, stream: u64) -> SoftMask {
        let noise = logistic_noise(self.d(), seed, stream);
        let values = self
            .logits
            .iter()
            .zip(&noise)
            .map(|(l, e)| sigmoid((l + e) / self.tau))
            .collect();
        SoftMask {
            values,
            noise,
            seed,
            stream,
        }
    }

    /// Records the relaxed sample on `graph`: one tracked logit leaf per
    /// layout segment and the matching soft-mask nodes.
    pub fn soft_mask_vars<'g>(&self, graph: &'g Graph, noise: &[f64]) -> Result<(Vec<Var<'g>>, Vec<Var<'g>>)> {
        if noise.len() != self.d() {
            return Err(Error::OverlayLength {
                expected: self.d(),
                got: noise.len(),
            });
        }
        let mut leaves = Vec::new();
        let mut masks = Vec::new();
        for (a, b) in self.layout.ranges() {
            let leaf = graph.param(Tensor::vector(self.logits[a..b].to_vec()));
            let eps = graph.constant(Tensor::vector(noise[a..b].to_vec()));
            let s = leaf.add(eps)?.scale(1.0 / self.tau)?.sigmoid()?;
            leaves.push(leaf);
            masks.push(s);
        }
        Ok((leaves, masks))
    }
}
