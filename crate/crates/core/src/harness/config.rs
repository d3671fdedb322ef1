use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{LtrConfig, DEFAULT_LTR_RATE, DEFAULT_OVERLAY_SIGMA, DEFAULT_SYNFLOW_ITERATIONS};
use crate::data::{BlobSpec, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::{Arch, TrainConfig};
use crate::search::SearchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub arch: Arch,
    pub dataset: DatasetSpec,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            arch: Arch::Mlp2x256,
            dataset: DatasetSpec::SyntheticBlobs(BlobSpec::new(4, 20, 4000, 7)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    /// Saliency batch size as a multiple of the training batch size.
    pub scoring_batch_factor: usize,
    pub synflow_iterations: usize,
    pub overlay_sigma: f64,
    pub ltr_rate: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            scoring_batch_factor: 10,
            synflow_iterations: DEFAULT_SYNFLOW_ITERATIONS,
            overlay_sigma: DEFAULT_OVERLAY_SIGMA,
            ltr_rate: DEFAULT_LTR_RATE,
        }
    }
}

/// Everything a run or sweep needs. Loaded from TOML; every section and
/// key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// `cts`, `ltr`, `snip`, `grasp`, `synflow`, `magnitude` or `random`.
    pub methods: Vec<String>,
    /// Sparsities `1 − κ`.
    pub sparsities: Vec<f64>,
    pub repeats: usize,
    /// Base seed; repeat `r` uses `seed + r`.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// Emit ablation rows next to every CTS row.
    pub sanity: bool,
    pub train: TrainConfig,
    /// Search settings. Its `train` and seeds are taken from the grid.
    pub search: SearchConfig,
    pub baseline: BaselineParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskConfig::default(),
            methods: vec!["cts".into()],
            sparsities: Vec::new(),
            repeats: 1,
            seed: 0,
            out: None,
            workers: 1,
            sanity: false,
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            baseline: BaselineParams::default(),
        }
    }
}

pub const METHODS: [&str; 7] = ["cts", "ltr", "snip", "grasp", "synflow", "magnitude", "random"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Config(format!("sparsity {s} outside (0, 1)")));
        }
        if let Some(m) = self.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown method {m:?}")));
        }
        self.train.validate()
    }

    /// Search settings for one cell.
    pub fn search_for(&self, kappa: f64, seed: u64) -> SearchConfig {
        SearchConfig {
            kappa,
            init_seed: seed,
            search_seed: seed.wrapping_add(0x5EA2C4),
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            ..self.search.clone()
        }
    }

    pub fn ltr_for(&self, kappa: f64, seed: u64) -> LtrConfig {
        LtrConfig {
            rate: self.baseline.ltr_rate,
            rounds: crate::baselines::ltr_rounds_for(kappa, self.baseline.ltr_rate),
            init_seed: seed,
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            methods = ["cts", "snip"]
            sparsities = [0.9, 0.95]
            repeats = 3

            [task]
            arch = "lenet-conv4"
            [task.dataset]
            kind = "synthetic-blobs"
            classes = 4
            dim = 64
            n = 600
            seed = 3
            image_shape = [1, 8, 8]

            [train]
            steps = 300
            rewind_step = 20

            [search]
            objective = "loss"
            controller = "lagrange"
            search_steps = 50
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.task.arch, Arch::LenetConv4);
        assert_eq!(cfg.train.steps, 300);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.search.search_steps, 50);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("sparsities = [1.0]").is_err());
        assert!(ExperimentConfig::from_toml("methods = [\"edge-popup\"]").is_err());
        assert!(ExperimentConfig::from_toml("repeats = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = [").is_err());
    }
}
