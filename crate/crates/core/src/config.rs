//! Run configuration: one TOML file with a section per command.
//!
//! ```toml
//! seed = 0
//! [data]        # dataset geometry and style families
//! [synthesis]   # pseudo-modality networks
//! [train]       # episodic training
//! [eval]
//! [ablation]
//! [dump_mixup]
//! ```
//!
//! Component seeds (`synthesis.seeds`, `train.seed`, ...) are derived from the
//! root `seed` by [`Config::resolve`]; values given in the file are replaced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta_trainer::{EpisodeConfig, FitConfig};
use crate::mixup::DirichletParams;
use crate::phantom::SplitSpec;
use crate::pseudomod::SynthesisConfig;
use crate::rng::sub_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Also train and evaluate one oracle per target family.
    pub oracle: bool,
    pub oracle_fit: FitConfig,
    /// Write per-sample probability maps as PNG.
    pub dump_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            oracle: false,
            oracle_fit: FitConfig::default(),
            dump_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Number of training seeds per row.
    pub n_seeds: usize,
    /// Derived from the root seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_seeds: 3,
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DumpMixupConfig {
    pub alphas: Vec<DirichletParams>,
    /// Samples drawn per α.
    pub samples: usize,
    /// Bank entry the grid images are mixed from.
    pub subject_index: usize,
    /// Grid images written per α (the rest only contribute λ records).
    pub grid: usize,
    pub seed: u64,
}

impl Default for DumpMixupConfig {
    fn default() -> Self {
        Self {
            alphas: vec![
                DirichletParams::new([5.0, 5.0, 5.0]).expect("positive"),
                DirichletParams::new([1.5, 5.0, 1.5]).expect("positive"),
            ],
            samples: 1000,
            subject_index: 0,
            grid: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub data_seed: u64,
    pub data: SplitSpec,
    pub synthesis: SynthesisConfig,
    pub train: EpisodeConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub dump_mixup: DumpMixupConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            data: SplitSpec::default(),
            synthesis: SynthesisConfig::default(),
            train: EpisodeConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            dump_mixup: DumpMixupConfig::default(),
        }
        .resolve()
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolve())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every component seed from the root seed.
    pub fn resolve(mut self) -> Self {
        let root = self.seed;
        self.data_seed = sub_seed(root, "data");
        self.synthesis.seeds = [0, 1, 2].map(|k| sub_seed(root, &format!("synthesis/{k}")));
        self.train.seed = sub_seed(root, "train");
        self.eval.oracle_fit.seed = sub_seed(root, "oracle");
        self.ablation.seeds = (0..self.ablation.n_seeds)
            .map(|k| sub_seed(root, &format!("ablation/{k}")))
            .collect();
        self.dump_mixup.seed = sub_seed(root, "dump-mixup");
        self
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        if self.ablation.n_seeds == 0 {
            return Err(Error::Config("ablation.n_seeds must be at least 1".into()));
        }
        if self.dump_mixup.alphas.is_empty() {
            return Err(Error::Config("dump_mixup.alphas is empty".into()));
        }
        self.data.branch.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_lossless() {
        let cfg = Config::default().with_seed(17);
        let back = Config::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults_and_derives_seeds() {
        let cfg = Config::from_toml("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.train.seed, sub_seed(3, "train"));
        assert_eq!(cfg.ablation.seeds.len(), 3);
        assert_ne!(cfg.synthesis.seeds[0], cfg.synthesis.seeds[1]);
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(Config::from_toml("[train]\nalpha = [1.0, 0.0, 1.0]\n").is_err());
        assert!(Config::from_toml("[train\n").is_err());
        let cfg = Config::from_toml("[train]\nbatch_size = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
