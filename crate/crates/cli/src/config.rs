//! Training configuration files and their resolution against presets.

use std::path::PathBuf;

use chromabench::pipeline::{LossKind, Preset, Strategy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "CHROMABENCH_SEED";

/// A partial training configuration; absent keys fall back to the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub strategy: Option<Strategy>,
    pub loss: Option<LossKind>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub crop_size: Option<usize>,
    pub base_width: Option<usize>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    pub gray_tolerance: Option<f64>,
    pub bn_momentum: Option<f64>,
    pub bn_epsilon: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))
    }

    /// Keys set in `other` replace those in `self`.
    pub fn overlay(self, other: RunConfig) -> RunConfig {
        RunConfig {
            preset: other.preset.or(self.preset),
            strategy: other.strategy.or(self.strategy),
            loss: other.loss.or(self.loss),
            lr: other.lr.or(self.lr),
            batch_size: other.batch_size.or(self.batch_size),
            crop_size: other.crop_size.or(self.crop_size),
            base_width: other.base_width.or(self.base_width),
            steps: other.steps.or(self.steps),
            seed: other.seed.or(self.seed),
            dataset: other.dataset.or(self.dataset),
            out_dir: other.out_dir.or(self.out_dir),
            checkpoint_every: other.checkpoint_every.or(self.checkpoint_every),
            gray_tolerance: other.gray_tolerance.or(self.gray_tolerance),
            bn_momentum: other.bn_momentum.or(self.bn_momentum),
            bn_epsilon: other.bn_epsilon.or(self.bn_epsilon),
        }
    }

    /// The preset (desk when unset) with every present key applied.
    pub fn resolve(&self) -> (Preset, TrainConfig) {
        let preset = self.preset.unwrap_or(Preset::Desk);
        let base = TrainConfig::preset(preset);
        let cfg = TrainConfig {
            strategy: self.strategy.unwrap_or(base.strategy),
            loss: self.loss.unwrap_or(base.loss),
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            crop_size: self.crop_size.unwrap_or(base.crop_size),
            base_width: self.base_width.unwrap_or(base.base_width),
            steps: self.steps.unwrap_or(base.steps),
            seed: self.seed.unwrap_or(base.seed),
            dataset: self.dataset.clone().unwrap_or(base.dataset),
            out_dir: self.out_dir.clone().unwrap_or(base.out_dir),
            checkpoint_every: self.checkpoint_every.unwrap_or(base.checkpoint_every),
            gray_tolerance: self.gray_tolerance.unwrap_or(base.gray_tolerance),
            bn_momentum: self.bn_momentum.unwrap_or(base.bn_momentum),
            bn_epsilon: self.bn_epsilon.unwrap_or(base.bn_epsilon),
        };
        (preset, cfg)
    }
}

/// Seed from the environment, if set.
pub fn env_seed(value: Option<String>) -> Result<Option<u64>> {
    match value {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
    }
}

/// Resolved configuration as written by a run, with the preset recorded.
pub fn echo(preset: Preset, cfg: &TrainConfig) -> String {
    let name = toml::Value::try_from(preset).expect("preset serializes");
    format!("preset = {name}\n{}", cfg.to_toml())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let file = RunConfig::from_toml("preset = \"paper\"\nsteps = 10\nseed = 4\n").unwrap();
        let flags = RunConfig { seed: Some(9), lr: Some(0.5), ..Default::default() };
        let merged = file.overlay(flags);
        let (preset, cfg) = merged.resolve();
        assert_eq!(preset, Preset::Paper);
        assert_eq!((cfg.steps, cfg.seed, cfg.lr, cfg.base_width), (10, 9, 0.5, 64));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("stepz = 3\n").unwrap_err();
        assert_eq!(err.code(), 1);
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn echoed_config_reloads_to_the_same_run() {
        let (preset, cfg) =
            RunConfig { strategy: Some(Strategy::Yuv), ..Default::default() }.resolve();
        let text = echo(preset, &cfg);
        assert!(text.starts_with("preset = \"desk\"\n"));
        assert_eq!(RunConfig::from_toml(&text).unwrap().resolve(), (preset, cfg));
    }

    #[test]
    fn environment_seed_parses() {
        assert_eq!(env_seed(None).unwrap(), None);
        assert_eq!(env_seed(Some(" 17 ".into())).unwrap(), Some(17));
        assert_eq!(env_seed(Some("x".into())).unwrap_err().code(), 1);
    }
}
