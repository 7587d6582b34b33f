//! Run configuration: one TOML document with `[data]`, `[net]`, `[loss]`,
//! `[optim]`, `[train]` and `[eval]` sections. Every field has a default and
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Convention, SynthParams};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Reduction};
use crate::model::NetConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub seed: u64,
    /// Class convention: 1 (bright rectangle present) or 2 (dark disc).
    pub set: u8,
    pub n_train: usize,
    pub n_test: usize,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            seed: 1,
            set: 1,
            n_train: 200,
            n_test: 50,
            synth: SynthParams::default(),
        }
    }
}

impl DataConfig {
    pub fn convention(&self) -> Result<Convention> {
        Convention::from_set_number(self.set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr_gen: f64,
    pub lr_map: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr_gen: 1e-4,
            lr_map: 1e-4,
            lr_disc: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub total_iters: u64,
    pub seed: u64,
    pub reduction: Reduction,
    /// Discriminator gradient penalty is applied every `r1_every` steps, scaled by the interval.
    pub r1_every: u64,
    /// Fix the mapping-network latent to zero instead of resampling it.
    pub deterministic_style: bool,
    /// Draw one blend vector per sample instead of per batch.
    pub per_sample_alpha: bool,
    /// Also apply the specialisation terms to the style-transferred branch set.
    pub sqr_on_transfer: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Test-set PSNR every this many steps (0 disables).
    pub eval_every: u64,
    pub sample_every: u64,
    /// Test images used by the periodic PSNR (0 = all).
    pub eval_images: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_iters: 30_000,
            seed: 1,
            reduction: Reduction::Mean,
            r1_every: 16,
            deterministic_style: false,
            per_sample_alpha: false,
            sqr_on_transfer: false,
            checkpoint_every: 1000,
            log_every: 10,
            eval_every: 1000,
            sample_every: 1000,
            eval_images: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Seed of the latent draws used for evaluation styles.
    pub style_seed: u64,
    /// Number of test images that get a PNG panel.
    pub panels: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            style_seed: 0,
            panels: 8,
        }
    }
}

/// Everything a training run needs. Ground-truth masks are not reachable from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainOptions,
    pub data_root: PathBuf,
    pub convention: Convention,
    pub eval_style_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if t.r1_every == 0 || t.log_every == 0 || t.checkpoint_every == 0 || t.sample_every == 0 {
            return Err(Error::config(
                "r1_every, log_every, checkpoint_every and sample_every must be positive",
            ));
        }
        let o = &self.optim;
        for (name, lr) in [("lr_gen", o.lr_gen), ("lr_map", o.lr_map), ("lr_disc", o.lr_disc)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the JSON encoding, first 12 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))[..12].to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialisation: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            net: self.net.clone(),
            loss: self.loss,
            optim: self.optim.clone(),
            train: self.train.clone(),
            data_root: self.data.root.clone(),
            convention: self.data.convention()?,
            eval_style_seed: self.eval.style_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nbatch_sise = 4\n", Path::new("c.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_toml("[nope]\n", Path::new("c.toml")).is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c = RunConfig::from_toml("[net]\nnum_branches = 2\n[loss]\nsqr = 0.0\n", Path::new("x")).unwrap();
        assert_eq!(c.net.num_branches, 2);
        assert_eq!(c.net.base_width, 8);
        assert_eq!(c.loss.sqr, 0.0);
        assert_eq!(c.loss.rec, 1.0);
        assert!(c.train_config().is_ok());
    }

    #[test]
    fn invalid_train_settings_are_rejected() {
        let mut c = RunConfig::default();
        c.train.batch_size = 0;
        assert!(c.train_config().is_err());
        let mut c = RunConfig::default();
        c.optim.lr_gen = 0.0;
        assert!(c.train_config().is_err());
    }
}
