//! Run configuration: one JSON document merging model, training, data and
//! output settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evseg::metrics::MiouMode;
use evseg::model::ModelConfig;
use evseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "EVSEG_SEED";

/// File name of the effective configuration written next to outputs.
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many optimizer steps (0: final only).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Hold out one fold: training uses the rest, evaluation the fold.
    pub kfold: Option<KFold>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KFold {
    pub k: usize,
    pub fold: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub miou_mode: MiouMode,
}

impl RunConfig {
    /// Parse a config file; relative data and output paths are made relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &cfg.data.manifest {
            cfg.data.manifest = Some(base.join(m));
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Load `path` if given, else defaults, then apply the seed variable.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.train.seed = raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(k) = self.data.kfold {
            if k.k < 2 || k.fold >= k.k {
                bail!("kfold needs k >= 2 and fold < k, got k={} fold={}", k.k, k.fold);
            }
        }
        Ok(())
    }

    /// Write the effective config into `dir` with absolute paths.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut out = self.clone();
        out.output_dir = absolute(&self.output_dir);
        out.data.manifest = self.data.manifest.as_deref().map(absolute);
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, serde_json::to_string_pretty(&out)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.learning_rate, 2e-3);
        assert_eq!(cfg.train.milestones, vec![8, 16, 24, 50]);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.epochs, 70);
        assert_eq!(cfg.model.timesteps, 20);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"model": {"bogus": 1}}"#,
            r#"{"train": {"bogus": 1}}"#,
            r#"{"data": {"bogus": 1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_documents_fill_defaults_and_round_trip() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_kfold_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.kfold = Some(KFold { k: 3, fold: 3, seed: 0 });
        assert!(cfg.validate().is_err());
    }
}
