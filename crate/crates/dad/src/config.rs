//! Run configuration: a TOML file with `model.*`, `data.*`, `optim.*` and
//! `loss.*` keys plus top-level `seed` and `output_dir`.
//!
//! Values resolve in three layers. The chosen profile supplies every default,
//! the file overrides the profile, and `--set key=value` pairs override the
//! file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dad_core::blocks::ContextVariant;
use dad_core::decoder::{DemMode, Fusion, ModelConfig};
use dad_core::losses::LossConfig;
use dad_core::optim::{AdamConfig, LrSchedule};
use dad_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{io_err, Error, Result};

/// Which set of defaults sits under the file values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Full-scale defaults: 416 px inputs, batch 36, 200 epochs, residual backbone.
    #[default]
    Paper,
    /// Laptop-scale defaults: 64 px inputs, batch 4, 5 epochs, synthetic backbone.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?}, expected paper or desk"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub loss: LossSection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: String,
    /// Optional weight file whose `backbone.*` entries replace the random init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
    pub partition: String,
    pub allow_single_stage_a: bool,
    pub fem_variant: String,
    pub fusion: String,
    pub dae_repeats: usize,
    pub use_dgm: bool,
    pub dem_mode: String,
    pub mff_fem_per_branch: bool,
    pub branch_channels: usize,
    pub head_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    pub test_dirs: Vec<PathBuf>,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub algorithm: String,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub lr_max_decays: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub weight_kernel: usize,
    pub weight_gain: f64,
    pub smooth: f64,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        let adam = AdamConfig::default();
        let mut cfg = RunConfig {
            model: ModelSection {
                backbone: model.backbone,
                backbone_weights: None,
                partition: model.partition,
                allow_single_stage_a: model.allow_single_stage_a,
                fem_variant: model.fem_variant.name().into(),
                fusion: model.fusion.name().into(),
                dae_repeats: model.dae_repeats,
                use_dgm: model.use_dgm,
                dem_mode: model.dem_mode.name().into(),
                mff_fem_per_branch: model.mff_fem_per_branch,
                branch_channels: model.branch_channels,
                head_channels: model.head_channels,
            },
            data: DataSection {
                train_dir: None,
                test_dirs: Vec::new(),
                image_size: 416,
            },
            optim: OptimSection {
                algorithm: "adam".into(),
                lr: 1e-4,
                lr_decay: 0.1,
                lr_decay_epochs: 50,
                lr_max_decays: 3,
                epochs: 200,
                batch_size: 36,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                weight_decay: adam.weight_decay,
                checkpoint_every: 50,
            },
            loss: LossSection {
                weight_kernel: loss.weight_kernel,
                weight_gain: loss.weight_gain,
                smooth: loss.smooth,
            },
            seed: 0,
            output_dir: PathBuf::from("runs/dad"),
        };
        if profile == Profile::Desk {
            cfg.model.backbone = "synthetic".into();
            cfg.data.image_size = 64;
            cfg.optim.batch_size = 4;
            cfg.optim.epochs = 5;
            cfg.optim.checkpoint_every = 1;
        }
        cfg
    }

    /// Parse TOML text layered over `profile` and then `overrides`.
    pub fn from_toml_str(text: &str, profile: Profile, overrides: &[String]) -> Result<Self> {
        let file: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut merged = Self::defaults(profile).to_table()?;
        merge(&mut merged, file);
        for o in overrides {
            merge(&mut merged, parse_override(o)?);
        }
        Self::from_table(merged)
    }

    /// Deserialize a fully merged table and validate it.
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml_str(&text, profile, overrides)?;
        // relative data paths are taken relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.train_dir = cfg.data.train_dir.map(|p| base.join(p));
        cfg.data.test_dirs = cfg.data.test_dirs.iter().map(|p| base.join(p)).collect();
        cfg.model.backbone_weights = cfg.model.backbone_weights.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.image_size == 0 || self.data.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "data.image_size must be a positive multiple of 32, got {}",
                self.data.image_size
            )));
        }
        if self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(Error::Config("optim.epochs and optim.batch_size must be at least 1".into()));
        }
        if !matches!(self.optim.algorithm.as_str(), "adam" | "adaptive-moment") {
            return Err(Error::Config(format!(
                "optim.algorithm {:?} is not supported, use \"adam\"",
                self.optim.algorithm
            )));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.optim.lr)));
        }
        self.model_config()?.validate()?;
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            backbone: m.backbone.clone(),
            partition: m.partition.clone(),
            allow_single_stage_a: m.allow_single_stage_a,
            fem_variant: ContextVariant::parse(&m.fem_variant)?,
            fusion: Fusion::parse(&m.fusion)?,
            dae_repeats: m.dae_repeats,
            use_dgm: m.use_dgm,
            dem_mode: DemMode::parse(&m.dem_mode)?,
            mff_fem_per_branch: m.mff_fem_per_branch,
            branch_channels: m.branch_channels,
            head_channels: m.head_channels,
            seed: self.seed,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weight_kernel: self.loss.weight_kernel,
            weight_gain: self.loss.weight_gain,
            smooth: self.loss.smooth,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.optim.lr,
            step_epochs: self.optim.lr_decay_epochs,
            gamma: self.optim.lr_decay,
            max_decays: self.optim.lr_max_decays,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.optim.batch_size,
            epochs: self.optim.epochs,
            lr: self.optim.lr,
            adam: AdamConfig {
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
                weight_decay: self.optim.weight_decay,
            },
            loss: self.loss_config(),
            seed: self.seed,
        }
    }
}

/// Recursively overlay `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `model.dae_repeats=3` becomes `{model = {dae_repeats = 3}}`. Values that
/// are not valid TOML are taken as bare strings.
pub fn parse_override(text: &str) -> Result<Table> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = value;
    for part in key.rsplit('.') {
        let mut t = Table::new();
        t.insert(part.to_string(), node);
        node = Value::Table(t);
    }
    match node {
        Value::Table(t) => Ok(t),
        _ => unreachable!("the key has at least one part"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_the_profile() {
        let cfg = RunConfig::from_toml_str("optim.epochs = 7\n[model]\ndae_repeats = 3\n", Profile::Desk, &[]).unwrap();
        assert_eq!(cfg.optim.epochs, 7);
        assert_eq!(cfg.model.dae_repeats, 3);
        assert_eq!(cfg.data.image_size, 64);
        assert_eq!(cfg.optim.batch_size, 4);
        assert_eq!(cfg.model.backbone, "synthetic");
    }

    #[test]
    fn paper_profile_keeps_full_scale_values() {
        let cfg = RunConfig::from_toml_str("", Profile::Paper, &[]).unwrap();
        assert_eq!(cfg.data.image_size, 416);
        assert_eq!((cfg.optim.epochs, cfg.optim.batch_size), (200, 36));
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.model.backbone, "residual");
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str(
            "seed = 1",
            Profile::Desk,
            &["seed=9".into(), "model.dem_mode=f_only".into(), "model.use_dgm = false".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.dem_mode, "f_only");
        assert!(!cfg.model.use_dgm);
        assert!(RunConfig::from_toml_str("model.colour = 1", Profile::Desk, &[]).is_err());
        assert!(RunConfig::from_toml_str("", Profile::Desk, &["nokey".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "data.image_size = 100",
            "optim.epochs = 0",
            "model.fusion = \"sideways\"",
            "model.partition = \"5\"",
            "optim.algorithm = \"sgd\"",
            "loss.weight_kernel = 4",
        ] {
            assert!(RunConfig::from_toml_str(bad, Profile::Desk, &[]).is_err(), "{bad}");
        }
        assert!(RunConfig::from_toml_str("model.partition = \"5\"\nmodel.allow_single_stage_a = true", Profile::Desk, &[]).is_ok());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::defaults(Profile::Desk);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, Profile::Paper, &[]).unwrap(), cfg);
    }
}
