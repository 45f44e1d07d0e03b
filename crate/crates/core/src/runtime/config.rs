//! Run configuration: TOML with dotted sections, layered over a preset.
//!
//! ```toml
//! seed = 7
//! epochs = 40
//!
//! [optim]
//! lr_max = 0.03
//!
//! [model]
//! s = 2
//! fusion_scales = [8, 16]
//! ```
//!
//! Keys left out keep the preset value; unknown keys are rejected. TOML has
//! no null, so optional settings are unset with `0` or `""`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantom::PhantomSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::tensor::optim::{LrSchedule, Sgd};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected desk or paper"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 3e-2,
            lr_min: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV; relative paths inside it resolve against its directory.
    #[serde(with = "unset::path")]
    pub manifest: Option<PathBuf>,
    /// Square in-plane size slices are resized to before the network.
    #[serde(with = "unset::size")]
    pub input_size: Option<usize>,
    /// Random horizontal and vertical flips of training samples.
    pub flips: bool,
    /// Dataset generated by `gen-phantoms` and used when no manifest is set.
    pub phantom: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub epochs: usize,
    pub batch: usize,
    pub warmup: usize,
    /// Iterations per epoch; by default one pass over the training slices.
    #[serde(with = "unset::size")]
    pub iters_per_epoch: Option<usize>,
    /// Momentum coefficient of the neighborhood encoder.
    pub m: f64,
    /// Slices per forward pass at inference.
    pub eval_batch: usize,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
}

impl RunConfig {
    /// Full-size training protocol.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            epochs: 300,
            batch: 24,
            warmup: 5,
            iters_per_epoch: None,
            m: 0.1,
            eval_batch: 8,
            model: ModelConfig::paper(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig {
                manifest: None,
                input_size: Some(224),
                flips: false,
                phantom: PhantomSpec::paper(),
            },
        }
    }

    /// Small model and phantom data that train on one CPU in minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            batch: 4,
            iters_per_epoch: Some(20),
            model: ModelConfig::desk(),
            data: DataConfig {
                manifest: None,
                input_size: None,
                flips: false,
                phantom: PhantomSpec::desk(),
            },
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// `text` layered over `base`, then validated.
    pub fn from_toml(base: &Self, text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overrides);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(base, &text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_max: self.optim.lr_max,
            lr_min: self.optim.lr_min,
            warmup_epochs: self.warmup,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!("momentum coefficient {} outside [0, 1)", self.m)));
        }
        if let Some(size) = self.data.input_size {
            if size == 0 || size % 16 != 0 {
                return Err(Error::Config(format!("input size {size} must be a positive multiple of 16")));
            }
        }
        self.schedule().validate()?;
        Sgd::<f64>::new(self.optim.lr_max, self.optim.momentum, self.optim.weight_decay)?;
        self.loss.validate()?;
        self.model.validate()?;
        self.data.phantom.validate()?;
        if self.data.manifest.is_none() && self.data.phantom.classes != self.model.classes {
            return Err(Error::Config(format!(
                "phantoms have {} classes, model has {}",
                self.data.phantom.classes, self.model.classes
            )));
        }
        Ok(())
    }
}

/// `None` written as `0` or `""` so a saved config also overrides optional
/// settings of the preset it is loaded over.
mod unset {
    pub mod size {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_u64(v.unwrap_or(0) as u64)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
            Ok(Some(usize::deserialize(d)?).filter(|&n| n != 0))
        }
    }

    pub mod path {
        use std::path::PathBuf;

        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<PathBuf>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(p) => s.serialize_str(&p.to_string_lossy()),
                None => s.serialize_str(""),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PathBuf>, D::Error> {
            let p = String::deserialize(d)?;
            Ok((!p.is_empty()).then(|| PathBuf::from(p)))
        }
    }
}

/// Recursive table merge; `over` wins on every leaf.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper();
        assert_eq!((c.optim.lr_max, c.optim.lr_min), (3e-2, 5e-3));
        assert_eq!((c.optim.momentum, c.optim.weight_decay), (0.9, 1e-4));
        assert_eq!((c.epochs, c.batch, c.warmup, c.m), (300, 24, 5, 0.1));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn overrides_keep_unlisted_keys() {
        let c = RunConfig::from_toml(&RunConfig::desk(), "seed = 9\n[model]\ns = 2\n").unwrap();
        assert_eq!((c.seed, c.model.s, c.epochs), (9, 2, 40));
        assert_eq!(c.model.fusion_scales, RunConfig::desk().model.fusion_scales);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml(&RunConfig::desk(), "sed = 1").is_err());
        assert!(RunConfig::from_toml(&RunConfig::desk(), "[optim]\nmomentum = 1.5").is_err());
        assert!(RunConfig::from_toml(&RunConfig::desk(), "m = 1.0").is_err());
        assert!(RunConfig::from_toml(&RunConfig::desk(), "warmup = 40").is_err());
    }

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig::paper();
        assert_eq!(RunConfig::from_toml(&RunConfig::desk(), &c.to_toml().unwrap()).unwrap(), c);
        let mut d = RunConfig::desk();
        d.data.manifest = Some("data/manifest.csv".into());
        assert_eq!(RunConfig::from_toml(&RunConfig::paper(), &d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn zero_and_empty_unset_options() {
        let c = RunConfig::from_toml(
            &RunConfig::paper(),
            "iters_per_epoch = 0\n[data]\ninput_size = 0\nmanifest = \"\"\n[data.phantom]\nclasses = 9",
        )
        .unwrap();
        assert_eq!((c.iters_per_epoch, c.data.input_size, c.data.manifest), (None, None, None));
    }
}
