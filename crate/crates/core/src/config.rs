//! Versioned TOML training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointnet::ExtendInit;
use crate::unet::BackboneConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Single-modality RGB backbone trained from scratch.
    Base,
    /// Joint branch, exchanges and first-conv adapters; RGB branch frozen.
    Stage1,
    /// Everything trainable, heavier conditioning dropout.
    Stage2,
    /// Mask-conditioned fine-tune for inpainting; RGB branch frozen.
    MaskFt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Samples taken from the end of the dataset and never trained on.
    pub held_out: usize,
    /// Images in each snapshot grid.
    pub samples: usize,
    pub sample_steps: usize,
    pub guidance: f32,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            held_out: 16,
            samples: 4,
            sample_steps: 20,
            guidance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub stage: Stage,
    pub learning_rate: f64,
    /// Global step count to reach.
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub cond_drop_prob: f64,
    pub noise_offset: f64,
    pub seed: u64,
    /// 0 disables snapshots.
    pub snapshot_every: u64,
    pub dataset: PathBuf,
    /// Checkpoint to start from; required for every stage but `base`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Continue the optimizer, RNG and step counter of `init`.
    #[serde(default)]
    pub resume: bool,
    pub out: PathBuf,
    /// 1 for depth, 3 for normals.
    pub joint_channels: usize,
    /// Train a Direct Extend baseline on the same batches (stage 1 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_extend: Option<ExtendInit>,
    #[serde(default)]
    pub validation: ValidationConfig,
    pub model: BackboneConfig,
}

impl TrainConfig {
    /// Small settings that train on one CPU core in minutes.
    pub fn desk(stage: Stage) -> Self {
        let (lr, steps, warmup, drop) = match stage {
            Stage::Base => (1e-3, 3000, 100, 0.15),
            Stage::Stage1 => (5e-4, 3000, 100, 0.15),
            Stage::Stage2 => (5e-5, 1000, 0, 0.5),
            Stage::MaskFt => (5e-4, 1000, 50, 0.15),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            stage,
            learning_rate: lr,
            steps,
            warmup_steps: warmup,
            batch_size: 16,
            cond_drop_prob: drop,
            noise_offset: 0.05,
            seed: 0,
            snapshot_every: 250,
            dataset: PathBuf::from("data/train.jdset"),
            init: None,
            resume: false,
            out: PathBuf::from("runs/train"),
            joint_channels: 1,
            direct_extend: None,
            validation: ValidationConfig::default(),
            model: BackboneConfig::default(),
        }
    }

    /// The published full-scale recipe.
    pub fn paper(stage: Stage) -> Self {
        let mut c = Self::desk(stage);
        match stage {
            Stage::Stage2 => {
                c.learning_rate = 1e-5;
                c.cond_drop_prob = 0.5;
                c.steps = 10_000;
                c.warmup_steps = 1000;
            }
            _ => {
                c.learning_rate = 1e-4;
                c.steps = 10_000;
                c.warmup_steps = 1000;
                c.cond_drop_prob = 0.15;
            }
        }
        c.noise_offset = 0.05;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad(format!(
                "cond_drop_prob {} outside [0, 1]",
                self.cond_drop_prob
            ));
        }
        if !(self.noise_offset.is_finite() && self.noise_offset >= 0.0) {
            return bad(format!("noise_offset {} must be >= 0", self.noise_offset));
        }
        if self.joint_channels != 1 && self.joint_channels != 3 {
            return bad(format!(
                "joint_channels must be 1 or 3, got {}",
                self.joint_channels
            ));
        }
        if self.stage != Stage::Base && self.init.is_none() {
            return bad(format!("stage {:?} needs an init checkpoint", self.stage));
        }
        if self.resume && self.init.is_none() {
            return bad("resume needs an init checkpoint".into());
        }
        if self.direct_extend.is_some() && self.stage != Stage::Stage1 {
            return bad("direct_extend is only trained alongside stage 1".into());
        }
        if self.validation.samples == 0 || self.validation.sample_steps == 0 {
            return bad("validation samples and sample_steps must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut c.dataset, &mut c.out] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let Some(p) = c.init.as_mut().filter(|p| p.is_relative()) {
                *p = dir.join(&*p);
            }
        }
        Ok(c)
    }

    /// Applies a seed override such as the `JOINTDIFF_SEED` variable.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("seed override {v:?} is not a u64")))?;
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::Stage1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::desk(Stage::Stage1);
        c.init = Some("base.ckpt".into());
        c.direct_extend = Some(ExtendInit::Zeros);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn paper_presets() {
        let s1 = TrainConfig::paper(Stage::Stage1);
        assert_eq!(
            (s1.learning_rate, s1.steps, s1.warmup_steps),
            (1e-4, 10_000, 1000)
        );
        assert_eq!((s1.cond_drop_prob, s1.noise_offset), (0.15, 0.05));
        let s2 = TrainConfig::paper(Stage::Stage2);
        assert_eq!((s2.learning_rate, s2.cond_drop_prob), (1e-5, 0.5));
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        let mut text = TrainConfig::desk(Stage::Base).to_toml();
        assert!(
            TrainConfig::from_toml(&text.replace("schema_version = 1", "schema_version = 2"))
                .is_err()
        );
        text.insert_str(0, "bogus = 3\n");
        assert!(matches!(
            TrainConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }
}
