//! Run configuration: one TOML file plus a seed describes an experiment.
//!
//! ```toml
//! seed = 1
//!
//! [dataset]
//! mode = "balanced"        # or "skewed" with `base` and `ratios`
//! per_class = 200
//!
//! designated = 0          # stage-1 expert
//!
//! [stage1]
//! epochs = 14
//!
//! [inference]
//! k = 1
//! routing = "iwr"          # "pfr" or "forced:<class>"
//! ```
//!
//! Every key is optional; missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::iwr::ClassifierConfig;
use crate::moe::{InferenceConfig, RoutingMode, StageConfig};
use crate::weathersim::{DatasetConfig, DatasetMode, NUM_WEATHERS};
use crate::wse::LossConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub mode: String,
    pub per_class: usize,
    pub base: usize,
    pub ratios: [usize; NUM_WEATHERS],
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            mode: "balanced".into(),
            per_class: 200,
            base: 20,
            ratios: [10, 4, 2, 3, 2, 3, 2],
            train_fraction: d.train_fraction,
            test_fraction: d.test_fraction,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            momentum: c.momentum,
        }
    }
}

impl ClassifierSection {
    pub fn to_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub cosine: bool,
    pub augment: bool,
    pub max_insert: usize,
    pub audit_every: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub regression_weight: f64,
}

impl StageSection {
    fn from_config(c: &StageConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            momentum: c.momentum,
            cosine: c.cosine,
            augment: c.augment,
            max_insert: c.max_insert,
            audit_every: c.audit_every,
            focal_alpha: c.loss.alpha,
            focal_gamma: c.loss.gamma,
            smooth_l1_beta: c.loss.smooth_l1_beta,
            regression_weight: c.loss.regression_weight,
        }
    }

    pub fn to_config(&self) -> StageConfig {
        StageConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            cosine: self.cosine,
            augment: self.augment,
            max_insert: self.max_insert,
            audit_every: self.audit_every,
            loss: LossConfig {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
                smooth_l1_beta: self.smooth_l1_beta,
                regression_weight: self.regression_weight,
            },
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self::from_config(&StageConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub k: usize,
    pub tau: f64,
    pub tau_nms: f64,
    pub score_threshold: f64,
    pub routing: String,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let c = InferenceConfig::default();
        Self {
            k: c.k,
            tau: c.tau,
            tau_nms: c.tau_nms,
            score_threshold: c.score_threshold,
            routing: "iwr".into(),
        }
    }
}

impl InferenceSection {
    pub fn to_config(&self) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            tau: self.tau,
            tau_nms: self.tau_nms,
            score_threshold: self.score_threshold,
        }
    }

    pub fn routing_mode(&self) -> Result<RoutingMode> {
        match self.routing.as_str() {
            "iwr" => Ok(RoutingMode::Iwr),
            "pfr" => Ok(RoutingMode::Pfr),
            other => other
                .strip_prefix("forced:")
                .and_then(|w| w.parse().ok())
                .filter(|w| *w < NUM_WEATHERS)
                .map(RoutingMode::Forced)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown routing {other:?}"))),
        }
    }
}

/// Whole-experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Expert trained in stage 1 and copied everywhere in stage 3.
    pub designated: usize,
    pub dataset: DatasetSection,
    pub classifier: ClassifierSection,
    /// Point-feature gate training, for the routing comparison.
    pub gate: ClassifierSection,
    pub stage1: StageSection,
    pub stage4: StageSection,
    pub inference: InferenceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            designated: 0,
            dataset: DatasetSection::default(),
            classifier: ClassifierSection::default(),
            gate: ClassifierSection {
                epochs: 30,
                batch_size: 16,
                lr: 0.1,
                momentum: 0.9,
            },
            stage1: StageSection {
                epochs: 14,
                ..StageSection::default()
            },
            stage4: StageSection::default(),
            inference: InferenceSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let d = &self.dataset;
        let mode = match d.mode.as_str() {
            "balanced" => DatasetMode::Balanced { per_class: d.per_class },
            "skewed" => DatasetMode::Skewed {
                base: d.base,
                ratios: d.ratios,
            },
            other => return Err(Error::InvalidArgument(format!("unknown dataset mode {other:?}"))),
        };
        let cfg = DatasetConfig {
            mode,
            train_fraction: d.train_fraction,
            test_fraction: d.test_fraction,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config()?;
        self.inference.routing_mode()?;
        let i = &self.inference;
        if i.k == 0 || i.k > NUM_WEATHERS {
            return Err(Error::InvalidArgument(format!("inference.k must be in [1, {NUM_WEATHERS}], got {}", i.k)));
        }
        if !(i.tau > 0.0 && i.tau < 1.0) || !(i.tau_nms > 0.0 && i.tau_nms <= 1.0) {
            return Err(Error::InvalidArgument("inference thresholds out of range".into()));
        }
        if self.designated >= NUM_WEATHERS {
            return Err(Error::InvalidArgument(format!("designated expert {} out of range", self.designated)));
        }
        for (name, batch) in [
            ("classifier", self.classifier.batch_size),
            ("gate", self.gate.batch_size),
            ("stage1", self.stage1.batch_size),
            ("stage4", self.stage4.batch_size),
        ] {
            if batch == 0 {
                return Err(Error::InvalidArgument(format!("{name}.batch_size must be positive")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.stage4.epochs = 3;
        c.inference.routing = "forced:2".into();
        c.dataset.mode = "skewed".into();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.inference.routing_mode().unwrap(), RoutingMode::Forced(2));
        assert!(matches!(back.dataset_config().unwrap().mode, DatasetMode::Skewed { base: 20, .. }));
    }

    #[test]
    fn partial_sections_and_rejections() {
        let c = RunConfig::parse("designated = 3\n[stage1]\nepochs = 2\n").unwrap();
        assert_eq!(c.stage1.epochs, 2);
        assert_eq!(c.designated, 3);
        assert_eq!(c.stage1.to_config().lr, StageConfig::default().lr);
        assert!(RunConfig::parse("[inference]\nk = 8\n").is_err());
        assert!(RunConfig::parse("[inference]\nrouting = \"magic\"\n").is_err());
        assert!(RunConfig::parse("[dataset]\ntrain_fraction = 0.7\n").is_err());
        assert!(RunConfig::parse("[stage4]\nbogus = 1\n").is_err());
    }
}
