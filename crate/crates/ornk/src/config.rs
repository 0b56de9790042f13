//! Run configuration: one TOML file covering data generation, splits,
//! the shared backbone, both training schedules, augmentation, and the
//! method/region matrix. Unknown keys are rejected so typos fail loudly,
//! and every section falls back to a documented default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::backbone::{hex, BackboneConfig, HeadKind, Stage};
use crate::cam::{RoiVariant, Upsample};
use crate::experiment::{default_class_names, ExperimentPlan, MethodName};
use crate::preprocess::RegionSpec;
use crate::synth::SynthSpec;
use crate::trainer::{LossKind, TrainSchedule};
use crate::{Error, Result};

/// Four conv stages that train in minutes at 64x64 on a single core.
pub fn desk_backbone() -> BackboneConfig {
    BackboneConfig {
        input_channels: 3,
        input_size: 64,
        stages: vec![Stage::from((16, 2)), Stage::from((32, 2)), Stage::from((64, 2)), Stage::from((64, 2))],
        head: HeadKind::GapSoftmax,
        classes: 2,
        batch_norm: true,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Share of the whole set held out for testing.
    pub test_fraction: f64,
    /// Share of the remaining training pool held out for validation.
    pub val_fraction: f64,
    /// Report column names per class; empty means derived from the class
    /// count ("N,S,G" for three classes).
    pub class_names: Vec<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { test_fraction: 0.20, val_fraction: 0.15, class_names: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub methods: Vec<MethodName>,
    pub regions: Vec<RegionSpec>,
    pub variant: RoiVariant,
    pub upsample: Upsample,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            methods: vec![MethodName::Trk, MethodName::Rk, MethodName::Mc],
            regions: vec![RegionSpec::disc()],
            variant: RoiVariant::Standard,
            upsample: Upsample::Bilinear,
        }
    }
}

/// A schedule section in the config file. Identical to the trainer's
/// schedule except that the loss is optional: left unset, each stage
/// keeps its own default (plain cross-entropy for the first stage and
/// baselines, the accuracy-aware loss for the second stage).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    pub alpha: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let base = TrainSchedule::default();
        ScheduleSection {
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            plateau_patience: base.plateau_patience,
            plateau_factor: base.plateau_factor,
            loss: None,
            alpha: base.alpha,
        }
    }
}

impl ScheduleSection {
    pub fn resolve(&self, default_loss: LossKind) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            loss: self.loss.unwrap_or(default_loss),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Upper bound on concurrently training sub-models.
    pub workers: usize,
    pub dataset: DatasetSection,
    pub synth: SynthSpec,
    pub backbone: BackboneConfig,
    /// First-stage and baseline schedule.
    pub schedule: ScheduleSection,
    /// Second-stage schedule.
    pub final_schedule: ScheduleSection,
    pub augment: AugmentPolicy,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: 1,
            dataset: DatasetSection::default(),
            synth: SynthSpec::default(),
            backbone: desk_backbone(),
            schedule: ScheduleSection::default(),
            final_schedule: ScheduleSection::default(),
            augment: AugmentPolicy::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, frac) in [
            ("test_fraction", self.dataset.test_fraction),
            ("val_fraction", self.dataset.val_fraction),
        ] {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::Config(format!("{name} must sit strictly between 0 and 1")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.synth.validate()?;
        if self.backbone.input_size != self.synth.h {
            return Err(Error::Config(format!(
                "backbone input size {} differs from the generated image side {}",
                self.backbone.input_size, self.synth.h
            )));
        }
        self.to_plan().validate()
    }

    /// The experiment driver's view of this configuration. The class
    /// count comes from the data section.
    pub fn to_plan(&self) -> ExperimentPlan {
        let n = self.synth.classes;
        let class_names = if self.dataset.class_names.is_empty() {
            default_class_names(n)
        } else {
            self.dataset.class_names.clone()
        };
        ExperimentPlan {
            n,
            class_names,
            backbone: self.backbone.clone(),
            primitive_schedule: self.schedule.resolve(LossKind::Ce),
            final_schedule: self.final_schedule.resolve(LossKind::Cea),
            policy: self.augment.clone(),
            methods: self.experiment.methods.clone(),
            regions: self.experiment.regions.clone(),
            variant: self.experiment.variant,
            upsample: self.experiment.upsample,
            seed: self.seed,
            workers: self.workers,
        }
    }

    /// Content hash over the canonical serialized form, for run
    /// summaries and artifact provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

/// Parses and validates a TOML run configuration.
pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse("run config", format!("not UTF-8: {e}")))?;
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::parse("run config", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_run_config(&bytes)
}
