//! Pipeline configuration (JSON). Omitted fields take their defaults:
//! `tau = 0.6`, `k = 100`, `beta = 0.8`, `kappa = 0.01`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::SynthConfig;
use crate::error::{Error, Result};
use crate::inference::FusionParams;
use crate::probe::{FocalLossParams, SgdSchedule};
use crate::retrieval::SamplingConfig;
use crate::seed::derive_seed;

/// Detection post-processing knobs; `beta` and `kappa` live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSettings {
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    pub use_objectness: bool,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        let f = FusionParams::default();
        Self {
            score_threshold: f.score_threshold,
            nms_iou_threshold: f.nms_iou_threshold,
            max_detections: f.max_detections,
            use_objectness: f.use_objectness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset manifest. When absent, stages use `<out>/dataset/manifest.json`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Single source of randomness; every stage derives its own sub-seed.
    pub seed: u64,
    /// Objectness threshold before retrieval (strict).
    pub tau: f64,
    /// Proposals retrieved per novel class.
    pub k: usize,
    pub beta: f64,
    pub kappa: f64,
    pub focal: FocalLossParams,
    pub base_schedule: SgdSchedule,
    pub distill_schedule: SgdSchedule,
    pub probe_schedule: SgdSchedule,
    pub sampling: SamplingConfig,
    pub detection: DetectionSettings,
    pub eval_iou_threshold: f64,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
            tau: 0.6,
            k: 100,
            beta: 0.8,
            kappa: 0.01,
            focal: FocalLossParams::default(),
            base_schedule: SgdSchedule::base(),
            distill_schedule: SgdSchedule::distill(),
            probe_schedule: SgdSchedule::probe(),
            sampling: SamplingConfig::default(),
            detection: DetectionSettings::default(),
            eval_iou_threshold: 0.5,
            synth: SynthConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, err: Error) -> Error {
    match err {
        Error::Range { field, detail } => Error::Range {
            field: format!("{prefix}.{field}"),
            detail,
        },
        other => other,
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::range("tau", format!("{} not in [0, 1]", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::range("k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::range("beta", format!("{} not in [0, 1]", self.beta)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::range("kappa", format!("{} must be positive", self.kappa)));
        }
        if !(self.eval_iou_threshold > 0.0 && self.eval_iou_threshold <= 1.0) {
            return Err(Error::range(
                "eval_iou_threshold",
                format!("{} not in (0, 1]", self.eval_iou_threshold),
            ));
        }
        self.focal.validate().map_err(|e| prefixed("focal", e))?;
        self.base_schedule.validate().map_err(|e| prefixed("base_schedule", e))?;
        self.distill_schedule.validate().map_err(|e| prefixed("distill_schedule", e))?;
        self.probe_schedule.validate().map_err(|e| prefixed("probe_schedule", e))?;
        self.sampling.validate().map_err(|e| prefixed("sampling", e))?;
        self.fusion().validate().map_err(|e| prefixed("detection", e))?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn fusion(&self) -> FusionParams {
        FusionParams {
            beta: self.beta,
            kappa: self.kappa,
            score_threshold: self.detection.score_threshold,
            nms_iou_threshold: self.detection.nms_iou_threshold,
            max_detections: self.detection.max_detections,
            use_objectness: self.detection.use_objectness,
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn base_schedule(&self) -> SgdSchedule {
        SgdSchedule {
            seed: self.stage_seed("train-base"),
            ..self.base_schedule.clone()
        }
    }

    pub fn distill_schedule(&self) -> SgdSchedule {
        SgdSchedule {
            seed: self.stage_seed("train-distill"),
            ..self.distill_schedule.clone()
        }
    }

    pub fn probe_schedule(&self) -> SgdSchedule {
        SgdSchedule {
            seed: self.stage_seed("probe"),
            ..self.probe_schedule.clone()
        }
    }

    pub fn base_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            seed: self.stage_seed("sample-base"),
            ..self.sampling.clone()
        }
    }

    pub fn probe_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            seed: self.stage_seed("sample-probe"),
            ..self.sampling.clone()
        }
    }

    pub fn synth_seed(&self) -> u64 {
        self.stage_seed("synth")
    }

    /// Manifest used by every stage after `synth`.
    pub fn manifest_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out.join("dataset").join(crate::datastore::MANIFEST_FILE))
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
