use std::path::Path;

use serde::{Deserialize, Serialize};
use tnsde_core::causal::IteNormalization;
use tnsde_core::data::{CohortConfig, TABULAR_WIDTH};
use tnsde_core::model::SolverConfig;
use tnsde_core::nets::{ConvEncoderSpec, MlpSpec, ModelSpec};
use tnsde_core::sde::Scheme;
use tnsde_core::train::{default_grid, AdamConfig, CvConfig, HyperParams, TrainConfig};

use crate::CliError;

/// Everything a command needs besides its file paths. Written back verbatim
/// into run metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub causal: CausalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub volume_latent: usize,
    pub tabular_hidden: Vec<usize>,
    pub tabular_latent: usize,
    pub drift_hidden: Vec<usize>,
    pub diffusion_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub diffusion_scale: f64,
    pub drift_time_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = ModelSpec::new(1);
        Self {
            channels: spec.volume.channels.clone(),
            volume_latent: spec.volume.latent,
            tabular_hidden: spec.tabular.widths[1..spec.tabular.widths.len() - 1].to_vec(),
            tabular_latent: spec.tabular.output(),
            drift_hidden: spec.drift_hidden,
            diffusion_hidden: spec.diffusion_hidden,
            decoder_hidden: spec.decoder_hidden,
            diffusion_scale: spec.diffusion_scale,
            drift_time_scale: spec.drift_time_scale,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, n_arms: usize, volume_shape: [usize; 3]) -> ModelSpec {
        let mut tabular = vec![TABULAR_WIDTH];
        tabular.extend_from_slice(&self.tabular_hidden);
        tabular.push(self.tabular_latent);
        ModelSpec {
            volume: ConvEncoderSpec {
                input_shape: volume_shape,
                channels: self.channels.clone(),
                latent: self.volume_latent,
            },
            tabular: MlpSpec::new(tabular),
            drift_hidden: self.drift_hidden.clone(),
            diffusion_hidden: self.diffusion_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            n_arms,
            diffusion_scale: self.diffusion_scale,
            drift_time_scale: self.drift_time_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub folds: usize,
    pub grid: Vec<HyperParams>,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub val_samples: usize,
    pub step_weeks: f64,
    pub scheme: Scheme,
    pub adam: AdamConfig,
    pub calibration_weight: f64,
    pub predict_samples: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cv = CvConfig::default();
        Self {
            folds: cv.folds,
            grid: default_grid(),
            epochs: cv.train.epochs,
            patience: cv.train.patience,
            batch_size: cv.train.batch_size,
            val_samples: cv.train.val_samples,
            step_weeks: cv.train.solver.step_weeks,
            scheme: cv.train.solver.scheme,
            adam: cv.train.adam,
            calibration_weight: cv.train.calibration_weight,
            predict_samples: cv.predict_samples,
            seed: cv.seed,
        }
    }
}

impl TrainSection {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            step_weeks: self.step_weeks,
            scheme: self.scheme,
        }
    }

    pub fn cv(&self) -> CvConfig {
        CvConfig {
            folds: self.folds,
            grid: self.grid.clone(),
            train: TrainConfig {
                epochs: self.epochs,
                patience: self.patience,
                batch_size: self.batch_size,
                val_samples: self.val_samples,
                solver: self.solver(),
                adam: self.adam,
                calibration_weight: self.calibration_weight,
                seed: self.seed,
            },
            predict_samples: self.predict_samples,
            seed: self.seed,
        }
    }
}

/// Arm selection for `predict`: `"all"`, `"assigned"` or a list of names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArmSelection {
    Keyword(String),
    Names(Vec<String>),
}

impl Default for ArmSelection {
    fn default() -> Self {
        ArmSelection::Keyword("all".into())
    }
}

impl ArmSelection {
    pub fn parse(text: &str) -> Self {
        match text {
            "all" | "assigned" => ArmSelection::Keyword(text.into()),
            _ => ArmSelection::Names(text.split(',').map(|s| s.trim().to_string()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub samples: usize,
    pub seed: u64,
    pub arms: ArmSelection,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            samples: 30,
            seed: 0,
            arms: ArmSelection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalSection {
    pub retentions: Vec<f64>,
    pub normalization: IteNormalization,
    /// Comparator arm name; the first placebo arm when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<String>,
}

impl Default for CausalSection {
    fn default() -> Self {
        Self {
            retentions: vec![0.3, 0.5, 1.0],
            normalization: IteNormalization::Mean,
            control: None,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        if path == "." || path.is_empty() {
            CliError::validation(format!("config: {message}"))
        } else {
            CliError::validation(format!("config field `{path}`: {message}"))
        }
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
