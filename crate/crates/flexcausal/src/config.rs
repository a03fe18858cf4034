//! Run configuration: one strict JSON document covering every pipeline
//! stage.
//!
//! Every block and every field is optional — absent values take the
//! documented defaults — but unknown keys are rejected anywhere in the
//! document, so typos fail loudly instead of silently running defaults.
//! The effective (fully defaulted) configuration can be echoed to an
//! output directory for reproducibility.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::DgpConfig;
use crate::estimands::EstimandRequest;
use crate::eval::StudyConfig;
use crate::priors::TreePriorParams;
use crate::propensity::PsMethod;
use crate::sampler::SamplerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Propensity-stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensityConfig {
    pub method: PsMethod,
    /// Cross-validation folds for the lasso path.
    pub folds: usize,
    /// Boosting rounds budget.
    pub gbm_rounds: usize,
    pub gbm_shrinkage: f64,
    pub gbm_depth: u32,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            method: PsMethod::Lasso,
            folds: 5,
            gbm_rounds: 500,
            gbm_shrinkage: 0.1,
            gbm_depth: 2,
        }
    }
}

impl PropensityConfig {
    pub fn settings(&self) -> crate::propensity::PsFitSettings {
        crate::propensity::PsFitSettings {
            method: self.method,
            folds: self.folds,
            gbm_rounds: self.gbm_rounds,
            gbm_shrinkage: self.gbm_shrinkage,
            gbm_depth: self.gbm_depth,
        }
    }
}

/// The whole-run configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    pub propensity: PropensityConfig,
    /// Tree-structure prior shared by both forests.
    pub prior: TreePriorParams,
    pub sampler: SamplerConfig,
    pub estimands: EstimandRequest,
    pub study: StudyConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Write the fully defaulted configuration to
    /// `<out_dir>/effective_config.json`.
    pub fn echo(&self, out_dir: &Path) -> Result<(), ConfigError> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("effective_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}
