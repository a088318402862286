use std::path::Path;

use ilm_core::loop_orchestrator::LoopConfig;
use ilm_core::synthetic_data::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Settings for the file-based annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    pub timeout_secs: f64,
    pub poll_ms: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            timeout_secs: 3600.0,
            poll_ms: 500,
        }
    }
}

/// Everything a run can be configured with, read from TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `synth.seed` and `loop.seed` when set.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub annotation: AnnotationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies the global seed and checks every section.
    pub fn finalize(mut self, seed: Option<u64>) -> CliResult<Self> {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.loop_config.seed = s;
        }
        self.synth.validate()?;
        self.loop_config.validate()?;
        if !(self.annotation.timeout_secs.is_finite() && self.annotation.timeout_secs >= 0.0) {
            return Err(CliError::config("annotation.timeout_secs must be >= 0"));
        }
        Ok(self)
    }
}
