use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use steer_core::corpus::GeneratorConfig;
use steer_core::pipeline::ExperimentConfig;
use steer_core::sampler::SamplerConfig;

/// Everything a `--config` file may set. Missing keys keep their defaults;
/// command-line flags are applied on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub sampler: SamplerConfig,
    pub experiment: ExperimentConfig,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
