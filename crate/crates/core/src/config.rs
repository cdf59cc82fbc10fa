//! Experiment configuration files.
//!
//! A config is a TOML document with four tables, each optional and each
//! filled from defaults:
//!
//! ```toml
//! [scenario]     # data generation, see ScenarioConfig
//! [model]        # architecture, see ModelConfig
//! [train]        # optimization, see TrainConfig
//! [experiment]   # seeds, metric ks, methods to compare
//! ```
//!
//! Unknown keys are rejected so typos surface as config errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::moe::{ModelConfig, ModelKind, TrainConfig};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Each seed generates its own dataset, initialization and shuffle order.
    pub seeds: Vec<u64>,
    /// Top-k accuracies to report.
    pub ks: Vec<usize>,
    pub methods: Vec<ModelKind>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            ks: vec![1, 2],
            methods: ModelKind::ALL.to_vec(),
        }
    }
}

/// Pass thresholds for a frozen comparison experiment. Commands ignore it;
/// the acceptance tests read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceSection {
    /// Required lead of the mixture over the best unimodal baseline.
    pub margin: f64,
    /// Seeds in which night visual weight must be below day.
    pub min_night_lower_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<AcceptanceSection>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "config".to_owned());
            Error::config(field, e.message().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::config(path.display().to_string(), "not valid UTF-8"))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates every section; returns scenario warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.scenario.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let exp = &self.experiment;
        if exp.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "at least one seed required"));
        }
        if exp.ks.is_empty() {
            return Err(Error::config("experiment.ks", "at least one k required"));
        }
        if let Some(&k) = exp.ks.iter().find(|&&k| k == 0 || k > self.scenario.num_beams) {
            return Err(Error::config(
                "experiment.ks",
                format!("k = {k} outside [1, {}]", self.scenario.num_beams),
            ));
        }
        if exp.methods.is_empty() {
            return Err(Error::config("experiment.methods", "at least one method required"));
        }
        if let Some(a) = &self.acceptance {
            if !(a.margin.is_finite() && a.margin >= 0.0) {
                return Err(Error::config("acceptance.margin", "must be finite and >= 0"));
            }
            if a.min_night_lower_seeds > exp.seeds.len() {
                return Err(Error::config(
                    "acceptance.min_night_lower_seeds",
                    format!("exceeds the {} configured seeds", exp.seeds.len()),
                ));
            }
        }
        Ok(warnings)
    }

    /// Scenario, model and training settings for one seed.
    pub fn for_seed(&self, seed: u64) -> (ScenarioConfig, ModelConfig, TrainConfig) {
        let scenario = ScenarioConfig {
            rng_seed: seed,
            ..self.scenario.clone()
        };
        let model = ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        };
        let train = TrainConfig {
            shuffle_seed: seed,
            ..self.train.clone()
        };
        (scenario, model, train)
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        fsutil::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
