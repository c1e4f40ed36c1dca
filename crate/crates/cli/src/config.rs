//! Structured-text configuration files. Flags given on the command line
//! override the corresponding file values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cpo_core::concept_graph::ConceptGraph;
use cpo_core::corpus::{WorldSpec, DEMO_ENTITIES, DEFAULT_PROMPT};
use cpo_core::cpo::CpoConfig;
use cpo_core::policy::Hyper;

use crate::error::CliError;

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// The synthetic world: graph, label marginals and sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Graph document; the bundled demo graph when absent.
    pub graph: Option<PathBuf>,
    /// Answer entities in marginal order; the eight demo entities (or every
    /// graph entity, for a custom graph) when absent.
    pub entities: Option<Vec<String>>,
    pub regimes: usize,
    pub shift_tv: f64,
    pub zipf_exponent: f64,
    pub attribute_noise: f64,
    pub observation_length: usize,
    pub comorbidity_rate: f64,
    pub finding_rate: f64,
    pub distinctive_rate: f64,
    pub prompt: Vec<String>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            graph: None,
            entities: None,
            regimes: 1,
            shift_tv: 0.0,
            zipf_exponent: 1.2,
            attribute_noise: 0.1,
            observation_length: 6,
            comorbidity_rate: 0.0,
            finding_rate: 0.6,
            distinctive_rate: 1.0,
            prompt: vec![DEFAULT_PROMPT.to_string()],
        }
    }
}

impl WorldConfig {
    pub fn spec(&self) -> Result<WorldSpec, CliError> {
        let graph = match &self.graph {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                ConceptGraph::parse(&text).map_err(|e| CliError::io(path, e))?
            }
            None => ConceptGraph::demo(),
        };
        let entities: Vec<String> = match (&self.entities, &self.graph) {
            (Some(e), _) => e.clone(),
            (None, None) => DEMO_ENTITIES.iter().map(|s| s.to_string()).collect(),
            (None, Some(_)) => graph.entities().map(str::to_string).collect(),
        };
        let names: Vec<&str> = entities.iter().map(String::as_str).collect();
        let mut spec = WorldSpec::zipf_world(&graph, &names, self.regimes, self.shift_tv, self.zipf_exponent)?;
        spec.attribute_noise = self.attribute_noise;
        spec.observation_length = self.observation_length;
        spec.comorbidity_rate = self.comorbidity_rate;
        spec.finding_rate = self.finding_rate;
        spec.distinctive_rate = self.distinctive_rate;
        spec.prompt = self.prompt.clone();
        spec.validate()?;
        Ok(spec)
    }
}

/// Training file: the optimizer settings plus the policy shape used when
/// training starts from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optimizer: CpoConfig,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            optimizer: CpoConfig::default(),
            window: h.window,
            embed_dim: h.embed_dim,
            hidden_dim: h.hidden_dim,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            window: self.window,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// A training file together with the keys it set explicitly.
pub struct LoadedTrainConfig {
    pub config: TrainConfig,
    pub explicit: BTreeSet<String>,
}

/// Reads a training file, rejecting keys `TrainConfig` does not know
/// (`flatten` rules out serde's own check).
pub fn read_train_config(path: Option<&Path>) -> Result<LoadedTrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(LoadedTrainConfig {
            config: TrainConfig::default(),
            explicit: BTreeSet::new(),
        });
    };
    let table: toml::Table = read_toml(path)?;
    let known = toml::Table::try_from(TrainConfig::default()).expect("defaults serialize");
    if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Input(format!("{}: unknown key `{k}`", path.display())));
    }
    let explicit = table.keys().cloned().collect();
    let config = table.try_into().map_err(|e| CliError::io(path, e))?;
    Ok(LoadedTrainConfig { config, explicit })
}
