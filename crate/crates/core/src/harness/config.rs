use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::atvc::ModelConfig;
use crate::baselines::PolicyKind;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::trainer::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other stream is derived from it.
    pub seed: u64,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// Save a checkpoint every this many iterations (0 disables).
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "defaults::eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "defaults::policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "defaults::delta_t_values")]
    pub delta_t_values: Vec<f64>,
    #[serde(default = "defaults::agent_counts")]
    pub agent_counts: Vec<usize>,
    /// Action samples per heatmap cell.
    #[serde(default = "defaults::heatmap_samples")]
    pub heatmap_samples: usize,
    /// Evaluate learned policies with the action mean instead of a sample.
    #[serde(default)]
    pub deterministic_eval: bool,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
}

mod defaults {
    use super::*;

    pub fn iterations() -> usize {
        300
    }
    pub fn checkpoint_every() -> usize {
        50
    }
    pub fn eval_episodes() -> usize {
        1000
    }
    pub fn policies() -> Vec<PolicyKind> {
        PolicyKind::ALL.to_vec()
    }
    pub fn delta_t_values() -> Vec<f64> {
        vec![1.0, 2.0, 3.0, 4.0]
    }
    pub fn agent_counts() -> Vec<usize> {
        vec![3, 6, 9, 12]
    }
    pub fn heatmap_samples() -> usize {
        1000
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

/// Everything one invocation needs. All four sections must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub model: ModelConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses TOML text after applying `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for section in ["env", "ppo", "model", "experiment"] {
            if !table.contains_key(section) {
                return Err(Error::config(section, "section missing"));
            }
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.model.validate_layers()?;
        let x = &self.experiment;
        if x.eval_episodes == 0 {
            return Err(Error::config("experiment.eval_episodes", "must be at least 1"));
        }
        if x.delta_t_values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("experiment.delta_t_values", "must be positive"));
        }
        if x.agent_counts.iter().any(|&m| m < self.env.choices) {
            return Err(Error::config(
                "experiment.agent_counts",
                format!("each count must be at least env.choices = {}", self.env.choices),
            ));
        }
        if x.heatmap_samples == 0 {
            return Err(Error::config("experiment.heatmap_samples", "must be at least 1"));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Model configuration with the environment-derived fields filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            choices: self.env.choices,
            buffer: self.env.buffer,
            ..self.model.clone()
        }
    }
}

/// `section.key=value`; the value is read as a TOML literal, falling back
/// to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| Error::config(path, "override key must be section.key"))?;
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(section_table) = entry else {
        return Err(Error::config(section, "is not a section"));
    };
    section_table.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[env]
schedulers = 3
servers = 3
choices = 2
arrival_rate = 0.9
service_rate = 1.0
buffer = 5
delta_t = 1.0
episode_len = 100
p_stale = 0.5

[ppo]

[model]

[experiment]
seed = 7
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.env, EnvConfig::table1());
        assert_eq!(cfg.ppo, PpoConfig::default());
        assert_eq!(cfg.experiment.iterations, 300);
        assert_eq!(cfg.experiment.agent_counts, vec![3, 6, 9, 12]);
        assert_eq!(cfg.model_config().buffer, 5);
    }

    #[test]
    fn overrides_take_precedence_and_survive_the_snapshot() {
        let sets = ["env.delta_t=2".to_string(), "experiment.policies=[\"jsq\"]".to_string()];
        let cfg = RunConfig::from_toml(MINIMAL, &sets).unwrap();
        assert_eq!(cfg.env.delta_t, 2.0);
        assert_eq!(cfg.experiment.policies, vec![PolicyKind::Jsq]);
        let back = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_rejected() {
        assert!(RunConfig::from_toml(MINIMAL, &["env.colour=3".into()]).is_err());
        assert!(RunConfig::from_toml(MINIMAL, &["model.buffer=3".into()]).is_err());
        let no_seed = MINIMAL.replace("seed = 7", "");
        assert!(RunConfig::from_toml(&no_seed, &[]).is_err());
        let no_ppo = MINIMAL.replace("[ppo]", "");
        assert!(RunConfig::from_toml(&no_ppo, &[]).is_err());
        assert!(RunConfig::from_toml(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn string_fallback_for_bare_words() {
        let mut t = Table::new();
        apply_override(&mut t, "experiment.output_dir=/tmp/x").unwrap();
        assert_eq!(t["experiment"]["output_dir"].as_str(), Some("/tmp/x"));
    }
}
