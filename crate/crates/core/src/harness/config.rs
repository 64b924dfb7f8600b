//! Experiment configuration: a TOML document with one section per stage.
//! Unknown keys are rejected; `section.key=value` overrides are applied to
//! the parsed document before it is checked.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::SplitConfig;
use super::synth::SbmConfig;
use crate::error::ConfigError;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::prompt::{Ablation, PromptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// One SBM graph, split by `[split]`.
    Sbm,
    /// Pre-train on one SBM, fine-tune on a shifted one.
    #[default]
    Pair,
    /// A graph file, split by `[split]`.
    Graph,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Sbm => "sbm",
            DataSource::Pair => "pair",
            DataSource::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Graph file for `source = "graph"`.
    pub path: String,
    pub sbm: SbmConfig,
    /// In units of the within-block σ.
    pub signal_shift: f64,
    pub structure_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Pair,
            path: String::new(),
            sbm: SbmConfig::default(),
            signal_shift: 1.5,
            structure_shift: 0.3,
        }
    }
}

/// Runs one fine-tuning per listed value; empty lists use the `[prompt]` value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ablations: Vec<Ablation>,
    #[serde(rename = "L")]
    pub l: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    /// Fine-tuning learning rates; each run keeps the best on validation.
    pub lr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of consecutive seeds starting at `seed`.
    pub seeds: usize,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: 1,
            data: DataConfig::default(),
            split: SplitConfig {
                setting: super::split::Setting::Transductive,
                ..SplitConfig::default()
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            prompt: PromptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(assignment.to_string());
    let (path, raw) = assignment.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let (last, parents) = keys.split_last().ok_or_else(bad)?;
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(bad)?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?, overrides)
    }

    /// Fully resolved document, every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// FNV-1a of the resolved document.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds == 0 {
            return invalid("seeds must be at least 1".into());
        }
        if self.data.source == DataSource::Graph && self.data.path.is_empty() {
            return invalid("data.path is required for source = \"graph\"".into());
        }
        self.data.sbm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.source != DataSource::Graph && self.model.input_dim != self.data.sbm.features.dim {
            return invalid(format!(
                "model.input_dim {} differs from data.sbm.features.dim {}",
                self.model.input_dim, self.data.sbm.features.dim
            ));
        }
        self.pretrain.sampler.augment.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.prompt.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.num_layers == 0 {
            return invalid("model.num_layers must be at least 1".into());
        }
        if self.sweep.l.contains(&0) || self.sweep.k.contains(&0) {
            return invalid("sweep values must be positive".into());
        }
        if self.sweep.lr.iter().any(|&lr| !(lr >= 0.0 && lr.is_finite())) {
            return invalid("sweep learning rates must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PtMode;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_sections() {
        let text = "seed = 3\n[prompt]\nL = 8\npt_mode = \"lowrank:4\"\n[sweep]\nablations = [\"full\", \"no-pt\"]\n";
        let cfg = ExperimentConfig::from_toml(
            text,
            &["prompt.K=16".into(), "pretrain.framework=linkpred".into(), "data.sbm.p_in=0.2".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.prompt.l, 8);
        assert_eq!(cfg.prompt.k, 16);
        assert_eq!(cfg.prompt.pt_mode, PtMode::LowRank(4));
        assert_eq!(cfg.sweep.ablations, vec![Ablation::Full, Ablation::NoPt]);
        assert_eq!(cfg.pretrain.framework, crate::pretrain::Framework::LinkPred);
        assert_eq!(cfg.data.sbm.p_in, 0.2);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1", &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml("[prompt]\nM = 3", &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["prompt.L".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["seed=1".into(), "seed.x=1".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["prompt.L=0".into()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["model.input_dim=5".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }
}
