//! Experiment configuration: one TOML file describes a full run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackSpec;
use crate::dataset::{DataFormat, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, NegativeSampling};
use crate::privacy::BudgetPlan;
use crate::recommender::{Hyper, InitScheme};

/// Overrides the directory that relative dataset paths resolve against.
pub const DATA_DIR_ENV: &str = "FEDREC_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Files {
        format: DataFormat,
        ratings: PathBuf,
        users: PathBuf,
    },
    Synthetic {
        #[serde(default)]
        shape: SyntheticSpec,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Files {
            format: DataFormat::Ml100k,
            ratings: "ml-100k/u.data".into(),
            users: "ml-100k/u.user".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub negative_ratio: usize,
    pub init: InitScheme,
    pub negatives: NegativeSampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            dim: h.dim,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            local_epochs: h.local_epochs,
            negative_ratio: h.negative_ratio,
            init: InitScheme::default(),
            negatives: NegativeSampling::default(),
        }
    }
}

impl ModelConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            dim: self.dim,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            negative_ratio: self.negative_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hit_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hit_k: vec![10, 20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write the delta archive next to the checkpoint.
    pub save_deltas: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            save_deltas: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FedConfig,
    pub privacy: BudgetPlan,
    pub attack: AttackSpec,
    pub eval: EvalConfig,
    /// Where results go; not part of the config hash.
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            federation: FedConfig::default(),
            privacy: BudgetPlan::default(),
            attack: AttackSpec::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.hyper().validate()?;
        self.federation.validate()?;
        self.privacy.validate()?;
        self.attack.validate()?;
        if self.eval.hit_k.contains(&0) {
            return Err(Error::Config("hit_k values must be positive".into()));
        }
        if !self.attack.attackers.is_empty() && self.federation.rounds == 0 {
            return Err(Error::Config("attacks need at least one training round".into()));
        }
        Ok(())
    }

    /// The config with the output location reset; results depend on nothing
    /// else.
    pub fn canonical(&self) -> Self {
        Self {
            output: OutputConfig::default(),
            ..self.clone()
        }
    }

    /// SHA-256 over the JSON of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Dataset paths, with relative ones resolved against `FEDREC_DATA_DIR`
    /// or, if unset, `data/`.
    pub fn resolved_data_paths(&self) -> Option<(DataFormat, PathBuf, PathBuf)> {
        let DataConfig::Files { format, ratings, users } = &self.data else {
            return None;
        };
        let base = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Some((*format, resolve(ratings), resolve(users)))
    }
}

/// Replaces the value at a dotted key (`"model.dim"`) in a TOML table.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// One axis of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub axis: Vec<SweepAxis>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The cartesian product of all axes applied to `base`, each with a label
    /// like `model.dim=32`.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        if self.axis.iter().any(|a| a.values.is_empty()) {
            return Err(Error::Config("sweep axis without values".into()));
        }
        let base_table: toml::Table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        let mut cells = vec![(Vec::<String>::new(), base_table)];
        for axis in &self.axis {
            let mut next = Vec::new();
            for (labels, table) in &cells {
                for v in &axis.values {
                    let mut t = table.clone();
                    set_dotted(&mut t, &axis.key, v.clone())?;
                    let mut l = labels.clone();
                    l.push(format!("{}={}", axis.key, v).replace('"', ""));
                    next.push((l, t));
                }
            }
            cells = next;
        }
        cells
            .into_iter()
            .map(|(labels, table)| {
                let label = labels.join(",");
                let mut cfg: ExperimentConfig = table
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("sweep cell {label}: {e}")))?;
                cfg.output.dir = base.output.dir.join(&label);
                cfg.validate()?;
                Ok((label, cfg))
            })
            .collect()
    }
}
