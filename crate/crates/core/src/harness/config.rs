//! Experiment configuration: JSON schema, defaults, environment overrides
//! and validation.
//!
//! Every key can be overridden from the environment with
//! `PIPEGUARD_<KEY>`, nested keys joined by a double underscore, e.g.
//! `PIPEGUARD_ITERATIONS=500` or `PIPEGUARD_ATTACK__RATE=0.5`. Values are
//! read as JSON when they parse, otherwise as strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversary::AttackConfig;
use crate::defense::RecoveryPolicy;
use crate::error::{Error, Result};
use crate::protocol::{uniform_layout, Mode, PipelineConfig, Seeds};
use crate::tensor::Activation;

use super::data::{vocabulary, Task};

pub const ENV_PREFIX: &str = "PIPEGUARD_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "DatasetConfig::default_task")]
    pub task: Task,
    /// Feature width; derived from the vocabulary and context for `char_lm`.
    #[serde(default)]
    pub input_dim: Option<usize>,
    /// Class count; the vocabulary size for `char_lm`.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Training rows for `gauss_classify`; ignored by `char_lm`, which uses
    /// the leading 90% of the bundled text.
    #[serde(default = "DatasetConfig::default_samples")]
    pub samples: usize,
    #[serde(default = "DatasetConfig::default_eval_samples")]
    pub eval_samples: usize,
    /// Preceding characters one-hot encoded per `char_lm` row.
    #[serde(default = "DatasetConfig::default_context")]
    pub context: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            task: Self::default_task(),
            input_dim: None,
            classes: None,
            samples: Self::default_samples(),
            eval_samples: Self::default_eval_samples(),
            context: Self::default_context(),
        }
    }
}

impl DatasetConfig {
    fn default_task() -> Task {
        Task::GaussClassify
    }
    fn default_samples() -> usize {
        4000
    }
    fn default_eval_samples() -> usize {
        1000
    }
    fn default_context() -> usize {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::stages", alias = "K")]
    pub stages: usize,
    /// Boundary width shared by all stages (32 for `gauss_classify`, 64 for `char_lm`).
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default = "defaults::blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::micro_batch_size")]
    pub micro_batch_size: usize,
    /// 0.05 for `gauss_classify`, 0.5 for `char_lm`.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::mode")]
    pub mode: Mode,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default = "defaults::round_budget")]
    pub round_budget: usize,
    /// Master seed; the per-purpose seeds derive from it unless given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Seeds>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub recovery: RecoveryPolicy,
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Also write `trace.jsonl` with one line per routed message.
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

mod defaults {
    use super::*;

    pub fn stages() -> usize {
        6
    }
    pub fn activation() -> Activation {
        Activation::Tanh
    }
    pub fn blocks() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn micro_batch_size() -> usize {
        1
    }
    pub fn iterations() -> usize {
        2000
    }
    pub fn mode() -> Mode {
        Mode::RobustDirect
    }
    pub fn round_budget() -> usize {
        2
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Default::default())).expect("empty config is valid")
    }
}

impl ExperimentConfig {
    /// Deserializes without validation; errors name the offending key.
    pub fn from_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        Self::from_value(value)
    }

    /// Reads, applies `PIPEGUARD_*` overrides from the process environment,
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::config("<document>", e.to_string()))?;
        apply_env_overrides(&mut value, std::env::vars())?;
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_or_default(&self) -> f64 {
        self.lr.unwrap_or(match self.dataset.task {
            Task::GaussClassify => 0.05,
            Task::CharLm => 0.5,
        })
    }

    pub fn width_or_default(&self) -> usize {
        self.width.unwrap_or(match self.dataset.task {
            Task::GaussClassify => 32,
            Task::CharLm => 64,
        })
    }

    pub fn seeds_or_derived(&self) -> Seeds {
        self.seeds.unwrap_or_else(|| Seeds::from_master(self.seed))
    }

    /// Input width and class count of the configured task.
    pub fn task_dims(&self) -> (usize, usize) {
        let d = &self.dataset;
        match d.task {
            Task::GaussClassify => (d.input_dim.unwrap_or(6), d.classes.unwrap_or(4)),
            Task::CharLm => {
                let v = vocabulary().len();
                (v * d.context, v)
            }
        }
    }

    /// Copy with every defaulted or derived value written out.
    pub fn resolved(&self) -> Self {
        let (input_dim, classes) = self.task_dims();
        let mut out = self.clone();
        out.width = Some(self.width_or_default());
        out.lr = Some(self.lr_or_default());
        out.seeds = Some(self.seeds_or_derived());
        out.dataset.input_dim = Some(input_dim);
        out.dataset.classes = Some(classes);
        out
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let (input, classes) = self.task_dims();
        let specs = uniform_layout(
            self.stages,
            input,
            self.width_or_default(),
            classes,
            self.activation,
            self.blocks_per_stage,
        );
        let mut cfg = PipelineConfig::new(specs, self.seed);
        cfg.stages = self.stages;
        cfg.batch_size = self.batch_size;
        cfg.micro_batch_size = self.micro_batch_size;
        cfg.lr = self.lr_or_default();
        cfg.iterations = self.iterations;
        cfg.mode = self.mode;
        cfg.seeds = self.seeds_or_derived();
        cfg.tolerance = self.tolerance;
        cfg.recovery = self.recovery;
        cfg.round_budget = self.round_budget;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage", "must be at least 1"));
        }
        if self.width == Some(0) {
            return Err(Error::config("width", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        self.attack.validate(self.stages.max(4))?;
        let d = &self.dataset;
        match d.task {
            Task::GaussClassify => {
                if d.input_dim == Some(0) {
                    return Err(Error::config("dataset.input_dim", "must be at least 1"));
                }
                if matches!(d.classes, Some(c) if c < 2) {
                    return Err(Error::config("dataset.classes", "at least 2 classes are required"));
                }
                if d.samples < self.batch_size {
                    return Err(Error::config(
                        "dataset.samples",
                        format!("{} rows cannot fill a batch of {}", d.samples, self.batch_size),
                    ));
                }
            }
            Task::CharLm => {
                let v = vocabulary().len();
                if d.context == 0 {
                    return Err(Error::config("dataset.context", "must be at least 1"));
                }
                if matches!(d.classes, Some(c) if c != v) {
                    return Err(Error::config(
                        "dataset.classes",
                        format!("char_lm vocabulary has {v} symbols"),
                    ));
                }
                if matches!(d.input_dim, Some(i) if i != v * d.context) {
                    return Err(Error::config(
                        "dataset.input_dim",
                        format!("char_lm input width is {}", v * d.context),
                    ));
                }
            }
        }
        if d.eval_samples == 0 {
            return Err(Error::config("dataset.eval_samples", "must be at least 1"));
        }
        self.pipeline_config()?.validate()?;
        Ok(())
    }
}

/// Applies `PIPEGUARD_*` variables to a parsed config document.
pub fn apply_env_overrides(
    doc: &mut Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut vars: Vec<_> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_owned(), v)))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("{ENV_PREFIX}{key}"), "malformed override name"));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let (leaf, parents) = path.split_last().expect("split yields at least one part");
        let mut node = &mut *doc;
        for (i, part) in parents.iter().enumerate() {
            node = node
                .as_object_mut()
                .ok_or_else(|| Error::config(path[..i].join("."), "override targets a non-object value"))?
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| Error::config(parents.join("."), "override targets a non-object value"))?
            .insert(leaf.clone(), value);
    }
    Ok(())
}
