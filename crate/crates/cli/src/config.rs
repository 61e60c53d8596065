//! Run configuration: a preset, an optional JSON file and `--set` overrides,
//! merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use gr_core::dataset::UnknownPolicy;
use gr_core::eval::Selector;
use gr_core::trainer::{LrSchedule, OptimizerKind};
use gr_core::{Fingerprint, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory with `train.txt`, `valid.txt` and `test.txt`.
    pub dir: Option<PathBuf>,
    /// Evaluation lines naming entities or relations unseen in training.
    pub unknown: UnknownPolicy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dir: None,
            unknown: UnknownPolicy::Error,
        }
    }
}

/// Random store used by `verify-theory` in place of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `gr-k`, `gr-all`, `gr-o-k`, `nh-k`, `nh-all` or `empty`.
    pub selector: String,
    /// Test triples sampled for ROAR and correlation runs.
    pub tests: usize,
    pub test_seed: u64,
    /// Retrain threads; 0 uses every core. Does not affect results.
    pub workers: usize,
    /// `(d', d)` pairs for the stability check.
    pub trials: usize,
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            selector: "gr-1".into(),
            tests: 30,
            test_seed: 42,
            workers: 0,
            trials: 30,
            synthetic: None,
        }
    }
}

impl EvalConfig {
    pub fn selector(&self) -> Result<Selector, CliError> {
        self.selector.parse().map_err(CliError::from)
    }

    pub fn workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    /// Hash of the fields that change evaluation results.
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of_json(&EvalConfig {
            workers: 0,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    /// Parent of the per-run directories.
    pub output_dir: PathBuf,
    /// Write the influence ledger next to the checkpoint.
    pub track_ledger: bool,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            output_dir: PathBuf::from("runs"),
            track_ledger: true,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Builds a configuration from an optional preset, an optional JSON file
    /// (any subset of keys) and `key.path=value` overrides.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut base = RunConfig::default();
        if let Some(name) = preset {
            base.train = TrainConfig::preset(name)?;
        }
        let mut value = serde_json::to_value(&base).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))?;
        Ok(config)
    }

    /// Every problem with the configuration, for commands that need a dataset.
    pub fn problems(&self, needs_dataset: bool) -> Vec<String> {
        let mut problems = self.train.problems();
        match &self.dataset.dir {
            None if needs_dataset => problems.push("dataset.dir is not set".into()),
            Some(dir) if needs_dataset && !dir.is_dir() => {
                problems.push(format!("dataset.dir {} is not a directory", dir.display()))
            }
            _ => {}
        }
        if let Err(e) = self.eval.selector.parse::<Selector>() {
            problems.push(e.to_string());
        }
        problems
    }

    pub fn validate(&self, needs_dataset: bool) -> Result<(), CliError> {
        let problems = self.problems(needs_dataset);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(problems.join("\n")))
        }
    }

    pub fn theory_problems(&self) -> Vec<String> {
        let mut problems = self.problems(self.eval.synthetic.is_none());
        if self.train.optimizer != OptimizerKind::Sgd {
            problems.push("verify-theory needs train.optimizer = sgd".into());
        }
        if self.train.lr_schedule != LrSchedule::InverseT {
            problems.push("verify-theory needs train.lr_schedule = inverse_t".into());
        }
        problems
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and taken as a string if that
/// fails, so `train.optimizer=sgd` and `train.lr0=0.01` both work.
fn apply_override(value: &mut Value, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{item}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = value;
    for key in &keys[..keys.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("override `{path}`: `{key}` is not a section")))?;
        node = map.entry(*key).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::config(format!("override `{path}` does not name a field")))?;
    map.insert(keys[keys.len() - 1].to_owned(), parsed);
    Ok(())
}
