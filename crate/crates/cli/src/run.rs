//! Run directories and the artifacts inside them.
//!
//! A run directory is `<output_dir>/<hash>` where `hash` covers the training
//! configuration and the training triples; the checkpoint and ledger headers
//! carry the same hash. Evaluation reports live in subdirectories named by the
//! hash of the evaluation options.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gr_core::dataset::Dataset;
use gr_core::eval::MainModel;
use gr_core::model::{self, RankMetrics};
use gr_core::trainer::{run_fingerprint, train, StepLog};
use gr_core::{Error, Fingerprint, InfluenceLedger, Parameters, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_MISMATCH};

pub const CONFIG: &str = "config.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LEDGER: &str = "ledger.bin";
pub const STEPS: &str = "steps.csv";
pub const METRICS: &str = "metrics.json";
pub const ENTITIES: &str = "entities.txt";
pub const RELATIONS: &str = "relations.txt";

pub fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let dir = config
        .dataset
        .dir
        .as_deref()
        .ok_or_else(|| CliError::config("dataset.dir is not set"))?;
    let data = Dataset::load_dir(dir, config.dataset.unknown)?;
    log::info!(
        "{}: {} entities, {} relations, {}/{}/{} train/valid/test triples",
        dir.display(),
        data.num_entities(),
        data.num_relations(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    Ok(data)
}

pub fn model_hash(config: &RunConfig, data: &Dataset) -> Fingerprint {
    run_fingerprint(&config.train, &data.train, data.num_entities(), data.num_relations())
}

pub fn run_dir(config: &RunConfig, hash: Fingerprint) -> PathBuf {
    config.output_dir.join(hash.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub model_hash: Fingerprint,
    pub test_filtered: RankMetrics,
    pub test_raw: RankMetrics,
    pub valid_filtered: RankMetrics,
    pub final_loss: f64,
}

pub fn metrics(config: &RunConfig, data: &Dataset, params: &Parameters) -> Result<(RankMetrics, RankMetrics, RankMetrics), CliError> {
    let known = [&data.train, &data.valid, &data.test];
    let kind = config.train.scoring;
    Ok((
        model::rank_metrics(params, kind, &data.test, &known, true)?,
        model::rank_metrics(params, kind, &data.test, &known, false)?,
        model::rank_metrics(params, kind, &data.valid, &known, true)?,
    ))
}

/// Trains and writes every artifact into the run directory.
pub fn train_and_save(
    config: &RunConfig,
    data: &Dataset,
) -> Result<(PathBuf, Option<MainModel>, MetricsSummary), CliError> {
    let hash = model_hash(config, data);
    let dir = run_dir(config, hash);
    create_dir(&dir)?;
    write_json(&dir.join(CONFIG), config)?;
    data.vocab.save(&dir.join(ENTITIES), &dir.join(RELATIONS))?;

    let started = Instant::now();
    let mut steps = StepLog::default();
    let (params, main) = if config.track_ledger {
        let main = MainModel::train_observed(&config.train, &data.train, data.num_entities(), data.num_relations(), &mut steps)?;
        main.ledger.save(&dir.join(LEDGER))?;
        (main.params.clone(), Some(main))
    } else {
        let outcome = train(&config.train, &data.train, data.num_entities(), data.num_relations(), &mut steps)?;
        (outcome.params, None)
    };
    log::info!("trained {} steps in {:.1}s", steps.records.len(), started.elapsed().as_secs_f64());
    params.save_checkpoint(&dir.join(CHECKPOINT), config.train.scoring, hash)?;
    steps.save_csv(&dir.join(STEPS))?;

    let (test_filtered, test_raw, valid_filtered) = metrics(config, data, &params)?;
    let summary = MetricsSummary {
        model_hash: hash,
        test_filtered,
        test_raw,
        valid_filtered,
        final_loss: steps.records.last().map_or(f64::NAN, |r| r.loss),
    };
    write_json(&dir.join(METRICS), &summary)?;
    Ok((dir, main, summary))
}

/// A trained run read back from disk, checked against its configuration.
pub struct OpenRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub data: Dataset,
    pub params: Parameters,
    pub hash: Fingerprint,
}

impl OpenRun {
    /// Opens `dir`, optionally with a checkpoint from elsewhere.
    pub fn open(dir: &Path, checkpoint: Option<&Path>) -> Result<Self, CliError> {
        let config_path = dir.join(CONFIG);
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", config_path.display())))?;
        config.validate(true)?;
        let data = load_dataset(&config)?;
        let saved = Vocab::load(&dir.join(ENTITIES), &dir.join(RELATIONS))?;
        if saved != data.vocab {
            return Err(CliError {
                code: EXIT_MISMATCH,
                message: format!("vocabulary in {} differs from the dataset on disk", dir.display()),
            });
        }
        let hash = model_hash(&config, &data);
        let path = checkpoint.map_or_else(|| dir.join(CHECKPOINT), Path::to_path_buf);
        let (params, header) = Parameters::load_checkpoint(&path)?;
        if header.hash != hash {
            return Err(Error::Mismatch(format!(
                "checkpoint {} belongs to run {}, the run configuration gives {hash}",
                path.display(),
                header.hash
            ))
            .into());
        }
        if header.kind != config.train.scoring {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {:?} parameters, configuration says {:?}",
                header.kind, config.train.scoring
            ))
            .into());
        }
        Ok(OpenRun {
            dir: dir.to_owned(),
            config,
            data,
            params,
            hash,
        })
    }

    pub fn ledger(&self, path: Option<&Path>) -> Result<InfluenceLedger, CliError> {
        let path = path.map_or_else(|| self.dir.join(LEDGER), Path::to_path_buf);
        Ok(InfluenceLedger::load(&path, Some(self.hash))?)
    }
}

/// The main model for `config`, read from its run directory when it was
/// trained before with a ledger, otherwise trained now.
pub fn load_or_train(config: &RunConfig, data: &Dataset) -> Result<(PathBuf, MainModel), CliError> {
    let hash = model_hash(config, data);
    let dir = run_dir(config, hash);
    if dir.join(CHECKPOINT).is_file() && dir.join(LEDGER).is_file() {
        log::info!("reusing main model in {}", dir.display());
        let (params, header) = Parameters::load_checkpoint(&dir.join(CHECKPOINT))?;
        if header.hash == hash {
            let ledger = InfluenceLedger::load(&dir.join(LEDGER), Some(hash))?;
            let main = MainModel::from_parts(config.train.clone(), data.train.clone(), params, ledger)?;
            return Ok((dir, main));
        }
        log::warn!("checkpoint in {} has hash {}, retraining", dir.display(), header.hash);
    }
    let tracked = RunConfig {
        track_ledger: true,
        ..config.clone()
    };
    let (dir, main, _) = train_and_save(&tracked, data)?;
    Ok((dir, main.expect("ledger tracking was on")))
}
