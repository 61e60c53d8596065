//! Faithfulness and approximation-quality evaluation.
//!
//! Everything here compares the main model against models retrained from
//! scratch on a reduced store. Retrains share the main run's seed, so the
//! only difference between two runs is the removed triples.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AdjacencyIndex, EntityId, RemovalManifest, Split, Triple, TripleId, TripleStore};
use crate::error::{Error, Result};
use crate::explain::{ExplainMode, Explainer};
use crate::fingerprint::Fingerprint;
use crate::ledger::{rollback, InfluenceLedger};
use crate::model::{self, object_probability, predict_top, EmbeddingView, Parameters, RowRef};
use crate::trainer::{
    keyed_sample, run_fingerprint, train, LrSchedule, OptimizerKind, RngPolicy, Step, TrainConfig,
    TrainObserver,
};

const TAG_TESTS: u64 = 0x7465_7374;
const TAG_NH: u64 = 0x6e68;
const TAG_TRIALS: u64 = 0x7472_6961;
const TAG_PROBES: u64 = 0x7072_6f62;

/// How the removal set for one test prediction is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selector {
    GrK(usize),
    GrAll,
    GrOK(usize),
    /// `k` random adjacent triples.
    NhK(usize),
    /// As many random adjacent triples as GR-ALL selects for the same prediction.
    NhAll,
    /// Nothing; a retrain must reproduce the main model.
    Empty,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::GrK(k) => write!(f, "gr-{k}"),
            Selector::GrAll => f.write_str("gr-all"),
            Selector::GrOK(k) => write!(f, "gr-o-{k}"),
            Selector::NhK(k) => write!(f, "nh-{k}"),
            Selector::NhAll => f.write_str("nh-all"),
            Selector::Empty => f.write_str("empty"),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "empty" {
            return Ok(Selector::Empty);
        }
        if lower == "nh-all" {
            return Ok(Selector::NhAll);
        }
        if let Some(k) = lower.strip_prefix("nh-") {
            return k
                .parse()
                .map(Selector::NhK)
                .map_err(|_| Error::InvalidArgument(format!("unknown selector `{s}`")));
        }
        Ok(match lower.parse::<ExplainMode>()? {
            ExplainMode::TopK(k) => Selector::GrK(k),
            ExplainMode::All => Selector::GrAll,
            ExplainMode::SameObject(k) => Selector::GrOK(k),
        })
    }
}

/// Main model trained with a ledger, plus what is needed to retrain it.
pub struct MainModel {
    pub config: TrainConfig,
    pub store: TripleStore,
    pub index: AdjacencyIndex,
    pub params: Parameters,
    pub ledger: InfluenceLedger,
    pub hash: Fingerprint,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl MainModel {
    pub fn train(config: &TrainConfig, store: &TripleStore, num_entities: usize, num_relations: usize) -> Result<Self> {
        Self::train_observed(config, store, num_entities, num_relations, &mut ())
    }

    pub fn train_observed(
        config: &TrainConfig,
        store: &TripleStore,
        num_entities: usize,
        num_relations: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<Self> {
        let hash = run_fingerprint(config, store, num_entities, num_relations);
        let mut ledger = InfluenceLedger::new(config.dim, store.id_bound(), hash);
        let outcome = train(config, store, num_entities, num_relations, &mut (&mut ledger, observer))?;
        Ok(MainModel {
            config: config.clone(),
            store: store.clone(),
            index: AdjacencyIndex::build(store, num_entities, num_relations),
            params: outcome.params,
            ledger,
            hash,
            num_entities,
            num_relations,
        })
    }

    /// Reassembles a main model from saved artifacts.
    pub fn from_parts(
        config: TrainConfig,
        store: TripleStore,
        params: Parameters,
        ledger: InfluenceLedger,
    ) -> Result<Self> {
        let (num_entities, num_relations) = (params.num_entities(), params.num_relations());
        let hash = run_fingerprint(&config, &store, num_entities, num_relations);
        if ledger.hash() != hash {
            return Err(Error::Mismatch(format!(
                "ledger belongs to run {}, configuration and data give {hash}",
                ledger.hash()
            )));
        }
        Ok(MainModel {
            index: AdjacencyIndex::build(&store, num_entities, num_relations),
            config,
            store,
            params,
            ledger,
            hash,
            num_entities,
            num_relations,
        })
    }

    pub fn explainer(&self) -> Result<Explainer<'_>> {
        Explainer::new(
            &self.params,
            self.config.scoring,
            self.hash,
            &self.ledger,
            &self.store,
            &self.index,
        )
    }

    /// Retrains from scratch on the store without `removed`, tracking off.
    pub fn retrain_without(&self, removed: &[TripleId]) -> Result<Parameters> {
        let reduced = self.store.remove_triples(removed)?;
        let config = TrainConfig {
            track_post_projection: false,
            ..self.config.clone()
        };
        Ok(train(&config, &reduced, self.num_entities, self.num_relations, &mut ())?.params)
    }

    pub fn probability<V: EmbeddingView + ?Sized>(&self, view: &V, d: &Triple) -> Result<f64> {
        object_probability(view, self.config.scoring, d.s, d.r, d.o)
    }

    pub fn top1<V: EmbeddingView + ?Sized>(&self, view: &V, s: EntityId, r: usize) -> Result<EntityId> {
        predict_top(view, self.config.scoring, s, r, &BTreeSet::new())
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

/// Uniform sample of `n` test triples (all of them if `n` is at least the
/// store size), in id order.
pub fn sample_tests(test: &TripleStore, n: usize, seed: u64) -> Vec<(TripleId, Triple)> {
    let all: Vec<(TripleId, Triple)> = test.iter().collect();
    if n >= all.len() {
        return all;
    }
    keyed_sample(&RngPolicy::new(seed), &[TAG_TESTS], all.len(), n)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// `size` random triples adjacent to `d`, deterministic in `(seed, key)`.
pub fn nh_select(
    index: &AdjacencyIndex,
    store: &TripleStore,
    d: &Triple,
    size: usize,
    seed: u64,
    key: u64,
) -> Vec<TripleId> {
    let adjacent = index.adjacent(d, store, false);
    keyed_sample(&RngPolicy::new(seed), &[TAG_NH, key], adjacent.len(), size)
        .into_iter()
        .map(|i| adjacent[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarRecord {
    pub test_id: TripleId,
    /// The explained prediction `(s, r, top-1)`.
    pub target: Triple,
    pub selector: String,
    pub removed: Vec<TripleId>,
    pub pr_before: f64,
    pub pr_after: Option<f64>,
    pub top1_before: EntityId,
    pub top1_after: Option<EntityId>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoarAggregates {
    /// Percent of evaluated records whose probability dropped.
    pub pd: f64,
    /// Percent of evaluated records whose top-1 prediction changed.
    pub tc: f64,
    pub evaluated: usize,
    pub diverged: usize,
    pub mean_removed: f64,
}

impl RoarAggregates {
    pub fn from_records(records: &[RoarRecord]) -> Self {
        let ok: Vec<&RoarRecord> = records.iter().filter(|r| !r.diverged).collect();
        let n = ok.len();
        let pct = |count: usize| if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 };
        let dropped = ok
            .iter()
            .filter(|r| r.pr_after.is_some_and(|p| p < r.pr_before))
            .count();
        let changed = ok
            .iter()
            .filter(|r| r.top1_after.is_some_and(|t| t != r.top1_before))
            .count();
        let mean_removed = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.removed.len()).sum::<usize>() as f64 / records.len() as f64
        };
        RoarAggregates {
            pd: pct(dropped),
            tc: pct(changed),
            evaluated: n,
            diverged: records.len() - n,
            mean_removed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarReport {
    pub selector: String,
    pub config_hash: Fingerprint,
    pub records: Vec<RoarRecord>,
    pub aggregates: RoarAggregates,
}

const ROAR_COLUMNS: [&str; 12] = [
    "test_id",
    "s",
    "r",
    "o",
    "selector",
    "removed",
    "pr_before",
    "pr_after",
    "top1_before",
    "top1_after",
    "diverged",
    "removed_ids",
];

impl RoarReport {
    pub fn new(selector: String, config_hash: Fingerprint, records: Vec<RoarRecord>) -> Self {
        let aggregates = RoarAggregates::from_records(&records);
        RoarReport {
            selector,
            config_hash,
            records,
            aggregates,
        }
    }

    /// One row per record; non-empty reports end with a `#` aggregate line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(ROAR_COLUMNS)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            let ids: Vec<String> = r.removed.iter().map(|id| id.0.to_string()).collect();
            w.write_record([
                r.test_id.0.to_string(),
                r.target.s.to_string(),
                r.target.r.to_string(),
                r.target.o.to_string(),
                r.selector.clone(),
                r.removed.len().to_string(),
                r.pr_before.to_string(),
                opt(r.pr_after.map(|p| p.to_string())),
                r.top1_before.to_string(),
                opt(r.top1_after.map(|t| t.to_string())),
                r.diverged.to_string(),
                ids.join(" "),
            ])?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        if !self.records.is_empty() {
            let a = &self.aggregates;
            writeln!(
                inner,
                "# pd={} tc={} evaluated={} diverged={} mean_removed={}",
                a.pd, a.tc, a.evaluated, a.diverged, a.mean_removed
            )
            .map_err(|e| Error::io(path, e))?;
        }
        inner.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One removal manifest per retrain, named `<test-id>-<selector>.json`.
    pub fn write_manifests(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &self.records {
            let manifest = RemovalManifest {
                config_hash: self.config_hash.to_string(),
                removed: r.removed.clone(),
            };
            manifest.save(&dir.join(format!("{}-{}.json", r.test_id.0, r.selector)))?;
        }
        Ok(())
    }
}

/// Reads the records back from a CSV written by [`RoarReport::write_csv`].
pub fn read_roar_csv(path: &Path) -> Result<Vec<RoarRecord>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<usize> { field(i).parse().map_err(|e| bad(format!("column {i}: {e}"))) };
        let float = |i: usize| -> Result<f64> { field(i).parse().map_err(|e| bad(format!("column {i}: {e}"))) };
        out.push(RoarRecord {
            test_id: TripleId(num(0)?),
            target: Triple::new(num(1)?, num(2)?, num(3)?),
            selector: field(4).to_owned(),
            removed: field(11)
                .split_whitespace()
                .map(|x| x.parse().map(TripleId).map_err(|e| bad(format!("removed ids: {e}"))))
                .collect::<Result<_>>()?,
            pr_before: float(6)?,
            pr_after: if field(7).is_empty() { None } else { Some(float(7)?) },
            top1_before: num(8)?,
            top1_after: if field(9).is_empty() { None } else { Some(num(9)?) },
            diverged: field(10) == "true",
        });
    }
    Ok(out)
}

struct Planned {
    test_id: TripleId,
    target: Triple,
    removed: Vec<TripleId>,
    pr_before: f64,
}

/// Removal sets for each test query under `selector`.
fn plan(main: &MainModel, tests: &[(TripleId, Triple)], selector: Selector) -> Result<Vec<Planned>> {
    let explainer = main.explainer()?;
    tests
        .iter()
        .map(|&(test_id, t)| {
            let target = explainer.predict(t.s, t.r)?;
            let pr_before = explainer.base_probability(&target)?;
            let removed = match selector {
                Selector::GrK(k) => explainer.explain(&target, ExplainMode::TopK(k))?.selected,
                Selector::GrAll => explainer.explain(&target, ExplainMode::All)?.selected,
                Selector::GrOK(k) => explainer.explain(&target, ExplainMode::SameObject(k))?.selected,
                Selector::NhK(k) => nh_select(&main.index, &main.store, &target, k, main.config.seed, test_id.0 as u64),
                Selector::NhAll => {
                    let size = explainer.explain(&target, ExplainMode::All)?.selected.len();
                    nh_select(&main.index, &main.store, &target, size, main.config.seed, test_id.0 as u64)
                }
                Selector::Empty => Vec::new(),
            };
            Ok(Planned {
                test_id,
                target,
                removed,
                pr_before,
            })
        })
        .collect()
}

/// Remove-and-retrain over `tests`, one retrain per test query, run on
/// `workers` threads.
pub fn roar(main: &MainModel, tests: &[(TripleId, Triple)], selector: Selector, workers: usize) -> Result<RoarReport> {
    let planned = plan(main, tests, selector)?;
    let name = selector.to_string();
    let mut records: Vec<RoarRecord> = pool(workers)?.install(|| {
        planned
            .par_iter()
            .map(|p| {
                let mut record = RoarRecord {
                    test_id: p.test_id,
                    target: p.target,
                    selector: name.clone(),
                    removed: p.removed.clone(),
                    pr_before: p.pr_before,
                    pr_after: None,
                    top1_before: p.target.o,
                    top1_after: None,
                    diverged: false,
                };
                match main.retrain_without(&p.removed) {
                    Ok(params) => {
                        record.pr_after = Some(main.probability(&params, &p.target)?);
                        record.top1_after = Some(main.top1(&params, p.target.s, p.target.r)?);
                    }
                    Err(Error::Diverged { step, .. }) => {
                        log::warn!("retrain for test {} diverged at step {step}", p.test_id);
                        record.diverged = true;
                    }
                    Err(e) => return Err(e),
                }
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by_key(|r| r.test_id);
    Ok(RoarReport::new(name, main.hash, records))
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub test_id: TripleId,
    pub target: Triple,
    /// The GR-1 pick that was removed.
    pub removed: TripleId,
    pub pr_main: f64,
    /// `Pr(w - gamma)`, the rollback estimate.
    pub estimate: f64,
    pub retrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub config_hash: Fingerprint,
    pub points: Vec<CorrelationPoint>,
    pub pearson: Option<f64>,
    /// Predictions without any adjacent training triple.
    pub skipped: usize,
    pub diverged: usize,
}

impl CorrelationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["test_id", "s", "r", "o", "removed", "pr_main", "estimate", "retrained"])?;
        for p in &self.points {
            w.write_record([
                p.test_id.0.to_string(),
                p.target.s.to_string(),
                p.target.r.to_string(),
                p.target.o.to_string(),
                p.removed.0.to_string(),
                p.pr_main.to_string(),
                p.estimate.to_string(),
                p.retrained.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pairs the rollback estimate for each prediction's top influence with the
/// probability after actually retraining without it.
pub fn approximation_correlation(
    main: &MainModel,
    tests: &[(TripleId, Triple)],
    workers: usize,
) -> Result<CorrelationReport> {
    let explainer = main.explainer()?;
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for &(test_id, t) in tests {
        let target = explainer.predict(t.s, t.r)?;
        let e = explainer.explain(&target, ExplainMode::TopK(1))?;
        let Some(&removed) = e.selected.first() else {
            skipped += 1;
            continue;
        };
        let slice = main.ledger.lookup(removed, &target, &main.store)?;
        let estimate = main.probability(&rollback(&main.params, &slice, &target)?, &target)?;
        jobs.push((test_id, target, removed, e.base_prob, estimate));
    }
    let results: Vec<Option<CorrelationPoint>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(test_id, target, removed, pr_main, estimate)| match main.retrain_without(&[removed]) {
                Ok(params) => Ok(Some(CorrelationPoint {
                    test_id,
                    target,
                    removed,
                    pr_main,
                    estimate,
                    retrained: main.probability(&params, &target)?,
                })),
                Err(Error::Diverged { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()
    })?;
    let diverged = results.iter().filter(|r| r.is_none()).count();
    let mut points: Vec<CorrelationPoint> = results.into_iter().flatten().collect();
    points.sort_by_key(|p| p.test_id);
    let xs: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.retrained).collect();
    Ok(CorrelationReport {
        config_hash: main.hash,
        pearson: pearson(&xs, &ys),
        points,
        skipped,
        diverged,
    })
}

/// Empirical inputs to the non-convex stability bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityInputs {
    /// `L`: largest observed per-example loss-gradient norm.
    pub lipschitz: f64,
    /// `beta`: largest observed gradient change per unit parameter change.
    pub smoothness: f64,
    /// `C`: largest row norm seen in any snapshot.
    pub max_norm: f64,
    /// `c`: the initial step size.
    pub lr0: f64,
    /// `T`: total steps.
    pub steps: u64,
    /// `n`: training-set size.
    pub n: usize,
}

/// `(1 + 1/(beta c)) / (n - 1) * (c L^2)^(1/(beta c + 1)) * T^(beta c / (beta c + 1))`
pub fn stability_bound(i: &StabilityInputs) -> Result<f64> {
    if i.n < 2 {
        return Err(Error::InvalidArgument(format!("stability bound needs n >= 2, got {}", i.n)));
    }
    for (name, v) in [("L", i.lipschitz), ("beta", i.smoothness), ("c", i.lr0)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    if i.steps == 0 {
        return Err(Error::InvalidArgument("T must be positive".into()));
    }
    let bc = i.smoothness * i.lr0;
    Ok((1.0 + 1.0 / bc) / (i.n - 1) as f64
        * (i.lr0 * i.lipschitz * i.lipschitz).powf(1.0 / (bc + 1.0))
        * (i.steps as f64).powf(bc / (bc + 1.0)))
}

/// Keeps a copy of the parameters every `every` steps (and the last step).
pub struct SnapshotRecorder {
    every: u64,
    total: u64,
    pub snapshots: Vec<Parameters>,
}

impl SnapshotRecorder {
    pub fn new(initial: Parameters, every: u64, total: u64) -> Self {
        SnapshotRecorder {
            every: every.max(1),
            total,
            snapshots: vec![initial],
        }
    }
}

impl TrainObserver for SnapshotRecorder {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        let t = step.record.step;
        if t % self.every == 0 || t == self.total {
            self.snapshots.push(step.params.clone());
        }
        Ok(())
    }
}

fn touched_distance(u: &Parameters, v: &Parameters, rows: &[RowRef]) -> f64 {
    rows.iter()
        .flat_map(|&row| u.row(row).iter().zip(v.row(row)))
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Estimates `L`, `beta` and `C` from parameter snapshots of a run of
/// `config` over `store`, probing up to `probes` training examples with
/// their first-epoch negatives. `beta` compares snapshot pairs over the rows
/// each probe touches; all values are lower bounds of the true suprema.
pub fn estimate_constants(
    config: &TrainConfig,
    store: &TripleStore,
    snapshots: &[Parameters],
    probes: usize,
) -> Result<StabilityInputs> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidArgument(
            "smoothness needs at least two parameter snapshots".into(),
        ));
    }
    let policy = RngPolicy::new(config.seed);
    let all: Vec<(TripleId, Triple)> = store.iter().collect();
    let chosen = keyed_sample(&policy, &[TAG_PROBES], all.len(), probes);
    let max_norm = snapshots.iter().map(Parameters::max_row_norm).fold(0.0, f64::max);
    let ne = snapshots[0].num_entities();

    let per_probe: Vec<(f64, f64)> = chosen
        .par_iter()
        .map(|&i| {
            let (id, d) = all[i];
            let negatives = policy.negatives(id, &d, 0, config.num_negatives, ne)?;
            let grads = snapshots
                .iter()
                .map(|p| Ok(model::loss_and_grad(p, config.scoring, config.loss, &d, &negatives)?.1))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<RowRef> = grads[0].iter().map(|(row, _)| row).collect();
            let lipschitz = grads.iter().map(|g| g.norm()).fold(0.0, f64::max);
            let mut smoothness: f64 = 0.0;
            for a in 0..snapshots.len() {
                for b in a + 1..snapshots.len() {
                    let dist = touched_distance(&snapshots[a], &snapshots[b], &rows);
                    if dist > 0.0 {
                        smoothness = smoothness.max(grads[a].distance(&grads[b]) / dist);
                    }
                }
            }
            Ok((lipschitz, smoothness))
        })
        .collect::<Result<_>>()?;

    Ok(StabilityInputs {
        lipschitz: per_probe.iter().map(|p| p.0).fold(0.0, f64::max),
        smoothness: per_probe.iter().map(|p| p.1).fold(0.0, f64::max),
        max_norm,
        lr0: config.lr0,
        steps: (config.epochs * store.len()) as u64,
        n: store.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremTrial {
    pub removed: TripleId,
    pub target: Triple,
    pub pr_main: f64,
    pub pr_rollback: f64,
    pub pr_retrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub inputs: StabilityInputs,
    pub bound: f64,
    /// Mean `|Pr(w - gamma) - Pr(w')|`.
    pub mean_rollback_error: f64,
    /// Mean `|Pr(w) - Pr(w')|`, the error of not rolling back at all.
    pub mean_main_error: f64,
    pub holds: bool,
    pub trials: Vec<TheoremTrial>,
    pub caveat: String,
}

/// Compares rollback estimates against true retrains on random adjacent
/// pairs, and the mean error against the stability bound. Requires SGD with
/// an inverse-t schedule.
pub fn verify_approximation_theorem(
    config: &TrainConfig,
    store: &TripleStore,
    num_entities: usize,
    num_relations: usize,
    trials: usize,
    workers: usize,
) -> Result<TheoremReport> {
    if config.optimizer != OptimizerKind::Sgd || config.lr_schedule != LrSchedule::InverseT {
        return Err(Error::Config(
            "the stability check needs optimizer sgd with the inverse_t schedule".into(),
        ));
    }
    if store.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "the stability bound needs at least 2 training triples, got {}",
            store.len()
        )));
    }
    let total = (config.epochs * store.len()) as u64;
    let init = crate::trainer::init_params(config, num_entities, num_relations)?;
    let mut snapshots = SnapshotRecorder::new(init, (total / 20).max(1), total);
    let main = MainModel::train_observed(config, store, num_entities, num_relations, &mut snapshots)?;
    let inputs = estimate_constants(config, store, &snapshots.snapshots, 50)?;
    let bound = stability_bound(&inputs)?;

    let all: Vec<(TripleId, Triple)> = store.iter().collect();
    let mut rng = RngPolicy::new(config.seed).stream(&[TAG_TRIALS]);
    let mut pairs = Vec::with_capacity(trials);
    let mut attempts = 0;
    while pairs.len() < trials && attempts < trials * 100 {
        attempts += 1;
        let (dp_id, dp) = all[rng.random_range(0..all.len())];
        let neighbours = main.index.adjacent(&dp, store, false);
        if neighbours.is_empty() {
            continue;
        }
        let target_id = neighbours[rng.random_range(0..neighbours.len())];
        pairs.push((dp_id, store.get(target_id).expect("adjacent id")));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training triple has an adjacent triple".into()));
    }

    let results: Vec<TheoremTrial> = pool(workers)?.install(|| {
        pairs
            .par_iter()
            .map(|&(dp_id, d)| {
                let slice = main.ledger.lookup(dp_id, &d, store)?;
                let view = rollback(&main.params, &slice, &d)?;
                let retrained = main.retrain_without(&[dp_id])?;
                Ok(TheoremTrial {
                    removed: dp_id,
                    target: d,
                    pr_main: main.probability(&main.params, &d)?,
                    pr_rollback: main.probability(&view, &d)?,
                    pr_retrained: main.probability(&retrained, &d)?,
                })
            })
            .collect::<Result<_>>()
    })?;
    let n = results.len() as f64;
    let mean_rollback_error = results.iter().map(|t| (t.pr_rollback - t.pr_retrained).abs()).sum::<f64>() / n;
    let mean_main_error = results.iter().map(|t| (t.pr_main - t.pr_retrained).abs()).sum::<f64>() / n;
    Ok(TheoremReport {
        inputs,
        bound,
        mean_rollback_error,
        mean_main_error,
        holds: mean_rollback_error < bound,
        trials: results,
        caveat: "L, beta and C are empirical lower bounds of the true constants; \
                 the comparison is evidence, not a proof"
            .into(),
    })
}

/// `n` distinct random triples over the given vocabulary sizes.
pub fn synthetic_store(num_entities: usize, num_relations: usize, n: usize, seed: u64) -> Result<TripleStore> {
    if n > num_entities * num_entities * num_relations {
        return Err(Error::InvalidArgument(format!("cannot draw {n} distinct triples")));
    }
    let mut rng = RngPolicy::new(seed).stream(&[0x5359_4e54]);
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(n);
    while triples.len() < n {
        let t = Triple::new(
            rng.random_range(0..num_entities),
            rng.random_range(0..num_relations),
            rng.random_range(0..num_entities),
        );
        if seen.insert(t) {
            triples.push(t);
        }
    }
    Ok(TripleStore::new(Split::Train, triples))
}
