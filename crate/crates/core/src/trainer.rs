//! Deterministic single-example training with SGD or Adam.
//!
//! All randomness is derived from keyed hashes of the master seed (see
//! [`RngPolicy`]), so removing triples from the store changes nothing about
//! how the surviving triples are visited or which negatives they see.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{EntityId, Triple, TripleId, TripleStore};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::model::{self, l2, LossKind, Parameters, RowRef, ScoringKind, SparseGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `alpha_t = lr0 / t`, t counted from 1.
    InverseT,
    /// Linear decay from `lr0` towards zero over all `epochs * |store|` steps.
    Linear,
}

impl LrSchedule {
    /// Step size for 1-based step `t` out of `total`.
    pub fn rate(self, lr0: f64, t: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr0,
            LrSchedule::InverseT => lr0 / t as f64,
            LrSchedule::Linear => lr0 * (1.0 - (t - 1) as f64 / total.max(1) as f64),
        }
    }
}

/// Row-norm constraint applied after every update.
///
/// Serialized as `"none"`, `"unit"` or `"max:<C>"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormConstraint {
    None,
    Unit,
    Max(f64),
}

impl NormConstraint {
    /// Bound `C` on row norms, if any.
    pub fn bound(self) -> Option<f64> {
        match self {
            NormConstraint::None => None,
            NormConstraint::Unit => Some(1.0),
            NormConstraint::Max(c) => Some(c),
        }
    }

    fn project(self, row: &mut [f32]) {
        let norm = l2(row.iter().map(|&x| x as f64));
        let target = match self {
            NormConstraint::None => return,
            NormConstraint::Unit if norm > 0.0 => 1.0,
            NormConstraint::Max(c) if norm > c => c,
            _ => return,
        };
        let scale = target / norm;
        for x in row {
            *x = (*x as f64 * scale) as f32;
        }
    }
}

impl fmt::Display for NormConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormConstraint::None => f.write_str("none"),
            NormConstraint::Unit => f.write_str("unit"),
            NormConstraint::Max(c) => write!(f, "max:{c}"),
        }
    }
}

impl FromStr for NormConstraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormConstraint::None),
            "unit" => Ok(NormConstraint::Unit),
            _ => {
                let c = s
                    .strip_prefix("max:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("bad norm constraint `{s}` (none, unit, max:<C>)")))?;
                Ok(NormConstraint::Max(c))
            }
        }
    }
}

impl Serialize for NormConstraint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NormConstraint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Uniform on `[-scale, scale]`.
    Uniform,
    /// Normal with standard deviation `scale`.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub num_negatives: usize,
    pub loss: LossKind,
    pub scoring: ScoringKind,
    pub dim: usize,
    pub norm_constraint: NormConstraint,
    pub init: InitKind,
    pub init_scale: f64,
    /// Record ledger deltas after the norm projection instead of before.
    pub track_post_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr0: 1e-3,
            lr_schedule: LrSchedule::Linear,
            num_negatives: 13,
            loss: LossKind::Softmax,
            scoring: ScoringKind::DistMult,
            dim: 10,
            norm_constraint: NormConstraint::None,
            init: InitKind::Normal,
            init_scale: 1.0,
            track_post_projection: false,
        }
    }
}

impl TrainConfig {
    /// All validation problems, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            out.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if let Err(e) = self.scoring.check_dim(self.dim) {
            out.push(e.to_string());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            out.push(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if let NormConstraint::Max(c) = self.norm_constraint {
            if !(c > 0.0 && c.is_finite()) {
                out.push(format!("max-norm bound must be positive, got {c}"));
            }
        }
        if self.optimizer == OptimizerKind::Adam {
            for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
                if !(0.0..1.0).contains(&b) {
                    out.push(format!("{name} must be in [0, 1), got {b}"));
                }
            }
            if !(self.adam_eps > 0.0) {
                out.push(format!("adam_eps must be positive, got {}", self.adam_eps));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Named starting configurations: `nations`, `fb15k-237`, `movielens`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig {
            init: InitKind::Uniform,
            init_scale: 0.05,
            ..TrainConfig::default()
        };
        match name {
            "nations" => Ok(base),
            "fb15k-237" => Ok(TrainConfig {
                dim: 100,
                num_negatives: 500,
                epochs: 1,
                ..base
            }),
            "movielens" => Ok(TrainConfig {
                dim: 200,
                num_negatives: 500,
                epochs: 1,
                ..base
            }),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (nations, fb15k-237, movielens)"
            ))),
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of_json(self)
    }
}

/// Hash of everything that determines a training run's output.
pub fn run_fingerprint(
    config: &TrainConfig,
    store: &TripleStore,
    num_entities: usize,
    num_relations: usize,
) -> Fingerprint {
    let mut bytes = serde_json::to_vec(config).expect("config serializes");
    bytes.extend_from_slice(&(num_entities as u64).to_le_bytes());
    bytes.extend_from_slice(&(num_relations as u64).to_le_bytes());
    for (id, t) in store.iter() {
        for x in [id.0, t.s, t.r, t.o] {
            bytes.extend_from_slice(&(x as u64).to_le_bytes());
        }
    }
    Fingerprint::of_bytes(&bytes)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |h, &p| splitmix64(h ^ splitmix64(p)))
}

const DOMAIN_INIT: u64 = 1;
const DOMAIN_NEGATIVES: u64 = 2;
const DOMAIN_ORDER: u64 = 3;

/// Keyed derivation of every random choice made during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngPolicy {
    pub seed: u64,
}

impl RngPolicy {
    pub fn new(seed: u64) -> Self {
        RngPolicy { seed }
    }

    fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(key(&[DOMAIN_INIT, self.seed]))
    }

    /// Visit order for `epoch`: ids sorted by a keyed hash, so the order of
    /// any subset is the subsequence of the full order.
    pub fn visit_order(&self, epoch: usize, ids: &[TripleId]) -> Vec<TripleId> {
        let mut keyed: Vec<(u64, TripleId)> = ids
            .iter()
            .map(|&id| (key(&[DOMAIN_ORDER, self.seed, epoch as u64, id.0 as u64]), id))
            .collect();
        keyed.sort_unstable();
        keyed.into_iter().map(|(_, id)| id).collect()
    }

    /// `k` distinct entities other than `d.o`, uniform without replacement,
    /// determined by `(seed, id, epoch)` alone.
    pub fn negatives(
        &self,
        id: TripleId,
        d: &Triple,
        epoch: usize,
        k: usize,
        num_entities: usize,
    ) -> Result<Vec<EntityId>> {
        if k >= num_entities {
            return Err(Error::InvalidArgument(format!(
                "{k} negatives requested but only {} entities besides the gold object",
                num_entities.saturating_sub(1)
            )));
        }
        if d.o >= num_entities {
            return Err(Error::InvalidArgument(format!("object {} out of range", d.o)));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(key(&[DOMAIN_NEGATIVES, self.seed, id.0 as u64, epoch as u64]));
        Ok(index::sample(&mut rng, num_entities - 1, k)
            .into_iter()
            .map(|i| if i >= d.o { i + 1 } else { i })
            .collect())
    }

    /// Auxiliary generator for callers that need extra keyed streams.
    pub fn stream(&self, tag: &[u64]) -> ChaCha8Rng {
        let mut parts = vec![self.seed];
        parts.extend_from_slice(tag);
        ChaCha8Rng::seed_from_u64(key(&parts))
    }
}

pub fn sample_negatives(
    policy: &RngPolicy,
    id: TripleId,
    d: &Triple,
    epoch: usize,
    k: usize,
    num_entities: usize,
) -> Result<Vec<EntityId>> {
    policy.negatives(id, d, epoch, k, num_entities)
}

/// Deterministic initial parameters; the norm constraint is applied to every row.
pub fn init_params(config: &TrainConfig, num_entities: usize, num_relations: usize) -> Result<Parameters> {
    config.scoring.check_dim(config.dim)?;
    let mut params = Parameters::zeros(num_entities, num_relations, config.dim);
    let mut rng = RngPolicy::new(config.seed).init_rng();
    let scale = config.init_scale;
    let fill = |values: &mut [f32], rng: &mut ChaCha8Rng| -> Result<()> {
        match config.init {
            InitKind::Uniform => {
                let dist = Uniform::new_inclusive(-scale, scale)
                    .map_err(|e| Error::Config(format!("init: {e}")))?;
                values.iter_mut().for_each(|x| *x = dist.sample(rng) as f32);
            }
            InitKind::Normal => {
                let dist = Normal::new(0.0, scale).map_err(|e| Error::Config(format!("init: {e}")))?;
                values.iter_mut().for_each(|x| *x = dist.sample(rng) as f32);
            }
        }
        Ok(())
    };
    fill(params.entity_matrix_mut(), &mut rng)?;
    fill(params.relation_matrix_mut(), &mut rng)?;
    apply_norm_constraint(&mut params, config.norm_constraint);
    Ok(params)
}

pub fn apply_norm_constraint(params: &mut Parameters, constraint: NormConstraint) {
    let rows: Vec<RowRef> = params.rows().collect();
    for row in rows {
        constraint.project(params.row_mut(row));
    }
}

/// Change of the gold triple's rows during one step.
///
/// When `s == o` the entity row's whole change is reported in `s` and `o` is
/// zero, so the row is never counted twice.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub triple: TripleId,
    pub step: u64,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub o: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GoldRows<'a>(&'a Triple);

impl GoldRows<'_> {
    fn snapshot(&self, params: &Parameters) -> [Vec<f32>; 3] {
        let d = self.0;
        [
            params.entity(d.s).to_vec(),
            params.relation(d.r).to_vec(),
            params.entity(d.o).to_vec(),
        ]
    }

    fn delta(&self, id: TripleId, step: u64, before: &[Vec<f32>; 3], params: &Parameters) -> UpdateDelta {
        let d = self.0;
        let diff = |old: &[f32], new: &[f32]| -> Vec<f64> {
            old.iter().zip(new).map(|(&a, &b)| b as f64 - a as f64).collect()
        };
        let s = diff(&before[0], params.entity(d.s));
        let r = diff(&before[1], params.relation(d.r));
        let o = if d.o == d.s {
            vec![0.0; s.len()]
        } else {
            diff(&before[2], params.entity(d.o))
        };
        UpdateDelta {
            triple: id,
            step,
            s,
            r,
            o,
        }
    }
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub triple_id: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Everything an observer sees after one training step.
pub struct Step<'a> {
    pub record: StepRecord,
    pub negatives: &'a [EntityId],
    /// Change of the gold triple's rows.
    pub delta: &'a UpdateDelta,
    /// Parameters after the step, projection included.
    pub params: &'a Parameters,
}

/// Hook invoked by [`train`] after every step.
pub trait TrainObserver {
    fn on_step(&mut self, _step: &Step<'_>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl<A: TrainObserver, B: TrainObserver> TrainObserver for (A, B) {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        self.0.on_step(step)?;
        self.1.on_step(step)
    }
}

impl<T: TrainObserver + ?Sized> TrainObserver for &mut T {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        (**self).on_step(step)
    }
}

/// Collects the step log in memory.
#[derive(Debug, Default)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
}

impl TrainObserver for StepLog {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        self.records.push(step.record);
        Ok(())
    }
}

impl StepLog {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(StepLog { records })
    }
}

/// Plain SGD on every row of `grad`.
pub fn sgd_update(params: &mut Parameters, grad: &SparseGrad, lr: f64) {
    for (row, g) in grad.iter() {
        for (w, &gi) in params.row_mut(row).iter_mut().zip(g) {
            *w = (*w as f64 - lr * gi) as f32;
        }
    }
}

/// Lazily allocated Adam moments with a step counter per row.
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    dim: usize,
    num_entities: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &Parameters, beta1: f64, beta2: f64, eps: f64) -> Self {
        use crate::model::EmbeddingView;
        let rows = params.num_entities() + params.num_relations();
        AdamState {
            beta1,
            beta2,
            eps,
            dim: params.dim(),
            num_entities: params.num_entities(),
            m: vec![0.0; rows * params.dim()],
            v: vec![0.0; rows * params.dim()],
            steps: vec![0; rows],
        }
    }

    fn slot(&self, row: RowRef) -> usize {
        match row {
            RowRef::Entity(e) => e,
            RowRef::Relation(r) => self.num_entities + r,
        }
    }

    /// Number of updates row `row` has received.
    pub fn row_steps(&self, row: RowRef) -> u64 {
        self.steps[self.slot(row)]
    }
}

pub fn adam_update(params: &mut Parameters, state: &mut AdamState, grad: &SparseGrad, lr: f64) {
    let dim = state.dim;
    for (row, g) in grad.iter() {
        let slot = state.slot(row);
        if state.steps[slot] == 0 && g.iter().all(|&x| x == 0.0) {
            continue;
        }
        state.steps[slot] += 1;
        let t = state.steps[slot] as i32;
        let bc1 = 1.0 - state.beta1.powi(t);
        let bc2 = 1.0 - state.beta2.powi(t);
        let m = &mut state.m[slot * dim..(slot + 1) * dim];
        let v = &mut state.v[slot * dim..(slot + 1) * dim];
        for (i, w) in params.row_mut(row).iter_mut().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let step = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + state.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub steps: u64,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
}

/// Trains from `init_params(config)` over `store`.
pub fn train(
    config: &TrainConfig,
    store: &TripleStore,
    num_entities: usize,
    num_relations: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let params = init_params(config, num_entities, num_relations)?;
    train_from(config, store, params, config.epochs, observer)
}

/// Runs `epochs` epochs starting from `params`. `epochs` may be zero.
pub fn train_from(
    config: &TrainConfig,
    store: &TripleStore,
    mut params: Parameters,
    epochs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    use crate::model::EmbeddingView;
    if store.is_empty() && epochs > 0 {
        return Err(Error::InvalidArgument("cannot train on an empty store".into()));
    }
    for (id, t) in store.iter() {
        if t.s >= params.num_entities() || t.o >= params.num_entities() || t.r >= params.num_relations() {
            return Err(Error::InvalidArgument(format!("triple {id} {t:?} out of vocabulary range")));
        }
    }
    let policy = RngPolicy::new(config.seed);
    let total = (epochs * store.len()) as u64;
    let mut adam = match config.optimizer {
        OptimizerKind::Adam => Some(AdamState::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps)),
        OptimizerKind::Sgd => None,
    };
    let ids: Vec<TripleId> = store.ids().collect();
    let mut step = 0u64;
    let mut final_loss = 0.0;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for id in policy.visit_order(epoch, &ids) {
            step += 1;
            let d = store.get(id).expect("id from store");
            let lr = config.lr_schedule.rate(config.lr0, step, total);
            let negatives = policy.negatives(id, &d, epoch, config.num_negatives, params.num_entities())?;
            let (loss, grad) = model::loss_and_grad(&params, config.scoring, config.loss, &d, &negatives)?;
            if !loss.is_finite() || !grad.norm().is_finite() {
                return Err(Error::Diverged {
                    step,
                    epoch,
                    triple: id,
                    loss,
                    lr,
                });
            }
            let gold = GoldRows(&d);
            let before = gold.snapshot(&params);
            match adam.as_mut() {
                Some(state) => adam_update(&mut params, state, &grad, lr),
                None => sgd_update(&mut params, &grad, lr),
            }
            let mut delta = None;
            if !config.track_post_projection {
                delta = Some(gold.delta(id, step, &before, &params));
            }
            if config.norm_constraint != NormConstraint::None {
                for (row, _) in grad.iter() {
                    config.norm_constraint.project(params.row_mut(row));
                }
            }
            let delta = delta.unwrap_or_else(|| gold.delta(id, step, &before, &params));
            let record = StepRecord {
                step,
                epoch,
                triple_id: id.0,
                loss,
                lr,
            };
            observer.on_step(&Step {
                record,
                negatives: &negatives,
                delta: &delta,
                params: &params,
            })?;
            epoch_loss += loss;
        }
        final_loss = epoch_loss / store.len() as f64;
        log::debug!("epoch {epoch}: mean loss {final_loss:.5}");
    }
    Ok(TrainOutcome {
        params,
        steps: step,
        final_loss,
    })
}

/// Draws `k` distinct items from `0..n` with a keyed stream (used by baselines).
pub fn keyed_sample(policy: &RngPolicy, tag: &[u64], n: usize, k: usize) -> Vec<usize> {
    let mut rng = policy.stream(tag);
    let k = k.min(n);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use approx::assert_abs_diff_eq;

    fn sgd_config() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr_schedule: LrSchedule::Constant,
            lr0: 0.1,
            num_negatives: 2,
            dim: 4,
            init_scale: 0.5,
            ..TrainConfig::default()
        }
    }

    fn store(triples: &[(usize, usize, usize)]) -> TripleStore {
        TripleStore::new(
            Split::Train,
            triples.iter().map(|&(s, r, o)| Triple::new(s, r, o)).collect(),
        )
    }

    #[derive(Default)]
    struct Deltas(Vec<UpdateDelta>);

    impl TrainObserver for Deltas {
        fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
            self.0.push(step.delta.clone());
            Ok(())
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = TrainConfig::default();
        assert_eq!(init_params(&c, 14, 55).unwrap(), init_params(&c, 14, 55).unwrap());
        let other = TrainConfig { seed: 7, ..c.clone() };
        assert_ne!(init_params(&c, 14, 55).unwrap(), init_params(&other, 14, 55).unwrap());
    }

    #[test]
    fn uniform_init_within_bounds() {
        let c = TrainConfig {
            init: InitKind::Uniform,
            init_scale: 0.25,
            ..TrainConfig::default()
        };
        let p = init_params(&c, 50, 5).unwrap();
        assert!(p
            .entity_matrix()
            .iter()
            .chain(p.relation_matrix())
            .all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn normal_init_mean_within_standard_error() {
        let c = TrainConfig {
            dim: 100,
            init_scale: 0.3,
            ..TrainConfig::default()
        };
        let p = init_params(&c, 1000, 1).unwrap();
        let e = p.entity_matrix();
        let n = e.len() as f64;
        let mean = e.iter().map(|&x| x as f64).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * 0.3 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn negatives_are_keyed_and_exclude_gold() {
        let policy = RngPolicy::new(42);
        let d = Triple::new(0, 0, 3);
        let a = policy.negatives(TripleId(7), &d, 2, 5, 14).unwrap();
        assert_eq!(a, policy.negatives(TripleId(7), &d, 2, 5, 14).unwrap());
        assert_eq!(a.len(), 5);
        assert!(!a.contains(&3));
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert!(policy.negatives(TripleId(7), &d, 2, 14, 14).is_err());
        assert_eq!(policy.negatives(TripleId(7), &d, 2, 13, 14).unwrap().len(), 13);
    }

    #[test]
    fn visit_order_survives_removal_as_subsequence() {
        let policy = RngPolicy::new(42);
        let ids: Vec<TripleId> = (0..50).map(TripleId).collect();
        let full = policy.visit_order(3, &ids);
        let fewer: Vec<TripleId> = ids.iter().copied().filter(|id| id.0 != 17).collect();
        let expected: Vec<TripleId> = full.iter().copied().filter(|id| id.0 != 17).collect();
        assert_eq!(policy.visit_order(3, &fewer), expected);
        assert_ne!(policy.visit_order(4, &ids), full);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.rate(0.5, 9, 10), 0.5);
        assert_eq!(LrSchedule::InverseT.rate(0.5, 5, 10), 0.1);
        assert_eq!(LrSchedule::Linear.rate(1.0, 1, 10), 1.0);
        assert_abs_diff_eq!(LrSchedule::Linear.rate(1.0, 10, 10), 0.1, epsilon = 1e-15);
        let rates: Vec<f64> = (1..100).map(|t| LrSchedule::InverseT.rate(0.3, t, 99)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn norm_constraint_projection() {
        let mut row = [0.0f32, 2.0];
        NormConstraint::Unit.project(&mut row);
        assert_eq!(row, [0.0, 1.0]);
        let mut zero = [0.0f32, 0.0];
        NormConstraint::Unit.project(&mut zero);
        assert_eq!(zero, [0.0, 0.0]);
        let mut small = [0.3f32, 0.4];
        NormConstraint::Max(2.0).project(&mut small);
        assert_eq!(small, [0.3, 0.4]);
        let mut big = [0.0f32, 6.0];
        NormConstraint::Max(3.0).project(&mut big);
        assert_eq!(big, [0.0, 3.0]);
        assert_eq!("max:2.5".parse::<NormConstraint>().unwrap(), NormConstraint::Max(2.5));
        assert!("max:".parse::<NormConstraint>().is_err());
    }

    #[test]
    fn epochs_zero_returns_init() {
        let c = sgd_config();
        let s = store(&[(0, 0, 1)]);
        let init = init_params(&c, 4, 1).unwrap();
        let out = train_from(&c, &s, init.clone(), 0, &mut ()).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn single_sgd_step_matches_gradient() {
        let c = TrainConfig { epochs: 1, ..sgd_config() };
        let s = store(&[(0, 0, 1)]);
        let init = init_params(&c, 4, 1).unwrap();
        let d = Triple::new(0, 0, 1);
        let negs = RngPolicy::new(c.seed).negatives(TripleId(0), &d, 0, 2, 4).unwrap();
        let (_, grad) = model::loss_and_grad(&init, c.scoring, c.loss, &d, &negs).unwrap();
        let mut deltas = Deltas::default();
        let out = train(&c, &s, 4, 1, &mut deltas).unwrap();
        let delta = &deltas.0[0];
        let expect_s: Vec<f64> = grad.get(RowRef::Entity(0)).unwrap().iter().map(|g| -0.1 * g).collect();
        for (a, b) in delta.s.iter().zip(&expect_s) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        for (i, (&w, &w0)) in out.params.entity(0).iter().zip(init.entity(0)).enumerate() {
            assert_abs_diff_eq!(w as f64, w0 as f64 + expect_s[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let c = sgd_config();
        let mut p = init_params(&c, 3, 1).unwrap();
        let before = p.clone();
        let mut g = SparseGrad::new();
        g.accumulate(RowRef::Entity(1), &[0.0; 4], 1.0);
        sgd_update(&mut p, &g, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_matches_reference() {
        let c = sgd_config();
        let mut p = init_params(&c, 3, 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let g = [0.5, -2.0, 1e-3, 0.0];
        let mut grad = SparseGrad::new();
        grad.accumulate(RowRef::Entity(1), &g, 1.0);
        grad.accumulate(RowRef::Entity(2), &[0.0; 4], 1.0);
        adam_update(&mut p, &mut state, &grad, 0.01);
        // reference: m̂ = g, v̂ = g², step = α g / (|g| + ε)
        for i in 0..4 {
            let reference = before.entity(1)[i] as f64 - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert_abs_diff_eq!(p.entity(1)[i] as f64, reference, epsilon = 1e-7);
        }
        assert_eq!(p.entity(2), before.entity(2));
        assert_eq!(state.row_steps(RowRef::Entity(2)), 0);
        assert_eq!(state.row_steps(RowRef::Entity(1)), 1);
    }

    #[test]
    fn adam_second_step_matches_reference() {
        let c = sgd_config();
        let mut p = init_params(&c, 1, 1).unwrap();
        let w0 = p.entity(0)[0] as f64;
        let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, w0);
        for (t, g) in [(1, 0.3), (2, -0.7)] {
            let mut grad = SparseGrad::new();
            grad.accumulate(RowRef::Entity(0), &[g, 0.0, 0.0, 0.0], 1.0);
            adam_update(&mut p, &mut state, &grad, 0.05);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(p.entity(0)[0] as f64, w, epsilon = 1e-6);
    }

    fn telescoping(config: TrainConfig) {
        let s = store(&[(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 0), (0, 1, 0)]);
        let mut deltas = Deltas::default();
        let init = init_params(&config, 5, 2).unwrap();
        let out = train(&config, &s, 5, 2, &mut deltas).unwrap();
        // Replay: with gold rows only, a row's final value is init plus the
        // sum of every delta reported for it, as long as it was never a negative.
        let mut e = vec![vec![0.0f64; config.dim]; 5];
        let mut r = vec![vec![0.0f64; config.dim]; 2];
        for delta in &deltas.0 {
            let d = s.get(delta.triple).unwrap();
            for i in 0..config.dim {
                e[d.s][i] += delta.s[i];
                r[d.r][i] += delta.r[i];
                e[d.o][i] += delta.o[i];
            }
        }
        for rel in 0..2 {
            for i in 0..config.dim {
                let expected = init.relation(rel)[i] as f64 + r[rel][i];
                assert_abs_diff_eq!(out.params.relation(rel)[i] as f64, expected, epsilon = 1e-6);
            }
        }
        // entity 4 is only ever touched as a negative, so it has no deltas at all
        assert!(e[4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn telescoping_sgd_relations() {
        telescoping(TrainConfig {
            num_negatives: 1,
            epochs: 3,
            ..sgd_config()
        });
    }

    #[test]
    fn telescoping_adam_relations() {
        telescoping(TrainConfig {
            num_negatives: 1,
            epochs: 3,
            lr0: 0.05,
            optimizer: OptimizerKind::Adam,
            ..sgd_config()
        });
    }

    #[test]
    fn unit_norm_holds_after_every_step() {
        struct Check;
        impl TrainObserver for Check {
            fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
                let p = step.params;
                for row in p.rows() {
                    let n = l2(p.row(row).iter().map(|&x| x as f64));
                    assert!((n - 1.0).abs() < 1e-6, "row {row:?} norm {n}");
                }
                Ok(())
            }
        }
        let c = TrainConfig {
            norm_constraint: NormConstraint::Unit,
            ..sgd_config()
        };
        let s = store(&[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        train(&c, &s, 4, 1, &mut Check).unwrap();
    }

    #[test]
    fn training_is_deterministic() {
        let c = TrainConfig {
            epochs: 2,
            optimizer: OptimizerKind::Adam,
            ..sgd_config()
        };
        let s = store(&[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        let a = train(&c, &s, 4, 1, &mut ()).unwrap();
        let b = train(&c, &s, 4, 1, &mut ()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let c = TrainConfig {
            lr0: 1e30,
            init_scale: 10.0,
            epochs: 5,
            ..sgd_config()
        };
        let s = store(&[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        match train(&c, &s, 4, 1, &mut ()) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_lists_problems() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#);
        assert!(err.is_err());
        let c = TrainConfig {
            lr0: -1.0,
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(c.problems().len(), 2);
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
    }

    #[test]
    fn step_log_csv_round_trip() {
        let c = sgd_config();
        let s = store(&[(0, 0, 1), (1, 0, 2)]);
        let mut log = StepLog::default();
        train(&TrainConfig { epochs: 2, ..c }, &s, 4, 1, &mut log).unwrap();
        assert_eq!(log.records.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        log.save_csv(&path).unwrap();
        assert_eq!(StepLog::load_csv(&path).unwrap().records, log.records);
    }
}
