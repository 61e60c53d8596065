//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Nations must be present under `data/nations` at the workspace root.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gr_core::dataset::{Dataset, EntityId, Triple, TripleId, TripleStore, UnknownPolicy};
use gr_core::eval::{
    approximation_correlation, roar, sample_tests, synthetic_store, verify_approximation_theorem, MainModel,
    Selector,
};
use gr_core::explain::ExplainMode;
use gr_core::model::{self, EmbeddingView, LossKind, RowRef, ScoringKind};
use gr_core::trainer::{
    train, InitKind, LrSchedule, NormConstraint, OptimizerKind, Step, TrainConfig, TrainObserver,
};
use gr_core::{Error, InfluenceLedger, Result};

const SAMPLED_TESTS: usize = 30;
const SAMPLE_SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn nations() -> Dataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/nations");
    Dataset::load_dir(&dir, UnknownPolicy::Error).expect("Nations under data/nations")
}

/// Negatives drawn for every `(epoch, triple)` of a run.
#[derive(Default)]
struct NegativeLog(HashMap<(usize, usize), Vec<EntityId>>);

impl TrainObserver for NegativeLog {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        self.0
            .insert((step.record.epoch, step.record.triple_id), step.negatives.to_vec());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// 1. Nations reproduction

fn reproduction(ds: &Dataset, main: &MainModel, elapsed: Duration) -> Result<Outcome> {
    let m = model::rank_metrics(
        &main.params,
        main.config.scoring,
        &ds.test,
        &[&ds.train, &ds.valid, &ds.test],
        true,
    )?;
    let pass = (m.mrr - 58.88).abs() <= 3.0
        && (m.hits_at_10 - 97.51).abs() <= 3.0
        && elapsed <= Duration::from_secs(300);
    Ok(Outcome::new(
        pass,
        format!(
            "filtered MRR {:.2} (58.88 +/- 3), Hits@10 {:.2} (97.51 +/- 3), Hits@1 {:.2}, train {:.1}s",
            m.mrr,
            m.hits_at_10,
            m.hits_at_1,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. ROAR faithfulness

fn faithfulness(main: &MainModel, tests: &[(TripleId, Triple)]) -> Result<Outcome> {
    let gr1 = roar(main, tests, Selector::GrK(1), workers())?.aggregates;
    let nh1 = roar(main, tests, Selector::NhK(1), workers())?.aggregates;
    let all = roar(main, tests, Selector::GrAll, workers())?.aggregates;
    let pass = gr1.pd >= 80.0
        && (35.0..=70.0).contains(&nh1.pd)
        && all.pd >= 90.0
        && all.tc >= 85.0
        && gr1.diverged + nh1.diverged + all.diverged == 0;
    Ok(Outcome::new(
        pass,
        format!(
            "GR-1 PD {:.1} (>= 80); NH-1 PD {:.1} (35..70); GR-ALL PD {:.1} (>= 90), TC {:.1} (>= 85), \
             mean removed {:.1}",
            gr1.pd, nh1.pd, all.pd, all.tc, all.mean_removed
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. Approximation quality

fn approximation(ds: &Dataset, main: &MainModel, tests: &[(TripleId, Triple)]) -> Result<Outcome> {
    let r_of = |m: &MainModel| -> Result<f64> {
        let report = approximation_correlation(m, tests, workers())?;
        Ok(report.pearson.unwrap_or(f64::NAN))
    };
    let none = r_of(main)?;
    let mut constrained = Vec::new();
    for c in [NormConstraint::Max(3.0), NormConstraint::Max(2.0), NormConstraint::Unit] {
        let config = TrainConfig {
            norm_constraint: c,
            ..main.config.clone()
        };
        let m = MainModel::train(&config, &ds.train, ds.num_entities(), ds.num_relations())?;
        constrained.push((c, r_of(&m)?));
    }
    let increasing = constrained.windows(2).all(|w| w[0].1 < w[1].1);
    let detail = constrained
        .iter()
        .map(|(c, r)| format!("{c} {r:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome::new(
        none >= 0.75 && increasing,
        format!("r unconstrained {none:.4} (>= 0.75); {detail} (strictly increasing: {increasing})"),
    ))
}

// ---------------------------------------------------------------------------
// 4. Gradient correctness

/// Full-precision parameters, so finite differences see no `f32` rounding.
#[derive(Clone)]
struct F64View {
    dim: usize,
    entities: Vec<f64>,
    relations: Vec<f64>,
}

impl F64View {
    fn random(rng: &mut ChaCha8Rng, ne: usize, nr: usize, dim: usize, scale: f64) -> Self {
        let mut draw = |n: usize| (0..n * dim).map(|_| rng.random_range(-scale..scale)).collect();
        F64View {
            dim,
            entities: draw(ne),
            relations: draw(nr),
        }
    }

    fn row_mut(&mut self, row: RowRef) -> &mut [f64] {
        let h = self.dim;
        match row {
            RowRef::Entity(e) => &mut self.entities[e * h..(e + 1) * h],
            RowRef::Relation(r) => &mut self.relations[r * h..(r + 1) * h],
        }
    }
}

impl EmbeddingView for F64View {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_entities(&self) -> usize {
        self.entities.len() / self.dim
    }
    fn num_relations(&self) -> usize {
        self.relations.len() / self.dim
    }
    fn entity_into(&self, e: EntityId, out: &mut [f64]) {
        out.copy_from_slice(&self.entities[e * self.dim..(e + 1) * self.dim]);
    }
    fn relation_into(&self, r: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.relations[r * self.dim..(r + 1) * self.dim]);
    }
}

fn gradient_check() -> Result<Outcome> {
    const INSTANCES: usize = 100;
    const EPS: f64 = 1e-6;
    let (ne, nr, dim, k) = (20, 3, 10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for kind in [ScoringKind::DistMult, ScoringKind::ComplEx] {
        for loss in [LossKind::Softmax, LossKind::Sigmoid] {
            for _ in 0..INSTANCES {
                let view = F64View::random(&mut rng, ne, nr, dim, 1.0);
                let d = Triple::new(rng.random_range(0..ne), rng.random_range(0..nr), rng.random_range(0..ne));
                let negatives: Vec<EntityId> = index::sample(&mut rng, ne - 1, k)
                    .into_iter()
                    .map(|i| if i >= d.o { i + 1 } else { i })
                    .collect();
                let (_, grad) = model::loss_and_grad(&view, kind, loss, &d, &negatives)?;
                let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
                for (row, analytic) in grad.iter() {
                    for (i, &a) in analytic.iter().enumerate() {
                        let mut plus = view.clone();
                        plus.row_mut(row)[i] += EPS;
                        let mut minus = view.clone();
                        minus.row_mut(row)[i] -= EPS;
                        let lp = model::loss_and_grad(&plus, kind, loss, &d, &negatives)?.0;
                        let lm = model::loss_and_grad(&minus, kind, loss, &d, &negatives)?.0;
                        let numeric = (lp - lm) / (2.0 * EPS);
                        diff += (a - numeric).powi(2);
                        norm_a += a * a;
                        norm_n += numeric * numeric;
                    }
                }
                let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                checks += 1;
            }
        }
    }
    Ok(Outcome::new(
        worst < 1e-4,
        format!("{checks} checks (100 per scoring x loss), max relative error {worst:.2e} (< 1e-4)"),
    ))
}

// ---------------------------------------------------------------------------
// 5. Lemma suite

const LEMMA_SAMPLES: usize = 1000;
const SLACK: f64 = 1e-9;

fn in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = radius * rng.random::<f64>();
    v.iter().map(|x| x / norm * r).collect()
}

/// Two entities and one relation, each row inside the `c`-ball.
fn bounded_view(rng: &mut ChaCha8Rng, dim: usize, c: f64) -> F64View {
    let mut entities = in_ball(rng, dim, c);
    entities.extend(in_ball(rng, dim, c));
    F64View {
        dim,
        entities,
        relations: in_ball(rng, dim, c),
    }
}

fn distance(u: &F64View, v: &F64View) -> f64 {
    u.entities
        .iter()
        .chain(&u.relations)
        .zip(v.entities.iter().chain(&v.relations))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of `f(w) = 1/2 w^T A w + sum_i softplus(x_i . w)`.
fn objective_grad(a: &[Vec<f64>], xs: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().map(|row| row.iter().zip(w).map(|(p, q)| p * q).sum()).collect();
    for x in xs {
        let z: f64 = x.iter().zip(w).map(|(p, q)| p * q).sum();
        let s = 1.0 / (1.0 + (-z).exp());
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += s * xi;
        }
    }
    g
}

fn lemmas() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = Triple::new(0, 0, 1);
    let (mut v1, mut v2, mut v3) = (0, 0, 0);

    for _ in 0..LEMMA_SAMPLES {
        let dim = rng.random_range(1..=16);
        let c = rng.random_range(0.1..3.0);
        let w = bounded_view(&mut rng, dim, c);
        let w2 = bounded_view(&mut rng, dim, c);
        let dist = distance(&w, &w2);
        let phi = model::score(&w, ScoringKind::DistMult, &d)?;
        let phi2 = model::score(&w2, ScoringKind::DistMult, &d)?;
        if (phi - phi2).abs() > 2.0 * c * c * dist + SLACK {
            v1 += 1;
        }
        let g = model::score_grad(&w, ScoringKind::DistMult, &d)?;
        let g2 = model::score_grad(&w2, ScoringKind::DistMult, &d)?;
        if g.distance(&g2) > 4.0 * c * dist + SLACK {
            v2 += 1;
        }
    }

    for _ in 0..LEMMA_SAMPLES {
        let n = rng.random_range(1..=30);
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let xs: Vec<Vec<f64>> = (0..rng.random_range(0..5))
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        // Frobenius norm bounds the spectral norm of A; each softplus term
        // adds at most |x|^2 / 4 of curvature.
        let beta = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
            + xs.iter().map(|x| norm(x).powi(2) / 4.0).sum::<f64>();
        let alpha = rng.random_range(0.0..1.0);
        let vec_of = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (w, w2, gamma) = (vec_of(&mut rng), vec_of(&mut rng), vec_of(&mut rng));
        let step = |w: &[f64]| -> Vec<f64> {
            let g = objective_grad(&a, &xs, w);
            w.iter().zip(&g).map(|(p, q)| p - alpha * q).collect()
        };
        let (gw, gw2) = (step(&w), step(&w2));
        let lhs: Vec<f64> = (0..n).map(|i| gw[i] - gamma[i] - gw2[i]).collect();
        let offset: Vec<f64> = (0..n).map(|i| w[i] - gamma[i] - w2[i]).collect();
        let diff: Vec<f64> = (0..n).map(|i| w[i] - w2[i]).collect();
        if norm(&lhs) > norm(&offset) + alpha * beta * norm(&diff) + SLACK {
            v3 += 1;
        }
    }

    Ok(Outcome::new(
        v1 + v2 + v3 == 0,
        format!("violations over {LEMMA_SAMPLES} samples each: Lipschitz {v1}, smoothness {v2}, expansiveness {v3}"),
    ))
}

// ---------------------------------------------------------------------------
// 6. Stability bound on a synthetic store

fn stability() -> Result<Outcome> {
    let (ne, nr) = (20, 4);
    let store = synthetic_store(ne, nr, 100, SAMPLE_SEED)?;
    let config = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr_schedule: LrSchedule::InverseT,
        lr0: 1.0,
        norm_constraint: NormConstraint::Unit,
        num_negatives: 5,
        dim: 10,
        epochs: 10,
        init: InitKind::Uniform,
        init_scale: 0.05,
        ..TrainConfig::default()
    };
    let report = verify_approximation_theorem(&config, &store, ne, nr, 30, workers())?;
    Ok(Outcome::new(
        report.holds && report.trials.len() == 30,
        format!(
            "{} trials, mean |Pr(w - gamma) - Pr(w')| {:.3e} < bound {:.4} (L {:.3}, beta {:.3}, C {:.3}); \
             without rollback {:.3e}",
            report.trials.len(),
            report.mean_rollback_error,
            report.bound,
            report.inputs.lipschitz,
            report.inputs.smoothness,
            report.inputs.max_norm,
            report.mean_main_error
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. Resource claims

fn resources(main: &MainModel, tests: &[(TripleId, Triple)]) -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("ledger.bin");
    main.ledger.save(&path)?;
    let size = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    let expected = InfluenceLedger::HEADER_SIZE as u64 + 3 * main.config.dim as u64 * main.store.len() as u64 * 4;

    let explainer = main.explainer()?;
    let mut over = 0;
    let mut explanations = 0;
    for &(_, t) in tests {
        let target = explainer.predict(t.s, t.r)?;
        let adjacent = main.index.adjacent(&target, &main.store, false).len();
        let mut runs = vec![
            explainer.explain(&target, ExplainMode::TopK(1))?,
            explainer.explain(&target, ExplainMode::All)?,
            explainer.explain(&target, ExplainMode::SameObject(1))?,
            explainer.opposing_explain(&target, 1)?,
        ];
        for e in runs.drain(..) {
            explanations += 1;
            if e.evaluations > adjacent + 1 {
                over += 1;
            }
        }
    }
    Ok(Outcome::new(
        size == expected && over == 0,
        format!(
            "ledger {size} bytes (expected {expected}); {over} of {explanations} explanations exceed |adjacent| + 1 evaluations"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. Determinism and coupled runs

fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn determinism(ds: &Dataset, main: &MainModel, full: &NegativeLog) -> Result<Outcome> {
    let empty = main.retrain_without(&[])?;
    let dir = tempfile::tempdir().expect("temporary directory");
    let (a, b) = (dir.path().join("main.ckpt"), dir.path().join("empty.ckpt"));
    main.params.save_checkpoint(&a, main.config.scoring, main.hash)?;
    empty.save_checkpoint(&b, main.config.scoring, main.hash)?;
    let bit_exact = read(&a)? == read(&b)?;

    let removals: Vec<usize> = (0..ds.train.len()).collect();
    let mismatched = removals
        .par_iter()
        .map(|&removed| {
            let reduced: TripleStore = ds.train.remove_triples(&[TripleId(removed)])?;
            let mut log = NegativeLog::default();
            train(&main.config, &reduced, ds.num_entities(), ds.num_relations(), &mut log)?;
            let survivors_match = log.0.len() == full.0.len() - main.config.epochs
                && log.0.iter().all(|(key, negs)| full.0.get(key) == Some(negs))
                && !log.0.keys().any(|&(_, id)| id == removed);
            Ok(usize::from(!survivors_match))
        })
        .sum::<Result<usize>>()?;
    Ok(Outcome::new(
        bit_exact && mismatched == 0,
        format!(
            "empty-removal retrain bit-exact: {bit_exact}; {mismatched} of {} single removals changed a survivor's negatives",
            removals.len()
        ),
    ))
}

fn main() -> ExitCode {
    let ds = nations();
    let config = TrainConfig::preset("nations").expect("nations preset");
    let started = Instant::now();
    let mut negatives = NegativeLog::default();
    let main = MainModel::train_observed(&config, &ds.train, ds.num_entities(), ds.num_relations(), &mut negatives)
        .expect("main Nations run");
    let elapsed = started.elapsed();
    let tests = sample_tests(&ds.test, SAMPLED_TESTS, SAMPLE_SEED);

    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Outcome> + '_>)> = vec![
        ("nations reproduction", Box::new(|| reproduction(&ds, &main, elapsed))),
        ("roar faithfulness", Box::new(|| faithfulness(&main, &tests))),
        ("approximation quality", Box::new(|| approximation(&ds, &main, &tests))),
        ("gradient correctness", Box::new(gradient_check)),
        ("lemma suite", Box::new(lemmas)),
        ("stability bound", Box::new(stability)),
        ("resource claims", Box::new(|| resources(&main, &tests))),
        ("determinism", Box::new(|| determinism(&ds, &main, &negatives))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {} {name}: {} - {} [{:.1}s]",
            i + 1,
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
