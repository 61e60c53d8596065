//! `gr`: train knowledge-graph embeddings with an influence ledger, explain
//! predictions and evaluate the explanations by retraining.

mod config;
mod error;
mod movielens;
mod run;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gr_core::eval::{
    approximation_correlation, roar, sample_tests, synthetic_store, verify_approximation_theorem, Selector,
};
use gr_core::explain::{ExplainMode, Explainer};
use gr_core::model::predict_top;
use gr_core::trainer::run_fingerprint;
use gr_core::{AdjacencyIndex, Error, Fingerprint, InfluenceLedger, Triple, TripleId};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{create_dir, write_json, OpenRun};

#[derive(Parser)]
#[command(name = "gr", version, about = "Gradient rollback for knowledge graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; any subset of keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting values: nations, fb15k-237 or movielens.
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for `--set dataset.dir=DIR`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// `key.path=value` override, applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<RunConfig, CliError> {
        let mut overrides = Vec::new();
        if let Some(d) = &self.dataset {
            overrides.push(format!("dataset.dir={}", json_string(d)));
        }
        if let Some(o) = &self.output {
            overrides.push(format!("output_dir={}", json_string(o)));
        }
        overrides.extend(self.overrides.iter().cloned());
        overrides.extend(extra.iter().cloned());
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &overrides)
    }
}

fn json_string(p: &Path) -> String {
    serde_json::Value::String(p.display().to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, ledger, step log and metrics.
    Train(ConfigArgs),
    /// Explain one prediction of a trained run.
    Explain(ExplainArgs),
    /// Remove-and-retrain evaluation of an explanation selector.
    Roar {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides `eval.selector`.
        #[arg(long)]
        selector: Option<String>,
        /// Remove nothing; every retrain must reproduce the main model.
        #[arg(long)]
        dry_run: bool,
    },
    /// Correlation between rollback estimates and retrained probabilities.
    Correlate(ConfigArgs),
    /// Empirical check of the rollback error against the stability bound.
    VerifyTheory(ConfigArgs),
    /// Ranking metrics of a trained run.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize a ledger file.
    InspectLedger {
        #[arg(long)]
        ledger: PathBuf,
        /// Print the records of these training triple ids.
        #[arg(long = "triple")]
        triples: Vec<usize>,
        /// List the N triples with the largest total record norm.
        #[arg(long, default_value_t = 0)]
        top: usize,
    },
    /// Convert MovieLens 100k `ua.base`/`ua.test` into triple files.
    ConvertMovielens {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExplainArgs {
    /// Run directory written by `gr train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// `"s r ?"` explains the top prediction, `"s r o"` a given triple.
    /// Fields split on tabs if present, otherwise on whitespace.
    #[arg(long)]
    query: String,
    /// gr-k, gr-all or gr-o-k.
    #[arg(long, default_value = "gr-1")]
    mode: String,
    /// Rank the triples that speak against the prediction instead.
    #[arg(long)]
    opposing: bool,
    /// Also consider a training copy of the explained triple.
    #[arg(long)]
    include_identical: bool,
    /// Never predict entities whose name starts with this prefix.
    #[arg(long)]
    exclude_prefix: Option<String>,
    /// Output JSON path; defaults to the run's `explanations/` directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a Graphviz file next to the JSON.
    #[arg(long)]
    dot: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(&args),
        Command::Explain(args) => cmd_explain(&args),
        Command::Roar {
            config,
            selector,
            dry_run,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = selector {
                extra.push(format!("eval.selector={s}"));
            }
            if dry_run {
                extra.push("eval.selector=empty".into());
            }
            cmd_roar(&config.resolve(&extra)?)
        }
        Command::Correlate(args) => cmd_correlate(&args.resolve(&[])?),
        Command::VerifyTheory(args) => cmd_verify_theory(&args.resolve(&[])?),
        Command::Metrics { run, checkpoint } => cmd_metrics(&run, checkpoint.as_deref()),
        Command::InspectLedger { ledger, triples, top } => cmd_inspect_ledger(&ledger, &triples, top),
        Command::ConvertMovielens { base, test, out } => {
            let c = movielens::convert(&base, &test, &out)?;
            println!(
                "{}: {} train, {} valid, {} test triples",
                out.display(),
                c.train,
                c.valid,
                c.test
            );
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    // A closed pipe (`gr ... | head`) is not an error.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<(), CliError> {
    let config = args.resolve(&[])?;
    config.validate(true)?;
    let data = run::load_dataset(&config)?;
    let (dir, _, metrics) = run::train_and_save(&config, &data)?;
    println!("run directory: {}", dir.display());
    println!(
        "test (filtered): MRR {:.2}  Hits@1 {:.2}  Hits@10 {:.2}",
        metrics.test_filtered.mrr, metrics.test_filtered.hits_at_1, metrics.test_filtered.hits_at_10
    );
    Ok(())
}

fn parse_query(query: &str) -> Result<[&str; 3], CliError> {
    let fields: Vec<&str> = if query.contains('\t') {
        query.split('\t').map(str::trim).collect()
    } else {
        query.split_whitespace().collect()
    };
    <[&str; 3]>::try_from(fields)
        .map_err(|f| CliError::config(format!("query needs three fields `s r ?`, got {}", f.len())))
}

fn cmd_explain(args: &ExplainArgs) -> Result<(), CliError> {
    let mode: ExplainMode = args.mode.parse()?;
    let run = OpenRun::open(&args.run, args.checkpoint.as_deref())?;
    let ledger = run.ledger(args.ledger.as_deref())?;
    let vocab = &run.data.vocab;
    let [s, r, o] = parse_query(&args.query)?;
    let unknown = |kind, name: &str| Error::UnknownName {
        kind,
        name: name.to_owned(),
    };
    let s = vocab.entity_id(s).ok_or_else(|| unknown("entity", s))?;
    let r = vocab.relation_id(r).ok_or_else(|| unknown("relation", r))?;
    let kind = run.config.train.scoring;
    let target = if o == "?" {
        let exclude: BTreeSet<usize> = match &args.exclude_prefix {
            Some(p) => (0..vocab.num_entities())
                .filter(|&e| vocab.entity_name(e).starts_with(p.as_str()))
                .collect(),
            None => BTreeSet::new(),
        };
        Triple::new(s, r, predict_top(&run.params, kind, s, r, &exclude)?)
    } else {
        Triple::new(s, r, vocab.entity_id(o).ok_or_else(|| unknown("entity", o))?)
    };

    let index = AdjacencyIndex::build(&run.data.train, vocab.num_entities(), vocab.num_relations());
    let explainer = Explainer::new(&run.params, kind, run.hash, &ledger, &run.data.train, &index)?
        .include_identical(args.include_identical);
    let explanation = if args.opposing {
        let k = match mode {
            ExplainMode::TopK(k) | ExplainMode::SameObject(k) => k,
            ExplainMode::All => usize::MAX,
        };
        explainer.opposing_explain(&target, k)?
    } else {
        explainer.explain(&target, mode)?
    };

    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = run.dir.join("explanations");
            create_dir(&dir)?;
            let tag = if args.opposing { "opposing-" } else { "" };
            dir.join(format!("{}-{}-{}-{tag}{mode}.json", target.s, target.r, target.o))
        }
    };
    explanation.write_json(&out, vocab)?;
    if args.dot {
        explanation.write_dot(&out.with_extension("dot"), vocab)?;
    }

    let [sn, rn, on] = vocab.names(&target);
    println!("{sn} {rn} {on}  Pr = {:.4}", explanation.base_prob);
    for score in explanation.selected_triples() {
        let [a, b, c] = vocab.names(&score.triple);
        println!("  {:>6}  {a} {b} {c}  delta {:+.6}", score.triple_id.0, score.delta);
    }
    println!(
        "{} of {} adjacent triples selected, {} probability evaluations; written to {}",
        explanation.selected.len(),
        explanation.scores.len(),
        explanation.evaluations,
        out.display()
    );
    Ok(())
}

fn eval_dir(run_dir: &Path, command: &str, config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = run_dir.join(format!("{command}-{}", config.eval.fingerprint()));
    create_dir(&dir)?;
    write_json(&dir.join("eval.json"), &config.eval)?;
    Ok(dir)
}

fn cmd_roar(config: &RunConfig) -> Result<(), CliError> {
    config.validate(true)?;
    let selector: Selector = config.eval.selector()?;
    let data = run::load_dataset(config)?;
    let (run_dir, main) = run::load_or_train(config, &data)?;
    let tests = sample_tests(&data.test, config.eval.tests, config.eval.test_seed);
    let report = roar(&main, &tests, selector, config.eval.workers())?;
    let dir = eval_dir(&run_dir, &format!("roar-{selector}"), config)?;
    report.write_csv(&dir.join("roar.csv"))?;
    report.write_json(&dir.join("roar.json"))?;
    report.write_manifests(&dir.join("manifests"))?;
    let a = report.aggregates;
    println!(
        "{selector}: PD {:.1}%  TC {:.1}%  mean removed {:.1}  ({} evaluated, {} diverged)",
        a.pd, a.tc, a.mean_removed, a.evaluated, a.diverged
    );
    println!("report: {}", dir.display());
    Ok(())
}

fn cmd_correlate(config: &RunConfig) -> Result<(), CliError> {
    config.validate(true)?;
    let data = run::load_dataset(config)?;
    let (run_dir, main) = run::load_or_train(config, &data)?;
    let tests = sample_tests(&data.test, config.eval.tests, config.eval.test_seed);
    let report = approximation_correlation(&main, &tests, config.eval.workers())?;
    let dir = eval_dir(&run_dir, "correlate", config)?;
    report.write_json(&dir.join("correlation.json"))?;
    report.write_csv(&dir.join("correlation.csv"))?;
    match report.pearson {
        Some(r) => println!("pearson r = {r:.4} over {} predictions", report.points.len()),
        None => println!("pearson r undefined over {} predictions", report.points.len()),
    }
    println!("report: {}", dir.display());
    Ok(())
}

fn cmd_verify_theory(config: &RunConfig) -> Result<(), CliError> {
    let problems = config.theory_problems();
    if !problems.is_empty() {
        return Err(CliError::config(problems.join("\n")));
    }
    let (store, ne, nr) = match config.eval.synthetic {
        Some(s) => (synthetic_store(s.entities, s.relations, s.triples, s.seed)?, s.entities, s.relations),
        None => {
            let data = run::load_dataset(config)?;
            let (ne, nr) = (data.num_entities(), data.num_relations());
            (data.train, ne, nr)
        }
    };
    let report = verify_approximation_theorem(&config.train, &store, ne, nr, config.eval.trials, config.eval.workers())?;
    let hash = run_fingerprint(&config.train, &store, ne, nr);
    let dir = eval_dir(&run::run_dir(config, hash), "theory", config)?;
    write_json(&dir.join("theorem.json"), &report)?;
    println!(
        "mean |Pr(w - gamma) - Pr(w')| = {:.3e}, bound = {:.4e}: {}",
        report.mean_rollback_error,
        report.bound,
        if report.holds { "holds" } else { "violated" }
    );
    println!("without rollback: {:.3e}", report.mean_main_error);
    println!("note: {}", report.caveat);
    println!("report: {}", dir.display());
    Ok(())
}

fn cmd_metrics(dir: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let run = OpenRun::open(dir, checkpoint)?;
    let (test_filtered, test_raw, valid_filtered) = run::metrics(&run.config, &run.data, &run.params)?;
    print_json(&serde_json::json!({
        "model_hash": run.hash,
        "test_filtered": test_filtered,
        "test_raw": test_raw,
        "valid_filtered": valid_filtered,
    }))
}

#[derive(Serialize)]
struct LedgerRecord {
    triple_id: usize,
    norm: f64,
    s: Vec<f32>,
    r: Vec<f32>,
    o: Vec<f32>,
}

#[derive(Serialize)]
struct LedgerSummary {
    hash: Fingerprint,
    dim: usize,
    triples: usize,
    bytes: usize,
    records: Vec<LedgerRecord>,
}

fn record(ledger: &InfluenceLedger, id: usize) -> Result<LedgerRecord, CliError> {
    let [s, r, o] = ledger.gamma(TripleId(id))?;
    let norm = s.iter().chain(r).chain(o).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    Ok(LedgerRecord {
        triple_id: id,
        norm,
        s: s.to_vec(),
        r: r.to_vec(),
        o: o.to_vec(),
    })
}

fn cmd_inspect_ledger(path: &Path, triples: &[usize], top: usize) -> Result<(), CliError> {
    let ledger = InfluenceLedger::load(path, None)?;
    let mut records = triples.iter().map(|&id| record(&ledger, id)).collect::<Result<Vec<_>, _>>()?;
    if top > 0 {
        let mut all = (0..ledger.len()).map(|id| record(&ledger, id)).collect::<Result<Vec<_>, _>>()?;
        all.sort_by(|a, b| b.norm.total_cmp(&a.norm).then(a.triple_id.cmp(&b.triple_id)));
        records.extend(all.into_iter().take(top));
    }
    print_json(&LedgerSummary {
        hash: ledger.hash(),
        dim: ledger.dim(),
        triples: ledger.len(),
        bytes: InfluenceLedger::HEADER_SIZE + 4 * ledger.num_floats(),
        records,
    })
}
