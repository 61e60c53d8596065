//! Influence explanations: rank the training triples adjacent to a
//! prediction by how much rolling each one back lowers its probability.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AdjacencyIndex, EntityId, RelationId, Triple, TripleId, TripleStore, Vocab};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::ledger::{rollback, InfluenceLedger};
use crate::model::{object_probability, predict_top, EmbeddingView, Parameters, ScoringKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExplainMode {
    /// The `k` largest effects.
    TopK(usize),
    /// Every candidate with a positive effect.
    All,
    /// The `k` largest effects among candidates sharing the target's object.
    SameObject(usize),
}

impl fmt::Display for ExplainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExplainMode::TopK(k) => write!(f, "gr-{k}"),
            ExplainMode::All => f.write_str("gr-all"),
            ExplainMode::SameObject(k) => write!(f, "gr-o-{k}"),
        }
    }
}

impl FromStr for ExplainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let bad = || Error::InvalidArgument(format!("unknown mode `{s}` (gr-<k>, gr-all, gr-o-<k>)"));
        if lower == "gr-all" {
            return Ok(ExplainMode::All);
        }
        if let Some(k) = lower.strip_prefix("gr-o-") {
            return k.parse().map(ExplainMode::SameObject).map_err(|_| bad());
        }
        if let Some(k) = lower.strip_prefix("gr-") {
            return k.parse().map(ExplainMode::TopK).map_err(|_| bad());
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub triple_id: TripleId,
    pub triple: Triple,
    /// `Pr(w) - Pr(w - gamma)` for the explained triple.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub target: Triple,
    pub base_prob: f64,
    pub mode: ExplainMode,
    /// Ranked by increasing effect instead of decreasing.
    pub opposing: bool,
    pub scores: Vec<InfluenceScore>,
    pub selected: Vec<TripleId>,
    /// Probability evaluations spent, including the base probability.
    pub evaluations: usize,
}

impl Explanation {
    pub fn selected_triples(&self) -> impl Iterator<Item = &InfluenceScore> {
        let chosen: BTreeSet<TripleId> = self.selected.iter().copied().collect();
        self.scores.iter().filter(move |s| chosen.contains(&s.triple_id))
    }

    pub fn to_json(&self, vocab: &Vocab) -> ExplanationJson {
        ExplanationJson {
            target: TripleJson::new(None, &self.target, vocab),
            base_prob: self.base_prob,
            mode: if self.opposing {
                format!("opposing-{}", self.mode)
            } else {
                self.mode.to_string()
            },
            scores: self
                .scores
                .iter()
                .map(|s| ScoreJson {
                    triple: TripleJson::new(Some(s.triple_id), &s.triple, vocab),
                    delta: s.delta,
                })
                .collect(),
            selected: self.selected.clone(),
        }
    }

    /// Graphviz rendering: the target as a dashed edge, selected triples as
    /// solid edges labelled by relation.
    pub fn to_dot(&self, vocab: &Vocab) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let mut nodes = BTreeSet::new();
        let mut edges = Vec::new();
        let mut edge = |t: &Triple, style: &str| {
            let [s, r, o] = vocab.names(t);
            nodes.insert(t.s);
            nodes.insert(t.o);
            edges.push(format!(
                "  {} -> {} [label={}, style={style}];",
                quote(s),
                quote(o),
                quote(r)
            ));
        };
        edge(&self.target, "dashed");
        for s in self.selected_triples() {
            edge(&s.triple, "solid");
        }
        let mut out = String::from("digraph explanation {\n");
        for e in nodes {
            out.push_str(&format!("  {};\n", quote(vocab.entity_name(e))));
        }
        for e in edges {
            out.push_str(&e);
            out.push('\n');
        }
        out.push_str("}\n");
        out
    }

    pub fn write_json(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json(vocab))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_dot(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        fs::write(path, self.to_dot(vocab)).map_err(|e| Error::io(path, e))
    }
}

/// Serialized explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationJson {
    pub target: TripleJson,
    pub base_prob: f64,
    pub mode: String,
    pub scores: Vec<ScoreJson>,
    pub selected: Vec<TripleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleJson {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub triple_id: Option<TripleId>,
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
    pub names: [String; 3],
}

impl TripleJson {
    fn new(id: Option<TripleId>, t: &Triple, vocab: &Vocab) -> Self {
        TripleJson {
            triple_id: id,
            s: t.s,
            r: t.r,
            o: t.o,
            names: vocab.names(t).map(str::to_owned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreJson {
    #[serde(flatten)]
    pub triple: TripleJson,
    pub delta: f64,
}

/// Frozen model, ledger and training store; answers explanation queries.
pub struct Explainer<'a> {
    params: &'a Parameters,
    kind: ScoringKind,
    ledger: &'a InfluenceLedger,
    store: &'a TripleStore,
    index: &'a AdjacencyIndex,
    include_identical: bool,
    evaluations: AtomicUsize,
}

impl<'a> Explainer<'a> {
    /// Fails if the ledger was not recorded for the model identified by `model_hash`.
    pub fn new(
        params: &'a Parameters,
        kind: ScoringKind,
        model_hash: Fingerprint,
        ledger: &'a InfluenceLedger,
        store: &'a TripleStore,
        index: &'a AdjacencyIndex,
    ) -> Result<Self> {
        if ledger.hash() != model_hash {
            return Err(Error::Mismatch(format!(
                "ledger belongs to model {}, checkpoint is {model_hash}",
                ledger.hash()
            )));
        }
        if ledger.dim() != params.dim() {
            return Err(Error::Dimension {
                expected: params.dim(),
                actual: ledger.dim(),
            });
        }
        if ledger.len() < store.id_bound() {
            return Err(Error::Mismatch(format!(
                "ledger covers {} triples but the store has ids up to {}",
                ledger.len(),
                store.id_bound()
            )));
        }
        Ok(Explainer {
            params,
            kind,
            ledger,
            store,
            index,
            include_identical: false,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Also consider an exact copy of the explained triple as a candidate.
    pub fn include_identical(mut self, yes: bool) -> Self {
        self.include_identical = yes;
        self
    }

    /// Probability evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn probability<V: EmbeddingView + ?Sized>(&self, view: &V, d: &Triple) -> Result<f64> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        object_probability(view, self.kind, d.s, d.r, d.o)
    }

    pub fn base_probability(&self, d: &Triple) -> Result<f64> {
        self.probability(self.params, d)
    }

    /// Highest-scoring object for `(s, r, ?)` over all entities.
    pub fn predict(&self, s: EntityId, r: RelationId) -> Result<Triple> {
        let o = predict_top(self.params, self.kind, s, r, &BTreeSet::new())?;
        Ok(Triple::new(s, r, o))
    }

    /// Effect of rolling back `d_prime` on the probability of `d`, given
    /// `base = Pr(w; d)`. Exactly zero, with no evaluation, when the two
    /// triples share no row.
    pub fn influence_delta(&self, d_prime: TripleId, d: &Triple, base: f64) -> Result<InfluenceScore> {
        let triple = self.store.get(d_prime).ok_or(Error::UnknownTriple(d_prime))?;
        let slice = self.ledger.lookup(d_prime, d, self.store)?;
        let delta = if slice.is_empty() {
            0.0
        } else {
            let view = rollback(self.params, &slice, d)?;
            base - self.probability(&view, d)?
        };
        Ok(InfluenceScore {
            triple_id: d_prime,
            triple,
            delta,
        })
    }

    fn scored(&self, d: &Triple, same_object: bool) -> Result<(f64, Vec<InfluenceScore>)> {
        let base = self.base_probability(d)?;
        let candidates: Vec<TripleId> = self
            .index
            .adjacent(d, self.store, self.include_identical)
            .into_iter()
            .filter(|&id| !same_object || self.store.get(id).is_some_and(|t| t.o == d.o))
            .collect();
        let scores = candidates
            .par_iter()
            .map(|&id| self.influence_delta(id, d, base))
            .collect::<Result<Vec<_>>>()?;
        Ok((base, scores))
    }

    pub fn explain(&self, d: &Triple, mode: ExplainMode) -> Result<Explanation> {
        let before = self.evaluations();
        let (base, mut scores) = self.scored(d, matches!(mode, ExplainMode::SameObject(_)))?;
        scores.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.triple_id.cmp(&b.triple_id)));
        let selected = match mode {
            ExplainMode::TopK(k) | ExplainMode::SameObject(k) => {
                scores.iter().take(k).map(|s| s.triple_id).collect()
            }
            ExplainMode::All => scores
                .iter()
                .take_while(|s| s.delta > 0.0)
                .map(|s| s.triple_id)
                .collect(),
        };
        Ok(Explanation {
            target: *d,
            base_prob: base,
            mode,
            opposing: false,
            scores,
            selected,
            evaluations: self.evaluations() - before,
        })
    }

    /// The `k` candidates whose removal would raise the probability most
    /// (most negative effects first).
    pub fn opposing_explain(&self, d: &Triple, k: usize) -> Result<Explanation> {
        let before = self.evaluations();
        let (base, mut scores) = self.scored(d, false)?;
        scores.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.triple_id.cmp(&b.triple_id)));
        let selected = scores
            .iter()
            .take_while(|s| s.delta < 0.0)
            .take(k)
            .map(|s| s.triple_id)
            .collect();
        Ok(Explanation {
            target: *d,
            base_prob: base,
            mode: ExplainMode::TopK(k),
            opposing: true,
            scores,
            selected,
            evaluations: self.evaluations() - before,
        })
    }
}
