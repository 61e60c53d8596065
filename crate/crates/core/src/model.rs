//! Embedding parameters, scoring functions, probabilities and losses.
//!
//! Parameters are stored as `f32` (the checkpoint precision). Every scoring
//! and gradient routine reads rows through [`EmbeddingView`] into `f64`
//! buffers, so the same code evaluates trained parameters, rolled-back views
//! and double-precision test fixtures.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{EntityId, RelationId, Triple, TripleStore};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringKind {
    DistMult,
    /// Split-real layout: first `h/2` coordinates real part, last `h/2` imaginary.
    ComplEx,
}

impl ScoringKind {
    fn code(self) -> u8 {
        match self {
            ScoringKind::DistMult => 0,
            ScoringKind::ComplEx => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScoringKind::DistMult),
            1 => Some(ScoringKind::ComplEx),
            _ => None,
        }
    }

    pub fn check_dim(self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding width must be positive".into()));
        }
        if self == ScoringKind::ComplEx && dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "ComplEx needs an even embedding width, got {dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross entropy of the softmax over the gold object and its negatives.
    Softmax,
    /// Independent logistic losses: gold labelled 1, each negative 0.
    Sigmoid,
}

/// A parameter row: one entity or relation embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowRef {
    Entity(EntityId),
    Relation(RelationId),
}

/// Read access to embedding rows, widened to `f64`.
pub trait EmbeddingView: Sync {
    fn dim(&self) -> usize;
    fn num_entities(&self) -> usize;
    fn num_relations(&self) -> usize;
    fn entity_into(&self, e: EntityId, out: &mut [f64]);
    fn relation_into(&self, r: RelationId, out: &mut [f64]);

    fn entity_vec(&self, e: EntityId) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.entity_into(e, &mut v);
        v
    }

    fn relation_vec(&self, r: RelationId) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.relation_into(r, &mut v);
        v
    }

    fn row_vec(&self, row: RowRef) -> Vec<f64> {
        match row {
            RowRef::Entity(e) => self.entity_vec(e),
            RowRef::Relation(r) => self.relation_vec(r),
        }
    }
}

/// Entity matrix `E` (|E| x h) and relation matrix `R` (|R| x h), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    dim: usize,
    num_entities: usize,
    num_relations: usize,
    entities: Vec<f32>,
    relations: Vec<f32>,
}

impl Parameters {
    pub fn zeros(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        Parameters {
            dim,
            num_entities,
            num_relations,
            entities: vec![0.0; num_entities * dim],
            relations: vec![0.0; num_relations * dim],
        }
    }

    pub fn from_matrices(
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        entities: Vec<f32>,
        relations: Vec<f32>,
    ) -> Result<Self> {
        if entities.len() != num_entities * dim {
            return Err(Error::Dimension {
                expected: num_entities * dim,
                actual: entities.len(),
            });
        }
        if relations.len() != num_relations * dim {
            return Err(Error::Dimension {
                expected: num_relations * dim,
                actual: relations.len(),
            });
        }
        Ok(Parameters {
            dim,
            num_entities,
            num_relations,
            entities,
            relations,
        })
    }

    pub fn entity(&self, e: EntityId) -> &[f32] {
        &self.entities[e * self.dim..(e + 1) * self.dim]
    }

    pub fn relation(&self, r: RelationId) -> &[f32] {
        &self.relations[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row(&self, row: RowRef) -> &[f32] {
        match row {
            RowRef::Entity(e) => self.entity(e),
            RowRef::Relation(r) => self.relation(r),
        }
    }

    pub fn row_mut(&mut self, row: RowRef) -> &mut [f32] {
        let dim = self.dim;
        match row {
            RowRef::Entity(e) => &mut self.entities[e * dim..(e + 1) * dim],
            RowRef::Relation(r) => &mut self.relations[r * dim..(r + 1) * dim],
        }
    }

    pub fn entity_matrix(&self) -> &[f32] {
        &self.entities
    }

    pub fn relation_matrix(&self) -> &[f32] {
        &self.relations
    }

    pub fn entity_matrix_mut(&mut self) -> &mut [f32] {
        &mut self.entities
    }

    pub fn relation_matrix_mut(&mut self) -> &mut [f32] {
        &mut self.relations
    }

    pub fn rows(&self) -> impl Iterator<Item = RowRef> {
        (0..self.num_entities)
            .map(RowRef::Entity)
            .chain((0..self.num_relations).map(RowRef::Relation))
    }

    pub fn is_finite(&self) -> bool {
        self.entities.iter().chain(&self.relations).all(|x| x.is_finite())
    }

    /// Largest Euclidean row norm over both matrices.
    pub fn max_row_norm(&self) -> f64 {
        self.rows()
            .map(|row| l2(self.row(row).iter().map(|&x| x as f64)))
            .fold(0.0, f64::max)
    }

    /// Writes the binary checkpoint: header then `E` and `R` as LE f32.
    pub fn save_checkpoint(&self, path: &Path, kind: ScoringKind, hash: Fingerprint) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = CheckpointHeader {
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            dim: self.dim,
            kind,
            hash,
        };
        header.write(&mut w).map_err(|e| Error::io(path, e))?;
        for x in self.entities.iter().chain(&self.relations) {
            w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header = CheckpointHeader::read(&mut r, path)?;
        let mut read_floats = |n: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|e| Error::Format {
                path: path.to_owned(),
                message: format!("truncated matrix data: {e}"),
            })?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let entities = read_floats(header.num_entities * header.dim)?;
        let relations = read_floats(header.num_relations * header.dim)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("{} trailing bytes", rest.len()),
            });
        }
        let params = Parameters::from_matrices(
            header.num_entities,
            header.num_relations,
            header.dim,
            entities,
            relations,
        )?;
        Ok((params, header))
    }
}

impl EmbeddingView for Parameters {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_entities(&self) -> usize {
        self.num_entities
    }

    fn num_relations(&self) -> usize {
        self.num_relations
    }

    fn entity_into(&self, e: EntityId, out: &mut [f64]) {
        widen(self.entity(e), out);
    }

    fn relation_into(&self, r: RelationId, out: &mut [f64]) {
        widen(self.relation(r), out);
    }
}

pub(crate) fn widen(src: &[f32], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(src) {
        *o = x as f64;
    }
}

pub(crate) fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|x| x * x).sum::<f64>().sqrt()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GRCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    pub kind: ScoringKind,
    pub hash: Fingerprint,
}

impl CheckpointHeader {
    /// magic(4) version(4) |E|(8) |R|(8) h(4) kind(1) hash(8)
    pub const SIZE: usize = 37;

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_entities as u64).to_le_bytes())?;
        w.write_all(&(self.num_relations as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.kind.code()])?;
        w.write_all(&self.hash.0.to_le_bytes())
    }

    fn read<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let mut buf = [0u8; Self::SIZE];
        r.read_exact(&mut buf).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: format!("truncated header: {e}"),
        })?;
        let bad = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        if &buf[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let kind = ScoringKind::from_code(buf[28]).ok_or_else(|| bad(format!("bad scoring code {}", buf[28])))?;
        Ok(CheckpointHeader {
            num_entities: u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize,
            num_relations: u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize,
            dim: u32::from_le_bytes(buf[24..28].try_into().unwrap()) as usize,
            kind,
            hash: Fingerprint(u64::from_le_bytes(buf[29..37].try_into().unwrap())),
        })
    }
}

/// Gradient restricted to the rows one example touches. Each row appears once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    rows: Vec<(RowRef, Vec<f64>)>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `coeff * g` to `row`, creating the row if needed.
    pub fn accumulate(&mut self, row: RowRef, g: &[f64], coeff: f64) {
        match self.rows.iter_mut().find(|(r, _)| *r == row) {
            Some((_, acc)) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += coeff * x;
                }
            }
            None => self.rows.push((row, g.iter().map(|&x| coeff * x).collect())),
        }
    }

    pub fn get(&self, row: RowRef) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(r, _)| *r == row)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (RowRef, &[f64])> {
        self.rows.iter().map(|(r, g)| (*r, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2(self.rows.iter().flat_map(|(_, g)| g.iter().copied()))
    }

    /// Euclidean distance to `other`, treating missing rows as zero.
    pub fn distance(&self, other: &SparseGrad) -> f64 {
        let mut sq = 0.0;
        for (row, g) in &self.rows {
            match other.get(*row) {
                Some(h) => sq += g.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                None => sq += g.iter().map(|a| a * a).sum::<f64>(),
            }
        }
        for (row, h) in &other.rows {
            if self.get(*row).is_none() {
                sq += h.iter().map(|a| a * a).sum::<f64>();
            }
        }
        sq.sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `q` such that `phi(s, r, o) = <q, o>`; both scoring functions are linear
/// in the object embedding.
fn object_query(kind: ScoringKind, s: &[f64], r: &[f64]) -> Vec<f64> {
    match kind {
        ScoringKind::DistMult => s.iter().zip(r).map(|(a, b)| a * b).collect(),
        ScoringKind::ComplEx => {
            let k = s.len() / 2;
            let (sa, sb) = s.split_at(k);
            let (ra, rb) = r.split_at(k);
            let mut q = vec![0.0; s.len()];
            for i in 0..k {
                q[i] = sa[i] * ra[i] - sb[i] * rb[i];
                q[k + i] = sb[i] * ra[i] + sa[i] * rb[i];
            }
            q
        }
    }
}

fn score_rows(kind: ScoringKind, s: &[f64], r: &[f64], o: &[f64]) -> f64 {
    dot(&object_query(kind, s, r), o)
}

/// Partial derivatives of the score with respect to the three rows.
fn partials(kind: ScoringKind, s: &[f64], r: &[f64], o: &[f64]) -> [Vec<f64>; 3] {
    match kind {
        ScoringKind::DistMult => [
            r.iter().zip(o).map(|(a, b)| a * b).collect(),
            s.iter().zip(o).map(|(a, b)| a * b).collect(),
            s.iter().zip(r).map(|(a, b)| a * b).collect(),
        ],
        ScoringKind::ComplEx => {
            let k = s.len() / 2;
            let (sa, sb) = s.split_at(k);
            let (ra, rb) = r.split_at(k);
            let (oa, ob) = o.split_at(k);
            let mut gs = vec![0.0; s.len()];
            let mut gr = vec![0.0; s.len()];
            for i in 0..k {
                gs[i] = ra[i] * oa[i] + rb[i] * ob[i];
                gs[k + i] = ra[i] * ob[i] - rb[i] * oa[i];
                gr[i] = sa[i] * oa[i] + sb[i] * ob[i];
                gr[k + i] = sa[i] * ob[i] - sb[i] * oa[i];
            }
            [gs, gr, object_query(kind, s, r)]
        }
    }
}

fn check_triple<V: EmbeddingView + ?Sized>(view: &V, kind: ScoringKind, d: &Triple) -> Result<()> {
    kind.check_dim(view.dim())?;
    if d.s >= view.num_entities() || d.o >= view.num_entities() {
        return Err(Error::InvalidArgument(format!(
            "entity id out of range in {d:?} (|E| = {})",
            view.num_entities()
        )));
    }
    if d.r >= view.num_relations() {
        return Err(Error::InvalidArgument(format!(
            "relation id out of range in {d:?} (|R| = {})",
            view.num_relations()
        )));
    }
    Ok(())
}

pub fn score<V: EmbeddingView + ?Sized>(view: &V, kind: ScoringKind, d: &Triple) -> Result<f64> {
    check_triple(view, kind, d)?;
    Ok(score_rows(
        kind,
        &view.entity_vec(d.s),
        &view.relation_vec(d.r),
        &view.entity_vec(d.o),
    ))
}

/// Gradient of the score with respect to the rows of `d`.
pub fn score_grad<V: EmbeddingView + ?Sized>(view: &V, kind: ScoringKind, d: &Triple) -> Result<SparseGrad> {
    check_triple(view, kind, d)?;
    let (s, r, o) = (view.entity_vec(d.s), view.relation_vec(d.r), view.entity_vec(d.o));
    let [gs, gr, go] = partials(kind, &s, &r, &o);
    let mut grad = SparseGrad::new();
    grad.accumulate(RowRef::Entity(d.s), &gs, 1.0);
    grad.accumulate(RowRef::Relation(d.r), &gr, 1.0);
    grad.accumulate(RowRef::Entity(d.o), &go, 1.0);
    Ok(grad)
}

/// Scores of `(s, r, o')` for every entity `o'`.
pub fn object_scores<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    s: EntityId,
    r: RelationId,
) -> Result<Vec<f64>> {
    check_triple(view, kind, &Triple::new(s, r, s))?;
    let q = object_query(kind, &view.entity_vec(s), &view.relation_vec(r));
    let mut row = vec![0.0; view.dim()];
    Ok((0..view.num_entities())
        .map(|e| {
            view.entity_into(e, &mut row);
            dot(&q, &row)
        })
        .collect())
}

/// Softmax of `logits`, computed with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `Pr(o | s, r)` normalized over `candidates` (which must contain `o`).
pub fn softmax_prob<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    s: EntityId,
    r: RelationId,
    o: EntityId,
    candidates: &[EntityId],
) -> Result<f64> {
    check_triple(view, kind, &Triple::new(s, r, o))?;
    let pos = candidates
        .iter()
        .position(|&c| c == o)
        .ok_or_else(|| Error::InvalidArgument(format!("object {o} is not among the candidates")))?;
    let q = object_query(kind, &view.entity_vec(s), &view.relation_vec(r));
    let mut row = vec![0.0; view.dim()];
    let mut logits = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c >= view.num_entities() {
            return Err(Error::InvalidArgument(format!("candidate {c} out of range")));
        }
        view.entity_into(c, &mut row);
        logits.push(dot(&q, &row));
    }
    Ok(softmax(&logits)[pos])
}

/// `Pr(o | s, r)` normalized over every entity.
pub fn object_probability<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    s: EntityId,
    r: RelationId,
    o: EntityId,
) -> Result<f64> {
    check_triple(view, kind, &Triple::new(s, r, o))?;
    Ok(softmax(&object_scores(view, kind, s, r)?)[o])
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of one training example and its exact gradient over every touched
/// row (gold subject, relation, object and each negative object).
pub fn loss_and_grad<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    loss: LossKind,
    d: &Triple,
    negatives: &[EntityId],
) -> Result<(f64, SparseGrad)> {
    check_triple(view, kind, d)?;
    if negatives.contains(&d.o) {
        return Err(Error::InvalidArgument("negatives must exclude the gold object".into()));
    }
    let s = view.entity_vec(d.s);
    let r = view.relation_vec(d.r);
    let mut objects = Vec::with_capacity(negatives.len() + 1);
    objects.push(d.o);
    objects.extend_from_slice(negatives);
    let rows: Vec<Vec<f64>> = objects
        .iter()
        .map(|&e| {
            if e >= view.num_entities() {
                Err(Error::InvalidArgument(format!("negative {e} out of range")))
            } else {
                Ok(view.entity_vec(e))
            }
        })
        .collect::<Result<_>>()?;
    let logits: Vec<f64> = rows.iter().map(|o| score_rows(kind, &s, &r, o)).collect();

    let (value, coeffs) = match loss {
        LossKind::Softmax => {
            let lse = log_sum_exp(&logits);
            let mut c: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            c[0] -= 1.0;
            (lse - logits[0], c)
        }
        LossKind::Sigmoid => {
            let mut value = softplus(-logits[0]);
            let mut c = vec![sigmoid(logits[0]) - 1.0];
            for &z in &logits[1..] {
                value += softplus(z);
                c.push(sigmoid(z));
            }
            (value, c)
        }
    };

    let mut grad = SparseGrad::new();
    for ((&e, o), &c) in objects.iter().zip(&rows).zip(&coeffs) {
        let [gs, gr, go] = partials(kind, &s, &r, o);
        grad.accumulate(RowRef::Entity(d.s), &gs, c);
        grad.accumulate(RowRef::Relation(d.r), &gr, c);
        grad.accumulate(RowRef::Entity(e), &go, c);
    }
    Ok((value, grad))
}

/// Highest-scoring object for `(s, r, ?)` outside `exclude`; ties go to the
/// lowest entity id.
pub fn predict_top<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    s: EntityId,
    r: RelationId,
    exclude: &BTreeSet<EntityId>,
) -> Result<EntityId> {
    let scores = object_scores(view, kind, s, r)?;
    argmax_excluding(&scores, exclude)
        .ok_or_else(|| Error::InvalidArgument("every entity is excluded".into()))
}

pub(crate) fn argmax_excluding(scores: &[f64], exclude: &BTreeSet<EntityId>) -> Option<EntityId> {
    let mut best: Option<(EntityId, f64)> = None;
    for (e, &v) in scores.iter().enumerate() {
        if exclude.contains(&e) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((e, v));
        }
    }
    best.map(|(e, _)| e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    /// Percent.
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_10: f64,
    pub count: usize,
}

/// Object-prediction ranking metrics in percent.
///
/// In the filtered setting every other object known to be true for `(s, r)`
/// in any of `known` is removed from the ranking. Ties with the gold score
/// count half, the usual "realistic" rank.
pub fn rank_metrics<V: EmbeddingView + ?Sized>(
    view: &V,
    kind: ScoringKind,
    test: &TripleStore,
    known: &[&TripleStore],
    filtered: bool,
) -> Result<RankMetrics> {
    use std::collections::HashMap;

    let mut truth: HashMap<(EntityId, RelationId), BTreeSet<EntityId>> = HashMap::new();
    if filtered {
        for store in known {
            for t in store.triples() {
                truth.entry((t.s, t.r)).or_default().insert(t.o);
            }
        }
    }
    let empty = BTreeSet::new();
    let (mut rr, mut h1, mut h10) = (0.0, 0.0, 0.0);
    for t in test.triples() {
        let scores = object_scores(view, kind, t.s, t.r)?;
        let gold = scores[t.o];
        let others = truth.get(&(t.s, t.r)).unwrap_or(&empty);
        let (mut above, mut ties) = (0usize, 0usize);
        for (e, &v) in scores.iter().enumerate() {
            if e == t.o || others.contains(&e) {
                continue;
            }
            if v > gold {
                above += 1;
            } else if v == gold {
                ties += 1;
            }
        }
        let rank = 1.0 + above as f64 + ties as f64 / 2.0;
        rr += 1.0 / rank;
        h1 += (rank <= 1.0) as u8 as f64;
        h10 += (rank <= 10.0) as u8 as f64;
    }
    let n = test.len().max(1) as f64;
    Ok(RankMetrics {
        mrr: 100.0 * rr / n,
        hits_at_1: 100.0 * h1 / n,
        hits_at_10: 100.0 * h10 / n,
        count: test.len(),
    })
}
