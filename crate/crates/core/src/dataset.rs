//! Triple files, vocabularies and the adjacency index.
//!
//! Triples are integer encoded against a [`Vocab`] built from the training
//! split. Every triple keeps the [`TripleId`] it was assigned at load time;
//! removing triples produces a new store in which the survivors keep their
//! original ids, which is what keeps the keyed negative sampling aligned
//! between a model and its retrains.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

/// Stable identifier of a training example: its line position in the file it
/// was loaded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TripleId(pub usize);

impl fmt::Display for TripleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
}

impl Triple {
    pub fn new(s: EntityId, r: RelationId, o: EntityId) -> Self {
        Triple { s, r, o }
    }

    /// True if the two triples share a subject/object entity or the relation.
    pub fn shares_element(&self, other: &Triple) -> bool {
        self.r == other.r
            || self.s == other.s
            || self.s == other.o
            || self.o == other.s
            || self.o == other.o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// What to do with a name that is not in a frozen vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownPolicy {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relation_ids: HashMap<String, RelationId>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from explicit name lists. Duplicates are rejected.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut vocab = Vocab::new();
        for name in entities {
            if vocab.entity_ids.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("duplicate entity `{name}`")));
            }
            vocab.intern_entity(&name);
        }
        for name in relations {
            if vocab.relation_ids.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("duplicate relation `{name}`")));
            }
            vocab.intern_relation(&name);
        }
        Ok(vocab)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_owned());
        self.entity_ids.insert(name.to_owned(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(name.to_owned());
        self.relation_ids.insert(name.to_owned(), id);
        id
    }

    /// Resolves `(s, r, o)` names against the vocabulary without extending it.
    pub fn encode(&self, s: &str, r: &str, o: &str) -> Result<Triple> {
        let entity = |name: &str| {
            self.entity_id(name).ok_or_else(|| Error::UnknownName {
                kind: "entity",
                name: name.to_owned(),
            })
        };
        let relation = self.relation_id(r).ok_or_else(|| Error::UnknownName {
            kind: "relation",
            name: r.to_owned(),
        })?;
        Ok(Triple::new(entity(s)?, relation, entity(o)?))
    }

    pub fn names(&self, t: &Triple) -> [&str; 3] {
        [
            self.entity_name(t.s),
            self.relation_name(t.r),
            self.entity_name(t.o),
        ]
    }

    /// Writes the two name files: one name per line, line number = id.
    pub fn save(&self, entities_path: &Path, relations_path: &Path) -> Result<()> {
        write_names(entities_path, &self.entities)?;
        write_names(relations_path, &self.relations)
    }

    pub fn load(entities_path: &Path, relations_path: &Path) -> Result<Self> {
        Vocab::from_names(read_names(entities_path)?, read_names(relations_path)?)
    }
}

fn write_names(path: &Path, names: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for name in names {
        writeln!(w, "{name}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

/// An ordered multiset of encoded triples with stable ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleStore {
    split: Split,
    /// Sorted by id.
    entries: Vec<(TripleId, Triple)>,
    removed: Vec<TripleId>,
    id_bound: usize,
}

impl TripleStore {
    pub fn new(split: Split, triples: Vec<Triple>) -> Self {
        let id_bound = triples.len();
        let entries = triples
            .into_iter()
            .enumerate()
            .map(|(i, t)| (TripleId(i), t))
            .collect();
        TripleStore {
            split,
            entries,
            removed: Vec::new(),
            id_bound,
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One past the largest id ever assigned in this store's lineage.
    pub fn id_bound(&self) -> usize {
        self.id_bound
    }

    /// Ids removed from the original store, ascending.
    pub fn removed(&self) -> &[TripleId] {
        &self.removed
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (TripleId, Triple)> + '_ {
        self.entries.iter().copied()
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = TripleId> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    pub fn triples(&self) -> impl ExactSizeIterator<Item = Triple> + '_ {
        self.entries.iter().map(|(_, t)| *t)
    }

    pub fn get(&self, id: TripleId) -> Option<Triple> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|pos| self.entries[pos].1)
    }

    pub fn contains_id(&self, id: TripleId) -> bool {
        self.get(id).is_some()
    }

    /// Returns a new store without `ids`. Survivors keep their original ids.
    pub fn remove_triples<'a>(&self, ids: impl IntoIterator<Item = &'a TripleId>) -> Result<Self> {
        let drop: BTreeSet<TripleId> = ids.into_iter().copied().collect();
        for id in &drop {
            if !self.contains_id(*id) {
                return Err(Error::UnknownTriple(*id));
            }
        }
        let entries = self
            .entries
            .iter()
            .filter(|(id, _)| !drop.contains(id))
            .copied()
            .collect();
        let mut removed: Vec<TripleId> = self.removed.iter().copied().chain(drop).collect();
        removed.sort_unstable();
        Ok(TripleStore {
            split: self.split,
            entries,
            removed,
            id_bound: self.id_bound,
        })
    }

    /// Largest entity and relation id referenced, plus one.
    pub fn extent(&self) -> (usize, usize) {
        self.entries.iter().fold((0, 0), |(e, r), (_, t)| {
            (e.max(t.s + 1).max(t.o + 1), r.max(t.r + 1))
        })
    }

    /// Writes the store as a TSV triple file using `vocab` names.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (_, t) in &self.entries {
            let [s, r, o] = vocab.names(t);
            writeln!(w, "{s}\t{r}\t{o}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads a TSV triple file.
///
/// With `vocab == None` a fresh vocabulary is built in first-seen order. With
/// a frozen vocabulary, lines naming unknown entities or relations are handled
/// according to `policy`.
pub fn load_triples(
    path: &Path,
    vocab: Option<&Vocab>,
    split: Split,
    policy: UnknownPolicy,
) -> Result<(TripleStore, Vocab)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_triples(BufReader::new(file), path, vocab, split, policy)
}

pub fn parse_triples<R: BufRead>(
    reader: R,
    source: &Path,
    vocab: Option<&Vocab>,
    split: Split,
    policy: UnknownPolicy,
) -> Result<(TripleStore, Vocab)> {
    let frozen = vocab.is_some();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let mut triples = Vec::new();
    let mut skipped = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: idx + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (s, r, o) = (fields[0], fields[1], fields[2]);
        if frozen {
            match vocab.encode(s, r, o) {
                Ok(t) => triples.push(t),
                Err(err) => match policy {
                    UnknownPolicy::Error => {
                        return Err(Error::Parse {
                            path: source.to_owned(),
                            line: idx + 1,
                            message: err.to_string(),
                        })
                    }
                    UnknownPolicy::Skip => skipped += 1,
                },
            }
        } else {
            let s = vocab.intern_entity(s);
            let r = vocab.intern_relation(r);
            let o = vocab.intern_entity(o);
            triples.push(Triple::new(s, r, o));
        }
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} lines with names outside the training vocabulary",
            source.display()
        );
    }
    Ok((TripleStore::new(split, triples), vocab))
}

/// JSON manifest of removed ids, written next to every retrain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalManifest {
    pub config_hash: String,
    pub removed: Vec<TripleId>,
}

impl RemovalManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Inverted indexes from entities and relations to the triples using them.
#[derive(Debug, Clone)]
pub struct AdjacencyIndex {
    by_entity: Vec<Vec<TripleId>>,
    by_relation: Vec<Vec<TripleId>>,
}

impl AdjacencyIndex {
    pub fn build(store: &TripleStore, num_entities: usize, num_relations: usize) -> Self {
        let (e, r) = store.extent();
        let mut by_entity = vec![Vec::new(); num_entities.max(e)];
        let mut by_relation = vec![Vec::new(); num_relations.max(r)];
        for (id, t) in store.iter() {
            by_entity[t.s].push(id);
            if t.o != t.s {
                by_entity[t.o].push(id);
            }
            by_relation[t.r].push(id);
        }
        AdjacencyIndex {
            by_entity,
            by_relation,
        }
    }

    pub fn entity_hits(&self, e: EntityId) -> &[TripleId] {
        self.by_entity.get(e).map_or(&[], Vec::as_slice)
    }

    pub fn relation_hits(&self, r: RelationId) -> &[TripleId] {
        self.by_relation.get(r).map_or(&[], Vec::as_slice)
    }

    /// Training triples sharing at least one of `d`'s subject, relation or
    /// object, ascending by id. Triples equal to `d` are dropped unless
    /// `include_identical` is set.
    pub fn adjacent(&self, d: &Triple, store: &TripleStore, include_identical: bool) -> Vec<TripleId> {
        let mut hits: Vec<TripleId> = self
            .entity_hits(d.s)
            .iter()
            .chain(self.entity_hits(d.o))
            .chain(self.relation_hits(d.r))
            .copied()
            .collect();
        hits.sort_unstable();
        hits.dedup();
        if !include_identical {
            hits.retain(|id| store.get(*id).is_some_and(|t| t != *d));
        }
        hits
    }
}

/// The three splits of a benchmark directory sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: TripleStore,
    pub valid: TripleStore,
    pub test: TripleStore,
}

impl Dataset {
    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`. The
    /// vocabulary comes from the training split; evaluation lines with unseen
    /// names follow `policy`.
    pub fn load_dir(dir: &Path, policy: UnknownPolicy) -> Result<Self> {
        let (train, vocab) = load_triples(&dir.join("train.txt"), None, Split::Train, policy)?;
        let (valid, _) = load_triples(&dir.join("valid.txt"), Some(&vocab), Split::Valid, policy)?;
        let (test, _) = load_triples(&dir.join("test.txt"), Some(&vocab), Split::Test, policy)?;
        Ok(Dataset {
            vocab,
            train,
            valid,
            test,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<(TripleStore, Vocab)> {
        parse_triples(
            Cursor::new(text),
            Path::new("mem.tsv"),
            None,
            Split::Train,
            UnknownPolicy::Error,
        )
    }

    #[test]
    fn two_lines_encode_three_entities() {
        let (store, vocab) = parse("a\tr1\tb\nb\tr1\tc\n").unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(vocab.num_entities(), 3);
        assert_eq!(vocab.num_relations(), 1);
        assert_eq!(store.get(TripleId(1)), Some(Triple::new(1, 0, 2)));
    }

    #[test]
    fn empty_input_is_empty_store() {
        let (store, vocab) = parse("").unwrap();
        assert!(store.is_empty());
        assert_eq!(vocab.num_entities(), 0);
        assert_eq!(vocab.num_relations(), 0);
    }

    #[test]
    fn duplicate_lines_are_kept() {
        let (store, _) = parse("a\tr\tb\na\tr\tb\n").unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(TripleId(0)), store.get(TripleId(1)));
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse("a\tr\tb\na\tr\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn frozen_vocab_unknown_policy() {
        let (_, vocab) = parse("a\tr\tb\n").unwrap();
        let text = "a\tr\tb\na\tr\tzzz\n";
        let err = parse_triples(
            Cursor::new(text),
            Path::new("t"),
            Some(&vocab),
            Split::Test,
            UnknownPolicy::Error,
        );
        assert!(matches!(err, Err(Error::Parse { line: 2, .. })));
        let (store, v2) = parse_triples(
            Cursor::new(text),
            Path::new("t"),
            Some(&vocab),
            Split::Test,
            UnknownPolicy::Skip,
        )
        .unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(v2, vocab);
    }

    #[test]
    fn adjacent_excludes_self_and_strangers() {
        let store = TripleStore::new(Split::Train, vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3)]);
        let index = AdjacencyIndex::build(&store, 4, 2);
        assert!(index.adjacent(&Triple::new(0, 0, 1), &store, false).is_empty());
        assert_eq!(
            index.adjacent(&Triple::new(0, 0, 1), &store, true),
            vec![TripleId(0)]
        );
    }

    #[test]
    fn adjacent_by_each_position() {
        let store = TripleStore::new(
            Split::Train,
            vec![Triple::new(0, 1, 2), Triple::new(3, 5, 4), Triple::new(6, 7, 9)],
        );
        let index = AdjacencyIndex::build(&store, 10, 8);
        assert_eq!(
            index.adjacent(&Triple::new(0, 5, 9), &store, false),
            vec![TripleId(0), TripleId(1), TripleId(2)]
        );
    }

    #[test]
    fn out_of_vocab_query_has_no_hits() {
        let store = TripleStore::new(Split::Train, vec![Triple::new(0, 0, 1)]);
        let index = AdjacencyIndex::build(&store, 2, 1);
        assert!(index.adjacent(&Triple::new(40, 9, 41), &store, false).is_empty());
    }

    #[test]
    fn remove_keeps_original_ids() {
        let store = TripleStore::new(
            Split::Train,
            (0..5).map(|i| Triple::new(i, 0, i + 1)).collect(),
        );
        assert_eq!(store.remove_triples(&[]).unwrap(), store);
        let smaller = store.remove_triples(&[TripleId(2)]).unwrap();
        assert_eq!(smaller.len(), 4);
        let ids: Vec<_> = smaller.ids().map(|i| i.0).collect();
        assert_eq!(ids, vec![0, 1, 3, 4]);
        assert_eq!(smaller.get(TripleId(3)), Some(Triple::new(3, 0, 4)));
        assert_eq!(smaller.removed(), &[TripleId(2)]);
        assert_eq!(smaller.id_bound(), 5);

        let all: Vec<_> = store.ids().collect();
        assert!(store.remove_triples(&all).unwrap().is_empty());
        assert!(matches!(
            smaller.remove_triples(&[TripleId(2)]),
            Err(Error::UnknownTriple(TripleId(2)))
        ));
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(Vocab::from_names(vec!["a".into(), "a".into()], vec![]).is_err());
    }
}
