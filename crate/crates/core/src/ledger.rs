//! The influence ledger: for every training triple, the accumulated change
//! it made to its own subject, relation and object rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{EntityId, RelationId, Triple, TripleId, TripleStore};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::model::EmbeddingView;
use crate::trainer::{Step, TrainObserver, UpdateDelta};

const MAGIC: &[u8; 4] = b"GRLG";
const VERSION: u32 = 1;

/// Dense store of three `h`-vectors per triple id.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceLedger {
    dim: usize,
    len: usize,
    hash: Fingerprint,
    data: Vec<f32>,
}

impl InfluenceLedger {
    /// magic(4) version(4) h(4) |D|(8) hash(8)
    pub const HEADER_SIZE: usize = 28;

    /// Zero ledger for ids `0..len`.
    pub fn new(dim: usize, len: usize, hash: Fingerprint) -> Self {
        InfluenceLedger {
            dim,
            len,
            hash,
            data: vec![0.0; 3 * dim * len],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hash(&self) -> Fingerprint {
        self.hash
    }

    pub fn num_floats(&self) -> usize {
        self.data.len()
    }

    fn check_id(&self, id: TripleId) -> Result<usize> {
        if id.0 < self.len {
            Ok(id.0 * 3 * self.dim)
        } else {
            Err(Error::UnknownTriple(id))
        }
    }

    pub fn record(&mut self, delta: &UpdateDelta) -> Result<()> {
        let base = self.check_id(delta.triple)?;
        for part in [&delta.s, &delta.r, &delta.o] {
            if part.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    actual: part.len(),
                });
            }
        }
        let h = self.dim;
        let dst = &mut self.data[base..base + 3 * h];
        for (k, part) in [&delta.s, &delta.r, &delta.o].into_iter().enumerate() {
            for (g, &x) in dst[k * h..(k + 1) * h].iter_mut().zip(part.iter()) {
                *g += x as f32;
            }
        }
        Ok(())
    }

    /// `(gamma_s, gamma_r, gamma_o)` of one triple.
    pub fn gamma(&self, id: TripleId) -> Result<[&[f32]; 3]> {
        let base = self.check_id(id)?;
        let h = self.dim;
        Ok([
            &self.data[base..base + h],
            &self.data[base + h..base + 2 * h],
            &self.data[base + 2 * h..base + 3 * h],
        ])
    }

    /// Influence `d_prime` recorded on the rows of `d`.
    ///
    /// Entity rows match by row, so `d'`'s object record lands on `d.s` when
    /// `d'.o == d.s`. When `d.s == d.o` the single entity row is reported in
    /// the subject slot only.
    pub fn lookup(&self, d_prime: TripleId, d: &Triple, store: &TripleStore) -> Result<RollbackSlice> {
        let dp = store.get(d_prime).ok_or(Error::UnknownTriple(d_prime))?;
        let [gs, gr, go] = self.gamma(d_prime)?;
        let entity_part = |x: EntityId| -> Option<Vec<f64>> {
            let mut acc: Option<Vec<f64>> = None;
            for (hit, g) in [(dp.s == x, gs), (dp.o == x, go)] {
                if hit {
                    let acc = acc.get_or_insert_with(|| vec![0.0; self.dim]);
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v as f64;
                    }
                }
            }
            acc
        };
        let s = entity_part(d.s);
        let o = if d.o == d.s { None } else { entity_part(d.o) };
        let r = (dp.r == d.r).then(|| gr.iter().map(|&v| v as f64).collect());
        Ok(RollbackSlice { s, r, o })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.hash.0.to_le_bytes()).map_err(io)?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads a ledger, refusing one written for a different model.
    pub fn load(path: &Path, expected: Option<Fingerprint>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let mut header = [0u8; Self::HEADER_SIZE];
        r.read_exact(&mut header)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        if &header[0..4] != MAGIC {
            return Err(bad("not a ledger (bad magic)".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported ledger version {version}")));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let hash = Fingerprint(u64::from_le_bytes(header[20..28].try_into().unwrap()));
        if let Some(expected) = expected {
            if expected != hash {
                return Err(Error::Mismatch(format!(
                    "ledger {} was written for model {hash}, not {expected}",
                    path.display()
                )));
            }
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 3 * dim * len * 4 {
            return Err(bad(format!(
                "expected {} bytes of records, found {}",
                3 * dim * len * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(InfluenceLedger { dim, len, hash, data })
    }
}

impl TrainObserver for InfluenceLedger {
    fn on_step(&mut self, step: &Step<'_>) -> Result<()> {
        self.record(step.delta)
    }
}

/// The part of one triple's record that touches the rows of another triple.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RollbackSlice {
    pub s: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub o: Option<Vec<f64>>,
}

impl RollbackSlice {
    pub fn is_empty(&self) -> bool {
        self.s.is_none() && self.r.is_none() && self.o.is_none()
    }

    pub fn norm(&self) -> f64 {
        [&self.s, &self.r, &self.o]
            .into_iter()
            .flatten()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `view` with the slice subtracted from the rows of `d`.
///
/// Every other row reads through unchanged. Views nest, so rolling back the
/// same slice twice subtracts it twice.
pub struct RollbackView<'a, V: EmbeddingView + ?Sized> {
    base: &'a V,
    s: Option<(EntityId, &'a [f64])>,
    r: Option<(RelationId, &'a [f64])>,
    o: Option<(EntityId, &'a [f64])>,
}

pub fn rollback<'a, V: EmbeddingView + ?Sized>(
    base: &'a V,
    slice: &'a RollbackSlice,
    d: &Triple,
) -> Result<RollbackView<'a, V>> {
    for part in [&slice.s, &slice.r, &slice.o].into_iter().flatten() {
        if part.len() != base.dim() {
            return Err(Error::Dimension {
                expected: base.dim(),
                actual: part.len(),
            });
        }
    }
    Ok(RollbackView {
        base,
        s: slice.s.as_deref().map(|v| (d.s, v)),
        r: slice.r.as_deref().map(|v| (d.r, v)),
        o: slice.o.as_deref().map(|v| (d.o, v)),
    })
}

fn subtract(out: &mut [f64], v: &[f64]) {
    for (a, b) in out.iter_mut().zip(v) {
        *a -= b;
    }
}

impl<V: EmbeddingView + ?Sized> EmbeddingView for RollbackView<'_, V> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn num_entities(&self) -> usize {
        self.base.num_entities()
    }

    fn num_relations(&self) -> usize {
        self.base.num_relations()
    }

    fn entity_into(&self, e: EntityId, out: &mut [f64]) {
        self.base.entity_into(e, out);
        for (row, v) in [self.s, self.o].into_iter().flatten() {
            if row == e {
                subtract(out, v);
            }
        }
    }

    fn relation_into(&self, r: RelationId, out: &mut [f64]) {
        self.base.relation_into(r, out);
        if let Some((row, v)) = self.r {
            if row == r {
                subtract(out, v);
            }
        }
    }
}
