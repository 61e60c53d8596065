//! Gradient Rollback for knowledge-graph embedding models.
//!
//! Trains DistMult or ComplEx with single-example updates while recording,
//! for every training triple, the total change it made to its own embedding
//! rows. Subtracting that record approximates the model retrained without
//! the triple, which drives influence explanations and their evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fingerprint;
pub mod ledger;
pub mod model;
pub mod trainer;

pub use dataset::{AdjacencyIndex, EntityId, RelationId, Split, Triple, TripleId, TripleStore, Vocab};
pub use error::{Error, Result};
pub use fingerprint::Fingerprint;

pub use ledger::InfluenceLedger;
pub use model::{EmbeddingView, LossKind, Parameters, ScoringKind};
pub use trainer::{train, TrainConfig};
