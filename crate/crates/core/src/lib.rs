//! Linking open information extraction triples to knowledge-graph facts.
//!
//! The crate covers benchmark construction (alignment, alias augmentation,
//! leakage removal, evaluation facets) and the linking stack: a contrastive
//! pre-ranker over per-slot embeddings, a fact re-ranker trained with hard
//! negatives, and out-of-KG detectors.

pub mod benchmark;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod kg;
pub mod ookg;
pub mod preranker;
pub mod reranker;
pub mod rng;
pub mod splits;
pub mod synth;
pub mod text;

pub use corpus::{Alignment, OieTriple, Partition, SentenceFactPair};
pub use encoder::{Embedding, Encoder, EncoderConfig, ImportedEmbeddings, ReferenceEncoder, Slot};
pub use error::{Error, Result};
pub use kg::{EntryKind, KgEntry, KgFact, KgStore};
pub use text::Normalizer;
