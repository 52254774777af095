//! Concept curation for image-text corpora.
//!
//! For each image-text pair the pipeline gathers candidate concepts from the
//! captions of visually similar images, scores how relevant each candidate is
//! to the image, and samples a small, diverse set of concept labels. The
//! [`objective`] module evaluates the contrastive losses those labels feed.
//!
//! Embeddings are inputs: images, captions and prompted concepts are embedded
//! upstream and stored in CEMB files (see [`corpus`]).

pub mod config;
pub mod corpus;
pub mod error;
pub mod expansion;
pub mod index;
pub mod objective;
pub mod pipeline;
pub mod ranking;
pub mod sampling;
pub mod synth;

pub use config::PipelineConfig;
pub use corpus::{extract_concepts, ConceptLexicon, Corpus, EmbeddingKind, EmbeddingMatrix, PairRecord};
pub use error::{Error, Result};
pub use expansion::{ArchiveEntry, ConceptArchive, ExpansionMode};
pub use index::{brute_force_top_n, cosine, Neighbor, VectorIndex};
pub use objective::{ContrastiveBatch, LossReport};
pub use pipeline::{AblationMode, CuratedRecord, CurationInputs};
pub use ranking::{prompt, ConceptTable, RankingMode, RelevancyScore};
pub use sampling::{ClusterAssignment, SampledConcepts, SamplingMode};
pub use synth::{SynthCorpus, SynthSpec, TruthRecord};
