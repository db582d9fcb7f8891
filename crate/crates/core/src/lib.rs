//! Joint named-entity recognition and relation extraction by filling an
//! upper-triangular label table over the words of a sentence.
//!
//! The diagonal of the table carries BILOU entity labels; the cells above
//! it carry direction-tagged relation labels between word pairs. A
//! contextual encoder produces word vectors by pooling subword embeddings,
//! a sequential tagger fills the diagonal left to right, and a relation
//! head scores every cell at once with per-relation query/key dot
//! products. Gold relations are replicated span-wise across the cross
//! product of their argument spans at training time; predicted tables are
//! aggregated back into entity spans and relation triples.

pub mod corpus;
pub mod demo;
pub mod encoder;
pub mod eval;
pub mod math;
pub mod model;
pub mod ner;
pub mod rel;
pub mod subword;
pub mod table;
pub mod trainer;

use serde::{Deserialize, Serialize};

/// How per-position (and per-cell) cross-entropies are reduced within one
/// sentence. Batches always average over sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

pub use corpus::{Document, LabelSchema, Sentence};
pub use model::{Model, ModelConfig, PredictOptions, SentencePrediction};
pub use trainer::{fit, grad_check, lr_at, TrainConfig};
