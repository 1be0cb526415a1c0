//! Bilingual lexicon induction toolkit.
//!
//! The pipeline has two halves. Static embeddings of two languages are
//! aligned into a shared space ([`alignment`]) and yield top-K translation
//! candidates per source word. Separately, a small masked language model
//! ([`mlm`]) is finetuned on a seed dictionary through a padded cloze prompt:
//! the source word's sub-tokens followed by a fixed run of `[MASK]` slots that
//! the model fills with the target's sub-tokens or `[PAD]`. The model then
//! either generates translations directly or re-ranks the alignment
//! candidates ([`translate`]). [`eval`] scores both with P@K.

pub mod alignment;
pub mod dictionary;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod mlm;
pub mod synthetic;
pub mod tokenizer;
pub mod translate;

pub use alignment::{AlignmentConfig, CandidateSet, LinearMapping, Retrieval};
pub use dictionary::{BilingualDictionary, DictionaryRole};
pub use embeddings::EmbeddingMatrix;
pub use error::{Error, Result};
pub use eval::{EvaluationReport, FewShotConfig};
pub use manifest::RunManifest;
pub use mlm::{MaskedLm, ModelConfig, PromptTemplate, TrainingConfig};
pub use tokenizer::{PaddedSpan, SubwordVocabulary, TokenId};
pub use translate::{RerankConfig, RerankTrace};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
