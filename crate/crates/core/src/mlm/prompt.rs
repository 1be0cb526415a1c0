use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{PaddedSpan, SubwordVocabulary, TokenId, CLS_ID, MASK_ID};

/// Cloze template text: `[CLS] prefix <source span> infix <n × [MASK]>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: String,
    pub infix: String,
    pub language: Option<String>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: "The translation of the word".into(),
            infix: "is".into(),
            language: Some("en".into()),
        }
    }
}

impl PromptTemplate {
    /// Two lines: prefix, then infix. Either may be empty.
    pub fn from_text(text: &str) -> Self {
        let mut lines = text.lines();
        Self {
            prefix: lines.next().unwrap_or_default().trim().to_string(),
            infix: lines.next().unwrap_or_default().trim().to_string(),
            language: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_text(&fs::read_to_string(path)?))
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}\n", self.prefix, self.infix)
    }

    /// Words of the template text contribute to the corpus a vocabulary is
    /// trained on.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.prefix.split_whitespace().chain(self.infix.split_whitespace())
    }

    pub fn compile(&self, vocab: &SubwordVocabulary) -> CompiledTemplate {
        let ids = |text: &str| -> Vec<TokenId> { text.split_whitespace().flat_map(|w| vocab.tokenize(w)).collect() };
        CompiledTemplate {
            prefix: ids(&self.prefix),
            infix: ids(&self.infix),
        }
    }
}

/// A template whose text has been tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledTemplate {
    pub prefix: Vec<TokenId>,
    pub infix: Vec<TokenId>,
}

impl CompiledTemplate {
    /// Total prompt length for spans of length `n`.
    pub fn prompt_len(&self, n: usize) -> usize {
        1 + self.prefix.len() + n + self.infix.len() + n
    }
}

/// `[CLS] ⊕ prefix ⊕ source ⊕ infix ⊕ n × [MASK]`.
pub fn build_prompt(
    template: &CompiledTemplate,
    source: &PaddedSpan,
    n: usize,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if source.len() != n {
        return Err(Error::Shape(format!(
            "source span has length {}, expected {n}",
            source.len()
        )));
    }
    let len = template.prompt_len(n);
    if len > max_len {
        return Err(Error::PromptTooLong { len, max: max_len });
    }
    let mut out = Vec::with_capacity(len);
    out.push(CLS_ID);
    out.extend_from_slice(&template.prefix);
    out.extend_from_slice(source.ids());
    out.extend_from_slice(&template.infix);
    out.extend(std::iter::repeat_n(MASK_ID, n));
    Ok(out)
}
