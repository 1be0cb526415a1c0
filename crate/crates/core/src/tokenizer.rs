//! Subword vocabulary and greedy longest-match segmentation.
//!
//! Token ids form the contiguous range `[0, len)`. The first four ids are
//! reserved for `[CLS]`, `[MASK]`, `[PAD]` and `[UNK]`, in that order; these
//! never take part in the segmentation of a normal word.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const SPECIAL_TOKENS: [&str; 4] = [CLS_TOKEN, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN];

pub const CLS_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const PAD_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

/// Longest substring considered when learning a vocabulary.
const MAX_LEARNED_PIECE_CHARS: usize = 12;

/// An immutable token inventory with reserved special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordVocabulary {
    tokens: Vec<String>,
    // Normal (non-special) pieces only.
    pieces: HashMap<String, TokenId>,
    longest_piece: usize,
}

/// A fixed-length run of token ids: the sub-tokens of a word followed by `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PaddedSpan {
    ids: Vec<TokenId>,
    valid_len: usize,
}

impl PaddedSpan {
    /// Builds a span from raw ids, checking the PAD-suffix property.
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        let valid_len = ids.iter().position(|&id| id == PAD_ID).unwrap_or(ids.len());
        if ids[valid_len..].iter().any(|&id| id != PAD_ID) {
            return Err(Error::Config(format!("span {ids:?} has a non-PAD id after a PAD id")));
        }
        Ok(Self { ids, valid_len })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// The number of ids that are not `[PAD]`.
    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_ids(&self) -> &[TokenId] {
        &self.ids[..self.valid_len]
    }
}

impl SubwordVocabulary {
    /// Builds a vocabulary from an ordered token list whose first four
    /// entries are the special tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(t, s)| t != s)
        {
            return Err(Error::Config(format!("vocabulary must start with {SPECIAL_TOKENS:?}")));
        }
        let mut pieces = HashMap::with_capacity(tokens.len());
        let mut longest_piece = 0;
        for (id, token) in tokens.iter().enumerate().skip(SPECIAL_TOKENS.len()) {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {token:?} at id {id}")));
            }
            if SPECIAL_TOKENS.contains(&token.as_str()) || pieces.insert(token.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token {token:?} at id {id}")));
            }
            longest_piece = longest_piece.max(token.chars().count());
        }
        Ok(Self {
            tokens,
            pieces,
            longest_piece,
        })
    }

    /// Learns a vocabulary of at most `target_size` tokens covering every
    /// corpus word.
    ///
    /// All distinct characters are always included; the remaining slots go
    /// to the most frequent multi-character substrings (ties: longer first,
    /// then lexicographic). Substrings seen only once are never selected.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        let words: Vec<&str> = corpus.iter().map(AsRef::as_ref).filter(|w| !w.is_empty()).collect();
        if words.is_empty() {
            return Err(Error::Config("cannot train a vocabulary on an empty corpus".into()));
        }

        let mut alphabet: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        alphabet.retain(|c| !c.is_whitespace());
        let floor = SPECIAL_TOKENS.len() + alphabet.len();
        if target_size < floor {
            return Err(Error::Config(format!(
                "target size {target_size} cannot hold {} special tokens and {} characters",
                SPECIAL_TOKENS.len(),
                alphabet.len()
            )));
        }

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet.iter().map(|c| c.to_string()));

        let budget = target_size - floor;
        if budget > 0 {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for word in &words {
                let bounds: Vec<usize> = word
                    .char_indices()
                    .map(|(i, _)| i)
                    .chain(std::iter::once(word.len()))
                    .collect();
                let chars = bounds.len() - 1;
                for start in 0..chars {
                    let max_end = (start + MAX_LEARNED_PIECE_CHARS).min(chars);
                    for end in start + 2..=max_end {
                        let piece = &word[bounds[start]..bounds[end]];
                        if piece.chars().any(char::is_whitespace) {
                            break;
                        }
                        *counts.entry(piece).or_default() += 1;
                    }
                }
            }
            let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= 2).collect();
            ranked.sort_unstable_by(|a, b| {
                b.1.cmp(&a.1)
                    .then_with(|| b.0.chars().count().cmp(&a.0.chars().count()))
                    .then_with(|| a.0.cmp(b.0))
            });
            tokens.extend(ranked.into_iter().take(budget).map(|(p, _)| p.to_string()));
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        SPECIAL_TOKENS
            .iter()
            .position(|s| *s == token)
            .or_else(|| self.pieces.get(token).copied())
    }

    /// Greedy longest-match segmentation. Characters not covered by any
    /// piece become one `[UNK]` each.
    pub fn tokenize(&self, word: &str) -> Vec<TokenId> {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let chars = bounds.len() - 1;
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars {
            let max_end = (start + self.longest_piece).min(chars);
            let matched = (start + 1..=max_end)
                .rev()
                .find_map(|end| self.pieces.get(&word[bounds[start]..bounds[end]]).map(|&id| (id, end)));
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    start += 1;
                }
            }
        }
        out
    }

    /// Tokenizes `word` and pads it with `[PAD]` to exactly `n` ids.
    pub fn tokenize_padded(&self, word: &str, n: usize) -> Result<PaddedSpan> {
        if word.is_empty() {
            return Err(Error::Empty("cannot tokenize an empty word".into()));
        }
        let mut ids = self.tokenize(word);
        let valid_len = ids.len();
        if valid_len > n {
            return Err(Error::OverLength(valid_len));
        }
        ids.resize(n, PAD_ID);
        Ok(PaddedSpan { ids, valid_len })
    }

    /// Concatenates the surface strings of all non-PAD tokens.
    pub fn detokenize(&self, span: &PaddedSpan) -> String {
        self.detokenize_ids(span.ids())
    }

    /// Like [`detokenize`](Self::detokenize) but for an arbitrary id slice;
    /// `[PAD]` ids anywhere are dropped.
    pub fn detokenize_ids(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .filter_map(|&id| self.token(id))
            .collect()
    }

    /// True when `word` segments without `[UNK]` into at most `n` pieces.
    pub fn covers(&self, word: &str, n: usize) -> bool {
        let ids = self.tokenize(word);
        !ids.is_empty() && ids.len() <= n && !ids.contains(&UNK_ID)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        Self::from_tokens(tokens).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn digest(&self) -> String {
        crate::sha256_hex(self.to_text().as_bytes())
    }
}
