//! Synthetic fixtures: random embedding spaces, exact and noisy rotations,
//! and character-substitution cipher languages.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dictionary::{BilingualDictionary, DictionaryRole};
use crate::embeddings::EmbeddingMatrix;
use crate::mlm::PromptTemplate;
use crate::tokenizer::{SubwordVocabulary, SPECIAL_TOKENS};

/// Source side of the cipher alphabet.
pub const CIPHER_SOURCE_ALPHABET: &str = "abcdefghij";
/// Target side; `a` maps to the first letter here after the fixed shuffle.
pub const CIPHER_TARGET_ALPHABET: &str = "kmprtvwxyz";

/// Standard-normal rows scaled to unit length, named `{prefix}{i}`.
pub fn random_embeddings<R: Rng>(rng: &mut R, prefix: &str, count: usize, dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows((0..count).map(|i| {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        (format!("{prefix}{i}"), unit_f32(&v))
    }))
    .expect("rows share a dimension")
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|a| (a / norm) as f32).collect()
}

/// A Haar-distributed orthogonal matrix from the QR decomposition of a
/// Gaussian matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Rows `R·x_i + ε` with `ε ~ N(0, sigma²)` per coordinate, rescaled to unit
/// length, named `{prefix}{i}`.
pub fn rotated_copy<R: Rng>(
    x: &EmbeddingMatrix,
    rotation: &DMatrix<f64>,
    sigma: f64,
    rng: &mut R,
    prefix: &str,
) -> EmbeddingMatrix {
    let words: Vec<String> = (0..x.len()).map(|i| format!("{prefix}{i}")).collect();
    rotated_copy_named(x, rotation, sigma, rng, &words)
}

/// Like [`rotated_copy`] with explicit target words, one per source row.
pub fn rotated_copy_named<R: Rng>(
    x: &EmbeddingMatrix,
    rotation: &DMatrix<f64>,
    sigma: f64,
    rng: &mut R,
    words: &[String],
) -> EmbeddingMatrix {
    assert_eq!(words.len(), x.len());
    EmbeddingMatrix::from_rows((0..x.len()).map(|i| {
        let row = nalgebra::DVector::from_iterator(x.dim(), x.row(i).iter().map(|&v| f64::from(v)));
        let mut z: Vec<f64> = (rotation * row).iter().copied().collect();
        if sigma > 0.0 {
            z.iter_mut()
                .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
        }
        (words[i].clone(), unit_f32(&z))
    }))
    .expect("rows share a dimension")
}

/// Applies the fixed character substitution to a source-alphabet word.
/// Characters outside the source alphabet pass through unchanged.
pub fn cipher_word(word: &str) -> String {
    const SHUFFLE: [usize; 10] = [3, 7, 0, 9, 5, 1, 8, 2, 6, 4];
    let target: Vec<char> = CIPHER_TARGET_ALPHABET.chars().collect();
    word.chars()
        .map(|c| match CIPHER_SOURCE_ALPHABET.find(c) {
            Some(i) => target[SHUFFLE[i]],
            None => c,
        })
        .collect()
}

/// `count` distinct words over the source alphabet with lengths in `lengths`.
pub fn random_words<R: Rng>(rng: &mut R, count: usize, lengths: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let alphabet: Vec<char> = CIPHER_SOURCE_ALPHABET.chars().collect();
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(lengths.clone());
        let w: String = (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A cipher language: distinct source words, their ciphered targets and a
/// disjoint train/test split of the first `train + test` words.
#[derive(Debug, Clone)]
pub struct CipherFixture {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    pub train: BilingualDictionary,
    pub test: BilingualDictionary,
}

impl CipherFixture {
    pub fn generate<R: Rng>(rng: &mut R, train: usize, test: usize, total: usize, max_len: usize) -> Self {
        assert!(train + test <= total);
        let mut source_words = random_words(rng, total, 1..=max_len);
        source_words.shuffle(rng);
        let target_words: Vec<String> = source_words.iter().map(|w| cipher_word(w)).collect();
        let pair = |i: usize| (source_words[i].clone(), target_words[i].clone());
        Self {
            train: BilingualDictionary::new((0..train).map(pair), DictionaryRole::Train),
            test: BilingualDictionary::new((train..train + test).map(pair), DictionaryRole::Test),
            source_words,
            target_words,
        }
    }

    /// Every word of both languages, for vocabulary training.
    pub fn corpus(&self) -> Vec<String> {
        self.source_words.iter().chain(&self.target_words).cloned().collect()
    }
}

/// Specials, one token per cipher letter, and each template word whole.
pub fn cipher_vocabulary(template: &PromptTemplate) -> SubwordVocabulary {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        CIPHER_SOURCE_ALPHABET
            .chars()
            .chain(CIPHER_TARGET_ALPHABET.chars())
            .map(|c| c.to_string()),
    );
    for word in template.words() {
        if !tokens.iter().any(|t| t == word) {
            tokens.push(word.to_string());
        }
    }
    SubwordVocabulary::from_tokens(tokens).expect("letters and template words are distinct")
}
