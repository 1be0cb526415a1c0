//! Translation with a finetuned masked LM: direct generation of the padded
//! target span, and re-ranking of alignment candidates by combining their
//! cosine weights with the model's loss.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::{CandidateSet, SharedSpace};
use crate::error::{Error, Result};
use crate::eval::{span_skip_reason, SkipReason};
use crate::mlm::{build_prompt, mask_positions, CompiledTemplate, MaskedLm, PromptTemplate, Scalar};
use crate::tokenizer::{SubwordVocabulary, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    /// Softmax temperature applied to cosine scores.
    pub temperature: f64,
    /// Number of alignment candidates to re-rank.
    pub k: usize,
    /// Losses are clamped to at least this value before `1 / ln(1 + l)`.
    pub loss_floor: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            k: 10,
            loss_floor: 1e-6,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan()
            || self.temperature <= 0.0
            || self.k == 0
            || self.loss_floor.is_nan()
            || self.loss_floor <= 0.0
        {
            return Err(Error::Config(
                "temperature and loss floor must be positive, K at least 1".into(),
            ));
        }
        Ok(())
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// One re-ranked candidate. An infinite loss (candidate does not fit the
/// span) serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub word: String,
    pub cosine: f64,
    pub weight: f64,
    #[serde(with = "finite_or_null")]
    pub loss: f64,
    pub score: f64,
}

/// Audit record of one re-ranking query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrace {
    pub source: String,
    pub candidates: Vec<CandidateRecord>,
    /// Index into `candidates` of the chosen translation.
    pub selected: usize,
}

impl RerankTrace {
    pub fn selected_word(&self) -> &str {
        &self.candidates[self.selected].word
    }

    /// Candidate words ordered by decreasing combined score; ties keep the
    /// cosine order.
    pub fn reranked_words(&self) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            self.candidates[b]
                .score
                .total_cmp(&self.candidates[a].score)
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| self.candidates[i].word.clone()).collect()
    }
}

/// Temperature softmax over the candidate scores, shifted by the maximum.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `score_i = weight_i / ln(1 + max(loss_i, floor))`, zero for infinite
/// losses. Returns the argmax (lowest index on ties) and all scores. When no
/// candidate has a finite loss the first candidate is selected.
pub fn combine_and_select(weights: &[f64], losses: &[f64], config: &RerankConfig) -> Result<(usize, Vec<f64>)> {
    if weights.is_empty() {
        return Err(Error::Empty("candidate list".into()));
    }
    if weights.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} weights but {} losses",
            weights.len(),
            losses.len()
        )));
    }
    let scores: Vec<f64> = weights
        .iter()
        .zip(losses)
        .map(|(&w, &l)| {
            if l.is_finite() {
                w / (1.0 + l.max(config.loss_floor)).ln()
            } else {
                0.0
            }
        })
        .collect();
    if losses.iter().all(|l| !l.is_finite()) {
        warn!("no candidate fits the span; falling back to the cosine top-1");
        return Ok((0, scores));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Supplies the per-candidate loss used by re-ranking.
pub trait CandidateScorer {
    fn candidate_loss(&self, source: &str, candidate: &str) -> Result<f64>;

    /// Why `source` cannot be scored at all, if it cannot.
    fn skip_reason(&self, _source: &str) -> Option<SkipReason> {
        None
    }
}

/// Scores candidates with a finetuned masked LM.
#[derive(Debug, Clone)]
pub struct LmScorer<'a, F: Scalar = f32> {
    model: &'a MaskedLm<F>,
    vocab: &'a SubwordVocabulary,
    template: CompiledTemplate,
    span: usize,
}

impl<'a, F: Scalar> LmScorer<'a, F> {
    pub fn new(model: &'a MaskedLm<F>, vocab: &'a SubwordVocabulary, template: &PromptTemplate, span: usize) -> Self {
        Self {
            model,
            vocab,
            template: template.compile(vocab),
            span,
        }
    }

    fn prompt(&self, source: &str) -> Result<Vec<TokenId>> {
        let src = self.vocab.tokenize_padded(source, self.span)?;
        build_prompt(&self.template, &src, self.span, self.model.max_len())
    }

    /// Log-softmax rows at the masked positions of the prompt for `source`.
    pub fn masked_log_probs(&self, source: &str) -> Result<DMatrix<F>> {
        let prompt = self.prompt(source)?;
        self.model.masked_log_probs(&prompt, &mask_positions(&prompt))
    }

    /// Per-position argmax over the masked span (lowest id on ties).
    pub fn predict_span(&self, source: &str) -> Result<Vec<TokenId>> {
        let lp = self.masked_log_probs(source)?;
        Ok((0..lp.nrows())
            .map(|r| {
                let row = lp.row(r);
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn generate(&self, source: &str) -> Result<String> {
        Ok(self.vocab.detokenize_ids(&self.predict_span(source)?))
    }

    /// The `k` most probable distinct surface strings under the product of
    /// independent per-position probabilities, best first.
    pub fn generate_k_best(&self, source: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let lp = self.masked_log_probs(source)?;
        let lp = lp.map(|v| v.as_f64());
        let mut out: Vec<(String, f64)> = Vec::with_capacity(k);
        // Different spans can spell the same word; widen until k distinct.
        let mut budget = k;
        loop {
            let decodings = k_best_decodings(&lp, budget);
            out.clear();
            for (ids, score) in &decodings {
                let word = self.vocab.detokenize_ids(ids);
                if !out.iter().any(|(w, _)| *w == word) {
                    out.push((word, *score));
                }
            }
            if out.len() >= k || decodings.len() < budget {
                out.truncate(k);
                return Ok(out);
            }
            budget *= 2;
        }
    }
}

impl<F: Scalar> CandidateScorer for LmScorer<'_, F> {
    /// Mean cross-entropy over the candidate's valid (non-PAD) sub-tokens;
    /// `+∞` when it has more than `span` sub-tokens.
    fn candidate_loss(&self, source: &str, candidate: &str) -> Result<f64> {
        let span = match self.vocab.tokenize_padded(candidate, self.span) {
            Ok(span) => span,
            Err(Error::OverLength(_)) | Err(Error::Empty(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let lp = self.masked_log_probs(source)?;
        let valid = span.valid_ids();
        let total: f64 = valid.iter().enumerate().map(|(j, &id)| -lp[(j, id)].as_f64()).sum();
        Ok(total / valid.len() as f64)
    }

    fn skip_reason(&self, source: &str) -> Option<SkipReason> {
        span_skip_reason(self.vocab, source, self.span)
    }
}

/// Exact top-`k` index tuples by summed log-probability, one index per row.
/// Ties are broken by lexicographically smaller id tuples.
pub fn k_best_decodings(log_probs: &DMatrix<f64>, k: usize) -> Vec<(Vec<TokenId>, f64)> {
    let (rows, cols) = log_probs.shape();
    if k == 0 || rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Per row, the k best ids. The joint top-k only draws from these.
    let per_row: Vec<Vec<(TokenId, f64)>> = (0..rows)
        .map(|r| {
            let mut ids: Vec<(TokenId, f64)> = (0..cols).map(|c| (c, log_probs[(r, c)])).collect();
            ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ids.truncate(k);
            ids
        })
        .collect();

    #[derive(PartialEq)]
    struct Entry {
        score: f64,
        ids: Vec<TokenId>,
        ranks: Vec<usize>,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> Ordering {
            self.score
                .total_cmp(&other.score)
                .then_with(|| other.ids.cmp(&self.ids))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    let entry = |ranks: Vec<usize>| Entry {
        score: ranks.iter().enumerate().map(|(r, &i)| per_row[r][i].1).sum(),
        ids: ranks.iter().enumerate().map(|(r, &i)| per_row[r][i].0).collect(),
        ranks,
    };

    let mut heap = BinaryHeap::new();
    let mut seen = std::collections::HashSet::new();
    let start = vec![0; rows];
    seen.insert(start.clone());
    heap.push(entry(start));
    let mut out = Vec::with_capacity(k);
    while let Some(e) = heap.pop() {
        for r in 0..rows {
            if e.ranks[r] + 1 < per_row[r].len() {
                let mut next = e.ranks.clone();
                next[r] += 1;
                if seen.insert(next.clone()) {
                    heap.push(entry(next));
                }
            }
        }
        out.push((e.ids, e.score));
        if out.len() == k {
            break;
        }
    }
    out
}

/// Non-autoregressive generation: argmax at each masked position, `[PAD]`
/// stripped, surfaces concatenated.
pub fn generate_translation<F: Scalar>(
    model: &MaskedLm<F>,
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    source: &str,
    span: usize,
) -> Result<String> {
    LmScorer::new(model, vocab, template, span).generate(source)
}

pub fn candidate_loss<F: Scalar>(
    model: &MaskedLm<F>,
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    source: &str,
    candidate: &str,
    span: usize,
) -> Result<f64> {
    LmScorer::new(model, vocab, template, span).candidate_loss(source, candidate)
}

/// Re-ranks an existing candidate set.
pub fn rerank_candidates<S: CandidateScorer + ?Sized>(
    scorer: &S,
    candidates: &CandidateSet,
    config: &RerankConfig,
) -> Result<RerankTrace> {
    config.validate()?;
    let weights = softmax_weights(&candidates.scores, config.temperature)?;
    let losses = candidates
        .candidates
        .iter()
        .map(|c| scorer.candidate_loss(&candidates.source, c))
        .collect::<Result<Vec<f64>>>()?;
    let (selected, scores) = combine_and_select(&weights, &losses, config)?;
    let records = candidates
        .candidates
        .iter()
        .enumerate()
        .map(|(i, word)| CandidateRecord {
            word: word.clone(),
            cosine: candidates.scores[i],
            weight: weights[i],
            loss: losses[i],
            score: scores[i],
        })
        .collect();
    Ok(RerankTrace {
        source: candidates.source.clone(),
        candidates: records,
        selected,
    })
}

/// Top-K retrieval in the shared space followed by re-ranking. Returns the
/// selected word and the full trace.
pub fn rerank<S: CandidateScorer + ?Sized>(
    scorer: &S,
    space: &SharedSpace<'_>,
    source: &str,
    config: &RerankConfig,
) -> Result<(String, RerankTrace)> {
    config.validate()?;
    let k = config.k.min(space.target().len());
    let candidates = space.top_k(source, k)?;
    let trace = rerank_candidates(scorer, &candidates, config)?;
    Ok((trace.selected_word().to_string(), trace))
}
