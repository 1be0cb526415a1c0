//! P@K scoring, coverage filtering and the few-shot harness.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::SharedSpace;
use crate::dictionary::{BilingualDictionary, DictionaryRole};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::mlm::{finetune, MaskedLm, ModelConfig, PromptTemplate, Scalar, TrainingConfig};
use crate::tokenizer::{SubwordVocabulary, UNK_ID};
use crate::translate::{rerank_candidates, CandidateScorer, LmScorer, RerankConfig};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// More sub-tokens than the span holds.
    Overlength,
    /// Missing from an embedding vocabulary, or not coverable without `[UNK]`.
    Oov,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub overlength: usize,
    pub oov: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.overlength + self.oov
    }

    fn add(&mut self, reason: SkipReason) {
        match reason {
            SkipReason::Overlength => self.overlength += 1,
            SkipReason::Oov => self.oov += 1,
        }
    }
}

/// Result for one distinct source word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub source: String,
    pub gold: Vec<String>,
    pub prediction: String,
    /// 1-based rank of the first gold target in the prediction list.
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_rank: Option<usize>,
}

/// Few-shot result for one training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
    /// P@1 of every run in (sample, seed) order.
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pairs_total: usize,
    pub pairs_skipped: SkipCounts,
    /// Pairs that were scored; with the skipped ones they add up to
    /// `pairs_total`.
    pub pairs_evaluated: usize,
    /// Number of distinct source words scored.
    pub queries: usize,
    pub precision: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_precision: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<FewShotRow>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<QueryOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

impl EvaluationReport {
    fn from_outcomes(pairs_total: usize, skipped: SkipCounts, outcomes: Vec<QueryOutcome>, ks: &[usize]) -> Self {
        let precision = precision_from_ranks(outcomes.iter().map(|o| o.rank), ks);
        Self {
            pairs_total,
            pairs_skipped: skipped,
            pairs_evaluated: pairs_total - skipped.total(),
            queries: outcomes.len(),
            precision,
            base_precision: None,
            runs: None,
            outcomes,
            manifest: None,
        }
    }

    pub fn with_manifest(mut self, manifest: RunManifest) -> Self {
        self.manifest = Some(manifest);
        self
    }

    pub fn p_at(&self, k: usize) -> Option<f64> {
        self.precision.get(&k).copied()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn precision_from_ranks(ranks: impl Iterator<Item = Option<usize>> + Clone, ks: &[usize]) -> BTreeMap<usize, f64> {
    let total = ranks.clone().count();
    if total == 0 {
        return BTreeMap::new();
    }
    ks.iter()
        .map(|&k| {
            let hits = ranks.clone().filter(|r| matches!(r, Some(r) if *r <= k)).count();
            (k, hits as f64 / total as f64)
        })
        .collect()
}

fn first_gold_rank(ranked: &[String], gold: &[String]) -> Option<usize> {
    ranked.iter().position(|c| gold.contains(c)).map(|i| i + 1)
}

/// Why `word` cannot be placed in an `n`-token span, if it cannot.
pub fn span_skip_reason(vocab: &SubwordVocabulary, word: &str, n: usize) -> Option<SkipReason> {
    let ids = vocab.tokenize(word);
    if ids.is_empty() || ids.contains(&UNK_ID) {
        Some(SkipReason::Oov)
    } else if ids.len() > n {
        Some(SkipReason::Overlength)
    } else {
        None
    }
}

/// Keeps pairs whose words are in their embedding vocabularies and fit an
/// `n`-token span without `[UNK]`. Returns the kept pairs and the number
/// removed.
pub fn filter_shared_pairs(
    dict: &BilingualDictionary,
    vocab: &SubwordVocabulary,
    emb_src: &EmbeddingMatrix,
    emb_tgt: &EmbeddingMatrix,
    n: usize,
) -> (BilingualDictionary, usize) {
    let kept = dict.filter(|s, t| {
        emb_src.contains(s)
            && emb_tgt.contains(t)
            && span_skip_reason(vocab, s, n).is_none()
            && span_skip_reason(vocab, t, n).is_none()
    });
    let removed = dict.len() - kept.len();
    (kept, removed)
}

/// Fraction of queries whose first `k` predictions contain any gold target.
/// `ranked` holds (source, predictions best first).
pub fn precision_at_k(ranked: &[(String, Vec<String>)], gold: &BilingualDictionary, k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Empty("query set".into()));
    }
    let gold: HashMap<String, Vec<String>> = gold.grouped().into_iter().collect();
    let mut hits = 0;
    for (source, predictions) in ranked {
        let targets = gold
            .get(source)
            .ok_or_else(|| Error::Config(format!("no gold target for query {source:?}")))?;
        let top = &predictions[..predictions.len().min(k)];
        if top.iter().any(|p| targets.contains(p)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Scores externally produced ranked predictions. Queries without gold are
/// ignored; gold sources without predictions count as misses.
pub fn evaluate_ranked(ranked: &[(String, Vec<String>)], gold: &BilingualDictionary, ks: &[usize]) -> EvaluationReport {
    let predictions: HashMap<&str, &Vec<String>> = ranked.iter().map(|(s, p)| (s.as_str(), p)).collect();
    let outcomes = gold
        .grouped()
        .into_iter()
        .map(|(source, targets)| {
            let list = predictions.get(source.as_str()).map(|p| p.as_slice()).unwrap_or(&[]);
            QueryOutcome {
                rank: first_gold_rank(list, &targets),
                prediction: list.first().cloned().unwrap_or_default(),
                source,
                gold: targets,
                base_rank: None,
            }
        })
        .collect();
    EvaluationReport::from_outcomes(gold.len(), SkipCounts::default(), outcomes, ks)
}

/// Splits `dict` into retained grouped queries and skip counts.
fn partition<F>(dict: &BilingualDictionary, mut reason: F) -> (Vec<(String, Vec<String>)>, SkipCounts)
where
    F: FnMut(&str, &str) -> Option<SkipReason>,
{
    let mut skipped = SkipCounts::default();
    let kept = dict.filter(|s, t| match reason(s, t) {
        Some(r) => {
            skipped.add(r);
            false
        }
        None => true,
    });
    (kept.grouped(), skipped)
}

/// Generation P@K: the K most probable joint decodings per query, matched
/// exactly against the gold targets. Pairs where either word does not fit
/// the span are skipped.
pub fn evaluate_generator<F: Scalar>(
    model: &MaskedLm<F>,
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    test_dict: &BilingualDictionary,
    n: usize,
    ks: &[usize],
) -> Result<EvaluationReport> {
    model.check_vocab(vocab)?;
    let scorer = LmScorer::new(model, vocab, template, n);
    let (queries, skipped) = partition(test_dict, |s, t| {
        span_skip_reason(vocab, s, n).or_else(|| span_skip_reason(vocab, t, n))
    });
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let outcomes = queries
        .into_iter()
        .map(|(source, gold)| {
            let ranked: Vec<String> = scorer
                .generate_k_best(&source, max_k)?
                .into_iter()
                .map(|(w, _)| w)
                .collect();
            Ok(QueryOutcome {
                rank: first_gold_rank(&ranked, &gold),
                prediction: ranked.first().cloned().unwrap_or_default(),
                source,
                gold,
                base_rank: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::from_outcomes(test_dict.len(), skipped, outcomes, ks))
}

/// Re-ranking P@K next to the cosine-order P@K of the same candidates. `K`
/// values above the candidate count are not reported.
pub fn evaluate_reranker<S: CandidateScorer + ?Sized>(
    scorer: &S,
    space: &SharedSpace<'_>,
    test_dict: &BilingualDictionary,
    config: &RerankConfig,
    ks: &[usize],
) -> Result<EvaluationReport> {
    config.validate()?;
    let k = config.k.min(space.target().len());
    let (queries, skipped) = partition(test_dict, |s, t| {
        if !space.source().contains(s) || !space.target().contains(t) {
            Some(SkipReason::Oov)
        } else {
            scorer.skip_reason(s)
        }
    });
    let ks: Vec<usize> = ks.iter().copied().filter(|&x| x <= k).collect();
    let outcomes = queries
        .into_iter()
        .map(|(source, gold)| {
            let candidates = space.top_k(&source, k)?;
            let trace = rerank_candidates(scorer, &candidates, config)?;
            let reranked = trace.reranked_words();
            Ok(QueryOutcome {
                rank: first_gold_rank(&reranked, &gold),
                base_rank: first_gold_rank(&candidates.candidates, &gold),
                prediction: trace.selected_word().to_string(),
                source,
                gold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base = precision_from_ranks(outcomes.iter().map(|o| o.base_rank), &ks);
    let mut report = EvaluationReport::from_outcomes(test_dict.len(), skipped, outcomes, &ks);
    report.base_precision = Some(base);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    /// Training-set sizes to sweep.
    pub sizes: Vec<usize>,
    /// Random subsets per size.
    pub samples: usize,
    /// Training seeds per subset.
    pub seeds: usize,
    pub base_seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            sizes: vec![5, 10, 50, 100, 500],
            samples: 5,
            seeds: 5,
            base_seed: 0,
            jobs: 1,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) || self.samples == 0 || self.seeds == 0 || self.jobs == 0 {
            return Err(Error::Config("few-shot sizes and counts must be at least 1".into()));
        }
        Ok(())
    }
}

struct FewShotJob {
    subset: BilingualDictionary,
    seed: u64,
}

/// Trains `samples × seeds` models per size on random subsets and reports
/// mean and population stddev of test P@1. Subsets and seeds are drawn
/// sequentially from one generator seeded with the base seed, so the table
/// is a pure function of the inputs.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_run(
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    full_train: &BilingualDictionary,
    test_dict: &BilingualDictionary,
    config: &FewShotConfig,
    training: &TrainingConfig,
    model_config: &ModelConfig,
) -> Result<EvaluationReport> {
    config.validate()?;
    training.validate()?;
    model_config.validate()?;
    if let Some(&n) = config.sizes.iter().find(|&&n| n > full_train.len()) {
        return Err(Error::Config(format!(
            "few-shot size {n} exceeds the {} training pairs",
            full_train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
    let mut jobs = Vec::new();
    for &n in &config.sizes {
        for _ in 0..config.samples {
            let mut picked = index::sample(&mut rng, full_train.len(), n).into_vec();
            picked.sort_unstable();
            let subset = BilingualDictionary::new(
                picked.iter().map(|&i| full_train.pairs()[i].clone()),
                DictionaryRole::Train,
            );
            for _ in 0..config.seeds {
                jobs.push(FewShotJob {
                    subset: subset.clone(),
                    seed: rng.random(),
                });
            }
        }
    }

    let run = |job: &FewShotJob| -> Result<f64> {
        let mut mc = model_config.clone();
        mc.seed = job.seed;
        let mut tc = training.clone();
        tc.seed = job.seed;
        let mut model = MaskedLm::<f32>::new(mc, vocab)?;
        finetune(&mut model, vocab, template, &job.subset, &tc)?;
        let report = evaluate_generator(&model, vocab, template, test_dict, tc.span, &[1])?;
        Ok(report.p_at(1).unwrap_or(0.0))
    };
    let scores: Vec<f64> = if config.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let per_size = config.samples * config.seeds;
    let rows = config
        .sizes
        .iter()
        .zip(scores.chunks(per_size))
        .map(|(&n, runs)| {
            let mean = runs.iter().sum::<f64>() / runs.len() as f64;
            let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / runs.len() as f64;
            FewShotRow {
                n,
                mean,
                stddev: var.sqrt(),
                runs: runs.to_vec(),
            }
        })
        .collect();

    let (queries, skipped) = partition(test_dict, |s, t| {
        span_skip_reason(vocab, s, training.span).or_else(|| span_skip_reason(vocab, t, training.span))
    });
    Ok(EvaluationReport {
        pairs_total: test_dict.len(),
        pairs_skipped: skipped,
        pairs_evaluated: test_dict.len() - skipped.total(),
        queries: queries.len(),
        precision: BTreeMap::new(),
        base_precision: None,
        runs: Some(rows),
        outcomes: Vec::new(),
        manifest: None,
    })
}
