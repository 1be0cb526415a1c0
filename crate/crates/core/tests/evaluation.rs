mod common;

use common::check_report;
use lexprompt::alignment::{solve_procrustes, SharedSpace};
use lexprompt::eval::{
    evaluate_generator, evaluate_reranker, few_shot_run, filter_shared_pairs, FewShotConfig, DEFAULT_KS,
};
use lexprompt::mlm::{finetune, MaskedLm, ModelConfig, PromptTemplate, TrainingConfig};
use lexprompt::synthetic::{cipher_vocabulary, random_embeddings, random_orthogonal, rotated_copy, CipherFixture};
use lexprompt::translate::{generate_translation, rerank, CandidateScorer, LmScorer, RerankConfig};
use lexprompt::{BilingualDictionary, DictionaryRole, EmbeddingMatrix, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64, vocab: &lexprompt::SubwordVocabulary) -> MaskedLm<f32> {
    let cfg = ModelConfig {
        hidden: 32,
        heads: 2,
        feed_forward: 64,
        layers: 1,
        seed,
        ..ModelConfig::default()
    };
    MaskedLm::new(cfg, vocab).unwrap()
}

#[test]
fn single_pair_is_memorized() {
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    let dict = BilingualDictionary::new([("abc", "rkm")], DictionaryRole::Train);
    let mut model = small_model(0, &vocab);
    let tc = TrainingConfig {
        learning_rate: 1e-2,
        batch_size: 1,
        epochs: 60,
        ..TrainingConfig::default()
    };
    finetune(&mut model, &vocab, &template, &dict, &tc).unwrap();
    assert_eq!(
        generate_translation(&model, &vocab, &template, "abc", 4).unwrap(),
        "rkm"
    );
    let report = evaluate_generator(&model, &vocab, &template, &dict, 4, &DEFAULT_KS).unwrap();
    check_report(&report).unwrap();
    assert_eq!(report.p_at(1), Some(1.0));
}

#[test]
fn untrained_model_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fx = CipherFixture::generate(&mut rng, 10, 100, 110, 4);
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    let model = small_model(1, &vocab);
    let report = evaluate_generator(&model, &vocab, &template, &fx.test, 4, &DEFAULT_KS).unwrap();
    check_report(&report).unwrap();
    assert!(report.p_at(1).unwrap() <= 0.02);
    assert_eq!(report.pairs_evaluated, 100);
}

#[test]
fn filter_keeps_only_covered_pairs() {
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    let words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
    let src = EmbeddingMatrix::from_rows(words.iter().map(|w| (w.to_string(), vec![1.0f32, 0.0]))).unwrap();
    let tgt_words = ["k", "m", "p", "r", "t", "v", "w", "x", "y", "z"];
    let tgt = EmbeddingMatrix::from_rows(tgt_words.iter().map(|w| (w.to_string(), vec![0.0f32, 1.0]))).unwrap();
    let mut pairs: Vec<(String, String)> = (0..7)
        .map(|i| (words[i].to_string(), tgt_words[i].to_string()))
        .collect();
    pairs.push(("q".into(), "k".into())); // source missing from the embeddings
    pairs.push(("a".into(), "kkkkk".into())); // target too long for n = 4
    pairs.push(("b".into(), "Q".into())); // target not coverable
    let dict = BilingualDictionary::new(pairs, DictionaryRole::Test);
    let (kept, removed) = filter_shared_pairs(&dict, &vocab, &src, &tgt, 4);
    assert_eq!((kept.len(), removed), (7, 3));
    let (all, none) = filter_shared_pairs(&kept, &vocab, &src, &tgt, 4);
    assert_eq!((all.pairs(), none), (kept.pairs(), 0));
}

struct TableScorer(Vec<(String, f64)>);

impl CandidateScorer for TableScorer {
    fn candidate_loss(&self, _source: &str, candidate: &str) -> Result<f64> {
        Ok(self.0.iter().find(|(w, _)| w == candidate).map_or(3.0, |(_, l)| *l))
    }
}

struct Uniform;

impl CandidateScorer for Uniform {
    fn candidate_loss(&self, _: &str, _: &str) -> Result<f64> {
        Ok(1.25)
    }
}

fn noisy_space(
    seed: u64,
) -> (
    EmbeddingMatrix,
    EmbeddingMatrix,
    BilingualDictionary,
    BilingualDictionary,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_embeddings(&mut rng, "s", 300, 16);
    let r = random_orthogonal(&mut rng, 16);
    let z = rotated_copy(&x, &r, 0.15, &mut rng, "t");
    let pair = |i: usize| (format!("s{i}"), format!("t{i}"));
    (
        x,
        z,
        BilingualDictionary::new((0..16).map(pair), DictionaryRole::Train),
        BilingualDictionary::new((200..300).map(pair), DictionaryRole::Test),
    )
}

#[test]
fn uniform_losses_keep_the_cosine_order() {
    let (x, z, seed, test) = noisy_space(2);
    let mapping = solve_procrustes(&x, &z, &seed).unwrap();
    let space = SharedSpace::new(&mapping, &x, &z).unwrap();
    let report = evaluate_reranker(&Uniform, &space, &test, &RerankConfig::default(), &DEFAULT_KS).unwrap();
    check_report(&report).unwrap();
    assert_eq!(Some(&report.precision), report.base_precision.as_ref());
    assert!(report.precision.keys().all(|&k| k <= 10));
    assert!(report.outcomes.iter().all(|o| o.rank == o.base_rank));

    let one = RerankConfig {
        k: 1,
        ..RerankConfig::default()
    };
    let oracle = TableScorer(test.pairs().iter().map(|(_, t)| (t.clone(), 0.01)).collect());
    let report = evaluate_reranker(&oracle, &space, &test, &one, &DEFAULT_KS).unwrap();
    assert_eq!(report.p_at(1), report.base_precision.as_ref().unwrap().get(&1).copied());
}

#[test]
fn reranking_can_promote_a_lower_candidate() {
    let (x, z, seed, _) = noisy_space(3);
    let mapping = solve_procrustes(&x, &z, &seed).unwrap();
    let space = SharedSpace::new(&mapping, &x, &z).unwrap();
    let cfg = RerankConfig {
        temperature: 1.0,
        k: 5,
        ..RerankConfig::default()
    };
    let base = space.top_k("s250", 5).unwrap();
    let favored = base.candidates[3].clone();
    let (word, trace) = rerank(&TableScorer(vec![(favored.clone(), 0.01)]), &space, "s250", &cfg).unwrap();
    assert_eq!(word, favored);
    assert_eq!(trace.selected, 3);
    assert_eq!(trace.reranked_words()[0], favored);
    assert!((trace.candidates.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn overlong_candidates_get_infinite_loss() {
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    let model = small_model(4, &vocab);
    let scorer = LmScorer::new(&model, &vocab, &template, 2);
    assert_eq!(scorer.candidate_loss("ab", "kmp").unwrap(), f64::INFINITY);
    let finite = scorer.candidate_loss("ab", "km").unwrap();
    assert!(finite.is_finite() && finite > 0.0);
    assert!(scorer.skip_reason("abc").is_some());
    assert!(scorer.skip_reason("ab").is_none());
}

#[test]
fn few_shot_table_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fx = CipherFixture::generate(&mut rng, 12, 6, 18, 3);
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    let mc = ModelConfig {
        hidden: 16,
        heads: 2,
        feed_forward: 32,
        layers: 1,
        ..ModelConfig::default()
    };
    let tc = TrainingConfig {
        learning_rate: 1e-3,
        epochs: 2,
        ..TrainingConfig::default()
    };
    let single = FewShotConfig {
        sizes: vec![4],
        samples: 1,
        seeds: 1,
        base_seed: 3,
        jobs: 1,
    };
    let report = few_shot_run(&vocab, &template, &fx.train, &fx.test, &single, &tc, &mc).unwrap();
    check_report(&report).unwrap();
    assert_eq!(report.runs.as_ref().unwrap()[0].stddev, 0.0);

    let full = FewShotConfig {
        sizes: vec![12],
        samples: 3,
        seeds: 2,
        base_seed: 3,
        jobs: 2,
    };
    let report = few_shot_run(&vocab, &template, &fx.train, &fx.test, &full, &tc, &mc).unwrap();
    let runs = &report.runs.as_ref().unwrap()[0].runs;
    // N equals the dictionary size: every sample is the whole set.
    assert_eq!(runs.len(), 6);

    let too_big = FewShotConfig {
        sizes: vec![13],
        ..single
    };
    assert!(few_shot_run(&vocab, &template, &fx.train, &fx.test, &too_big, &tc, &mc).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reranking_preserves_the_candidate_set(seed in 0u64..1000, losses in proptest::collection::vec(0.0f64..5.0, 10)) {
        let (x, z, dict, test) = noisy_space(seed % 7);
        let mapping = solve_procrustes(&x, &z, &dict).unwrap();
        let space = SharedSpace::new(&mapping, &x, &z).unwrap();
        let table = TableScorer(
            z.words().iter().enumerate().map(|(i, w)| (w.clone(), losses[i % losses.len()])).collect(),
        );
        let report = evaluate_reranker(&table, &space, &test, &RerankConfig::default(), &DEFAULT_KS).unwrap();
        prop_assert!(check_report(&report).is_ok());
        prop_assert_eq!(report.p_at(10), report.base_precision.as_ref().unwrap().get(&10).copied());
    }
}
