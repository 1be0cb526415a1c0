//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gated criterion fails.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use common::{check_report, naive_forward, random_model, tiny_config, toy_vocab};
use lexprompt::alignment::{
    nearest_neighbor_accuracy, orthogonality_error, self_training_align, solve_procrustes, AlignmentConfig, SharedSpace,
};
use lexprompt::eval::{evaluate_generator, evaluate_reranker, few_shot_run, FewShotConfig, DEFAULT_KS};
use lexprompt::mlm::{
    finetune, mask_positions, mlm_loss, pseudo_likelihood, MaskedLm, ModelConfig, PromptTemplate, TrainingConfig,
    TrainingExample,
};
use lexprompt::synthetic::{
    cipher_vocabulary, random_embeddings, random_orthogonal, rotated_copy, rotated_copy_named, CipherFixture,
};
use lexprompt::tokenizer::{CLS_ID, MASK_ID, PAD_ID};
use lexprompt::translate::{combine_and_select, softmax_weights, CandidateScorer, LmScorer, RerankConfig};
use lexprompt::{
    BilingualDictionary, DictionaryRole, EmbeddingMatrix, EvaluationReport, PaddedSpan, Result, SubwordVocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    reports: Vec<EvaluationReport>,
    cipher_model: Option<(MaskedLm<f32>, SubwordVocabulary, CipherFixture)>,
}

fn dict(pairs: impl IntoIterator<Item = (String, String)>, role: DictionaryRole) -> BilingualDictionary {
    BilingualDictionary::new(pairs, role)
}

struct RotationFixture {
    x: EmbeddingMatrix,
    z: EmbeddingMatrix,
    seed: BilingualDictionary,
    test: BilingualDictionary,
}

fn rotation_fixture(seed: u64, sigma: f64, seed_pairs: usize) -> RotationFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_embeddings(&mut rng, "s", 2000, 50);
    let r = random_orthogonal(&mut rng, 50);
    let z = rotated_copy(&x, &r, sigma, &mut rng, "t");
    let pair = |i: usize| (format!("s{i}"), format!("t{i}"));
    RotationFixture {
        seed: dict((0..seed_pairs).map(pair), DictionaryRole::Train),
        test: dict((1500..2000).map(pair), DictionaryRole::Test),
        x,
        z,
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn rotation_recovery() -> Result<Outcome> {
    let fx = rotation_fixture(1, 0.0, 200);
    let start = Instant::now();
    let outcome_ = self_training_align(&fx.x, &fx.z, &fx.seed, &AlignmentConfig::default())?;
    let p1 = nearest_neighbor_accuracy(&outcome_.mapping, &fx.x, &fx.z, &fx.test)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        p1 >= 0.99 && secs < 10.0,
        format!("P@1 {p1:.4} (>= 0.99), {secs:.2}s (< 10s)"),
    ))
}

fn self_training_gain() -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..5 {
        let fx = rotation_fixture(100 + seed, 0.05, 25);
        let base = solve_procrustes(&fx.x, &fx.z, &fx.seed)?;
        let base_p1 = nearest_neighbor_accuracy(&base, &fx.x, &fx.z, &fx.test)?;
        let st = self_training_align(&fx.x, &fx.z, &fx.seed, &AlignmentConfig::default())?;
        let st_p1 = nearest_neighbor_accuracy(&st.mapping, &fx.x, &fx.z, &fx.test)?;
        pass &= st_p1 >= base_p1;
        lines.push(format!("{st_p1:.3}>={base_p1:.3}"));
    }
    Ok(outcome(
        pass,
        format!("self-training vs procrustes P@1 per seed: {}", lines.join(" ")),
    ))
}

fn orthogonality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for problem in 0..20u64 {
        let dim = rng.random_range(5..=40);
        let x = random_embeddings(&mut rng, "s", 300, dim);
        let r = random_orthogonal(&mut rng, dim);
        let sigma = rng.random_range(0.0..0.1);
        let z = rotated_copy(&x, &r, sigma, &mut rng, "t");
        let pairs = rng.random_range(dim..=150);
        let seed = dict(
            (0..pairs).map(|i| (format!("s{i}"), format!("t{i}"))),
            DictionaryRole::Train,
        );
        let p = solve_procrustes(&x, &z, &seed)?;
        worst = worst.max(orthogonality_error(&p.wx));
        if problem % 4 == 0 {
            let cfg = AlignmentConfig {
                max_iterations: 5,
                ..AlignmentConfig::procrustes_only()
            };
            let st = self_training_align(&x, &z, &seed, &cfg)?;
            worst = worst.max(orthogonality_error(&st.mapping.wx));
        }
    }
    Ok(outcome(
        worst < 1e-6,
        format!("max ||WxᵀWx - I||_F = {worst:.2e} (< 1e-6)"),
    ))
}

fn gradient_check() -> Result<Outcome> {
    let start = Instant::now();
    let vocab = toy_vocab(&["a", "b", "c", "d", "k", "m", "p", "r"]);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = random_model(&mut rng, tiny_config(5), &vocab, 0.5);
    let count = model.params.count();
    let batch: Vec<TrainingExample> = (0..4)
        .map(|_| {
            let mut prompt = vec![CLS_ID];
            prompt.extend((0..8).map(|_| rng.random_range(4..vocab.len())));
            prompt.extend([MASK_ID; 4]);
            let mut targets: Vec<usize> = (0..2).map(|_| rng.random_range(4..vocab.len())).collect();
            targets.extend([PAD_ID; 2]);
            TrainingExample { prompt, targets }
        })
        .collect();
    let (_, grad) = model.loss_and_grad(&batch)?;
    let analytic = grad.to_flat();
    let base = model.params.to_flat();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut good = 0;
    for i in 0..count {
        let mut p = base.clone();
        p[i] += h;
        probe.params.set_flat(&p);
        let up = probe.loss(&batch)?;
        p[i] = base[i] - h;
        probe.params.set_flat(&p);
        let down = probe.loss(&batch)?;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        if rel < 1e-4 {
            good += 1;
        }
    }
    let share = good as f64 / count as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        count <= 5000 && share >= 0.99 && secs < 60.0,
        format!(
            "{count} params, {:.2}% within 1e-4 (>= 99%), {secs:.2}s (< 60s)",
            share * 100.0
        ),
    ))
}

fn pseudo_likelihood_oracle() -> Result<Outcome> {
    let vocab = toy_vocab(&["a", "b", "c", "d", "k", "m", "p", "r"]);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut worst_pl, mut worst_id) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let model = random_model(&mut rng, tiny_config(trial), &vocab, 0.4);
        let n = rng.random_range(1..=4);
        let mut prompt = vec![CLS_ID];
        prompt.extend((0..rng.random_range(n..=n + 4)).map(|_| rng.random_range(4..vocab.len())));
        prompt.extend(std::iter::repeat_n(MASK_ID, n));
        let valid = rng.random_range(1..=n);
        let mut target: Vec<usize> = (0..valid).map(|_| rng.random_range(4..vocab.len())).collect();
        target.resize(n, PAD_ID);
        let target = PaddedSpan::from_ids(target)?;

        let probs = naive_forward(&model.params, 2, &prompt);
        let brute: f64 = mask_positions(&prompt)
            .iter()
            .zip(target.ids())
            .map(|(&p, &t)| probs[p][t])
            .product();
        let pl = pseudo_likelihood(&model, &prompt, &target)?;
        let loss = mlm_loss(&model, &prompt, &target)?;
        worst_pl = worst_pl.max((pl - brute).abs() / brute);
        worst_id = worst_id.max(((-(n as f64) * loss).exp() - pl).abs() / pl);
    }
    Ok(outcome(
        worst_pl <= 1e-9 && worst_id <= 1e-9,
        format!("max rel err vs brute force {worst_pl:.2e}, exp(-n·loss) identity {worst_id:.2e} (<= 1e-9)"),
    ))
}

fn reranking_arithmetic() -> Result<Outcome> {
    let cfg = RerankConfig::default();
    let sw = softmax_weights(&[0.9, 0.8], 0.1)?;
    let (selected, scores) = combine_and_select(&[0.7311, 0.2689], &[2.0, 0.1], &cfg)?;
    let oracle = [0.7311 / 3f64.ln(), 0.2689 / 1.1f64.ln()];
    let worked = selected == 1
        && (sw[0] - 0.7311).abs() < 1e-4
        && (sw[1] - 0.2689).abs() < 1e-4
        && (scores[0] - oracle[0]).abs() < 1e-4
        && (scores[1] - oracle[1]).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut degenerate = true;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = softmax_weights(&scores, rng.random_range(0.01..1.0))?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());

        let losses: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
        let uniform_w = softmax_weights(&vec![0.5; k], 0.1)?;
        let (c, _) = combine_and_select(&uniform_w, &losses, &cfg)?;
        let argmin = (0..k).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
        let (c2, _) = combine_and_select(&w, &vec![1.5; k], &cfg)?;
        let argmax = (0..k).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        degenerate &= c == argmin && c2 == argmax;
    }
    Ok(outcome(
        worked && degenerate && worst_sum <= 1e-9,
        format!(
            "worked example s = [{:.4}, {:.4}] -> candidate {}, degeneracies {}, max |ΣSW - 1| = {worst_sum:.1e}",
            scores[0],
            scores[1],
            selected + 1,
            if degenerate { "exact" } else { "violated" }
        ),
    ))
}

fn cipher_setup(seed: u64) -> (CipherFixture, SubwordVocabulary, PromptTemplate) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = CipherFixture::generate(&mut rng, 400, 100, 500, 4);
    let template = PromptTemplate::default();
    let vocab = cipher_vocabulary(&template);
    (fx, vocab, template)
}

fn cipher_training(seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-3,
        seed,
        ..TrainingConfig::default()
    }
}

fn cipher_generation(suite: &mut Suite) -> Result<Outcome> {
    let start = Instant::now();
    let (mut train_p1, mut test_p1) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let (fx, vocab, template) = cipher_setup(seed);
        let mut model = MaskedLm::<f32>::new(
            ModelConfig {
                seed,
                ..ModelConfig::default()
            },
            &vocab,
        )?;
        finetune(&mut model, &vocab, &template, &fx.train, &cipher_training(seed))?;
        let train = evaluate_generator(&model, &vocab, &template, &fx.train, 4, &DEFAULT_KS)?;
        let test = evaluate_generator(&model, &vocab, &template, &fx.test, 4, &DEFAULT_KS)?;
        train_p1.push(train.p_at(1).unwrap_or(0.0));
        test_p1.push(test.p_at(1).unwrap_or(0.0));
        suite.reports.extend([train, test]);
        if seed == 0 {
            suite.cipher_model = Some((model, vocab, fx));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (tr, te) = (median(&mut train_p1), median(&mut test_p1));
    Ok(outcome(
        tr >= 0.95 && te >= 0.5 && secs < 300.0,
        format!("median train P@1 {tr:.3} (>= 0.95), test P@1 {te:.3} (>= 0.50), {secs:.1}s (< 300s)"),
    ))
}

/// Loss table keyed by (source, candidate): gold pairs are cheap.
struct OracleScorer {
    gold: HashMap<String, Vec<String>>,
}

impl CandidateScorer for OracleScorer {
    fn candidate_loss(&self, source: &str, candidate: &str) -> Result<f64> {
        let hit = self.gold.get(source).is_some_and(|g| g.iter().any(|t| t == candidate));
        Ok(if hit { 0.05 } else { 5.0 })
    }
}

fn reranking_benchmark(suite: &mut Suite) -> Result<Outcome> {
    let cfg = RerankConfig {
        k: 10,
        temperature: 0.1,
        ..RerankConfig::default()
    };
    // Procrustes on the 25-pair seed leaves the gold outside rank 1 often
    // enough for re-ranking to matter.
    let fx = rotation_fixture(100, 0.05, 25);
    let mapping = solve_procrustes(&fx.x, &fx.z, &fx.seed)?;
    let space = SharedSpace::new(&mapping, &fx.x, &fx.z)?;
    let oracle = OracleScorer {
        gold: fx.test.grouped().into_iter().collect(),
    };
    let report = evaluate_reranker(&oracle, &space, &fx.test, &cfg, &DEFAULT_KS)?;
    let reranked_p1 = report.p_at(1).unwrap_or(0.0);
    let base = report.base_precision.clone().unwrap_or_default();
    let base_p10 = base.get(&10).copied().unwrap_or(0.0);
    suite.reports.push(report);

    // Cipher-named embedding spaces scored by the trained cipher model.
    let (model, vocab, cfx) = suite
        .cipher_model
        .as_ref()
        .ok_or_else(|| lexprompt::Error::Empty("cipher model".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let raw = random_embeddings(&mut rng, "w", cfx.source_words.len(), 50);
    let x = EmbeddingMatrix::from_rows((0..raw.len()).map(|i| (cfx.source_words[i].clone(), raw.row(i).to_vec())))?;
    let r = random_orthogonal(&mut rng, 50);
    let z = rotated_copy_named(&x, &r, 0.05, &mut rng, &cfx.target_words);
    let seed = dict(cfx.train.pairs().iter().take(25).cloned(), DictionaryRole::Train);
    let mapping = solve_procrustes(&x, &z, &seed)?;
    let space = SharedSpace::new(&mapping, &x, &z)?;
    let scorer = LmScorer::new(model, vocab, &PromptTemplate::default(), 4);
    let report = evaluate_reranker(&scorer, &space, &cfx.test, &cfg, &DEFAULT_KS)?;
    let lm_p1 = report.p_at(1).unwrap_or(0.0);
    let lm_base_p1 = report
        .base_precision
        .as_ref()
        .and_then(|b| b.get(&1).copied())
        .unwrap_or(0.0);
    suite.reports.push(report);

    Ok(outcome(
        reranked_p1 == base_p10 && lm_p1 >= lm_base_p1,
        format!(
            "oracle reranked P@1 {reranked_p1:.3} == base P@10 {base_p10:.3} (base P@1 {:.3}); cipher model reranked P@1 {lm_p1:.3} >= base P@1 {lm_base_p1:.3}",
            base.get(&1).copied().unwrap_or(0.0)
        ),
    ))
}

fn few_shot_protocol(suite: &mut Suite) -> Result<Outcome> {
    let (fx, vocab, template) = cipher_setup(0);
    let fs = FewShotConfig {
        sizes: vec![1, 3, 10],
        samples: 5,
        seeds: 5,
        base_seed: 17,
        jobs: 1,
    };
    let tc = TrainingConfig {
        epochs: 30,
        ..cipher_training(0)
    };
    let mc = ModelConfig::default();
    let first = few_shot_run(&vocab, &template, &fx.train, &fx.test, &fs, &tc, &mc)?;
    let second = few_shot_run(&vocab, &template, &fx.train, &fx.test, &fs, &tc, &mc)?;
    let identical = serde_json::to_string(&first)? == serde_json::to_string(&second)?
        && first
            .runs
            .iter()
            .flatten()
            .zip(second.runs.iter().flatten())
            .all(|(a, b)| {
                a.runs
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(b.runs.iter().map(|v| v.to_bits()))
            });
    let rows = first.runs.clone().unwrap_or_default();
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let medians: Vec<f64> = rows.iter().map(|r| median(&mut r.runs.clone())).collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]) && medians.windows(2).all(|w| w[0] <= w[1]);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("N={}: {:.3}±{:.3}", r.n, r.mean, r.stddev))
        .collect();
    suite.reports.extend([first, second]);
    Ok(outcome(
        monotone && identical && rows.len() == 3,
        format!(
            "{}; non-decreasing {monotone}, rerun identical {identical}",
            table.join(", ")
        ),
    ))
}

fn report_invariants(suite: &Suite) -> Outcome {
    let failures: Vec<String> = suite.reports.iter().filter_map(|r| check_report(r).err()).collect();
    outcome(
        failures.is_empty() && !suite.reports.is_empty(),
        format!(
            "{} reports checked, {} violations {:?}",
            suite.reports.len(),
            failures.len(),
            failures
        ),
    )
}

fn real_data_anchor() -> Option<Result<Outcome>> {
    let var = |k: &str| std::env::var(k).ok();
    let (src, tgt, train, test) = (
        var("LEXPROMPT_ANCHOR_SRC")?,
        var("LEXPROMPT_ANCHOR_TGT")?,
        var("LEXPROMPT_ANCHOR_TRAIN")?,
        var("LEXPROMPT_ANCHOR_TEST")?,
    );
    Some((|| {
        let start = Instant::now();
        let x = EmbeddingMatrix::load_word2vec_text(src)?.normalize()?;
        let z = EmbeddingMatrix::load_word2vec_text(tgt)?.normalize()?;
        let train = BilingualDictionary::load(train, DictionaryRole::Train)?;
        let test = BilingualDictionary::load(test, DictionaryRole::Test)?;
        let aligned = self_training_align(&x, &z, &train, &AlignmentConfig::default())?;
        let p1 = 100.0 * nearest_neighbor_accuracy(&aligned.mapping, &x, &z, &test)?;
        let secs = start.elapsed().as_secs_f64();
        Ok(outcome(
            (p1 - 63.10).abs() <= 3.0 && secs < 1800.0,
            format!("P@1 {p1:.2} (63.10 ± 3.0), {secs:.0}s (< 1800s)"),
        ))
    })())
}

fn main() {
    let mut suite = Suite {
        reports: Vec::new(),
        cipher_model: None,
    };
    let mut failed = 0;
    let mut report = |id: u32, name: &str, result: Result<Outcome>| {
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<28} {}  {detail}",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
    };

    report(1, "rotation recovery", rotation_recovery());
    report(2, "self-training gain", self_training_gain());
    report(3, "orthogonality", orthogonality());
    report(4, "gradient check", gradient_check());
    report(5, "pseudo-likelihood oracle", pseudo_likelihood_oracle());
    report(6, "re-ranking arithmetic", reranking_arithmetic());
    report(7, "cipher generation", cipher_generation(&mut suite));
    report(8, "re-ranking benchmark", reranking_benchmark(&mut suite));
    report(9, "few-shot protocol", few_shot_protocol(&mut suite));
    let invariants = report_invariants(&suite);
    report(10, "report invariants", Ok(invariants));
    match real_data_anchor() {
        Some(result) => {
            let (pass, detail) = match result {
                Ok(o) => (o.pass, o.detail),
                Err(e) => (false, format!("error: {e}")),
            };
            println!(
                "criterion 11 {:<28} {}  {detail} (not gated)",
                "real-data anchor",
                if pass { "PASS" } else { "FAIL" }
            );
        }
        None => println!(
            "criterion 11 {:<28} SKIP  set LEXPROMPT_ANCHOR_{{SRC,TGT,TRAIN,TEST}} to run (not gated)",
            "real-data anchor"
        ),
    }

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
