use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lexprompt::alignment::{self_training_align, AlignmentConfig, LinearMapping, Retrieval, SharedSpace};
use lexprompt::eval::{
    evaluate_generator, evaluate_ranked, evaluate_reranker, few_shot_run, span_skip_reason, FewShotConfig,
};
use lexprompt::mlm::{self, MaskedLm, ModelConfig, PromptTemplate, TrainingConfig};
use lexprompt::translate::{self, CandidateScorer, LmScorer, RerankConfig};
use lexprompt::{
    BilingualDictionary, DictionaryRole, EmbeddingMatrix, EvaluationReport, RunManifest, SubwordVocabulary,
};
use log::warn;
use serde::Serialize;
use serde_json::json;

use crate::{
    AlignArgs, EvalMode, EvaluateArgs, ExportArgs, FewShotArgs, FinetuneArgs, GenerateArgs, Layer, LmArgs, ModelArgs,
    NothingUsable, RerankArgs, RetrievalArg, SpaceArgs, TrainArgs, VocabArgs,
};

fn manifest<'a>(
    command: &str,
    config: &impl Serialize,
    inputs: impl IntoIterator<Item = &'a Path>,
) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, config)?;
    for path in inputs {
        m = m
            .with_input(path)
            .with_context(|| format!("reading {}", path.display()))?;
    }
    Ok(m)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(path, &text)
}

fn load_template(path: Option<&Path>) -> Result<PromptTemplate> {
    match path {
        Some(p) => PromptTemplate::load(p).with_context(|| format!("reading template {}", p.display())),
        None => Ok(PromptTemplate::default()),
    }
}

fn load_vocab(path: &Path) -> Result<SubwordVocabulary> {
    SubwordVocabulary::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn load_dict(path: &Path, role: DictionaryRole) -> Result<BilingualDictionary> {
    BilingualDictionary::load(path, role).with_context(|| format!("reading dictionary {}", path.display()))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let emb =
        EmbeddingMatrix::load_word2vec_text(path).with_context(|| format!("reading embeddings {}", path.display()))?;
    Ok(emb.normalize()?)
}

fn load_lm(model: &Path, vocab: &Path) -> Result<(MaskedLm<f32>, SubwordVocabulary)> {
    let vocab = load_vocab(vocab)?;
    let model = MaskedLm::<f32>::load(model).with_context(|| format!("reading model {}", model.display()))?;
    model.check_vocab(&vocab)?;
    Ok((model, vocab))
}

fn read_words(file: Option<&Path>, inline: &[String]) -> Result<Vec<String>> {
    let mut words = inline.to_vec();
    if let Some(p) = file {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        words.extend(text.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from));
    }
    if words.is_empty() {
        bail!("no source words given (use --words or --word)");
    }
    Ok(words)
}

fn model_config(m: &ModelArgs, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: m.layers,
        heads: m.heads,
        hidden: m.hidden,
        feed_forward: m.ff,
        max_len: m.max_len,
        init_std: m.init_std,
        seed,
    }
}

fn training_config(t: &TrainArgs, seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: t.lr,
        batch_size: t.batch,
        epochs: t.epochs,
        span: t.n,
        seed,
    }
}

fn rerank_config(k: usize, temperature: f64, loss_floor: f64) -> RerankConfig {
    RerankConfig {
        temperature,
        k,
        loss_floor,
    }
}

pub fn vocab(args: &VocabArgs) -> Result<()> {
    let text = fs::read_to_string(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let words: Vec<&str> = text.split_whitespace().collect();
    let vocab = SubwordVocabulary::train(&words, args.size)?;
    vocab.save(&args.out)?;
    Ok(())
}

pub fn align(args: &AlignArgs) -> Result<()> {
    let x = load_embeddings(&args.src_emb)?;
    let z = load_embeddings(&args.tgt_emb)?;
    let seed = load_dict(&args.train_dict, DictionaryRole::Train)?;
    let config = AlignmentConfig {
        max_iterations: args.iters,
        stop_delta: args.stop_delta,
        retrieval: match args.retrieval {
            RetrievalArg::Cosine => Retrieval::Cosine,
            RetrievalArg::Csls => Retrieval::Csls { k: args.csls_k },
        },
        reweight_exponent: args.reweight,
        whiten: args.whiten,
        reduce_dim: args.reduce_dim,
        self_training: args.self_training,
        induction_vocab: args.induction_vocab,
    };
    let outcome = self_training_align(&x, &z, &seed, &config)?;
    outcome.mapping.save(&args.out, &serde_json::to_value(&config)?)?;
    let m = manifest(
        "align",
        &json!({"args": args, "alignment": config}),
        [
            args.src_emb.as_path(),
            args.tgt_emb.as_path(),
            args.train_dict.as_path(),
        ],
    )?;
    write_json(args.report.as_deref(), &json!({"manifest": m, "trace": outcome.trace}))
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let dict = load_dict(&args.train_dict, DictionaryRole::Train)?;
    let template = load_template(args.template.as_deref())?;
    let mc = model_config(&args.model, args.seed);
    let tc = training_config(&args.train, args.seed);
    let mut model = MaskedLm::<f32>::new(mc.clone(), &vocab)?;
    let report = mlm::finetune(&mut model, &vocab, &template, &dict, &tc)?;
    model.save(&args.out)?;
    let prompt_len = template.compile(&vocab).prompt_len(tc.span);
    let mut inputs = vec![args.vocab.as_path(), args.train_dict.as_path()];
    inputs.extend(args.template.as_deref());
    let m = manifest(
        "finetune",
        &json!({"args": args, "model": mc, "training": tc, "template": template, "prompt_len": prompt_len}),
        inputs,
    )?
    .with_seed(args.seed);
    write_json(args.report.as_deref(), &json!({"manifest": m, "finetune": report}))
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let lm = &args.lm;
    let (model, vocab) = load_lm(&lm.model, &lm.vocab)?;
    let template = load_template(lm.template.as_deref())?;
    let scorer = LmScorer::new(&model, &vocab, &template, lm.n);
    let mut out = String::new();
    for word in read_words(args.words.as_deref(), &args.word)? {
        if let Some(reason) = span_skip_reason(&vocab, &word, lm.n) {
            warn!("skipping {word:?}: {reason:?}");
            continue;
        }
        out.push_str(&format!("{word}\t{}\n", scorer.generate(&word)?));
    }
    if out.is_empty() {
        return Err(NothingUsable("no source word fits the span".into()).into());
    }
    write_output(args.out.as_deref(), &out)
}

struct Space {
    mapping: LinearMapping,
    x: EmbeddingMatrix,
    z: EmbeddingMatrix,
}

fn load_space(mapping: &Path, src: &Path, tgt: &Path) -> Result<Space> {
    Ok(Space {
        mapping: LinearMapping::load(mapping).with_context(|| format!("reading mapping {}", mapping.display()))?,
        x: load_embeddings(src)?,
        z: load_embeddings(tgt)?,
    })
}

pub fn rerank(args: &RerankArgs) -> Result<()> {
    let (lm, sp): (&LmArgs, &SpaceArgs) = (&args.lm, &args.space);
    let (model, vocab) = load_lm(&lm.model, &lm.vocab)?;
    let template = load_template(lm.template.as_deref())?;
    let space = load_space(&sp.mapping, &sp.src_emb, &sp.tgt_emb)?;
    let shared = SharedSpace::new(&space.mapping, &space.x, &space.z)?;
    let scorer = LmScorer::new(&model, &vocab, &template, lm.n);
    let cfg = rerank_config(sp.k, sp.temperature, sp.loss_floor);
    let mut out = String::new();
    for word in read_words(args.words.as_deref(), &args.word)? {
        if !space.x.contains(&word) {
            warn!("skipping {word:?}: not in the source embeddings");
            continue;
        }
        if let Some(reason) = scorer.skip_reason(&word) {
            warn!("skipping {word:?}: {reason:?}");
            continue;
        }
        let (_, trace) = translate::rerank(&scorer, &shared, &word, &cfg)?;
        out.push_str(&serde_json::to_string(&trace)?);
        out.push('\n');
    }
    if out.is_empty() {
        return Err(NothingUsable("no source word could be re-ranked".into()).into());
    }
    write_output(args.out.as_deref(), &out)
}

fn read_ranked(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut fields = line.split('\t').map(str::trim);
            let source = fields.next().unwrap_or_default().to_string();
            (source, fields.filter(|f| !f.is_empty()).map(String::from).collect())
        })
        .collect())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .with_context(|| format!("--{flag} is required in {mode} mode"))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        bail!("--ks must list positive K values");
    }
    let test = load_dict(&args.test_dict, DictionaryRole::Test)?;
    let mut inputs: Vec<&Path> = vec![args.test_dict.as_path()];
    let mut report: EvaluationReport = match args.mode {
        EvalMode::Ranked => {
            let path = required(&args.predictions, "predictions", "ranked")?;
            inputs.push(path);
            evaluate_ranked(&read_ranked(path)?, &test, &args.ks)
        }
        EvalMode::Generator => {
            let model = required(&args.model, "model", "generator")?;
            let vocab = required(&args.vocab, "vocab", "generator")?;
            inputs.extend([model, vocab]);
            inputs.extend(args.template.as_deref());
            let (model, vocab) = load_lm(model, vocab)?;
            let template = load_template(args.template.as_deref())?;
            evaluate_generator(&model, &vocab, &template, &test, args.n, &args.ks)?
        }
        EvalMode::Reranker => {
            let model = required(&args.model, "model", "reranker")?;
            let vocab = required(&args.vocab, "vocab", "reranker")?;
            let mapping = required(&args.mapping, "mapping", "reranker")?;
            let src = required(&args.src_emb, "src-emb", "reranker")?;
            let tgt = required(&args.tgt_emb, "tgt-emb", "reranker")?;
            inputs.extend([model, vocab, mapping, src, tgt]);
            inputs.extend(args.template.as_deref());
            let (model, vocab) = load_lm(model, vocab)?;
            let template = load_template(args.template.as_deref())?;
            let space = load_space(mapping, src, tgt)?;
            let shared = SharedSpace::new(&space.mapping, &space.x, &space.z)?;
            let scorer = LmScorer::new(&model, &vocab, &template, args.n);
            let cfg = rerank_config(args.k, args.temperature, args.loss_floor);
            evaluate_reranker(&scorer, &shared, &test, &cfg, &args.ks)?
        }
    };
    if !args.outcomes {
        report.outcomes.clear();
    }
    let report = report.with_manifest(manifest("evaluate", args, inputs)?);
    write_json(args.report.as_deref(), &report)?;
    if report.queries == 0 {
        return Err(NothingUsable(format!("all {} test pairs were skipped", report.pairs_total)).into());
    }
    Ok(())
}

pub fn fewshot(args: &FewShotArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let template = load_template(args.template.as_deref())?;
    let train = load_dict(&args.train_dict, DictionaryRole::Train)?;
    let test = load_dict(&args.test_dict, DictionaryRole::Test)?;
    let fs_cfg = FewShotConfig {
        sizes: args.sizes.clone(),
        samples: args.samples,
        seeds: args.seeds,
        base_seed: args.base_seed,
        jobs: args.jobs,
    };
    let tc = training_config(&args.train, 0);
    let mc = model_config(&args.model, 0);
    let report = few_shot_run(&vocab, &template, &train, &test, &fs_cfg, &tc, &mc)?;
    let mut inputs = vec![
        args.vocab.as_path(),
        args.train_dict.as_path(),
        args.test_dict.as_path(),
    ];
    inputs.extend(args.template.as_deref());
    // The worker count cannot change the table, so it stays out of the manifest.
    let mut echo = serde_json::to_value(args)?;
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("jobs");
        obj.remove("report");
    }
    let m = manifest("fewshot", &json!({"args": echo, "model": mc, "training": tc}), inputs)?.with_seed(args.base_seed);
    let report = report.with_manifest(m);
    write_json(args.report.as_deref(), &report)?;
    if report.queries == 0 {
        return Err(NothingUsable("every test pair was skipped".into()).into());
    }
    Ok(())
}

pub fn export_embeddings(args: &ExportArgs) -> Result<()> {
    let (model, vocab) = load_lm(&args.model, &args.vocab)?;
    let words = read_words(Some(&args.words), &[])?;
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for word in words {
        let ids = vocab.tokenize(&word);
        let unusable = ids.is_empty() || ids.contains(&lexprompt::tokenizer::UNK_ID) || ids.len() + 1 > model.max_len();
        if unusable {
            warn!("skipping {word:?}: not representable by the vocabulary");
            skipped += 1;
            continue;
        }
        let vector = match args.layer {
            Layer::Input => model.input_word_vector(&ids)?,
            Layer::Final => model.final_word_vector(&ids)?,
        };
        rows.push((word, vector));
    }
    let exported = rows.len();
    if exported == 0 {
        return Err(NothingUsable(format!("none of the {skipped} words could be exported")).into());
    }
    EmbeddingMatrix::from_rows(rows)?.save_word2vec_text(&args.out)?;
    write_json(None, &json!({"exported": exported, "skipped": skipped}))
}
