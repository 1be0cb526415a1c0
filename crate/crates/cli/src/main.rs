//! `lexprompt` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lexprompt", version, about = "Bilingual lexicon induction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a subword vocabulary from a whitespace-separated corpus.
    Vocab(VocabArgs),
    /// Align two embedding spaces from a seed dictionary.
    Align(AlignArgs),
    /// Finetune a masked LM on a seed dictionary through the padded prompt.
    Finetune(FinetuneArgs),
    /// Generate translations with a finetuned model.
    Generate(GenerateArgs),
    /// Re-rank alignment candidates with a finetuned model.
    Rerank(RerankArgs),
    /// Compute P@K for ranked predictions, the generator or the re-ranker.
    Evaluate(EvaluateArgs),
    /// Few-shot sweep over training-set sizes.
    Fewshot(FewShotArgs),
    /// Export per-word model representations in word2vec text format.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Serialize)]
struct VocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum RetrievalArg {
    Cosine,
    Csls,
}

#[derive(Args, Serialize)]
struct AlignArgs {
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    #[arg(long)]
    train_dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    self_training: bool,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = RetrievalArg::Cosine)]
    retrieval: RetrievalArg,
    /// CSLS neighborhood size.
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    #[arg(long, default_value_t = 1e-6)]
    stop_delta: f64,
    #[arg(long, default_value_t = 0.5)]
    reweight: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    whiten: bool,
    #[arg(long)]
    reduce_dim: Option<usize>,
    #[arg(long, default_value_t = 20_000)]
    induction_vocab: usize,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 256)]
    ff: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.02)]
    init_std: f64,
}

#[derive(Args, Serialize, Clone)]
struct TrainArgs {
    /// Span length: masked positions and padded source length.
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
}

#[derive(Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train_dict: PathBuf,
    /// Two lines: text before the source word, text between it and the masks.
    #[arg(long)]
    template: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct LmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n: usize,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    lm: LmArgs,
    /// Source words, one per line.
    #[arg(long)]
    words: Option<PathBuf>,
    /// A single source word; may repeat.
    #[arg(long)]
    word: Vec<String>,
    /// TSV output (source, prediction); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SpaceArgs {
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    src_emb: PathBuf,
    #[arg(long)]
    tgt_emb: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-6)]
    loss_floor: f64,
}

#[derive(Args, Serialize)]
struct RerankArgs {
    #[command(flatten)]
    lm: LmArgs,
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long)]
    words: Option<PathBuf>,
    #[arg(long)]
    word: Vec<String>,
    /// JSON-lines traces; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalMode {
    /// Score a TSV of `source<TAB>candidate1<TAB>candidate2…`.
    Ranked,
    Generator,
    Reranker,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long)]
    test_dict: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10, 50])]
    ks: Vec<usize>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    src_emb: Option<PathBuf>,
    #[arg(long)]
    tgt_emb: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-6)]
    loss_floor: f64,
    /// Include per-query outcomes in the report.
    #[arg(long)]
    outcomes: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FewShotArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    train_dict: PathBuf,
    #[arg(long)]
    test_dict: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Worker threads; the table does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Layer {
    /// Mean input token embedding.
    Input,
    /// Mean final hidden state of `[CLS] ⊕ word`.
    Final,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    words: PathBuf,
    #[arg(long, value_enum, default_value_t = Layer::Input)]
    layer: Layer,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status 1: the inputs were valid but nothing could be evaluated or
/// produced.
#[derive(Debug)]
pub struct NothingUsable(pub String);

impl std::fmt::Display for NothingUsable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NothingUsable {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Vocab(a) => commands::vocab(a),
        Command::Align(a) => commands::align(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Generate(a) => commands::generate(a),
        Command::Rerank(a) => commands::rerank(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Fewshot(a) => commands::fewshot(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<NothingUsable>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
