use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use super::params::Params;
use super::prompt::{build_prompt, PromptTemplate};
use super::{MaskedLm, Scalar, TrainingExample};
use crate::dictionary::BilingualDictionary;
use crate::error::{Error, Result};
use crate::tokenizer::SubwordVocabulary;

/// Adam with β = (0.9, 0.999), ε = 1e-8, no weight decay, constant rate.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    learning_rate: f64,
    step: i32,
    m: Params<F>,
    v: Params<F>,
}

impl<F: Scalar> Adam<F> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &Params<F>, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>) {
        self.step += 1;
        let b1 = F::lit(Self::BETA1);
        let b2 = F::lit(Self::BETA2);
        let one = F::one();
        let c1 = F::lit(1.0 - Self::BETA1.powi(self.step));
        let c2 = F::lit(1.0 - Self::BETA2.powi(self.step));
        let lr = F::lit(self.learning_rate);
        let eps = F::lit(Self::EPS);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Outcome of [`finetune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Mean training loss of each epoch, measured before each batch update.
    pub loss_trace: Vec<f64>,
    pub pairs_used: usize,
    /// Pairs dropped because a word was empty or longer than the span.
    pub pairs_dropped: usize,
}

/// Turns dictionary pairs into padded prompts and targets. Returns the
/// examples and the number of pairs that could not be represented.
pub fn prepare_examples(
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    dict: &BilingualDictionary,
    span: usize,
    max_len: usize,
) -> Result<(Vec<TrainingExample>, usize)> {
    let compiled = template.compile(vocab);
    let mut examples = Vec::with_capacity(dict.len());
    let mut dropped = 0;
    for (source, target) in dict.pairs() {
        let (Ok(src), Ok(tgt)) = (vocab.tokenize_padded(source, span), vocab.tokenize_padded(target, span)) else {
            dropped += 1;
            continue;
        };
        let prompt = build_prompt(&compiled, &src, span, max_len)?;
        examples.push(TrainingExample {
            prompt,
            targets: tgt.ids().to_vec(),
        });
    }
    Ok((examples, dropped))
}

/// Minimizes the mean masked cross-entropy over shuffled mini-batches.
/// Deterministic for a fixed `config.seed`.
pub fn finetune<F: Scalar>(
    model: &mut MaskedLm<F>,
    vocab: &SubwordVocabulary,
    template: &PromptTemplate,
    dict: &BilingualDictionary,
    config: &TrainingConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    model.check_vocab(vocab)?;
    let (examples, dropped) = prepare_examples(vocab, template, dict, config.span, model.max_len())?;
    if dropped > 0 {
        warn!("dropped {dropped} pairs that do not fit in {} sub-tokens", config.span);
    }
    if examples.is_empty() {
        return Err(Error::Empty("no usable training pairs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grads) = model.loss_and_grad(&batch)?;
            adam.update(&mut model.params, &grads);
            total += loss * chunk.len() as f64;
        }
        let mean = total / examples.len() as f64;
        info!("epoch {}: mean loss {mean:.5}", epoch + 1);
        loss_trace.push(mean);
    }
    Ok(FinetuneReport {
        loss_trace,
        pairs_used: examples.len(),
        pairs_dropped: dropped,
    })
}
