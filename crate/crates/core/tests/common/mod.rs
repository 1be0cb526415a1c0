//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lexprompt::mlm::{MaskedLm, ModelConfig, Params};
use lexprompt::tokenizer::SPECIAL_TOKENS;
use lexprompt::SubwordVocabulary;
use rand::Rng;

pub fn toy_vocab(extra: &[&str]) -> SubwordVocabulary {
    SubwordVocabulary::from_tokens(SPECIAL_TOKENS.iter().copied().chain(extra.iter().copied())).unwrap()
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        feed_forward: 16,
        max_len: 16,
        init_std: 0.3,
        seed,
    }
}

/// A model whose every parameter, gains and biases included, is random.
pub fn random_model<R: Rng>(rng: &mut R, config: ModelConfig, vocab: &SubwordVocabulary, scale: f64) -> MaskedLm<f64> {
    let mut model = MaskedLm::<f64>::new(config, vocab).unwrap();
    let flat: Vec<f64> = (0..model.params.count())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    model.params.set_flat(&flat);
    model
}

type Mat = Vec<Vec<f64>>;

fn row(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn linear(x: &Mat, w: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> Mat {
    x.iter()
        .map(|xr| {
            (0..w.ncols())
                .map(|j| b[(0, j)] + (0..w.nrows()).map(|i| xr[i] * w[(i, j)]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> Mat {
    let (g, b) = (row(g), row(b));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Straight-line pre-norm encoder with tied output: per-position
/// probabilities over the vocabulary.
pub fn naive_forward(p: &Params<f64>, heads: usize, tokens: &[usize]) -> Mat {
    let d = p.token_embedding.ncols();
    let dh = d / heads;
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|c| p.token_embedding[(id, c)] + p.position_embedding[(t, c)])
                .collect()
        })
        .collect();
    for l in &p.layers {
        let a = norm(&x, &l.ln1_gain, &l.ln1_bias);
        let (q, k, v) = (
            linear(&a, &l.wq, &l.bq),
            linear(&a, &l.wk, &l.bk),
            linear(&a, &l.wv, &l.bv),
        );
        let mut ctx = vec![vec![0.0; d]; tokens.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tokens.len() {
                let scores: Vec<f64> = (0..tokens.len())
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let att = softmax(&scores);
                for c in cols.clone() {
                    ctx[i][c] = (0..tokens.len()).map(|j| att[j] * v[j][c]).sum();
                }
            }
        }
        let o = linear(&ctx, &l.wo, &l.bo);
        for (xr, or) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let bn = norm(&x, &l.ln2_gain, &l.ln2_bias);
        let u: Mat = linear(&bn, &l.w1, &l.b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = linear(&u, &l.w2, &l.b2);
        for (xr, fr) in x.iter_mut().zip(&f) {
            for (a, b) in xr.iter_mut().zip(fr) {
                *a += b;
            }
        }
    }
    let h = norm(&x, &p.final_gain, &p.final_bias);
    let vocab = p.token_embedding.nrows();
    h.iter()
        .map(|hr| {
            let logits: Vec<f64> = (0..vocab)
                .map(|w| p.output_bias[(0, w)] + (0..d).map(|c| hr[c] * p.token_embedding[(w, c)]).sum::<f64>())
                .collect();
            softmax(&logits)
        })
        .collect()
}

/// P@K is monotone in K and bounded, and evaluated plus skipped pairs add
/// up to the total.
pub fn check_report(report: &lexprompt::EvaluationReport) -> Result<(), String> {
    for p in [Some(&report.precision), report.base_precision.as_ref()]
        .into_iter()
        .flatten()
    {
        let vals: Vec<f64> = p.values().copied().collect();
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) || vals.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("precision not monotone in K: {p:?}"));
        }
    }
    if report.pairs_evaluated + report.pairs_skipped.total() != report.pairs_total {
        return Err(format!(
            "{} evaluated + {} skipped != {} total",
            report.pairs_evaluated,
            report.pairs_skipped.total(),
            report.pairs_total
        ));
    }
    Ok(())
}
