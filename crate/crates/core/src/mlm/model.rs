use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::Params;
use super::{mask_positions, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::{SubwordVocabulary, TokenId, CLS_ID};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// Pre-norm transformer encoder with learned absolute positions and an
/// output projection tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLm<F: Scalar = f32> {
    config: ModelConfig,
    vocab_digest: String,
    pub params: Params<F>,
}

/// One prompt and the ids expected at its `[MASK]` positions, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub prompt: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

struct NormCache<F: Scalar> {
    xhat: DMatrix<F>,
    rstd: Vec<F>,
}

struct LayerCache<F: Scalar> {
    ln1: NormCache<F>,
    a: DMatrix<F>,
    q: DMatrix<F>,
    k: DMatrix<F>,
    v: DMatrix<F>,
    probs: Vec<DMatrix<F>>,
    ctx: DMatrix<F>,
    ln2: NormCache<F>,
    bn: DMatrix<F>,
    u: DMatrix<F>,
    g: DMatrix<F>,
}

struct EncodeCache<F: Scalar> {
    batch: usize,
    seq_len: usize,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
    hidden: DMatrix<F>,
}

impl<F: Scalar> MaskedLm<F> {
    /// A freshly initialized model for `vocab`, seeded by `config.seed`.
    pub fn new(config: ModelConfig, vocab: &SubwordVocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, vocab.len(), &mut rng);
        Ok(Self {
            config,
            vocab_digest: vocab.digest(),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, vocab_digest: String, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let ok = params.token_embedding.ncols() == d
            && params.position_embedding.shape() == (config.max_len, d)
            && params.layers.len() == config.layers
            && params.output_bias.ncols() == params.token_embedding.nrows();
        if !ok {
            return Err(Error::Shape("parameters do not match the model config".into()));
        }
        Ok(Self {
            config,
            vocab_digest,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.params.token_embedding.nrows()
    }

    pub fn vocab_digest(&self) -> &str {
        &self.vocab_digest
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    /// Errors unless `vocab` is the vocabulary this model was built for.
    pub fn check_vocab(&self, vocab: &SubwordVocabulary) -> Result<()> {
        if vocab.len() != self.vocab_size() || vocab.digest() != self.vocab_digest {
            return Err(Error::Config(
                "vocabulary does not match the one the model was built with".into(),
            ));
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> MaskedLm<G> {
        MaskedLm {
            config: self.config.clone(),
            vocab_digest: self.vocab_digest.clone(),
            params: self.params.cast(),
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::PromptTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        let size = self.vocab_size();
        match tokens.iter().find(|&&id| id >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    fn encode(&self, seqs: &[&[TokenId]]) -> Result<EncodeCache<F>> {
        let first = seqs.first().ok_or_else(|| Error::Empty("batch".into()))?;
        let seq_len = first.len();
        for s in seqs {
            self.check_tokens(s)?;
            if s.len() != seq_len {
                return Err(Error::Shape("sequences in a batch must share a length".into()));
            }
        }
        let p = &self.params;
        let (batch, d) = (seqs.len(), self.config.hidden);
        let rows = batch * seq_len;
        let tokens: Vec<TokenId> = seqs.iter().flat_map(|s| s.iter().copied()).collect();

        let mut x = DMatrix::from_fn(rows, d, |r, c| {
            p.token_embedding[(tokens[r], c)] + p.position_embedding[(r % seq_len, c)]
        });

        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias);
            let q = affine(&a, &lp.wq, &lp.bq);
            let k = affine(&a, &lp.wk, &lp.bk);
            let v = affine(&a, &lp.wv, &lp.bv);
            let mut ctx = DMatrix::zeros(rows, d);
            let mut probs = Vec::with_capacity(batch * heads);
            for b in 0..batch {
                for h in 0..heads {
                    let at = (b * seq_len, h * dh);
                    let shape = (seq_len, dh);
                    let mut s = q.view(at, shape) * k.view(at, shape).transpose() * scale;
                    softmax_rows(&mut s);
                    ctx.view_mut(at, shape).copy_from(&(&s * v.view(at, shape)));
                    probs.push(s);
                }
            }
            x += affine(&ctx, &lp.wo, &lp.bo);
            let (bn, ln2) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias);
            let u = affine(&bn, &lp.w1, &lp.b1);
            let g = u.map(gelu);
            x += affine(&g, &lp.w2, &lp.b2);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                bn,
                u,
                g,
            });
        }
        let (hidden, final_norm) = layer_norm(&x, &p.final_gain, &p.final_bias);
        Ok(EncodeCache {
            batch,
            seq_len,
            tokens,
            layers,
            final_norm,
            hidden,
        })
    }

    /// Output logits `h · Eᵀ + bias` for the selected hidden rows.
    fn logits_at(&self, hidden: &DMatrix<F>, rows: &[usize]) -> DMatrix<F> {
        let selected = gather_rows(hidden, rows);
        let mut logits = selected * self.params.token_embedding.transpose();
        add_row(&mut logits, &self.params.output_bias);
        logits
    }

    /// Final-layer hidden states, one row per token.
    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<DMatrix<F>> {
        Ok(self.encode(&[tokens])?.hidden)
    }

    /// Per-position probability distributions over the vocabulary
    /// (`len(tokens) × vocab_size`).
    pub fn forward(&self, tokens: &[TokenId]) -> Result<DMatrix<F>> {
        let cache = self.encode(&[tokens])?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let mut logits = self.logits_at(&cache.hidden, &rows);
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Raw logits at `positions`.
    pub fn logits(&self, tokens: &[TokenId], positions: &[usize]) -> Result<DMatrix<F>> {
        if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Shape(format!(
                "position {p} outside a {}-token input",
                tokens.len()
            )));
        }
        let cache = self.encode(&[tokens])?;
        Ok(self.logits_at(&cache.hidden, positions))
    }

    /// Log-softmax rows at `positions`.
    pub fn masked_log_probs(&self, tokens: &[TokenId], positions: &[usize]) -> Result<DMatrix<F>> {
        let mut logits = self.logits(tokens, positions)?;
        log_softmax_rows(&mut logits);
        Ok(logits)
    }

    fn batch_targets(&self, batch: &[TrainingExample], seq_len: usize) -> Result<(Vec<usize>, Vec<TokenId>)> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, ex) in batch.iter().enumerate() {
            let positions = mask_positions(&ex.prompt);
            if positions.len() != ex.targets.len() {
                return Err(Error::Shape(format!(
                    "{} masked positions but {} targets",
                    positions.len(),
                    ex.targets.len()
                )));
            }
            if let Some(&id) = ex.targets.iter().find(|&&id| id >= self.vocab_size()) {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.vocab_size(),
                });
            }
            rows.extend(positions.iter().map(|p| b * seq_len + p));
            targets.extend_from_slice(&ex.targets);
        }
        if rows.is_empty() {
            return Err(Error::Empty("no masked positions in batch".into()));
        }
        Ok((rows, targets))
    }

    /// Mean cross-entropy over every masked position of the batch.
    pub fn loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        let seqs: Vec<&[TokenId]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
        let cache = self.encode(&seqs)?;
        let (rows, targets) = self.batch_targets(batch, cache.seq_len)?;
        let mut logits = self.logits_at(&cache.hidden, &rows);
        log_softmax_rows(&mut logits);
        let total: f64 = targets.iter().enumerate().map(|(i, &t)| -logits[(i, t)].as_f64()).sum();
        Ok(total / targets.len() as f64)
    }

    /// [`loss`](Self::loss) together with its gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingExample]) -> Result<(f64, Params<F>)> {
        let seqs: Vec<&[TokenId]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
        let cache = self.encode(&seqs)?;
        let (rows, targets) = self.batch_targets(batch, cache.seq_len)?;
        let mut dlogits = self.logits_at(&cache.hidden, &rows);
        log_softmax_rows(&mut dlogits);
        let count = targets.len();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -dlogits[(i, t)].as_f64())
            .sum::<f64>()
            / count as f64;

        // d(mean CE)/d(logits) = (softmax − onehot) / count
        let inv = F::lit(1.0 / count as f64);
        dlogits.apply(|v| *v = v.exp() * inv);
        for (i, &t) in targets.iter().enumerate() {
            dlogits[(i, t)] -= inv;
        }
        Ok((loss, self.backward(&cache, &rows, &dlogits)))
    }

    fn backward(&self, cache: &EncodeCache<F>, rows: &[usize], dlogits: &DMatrix<F>) -> Params<F> {
        let p = &self.params;
        let mut grads = p.zeros_like();
        let (seq_len, d) = (cache.seq_len, self.config.hidden);
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = F::lit(1.0 / (dh as f64).sqrt());

        let selected = gather_rows(&cache.hidden, rows);
        grads.token_embedding += dlogits.transpose() * &selected;
        add_col_sums(&mut grads.output_bias, dlogits);
        let dselected = dlogits * &p.token_embedding;
        let mut dhidden = DMatrix::zeros(cache.hidden.nrows(), d);
        for (i, &r) in rows.iter().enumerate() {
            let mut row = dhidden.row_mut(r);
            row += dselected.row(i);
        }
        let mut dx = layer_norm_backward(
            &dhidden,
            &cache.final_norm,
            &p.final_gain,
            &mut grads.final_gain,
            &mut grads.final_bias,
        );

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &p.layers[l];
            let gl = &mut grads.layers[l];

            // x_out = x_mid + gelu(LN2(x_mid)·W1 + b1)·W2 + b2
            gl.w2 += lc.g.transpose() * &dx;
            add_col_sums(&mut gl.b2, &dx);
            let mut du = &dx * lp.w2.transpose();
            du.zip_apply(&lc.u, |d, u| *d *= gelu_grad(u));
            gl.w1 += lc.bn.transpose() * &du;
            add_col_sums(&mut gl.b1, &du);
            let dbn = du * lp.w1.transpose();
            dx += layer_norm_backward(&dbn, &lc.ln2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);

            // x_mid = x_in + attn(LN1(x_in))·Wo + bo
            gl.wo += lc.ctx.transpose() * &dx;
            add_col_sums(&mut gl.bo, &dx);
            let dctx = &dx * lp.wo.transpose();
            let rows_total = dctx.nrows();
            let mut dq = DMatrix::zeros(rows_total, d);
            let mut dk = DMatrix::zeros(rows_total, d);
            let mut dv = DMatrix::zeros(rows_total, d);
            for b in 0..cache.batch {
                for h in 0..heads {
                    let at = (b * seq_len, h * dh);
                    let shape = (seq_len, dh);
                    let probs = &lc.probs[b * heads + h];
                    let dc = dctx.view(at, shape);
                    let dp = dc * lc.v.view(at, shape).transpose();
                    dv.view_mut(at, shape).copy_from(&(probs.transpose() * dc));
                    let mut ds = dp;
                    for i in 0..seq_len {
                        let mut dot = F::zero();
                        for j in 0..seq_len {
                            dot += ds[(i, j)] * probs[(i, j)];
                        }
                        for j in 0..seq_len {
                            ds[(i, j)] = probs[(i, j)] * (ds[(i, j)] - dot) * scale;
                        }
                    }
                    dq.view_mut(at, shape).copy_from(&(&ds * lc.k.view(at, shape)));
                    dk.view_mut(at, shape)
                        .copy_from(&(ds.transpose() * lc.q.view(at, shape)));
                }
            }
            let at = lc.a.transpose();
            gl.wq += &at * &dq;
            gl.wk += &at * &dk;
            gl.wv += &at * &dv;
            add_col_sums(&mut gl.bq, &dq);
            add_col_sums(&mut gl.bk, &dk);
            add_col_sums(&mut gl.bv, &dv);
            let da = dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();
            dx += layer_norm_backward(&da, &lc.ln1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        }

        for (r, &tok) in cache.tokens.iter().enumerate() {
            let g = dx.row(r);
            let mut te = grads.token_embedding.row_mut(tok);
            te += &g;
            let mut pe = grads.position_embedding.row_mut(r % seq_len);
            pe += &g;
        }
        grads
    }

    /// Mean input-embedding row over `ids`.
    pub fn input_word_vector(&self, ids: &[TokenId]) -> Result<Vec<F>> {
        self.check_tokens(ids)?;
        let d = self.config.hidden;
        let inv = F::lit(1.0 / ids.len() as f64);
        Ok((0..d)
            .map(|c| {
                ids.iter()
                    .fold(F::zero(), |acc, &id| acc + self.params.token_embedding[(id, c)])
                    * inv
            })
            .collect())
    }

    /// Mean final hidden state over the word's tokens, encoded as
    /// `[CLS] ⊕ ids`.
    pub fn final_word_vector(&self, ids: &[TokenId]) -> Result<Vec<F>> {
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(CLS_ID);
        seq.extend_from_slice(ids);
        let h = self.hidden_states(&seq)?;
        let inv = F::lit(1.0 / ids.len() as f64);
        Ok((0..h.ncols())
            .map(|c| (1..h.nrows()).fold(F::zero(), |acc, r| acc + h[(r, c)]) * inv)
            .collect())
    }
}

fn gather_rows<F: Scalar>(m: &DMatrix<F>, rows: &[usize]) -> DMatrix<F> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn add_row<F: Scalar>(m: &mut DMatrix<F>, bias: &DMatrix<F>) {
    for c in 0..m.ncols() {
        let b = bias[(0, c)];
        m.column_mut(c).apply(|v| *v += b);
    }
}

fn add_col_sums<F: Scalar>(target: &mut DMatrix<F>, m: &DMatrix<F>) {
    for c in 0..m.ncols() {
        target[(0, c)] += m.column(c).sum();
    }
}

fn affine<F: Scalar>(x: &DMatrix<F>, w: &DMatrix<F>, b: &DMatrix<F>) -> DMatrix<F> {
    let mut y = x * w;
    add_row(&mut y, b);
    y
}

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_K) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

pub(crate) fn softmax_rows<F: Scalar>(m: &mut DMatrix<F>) {
    for r in 0..m.nrows() {
        let mut row = m.row_mut(r);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.apply(|v| *v /= sum);
    }
}

pub(crate) fn log_softmax_rows<F: Scalar>(m: &mut DMatrix<F>) {
    for r in 0..m.nrows() {
        let mut row = m.row_mut(r);
        let max = row.max();
        let lse = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        row.apply(|v| *v -= lse);
    }
}

fn layer_norm<F: Scalar>(x: &DMatrix<F>, gain: &DMatrix<F>, bias: &DMatrix<F>) -> (DMatrix<F>, NormCache<F>) {
    let (n, d) = x.shape();
    let inv_d = F::lit(1.0 / d as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = DMatrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() * inv_d;
        let var = row.iter().fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        for c in 0..d {
            xhat[(r, c)] = (x[(r, c)] - mean) * rs;
        }
        rstd.push(rs);
    }
    let y = DMatrix::from_fn(n, d, |r, c| xhat[(r, c)] * gain[(0, c)] + bias[(0, c)]);
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &DMatrix<F>,
    cache: &NormCache<F>,
    gain: &DMatrix<F>,
    dgain: &mut DMatrix<F>,
    dbias: &mut DMatrix<F>,
) -> DMatrix<F> {
    let (n, d) = dy.shape();
    let inv_d = F::lit(1.0 / d as f64);
    let mut dx = DMatrix::zeros(n, d);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            let g = dy[(r, c)];
            let xh = cache.xhat[(r, c)];
            dgain[(0, c)] += g * xh;
            dbias[(0, c)] += g;
            dxhat[c] = g * gain[(0, c)];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[(r, c)] = rs * (dxhat[c] - mean_dxhat - cache.xhat[(r, c)] * mean_dxhat_xhat);
        }
    }
    dx
}
