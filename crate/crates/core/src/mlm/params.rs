use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::Scalar;

/// Weights of one pre-norm encoder block. Vectors are stored as `1 × n`
/// matrices; linear maps act on row vectors (`x · W + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub ln1_gain: DMatrix<F>,
    pub ln1_bias: DMatrix<F>,
    pub wq: DMatrix<F>,
    pub bq: DMatrix<F>,
    pub wk: DMatrix<F>,
    pub bk: DMatrix<F>,
    pub wv: DMatrix<F>,
    pub bv: DMatrix<F>,
    pub wo: DMatrix<F>,
    pub bo: DMatrix<F>,
    pub ln2_gain: DMatrix<F>,
    pub ln2_bias: DMatrix<F>,
    pub w1: DMatrix<F>,
    pub b1: DMatrix<F>,
    pub w2: DMatrix<F>,
    pub b2: DMatrix<F>,
}

/// All trainable tensors. The token embedding doubles as the output
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F: Scalar> {
    pub token_embedding: DMatrix<F>,
    pub position_embedding: DMatrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_gain: DMatrix<F>,
    pub final_bias: DMatrix<F>,
    pub output_bias: DMatrix<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, ff) = (cfg.hidden, cfg.feed_forward);
        let mut w = |r, c| normal(r, c, cfg.init_std, rng);
        Self {
            ln1_gain: DMatrix::from_element(1, d, F::one()),
            ln1_bias: DMatrix::zeros(1, d),
            wq: w(d, d),
            bq: DMatrix::zeros(1, d),
            wk: w(d, d),
            bk: DMatrix::zeros(1, d),
            wv: w(d, d),
            bv: DMatrix::zeros(1, d),
            wo: w(d, d),
            bo: DMatrix::zeros(1, d),
            ln2_gain: DMatrix::from_element(1, d, F::one()),
            ln2_bias: DMatrix::zeros(1, d),
            w1: w(d, ff),
            b1: DMatrix::zeros(1, ff),
            w2: w(ff, d),
            b2: DMatrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&DMatrix<F>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DMatrix<F>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

fn normal<F: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> DMatrix<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    // Row-major draw order keeps initialization independent of storage layout.
    let values: Vec<F> = (0..rows * cols).map(|_| F::lit(dist.sample(rng))).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

impl<F: Scalar> Params<F> {
    pub fn init<R: Rng>(cfg: &ModelConfig, vocab_size: usize, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let token_embedding = normal(vocab_size, d, cfg.init_std, rng);
        let position_embedding = normal(cfg.max_len, d, cfg.init_std, rng);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(cfg, rng)).collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_gain: DMatrix::from_element(1, d, F::one()),
            final_bias: DMatrix::zeros(1, d),
            output_bias: DMatrix::zeros(1, vocab_size),
        }
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<&DMatrix<F>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.output_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<F>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.output_bias]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Row-major flattening in canonical order.
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.count());
        for t in self.tensors() {
            for r in 0..t.nrows() {
                out.extend(t.row(r).iter().copied());
            }
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat); `values` must have
    /// [`count`](Self::count) entries.
    pub fn set_flat(&mut self, values: &[F]) {
        assert_eq!(values.len(), self.count());
        let mut at = 0;
        for t in self.tensors_mut() {
            let cols = t.ncols();
            for r in 0..t.nrows() {
                for c in 0..cols {
                    t[(r, c)] = values[at + r * cols + c];
                }
            }
            at += t.len();
        }
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let cast = |m: &DMatrix<F>| m.map(|v| G::lit(v.as_f64()));
        Params {
            token_embedding: cast(&self.token_embedding),
            position_embedding: cast(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: cast(&l.ln1_gain),
                    ln1_bias: cast(&l.ln1_bias),
                    wq: cast(&l.wq),
                    bq: cast(&l.bq),
                    wk: cast(&l.wk),
                    bk: cast(&l.bk),
                    wv: cast(&l.wv),
                    bv: cast(&l.bv),
                    wo: cast(&l.wo),
                    bo: cast(&l.bo),
                    ln2_gain: cast(&l.ln2_gain),
                    ln2_bias: cast(&l.ln2_bias),
                    w1: cast(&l.w1),
                    b1: cast(&l.b1),
                    w2: cast(&l.w2),
                    b2: cast(&l.b2),
                })
                .collect(),
            final_gain: cast(&self.final_gain),
            final_bias: cast(&self.final_bias),
            output_bias: cast(&self.output_bias),
        }
    }
}
