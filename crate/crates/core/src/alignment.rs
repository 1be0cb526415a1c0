//! Cross-lingual embedding alignment: orthogonal Procrustes, the
//! whiten / map / re-weight / de-whiten refinement, self-training with
//! dictionary induction, and top-K candidate retrieval.
//!
//! Mappings use the column convention: a source vector `x` lands in the
//! shared space as `Wx · x`, a target vector `z` as `Wz · z`.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dictionary::BilingualDictionary;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

const WHITENING_RIDGE: f64 = 1e-8;
const MAPPING_FORMAT: &str = "lexprompt-mapping-v1";

/// Similarity used to induce dictionaries during self-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Retrieval {
    Cosine,
    /// Cross-domain similarity local scaling over `k` nearest neighbors.
    Csls {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub max_iterations: usize,
    /// Minimum objective improvement needed to keep iterating.
    pub stop_delta: f64,
    pub retrieval: Retrieval,
    /// Exponent applied to the singular values on both sides.
    pub reweight_exponent: f64,
    /// Whitening before the orthogonal map and de-whitening after it.
    pub whiten: bool,
    pub reduce_dim: Option<usize>,
    pub self_training: bool,
    /// Dictionary induction only considers this many leading rows of each
    /// vocabulary (rows are assumed frequency ordered).
    pub induction_vocab: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            stop_delta: 1e-6,
            retrieval: Retrieval::Cosine,
            reweight_exponent: 0.5,
            whiten: true,
            reduce_dim: None,
            self_training: true,
            induction_vocab: 20_000,
        }
    }
}

impl AlignmentConfig {
    /// Plain orthogonal Procrustes inside the refinement step.
    pub fn procrustes_only() -> Self {
        Self {
            reweight_exponent: 0.0,
            whiten: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if let Retrieval::Csls { k: 0 } = self.retrieval {
            return Err(Error::Config("CSLS neighborhood must be at least 1".into()));
        }
        if self.reduce_dim == Some(0) {
            return Err(Error::Config("reduce_dim must be positive".into()));
        }
        if self.induction_vocab == 0 {
            return Err(Error::Config("induction_vocab must be positive".into()));
        }
        Ok(())
    }
}

/// Two linear maps into a shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMapping {
    /// `out_dim × dim`, applied to source vectors.
    pub wx: DMatrix<f64>,
    /// `out_dim × dim`, applied to target vectors.
    pub wz: DMatrix<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MappingHeader {
    format: String,
    dim: usize,
    out_dim: usize,
    config: serde_json::Value,
}

impl LinearMapping {
    pub fn identity(dim: usize) -> Self {
        Self {
            wx: DMatrix::identity(dim, dim),
            wz: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wx.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.wx.nrows()
    }

    /// Maps every row of `emb` with `w`, returning unit-length rows.
    fn project(w: &DMatrix<f64>, emb: &EmbeddingMatrix) -> DMatrix<f64> {
        let mut mapped = embedding_matrix(emb) * w.transpose();
        normalize_rows(&mut mapped);
        mapped
    }

    /// Writes a one-line JSON header followed by the row-major little-endian
    /// `f64` payload of `wx` then `wz`.
    pub fn save(&self, path: impl AsRef<Path>, config: &serde_json::Value) -> Result<()> {
        fs::write(path, self.to_bytes(config)?)?;
        Ok(())
    }

    pub fn to_bytes(&self, config: &serde_json::Value) -> Result<Vec<u8>> {
        let header = MappingHeader {
            format: MAPPING_FORMAT.into(),
            dim: self.dim(),
            out_dim: self.out_dim(),
            config: config.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for m in [&self.wx, &self.wz] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: MappingHeader = serde_json::from_str(line.trim_end())?;
        if header.format != MAPPING_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let count = header.out_dim * header.dim;
        if payload.len() != 2 * count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                2 * count * 8,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            wx: DMatrix::from_row_slice(header.out_dim, header.dim, &values[..count]),
            wz: DMatrix::from_row_slice(header.out_dim, header.dim, &values[count..]),
        })
    }
}

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    (w.transpose() * w - DMatrix::identity(w.ncols(), w.ncols())).norm()
}

pub(crate) fn embedding_matrix(emb: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(emb.len(), emb.dim(), emb.as_slice().iter().map(|&v| f64::from(v)))
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

/// Dictionary pairs present in both vocabularies, as row indices.
pub fn resolve_pairs(x: &EmbeddingMatrix, z: &EmbeddingMatrix, dict: &BilingualDictionary) -> Vec<(usize, usize)> {
    dict.pairs()
        .iter()
        .filter_map(|(s, t)| Some((x.index_of(s)?, z.index_of(t)?)))
        .collect()
}

fn check_inputs(x: &EmbeddingMatrix, z: &EmbeddingMatrix, pairs: &[(usize, usize)]) -> Result<()> {
    if x.dim() != z.dim() {
        return Err(Error::Shape(format!(
            "source dim {} != target dim {}",
            x.dim(),
            z.dim()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::TooFewPairs { found: 0, needed: 1 });
    }
    if pairs.len() < x.dim() {
        warn!(
            "only {} dictionary pairs for dimension {}; the cross-covariance is rank deficient",
            pairs.len(),
            x.dim()
        );
    }
    Ok(())
}

fn gather(m: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let rows: Vec<usize> = rows.collect();
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// SVD with singular values sorted in decreasing order.
fn sorted_svd(m: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    let s = DVector::from_fn(order.len(), |i, _| s[order[i]]);
    (u, s, v)
}

/// Orthogonal Procrustes: `Wx = U·Vᵀ` from the SVD of `Zdᵀ·Xd`, `Wz = I`.
pub fn solve_procrustes(x: &EmbeddingMatrix, z: &EmbeddingMatrix, dict: &BilingualDictionary) -> Result<LinearMapping> {
    let pairs = resolve_pairs(x, z, dict);
    check_inputs(x, z, &pairs)?;
    Ok(procrustes_pairs(&embedding_matrix(x), &embedding_matrix(z), &pairs))
}

fn procrustes_pairs(x: &DMatrix<f64>, z: &DMatrix<f64>, pairs: &[(usize, usize)]) -> LinearMapping {
    let xd = gather(x, pairs.iter().map(|p| p.0));
    let zd = gather(z, pairs.iter().map(|p| p.1));
    let (u, _, v) = sorted_svd(zd.transpose() * xd);
    LinearMapping {
        wx: &u * v.transpose(),
        wz: DMatrix::identity(x.ncols(), x.ncols()),
    }
}

/// `(MᵀM)^(-1/2)` and its inverse, computed from the dictionary rows `m`.
fn whitening(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = m.ncols();
    let mut cov = m.transpose() * m;
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&l| l < WHITENING_RIDGE) {
        warn!("whitening covariance is near singular; adding {WHITENING_RIDGE}·I");
        cov += DMatrix::identity(dim, dim) * WHITENING_RIDGE;
    }
    let eig = SymmetricEigen::new(cov);
    let q = &eig.eigenvectors;
    let inv_sqrt = DVector::from_iterator(
        dim,
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(WHITENING_RIDGE).sqrt()),
    );
    let sqrt = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|&l| l.max(WHITENING_RIDGE).sqrt()));
    let white = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    let dewhite = q * DMatrix::from_diagonal(&sqrt) * q.transpose();
    (white, dewhite)
}

/// Whitening, orthogonal mapping, singular-value re-weighting, de-whitening
/// and optional truncation, composed into one pair of matrices.
pub fn vecmap_refine(
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    dict: &BilingualDictionary,
    config: &AlignmentConfig,
) -> Result<LinearMapping> {
    config.validate()?;
    let pairs = resolve_pairs(x, z, dict);
    check_inputs(x, z, &pairs)?;
    refine_pairs(&embedding_matrix(x), &embedding_matrix(z), &pairs, config)
}

fn refine_pairs(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    pairs: &[(usize, usize)],
    config: &AlignmentConfig,
) -> Result<LinearMapping> {
    let dim = x.ncols();
    if let Some(k) = config.reduce_dim {
        if k > dim {
            return Err(Error::Config(format!("reduce_dim {k} exceeds dimension {dim}")));
        }
    }
    let xd = gather(x, pairs.iter().map(|p| p.0));
    let zd = gather(z, pairs.iter().map(|p| p.1));

    // Row convention inside: mapped rows are `x · Wx_row`.
    let whiten = config.whiten && pairs.len() >= dim;
    if config.whiten && !whiten {
        warn!(
            "skipping whitening: {} dictionary pairs cannot span dimension {dim}",
            pairs.len()
        );
    }
    let identity = DMatrix::<f64>::identity(dim, dim);
    let (wx1, wx1_inv, wz1, wz1_inv) = if whiten {
        let (a, a_inv) = whitening(&xd);
        let (b, b_inv) = whitening(&zd);
        (a, a_inv, b, b_inv)
    } else {
        (identity.clone(), identity.clone(), identity.clone(), identity.clone())
    };

    let (u, s, v) = sorted_svd((&xd * &wx1).transpose() * (&zd * &wz1));
    let weights = DMatrix::from_diagonal(&s.map(|v| {
        if config.reweight_exponent == 0.0 {
            1.0
        } else {
            v.max(0.0).powf(config.reweight_exponent)
        }
    }));

    let mut wx_row = &wx1 * &u * &weights;
    let mut wz_row = &wz1 * &v * &weights;
    if whiten {
        wx_row = wx_row * u.transpose() * &wx1_inv * &u;
        wz_row = wz_row * v.transpose() * &wz1_inv * &v;
    }

    let (wx_row, wz_row) = match config.reduce_dim {
        Some(k) if k < dim => (wx_row.columns(0, k).into_owned(), wz_row.columns(0, k).into_owned()),
        // Rotate the shared space by Vᵀ so that the unweighted, unwhitened
        // case reduces exactly to Procrustes with Wz = I.
        _ => (wx_row * v.transpose(), wz_row * v.transpose()),
    };
    Ok(LinearMapping {
        wx: wx_row.transpose(),
        wz: wz_row.transpose(),
    })
}

/// Per-iteration record of a self-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainingTrace {
    pub objectives: Vec<f64>,
    /// Running maximum of `objectives`.
    pub best_objectives: Vec<f64>,
    /// Dictionary size used to fit each iteration's mapping.
    pub dictionary_sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SelfTrainingOutcome {
    pub mapping: LinearMapping,
    pub trace: SelfTrainingTrace,
}

/// Alternates refitting the mapping and re-inducing the dictionary from
/// mutual nearest neighbors in the shared space. Returns the mapping with
/// the best objective.
pub fn self_training_align(
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    seed: &BilingualDictionary,
    config: &AlignmentConfig,
) -> Result<SelfTrainingOutcome> {
    config.validate()?;
    let mut pairs = resolve_pairs(x, z, seed);
    check_inputs(x, z, &pairs)?;
    let xm = embedding_matrix(x);
    let zm = embedding_matrix(z);
    let mut trace = SelfTrainingTrace {
        objectives: Vec::new(),
        best_objectives: Vec::new(),
        dictionary_sizes: Vec::new(),
    };

    if !config.self_training {
        let mapping = refine_pairs(&xm, &zm, &pairs, config)?;
        let (_, objective) = induce_dictionary(&mapping, &xm, &zm, config);
        trace.objectives.push(objective);
        trace.best_objectives.push(objective);
        trace.dictionary_sizes.push(pairs.len());
        return Ok(SelfTrainingOutcome { mapping, trace });
    }

    let collapse_floor = x.dim().min(pairs.len());
    let mut best: Option<(LinearMapping, f64)> = None;
    let mut previous = f64::NEG_INFINITY;
    for _ in 0..config.max_iterations {
        let mapping = refine_pairs(&xm, &zm, &pairs, config)?;
        let (induced, objective) = induce_dictionary(&mapping, &xm, &zm, config);
        trace.dictionary_sizes.push(pairs.len());
        trace.objectives.push(objective);
        let improved = best.as_ref().is_none_or(|(_, b)| objective > *b);
        if improved {
            best = Some((mapping, objective));
        }
        trace
            .best_objectives
            .push(best.as_ref().map(|(_, b)| *b).unwrap_or(objective));
        if objective - previous < config.stop_delta {
            break;
        }
        previous = objective;
        if induced.len() < collapse_floor {
            warn!(
                "induced dictionary collapsed to {} pairs; keeping the best mapping so far",
                induced.len()
            );
            break;
        }
        pairs = induced;
    }
    let (mapping, _) = best.expect("at least one iteration runs");
    Ok(SelfTrainingOutcome { mapping, trace })
}

const INDUCTION_CHUNK: usize = 1024;

/// Mutual nearest neighbors over the leading `induction_vocab` rows, plus the
/// symmetric mean best-match score used as the self-training objective.
fn induce_dictionary(
    mapping: &LinearMapping,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    config: &AlignmentConfig,
) -> (Vec<(usize, usize)>, f64) {
    let nx = x.nrows().min(config.induction_vocab);
    let nz = z.nrows().min(config.induction_vocab);
    let mut xs = x.rows(0, nx) * mapping.wx.transpose();
    let mut zs = z.rows(0, nz) * mapping.wz.transpose();
    normalize_rows(&mut xs);
    normalize_rows(&mut zs);

    let (penalty_x, penalty_z) = match config.retrieval {
        Retrieval::Cosine => (vec![0.0; nx], vec![0.0; nz]),
        Retrieval::Csls { k } => (mean_top_k(&xs, &zs, k), mean_top_k(&zs, &xs, k)),
    };
    let scale = match config.retrieval {
        Retrieval::Cosine => 1.0,
        Retrieval::Csls { .. } => 2.0,
    };

    let mut fwd = vec![(f64::NEG_INFINITY, 0usize); nx];
    let mut bwd = vec![(f64::NEG_INFINITY, 0usize); nz];
    for start in (0..nx).step_by(INDUCTION_CHUNK) {
        let rows = INDUCTION_CHUNK.min(nx - start);
        let sims = xs.rows(start, rows) * zs.transpose();
        for r in 0..rows {
            let i = start + r;
            for j in 0..nz {
                let score = scale * sims[(r, j)] - penalty_x[i] - penalty_z[j];
                if score > fwd[i].0 {
                    fwd[i] = (score, j);
                }
                if score > bwd[j].0 {
                    bwd[j] = (score, i);
                }
            }
        }
    }
    let pairs: Vec<(usize, usize)> = fwd
        .iter()
        .enumerate()
        .filter(|&(i, &(_, j))| bwd[j].1 == i)
        .map(|(i, &(_, j))| (i, j))
        .collect();
    let mean = |v: &[(f64, usize)]| v.iter().map(|p| p.0).sum::<f64>() / v.len().max(1) as f64;
    (pairs, 0.5 * (mean(&fwd) + mean(&bwd)))
}

/// For each row of `a`, the mean of its `k` highest similarities against `b`.
fn mean_top_k(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let k = k.min(b.nrows()).max(1);
    let mut out = Vec::with_capacity(a.nrows());
    for start in (0..a.nrows()).step_by(INDUCTION_CHUNK) {
        let rows = INDUCTION_CHUNK.min(a.nrows() - start);
        let sims = a.rows(start, rows) * b.transpose();
        let mut buf = Vec::with_capacity(b.nrows());
        for r in 0..rows {
            buf.clear();
            buf.extend(sims.row(r).iter().copied());
            buf.select_nth_unstable_by(k - 1, |p, q| q.total_cmp(p));
            out.push(buf[..k].iter().sum::<f64>() / k as f64);
        }
    }
    out
}

/// Top-K translation candidates for one source word, with cosine scores in
/// non-increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub source: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Both vocabularies mapped into the shared space with unit-length rows.
/// Build once, then query many source words.
#[derive(Debug, Clone)]
pub struct SharedSpace<'a> {
    x: &'a EmbeddingMatrix,
    z: &'a EmbeddingMatrix,
    xs: DMatrix<f64>,
    zs: DMatrix<f64>,
}

impl<'a> SharedSpace<'a> {
    pub fn new(mapping: &LinearMapping, x: &'a EmbeddingMatrix, z: &'a EmbeddingMatrix) -> Result<Self> {
        if mapping.dim() != x.dim() || mapping.dim() != z.dim() {
            return Err(Error::Shape(format!(
                "mapping dim {} vs embeddings {} / {}",
                mapping.dim(),
                x.dim(),
                z.dim()
            )));
        }
        Ok(Self {
            x,
            z,
            xs: LinearMapping::project(&mapping.wx, x),
            zs: LinearMapping::project(&mapping.wz, z),
        })
    }

    /// Cosine of `Wx·x_s` against every mapped target row.
    pub fn scores(&self, source_word: &str) -> Result<Vec<f64>> {
        let i = self
            .x
            .index_of(source_word)
            .ok_or_else(|| Error::UnknownWord(source_word.to_string()))?;
        let q = self.xs.row(i).transpose();
        Ok((&self.zs * q).iter().copied().collect())
    }

    /// The `k` best targets; ties go to the lower target index.
    pub fn top_k(&self, source_word: &str, k: usize) -> Result<CandidateSet> {
        if k == 0 || k > self.z.len() {
            return Err(Error::Config(format!("K = {k} must be in 1..={}", self.z.len())));
        }
        let scores = self.scores(source_word)?;
        let order = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        Ok(CandidateSet {
            source: source_word.to_string(),
            candidates: idx.iter().map(|&j| self.z.word(j).to_string()).collect(),
            scores: idx.iter().map(|&j| scores[j]).collect(),
        })
    }

    pub fn source(&self) -> &EmbeddingMatrix {
        self.x
    }

    pub fn target(&self) -> &EmbeddingMatrix {
        self.z
    }
}

pub fn top_k_candidates(
    mapping: &LinearMapping,
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    source_word: &str,
    k: usize,
) -> Result<CandidateSet> {
    SharedSpace::new(mapping, x, z)?.top_k(source_word, k)
}

/// Nearest-neighbor P@1 of `mapping` on `dict`, over pairs whose words are in
/// both vocabularies. Any gold target counts.
pub fn nearest_neighbor_accuracy(
    mapping: &LinearMapping,
    x: &EmbeddingMatrix,
    z: &EmbeddingMatrix,
    dict: &BilingualDictionary,
) -> Result<f64> {
    let space = SharedSpace::new(mapping, x, z)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (source, golds) in dict.grouped() {
        if !x.contains(&source) {
            continue;
        }
        total += 1;
        let best = space.top_k(&source, 1)?;
        if golds.contains(&best.candidates[0]) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no evaluable pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}
