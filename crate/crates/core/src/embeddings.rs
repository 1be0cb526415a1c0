//! Static word embeddings in word2vec text format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// Per-language word vectors: one `f32` row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from `(word, vector)` rows. Duplicate words keep their
    /// first row.
    pub fn from_rows<I, S>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut out = Self {
            words: Vec::new(),
            index: HashMap::new(),
            dim: 0,
            data: Vec::new(),
        };
        for (i, (word, vector)) in rows.into_iter().enumerate() {
            if i == 0 {
                out.dim = vector.len();
            }
            if vector.len() != out.dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {}",
                    vector.len(),
                    out.dim
                )));
            }
            out.push(word.into(), &vector);
        }
        Ok(out)
    }

    fn push(&mut self, word: String, vector: &[f32]) -> bool {
        if self.index.contains_key(&word) {
            return false;
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend_from_slice(vector);
        true
    }

    /// Reads the word2vec text format: a `count dim` header line followed by
    /// `word v1 .. v_dim` rows.
    pub fn load_word2vec_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse_word2vec_text(&text, path)
    }

    pub fn parse_word2vec_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| Error::parse(path, 1, "empty embedding file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().ok();
        let (count, dim) = match fields.as_slice() {
            [c, d] => match (parse_usize(c), parse_usize(d)) {
                (Some(c), Some(d)) if d > 0 => (c, d),
                _ => return Err(Error::parse(path, 1, format!("bad header {header:?}"))),
            },
            _ => return Err(Error::parse(path, 1, format!("bad header {header:?}"))),
        };

        let mut out = Self {
            words: Vec::with_capacity(count),
            index: HashMap::with_capacity(count),
            dim,
            data: Vec::with_capacity(count * dim),
        };
        let mut seen = 0usize;
        let mut duplicates = 0usize;
        let mut vector = Vec::with_capacity(dim);
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            vector.clear();
            for tok in parts {
                let v: f32 = tok
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad number {tok:?}")))?;
                vector.push(v);
            }
            if vector.len() != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} values, found {}", vector.len()),
                ));
            }
            seen += 1;
            if !out.push(word.to_string(), &vector) {
                duplicates += 1;
                warn!("{}:{lineno}: duplicate word {word:?}, keeping first", path.display());
            }
        }
        if seen != count {
            return Err(Error::parse(
                path,
                1,
                format!("header announces {count} rows, found {seen}"),
            ));
        }
        if duplicates > 0 {
            warn!("{}: dropped {duplicates} duplicate rows", path.display());
        }
        Ok(out)
    }

    /// Renders the word2vec text format with shortest round-trip decimals.
    pub fn to_word2vec_text(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 10);
        let _ = writeln!(s, "{} {}", self.len(), self.dim);
        for (i, word) in self.words.iter().enumerate() {
            s.push_str(word);
            for v in self.row(i) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save_word2vec_text(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_word2vec_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, row: usize) -> &str {
        &self.words[row]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, word: &str) -> Option<&[f32]> {
        self.index_of(word).map(|i| self.row(i))
    }

    /// Row-major storage.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Unit-length rows, mean-centered, unit-length again. Centering is
    /// skipped for a single-row matrix.
    pub fn normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        out.unit_rows()?;
        if out.len() > 1 {
            out.center();
            out.unit_rows()?;
        }
        Ok(out)
    }

    fn unit_rows(&mut self) -> Result<()> {
        let dim = self.dim;
        for (i, row) in self.data.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector(self.words[i].clone()));
            }
            row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
        }
        Ok(())
    }

    fn center(&mut self) {
        let dim = self.dim;
        let mut mean = vec![0f64; dim];
        for row in self.data.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += f64::from(v));
        }
        let count = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for row in self.data.chunks_mut(dim) {
            row.iter_mut()
                .zip(&mean)
                .for_each(|(v, &m)| *v = (f64::from(*v) - m) as f32);
        }
    }
}

/// Cosine similarity with `f64` accumulation.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("cosine operand".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}
