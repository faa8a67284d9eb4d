use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD_ID};
use super::TextError;
use crate::hashing::fnv1a;
use crate::nn::Tensor;

/// Word-vector width.
pub const EMBED_DIM: usize = 200;
/// Components of hash-seeded vectors are uniform in ±this bound.
pub const OOV_BOUND: f64 = 0.1;

/// Frozen `|V| × d` word vectors, row `i` for vocabulary index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

/// Deterministic vector for a token, seeded by its FNV-1a hash.
pub fn hashed_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    (0..dim).map(|_| rng.gen_range(-OOV_BOUND..=OOV_BOUND)).collect()
}

impl EmbeddingTable {
    /// Every token gets its hash-seeded vector; PAD is zero.
    pub fn hashed(vocab: &Vocab) -> Self {
        Self::from_vectors(vocab, &HashMap::new(), EMBED_DIM)
    }

    fn from_vectors(vocab: &Vocab, vectors: &HashMap<String, Vec<f64>>, dim: usize) -> Self {
        let mut data = Vec::with_capacity(vocab.len() * dim);
        for (i, tok) in vocab.tokens().iter().enumerate() {
            if i == PAD_ID {
                data.extend(std::iter::repeat_n(0.0, dim));
            } else if let Some(v) = vectors.get(tok) {
                data.extend_from_slice(v);
            } else {
                data.extend(hashed_vector(tok, dim));
            }
        }
        Self { dim, data }
    }

    /// Reads the textual word-vector format: a `count dim` header, then `token v1 … vd`
    /// lines. Tokens absent from the file receive [`hashed_vector`]s.
    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, TextError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file), vocab)
    }

    pub fn read<R: BufRead>(reader: R, vocab: &Vocab) -> Result<Self, TextError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(TextError::Malformed { line: 1, reason: "missing header".into() })??;
        let mut parts = header.split_whitespace();
        let parse_header = |s: Option<&str>| -> Result<usize, TextError> {
            s.and_then(|v| v.parse().ok())
                .ok_or(TextError::Malformed { line: 1, reason: "header must be `count dim`".into() })
        };
        let _count = parse_header(parts.next())?;
        let dim = parse_header(parts.next())?;
        if dim != EMBED_DIM {
            return Err(TextError::DimMismatch { expected: EMBED_DIM, found: dim });
        }
        let mut vectors = HashMap::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_string();
            let values: Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| TextError::Malformed { line: line_no, reason: e.to_string() })?;
            if values.len() != dim {
                return Err(TextError::Malformed {
                    line: line_no,
                    reason: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(TextError::Malformed { line: line_no, reason: "non-finite value".into() });
            }
            if vocab.contains(&token) {
                vectors.insert(token, values);
            }
        }
        Ok(Self::from_vectors(vocab, &vectors, dim))
    }

    /// Table for `vocab` from `(token, vector)` pairs; tokens without a pair are hashed.
    pub fn from_pairs(vocab: &Vocab, pairs: &[(String, Vec<f64>)], dim: usize) -> Self {
        let vectors: HashMap<String, Vec<f64>> =
            pairs.iter().filter(|(t, _)| vocab.contains(t)).map(|(t, v)| (t.clone(), v.clone())).collect();
        Self::from_vectors(vocab, &vectors, dim)
    }

    /// Table from explicit rows of width `dim`, e.g. for small test models.
    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>) -> Self {
        assert!(rows.iter().all(|r| r.len() == dim), "row width differs from {dim}");
        Self { dim, data: rows.into_iter().flatten().collect() }
    }

    /// Writes `pairs` in the format [`EmbeddingTable::read`] accepts.
    pub fn write_pairs<W: std::io::Write>(mut w: W, pairs: &[(String, Vec<f64>)], dim: usize) -> std::io::Result<()> {
        writeln!(w, "{} {dim}", pairs.len())?;
        for (token, v) in pairs {
            write!(w, "{token}")?;
            for x in v {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    /// `L × d` matrix of the vectors for `ids`.
    pub fn sequence(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.row(id));
        }
        Tensor::from_vec(ids.len(), self.dim, data)
    }
}
