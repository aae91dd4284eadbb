//! Lexical and embedding-based similarity metrics.
//!
//! These are both baselines and sources of pre-training targets. BLEU uses
//! add-one smoothing on orders >= 2 only when the raw precision is zero, so a
//! candidate with no unigram overlap still scores exactly 0.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::textcore::{TokenSeq, Vocabulary, UNK_ID};

/// Smoothing variant recorded in artifact metadata.
pub const BLEU_SMOOTHING: &str = "add-one on orders >= 2 when the raw precision is 0";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("max_order must be >= 1")]
    BadOrder,
    #[error("embedding for token id {0} has zero norm")]
    ZeroNorm(u32),
    #[error("embedding file {path}: {reason}")]
    BadEmbeddingFile { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Precision, recall, and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        fscore: 0.0,
    };

    pub fn new(precision: f64, recall: f64) -> Self {
        let fscore = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            fscore,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.precision, self.recall, self.fscore]
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap count and the candidate-side total for order `n`.
fn clipped_matches(reference: &[String], candidate: &[String], n: usize) -> (usize, usize) {
    let rc = ngram_counts(reference, n);
    let cc = ngram_counts(candidate, n);
    let matched = cc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

pub fn sentence_bleu(reference: &TokenSeq, candidate: &TokenSeq, max_order: usize) -> Result<f64, MetricError> {
    if max_order == 0 {
        return Err(MetricError::BadOrder);
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (r, c) = (reference.tokens(), candidate.tokens());
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (m, total) = clipped_matches(r, c, n);
        if m == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            log_sum += (1.0 / (total as f64 + 1.0)).ln();
        } else {
            log_sum += (m as f64 / total as f64).ln();
        }
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_order as f64).exp())
}

pub fn rouge_n(reference: &TokenSeq, candidate: &TokenSeq, n: usize) -> Prf {
    let n = n.max(1);
    let (r, c) = (reference.tokens(), candidate.tokens());
    let ref_total = r.len().saturating_sub(n - 1);
    let (m, cand_total) = clipped_matches(r, c, n);
    if ref_total == 0 || cand_total == 0 {
        return Prf::ZERO;
    }
    Prf::new(m as f64 / cand_total as f64, m as f64 / ref_total as f64)
}

/// Dense vectors indexed by vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 || vectors.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(MetricError::BadEmbeddingFile {
                path: PathBuf::new(),
                reason: "vectors must share a positive dimension and be finite".into(),
            });
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    /// Gaussian vectors, one per vocabulary entry, from a fixed seed.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::derived_rng(seed, "embeddings", 0);
        let vectors = (0..vocab_size)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        EmbeddingTable { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Vector for `id`; ids past the table use the [UNK] vector.
    pub fn vector(&self, id: u32) -> &[f64] {
        self.vectors
            .get(id as usize)
            .unwrap_or(&self.vectors[UNK_ID as usize])
    }

    /// Text format: a first line holding the dimension, then
    /// `token v1 .. vd` per line. Vocabulary tokens absent from the file
    /// receive the [UNK] line's vector (or a seeded random one if there is
    /// no [UNK] line).
    pub fn load(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Self, MetricError> {
        let bad = |reason: String| MetricError::BadEmbeddingFile {
            path: path.to_owned(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|source| MetricError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let dim: usize = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .trim()
            .parse()
            .map_err(|_| bad("first line must be the dimension".into()))?;
        if dim == 0 {
            return Err(bad("dimension must be positive".into()));
        }
        let mut found: HashMap<String, Vec<f64>> = HashMap::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_string();
            let vals: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| bad(format!("line {}: non-numeric value", i + 2)))?;
            if vals.len() != dim || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("line {}: expected {dim} finite values", i + 2)));
            }
            found.insert(token, vals);
        }
        let fallback = Self::random(vocab.len(), dim, seed);
        let unk = found
            .get(vocab.token(UNK_ID))
            .cloned()
            .unwrap_or_else(|| fallback.vectors[UNK_ID as usize].clone());
        let vectors = vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(id, t)| match found.get(t) {
                Some(v) => v.clone(),
                None if id == UNK_ID as usize => unk.clone(),
                None if Vocabulary::is_reserved(id as u32) => fallback.vectors[id].clone(),
                None => unk.clone(),
            })
            .collect();
        Ok(EmbeddingTable { dim, vectors })
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), MetricError> {
        let io = |source| MetricError::Io {
            path: path.to_owned(),
            source,
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        writeln!(f, "{}", self.dim).map_err(io)?;
        for (t, v) in vocab.tokens().iter().zip(&self.vectors) {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(f, "{t} {}", vals.join(" ")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn check_norms(seq: &TokenSeq, emb: &EmbeddingTable) -> Result<(), MetricError> {
    for &id in seq.ids() {
        if emb.vector(id).iter().all(|&x| x == 0.0) {
            return Err(MetricError::ZeroNorm(id));
        }
    }
    Ok(())
}

/// Greedy soft matching: recall averages, over reference tokens, the best
/// cosine similarity to any candidate token; precision swaps the roles.
pub fn soft_overlap(reference: &TokenSeq, candidate: &TokenSeq, emb: &EmbeddingTable) -> Result<Prf, MetricError> {
    check_norms(reference, emb)?;
    check_norms(candidate, emb)?;
    if reference.is_empty() || candidate.is_empty() {
        return Ok(Prf::ZERO);
    }
    let sims: Vec<Vec<f64>> = reference
        .ids()
        .iter()
        .map(|&r| {
            candidate
                .ids()
                .iter()
                .map(|&c| cosine(emb.vector(r), emb.vector(c)))
                .collect()
        })
        .collect();
    let recall = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    let precision = (0..candidate.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / candidate.len() as f64;
    Ok(Prf::new(precision, recall))
}
