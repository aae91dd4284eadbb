//! Pre-training targets for synthetic pairs.
//!
//! Nine tasks: sentence BLEU, ROUGE (P/R/F), soft overlap (P/R/F), four
//! round-trip translation likelihoods, three-way entailment probabilities,
//! and a flag telling whether the candidate came from backtranslation. The
//! eleven regression values are standardized over the corpus before
//! training; the two classification blocks are left as they are.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::external::{ExternalScorer, ScorerError};
use crate::lexmetrics::{rouge_n, sentence_bleu, soft_overlap, EmbeddingTable, MetricError};
use crate::rng::derive_seed;
use crate::synthgen::{BaseOrigin, SyntheticExample, SyntheticRecord};
use crate::textcore::{TokenSeq, Vocabulary};

pub const SIGNALS_SCHEMA: &str = "synthmetric-signals/1";

pub const REGRESSION_DIMS: [&str; 11] = [
    "bleu",
    "rouge_p",
    "rouge_r",
    "rouge_f",
    "bertscore_p",
    "bertscore_r",
    "bertscore_f",
    "en_fr_z_given_zt",
    "en_fr_zt_given_z",
    "en_de_z_given_zt",
    "en_de_zt_given_z",
];

pub const TASK_NAMES: [&str; 9] = [
    "bleu",
    "rouge",
    "bertscore",
    "en_fr_z_given_zt",
    "en_fr_zt_given_z",
    "en_de_z_given_zt",
    "en_de_zt_given_z",
    "entail",
    "backtran_flag",
];

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("candidate is empty; the likelihood is normalized by its length")]
    EmptyTarget,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid class probabilities {0:?}")]
    BadProbabilities(Vec<f64>),
    #[error("regression dimension `{0}` has zero variance")]
    ZeroVariance(&'static str),
    #[error("normalization needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("task `{task}`: {source}")]
    InTask {
        task: &'static str,
        #[source]
        source: Box<SignalError>,
    },
    #[error("invalid task set: {0}")]
    BadTaskSet(String),
    #[error("signals file: {0}")]
    Format(String),
    #[error("artifact schema mismatch: file has {found}, expected {expected}")]
    Schema { found: String, expected: String },
}

fn in_task(task: &'static str) -> impl Fn(SignalError) -> SignalError {
    move |e| SignalError::InTask {
        task,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Regression { dim: usize },
    Classification { classes: usize },
}

impl TaskKind {
    pub fn width(self) -> usize {
        match self {
            TaskKind::Regression { dim } => dim,
            TaskKind::Classification { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub weight: f64,
}

/// Ordered task declarations with unique names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, SignalError> {
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.name.as_str()) {
                return Err(SignalError::BadTaskSet(format!("duplicate task `{}`", t.name)));
            }
            if t.kind.width() == 0 {
                return Err(SignalError::BadTaskSet(format!("task `{}` has zero width", t.name)));
            }
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(SignalError::BadTaskSet(format!("task `{}` has weight {}", t.name, t.weight)));
            }
        }
        Ok(TaskSet { tasks })
    }

    /// The nine signal tasks with unit weights.
    pub fn standard() -> Self {
        let tasks = TASK_NAMES
            .iter()
            .map(|&name| TaskSpec {
                name: name.to_string(),
                kind: match name {
                    "rouge" | "bertscore" => TaskKind::Regression { dim: 3 },
                    "entail" => TaskKind::Classification { classes: 3 },
                    "backtran_flag" => TaskKind::Classification { classes: 2 },
                    _ => TaskKind::Regression { dim: 1 },
                },
                weight: 1.0,
            })
            .collect();
        TaskSet { tasks }
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.name.as_str())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.weight).collect()
    }

    /// Same tasks with new weights, in task order.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self, SignalError> {
        if weights.len() != self.tasks.len() {
            return Err(SignalError::BadTaskSet(format!(
                "{} weights for {} tasks",
                weights.len(),
                self.tasks.len()
            )));
        }
        let tasks = self
            .tasks
            .iter()
            .zip(weights)
            .map(|(t, &w)| TaskSpec { weight: w, ..t.clone() })
            .collect();
        TaskSet::new(tasks)
    }

    /// Targets for every task, taken from `signals` by task name.
    pub fn targets(&self, signals: &SignalVector) -> Result<Vec<Vec<f64>>, SignalError> {
        self.tasks
            .iter()
            .map(|t| {
                let block = signals
                    .block(&t.name)
                    .ok_or_else(|| SignalError::BadTaskSet(format!("no signal named `{}`", t.name)))?;
                if block.len() != t.kind.width() {
                    return Err(SignalError::BadTaskSet(format!(
                        "task `{}` expects width {}, signal has {}",
                        t.name,
                        t.kind.width(),
                        block.len()
                    )));
                }
                Ok(block)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalVector {
    pub bleu: f64,
    pub rouge: [f64; 3],
    pub bertscore: [f64; 3],
    /// en-fr z|z~, en-fr z~|z, en-de z|z~, en-de z~|z
    pub likelihood: [f64; 4],
    /// Entail, Contradict, Neutral
    pub entail: [f64; 3],
    /// (1, 0) for backtranslation, (0, 1) for mask-filling
    pub backtran_flag: [f64; 2],
}

impl SignalVector {
    pub fn regression(&self) -> [f64; 11] {
        let mut out = [0.0; 11];
        out[0] = self.bleu;
        out[1..4].copy_from_slice(&self.rouge);
        out[4..7].copy_from_slice(&self.bertscore);
        out[7..11].copy_from_slice(&self.likelihood);
        out
    }

    pub fn set_regression(&mut self, r: [f64; 11]) {
        self.bleu = r[0];
        self.rouge.copy_from_slice(&r[1..4]);
        self.bertscore.copy_from_slice(&r[4..7]);
        self.likelihood.copy_from_slice(&r[7..11]);
    }

    /// Values of the named task block.
    pub fn block(&self, task: &str) -> Option<Vec<f64>> {
        Some(match task {
            "bleu" => vec![self.bleu],
            "rouge" => self.rouge.to_vec(),
            "bertscore" => self.bertscore.to_vec(),
            "en_fr_z_given_zt" => vec![self.likelihood[0]],
            "en_fr_zt_given_z" => vec![self.likelihood[1]],
            "en_de_z_given_zt" => vec![self.likelihood[2]],
            "en_de_zt_given_z" => vec![self.likelihood[3]],
            "entail" => self.entail.to_vec(),
            "backtran_flag" => self.backtran_flag.to_vec(),
            _ => return None,
        })
    }

    pub fn check(&self) -> Result<(), SignalError> {
        let sum: f64 = self.entail.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.entail.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SignalError::BadProbabilities(self.entail.to_vec()));
        }
        if self.backtran_flag != [1.0, 0.0] && self.backtran_flag != [0.0, 1.0] {
            return Err(SignalError::BadProbabilities(self.backtran_flag.to_vec()));
        }
        if self.regression().iter().any(|x| !x.is_finite()) {
            return Err(SignalError::Format("non-finite regression value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "en-fr")]
    EnFr,
    #[serde(rename = "en-de")]
    EnDe,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::EnFr => "en-fr",
            Direction::EnDe => "en-de",
        }
    }
}

/// Supplies `log P_{pivot->en}(target | pivot*)`, where `pivot*` is the
/// scorer's best translation of `source` into the pivot language.
pub trait LikelihoodScorer: Sync {
    fn log_prob(&self, direction: Direction, target: &TokenSeq, source: &TokenSeq) -> Result<f64, SignalError>;

    fn name(&self) -> &str;
}

/// Length-normalized round-trip log-likelihood of `z_tilde` given `z`.
pub fn backtrans_likelihood(
    z_tilde: &TokenSeq,
    z: &TokenSeq,
    scorer: &dyn LikelihoodScorer,
    direction: Direction,
) -> Result<f64, SignalError> {
    if z_tilde.is_empty() {
        return Err(SignalError::EmptyTarget);
    }
    Ok(scorer.log_prob(direction, z_tilde, z)? / z_tilde.len() as f64)
}

/// Like [`backtrans_likelihood`], but an empty target is scored by the
/// scorer and divided by one.
fn likelihood_or_void(z_tilde: &TokenSeq, z: &TokenSeq, scorer: &dyn LikelihoodScorer, d: Direction) -> Result<f64, SignalError> {
    if z_tilde.is_empty() {
        return scorer.log_prob(d, z_tilde, z);
    }
    backtrans_likelihood(z_tilde, z, scorer, d)
}

/// Offline likelihood stub: a mixture of a copy model (tokens drawn from
/// the source) and an add-k unigram model over the corpus. The smoothing
/// constant is jittered per direction so en-fr and en-de differ. With
/// `copy_weight = 0` it is a plain unigram model. An empty target scores as
/// one unseen token.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    counts: Vec<f64>,
    total: f64,
    k: [f64; 2],
    copy_weight: f64,
}

impl UnigramScorer {
    pub fn train(corpus: &[TokenSeq], vocab_size: usize, k: f64, copy_weight: f64, seed: u64) -> Self {
        let mut counts = vec![0.0; vocab_size];
        for seq in corpus {
            for &id in seq.ids() {
                counts[id as usize] += 1.0;
            }
        }
        let total = counts.iter().sum();
        let jitter = |d: &str| {
            let u = (derive_seed(seed, d, 0) >> 11) as f64 / (1u64 << 53) as f64;
            k * (0.5 + u)
        };
        UnigramScorer {
            counts,
            total,
            k: [jitter("en-fr"), jitter("en-de")],
            copy_weight: copy_weight.clamp(0.0, 1.0),
        }
    }

    fn k_for(&self, d: Direction) -> f64 {
        self.k[d as usize]
    }

    /// Unigram probability of `id` in direction `d`.
    pub fn unigram(&self, d: Direction, id: u32) -> f64 {
        let k = self.k_for(d);
        let c = self.counts.get(id as usize).copied().unwrap_or(0.0);
        (c + k) / (self.total + k * self.counts.len() as f64)
    }
}

impl LikelihoodScorer for UnigramScorer {
    fn log_prob(&self, direction: Direction, target: &TokenSeq, source: &TokenSeq) -> Result<f64, SignalError> {
        if target.is_empty() {
            let k = self.k_for(direction);
            return Ok((k / (self.total + k * self.counts.len() as f64)).ln());
        }
        let mut src: HashMap<u32, f64> = HashMap::new();
        for &id in source.ids() {
            *src.entry(id).or_default() += 1.0;
        }
        let n_src = source.len().max(1) as f64;
        Ok(target
            .ids()
            .iter()
            .map(|&id| {
                let copy = src.get(&id).copied().unwrap_or(0.0) / n_src;
                (self.copy_weight * copy + (1.0 - self.copy_weight) * self.unigram(direction, id)).ln()
            })
            .sum())
    }

    fn name(&self) -> &str {
        "unigram-copy-stub"
    }
}

impl LikelihoodScorer for ExternalScorer {
    fn log_prob(&self, direction: Direction, target: &TokenSeq, source: &TokenSeq) -> Result<f64, SignalError> {
        Ok(self.request_reals("likelihood", direction.as_str(), &source.text(), &target.text(), 1)?[0])
    }

    fn name(&self) -> &str {
        self.command()
    }
}

/// Three-way (Entail, Contradict, Neutral) classifier plug point.
pub trait EntailmentProvider: Sync {
    fn probs(&self, z: &TokenSeq, z_tilde: &TokenSeq) -> Result<[f64; 3], SignalError>;

    fn name(&self) -> &str;
}

/// Validates provider output: no negative entries; sums within 1e-6 of one
/// are renormalized, anything further off is rejected.
pub fn entailment_probs(z: &TokenSeq, z_tilde: &TokenSeq, provider: &dyn EntailmentProvider) -> Result<[f64; 3], SignalError> {
    let p = provider.probs(z, z_tilde)?;
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(SignalError::BadProbabilities(p.to_vec()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SignalError::BadProbabilities(p.to_vec()));
    }
    if sum == 1.0 {
        Ok(p)
    } else {
        Ok(p.map(|x| x / sum))
    }
}

const ANTONYMS: &[(&str, &str)] = &[
    ("good", "bad"),
    ("big", "small"),
    ("large", "small"),
    ("high", "low"),
    ("hot", "cold"),
    ("old", "new"),
    ("old", "young"),
    ("early", "late"),
    ("first", "last"),
    ("open", "closed"),
    ("win", "lose"),
    ("won", "lost"),
    ("up", "down"),
    ("in", "out"),
    ("before", "after"),
    ("north", "south"),
    ("east", "west"),
    ("left", "right"),
    ("true", "false"),
    ("always", "never"),
    ("increase", "decrease"),
    ("increased", "decreased"),
    ("rich", "poor"),
    ("happy", "sad"),
    ("fast", "slow"),
    ("long", "short"),
    ("more", "less"),
    ("most", "least"),
    ("male", "female"),
    ("man", "woman"),
    ("major", "minor"),
    ("start", "end"),
    ("began", "ended"),
    ("alive", "dead"),
    ("accept", "reject"),
    ("above", "below"),
    ("inside", "outside"),
    ("public", "private"),
    ("strong", "weak"),
    ("light", "dark"),
];

const NEGATIONS: &[&str] = &["not", "no", "never", "nor", "none", "nothing", "without"];

/// Lexical stand-in for an entailment classifier. Entail grows with how
/// much of the candidate is contained in the premise; Contradict with
/// antonym hits and negation mismatches; Neutral takes the remainder.
#[derive(Debug, Clone)]
pub struct BaselineEntailment {
    antonyms: HashMap<String, HashSet<String>>,
}

impl Default for BaselineEntailment {
    fn default() -> Self {
        let mut antonyms: HashMap<String, HashSet<String>> = HashMap::new();
        for &(a, b) in ANTONYMS {
            antonyms.entry(a.into()).or_default().insert(b.into());
            antonyms.entry(b.into()).or_default().insert(a.into());
        }
        BaselineEntailment { antonyms }
    }
}

impl EntailmentProvider for BaselineEntailment {
    fn probs(&self, z: &TokenSeq, z_tilde: &TokenSeq) -> Result<[f64; 3], SignalError> {
        let mut premise: HashMap<&str, usize> = HashMap::new();
        for t in z.tokens() {
            *premise.entry(t).or_default() += 1;
        }
        let premise_set: HashSet<&str> = z.tokens().iter().map(String::as_str).collect();
        let mut contained = 0usize;
        let mut hits = 0usize;
        let mut remaining = premise.clone();
        for t in z_tilde.tokens() {
            if let Some(c) = remaining.get_mut(t.as_str()).filter(|c| **c > 0) {
                *c -= 1;
                contained += 1;
            } else if self
                .antonyms
                .get(t)
                .is_some_and(|opp| opp.iter().any(|o| premise_set.contains(o.as_str())))
            {
                hits += 1;
            }
        }
        let negations = |s: &TokenSeq| s.tokens().iter().filter(|t| NEGATIONS.contains(&t.as_str())).count();
        if negations(z) % 2 != negations(z_tilde) % 2 {
            hits += 1;
        }
        let containment = if z_tilde.is_empty() {
            0.0
        } else {
            contained as f64 / z_tilde.len() as f64
        };
        let contradict = (0.5 * hits as f64).min(1.0);
        let entail = containment * (1.0 - contradict);
        let neutral = (1.0 - entail - contradict).max(0.0);
        let sum = entail + contradict + neutral;
        Ok([entail / sum, contradict / sum, neutral / sum])
    }

    fn name(&self) -> &str {
        "lexical-baseline"
    }
}

impl EntailmentProvider for ExternalScorer {
    fn probs(&self, z: &TokenSeq, z_tilde: &TokenSeq) -> Result<[f64; 3], SignalError> {
        let v = self.request_reals("entail", "-", &z.text(), &z_tilde.text(), 3)?;
        Ok([v[0], v[1], v[2]])
    }

    fn name(&self) -> &str {
        self.command()
    }
}

pub struct Providers<'a> {
    pub embeddings: &'a EmbeddingTable,
    pub scorer: &'a dyn LikelihoodScorer,
    pub entailment: &'a dyn EntailmentProvider,
}

pub fn compute_signals(example: &SyntheticExample, providers: &Providers<'_>) -> Result<SignalVector, SignalError> {
    let (z, zt) = (&example.z, &example.z_tilde);
    let bleu = sentence_bleu(z, zt, 4).map_err(|e| in_task("bleu")(e.into()))?;
    let rouge = rouge_n(z, zt, 1).to_array();
    let bertscore = soft_overlap(z, zt, providers.embeddings)
        .map_err(|e| in_task("bertscore")(e.into()))?
        .to_array();
    let s = providers.scorer;
    let likelihood = [
        likelihood_or_void(z, zt, s, Direction::EnFr).map_err(in_task("en_fr_z_given_zt"))?,
        likelihood_or_void(zt, z, s, Direction::EnFr).map_err(in_task("en_fr_zt_given_z"))?,
        likelihood_or_void(z, zt, s, Direction::EnDe).map_err(in_task("en_de_z_given_zt"))?,
        likelihood_or_void(zt, z, s, Direction::EnDe).map_err(in_task("en_de_zt_given_z"))?,
    ];
    let entail = entailment_probs(z, zt, providers.entailment).map_err(in_task("entail"))?;
    let backtran_flag = if example.origin.base() == BaseOrigin::Backtranslation {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    Ok(SignalVector {
        bleu,
        rouge,
        bertscore,
        likelihood,
        entail,
        backtran_flag,
    })
}

/// Signals for a whole corpus, computed in parallel, returned in input order.
pub fn compute_corpus_signals(examples: &[SyntheticExample], providers: &Providers<'_>) -> Result<Vec<SignalVector>, SignalError> {
    examples.par_iter().map(|e| compute_signals(e, providers)).collect()
}

/// Per-dimension mean and (population) standard deviation of the
/// regression values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 11],
    pub std: [f64; 11],
}

pub fn fit_normalization(corpus: &[SignalVector]) -> Result<NormalizationStats, SignalError> {
    if corpus.len() < 2 {
        return Err(SignalError::TooFewVectors(corpus.len()));
    }
    let n = corpus.len() as f64;
    let mut mean = [0.0; 11];
    for v in corpus {
        for (m, x) in mean.iter_mut().zip(v.regression()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; 11];
    for v in corpus {
        for ((s, x), m) in std.iter_mut().zip(v.regression()).zip(mean) {
            *s += (x - m) * (x - m);
        }
    }
    for (i, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= 1e-12 * mean[i].abs().max(1.0) {
            return Err(SignalError::ZeroVariance(REGRESSION_DIMS[i]));
        }
    }
    Ok(NormalizationStats { mean, std })
}

pub fn apply_normalization(v: &SignalVector, stats: &NormalizationStats) -> SignalVector {
    let mut r = v.regression();
    for i in 0..11 {
        r[i] = (r[i] - stats.mean[i]) / stats.std[i];
    }
    let mut out = v.clone();
    out.set_regression(r);
    out
}

/// First line of a signals file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalsHeader {
    pub schema: String,
    pub tokenizer: String,
    pub bleu_smoothing: String,
    pub regression_dims: Vec<String>,
    pub normalization: NormalizationStats,
    pub providers: BTreeMap<String, String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalRecord {
    pub example: SyntheticRecord,
    pub signals: SignalVector,
}

pub fn write_signals<W: Write>(mut out: W, header: &SignalsHeader, records: &[SignalRecord]) -> std::io::Result<()> {
    let h = serde_json::to_string(header).map_err(std::io::Error::other)?;
    writeln!(out, "{h}")?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    out.flush()
}

pub fn read_signals<R: BufRead>(input: R) -> Result<(SignalsHeader, Vec<SignalRecord>), SignalError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| SignalError::Format("empty file".into()))?
        .map_err(|e| SignalError::Format(e.to_string()))?;
    let probe: serde_json::Value = serde_json::from_str(&first).map_err(|e| SignalError::Format(format!("header: {e}")))?;
    let schema = probe.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
    if schema != SIGNALS_SCHEMA {
        return Err(SignalError::Schema {
            found: schema.to_string(),
            expected: SIGNALS_SCHEMA.to_string(),
        });
    }
    let header: SignalsHeader = serde_json::from_value(probe).map_err(|e| SignalError::Format(format!("header: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| SignalError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SignalRecord =
            serde_json::from_str(&line).map_err(|e| SignalError::Format(format!("line {}: {e}", i + 2)))?;
        rec.signals.check()?;
        records.push(rec);
    }
    Ok((header, records))
}

impl SignalRecord {
    pub fn example(&self, vocab: &Vocabulary) -> SyntheticExample {
        SyntheticExample::from_record(self.example.clone(), vocab)
    }
}
