//! Synthetic pair generation: mask-filling, round-trip translation, and word
//! dropping applied to corpus segments.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, derive_seed};
use crate::textcore::{tokenize, TokenSeq, Vocabulary, CLS_ID, MASK_ID, PAD_ID, SEP_ID};

pub const MAX_MASKS: usize = 15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("language model has no fillable tokens")]
    EmptyLmVocabulary,
    #[error("beam width must be >= 1")]
    BadBeamWidth,
    #[error("mask position {0} out of bounds")]
    BadPlan(usize),
    #[error("translator failed: {message}\n--- transcript ---\n{transcript}")]
    Translator { message: String, transcript: String },
    #[error("cannot parse origin {0:?}")]
    BadOrigin(String),
}

/// Scores next tokens given the previous one. Sentence start is
/// conditioned on [CLS] and sentence end is the outcome [SEP].
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn log_prob(&self, prev: u32, next: u32) -> f64;

    /// Log-probabilities of every id after `prev`.
    fn log_probs_after(&self, prev: u32) -> Vec<f64> {
        (0..self.vocab_size() as u32).map(|n| self.log_prob(prev, n)).collect()
    }

    /// Ids that may fill a mask: every non-reserved id.
    fn fill_candidates(&self) -> Vec<u32> {
        (0..self.vocab_size() as u32).filter(|&i| !Vocabulary::is_reserved(i)).collect()
    }
}

fn is_outcome(id: u32) -> bool {
    !matches!(id, PAD_ID | CLS_ID | MASK_ID)
}

fn outcome_count(vocab_size: usize) -> usize {
    (0..vocab_size as u32).filter(|&i| is_outcome(i)).count()
}

fn sentence_ids(seq: &[u32]) -> impl Iterator<Item = u32> + '_ {
    std::iter::once(CLS_ID).chain(seq.iter().copied()).chain(std::iter::once(SEP_ID))
}

/// Add-k smoothed unigram model over ids (including the end marker).
#[derive(Debug, Clone)]
pub struct UnigramLm {
    counts: Vec<f64>,
    total: f64,
    k: f64,
}

impl UnigramLm {
    pub fn train(corpus: &[TokenSeq], vocab_size: usize, k: f64) -> Self {
        let mut counts = vec![0.0; vocab_size];
        for seq in corpus {
            for id in sentence_ids(seq.ids()).skip(1) {
                counts[id as usize] += 1.0;
            }
        }
        Self::from_counts(counts, k)
    }

    pub fn from_counts(counts: Vec<f64>, k: f64) -> Self {
        let total = counts
            .iter()
            .enumerate()
            .filter(|(i, _)| is_outcome(*i as u32))
            .map(|(_, c)| c)
            .sum();
        UnigramLm { counts, total, k }
    }

    pub fn prob(&self, id: u32) -> f64 {
        if !is_outcome(id) || id as usize >= self.counts.len() {
            return 0.0;
        }
        let o = outcome_count(self.counts.len()) as f64;
        (self.counts[id as usize] + self.k) / (self.total + self.k * o)
    }
}

impl LanguageModel for UnigramLm {
    fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    fn log_prob(&self, _prev: u32, next: u32) -> f64 {
        self.prob(next).ln()
    }
}

/// Bigram model with add-k smoothing, linearly interpolated with the
/// unigram model.
#[derive(Debug, Clone)]
pub struct BigramLm {
    unigram: UnigramLm,
    rows: HashMap<u32, HashMap<u32, f64>>,
    row_totals: HashMap<u32, f64>,
    k: f64,
    lambda: f64,
}

impl BigramLm {
    pub fn train(corpus: &[TokenSeq], vocab_size: usize, k: f64, lambda: f64) -> Self {
        let mut rows: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
        let mut row_totals: HashMap<u32, f64> = HashMap::new();
        for seq in corpus {
            let ids: Vec<u32> = sentence_ids(seq.ids()).collect();
            for w in ids.windows(2) {
                *rows.entry(w[0]).or_default().entry(w[1]).or_default() += 1.0;
                *row_totals.entry(w[0]).or_default() += 1.0;
            }
        }
        BigramLm {
            unigram: UnigramLm::train(corpus, vocab_size, k),
            rows,
            row_totals,
            k,
            lambda,
        }
    }

    fn outcomes(&self) -> f64 {
        outcome_count(self.unigram.counts.len()) as f64
    }
}

impl LanguageModel for BigramLm {
    fn vocab_size(&self) -> usize {
        self.unigram.counts.len()
    }

    fn log_prob(&self, prev: u32, next: u32) -> f64 {
        if !is_outcome(next) {
            return f64::NEG_INFINITY;
        }
        let c = self.rows.get(&prev).and_then(|r| r.get(&next)).copied().unwrap_or(0.0);
        let total = self.row_totals.get(&prev).copied().unwrap_or(0.0);
        let bigram = (c + self.k) / (total + self.k * self.outcomes());
        (self.lambda * bigram + (1.0 - self.lambda) * self.unigram.prob(next)).ln()
    }

    fn log_probs_after(&self, prev: u32) -> Vec<f64> {
        let total = self.row_totals.get(&prev).copied().unwrap_or(0.0);
        let denom = total + self.k * self.outcomes();
        let row = self.rows.get(&prev);
        (0..self.vocab_size() as u32)
            .map(|next| {
                if !is_outcome(next) {
                    return f64::NEG_INFINITY;
                }
                let c = row.and_then(|r| r.get(&next)).copied().unwrap_or(0.0);
                (self.lambda * (c + self.k) / denom + (1.0 - self.lambda) * self.unigram.prob(next)).ln()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Scatter,
    Contiguous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    positions: Vec<usize>,
    strategy: MaskStrategy,
}

impl MaskPlan {
    /// Explicit plan; positions are sorted and deduplicated.
    pub fn new(mut positions: Vec<usize>, strategy: MaskStrategy) -> Self {
        positions.sort_unstable();
        positions.dedup();
        MaskPlan { positions, strategy }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }
}

pub fn plan_masks(z: &TokenSeq, strategy: MaskStrategy, seed: u64) -> MaskPlan {
    let n = z.len();
    if n == 0 {
        return MaskPlan::new(Vec::new(), strategy);
    }
    let mut r = rng::derived_rng(seed, "plan_masks", 0);
    let cap = n.min(MAX_MASKS);
    let positions = match strategy {
        MaskStrategy::Scatter => {
            let count = r.random_range(1..=cap);
            sample(&mut r, n, count).into_vec()
        }
        MaskStrategy::Contiguous => {
            let start = r.random_range(0..n);
            let len = r.random_range(1..=MAX_MASKS.min(n - start));
            (start..start + len).collect()
        }
    };
    MaskPlan::new(positions, strategy)
}

struct Hypothesis {
    fills: Vec<u32>,
    score: f64,
}

/// Fills masked positions left to right with beam search.
///
/// A hypothesis scores the log-probabilities of its filled tokens plus, when
/// a fill is followed by an unmasked token (or the sentence end), that
/// transition. Equal scores are ordered by the fill ids, smallest first.
pub fn fill_masks(
    z: &TokenSeq,
    plan: &MaskPlan,
    lm: &dyn LanguageModel,
    vocab: &Vocabulary,
    beam_width: usize,
) -> Result<TokenSeq, SynthError> {
    if beam_width == 0 {
        return Err(SynthError::BadBeamWidth);
    }
    let candidates = lm.fill_candidates();
    if candidates.is_empty() {
        return Err(SynthError::EmptyLmVocabulary);
    }
    let positions = plan.positions();
    if let Some(&p) = positions.iter().find(|&&p| p >= z.len()) {
        return Err(SynthError::BadPlan(p));
    }
    if positions.is_empty() {
        return Ok(z.clone());
    }
    let base = z.ids();
    let masked: Vec<bool> = {
        let mut m = vec![false; base.len()];
        positions.iter().for_each(|&p| m[p] = true);
        m
    };

    let mut beam = vec![Hypothesis {
        fills: Vec::new(),
        score: 0.0,
    }];
    for (step, &pos) in positions.iter().enumerate() {
        let right = match pos + 1 {
            next if next == base.len() => Some(SEP_ID),
            next if !masked[next] => Some(base[next]),
            _ => None,
        };
        let mut expanded: Vec<(f64, usize, u32)> = Vec::with_capacity(beam.len() * candidates.len());
        for (h, hyp) in beam.iter().enumerate() {
            let prev = if pos == 0 {
                CLS_ID
            } else if masked[pos - 1] {
                hyp.fills[step - 1]
            } else {
                base[pos - 1]
            };
            let row = lm.log_probs_after(prev);
            for &c in &candidates {
                let mut s = hyp.score + row[c as usize];
                if let Some(r) = right {
                    s += lm.log_prob(c, r);
                }
                expanded.push((s, h, c));
            }
        }
        let order = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.total_cmp(&a.0)
                .then_with(|| beam[a.1].fills.cmp(&beam[b.1].fills))
                .then_with(|| a.2.cmp(&b.2))
        };
        let keep = beam_width.min(expanded.len());
        if keep < expanded.len() {
            expanded.select_nth_unstable_by(keep - 1, order);
            expanded.truncate(keep);
        }
        expanded.sort_by(order);
        beam = expanded
            .into_iter()
            .map(|(score, h, c)| {
                let mut fills = beam[h].fills.clone();
                fills.push(c);
                Hypothesis { fills, score }
            })
            .collect();
    }
    let best = &beam[0];
    let mut ids = base.to_vec();
    for (&p, &c) in positions.iter().zip(&best.fills) {
        ids[p] = c;
    }
    // unmasked tokens keep their original spelling, including unknown words
    let tokens = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| if masked[i] { vocab.token(id).to_string() } else { z.tokens()[i].clone() })
        .collect();
    Ok(TokenSeq::from_parts(tokens, ids))
}

/// Round-trip translation plug point: returns the back-translated text.
pub trait Translator: Sync {
    fn round_trip(&self, z: &TokenSeq) -> Result<String, SynthError>;

    fn name(&self) -> &str;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn round_trip(&self, z: &TokenSeq) -> Result<String, SynthError> {
        Ok(z.text())
    }

    fn name(&self) -> &str {
        "identity-stub"
    }
}

const BUILTIN_SYNONYMS: &[(&str, &str)] = &[
    ("car", "automobile"),
    ("big", "large"),
    ("small", "little"),
    ("quick", "fast"),
    ("begin", "start"),
    ("buy", "purchase"),
    ("help", "assist"),
    ("show", "display"),
    ("city", "town"),
    ("house", "home"),
    ("road", "street"),
    ("child", "kid"),
    ("children", "kids"),
    ("man", "person"),
    ("woman", "lady"),
    ("said", "stated"),
    ("says", "states"),
    ("often", "frequently"),
    ("maybe", "perhaps"),
    ("near", "close"),
    ("famous", "well-known"),
    ("old", "ancient"),
    ("new", "recent"),
    ("happy", "glad"),
    ("sad", "unhappy"),
    ("river", "stream"),
    ("hill", "mound"),
    ("film", "movie"),
    ("song", "tune"),
    ("book", "novel"),
    ("job", "work"),
    ("began", "started"),
    ("built", "constructed"),
    ("large", "huge"),
    ("area", "region"),
    ("people", "persons"),
    ("team", "squad"),
    ("won", "secured"),
    ("known", "recognized"),
    ("important", "significant"),
    ("around", "about"),
    ("main", "principal"),
    ("used", "employed"),
    ("several", "various"),
    ("among", "amid"),
    ("went", "travelled"),
    ("got", "received"),
    ("shop", "store"),
    ("fast", "rapid"),
    ("smart", "clever"),
];

/// Offline stand-in for a translation round trip: seeded synonym
/// substitution followed by random adjacent swaps. Deterministic per input.
#[derive(Debug, Clone)]
pub struct SynonymStub {
    table: HashMap<String, Vec<String>>,
    substitute_prob: f64,
    swap_prob: f64,
    seed: u64,
}

impl SynonymStub {
    pub fn new(pairs: &[(&str, &str)], substitute_prob: f64, swap_prob: f64, seed: u64) -> Self {
        let mut table: HashMap<String, Vec<String>> = HashMap::new();
        for &(a, b) in pairs {
            table.entry(a.to_string()).or_default().push(b.to_string());
        }
        for alts in table.values_mut() {
            alts.sort();
            alts.dedup();
        }
        SynonymStub {
            table,
            substitute_prob,
            swap_prob,
            seed,
        }
    }

    /// Built-in English table (both directions), substitution 0.7, swaps 0.15.
    pub fn builtin(seed: u64) -> Self {
        let both: Vec<(&str, &str)> = BUILTIN_SYNONYMS.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        Self::new(&both, 0.7, 0.15, seed)
    }
}

impl Translator for SynonymStub {
    fn round_trip(&self, z: &TokenSeq) -> Result<String, SynthError> {
        let text = z.text();
        let mut r = rng::derived_rng(self.seed, &text, 0);
        let mut out: Vec<String> = z
            .tokens()
            .iter()
            .map(|t| match self.table.get(t) {
                Some(alts) if r.random_bool(self.substitute_prob.clamp(0.0, 1.0)) => {
                    alts[r.random_range(0..alts.len())].clone()
                }
                _ => t.clone(),
            })
            .collect();
        let mut i = 0;
        while i + 1 < out.len() {
            if r.random_bool(self.swap_prob.clamp(0.0, 1.0)) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        Ok(out.join(" "))
    }

    fn name(&self) -> &str {
        "synonym-shuffle-stub"
    }
}

pub fn backtranslate(z: &TokenSeq, translator: &dyn Translator, vocab: &Vocabulary) -> Result<TokenSeq, SynthError> {
    Ok(tokenize(&translator.round_trip(z)?, vocab))
}

/// Removes `k ~ Uniform{0..=len}` tokens chosen uniformly; survivors keep
/// their order.
pub fn drop_words(z_tilde: &TokenSeq, seed: u64) -> TokenSeq {
    let n = z_tilde.len();
    let mut r = rng::derived_rng(seed, "drop_words", 0);
    let k = r.random_range(0..=n);
    let mut dropped = vec![false; n];
    for i in sample(&mut r, n, k) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    z_tilde.select(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseOrigin {
    MaskFillScatter,
    MaskFillContiguous,
    Backtranslation,
}

impl BaseOrigin {
    fn as_str(self) -> &'static str {
        match self {
            BaseOrigin::MaskFillScatter => "mask_fill_scatter",
            BaseOrigin::MaskFillContiguous => "mask_fill_contiguous",
            BaseOrigin::Backtranslation => "backtranslation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mask_fill_scatter" => BaseOrigin::MaskFillScatter,
            "mask_fill_contiguous" => BaseOrigin::MaskFillContiguous,
            "backtranslation" => BaseOrigin::Backtranslation,
            _ => return None,
        })
    }
}

/// How a synthetic candidate was produced. Word dropping always wraps one
/// of the base perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Base(BaseOrigin),
    WordDrop(BaseOrigin),
}

impl Origin {
    pub fn base(self) -> BaseOrigin {
        match self {
            Origin::Base(b) | Origin::WordDrop(b) => b,
        }
    }

    pub fn is_word_drop(self) -> bool {
        matches!(self, Origin::WordDrop(_))
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Base(b) => f.write_str(b.as_str()),
            Origin::WordDrop(b) => write!(f, "word_drop({})", b.as_str()),
        }
    }
}

impl FromStr for Origin {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SynthError::BadOrigin(s.to_string());
        if let Some(inner) = s.strip_prefix("word_drop(").and_then(|r| r.strip_suffix(')')) {
            return BaseOrigin::parse(inner).map(Origin::WordDrop).ok_or_else(bad);
        }
        BaseOrigin::parse(s).map(Origin::Base).ok_or_else(bad)
    }
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    pub z: TokenSeq,
    pub z_tilde: TokenSeq,
    pub origin: Origin,
    pub seed: u64,
}

/// On-disk form of a [`SyntheticExample`]; ids are recomputed from the
/// vocabulary on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecord {
    pub z: Vec<String>,
    pub z_tilde: Vec<String>,
    pub origin: Origin,
    pub seed: u64,
}

impl SyntheticExample {
    pub fn to_record(&self) -> SyntheticRecord {
        SyntheticRecord {
            z: self.z.tokens().to_vec(),
            z_tilde: self.z_tilde.tokens().to_vec(),
            origin: self.origin,
            seed: self.seed,
        }
    }

    pub fn from_record(rec: SyntheticRecord, vocab: &Vocabulary) -> Self {
        SyntheticExample {
            z: TokenSeq::from_tokens(rec.z, vocab),
            z_tilde: TokenSeq::from_tokens(rec.z_tilde, vocab),
            origin: rec.origin,
            seed: rec.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Base perturbations emitted per segment.
    pub variants_per_segment: usize,
    /// Relative weights of scatter mask-fill, contiguous mask-fill, and
    /// backtranslation when choosing each variant's perturbation.
    pub origin_weights: [f64; 3],
    /// Probability that an emitted example also gets a word-dropped twin.
    pub drop_rate: f64,
    pub beam_width: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            variants_per_segment: 4,
            origin_weights: [1.0, 1.0, 1.0],
            drop_rate: 0.3,
            beam_width: 8,
        }
    }
}

pub struct Generator<'a> {
    pub vocab: &'a Vocabulary,
    pub lm: &'a dyn LanguageModel,
    pub translator: &'a dyn Translator,
    pub config: GenerationConfig,
}

impl Generator<'_> {
    fn pick_origin(&self, u: f64) -> BaseOrigin {
        let w = self.config.origin_weights.map(|x| x.max(0.0));
        let total: f64 = w.iter().sum();
        let origins = [
            BaseOrigin::MaskFillScatter,
            BaseOrigin::MaskFillContiguous,
            BaseOrigin::Backtranslation,
        ];
        if total <= 0.0 {
            return origins[0];
        }
        let mut acc = 0.0;
        for (o, wi) in origins.iter().zip(w) {
            acc += wi / total;
            if u < acc {
                return *o;
            }
        }
        origins[w.iter().rposition(|&x| x > 0.0).unwrap_or(0)]
    }

    fn perturb(&self, z: &TokenSeq, origin: BaseOrigin, seed: u64) -> Result<TokenSeq, SynthError> {
        match origin {
            BaseOrigin::MaskFillScatter | BaseOrigin::MaskFillContiguous => {
                let strategy = if origin == BaseOrigin::MaskFillScatter {
                    MaskStrategy::Scatter
                } else {
                    MaskStrategy::Contiguous
                };
                let plan = plan_masks(z, strategy, seed);
                fill_masks(z, &plan, self.lm, self.vocab, self.config.beam_width)
            }
            BaseOrigin::Backtranslation => backtranslate(z, self.translator, self.vocab),
        }
    }

    fn segment(&self, index: usize, z: &TokenSeq, master: u64) -> Result<Vec<SyntheticExample>, SynthError> {
        let mut out = Vec::new();
        if z.is_empty() {
            return Ok(out);
        }
        let seg_seed = derive_seed(master, "segment", index as u64);
        for v in 0..self.config.variants_per_segment {
            let seed = derive_seed(seg_seed, "variant", v as u64);
            let mut r = rng::rng_from_seed(seed);
            let origin = self.pick_origin(r.random::<f64>());
            let z_tilde = self.perturb(z, origin, seed)?;
            let with_drop = r.random_bool(self.config.drop_rate.clamp(0.0, 1.0));
            out.push(SyntheticExample {
                z: z.clone(),
                z_tilde,
                origin: Origin::Base(origin),
                seed,
            });
            if with_drop {
                let drop_seed = derive_seed(seed, "word_drop", 0);
                let parent = &out.last().expect("just pushed").z_tilde;
                let dropped = drop_words(parent, drop_seed);
                out.push(SyntheticExample {
                    z: z.clone(),
                    z_tilde: dropped,
                    origin: Origin::WordDrop(origin),
                    seed: drop_seed,
                });
            }
        }
        Ok(out)
    }

    /// Emits each segment's variants, each followed by its word-dropped
    /// twin when one is drawn. Output order follows input order and is
    /// independent of the thread count.
    pub fn generate_corpus(&self, segments: &[TokenSeq], seed: u64) -> Result<Vec<SyntheticExample>, SynthError> {
        let per_segment: Result<Vec<_>, _> = segments
            .par_iter()
            .enumerate()
            .map(|(i, z)| self.segment(i, z, seed))
            .collect();
        Ok(per_segment?.into_iter().flatten().collect())
    }
}

/// Bigram model with the default smoothing used for mask filling.
pub fn default_fill_lm(corpus: &[TokenSeq], vocab_size: usize) -> BigramLm {
    BigramLm::train(corpus, vocab_size, 0.1, 0.7)
}
