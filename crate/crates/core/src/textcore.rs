//! Tokenization, the sentence-pair data model, and ingestion of rated pairs.
//!
//! Tokens are lowercased runs of alphanumeric characters; every other
//! non-whitespace character is a token of its own. There are no subword
//! units.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Identifies the tokenizer rules; recorded in artifact headers.
pub const TOKENIZER_VERSION: &str = "lower-alnum-punct/1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file {path} is invalid: {reason}")]
    BadVocabulary { path: PathBuf, reason: String },
    #[error("need at least 2 distinct source ids to split, found {0}")]
    TooFewSources(usize),
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("cannot serialize record: {0}")]
    Unserializable(String),
}

/// Splits text into lowercased word and punctuation tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }

    /// Builds a vocabulary from `texts`, keeping tokens seen at least
    /// `min_count` times. Ordered by descending frequency, then lexically.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Reserved tokens first, then `tokens` in order (duplicates ignored).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if !vocab.index.contains_key(&t) {
                vocab.index.insert(t.clone(), vocab.tokens.len() as u32);
                vocab.tokens.push(t);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the [UNK] id.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the token list, used to tie artifacts to a vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|source| TextError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.to_owned(),
            source,
        })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(TextError::BadVocabulary {
                path: path.to_owned(),
                reason: "reserved tokens missing or out of order".into(),
            });
        }
        let vocab = Self::from_tokens(lines[RESERVED.len()..].iter().copied());
        if vocab.len() != lines.len() {
            return Err(TextError::BadVocabulary {
                path: path.to_owned(),
                reason: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}

/// A tokenized sentence with its vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    tokens: Vec<String>,
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn from_tokens(tokens: Vec<String>, vocab: &Vocabulary) -> Self {
        let ids = tokens.iter().map(|t| vocab.id(t)).collect();
        TokenSeq { tokens, ids }
    }

    /// Builds a sequence from ids; every id must be in `vocab`.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Self {
        let tokens = ids.iter().map(|&i| vocab.token(i).to_string()).collect();
        TokenSeq { tokens, ids }
    }

    pub(crate) fn from_parts(tokens: Vec<String>, ids: Vec<u32>) -> Self {
        debug_assert_eq!(tokens.len(), ids.len());
        TokenSeq { tokens, ids }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens joined by single spaces. Re-tokenizing yields the same tokens.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Keeps the entries at `keep` positions (in order).
    pub fn select(&self, keep: &[usize]) -> TokenSeq {
        TokenSeq {
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSeq {
    TokenSeq::from_tokens(split_tokens(text), vocab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub reference: TokenSeq,
    pub candidate: TokenSeq,
}

impl SentencePair {
    pub fn new(reference: TokenSeq, candidate: TokenSeq) -> Self {
        SentencePair { reference, candidate }
    }

    /// An empty candidate is allowed and marks a degenerate pair.
    pub fn is_degenerate(&self) -> bool {
        self.candidate.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatedExample {
    pub pair: SentencePair,
    pub rating: f64,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatingsFormat {
    WmtTsv,
    Jsonl,
}

impl RatingsFormat {
    /// `.jsonl` / `.json` select JSONL; anything else is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => RatingsFormat::Jsonl,
            _ => RatingsFormat::WmtTsv,
        }
    }
}

/// One line of a ratings file before expansion into pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub source_id: String,
    pub references: Vec<String>,
    pub candidate: String,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct RecordsReport {
    pub records: Vec<RatingRecord>,
    pub skipped: Vec<SkippedLine>,
    /// The file declared its ratings as raw (unstandardized) scores.
    pub raw_scores: bool,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub examples: Vec<RatedExample>,
    pub skipped: Vec<SkippedLine>,
    /// Ratings were z-scored because the file declared raw scores.
    pub standardized: bool,
}

impl IngestReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    source_id: String,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    references: Option<Vec<String>>,
    candidate: String,
    #[serde(default)]
    rating: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct JsonMeta {
    meta: serde_json::Map<String, serde_json::Value>,
}

fn parse_rating(field: &str) -> Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("non-numeric rating {field:?}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite rating {field:?}"))
    }
}

fn parse_tsv_line(line: &str) -> Result<RatingRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 && cols.len() != 4 {
        return Err(format!("expected 3 or 4 tab-separated fields, found {}", cols.len()));
    }
    if cols[0].trim().is_empty() {
        return Err("empty source id".into());
    }
    if split_tokens(cols[1]).is_empty() {
        return Err("empty reference".into());
    }
    let rating = match cols.get(3) {
        Some(f) if !f.trim().is_empty() => Some(parse_rating(f)?),
        _ => None,
    };
    Ok(RatingRecord {
        source_id: cols[0].trim().to_string(),
        references: vec![cols[1].to_string()],
        candidate: cols[2].to_string(),
        rating,
    })
}

fn parse_json_line(line: &str) -> Result<RatingRecord, String> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut references = rec.references.unwrap_or_default();
    if let Some(r) = rec.reference {
        references.insert(0, r);
    }
    if references.is_empty() {
        return Err("record has no reference".into());
    }
    if references.iter().any(|r| split_tokens(r).is_empty()) {
        return Err("empty reference".into());
    }
    if rec.source_id.trim().is_empty() {
        return Err("empty source id".into());
    }
    let rating = match rec.rating {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::Number(n)) => Some(n.as_f64().ok_or("rating out of range")?),
        Some(serde_json::Value::String(s)) => Some(parse_rating(&s)?),
        Some(other) => return Err(format!("non-numeric rating {other}")),
    };
    Ok(RatingRecord {
        source_id: rec.source_id,
        references,
        candidate: rec.candidate,
        rating,
    })
}

/// Reads a ratings file into records without tokenizing.
///
/// TSV lines are `source_id, reference, candidate[, rating]`; lines starting
/// with `#` are comments, and `# scale: raw` declares raw scores. A first line
/// whose first field is `source_id` is treated as a header. JSONL records carry
/// `reference` or `references`; a `{"meta": {"scale": "raw"}}` record declares
/// raw scores.
pub fn read_records(path: &Path, format: RatingsFormat) -> Result<RecordsReport, TextError> {
    let file = fs::File::open(path).map_err(|source| TextError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut report = RecordsReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TextError::Io {
            path: path.to_owned(),
            source,
        })?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parsed = match format {
            RatingsFormat::WmtTsv => {
                if let Some(comment) = trimmed.strip_prefix('#') {
                    if comment.replace(' ', "").eq_ignore_ascii_case("scale:raw") {
                        report.raw_scores = true;
                    }
                    continue;
                }
                if lineno == 1 && line.split('\t').next() == Some("source_id") {
                    continue;
                }
                parse_tsv_line(&line)
            }
            RatingsFormat::Jsonl => {
                if let Ok(meta) = serde_json::from_str::<JsonMeta>(trimmed) {
                    if meta.meta.get("scale").and_then(|v| v.as_str()) == Some("raw") {
                        report.raw_scores = true;
                    }
                    continue;
                }
                parse_json_line(trimmed)
            }
        };
        match parsed {
            Ok(rec) => report.records.push(rec),
            Err(reason) => report.skipped.push(SkippedLine { line: lineno, reason }),
        }
    }
    Ok(report)
}

/// Reads rated pairs. A record with `k` references yields `k` examples
/// sharing its source id. Records without a usable rating are skipped and
/// counted.
pub fn ingest_ratings(path: &Path, format: RatingsFormat, vocab: &Vocabulary) -> Result<IngestReport, TextError> {
    let RecordsReport {
        records,
        mut skipped,
        raw_scores,
    } = read_records(path, format)?;
    let (mut examples, missing) = expand_records(&records, vocab);
    skipped.extend(missing);
    skipped.sort_by_key(|s| s.line);
    if raw_scores && examples.len() >= 2 {
        standardize_ratings(&mut examples);
    }
    Ok(IngestReport {
        examples,
        skipped,
        standardized: raw_scores,
    })
}

/// One example per (record, reference); records without a rating are
/// returned as skipped.
pub fn expand_records(records: &[RatingRecord], vocab: &Vocabulary) -> (Vec<RatedExample>, Vec<SkippedLine>) {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for rec in records {
        let Some(rating) = rec.rating else {
            skipped.push(SkippedLine {
                line: 0,
                reason: format!("missing rating for source {}", rec.source_id),
            });
            continue;
        };
        let candidate = tokenize(&rec.candidate, vocab);
        for r in &rec.references {
            examples.push(RatedExample {
                pair: SentencePair::new(tokenize(r, vocab), candidate.clone()),
                rating,
                source_id: rec.source_id.clone(),
            });
        }
    }
    (examples, skipped)
}

/// Z-scores ratings in place (population standard deviation). Constant
/// ratings are left unchanged.
pub fn standardize_ratings(examples: &mut [RatedExample]) {
    let n = examples.len() as f64;
    let mean = examples.iter().map(|e| e.rating).sum::<f64>() / n;
    let var = examples.iter().map(|e| (e.rating - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        for e in examples {
            e.rating = (e.rating - mean) / sd;
        }
    }
}

fn check_field(s: &str, what: &str) -> Result<(), TextError> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(TextError::Unserializable(format!("{what} contains a tab or newline: {s:?}")));
    }
    Ok(())
}

/// Writes examples as TSV, one line per example. Inverse of
/// [`ingest_ratings`] with [`RatingsFormat::WmtTsv`].
pub fn write_ratings_tsv<W: Write>(mut out: W, examples: &[RatedExample]) -> Result<(), TextError> {
    let io = |source| TextError::Io {
        path: PathBuf::from("<output>"),
        source,
    };
    for ex in examples {
        check_field(&ex.source_id, "source id")?;
        if ex.source_id.trim() != ex.source_id || ex.source_id.is_empty() {
            return Err(TextError::Unserializable(format!("source id {:?}", ex.source_id)));
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            ex.source_id,
            ex.pair.reference.text(),
            ex.pair.candidate.text(),
            ex.rating
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Writes records as TSV (single reference) or JSONL.
pub fn write_records<W: Write>(mut out: W, records: &[RatingRecord], format: RatingsFormat) -> Result<(), TextError> {
    let io = |source| TextError::Io {
        path: PathBuf::from("<output>"),
        source,
    };
    for rec in records {
        match format {
            RatingsFormat::WmtTsv => {
                if rec.references.len() != 1 {
                    return Err(TextError::Unserializable("TSV holds exactly one reference per line".into()));
                }
                check_field(&rec.source_id, "source id")?;
                check_field(&rec.references[0], "reference")?;
                check_field(&rec.candidate, "candidate")?;
                let rating = rec.rating.map(|r| r.to_string()).unwrap_or_default();
                writeln!(out, "{}\t{}\t{}\t{}", rec.source_id, rec.references[0], rec.candidate, rating).map_err(io)?;
            }
            RatingsFormat::Jsonl => {
                let line = serde_json::to_string(rec).map_err(|e| TextError::Unserializable(e.to_string()))?;
                writeln!(out, "{line}").map_err(io)?;
            }
        }
    }
    Ok(())
}

/// Splits by source id so that no source appears on both sides.
pub fn split_no_leak(
    data: &[RatedExample],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<RatedExample>, Vec<RatedExample>), TextError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(TextError::BadFraction(holdout_fraction));
    }
    let sources: BTreeSet<&str> = data.iter().map(|e| e.source_id.as_str()).collect();
    if sources.len() < 2 {
        return Err(TextError::TooFewSources(sources.len()));
    }
    let mut order: Vec<&str> = sources.into_iter().collect();
    order.shuffle(&mut rng::derived_rng(seed, "split_no_leak", 0));
    let n = order.len();
    let n_val = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let held: BTreeSet<&str> = order[..n_val].iter().copied().collect();
    let (validation, train): (Vec<_>, Vec<_>) = data.iter().cloned().partition(|e| held.contains(e.source_id.as_str()));
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["the", "cat", ".", "runs", "sat"])
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        let t = tokenize("The cat.", &vocab());
        assert_eq!(t.tokens(), ["the", "cat", "."]);
        assert_eq!(t.ids().len(), 3);
        assert!(tokenize("", &vocab()).is_empty());
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let t = tokenize("Zyzzyva runs", &vocab());
        assert_eq!(t.ids()[0], UNK_ID);
        assert_eq!(t.tokens()[0], "zyzzyva");
        assert_eq!(t.ids()[1], vocab().id("runs"));
    }

    #[test]
    fn tokenization_is_idempotent() {
        let text = "Hello, World! It's 3.5 o'clock -- fine?";
        let once = split_tokens(text);
        assert_eq!(split_tokens(&once.join(" ")), once);
    }

    #[test]
    fn vocabulary_respects_min_count_and_reserved_ids() {
        let v = Vocabulary::build(["a b b c", "b c"], 2);
        assert_eq!(v.token(PAD_ID), PAD);
        assert_eq!(v.token(MASK_ID), MASK);
        assert_eq!(v.tokens()[5..], ["b", "c"]);
        assert_eq!(v.get("a"), None);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["x y z x y x"], 1);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        fs::write(&p, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    fn write_tmp(body: &str, name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        (dir, p)
    }

    #[test]
    fn ingest_counts_valid_tsv_lines() {
        let (_d, p) = write_tmp("s1\tthe cat\tthe cat\t0.5\ns2\tthe cat\ta cat\t-1\ns3\tcat\tcat sat\t2\n", "r.tsv");
        let rep = ingest_ratings(&p, RatingsFormat::WmtTsv, &vocab()).unwrap();
        assert_eq!(rep.examples.len(), 3);
        assert_eq!(rep.skip_count(), 0);
    }

    #[test]
    fn ingest_skips_nan_rating() {
        let (_d, p) = write_tmp("s1\tthe cat\tthe cat\tNaN\ns2\tthe cat\ta cat\t1\n", "r.tsv");
        let rep = ingest_ratings(&p, RatingsFormat::WmtTsv, &vocab()).unwrap();
        assert_eq!(rep.examples.len(), 1);
        assert_eq!(rep.skip_count(), 1);
        assert_eq!(rep.skipped[0].line, 1);
    }

    #[test]
    fn ingest_skips_malformed_and_missing_ratings() {
        let (_d, p) = write_tmp("only two\tfields\ns1\tthe cat\tthe cat\n s2\tx\ty\tabc\n", "r.tsv");
        let rep = ingest_ratings(&p, RatingsFormat::WmtTsv, &vocab()).unwrap();
        assert!(rep.examples.is_empty());
        assert_eq!(rep.skip_count(), 3);
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = ingest_ratings(Path::new("/nonexistent/ratings.tsv"), RatingsFormat::WmtTsv, &vocab());
        assert!(matches!(err, Err(TextError::Io { .. })));
    }

    #[test]
    fn jsonl_multi_reference_expands_with_shared_source() {
        let body = r#"{"source_id":"w1","references":["the cat sat","a cat sat","cat"],"candidate":"the cat","rating":0.3}
{"source_id":"w2","reference":"the cat","candidate":"cat","rating":"1.5"}
"#;
        let (_d, p) = write_tmp(body, "r.jsonl");
        let rep = ingest_ratings(&p, RatingsFormat::Jsonl, &vocab()).unwrap();
        assert_eq!(rep.examples.len(), 4);
        assert!(rep.examples[..3].iter().all(|e| e.source_id == "w1"));
        assert_eq!(rep.examples[3].rating, 1.5);
    }

    #[test]
    fn raw_scores_are_standardized() {
        let (_d, p) = write_tmp("# scale: raw\ns1\ta\tb\t10\ns2\ta\tb\t30\n", "r.tsv");
        let rep = ingest_ratings(&p, RatingsFormat::WmtTsv, &vocab()).unwrap();
        assert!(rep.standardized);
        assert_eq!(rep.examples[0].rating, -1.0);
        assert_eq!(rep.examples[1].rating, 1.0);
    }

    #[test]
    fn tsv_round_trip() {
        let v = vocab();
        let ex = vec![
            RatedExample {
                pair: SentencePair::new(tokenize("The cat sat.", &v), tokenize("A cat, unknownword!", &v)),
                rating: 0.1 + 0.2,
                source_id: "seg-1".into(),
            },
            RatedExample {
                pair: SentencePair::new(tokenize("runs", &v), TokenSeq::empty()),
                rating: -1e-20,
                source_id: "seg-2".into(),
            },
        ];
        let mut buf = Vec::new();
        write_ratings_tsv(&mut buf, &ex).unwrap();
        let (_d, p) = write_tmp(std::str::from_utf8(&buf).unwrap(), "rt.tsv");
        let back = ingest_ratings(&p, RatingsFormat::WmtTsv, &v).unwrap();
        assert_eq!(back.examples, ex);
    }

    fn dataset(n_sources: usize, per_source: usize) -> Vec<RatedExample> {
        let v = vocab();
        (0..n_sources * per_source)
            .map(|i| RatedExample {
                pair: SentencePair::new(tokenize("the cat", &v), tokenize("cat", &v)),
                rating: i as f64,
                source_id: format!("src{}", i / per_source),
            })
            .collect()
    }

    #[test]
    fn split_partitions_by_source() {
        let data = dataset(100, 1);
        let (train, val) = split_no_leak(&data, 0.10, 3).unwrap();
        assert!((8..=12).contains(&val.len()));
        assert_eq!(train.len() + val.len(), data.len());
        let ts: BTreeSet<_> = train.iter().map(|e| &e.source_id).collect();
        assert!(val.iter().all(|e| !ts.contains(&e.source_id)));
    }

    #[test]
    fn split_groups_whole_sources() {
        let data = dataset(60, 3);
        let (train, val) = split_no_leak(&data, 0.2, 11).unwrap();
        let vs: BTreeSet<_> = val.iter().map(|e| e.source_id.clone()).collect();
        assert_eq!(vs.len(), 12);
        assert_eq!(val.len(), 36);
        assert!(train.iter().all(|e| !vs.contains(&e.source_id)));
    }

    #[test]
    fn split_is_deterministic() {
        let data = dataset(40, 2);
        assert_eq!(split_no_leak(&data, 0.25, 5).unwrap(), split_no_leak(&data, 0.25, 5).unwrap());
        assert_ne!(split_no_leak(&data, 0.25, 5).unwrap().1, split_no_leak(&data, 0.25, 6).unwrap().1);
    }

    #[test]
    fn split_needs_two_sources() {
        let data = dataset(1, 5);
        assert!(matches!(split_no_leak(&data, 0.5, 0), Err(TextError::TooFewSources(1))));
    }
}
