//! File plumbing shared by the commands: atomic writes, content hashes,
//! and the pairs and predictions formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthmetric::synthgen::SyntheticRecord;
use synthmetric::textcore::{write_records, RatingRecord, RatingsFormat, TOKENIZER_VERSION};

use crate::error::CliError;

pub const PAIRS_SCHEMA: &str = "synthmetric-pairs/1";
pub const MANIFEST_SCHEMA: &str = "synthmetric-manifest/1";
pub const REPORT_SCHEMA: &str = "synthmetric-report/1";

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed command leaves no partial output.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_owned(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::data(dir.display(), e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush().map_err(|e| CliError::data(path.display(), e))?;
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644)).map_err(|e| CliError::data(path.display(), e))?;
    }
    tmp.persist(path).map_err(|e| CliError::data(path.display(), e.error))?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, |w| w.write_all(bytes).map_err(|e| CliError::data(path.display(), e)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(path.display(), e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(path.display(), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Final path component, for manifests that must not depend on where a run happened.
pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// First line of a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsHeader {
    pub schema: String,
    pub tokenizer: String,
    pub vocab: String,
    pub config_hash: String,
}

impl PairsHeader {
    pub fn new(vocab: String, config_hash: String) -> Self {
        PairsHeader {
            schema: PAIRS_SCHEMA.into(),
            tokenizer: TOKENIZER_VERSION.into(),
            vocab,
            config_hash,
        }
    }
}

pub fn write_pairs(w: &mut dyn Write, header: &PairsHeader, records: &[SyntheticRecord]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::data("pairs output", e);
    let ser = |e: serde_json::Error| CliError::data("pairs output", e);
    writeln!(w, "{}", serde_json::to_string(header).map_err(ser)?).map_err(io)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(ser)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<(PairsHeader, Vec<SyntheticRecord>), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::data(path.display(), e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::data(path.display(), "empty pairs file"))?
        .map_err(|e| CliError::data(path.display(), e))?;
    let found = serde_json::from_str::<serde_json::Value>(&first)
        .ok()
        .and_then(|v| v.get("schema").and_then(|s| s.as_str()).map(String::from))
        .unwrap_or_else(|| "<none>".into());
    if found != PAIRS_SCHEMA {
        return Err(CliError::data(
            path.display(),
            format!("pairs schema {found} is not supported (expected {PAIRS_SCHEMA})"),
        ));
    }
    let header: PairsHeader = serde_json::from_str(&first).map_err(|e| CliError::data(path.display(), e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::data(path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CliError::data(format!("{}:{}", path.display(), i + 2), e))?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Ratings file in the same format as the input, keeping a raw-scale declaration.
pub fn write_rating_file(path: &Path, records: &[RatingRecord], format: RatingsFormat, raw: bool, config_hash: &str) -> Result<(), CliError> {
    write_atomic(path, |w| {
        let io = |e: std::io::Error| CliError::data(path.display(), e);
        match format {
            RatingsFormat::WmtTsv => {
                writeln!(w, "# config_hash: {config_hash}").map_err(io)?;
                if raw {
                    writeln!(w, "# scale: raw").map_err(io)?;
                }
            }
            RatingsFormat::Jsonl => {
                let mut meta = serde_json::Map::new();
                meta.insert("config_hash".into(), config_hash.into());
                if raw {
                    meta.insert("scale".into(), "raw".into());
                }
                writeln!(w, "{}", serde_json::json!({ "meta": meta })).map_err(io)?;
            }
        }
        write_records(w, records, format).map_err(CliError::from)
    })
}

/// `source_id<TAB>score` lines after a `# config_hash:` comment.
pub fn write_predictions(path: &Path, rows: &[(String, f64)], config_hash: &str) -> Result<(), CliError> {
    write_atomic(path, |w| {
        let io = |e: std::io::Error| CliError::data(path.display(), e);
        writeln!(w, "# config_hash: {config_hash}").map_err(io)?;
        for (id, score) in rows {
            writeln!(w, "{id}\t{score}").map_err(io)?;
        }
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let (id, score) = line.split_once('\t').ok_or_else(|| CliError::data(at(), "expected source_id<TAB>score"))?;
        let score: f64 = score.trim().parse().map_err(|e| CliError::data(at(), e))?;
        rows.push((id.to_string(), score));
    }
    Ok(rows)
}
