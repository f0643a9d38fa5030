//! JSONL corpus I/O and calibration/test splitting.
//!
//! One [`GenerationRecord`] per line:
//!
//! ```json
//! {"query_id": "q1", "question": "...", "context": null,
//!  "responses": [{"text": "Paris", "token_logprobs": [-0.1], "correct": true}],
//!  "entailment_fwd": [[1.0]]}
//! ```
//!
//! Responses may carry `gpt4_rating` and `rougeL` (numbers in `[0, 1]`)
//! instead of `correct`. Token log-probs of `-inf` are written as `"-inf"`.
//! Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::record::{GenerationRecord, RecordIssue};
use crate::rng::{fnv1a64, mix64};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("line {line}: entailment matrix is {rows}x{cols} but record has {responses} responses")]
    MatrixShapeMismatch { line: usize, rows: usize, cols: usize, responses: usize },
}

impl IngestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::Io(_) => None,
            IngestError::Parse { line, .. }
            | IngestError::Schema { line, .. }
            | IngestError::MatrixShapeMismatch { line, .. } => Some(*line),
        }
    }
}

/// Parse one JSONL line (1-based `line` for diagnostics).
pub fn parse_record(text: &str, line: usize) -> Result<GenerationRecord, IngestError> {
    let mut rec: GenerationRecord = serde_json::from_str(text).map_err(|e| classify(e, line))?;
    rec.reindex();
    validate_at(&rec, line)?;
    Ok(rec)
}

fn classify(e: serde_json::Error, line: usize) -> IngestError {
    let message = e.to_string();
    if e.is_data() {
        // serde reports missing fields as "missing field `name` at ..."
        let field = message
            .split('`')
            .nth(1)
            .filter(|_| message.starts_with("missing field") || message.starts_with("unknown field"))
            .unwrap_or("record")
            .to_string();
        IngestError::Schema { line, field, message }
    } else {
        IngestError::Parse { line, message }
    }
}

pub fn validate_at(rec: &GenerationRecord, line: usize) -> Result<(), IngestError> {
    rec.validate().map_err(|issue| match issue {
        RecordIssue::Field { field, message } => IngestError::Schema { line, field, message },
        RecordIssue::Shape { rows, cols, responses } => {
            IngestError::MatrixShapeMismatch { line, rows, cols, responses }
        }
    })
}

/// Streaming reader; blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<GenerationRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>, IngestError> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn write_corpus<W: Write>(mut w: W, records: &[GenerationRecord]) -> io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Write `contents` through a sibling temp file and rename into place.
pub fn write_atomically(
    path: impl AsRef<Path>,
    contents: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> io::Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        contents(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()
    })();
    match result {
        Ok(()) => std::fs::rename(&tmp, path),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[GenerationRecord]) -> io::Result<()> {
    write_atomically(path, |w| write_corpus(w, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Rank records by `mix64(fnv1a64(query_id) ^ seed)`.
    #[default]
    ByQueryHash,
    /// Leading records go to calibration.
    ByOrder,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "by_query_hash" | "hash" => Ok(SplitStrategy::ByQueryHash),
            "by_order" | "order" => Ok(SplitStrategy::ByOrder),
            other => Err(Error::InvalidConfig(format!("unknown split strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_fraction: f64,
    pub seed: u64,
    pub strategy: SplitStrategy,
}

impl SplitSpec {
    pub fn new(calibration_fraction: f64, seed: u64, strategy: SplitStrategy) -> Result<Self, Error> {
        if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "calibration fraction must lie in (0, 1), got {calibration_fraction}"
            )));
        }
        Ok(SplitSpec { calibration_fraction, seed, strategy })
    }

    /// `floor(fraction * n)`, with products within float noise of an
    /// integer snapped to it.
    pub fn calibration_count(&self, n: usize) -> usize {
        let x = self.calibration_fraction * n as f64;
        let nearest = x.round();
        if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            x.floor() as usize
        }
    }
}

pub fn query_hash(query_id: &str, seed: u64) -> u64 {
    mix64(fnv1a64(query_id.as_bytes()) ^ seed)
}

/// Deterministic calibration/test partition. Both halves keep input order.
pub fn split(
    records: Vec<GenerationRecord>,
    spec: &SplitSpec,
) -> Result<(Vec<GenerationRecord>, Vec<GenerationRecord>), Error> {
    let n = records.len();
    if n < 2 {
        return Err(Error::TooFewRecords(n));
    }
    let k = spec.calibration_count(n);
    let mut to_calibration = vec![false; n];
    match spec.strategy {
        SplitStrategy::ByOrder => to_calibration[..k].iter_mut().for_each(|c| *c = true),
        SplitStrategy::ByQueryHash => {
            let mut keyed: Vec<(u64, usize)> = records
                .iter()
                .enumerate()
                .map(|(i, r)| (query_hash(&r.query_id, spec.seed), i))
                .collect();
            keyed.sort_unstable();
            for &(_, i) in &keyed[..k] {
                to_calibration[i] = true;
            }
        }
    }
    let mut cal = Vec::with_capacity(k);
    let mut test = Vec::with_capacity(n - k);
    for (rec, is_cal) in records.into_iter().zip(to_calibration) {
        if is_cal {
            cal.push(rec);
        } else {
            test.push(rec);
        }
    }
    Ok((cal, test))
}
