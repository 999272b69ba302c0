//! Results, predictions and training-log files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lgcap_core::forgetting::ResultsFile;
use lgcap_core::trainer::LogRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::io::{read_json, to_json_bytes};

pub const RESULTS_FILE: &str = "results.json";
pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_name(task: usize) -> String {
    format!("checkpoint_task{task}.lgck")
}

/// One entry of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub caption: String,
}

pub fn results_bytes(results: &ResultsFile) -> Vec<u8> {
    to_json_bytes(results)
}

/// Hex SHA-256 of the canonical results encoding.
pub fn results_digest(results: &ResultsFile) -> String {
    hex::encode(Sha256::digest(results_bytes(results)))
}

pub fn read_results(path: &Path) -> AppResult<ResultsFile> {
    read_json(path)
}

pub fn read_log(path: &Path) -> AppResult<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| AppError::json(path, e))?);
        }
    }
    Ok(out)
}

/// Appends JSON lines; every record is flushed so a crash leaves a valid
/// prefix.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path, keep: &[LogRecord]) -> AppResult<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| AppError::io(path, e))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(f) };
        for r in keep {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, r: &LogRecord) -> AppResult<()> {
        let line = serde_json::to_string(r).map_err(|e| AppError::json(&self.path, e))?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| AppError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip_with_nulls() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join(LOG_FILE);
        let r = LogRecord { task: 0, epoch: 1, step: 0, ce: 1.5, nouns: Some(0.25), clip: None, lgcl: None, total: 1.75 };
        let mut w = LogWriter::create(&p, &[]).unwrap();
        w.append(&r).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"clip\":null"), "{text}");
        assert_eq!(read_log(&p).unwrap(), vec![r]);
    }
}
