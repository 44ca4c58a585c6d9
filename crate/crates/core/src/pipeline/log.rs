use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ArchSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain training of a fixed architecture.
    Train,
    SupernetFinetune,
    SupernetTrain,
    /// One candidate's selection score.
    Selection,
    /// The chosen candidate of a step.
    Selected,
    SelectedTrain,
    Eval,
}

/// Inputs of the composite selection score, kept so it can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub accuracy: f64,
    pub params: usize,
    pub supernet_params: usize,
    pub data_prev: usize,
    pub data_now: usize,
    pub alpha: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Position in the log, assigned on append.
    #[serde(default)]
    pub seq: u64,
    pub phase: Phase,
    /// Architecture label of the model measured.
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_inputs: Option<ScoreInputs>,
    pub wall_seconds: f64,
}

impl MetricRecord {
    pub fn new(step: usize, phase: Phase, spec: &ArchSpec, metric: &str, value: f64) -> Self {
        MetricRecord {
            step,
            seq: 0,
            phase,
            model: spec.label(),
            metric: metric.to_string(),
            value,
            params: crate::model::param_count(spec),
            candidate: None,
            spec: None,
            score_inputs: None,
            wall_seconds: 0.0,
        }
    }
}

/// Append-only line-delimited JSON log.
#[derive(Debug)]
pub struct MetricLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl MetricLog {
    /// Opens (creating if needed) and continues numbering after existing lines.
    pub fn open(path: &Path) -> Result<Self> {
        let next_seq = if path.exists() { read_log(path)?.len() as u64 } else { 0 };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricLog { path: path.to_path_buf(), file, next_seq })
    }

    pub fn append(&mut self, mut rec: MetricRecord) -> Result<MetricRecord> {
        rec.seq = self.next_seq;
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.next_seq += 1;
        Ok(rec)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: bad metric record: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Rewrites the log keeping only records of steps `<= step`.
pub fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let kept: Vec<MetricRecord> = read_log(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    crate::model::checkpoint::write_atomic(path, text.as_bytes())
}

/// SHA-256 over the records with wall-clock times zeroed.
pub fn content_hash(records: &[MetricRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        let mut r = r.clone();
        r.wall_seconds = 0.0;
        h.update(serde_json::to_string(&r).expect("records serialize").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
