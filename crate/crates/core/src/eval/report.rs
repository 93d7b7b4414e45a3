use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quality and weakness metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub bleu: f64,
    pub repetition_ratio: f64,
    pub word_accuracy_f: f64,
    pub perplexity: f64,
    /// Scalar parameter count, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.bleu, self.repetition_ratio, self.word_accuracy_f, self.perplexity]
            .iter()
            .all(|v| v.is_finite());
        let in_range = (0.0..=100.0).contains(&self.bleu)
            && (0.0..=1.0).contains(&self.repetition_ratio)
            && (0.0..=1.0).contains(&self.word_accuracy_f)
            && self.perplexity >= 1.0;
        if finite && in_range {
            Ok(())
        } else {
            Err(Error::invalid(format!("metrics out of range for `{}`", self.model)))
        }
    }
}

/// Appends one JSON record per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
