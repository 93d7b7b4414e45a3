//! Mask-predict, single-pass, and autoregressive decoding.

mod autoregressive;
mod mask_predict;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use autoregressive::{at_beam, at_greedy, beam_search, emittable, AtSession, SessionStep, StepModel};
pub(crate) use mask_predict::best_content;
pub use mask_predict::{choose_candidate, glat_decode, mask_predict, remask_schedule, select_lowest};

use crate::data::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model};

/// One refinement pass of mask-predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// 1-based.
    pub iteration: usize,
    /// Positions predicted in this pass.
    pub masked: Vec<usize>,
    /// Full sequence after committing this pass's predictions.
    pub predictions: Vec<TokenId>,
    /// Per-position log-probabilities after the commit.
    pub scores: Vec<f32>,
    /// Lowest-scoring positions masked again for the next pass.
    pub remasked: Vec<usize>,
}

/// One length-beam entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub len: usize,
    pub tokens: Vec<TokenId>,
    pub mean_log_prob: f64,
    pub length_log_prob: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Output without PAD, MASK, or EOS.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each output token when it was committed.
    pub per_token_scores: Vec<f32>,
    /// Sum of committed log-probabilities (EOS included for AT).
    pub score: f64,
    /// Trace of the chosen candidate; empty for autoregressive decoding.
    pub iteration_trace: Vec<IterationTrace>,
    pub candidates: Vec<Candidate>,
    pub chosen_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Mask-predict refinement passes (T).
    pub iterations: usize,
    /// Candidate lengths per source (B).
    pub length_beam: usize,
    /// Beam width for autoregressive models.
    pub beam: usize,
    /// Sources per decoder call.
    pub batch_sentences: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            iterations: 10,
            length_beam: 5,
            beam: 1,
            batch_sentences: 128,
        }
    }
}

impl DecodeConfig {
    /// Single pass with the argmax length.
    pub fn single_pass() -> Self {
        DecodeConfig {
            iterations: 1,
            length_beam: 1,
            ..Default::default()
        }
    }
}

/// Decodes with the strategy that matches the model's decoder kind.
pub fn translate<S: AsRef<[TokenId]>>(model: &Model, sources: &[S], cfg: &DecodeConfig) -> Result<Vec<DecodeResult>> {
    if cfg.batch_sentences == 0 {
        return Err(Error::invalid("batch_sentences must be >= 1"));
    }
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(cfg.batch_sentences) {
        out.extend(match model.kind {
            DecoderKind::Nat => mask_predict(model, chunk, cfg.iterations, cfg.length_beam)?,
            DecoderKind::At => at_beam(model, chunk, cfg.beam, model.config.max_len)?,
        });
    }
    Ok(out)
}

pub fn hypotheses(results: &[DecodeResult]) -> Vec<Vec<TokenId>> {
    results.iter().map(|r| r.tokens.clone()).collect()
}

/// One hypothesis per line, tokens separated by spaces.
pub fn write_hypotheses(path: &Path, vocab: &Vocab, results: &[DecodeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        writeln!(f, "{}", vocab.decode(&r.tokens).join(" "))?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    sentence: usize,
    #[serde(flatten)]
    pass: &'a IterationTrace,
}

/// One JSON record per sentence and pass.
pub fn write_trace(path: &Path, results: &[DecodeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (sentence, r) in results.iter().enumerate() {
        for pass in &r.iteration_trace {
            serde_json::to_writer(&mut f, &TraceRecord { sentence, pass })?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}
