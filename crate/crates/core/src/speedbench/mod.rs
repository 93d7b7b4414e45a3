//! Decoding throughput: one sentence at a time (Speed₁) and at the largest
//! batch a token budget admits (Speed_max).
//!
//! Timings are wall-clock and assume nothing else runs on the machine;
//! external load invalidates them. Only ratios between models measured
//! back to back are meaningful.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::decoding::{translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model};

/// Fewest sentences a Speed₁ measurement accepts.
pub const MIN_SPEED_SENTENCES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedConfig {
    /// Padded tokens × cost factor allowed in one batch.
    pub token_budget: usize,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// Decoder width whose cost factor is 1.
    pub reference_dim: usize,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        SpeedConfig {
            token_budget: 4096,
            warmup_runs: 2,
            measured_runs: 3,
            reference_dim: 64,
        }
    }
}

impl SpeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_runs < 2 || self.measured_runs < 3 || self.reference_dim == 0 {
            return Err(Error::config(
                "speed: need warmup_runs >= 2, measured_runs >= 3, reference_dim >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub model: String,
    /// Speed₁, sentences per second.
    pub sentences_per_second_single: f64,
    /// Speed_max, sentences per second.
    pub sentences_per_second_max: f64,
    pub max_batch_sentences: usize,
    pub token_budget: usize,
    pub cost_factor: f64,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub aggregation: String,
}

/// Rates of the timed runs and their median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedMax {
    pub timing: Timing,
    pub max_batch: usize,
    pub cost_factor: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Memory-cost multiplier of a batch token: decoder width relative to the
/// reference, times the decoder passes each source needs.
pub fn cost_factor(model: &Model, decode: &DecodeConfig, reference_dim: usize) -> f64 {
    let width = model.config.dec_dim as f64 / reference_dim as f64;
    let passes = match model.kind {
        DecoderKind::Nat => decode.iterations * decode.length_beam,
        DecoderKind::At => decode.beam,
    };
    width * passes.max(1) as f64
}

/// Padded tokens of the first `n` sentences, cycling through `lengths`.
fn padded_tokens(lengths: &[usize], n: usize) -> usize {
    let longest = lengths
        .iter()
        .cycle()
        .take(n.min(lengths.len()))
        .max()
        .copied()
        .unwrap_or(0);
    n * longest
}

/// Largest `n` whose padded token count × `cost` fits in `budget`, found
/// by doubling then bisection. Depends only on its arguments.
pub fn max_batch_size(lengths: &[usize], budget: usize, cost: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::invalid("no sentences to batch"));
    }
    let fits = |n: usize| padded_tokens(lengths, n) as f64 * cost <= budget as f64;
    if !fits(1) {
        return Err(Error::invalid(format!(
            "token budget {budget} cannot hold one sentence at cost factor {cost}"
        )));
    }
    let mut lo = 1;
    let mut hi = 2;
    while fits(hi) {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn decode_all<S: AsRef<[TokenId]>>(model: &Model, sentences: &[S], cfg: &DecodeConfig, offset: usize) -> Result<()> {
    for (i, chunk) in sentences.chunks(cfg.batch_sentences).enumerate() {
        translate(model, chunk, cfg).map_err(|e| Error::Decode {
            index: offset + i * cfg.batch_sentences,
            source: Box::new(e),
        })?;
    }
    Ok(())
}

fn timed_rates<F: FnMut() -> Result<()>>(sentences: usize, warmup: usize, runs: usize, mut run: F) -> Result<Timing> {
    for _ in 0..warmup {
        run()?;
    }
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        run()?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(sentences as f64 / secs);
    }
    let median = median(&rates);
    Ok(Timing { runs: rates, median })
}

/// Speed₁: every sentence decoded on its own.
pub fn measure_speed1<S: AsRef<[TokenId]>>(
    model: &Model,
    decode: &DecodeConfig,
    sentences: &[S],
    cfg: &SpeedConfig,
) -> Result<Timing> {
    cfg.validate()?;
    if sentences.len() < MIN_SPEED_SENTENCES {
        return Err(Error::invalid(format!(
            "Speed1 needs at least {MIN_SPEED_SENTENCES} sentences, got {}",
            sentences.len()
        )));
    }
    let single = DecodeConfig {
        batch_sentences: 1,
        ..decode.clone()
    };
    timed_rates(sentences.len(), cfg.warmup_runs, cfg.measured_runs, || {
        decode_all(model, sentences, &single, 0)
    })
}

/// Speed_max: the whole set decoded in batches of the largest size the
/// token budget admits.
pub fn measure_speedmax<S: AsRef<[TokenId]>>(
    model: &Model,
    decode: &DecodeConfig,
    sentences: &[S],
    cfg: &SpeedConfig,
) -> Result<SpeedMax> {
    cfg.validate()?;
    let lengths: Vec<usize> = sentences.iter().map(|s| s.as_ref().len()).collect();
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if cfg.token_budget < longest {
        return Err(Error::invalid(format!(
            "token budget {} is below the longest sentence ({longest})",
            cfg.token_budget
        )));
    }
    let cost = cost_factor(model, decode, cfg.reference_dim);
    let max_batch = max_batch_size(&lengths, cfg.token_budget, cost)?;
    let batched = DecodeConfig {
        batch_sentences: max_batch,
        ..decode.clone()
    };
    let timing = timed_rates(sentences.len(), cfg.warmup_runs, cfg.measured_runs, || {
        decode_all(model, sentences, &batched, 0)
    })?;
    Ok(SpeedMax {
        timing,
        max_batch,
        cost_factor: cost,
    })
}

/// Speed₁ and Speed_max of one model.
pub fn measure_speed<S: AsRef<[TokenId]>>(
    tag: &str,
    model: &Model,
    decode: &DecodeConfig,
    sentences: &[S],
    cfg: &SpeedConfig,
) -> Result<SpeedReport> {
    let single = measure_speed1(model, decode, sentences, cfg)?;
    let max = measure_speedmax(model, decode, sentences, cfg)?;
    Ok(SpeedReport {
        model: tag.to_string(),
        sentences_per_second_single: single.median,
        sentences_per_second_max: max.timing.median,
        max_batch_sentences: max.max_batch,
        token_budget: cfg.token_budget,
        cost_factor: max.cost_factor,
        warmup_runs: cfg.warmup_runs,
        measured_runs: cfg.measured_runs,
        aggregation: "median".to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub model: String,
    pub speed1_ratio: f64,
    pub speedmax_ratio: f64,
}

/// Rates of each report divided by the baseline's.
pub fn speedup_report(reports: &[SpeedReport], baseline: &str) -> Result<Vec<SpeedupRow>> {
    let base = reports
        .iter()
        .find(|r| r.model == baseline)
        .ok_or_else(|| Error::invalid(format!("baseline `{baseline}` not among the speed reports")))?;
    Ok(reports
        .iter()
        .map(|r| SpeedupRow {
            model: r.model.clone(),
            speed1_ratio: r.sentences_per_second_single / base.sentences_per_second_single,
            speedmax_ratio: r.sentences_per_second_max / base.sentences_per_second_max,
        })
        .collect())
}

/// Markdown table of speedup ratios.
pub fn speedup_markdown(rows: &[SpeedupRow]) -> String {
    let mut out = String::from("| Model | Speed1 | Speed_max |\n|---|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2}x | {:.2}x |",
            r.model, r.speed1_ratio, r.speedmax_ratio
        );
    }
    out
}
