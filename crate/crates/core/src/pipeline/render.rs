use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{read_records, MetricsReport, ProbeReport};
use crate::speedbench::{median, SpeedReport};

/// Any record a pipeline writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportRecord {
    Metrics(MetricsReport),
    Speed(SpeedReport),
    Probe(ProbeReport),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableStyle {
    /// Model, size, BLEU.
    Table1,
    /// Repetition, perplexity and word accuracy with deltas to the first model.
    Table3,
    /// Speed ratios against the first model.
    Table4,
    /// Size, BLEU and Speed_max ratio side by side.
    Table7,
}

impl std::str::FromStr for TableStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(TableStyle::Table1),
            "table3" => Ok(TableStyle::Table3),
            "table4" => Ok(TableStyle::Table4),
            "table7" => Ok(TableStyle::Table7),
            other => Err(Error::config(format!(
                "unknown table style `{other}` (table1, table3, table4, table7)"
            ))),
        }
    }
}

pub fn read_report_records<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<ReportRecord>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records::<ReportRecord>(p.as_ref())?);
    }
    Ok(out)
}

/// Per-model medians over seeds, in order of first appearance.
struct Row {
    model: String,
    params: Option<usize>,
    bleu: f64,
    repetition: f64,
    perplexity: f64,
    word_accuracy: f64,
}

fn metric_rows(records: &[ReportRecord]) -> Vec<Row> {
    let metrics: Vec<&MetricsReport> = records
        .iter()
        .filter_map(|r| match r {
            ReportRecord::Metrics(m) => Some(m),
            _ => None,
        })
        .collect();
    let mut order: Vec<&str> = Vec::new();
    for m in &metrics {
        if !order.contains(&m.model.as_str()) {
            order.push(&m.model);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<&&MetricsReport> = metrics.iter().filter(|m| m.model == name).collect();
            let med = |f: fn(&MetricsReport) -> f64| median(&group.iter().map(|m| f(m)).collect::<Vec<_>>());
            Row {
                model: name.to_string(),
                params: group.iter().find_map(|m| m.params),
                bleu: med(|m| m.bleu),
                repetition: med(|m| m.repetition_ratio),
                perplexity: med(|m| m.perplexity),
                word_accuracy: med(|m| m.word_accuracy_f),
            }
        })
        .collect()
}

fn speed_rows(records: &[ReportRecord]) -> Vec<(String, f64, f64)> {
    let speeds: Vec<&SpeedReport> = records
        .iter()
        .filter_map(|r| match r {
            ReportRecord::Speed(s) => Some(s),
            _ => None,
        })
        .collect();
    let mut order: Vec<&str> = Vec::new();
    for s in &speeds {
        if !order.contains(&s.model.as_str()) {
            order.push(&s.model);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<&&SpeedReport> = speeds.iter().filter(|s| s.model == name).collect();
            let single = median(&group.iter().map(|s| s.sentences_per_second_single).collect::<Vec<_>>());
            let max = median(&group.iter().map(|s| s.sentences_per_second_max).collect::<Vec<_>>());
            (name.to_string(), single, max)
        })
        .collect()
}

fn size(params: Option<usize>, model: &str) -> Result<String> {
    let p = params.ok_or_else(|| Error::invalid(format!("metric `params` missing for `{model}`")))?;
    Ok(if p >= 1_000_000 {
        format!("{:.1}M", p as f64 / 1e6)
    } else {
        format!("{:.1}K", p as f64 / 1e3)
    })
}

fn signed(x: f64, digits: usize) -> String {
    if x >= 0.0 {
        format!("+{x:.digits$}")
    } else {
        format!("{x:.digits$}")
    }
}

/// Markdown table of `records` in the given style. Several records for
/// one model are summarized by their median.
pub fn render_report(records: &[ReportRecord], style: TableStyle) -> Result<String> {
    if records.is_empty() {
        return Err(Error::invalid("no report records to render"));
    }
    let metrics = metric_rows(records);
    let speeds = speed_rows(records);
    let need_metrics = || -> Result<()> {
        if metrics.is_empty() {
            return Err(Error::invalid("metric `bleu` missing: no quality reports given"));
        }
        Ok(())
    };
    let mut out = String::new();
    match style {
        TableStyle::Table1 => {
            need_metrics()?;
            out.push_str("| Model | Size | BLEU |\n|---|---:|---:|\n");
            for r in &metrics {
                let _ = writeln!(out, "| {} | {} | {:.2} |", r.model, size(r.params, &r.model)?, r.bleu);
            }
        }
        TableStyle::Table3 => {
            need_metrics()?;
            let base = &metrics[0];
            out.push_str("| Model | Repetition | Δ | PPL | Δ | WA | Δ |\n|---|---:|---:|---:|---:|---:|---:|\n");
            for r in &metrics {
                let _ = writeln!(
                    out,
                    "| {} | {:.2}% | {} | {:.2} | {} | {:.3} | {} |",
                    r.model,
                    100.0 * r.repetition,
                    signed(100.0 * (r.repetition - base.repetition), 2),
                    r.perplexity,
                    signed(r.perplexity - base.perplexity, 2),
                    r.word_accuracy,
                    signed(r.word_accuracy - base.word_accuracy, 3),
                );
            }
        }
        TableStyle::Table4 => {
            let (_, b1, bmax) = speeds
                .first()
                .cloned()
                .ok_or_else(|| Error::invalid("metric `Speed_max` missing: no speed reports given"))?;
            out.push_str("| Model | Speed1 | Speed_max |\n|---|---:|---:|\n");
            for (model, s1, smax) in &speeds {
                let _ = writeln!(out, "| {model} | {:.2}x | {:.2}x |", s1 / b1, smax / bmax);
            }
        }
        TableStyle::Table7 => {
            need_metrics()?;
            let speed_of = |model: &str| -> Result<f64> {
                speeds
                    .iter()
                    .find(|(m, ..)| m == model)
                    .map(|s| s.2)
                    .ok_or_else(|| Error::invalid(format!("metric `Speed_max` missing for `{model}`")))
            };
            let base = speed_of(&metrics[0].model)?;
            out.push_str("| Model | Size | BLEU | Speed_max |\n|---|---:|---:|---:|\n");
            for r in &metrics {
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.2} | {:.2}x |",
                    r.model,
                    size(r.params, &r.model)?,
                    r.bleu,
                    speed_of(&r.model)? / base
                );
            }
        }
    }
    Ok(out)
}
