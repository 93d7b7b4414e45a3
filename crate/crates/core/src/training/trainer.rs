use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::steps::{train_at_step, train_cmlm_step, train_glat_step, StepLoss};
use super::{Objective, TrainConfig};
use crate::compute::{optimizer_step, AdamState, ParameterSet};
use crate::data::{Pair, ParallelCorpus};
use crate::decoding::{hypotheses, translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::{DecoderKind, Model};

/// Shuffled batches of pair indices whose padded size
/// `rows · max(src_len, tgt_len + 1)` stays within `budget` tokens.
/// A pair larger than the budget forms a batch of its own.
pub fn token_batches(pairs: &[Pair], budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let width = |i: usize| pairs[i].source.len().max(pairs[i].target.len() + 1);
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_width = 0;
    for i in order {
        let w = cur_width.max(width(i));
        if !cur.is_empty() && (cur.len() + 1) * w > budget {
            out.push(std::mem::take(&mut cur));
            cur_width = 0;
        }
        cur_width = cur_width.max(width(i));
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Snapshot taken at a validation point.
#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub step: usize,
    pub valid_bleu: f64,
    pub params: ParameterSet,
}

fn rank(records: &[CheckpointRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        records[b]
            .valid_bleu
            .total_cmp(&records[a].valid_bleu)
            .then(records[b].step.cmp(&records[a].step))
    });
    idx
}

/// Elementwise mean of the `k` checkpoints with the highest validation
/// BLEU, ties going to the later step.
pub fn select_and_average_checkpoints(records: &[CheckpointRecord], k: usize) -> Result<ParameterSet> {
    if k == 0 {
        return Err(Error::invalid("need at least one checkpoint to average"));
    }
    if records.len() < k {
        return Err(Error::invalid(format!(
            "{} checkpoints recorded, {k} requested",
            records.len()
        )));
    }
    let chosen: Vec<&CheckpointRecord> = rank(records).into_iter().take(k).map(|i| &records[i]).collect();
    let mut out = chosen[0].params.clone();
    out.zero_grad();
    if k == 1 {
        return Ok(out);
    }
    let names: Vec<String> = out.names().map(str::to_string).collect();
    for name in names {
        let mut sum: Vec<f64> = vec![0.0; out.get(&name)?.numel()];
        for rec in &chosen {
            let t = rec.params.get(&name)?;
            if t.numel() != sum.len() {
                return Err(Error::ShapeMismatch {
                    op: "average_checkpoints",
                    left: out.get(&name)?.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            sum.iter_mut().zip(t.values()).for_each(|(s, &v)| *s += v as f64);
        }
        let dst = out.get_mut(&name)?.values_mut();
        dst.iter_mut().zip(&sum).for_each(|(d, s)| *d = (s / k as f64) as f32);
    }
    Ok(out)
}

/// Keeps the `k` best checkpoints seen so far.
#[derive(Debug)]
struct CheckpointPool {
    k: usize,
    records: Vec<CheckpointRecord>,
}

impl CheckpointPool {
    fn offer(&mut self, step: usize, valid_bleu: f64, params: &ParameterSet) {
        let mut params = params.clone();
        params.zero_grad();
        self.records.push(CheckpointRecord {
            step,
            valid_bleu,
            params,
        });
        let order = rank(&self.records);
        if order.len() > self.k {
            let drop = order[self.k];
            self.records.swap_remove(drop);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glancing_ratio: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub bleu: f64,
}

pub struct TrainOutcome {
    /// Parameters averaged over the best checkpoints.
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub validations: Vec<ValidationPoint>,
    /// Glancing steps with nothing left to score.
    pub glat_skipped: usize,
}

fn expected_kind(objective: Objective) -> DecoderKind {
    match objective {
        Objective::At => DecoderKind::At,
        Objective::Cmlm | Objective::Glat => DecoderKind::Nat,
    }
}

/// Decoding used for validation BLEU under each objective.
pub fn validation_decoding(objective: Objective, cfg: &DecodeConfig) -> DecodeConfig {
    match objective {
        Objective::Glat => DecodeConfig {
            iterations: 1,
            length_beam: 1,
            ..cfg.clone()
        },
        _ => cfg.clone(),
    }
}

pub fn validation_bleu(model: &Model, valid: &ParallelCorpus, cfg: &DecodeConfig) -> Result<f64> {
    let sources: Vec<&[u32]> = valid.sources().collect();
    let refs: Vec<&[u32]> = valid.targets().collect();
    let out = translate(model, &sources, cfg)?;
    corpus_bleu(&hypotheses(&out), &refs)
}

/// Trains `model` under `objective`, validating every `valid_interval`
/// steps and at the last step, and returns the averaged model. With a
/// `log_path`, one JSON record per step is appended as training runs.
pub fn train(
    mut model: Model,
    objective: Objective,
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.kind != expected_kind(objective) {
        return Err(Error::invalid(format!(
            "{objective:?} training needs a {:?} model",
            expected_kind(objective)
        )));
    }
    if corpus.vocab_size() != model.config.vocab_size || valid.vocab_size() != model.config.vocab_size {
        return Err(Error::invalid("corpus vocabulary does not match the model"));
    }
    let mut log_file = match log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut adam = AdamState::for_params(&model.params);
    let mut pool = CheckpointPool {
        k: cfg.checkpoints_to_average,
        records: Vec::new(),
    };
    let decode_cfg = validation_decoding(objective, &cfg.validation);
    let pairs = corpus.pairs();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut glat_skipped = 0;
    model.params.zero_grad();

    for step in 1..=cfg.steps {
        if queue.is_empty() {
            queue = token_batches(pairs, cfg.tokens_per_batch, &mut batch_rng);
            queue.reverse();
        }
        let batch: Vec<Pair> = queue
            .pop()
            .unwrap_or_default()
            .into_iter()
            .map(|i| pairs[i].clone())
            .collect();
        let lr = cfg.learning_rate(step);
        let mut ratio = None;
        let loss: StepLoss = match objective {
            Objective::At => train_at_step(&mut model, &batch, cfg, &mut step_rng)?,
            Objective::Cmlm => train_cmlm_step(&mut model, &batch, cfg, &mut step_rng)?,
            Objective::Glat => {
                let r = cfg.glancing_ratio(step);
                ratio = Some(r);
                let (loss, stats) = train_glat_step(&mut model, &batch, r, cfg, &mut step_rng)?;
                if stats.skipped {
                    glat_skipped += 1;
                }
                loss
            }
        };
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        model.params.ensure_grads();
        optimizer_step(&mut model.params, &mut adam, lr, cfg.adam)?;
        model.params.zero_grad();

        let mut record = LogRecord {
            step,
            loss: loss.loss,
            lr,
            valid_bleu: None,
            glancing_ratio: ratio,
        };
        if step % cfg.valid_interval == 0 || step == cfg.steps {
            let bleu = validation_bleu(&model, valid, &decode_cfg)?;
            pool.offer(step, bleu, &model.params);
            validations.push(ValidationPoint { step, bleu });
            record.valid_bleu = Some(bleu);
        }
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        log.push(record);
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    model.params = select_and_average_checkpoints(&pool.records, cfg.checkpoints_to_average)?;
    Ok(TrainOutcome {
        model,
        log,
        validations,
        glat_skipped,
    })
}
