//! Single-batch losses. Each `train_*_step` adds its gradients into the
//! model's parameters; the caller applies the optimizer and zeroes them.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::compute::{Graph, Var};
use crate::data::{encode_batch, Batch, Pair, TokenId, BOS, EOS, MASK};
use crate::decoding::best_content;
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model, Noise};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// Token loss plus weighted length loss.
    pub loss: f32,
    pub token_loss: f32,
    pub length_loss: f32,
    /// Target positions that contributed to the token loss.
    pub scored_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlatStats {
    /// Per sentence: first-pass mismatches against the reference.
    pub hamming: Vec<usize>,
    /// Per sentence: reference tokens revealed to the second pass.
    pub revealed: Vec<usize>,
    /// True when no position was left to score, so nothing was learned.
    pub skipped: bool,
}

fn require(model: &Model, kind: DecoderKind, what: &str) -> Result<()> {
    if model.kind != kind {
        return Err(Error::invalid(format!(
            "{what} needs a {kind:?} model, got {:?}",
            model.kind
        )));
    }
    Ok(())
}

fn check_targets(pairs: &[Pair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if let Some(i) = pairs.iter().position(|p| p.target.is_empty()) {
        return Err(Error::invalid(format!("pair {i} has an empty target")));
    }
    Ok(())
}

fn backward_into(model: &mut Model, g: &Graph, loss: Var) -> Result<()> {
    let grads = g.backward(loss)?;
    grads.accumulate_into(&mut model.params)
}

/// Teacher-forced loss: inputs `<s> y`, targets `y </s>`, every position.
pub fn at_loss(
    model: &Model,
    g: &mut Graph,
    pairs: &[Pair],
    cfg: &TrainConfig,
    noise: &mut Noise,
) -> Result<(Var, StepLoss)> {
    let src = encode_batch(
        &pairs.iter().map(|p| &p.source[..]).collect::<Vec<_>>(),
        model.config.max_len,
    )?;
    let inputs: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|p| std::iter::once(BOS).chain(p.target.iter().copied()).collect())
        .collect();
    let tgt = encode_batch(&inputs, usize::MAX)?;
    let mut targets = vec![0; tgt.ids.len()];
    for (r, p) in pairs.iter().enumerate() {
        let row = &mut targets[r * tgt.width..][..p.target.len() + 1];
        row[..p.target.len()].copy_from_slice(&p.target);
        row[p.target.len()] = EOS;
    }
    let weights: Vec<f32> = tgt.mask.iter().map(|&m| f32::from(u8::from(m))).collect();
    let enc = model.encode_in(g, &src, noise)?;
    let logits = model.decode_in(g, &enc, &tgt, noise)?;
    let loss = g.cross_entropy(logits, &targets, &weights, cfg.label_smoothing)?;
    let value = g.value(loss)[0];
    Ok((
        loss,
        StepLoss {
            loss: value,
            token_loss: value,
            length_loss: 0.0,
            scored_tokens: tgt.tokens(),
        },
    ))
}

pub fn train_at_step(model: &mut Model, pairs: &[Pair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepLoss> {
    require(model, DecoderKind::At, "train_at_step")?;
    check_targets(pairs)?;
    let mut g = Graph::new();
    let rate = model.config.dropout;
    let (loss, stats) = at_loss(model, &mut g, pairs, cfg, &mut Noise::new(rng, rate))?;
    backward_into(model, &g, loss)?;
    Ok(stats)
}

/// Draws `k ~ U{1..len}` and `k` distinct positions, sorted.
pub fn sample_cmlm_mask<R: Rng>(len: usize, rng: &mut R) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let k = rng.gen_range(1..=len);
    let mut pos = sample(rng, len, k).into_vec();
    pos.sort_unstable();
    pos
}

/// Round-half-up of `ratio · distance`.
pub fn glancing_reveal_count(ratio: f32, distance: usize) -> usize {
    (ratio as f64 * distance as f64 + 0.5).floor() as usize
}

/// Loss of a masked-target pass: token loss at `scored` positions plus
/// the weighted length loss. `inputs` holds the decoder input rows.
pub fn masked_target_loss(
    model: &Model,
    g: &mut Graph,
    pairs: &[Pair],
    inputs: &[Vec<TokenId>],
    scored: &[Vec<bool>],
    cfg: &TrainConfig,
    noise: &mut Noise,
) -> Result<(Var, StepLoss)> {
    let max_len = model.config.max_len;
    let src = encode_batch(&pairs.iter().map(|p| &p.source[..]).collect::<Vec<_>>(), max_len)?;
    let tgt = encode_batch(inputs, max_len)?;
    let mut targets = vec![0; tgt.ids.len()];
    let mut weights = vec![0.0f32; tgt.ids.len()];
    let mut count = 0;
    for (r, p) in pairs.iter().enumerate() {
        for (t, &tok) in p.target.iter().enumerate() {
            targets[r * tgt.width + t] = tok;
            if scored[r][t] {
                weights[r * tgt.width + t] = 1.0;
                count += 1;
            }
        }
    }
    let enc = model.encode_in(g, &src, noise)?;
    let logits = model.decode_in(g, &enc, &tgt, noise)?;
    let token = g.cross_entropy(logits, &targets, &weights, cfg.label_smoothing)?;
    let len_logits = model.length_logits_in(g, &enc)?;
    let len_targets: Vec<TokenId> = pairs.iter().map(|p| (p.target.len() - 1) as TokenId).collect();
    let length = g.cross_entropy(len_logits, &len_targets, &vec![1.0; pairs.len()], 0.0)?;
    let weighted = g.scale(length, cfg.length_loss_weight)?;
    let loss = g.add(token, weighted)?;
    Ok((
        loss,
        StepLoss {
            loss: g.value(loss)[0],
            token_loss: g.value(token)[0],
            length_loss: g.value(length)[0],
            scored_tokens: count,
        },
    ))
}

fn check_lengths(model: &Model, pairs: &[Pair]) -> Result<()> {
    let max_len = model.config.max_len;
    match pairs.iter().position(|p| p.target.len() > max_len) {
        Some(index) => Err(Error::SequenceTooLong {
            index,
            len: pairs[index].target.len(),
            max_len,
        }),
        None => Ok(()),
    }
}

pub fn train_cmlm_step(model: &mut Model, pairs: &[Pair], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepLoss> {
    require(model, DecoderKind::Nat, "train_cmlm_step")?;
    check_targets(pairs)?;
    check_lengths(model, pairs)?;
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        let masked = sample_cmlm_mask(p.target.len(), rng);
        let mut input = p.target.clone();
        let mut flags = vec![false; p.target.len()];
        for &pos in &masked {
            input[pos] = MASK;
            flags[pos] = true;
        }
        inputs.push(input);
        scored.push(flags);
    }
    cmlm_with_masks(model, pairs, &inputs, &scored, cfg, rng)
}

/// CMLM step with caller-chosen masks (`scored[r][t]` marks masked positions).
pub fn cmlm_with_masks(
    model: &mut Model,
    pairs: &[Pair],
    inputs: &[Vec<TokenId>],
    scored: &[Vec<bool>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let rate = model.config.dropout;
    let (loss, stats) = masked_target_loss(model, &mut g, pairs, inputs, scored, cfg, &mut Noise::new(rng, rate))?;
    backward_into(model, &g, loss)?;
    Ok(stats)
}

/// Argmax content tokens of a parameter-free pass from all-MASK inputs.
pub fn first_pass(model: &Model, pairs: &[Pair]) -> Result<Vec<Vec<TokenId>>> {
    let max_len = model.config.max_len;
    let src = encode_batch(&pairs.iter().map(|p| &p.source[..]).collect::<Vec<_>>(), max_len)?;
    let masks: Vec<Vec<TokenId>> = pairs.iter().map(|p| vec![MASK; p.target.len()]).collect();
    let tgt: Batch = encode_batch(&masks, max_len)?;
    let mut g = Graph::inference();
    let mut noise = Noise::off();
    let enc = model.encode_in(&mut g, &src, &mut noise)?;
    let logits = model.decode_in(&mut g, &enc, &tgt, &mut noise)?;
    let v = model.config.vocab_size;
    let lv = g.value(logits);
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(r, p)| {
            (0..p.target.len())
                .map(|t| best_content(&lv[(r * tgt.width + t) * v..][..v]).0)
                .collect()
        })
        .collect())
}

/// Glancing step given first-pass predictions.
pub fn glat_with_predictions(
    model: &mut Model,
    pairs: &[Pair],
    predictions: &[Vec<TokenId>],
    ratio: f32,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLoss, GlatStats)> {
    let mut stats = GlatStats::default();
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut scored = Vec::with_capacity(pairs.len());
    for (p, pred) in pairs.iter().zip(predictions) {
        let len = p.target.len();
        let distance = p.target.iter().zip(pred).filter(|(a, b)| a != b).count();
        let reveal = glancing_reveal_count(ratio, distance).min(len);
        let revealed = sample(rng, len, reveal).into_vec();
        let mut input = vec![MASK; len];
        let mut flags = vec![true; len];
        for &pos in &revealed {
            input[pos] = p.target[pos];
            flags[pos] = false;
        }
        stats.hamming.push(distance);
        stats.revealed.push(reveal);
        inputs.push(input);
        scored.push(flags);
    }
    if scored.iter().flatten().all(|&s| !s) {
        stats.skipped = true;
        return Ok((StepLoss::default(), stats));
    }
    let loss = cmlm_with_masks(model, pairs, &inputs, &scored, cfg, rng)?;
    Ok((loss, stats))
}

pub fn train_glat_step(
    model: &mut Model,
    pairs: &[Pair],
    ratio: f32,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLoss, GlatStats)> {
    require(model, DecoderKind::Nat, "train_glat_step")?;
    check_targets(pairs)?;
    check_lengths(model, pairs)?;
    let predictions = first_pass(model, pairs)?;
    glat_with_predictions(model, pairs, &predictions, ratio, cfg, rng)
}
