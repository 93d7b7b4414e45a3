use crate::compute::{kernels, Graph};
use crate::data::{encode_batch, Batch, TokenId, MASK, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::model::{top_lengths, DecoderKind, Model, Noise};

use super::{Candidate, DecodeResult, IterationTrace};

/// Re-mask counts for iterations `t = 1..=T`: `floor(L·(T−t)/T)`.
pub fn remask_schedule(len: usize, iterations: usize) -> Vec<usize> {
    (1..=iterations).map(|t| len * (iterations - t) / iterations).collect()
}

/// Positions of the `n` lowest scores, ties broken toward the left,
/// returned in ascending position order.
pub fn select_lowest(scores: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Best content token and its log-probability in a logit row.
pub(crate) fn best_content(row: &[f32]) -> (TokenId, f32) {
    let lse = kernels::log_sum_exp(row);
    let (mut best, mut best_v) = (RESERVED, row[RESERVED]);
    for (i, &v) in row.iter().enumerate().skip(RESERVED + 1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    (best as TokenId, best_v - lse)
}

struct Hypothesis {
    source: usize,
    len: usize,
    length_log_prob: f32,
    tokens: Vec<TokenId>,
    scores: Vec<f32>,
    masked: Vec<usize>,
    trace: Vec<IterationTrace>,
}

/// Iterative mask-predict decoding of every source with `length_beam`
/// candidate lengths and `iterations` refinement passes.
pub fn mask_predict<S: AsRef<[TokenId]>>(
    model: &Model,
    sources: &[S],
    iterations: usize,
    length_beam: usize,
) -> Result<Vec<DecodeResult>> {
    if model.kind != DecoderKind::Nat {
        return Err(Error::invalid("mask_predict requires a non-autoregressive model"));
    }
    if iterations == 0 {
        return Err(Error::invalid("mask_predict: iterations must be >= 1"));
    }
    let max_len = model.config.max_len;
    if length_beam == 0 || length_beam > max_len {
        return Err(Error::invalid(format!(
            "length beam {length_beam} must be in 1..={max_len}"
        )));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let src = encode_batch(sources, max_len)?;
    let mut g = Graph::inference();
    let mut noise = Noise::off();
    let enc = model.encode_in(&mut g, &src, &mut noise)?;
    let len_logits = model.length_logits_in(&mut g, &enc)?;
    let lengths = top_lengths(g.value(len_logits), max_len, length_beam)?;

    let mut hyps: Vec<Hypothesis> = lengths
        .iter()
        .enumerate()
        .flat_map(|(s, cands)| {
            cands.iter().map(move |c| Hypothesis {
                source: s,
                len: c.len,
                length_log_prob: c.log_prob,
                tokens: vec![MASK; c.len],
                scores: vec![0.0; c.len],
                masked: (0..c.len).collect(),
                trace: Vec::with_capacity(iterations),
            })
        })
        .collect();
    let rows: Vec<usize> = hyps.iter().map(|h| h.source).collect();
    let enc = model.select_rows(&mut g, &enc, &rows)?;
    let mark = g.len();
    let vocab = model.config.vocab_size;
    let schedules: Vec<Vec<usize>> = hyps.iter().map(|h| remask_schedule(h.len, iterations)).collect();

    for t in 0..iterations {
        let tgt: Batch = encode_batch(&hyps.iter().map(|h| h.tokens.as_slice()).collect::<Vec<_>>(), max_len)?;
        let logits = model.decode_in(&mut g, &enc, &tgt, &mut noise)?;
        let lv = g.value(logits);
        for (r, h) in hyps.iter_mut().enumerate() {
            let masked = std::mem::take(&mut h.masked);
            for &pos in &masked {
                let i = r * tgt.width + pos;
                let (tok, lp) = best_content(&lv[i * vocab..(i + 1) * vocab]);
                h.tokens[pos] = tok;
                h.scores[pos] = lp;
            }
            let predictions = h.tokens.clone();
            let remask = select_lowest(&h.scores, schedules[r][t]);
            for &pos in &remask {
                h.tokens[pos] = MASK;
            }
            h.trace.push(IterationTrace {
                iteration: t + 1,
                masked,
                predictions,
                scores: h.scores.clone(),
                remasked: remask.clone(),
            });
            h.masked = remask;
        }
        g.truncate(mark);
    }

    let mut out: Vec<DecodeResult> = Vec::with_capacity(sources.len());
    let mut hyps = hyps.into_iter().peekable();
    for s in 0..sources.len() {
        let mut candidates = Vec::with_capacity(length_beam);
        let mut traces = Vec::with_capacity(length_beam);
        let mut token_scores = Vec::with_capacity(length_beam);
        while let Some(h) = hyps.next_if(|h| h.source == s) {
            debug_assert!(h.tokens.iter().all(|&t| t != MASK && t != PAD));
            let mean = h.scores.iter().map(|&x| x as f64).sum::<f64>() / h.len as f64;
            candidates.push(Candidate {
                len: h.len,
                tokens: h.tokens,
                mean_log_prob: mean,
                length_log_prob: h.length_log_prob,
            });
            traces.push(h.trace);
            token_scores.push(h.scores);
        }
        let chosen = choose_candidate(&candidates);
        let per_token_scores = token_scores.swap_remove(chosen);
        out.push(DecodeResult {
            tokens: candidates[chosen].tokens.clone(),
            score: per_token_scores.iter().map(|&x| x as f64).sum(),
            per_token_scores,
            iteration_trace: traces.swap_remove(chosen),
            candidates,
            chosen_index: chosen,
        });
    }
    Ok(out)
}

/// Highest mean log-probability; ties prefer the shorter candidate.
pub fn choose_candidate(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        if c.mean_log_prob > b.mean_log_prob || (c.mean_log_prob == b.mean_log_prob && c.len < b.len) {
            best = i;
        }
    }
    best
}

/// Single parallel pass with the argmax length.
pub fn glat_decode<S: AsRef<[TokenId]>>(model: &Model, sources: &[S]) -> Result<Vec<DecodeResult>> {
    mask_predict(model, sources, 1, 1)
}
