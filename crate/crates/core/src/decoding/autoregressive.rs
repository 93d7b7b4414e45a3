use std::cmp::Ordering;

use crate::compute::{kernels, Graph};
use crate::data::{encode_batch, TokenId, BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Encoded, Model, Noise};

use super::{Candidate, DecodeResult};

/// Next-token scoring for left-to-right search over one source.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities of the next token after each prefix.
    fn next_log_probs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>>;
}

/// Tokens an autoregressive decoder may emit: content words and EOS.
pub fn emittable(id: usize) -> bool {
    id >= RESERVED || id == EOS as usize
}

fn check_at(model: &Model) -> Result<()> {
    if model.kind != DecoderKind::At {
        return Err(Error::invalid("autoregressive decoding requires an AT model"));
    }
    Ok(())
}

/// Encoded sources held in an inference graph for repeated decoder calls.
pub struct AtSession<'m> {
    model: &'m Model,
    graph: Graph,
    enc: Encoded,
    mark: usize,
}

impl<'m> AtSession<'m> {
    pub fn new<S: AsRef<[TokenId]>>(model: &'m Model, sources: &[S]) -> Result<Self> {
        check_at(model)?;
        let src = encode_batch(sources, model.config.max_len)?;
        let mut graph = Graph::inference();
        let enc = model.encode_in(&mut graph, &src, &mut Noise::off())?;
        let mark = graph.len();
        Ok(AtSession {
            model,
            graph,
            enc,
            mark,
        })
    }

    /// Log-softmax of the next token after `prefix` for source `rows[i]`.
    pub fn step(&mut self, rows: &[usize], prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>> {
        let inputs: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let tgt = encode_batch(&inputs, usize::MAX)?;
        let g = &mut self.graph;
        let enc = self.model.select_rows(g, &self.enc, rows)?;
        let logits = self.model.decode_in(g, &enc, &tgt, &mut Noise::off())?;
        let v = self.model.config.vocab_size;
        let lv = g.value(logits);
        let out = inputs
            .iter()
            .enumerate()
            .map(|(r, inp)| {
                let i = r * tgt.width + inp.len() - 1;
                let row = &lv[i * v..(i + 1) * v];
                let lse = kernels::log_sum_exp(row);
                row.iter().map(|&x| x - lse).collect()
            })
            .collect();
        g.truncate(self.mark);
        Ok(out)
    }
}

/// One source of an [`AtSession`] viewed as a [`StepModel`].
pub struct SessionStep<'s, 'm> {
    pub session: &'s mut AtSession<'m>,
    pub row: usize,
}

impl StepModel for SessionStep<'_, '_> {
    fn vocab_size(&self) -> usize {
        self.session.model.config.vocab_size
    }

    fn next_log_probs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f32>>> {
        let rows = vec![self.row; prefixes.len()];
        self.session.step(&rows, prefixes)
    }
}

fn argmax_emittable(lp: &[f32]) -> (TokenId, f32) {
    let mut best = EOS as usize;
    for i in RESERVED..lp.len() {
        if lp[i] > lp[best] || (lp[i] == lp[best] && i < best) {
            best = i;
        }
    }
    (best as TokenId, lp[best])
}

/// `scored` counts committed steps, EOS included when it was emitted.
fn single(tokens: Vec<TokenId>, per_token_scores: Vec<f32>, score: f64, scored: usize) -> DecodeResult {
    let candidate = Candidate {
        len: tokens.len(),
        tokens: tokens.clone(),
        mean_log_prob: if scored == 0 { 0.0 } else { score / scored as f64 },
        length_log_prob: 0.0,
    };
    DecodeResult {
        tokens,
        per_token_scores,
        score,
        iteration_trace: Vec::new(),
        candidates: vec![candidate],
        chosen_index: 0,
    }
}

/// Batched greedy decoding: argmax from BOS until EOS or `max_len` tokens.
/// `score` sums every committed log-probability, EOS included.
pub fn at_greedy<S: AsRef<[TokenId]>>(model: &Model, sources: &[S], max_len: usize) -> Result<Vec<DecodeResult>> {
    check_at(model)?;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = AtSession::new(model, sources)?;
    let n = sources.len();
    let mut tokens: Vec<Vec<TokenId>> = vec![Vec::new(); n];
    let mut scores: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut total = vec![0.0f64; n];
    let mut ended = vec![false; n];
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<&[TokenId]> = active.iter().map(|&r| tokens[r].as_slice()).collect();
        let lps = session.step(&active, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (&r, lp) in active.iter().zip(&lps) {
            let (tok, s) = argmax_emittable(lp);
            total[r] += s as f64;
            if tok == EOS {
                ended[r] = true;
                continue;
            }
            tokens[r].push(tok);
            scores[r].push(s);
            still.push(r);
        }
        active = still;
    }
    Ok(tokens
        .into_iter()
        .zip(scores)
        .zip(total)
        .zip(ended)
        .map(|(((t, s), total), ended)| {
            let scored = t.len() + usize::from(ended);
            single(t, s, total, scored)
        })
        .collect())
}

#[derive(Clone, Debug)]
struct BeamHyp {
    tokens: Vec<TokenId>,
    scores: Vec<f32>,
    total: f64,
    finished: bool,
}

impl BeamHyp {
    /// Length-normalized score; EOS counts as a token.
    fn normalized(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        if n == 0 {
            0.0
        } else {
            self.total / n as f64
        }
    }
}

/// Length-normalized beam search over a single source.
pub fn beam_search<M: StepModel>(model: &mut M, beam: usize, max_len: usize) -> Result<DecodeResult> {
    if beam == 0 {
        return Err(Error::invalid("beam must be >= 1"));
    }
    let v = model.vocab_size();
    let mut alive = vec![BeamHyp {
        tokens: Vec::new(),
        scores: Vec::new(),
        total: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHyp> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let prefixes: Vec<&[TokenId]> = alive.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = model.next_log_probs(&prefixes)?;
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * v);
        for (h, lp) in lps.iter().enumerate() {
            for (tok, &s) in lp.iter().enumerate().filter(|(t, _)| emittable(*t)) {
                expansions.push((alive[h].total + s as f64, h, tok));
            }
        }
        // Ties: earlier hypothesis, then EOS before content, then lower id.
        let rank = |t: usize| if t == EOS as usize { 0 } else { t };
        expansions.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(rank(a.2).cmp(&rank(b.2)))
        });
        let mut next = Vec::with_capacity(beam);
        for &(total, h, tok) in expansions.iter().take(beam) {
            let parent = &alive[h];
            let s = lps[h][tok];
            if tok == EOS as usize {
                finished.push(BeamHyp {
                    tokens: parent.tokens.clone(),
                    scores: parent.scores.clone(),
                    total,
                    finished: true,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok as TokenId);
                let mut scores = parent.scores.clone();
                scores.push(s);
                next.push(BeamHyp {
                    tokens,
                    scores,
                    total,
                    finished: false,
                });
            }
        }
        alive = next;
    }
    finished.extend(alive);
    let candidates: Vec<Candidate> = finished
        .iter()
        .map(|h| Candidate {
            len: h.tokens.len(),
            tokens: h.tokens.clone(),
            mean_log_prob: h.normalized(),
            length_log_prob: 0.0,
        })
        .collect();
    let chosen = candidates
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.mean_log_prob
                .partial_cmp(&b.mean_log_prob)
                .unwrap_or(Ordering::Equal)
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .expect("beam search keeps at least one hypothesis");
    let h = finished.swap_remove(chosen);
    Ok(DecodeResult {
        tokens: h.tokens,
        per_token_scores: h.scores,
        score: h.total,
        iteration_trace: Vec::new(),
        candidates,
        chosen_index: chosen,
    })
}

/// Beam search for every source; `beam == 1` is greedy decoding.
pub fn at_beam<S: AsRef<[TokenId]>>(
    model: &Model,
    sources: &[S],
    beam: usize,
    max_len: usize,
) -> Result<Vec<DecodeResult>> {
    check_at(model)?;
    if beam == 1 {
        return at_greedy(model, sources, max_len);
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut session = AtSession::new(model, sources)?;
    (0..sources.len())
        .map(|row| {
            beam_search(
                &mut SessionStep {
                    session: &mut session,
                    row,
                },
                beam,
                max_len,
            )
        })
        .collect()
}
