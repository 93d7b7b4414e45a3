use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::compute::{optimizer_step, AdamState, Graph};
use crate::data::{Pair, TokenId};
use crate::error::{Error, Result};
use crate::model::{Noise, TinyLm};

/// Trains the scoring LM on target sentences with the step count,
/// batch budget, schedule, and seed of `cfg`.
pub fn train_lm(mut lm: TinyLm, sentences: &[Vec<TokenId>], cfg: &TrainConfig) -> Result<TinyLm> {
    if sentences.is_empty() {
        return Err(Error::invalid("no sentences to train the LM on"));
    }
    let max_len = lm.config.max_len;
    let usable: Vec<Pair> = sentences
        .iter()
        .filter(|s| !s.is_empty() && s.len() <= max_len)
        .map(|s| Pair {
            source: Vec::new(),
            target: s.clone(),
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("every LM sentence is empty or too long"));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut adam = AdamState::for_params(&lm.params);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    lm.params.zero_grad();
    for step in 1..=cfg.steps {
        if queue.is_empty() {
            queue = super::token_batches(&usable, cfg.tokens_per_batch, &mut batch_rng);
            queue.reverse();
        }
        let rows: Vec<&[TokenId]> = queue
            .pop()
            .unwrap_or_default()
            .into_iter()
            .map(|i| usable[i].target.as_slice())
            .collect();
        let (inputs, targets) = lm.shifted(&rows)?;
        let weights: Vec<f32> = inputs.mask.iter().map(|&m| f32::from(u8::from(m))).collect();
        let mut g = Graph::new();
        let logits = lm.logits_in(&mut g, &inputs, &mut Noise::off())?;
        let loss = g.cross_entropy(logits, &targets, &weights, 0.0)?;
        g.backward(loss)?.accumulate_into(&mut lm.params)?;
        lm.params.ensure_grads();
        optimizer_step(&mut lm.params, &mut adam, cfg.learning_rate(step), cfg.adam)?;
        lm.params.zero_grad();
    }
    Ok(lm)
}
