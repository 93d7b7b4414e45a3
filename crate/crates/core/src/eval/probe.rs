//! Linear probes over frozen encoder representations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{optimizer_step, AdamConfig, AdamState, Graph, ParameterSet, Tensor};
use crate::data::{encode_batch, TokenId};
use crate::error::{Error, Result};
use crate::model::Model;

/// Fewest labeled examples a probe accepts.
pub const MIN_PROBE_EXAMPLES: usize = 100;
/// Number of equal-width length buckets.
pub const SELEN_BUCKETS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeTask {
    /// Sentence length bucket.
    SeLen,
    /// Whether a candidate word occurs in the sentence.
    Wc,
}

impl ProbeTask {
    pub fn classes(self) -> usize {
        match self {
            ProbeTask::SeLen => SELEN_BUCKETS,
            ProbeTask::Wc => 2,
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.classes() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub sentence: Vec<TokenId>,
    /// Required for WC, ignored for SeLen.
    pub candidate: Option<TokenId>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    /// Held-out accuracy.
    pub accuracy: f64,
    pub chance: f64,
    pub representation: String,
    pub train_examples: usize,
    pub test_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Fraction of examples held out for scoring.
    pub test_fraction: f64,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            test_fraction: 0.2,
            steps: 300,
            lr: 0.02,
            seed: 1,
        }
    }
}

/// Bucket of `len` among five equal-width bins over `[min_len, max_len]`.
pub fn length_bucket(len: usize, min_len: usize, max_len: usize) -> usize {
    if max_len <= min_len {
        return 0;
    }
    let frac = (len.clamp(min_len, max_len) - min_len) as f64 / (max_len - min_len) as f64;
    ((frac * SELEN_BUCKETS as f64) as usize).min(SELEN_BUCKETS - 1)
}

/// SeLen examples for every sentence.
pub fn selen_examples<S: AsRef<[TokenId]>>(sentences: &[S], min_len: usize, max_len: usize) -> Vec<ProbeExample> {
    sentences
        .iter()
        .map(|s| ProbeExample {
            sentence: s.as_ref().to_vec(),
            candidate: None,
            label: length_bucket(s.as_ref().len(), min_len, max_len),
        })
        .collect()
}

/// Two WC examples per sentence: a word it contains (label 1) and a word
/// from `words` it does not (label 0). Sentences covering every word
/// are skipped.
pub fn wc_examples<S: AsRef<[TokenId]>>(sentences: &[S], words: &[TokenId], seed: u64) -> Vec<ProbeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * sentences.len());
    for s in sentences {
        let s = s.as_ref();
        let absent: Vec<TokenId> = words.iter().copied().filter(|w| !s.contains(w)).collect();
        let (Some(&present), Some(&missing)) = (s.choose(&mut rng), absent.choose(&mut rng)) else {
            continue;
        };
        out.push(ProbeExample {
            sentence: s.to_vec(),
            candidate: Some(present),
            label: 1,
        });
        out.push(ProbeExample {
            sentence: s.to_vec(),
            candidate: Some(missing),
            label: 0,
        });
    }
    out
}

/// Mean of the final encoder states over real tokens, one row per sentence.
pub fn pooled_encoder_states<S: AsRef<[TokenId]>>(model: &Model, sentences: &[S]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(128) {
        let batch = encode_batch(chunk, model.config.max_len)?;
        let enc = model.encode(&batch)?;
        let (t, d) = (batch.width, model.config.enc_dim);
        let states = enc.states.values();
        for r in 0..batch.rows {
            let mut pool = vec![0.0f32; d];
            let mut n = 0;
            for p in (0..t).filter(|&p| batch.mask[r * t + p]) {
                pool.iter_mut()
                    .zip(&states[(r * t + p) * d..][..d])
                    .for_each(|(a, &x)| *a += x);
                n += 1;
            }
            pool.iter_mut().for_each(|a| *a /= n.max(1) as f32);
            out.push(pool);
        }
    }
    Ok(out)
}

fn features(model: &Model, task: ProbeTask, examples: &[ProbeExample]) -> Result<Vec<Vec<f32>>> {
    let sentences: Vec<&[TokenId]> = examples.iter().map(|e| e.sentence.as_slice()).collect();
    let pooled = pooled_encoder_states(model, &sentences)?;
    if task == ProbeTask::SeLen {
        return Ok(pooled);
    }
    let table = model.source_embeddings()?;
    let d = table.shape()[1];
    examples
        .iter()
        .zip(pooled)
        .enumerate()
        .map(|(i, (e, pool))| {
            let c = e
                .candidate
                .ok_or_else(|| Error::invalid(format!("WC example {i} has no candidate word")))?
                as usize;
            if c >= model.config.vocab_size {
                return Err(Error::invalid(format!("WC candidate {c} outside the vocabulary")));
            }
            let emb = &table.values()[c * d..(c + 1) * d];
            let mut f = pool.clone();
            f.extend_from_slice(emb);
            f.extend(pool.iter().zip(emb).map(|(a, b)| a * b));
            Ok(f)
        })
        .collect()
}

/// Single linear layer trained with full-batch Adam on standardized
/// features. Returns held-out accuracy.
fn fit_linear(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let dim = train_x[0].len();
    let n = train_x.len() as f32;
    let mean: Vec<f32> = (0..dim)
        .map(|j| train_x.iter().map(|x| x[j]).sum::<f32>() / n)
        .collect();
    let std: Vec<f32> = (0..dim)
        .map(|j| {
            let v = train_x.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f32>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    let standardize = |xs: &[Vec<f32>]| -> Vec<f32> {
        xs.iter()
            .flat_map(|x| x.iter().enumerate().map(|(j, &v)| (v - mean[j]) / std[j]))
            .collect()
    };
    let xtr = standardize(train_x);
    let xte = standardize(test_x);
    let targets: Vec<u32> = train_y.iter().map(|&y| y as u32).collect();
    let weights = vec![1.0f32; train_y.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParameterSet::new(cfg.seed);
    let bound = 1.0 / (dim as f32).sqrt();
    params.insert("probe.w", Tensor::uniform(&[dim, classes], bound, &mut rng))?;
    params.insert("probe.b", Tensor::zeros(&[classes]))?;
    let mut adam = AdamState::for_params(&params);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.constant(vec![train_y.len(), dim], xtr.clone())?;
        let w = g.param(&params, "probe.w")?;
        let b = g.param(&params, "probe.b")?;
        let logits = g.linear(x, w, Some(b))?;
        let loss = g.cross_entropy(logits, &targets, &weights, 0.0)?;
        g.backward(loss)?.accumulate_into(&mut params)?;
        optimizer_step(&mut params, &mut adam, cfg.lr, AdamConfig::default())?;
        params.zero_grad();
    }
    let w = params.get("probe.w")?.values();
    let b = params.get("probe.b")?.values();
    let correct = xte
        .chunks(dim)
        .zip(test_y)
        .filter(|(x, &y)| {
            let scores: Vec<f32> = (0..classes)
                .map(|c| b[c] + x.iter().enumerate().map(|(j, &v)| v * w[j * classes + c]).sum::<f32>())
                .collect();
            let best = (0..classes).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
            best == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// Trains a linear probe on frozen encoder features and scores it on a
/// held-out split.
pub fn run_probe(model: &Model, task: ProbeTask, examples: &[ProbeExample], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if examples.len() < MIN_PROBE_EXAMPLES {
        return Err(Error::invalid(format!(
            "probe needs at least {MIN_PROBE_EXAMPLES} examples, got {}",
            examples.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || cfg.test_fraction == 0.0 {
        return Err(Error::config("probe test_fraction must be in (0, 1)"));
    }
    let classes = task.classes();
    if let Some(i) = examples.iter().position(|e| e.label >= classes) {
        return Err(Error::invalid(format!(
            "probe example {i} has label outside 0..{classes}"
        )));
    }
    let feats = features(model, task, examples)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let test_len = ((examples.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, examples.len() - 1);
    let (test_idx, train_idx) = order.split_at(test_len);
    let pick = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
        idx.iter().map(|&i| (feats[i].clone(), examples[i].label)).unzip()
    };
    let (train_x, train_y) = pick(train_idx);
    let (test_x, test_y) = pick(test_idx);
    let accuracy = fit_linear(&train_x, &train_y, &test_x, &test_y, classes, cfg)?;
    let representation = match task {
        ProbeTask::SeLen => "final encoder layer, mean pooled",
        ProbeTask::Wc => "final encoder layer, mean pooled, with candidate embedding and their product",
    };
    Ok(ProbeReport {
        task,
        accuracy,
        chance: task.chance(),
        representation: representation.to_string(),
        train_examples: train_y.len(),
        test_examples: test_y.len(),
    })
}

/// Shuffles labels among examples, destroying any signal.
pub fn permute_labels(examples: &[ProbeExample], seed: u64) -> Vec<ProbeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut rng);
    examples
        .iter()
        .zip(labels)
        .map(|(e, label)| ProbeExample { label, ..e.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::data::RESERVED;
    use crate::model::{ArchConfig, DecoderKind};

    const V: usize = 40;
    const MAX: usize = 12;

    fn sentences(n: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..=MAX);
                (0..len).map(|_| rng.gen_range(RESERVED..V) as TokenId).collect()
            })
            .collect()
    }

    fn encoder() -> Model {
        Model::init(ArchConfig::preset("base", V, MAX).unwrap(), DecoderKind::Nat, 3).unwrap()
    }

    #[test]
    fn buckets_span_the_range() {
        assert_eq!(length_bucket(2, 2, 12), 0);
        assert_eq!(length_bucket(12, 2, 12), 4);
        assert_eq!(length_bucket(7, 2, 12), 2);
        assert_eq!(length_bucket(5, 5, 5), 0);
    }

    #[test]
    fn wc_examples_are_balanced_and_correct() {
        let words: Vec<TokenId> = (RESERVED as TokenId..V as TokenId).collect();
        let ex = wc_examples(&sentences(50, 1), &words, 2);
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), ex.len() / 2);
        for e in &ex {
            let c = e.candidate.unwrap();
            assert_eq!(e.sentence.contains(&c), e.label == 1);
        }
    }

    #[test]
    fn too_few_examples_rejected() {
        let ex = selen_examples(&sentences(99, 1), 2, MAX);
        assert!(run_probe(&encoder(), ProbeTask::SeLen, &ex, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn wc_without_candidate_rejected() {
        let ex = selen_examples(&sentences(120, 1), 2, MAX);
        assert!(run_probe(&encoder(), ProbeTask::Wc, &ex, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn permuted_labels_stay_near_chance() {
        let m = encoder();
        let ex = permute_labels(&selen_examples(&sentences(500, 4), 2, MAX), 9);
        let r = run_probe(&m, ProbeTask::SeLen, &ex, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - r.chance).abs() < 0.1, "{}", r.accuracy);
    }

    #[test]
    fn length_is_linearly_recoverable() {
        let m = encoder();
        let ex = selen_examples(&sentences(500, 4), 2, MAX);
        let r = run_probe(&m, ProbeTask::SeLen, &ex, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_examples, 100);
        assert!(r.accuracy > r.chance + 0.2, "{}", r.accuracy);
    }

    #[test]
    fn probe_is_deterministic() {
        let m = encoder();
        let words: Vec<TokenId> = (RESERVED as TokenId..V as TokenId).collect();
        let ex = wc_examples(&sentences(200, 5), &words, 1);
        let a = run_probe(&m, ProbeTask::Wc, &ex, &ProbeConfig::default()).unwrap();
        let b = run_probe(&m, ProbeTask::Wc, &ex, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
