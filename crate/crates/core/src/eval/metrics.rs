use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{TokenId, UNK};
use crate::error::{Error, Result};

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::invalid(format!("{hyps} hypotheses but {refs} references")));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 (0..100) with brevity penalty. An order with no clipped
/// matches contributes `1 / (total + 1)` instead of zero.
pub fn corpus_bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    if let Some(i) = refs.iter().position(|r| r.as_ref().is_empty()) {
        return Err(Error::invalid(format!("reference {i} is empty")));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let p = if matches[i] > 0 {
                matches[i] as f64 / totals[i] as f64
            } else {
                1.0 / (totals[i] as f64 + 1.0)
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (log_p + bp).exp())
}

/// Fraction of tokens equal to their predecessor, over the whole corpus.
pub fn repetition_ratio<T: PartialEq, H: AsRef<[T]>>(hyps: &[H]) -> f64 {
    let (mut repeats, mut total) = (0usize, 0usize);
    for h in hyps {
        let h = h.as_ref();
        total += h.len();
        repeats += h.windows(2).filter(|w| w[0] == w[1]).count();
    }
    if total == 0 {
        0.0
    } else {
        repeats as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAccuracy {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl WordAccuracy {
    fn from_counts(matched: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, hyp_total);
        let recall = ratio(matched, ref_total);
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        WordAccuracy { precision, recall, f }
    }
}

fn bag<T: Eq + Hash>(s: &[T]) -> HashMap<&T, usize> {
    let mut m = HashMap::new();
    for t in s {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Micro-averaged word F-measure; per sentence each word type matches
/// `min(hyp count, ref count)` times.
pub fn word_accuracy<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<WordAccuracy> {
    check_lengths(hyps.len(), refs.len())?;
    let (mut matched, mut hyp_total, mut ref_total) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_total += h.len();
        ref_total += r.len();
        let rb = bag(r);
        matched += bag(h)
            .iter()
            .map(|(w, &c)| c.min(rb.get(w).copied().unwrap_or(0)))
            .sum::<usize>();
    }
    Ok(WordAccuracy::from_counts(matched, hyp_total, ref_total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    /// Inclusive reference-frequency range of the words in this bucket.
    pub min_freq: usize,
    pub max_freq: Option<usize>,
    pub accuracy: WordAccuracy,
}

/// Word accuracy split by how often each word occurs in the references.
pub fn word_accuracy_by_frequency<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    hyps: &[H],
    refs: &[R],
    edges: &[usize],
) -> Result<Vec<FrequencyBucket>> {
    check_lengths(hyps.len(), refs.len())?;
    let mut freq: HashMap<&T, usize> = HashMap::new();
    for r in refs {
        for t in r.as_ref() {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let bucket_of = |w: &T| {
        let f = freq.get(w).copied().unwrap_or(0);
        edges.iter().take_while(|&&e| f >= e).count()
    };
    let n = edges.len() + 1;
    let (mut matched, mut ht, mut rt) = (vec![0; n], vec![0; n], vec![0; n]);
    for (h, r) in hyps.iter().zip(refs) {
        let (hb, rb) = (bag(h.as_ref()), bag(r.as_ref()));
        for (w, &c) in &hb {
            let b = bucket_of(w);
            ht[b] += c;
            matched[b] += c.min(rb.get(w).copied().unwrap_or(0));
        }
        for (w, &c) in &rb {
            rt[bucket_of(w)] += c;
        }
    }
    Ok((0..n)
        .map(|b| FrequencyBucket {
            min_freq: if b == 0 { 0 } else { edges[b - 1] },
            max_freq: edges.get(b).map(|e| e - 1),
            accuracy: WordAccuracy::from_counts(matched[b], ht[b], rt[b]),
        })
        .collect())
}

/// Anything that assigns per-token log-probabilities (EOS included) to
/// sentences.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn token_log_probs(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>>;
}

impl TokenScorer for crate::model::TinyLm {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn token_log_probs(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(256) {
            out.extend(crate::model::TinyLm::token_log_probs(self, chunk)?);
        }
        Ok(out)
    }
}

/// Uniform distribution over a vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct UniformLm {
    pub vocab_size: usize,
}

impl TokenScorer for UniformLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn token_log_probs(&self, sentences: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let lp = -(self.vocab_size as f64).ln();
        Ok(sentences.iter().map(|s| vec![lp; s.len() + 1]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    /// Scored tokens, one EOS per sentence included.
    pub tokens: usize,
    /// Tokens outside the scorer's vocabulary (scored as `<unk>`).
    pub unk_count: usize,
}

pub fn lm_perplexity<S: TokenScorer + ?Sized>(scorer: &S, hyps: &[Vec<TokenId>]) -> Result<Perplexity> {
    if hyps.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let v = scorer.vocab_size();
    let unk_count = hyps.iter().flatten().filter(|&&t| t as usize >= v || t == UNK).count();
    let lps = scorer.token_log_probs(hyps)?;
    let (mut nll, mut tokens) = (0.0f64, 0usize);
    for lp in &lps {
        nll -= lp.iter().sum::<f64>();
        tokens += lp.len();
    }
    Ok(Perplexity {
        perplexity: (nll / tokens as f64).exp().max(1.0),
        tokens,
        unk_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identical_is_100() {
        let r = vec![w("a b c d e"), w("f g h i")];
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_empty_hyps_is_0() {
        let h: Vec<Vec<&str>> = vec![vec![], vec![]];
        let r = vec![w("a b"), w("c")];
        assert_eq!(corpus_bleu(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_example() {
        // unigram 1/3 (clipped), bigram 0 of 2 → 1/3, trigram 0 of 1 → 1/2,
        // no 4-grams → 1/1; hypothesis longer than reference → no penalty
        let got = corpus_bleu(&[w("the the the")], &[w("the cat")]).unwrap();
        let expected = 100.0 * (1.0f64 / 3.0 * 1.0 / 3.0 * 1.0 / 2.0 * 1.0).powf(0.25);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn bleu_rejects_empty_reference() {
        let err = corpus_bleu(&[w("a"), w("b")], &[w("a"), vec![]]).unwrap_err();
        assert!(err.to_string().contains("reference 1"));
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_ratio(&[w("a b c")]), 0.0);
        assert_eq!(repetition_ratio(&[w("a a b b")]), 0.5);
        assert_eq!(repetition_ratio::<&str, Vec<&str>>(&[]), 0.0);
    }

    #[test]
    fn word_accuracy_examples() {
        let same = vec![w("a b c")];
        assert_eq!(word_accuracy(&same, &same).unwrap().f, 1.0);
        assert_eq!(word_accuracy(&[w("a b")], &[w("c d")]).unwrap().f, 0.0);
        let wa = word_accuracy(&[w("a b")], &[w("a c")]).unwrap();
        assert_eq!((wa.precision, wa.recall, wa.f), (0.5, 0.5, 0.5));
    }

    #[test]
    fn frequency_buckets_partition_counts() {
        let h = vec![w("a a b c"), w("d")];
        let r = vec![w("a b b"), w("a e")];
        let buckets = word_accuracy_by_frequency(&h, &r, &[2]).unwrap();
        assert_eq!(buckets.len(), 2);
        // a, b occur twice in the references; c, d, e at most once
        assert_eq!(buckets[1].accuracy.precision, 2.0 / 3.0);
        assert_eq!(buckets[0].accuracy.precision, 0.0);
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let lm = UniformLm { vocab_size: 50 };
        let p = lm_perplexity(&lm, &[vec![5, 6, 7], vec![8]]).unwrap();
        assert!((p.perplexity - 50.0).abs() < 1e-9);
        assert_eq!(p.tokens, 6);
    }

    #[test]
    fn out_of_vocab_tokens_counted() {
        let lm = UniformLm { vocab_size: 10 };
        let p = lm_perplexity(&lm, &[vec![5, 60, 70]]).unwrap();
        assert_eq!(p.unk_count, 2);
    }
}
