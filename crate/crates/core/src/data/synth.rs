//! Synthetic multimodal translation tasks.
//!
//! Every source word maps to a class of `m` synonymous target words, and
//! a source is rendered word by word using variant 0 of each class (the
//! canonical rendering). A quarter of the source words are triggers; a
//! sentence of length `L` holds `max(1, L/4)` of them, at least three
//! positions apart. Rendering `k` treats every trigger alike: a synonym
//! trigger uses variant `k`, and a reorder trigger uses variant `k/2` and
//! swaps places with its right neighbour when `k` is odd. Where the
//! ambiguity lies is visible from the source; which rendering a training
//! pair uses is not.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Pair, ParallelCorpus};
use super::vocab::{TokenId, Vocab, RESERVED};
use crate::error::{Error, Result};

/// Smallest number of synonym classes a task may have.
pub const MIN_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// Number of target content words; split into classes of `modes_per_source`.
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub modes_per_source: usize,
    pub synonym_weight: f64,
    pub reorder_weight: f64,
    /// Training pairs (N); distinct training sources repeat round-robin.
    pub corpus_size: usize,
    pub train_sources: usize,
    pub valid_sources: usize,
    pub test_sources: usize,
    pub no_adjacent_duplicates: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            content_vocab: 64,
            min_len: 4,
            max_len: 10,
            modes_per_source: 4,
            synonym_weight: 0.5,
            reorder_weight: 0.5,
            corpus_size: 8000,
            train_sources: 1000,
            valid_sources: 100,
            test_sources: 100,
            no_adjacent_duplicates: true,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn classes(&self) -> usize {
        self.content_vocab / self.modes_per_source.max(1)
    }

    /// Size of the shared vocabulary: reserved ids, source words, target words.
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.classes() * (1 + self.modes_per_source)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes_per_source == 0 {
            return Err(Error::config("modes_per_source must be >= 1"));
        }
        let need = MIN_CLASSES * self.modes_per_source;
        if self.content_vocab < need {
            return Err(Error::config(format!(
                "content_vocab {} too small for {} modes per source: need at least {need}",
                self.content_vocab, self.modes_per_source
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("length range must satisfy 1 <= min_len <= max_len"));
        }
        let (s, r) = (self.synonym_weight, self.reorder_weight);
        if !(s >= 0.0 && r >= 0.0 && ((s + r) - 1.0).abs() < 1e-9) {
            return Err(Error::config("mechanism weights must be nonnegative and sum to 1"));
        }
        if self.train_sources == 0 || self.corpus_size < self.train_sources {
            return Err(Error::config("need 1 <= train_sources <= corpus_size"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    Synonym,
    Reorder,
}

/// A distinct source with all of its valid renderings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceEntry {
    pub source: Vec<TokenId>,
    /// Trigger positions, ascending, with their mechanisms.
    pub sites: Vec<(usize, Mechanism)>,
    /// `renderings[0]` is canonical.
    pub renderings: Vec<Vec<TokenId>>,
}

impl SourceEntry {
    pub fn has(&self, mechanism: Mechanism) -> bool {
        self.sites.iter().any(|&(_, m)| m == mechanism)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocab,
    /// Source word index → class index.
    pub class_of: Vec<usize>,
    /// Mechanism of each trigger word; other words are unambiguous.
    pub triggers: Vec<(usize, Mechanism)>,
    pub train_entries: Vec<SourceEntry>,
    pub valid_entries: Vec<SourceEntry>,
    pub test_entries: Vec<SourceEntry>,
    /// D_Raw: `corpus_size` pairs, each sampling one rendering.
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

fn source_word(i: usize) -> String {
    format!("s{i}")
}

fn target_word(class: usize, variant: usize) -> String {
    format!("t{class}_{variant}")
}

/// Independent stream of the task seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SOURCES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_HELDOUT: u64 = 2;

/// Source words `0..classes/4` are triggers; the first
/// `round(reorder_weight · count)` of them reorder.
fn trigger_words(spec: &SyntheticTaskSpec) -> Vec<(usize, Mechanism)> {
    let count = spec.classes() / 4;
    let reorder = (spec.reorder_weight * count as f64).round() as usize;
    (0..count)
        .map(|w| {
            (
                w,
                if w < reorder {
                    Mechanism::Reorder
                } else {
                    Mechanism::Synonym
                },
            )
        })
        .collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let m = spec.modes_per_source;
    let classes = spec.classes();
    let mut words: Vec<String> = (0..classes).map(source_word).collect();
    for c in 0..classes {
        words.extend((0..m).map(|k| target_word(c, k)));
    }
    let vocab = Vocab::from_content(words)?;
    let triggers = trigger_words(spec);

    let mut rng = stream(spec.seed, STREAM_SOURCES);
    let mut class_of: Vec<usize> = (0..classes).collect();
    class_of.shuffle(&mut rng);

    let total = spec.train_sources + spec.valid_sources + spec.test_sources;
    let drafts = distinct_sources(spec, &triggers, total, &mut rng)?;
    let target_id = |class: usize, variant: usize| (RESERVED + classes + class * m + variant) as TokenId;
    let mut entries = drafts.into_iter().map(|d| SourceEntry {
        source: d.words.iter().map(|&w| (RESERVED + w) as TokenId).collect(),
        renderings: (0..m)
            .map(|k| {
                render(&d.words, &d.sites, k)
                    .iter()
                    .map(|&(w, v)| target_id(class_of[w], v))
                    .collect()
            })
            .collect(),
        sites: d.sites,
    });
    let train_entries: Vec<SourceEntry> = entries.by_ref().take(spec.train_sources).collect();
    let valid_entries: Vec<SourceEntry> = entries.by_ref().take(spec.valid_sources).collect();
    let test_entries: Vec<SourceEntry> = entries.collect();

    let mut rng = stream(spec.seed, STREAM_TRAIN);
    let mut order: Vec<usize> = (0..spec.corpus_size).map(|i| i % spec.train_sources).collect();
    order.shuffle(&mut rng);
    let pairs = order
        .into_iter()
        .map(|i| sample_pair(&train_entries[i], &mut rng))
        .collect();
    let train = ParallelCorpus::new(pairs, vocab.len(), spec.max_len)?;

    let mut rng = stream(spec.seed, STREAM_HELDOUT);
    let valid = ParallelCorpus::new(
        valid_entries.iter().map(|e| sample_pair(e, &mut rng)).collect(),
        vocab.len(),
        spec.max_len,
    )?;
    let test = ParallelCorpus::new(
        test_entries.iter().map(|e| sample_pair(e, &mut rng)).collect(),
        vocab.len(),
        spec.max_len,
    )?;

    Ok(SyntheticTask {
        spec: spec.clone(),
        vocab,
        class_of,
        triggers,
        train_entries,
        valid_entries,
        test_entries,
        train,
        valid,
        test,
    })
}

fn sample_pair<R: Rng>(entry: &SourceEntry, rng: &mut R) -> Pair {
    let k = rng.gen_range(0..entry.renderings.len());
    Pair {
        source: entry.source.clone(),
        target: entry.renderings[k].clone(),
    }
}

/// Rendering `k` as (source word, variant) per target position.
fn render(words: &[usize], sites: &[(usize, Mechanism)], k: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = words.iter().map(|&w| (w, 0)).collect();
    for &(pos, mechanism) in sites {
        match mechanism {
            Mechanism::Synonym => out[pos].1 = k,
            Mechanism::Reorder => {
                out[pos].1 = k / 2;
                if k % 2 == 1 {
                    out.swap(pos, pos + 1);
                }
            }
        }
    }
    out
}

struct Draft {
    words: Vec<usize>,
    sites: Vec<(usize, Mechanism)>,
}

/// Number of trigger sites in a sentence of `len` words.
fn site_count(len: usize) -> usize {
    (len / 4).max(1)
}

/// Draws `count` distinct sources together with their trigger sites.
fn distinct_sources<R: Rng>(
    spec: &SyntheticTaskSpec,
    triggers: &[(usize, Mechanism)],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Draft>> {
    let plain = triggers.len()..spec.classes();
    let m = spec.modes_per_source;
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let max_attempts = 100 * count + 1000;
    for _ in 0..max_attempts {
        if out.len() == count {
            break;
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut positions = rand::seq::index::sample(rng, len, site_count(len)).into_vec();
        positions.sort_unstable();
        if positions.windows(2).any(|w| w[1] - w[0] < 3) {
            continue;
        }
        let mut sites = Vec::with_capacity(positions.len());
        let mut words = vec![usize::MAX; len];
        for &pos in &positions {
            let (word, mut mechanism) = triggers[rng.gen_range(0..triggers.len())];
            if pos + 1 == len {
                mechanism = Mechanism::Synonym;
            }
            words[pos] = word;
            sites.push((pos, mechanism));
        }
        for i in 0..len {
            if words[i] != usize::MAX {
                continue;
            }
            words[i] = loop {
                let w = rng.gen_range(plain.clone());
                let clash =
                    spec.no_adjacent_duplicates && ((i > 0 && words[i - 1] == w) || (i + 1 < len && words[i + 1] == w));
                if !clash {
                    break w;
                }
            };
        }
        let duplicate_free = (0..m).all(|k| render(&words, &sites, k).windows(2).all(|w| w[0].0 != w[1].0));
        if spec.no_adjacent_duplicates && !duplicate_free {
            continue;
        }
        if seen.insert(words.clone()) {
            out.push(Draft { words, sites });
        }
    }
    if out.len() < count {
        return Err(Error::config(format!(
            "could not draw {count} distinct sources; widen the length range or vocabulary"
        )));
    }
    Ok(out)
}
