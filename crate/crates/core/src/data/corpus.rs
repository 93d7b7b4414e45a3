use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, UNK};
use crate::error::{Error, Result};

/// One aligned sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Aligned source/target sequences over a shared vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<Pair>,
    vocab_size: usize,
    max_len: usize,
}

impl ParallelCorpus {
    /// Validates that every sequence is non-empty, at most `max_len` long,
    /// and uses ids below `vocab_size`.
    pub fn new(pairs: Vec<Pair>, vocab_size: usize, max_len: usize) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            for seq in [&p.source, &p.target] {
                if seq.is_empty() {
                    return Err(Error::invalid(format!("pair {i} has an empty side")));
                }
                if seq.len() > max_len {
                    return Err(Error::SequenceTooLong {
                        index: i,
                        len: seq.len(),
                        max_len,
                    });
                }
                if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                    return Err(Error::invalid(format!(
                        "pair {i} has id {bad} outside vocab of {vocab_size}"
                    )));
                }
            }
        }
        Ok(ParallelCorpus {
            pairs,
            vocab_size,
            max_len,
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Number of pairs (N).
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sources(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Same sources in the same order with targets replaced.
    pub fn with_targets(&self, targets: Vec<Vec<TokenId>>) -> Result<Self> {
        if targets.len() != self.pairs.len() {
            return Err(Error::invalid(format!(
                "with_targets: {} targets for {} pairs",
                targets.len(),
                self.pairs.len()
            )));
        }
        let pairs = self
            .pairs
            .iter()
            .zip(targets)
            .map(|(p, target)| Pair {
                source: p.source.clone(),
                target,
            })
            .collect();
        Self::new(pairs, self.vocab_size, self.max_len)
    }

    /// Distinct sources in order of first appearance.
    pub fn unique_sources(&self) -> Vec<&[TokenId]> {
        let mut seen = HashSet::new();
        self.sources().filter(|s| seen.insert(*s)).collect()
    }
}

/// Distinct targets per distinct source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCount {
    pub mean: f64,
    /// distinct-target count → number of sources with that count
    pub histogram: BTreeMap<usize, usize>,
    pub sources: usize,
}

/// Groups pairs by exact source sequence and counts distinct targets.
pub fn count_modes(corpus: &ParallelCorpus) -> ModeCount {
    let mut groups: HashMap<&[TokenId], HashSet<&[TokenId]>> = HashMap::new();
    for p in corpus.pairs() {
        groups.entry(&p.source).or_default().insert(&p.target);
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for targets in groups.values() {
        *histogram.entry(targets.len()).or_insert(0) += 1;
        total += targets.len();
    }
    let mean = if groups.is_empty() {
        0.0
    } else {
        total as f64 / groups.len() as f64
    };
    ModeCount {
        mean,
        histogram,
        sources: groups.len(),
    }
}

/// Writes one `source<TAB>target` line per pair, tokens space-separated.
pub fn save_corpus(corpus: &ParallelCorpus, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in corpus.pairs() {
        writeln!(
            f,
            "{}\t{}",
            vocab.decode(&p.source).join(" "),
            vocab.decode(&p.target).join(" ")
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCorpus {
    pub corpus: ParallelCorpus,
    /// Tokens absent from the vocabulary, mapped to `<unk>`.
    pub unk_count: usize,
}

pub fn load_corpus(path: &Path, vocab: &Vocab, max_len: usize) -> Result<LoadedCorpus> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pairs = Vec::new();
    let mut unk_count = 0;
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "missing tab separator".into()))?;
        if tgt.contains('\t') {
            return Err(parse_err(lineno, "more than one tab".into()));
        }
        let mut side = |text: &str, name: &str| -> Result<Vec<TokenId>> {
            let ids: Vec<TokenId> = text
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    vocab.id(t).unwrap_or_else(|| {
                        unk_count += 1;
                        UNK
                    })
                })
                .collect();
            if ids.is_empty() {
                return Err(parse_err(lineno, format!("empty {name}")));
            }
            if ids.len() > max_len {
                return Err(parse_err(
                    lineno,
                    format!("{name} has {} tokens, max_len is {max_len}", ids.len()),
                ));
            }
            Ok(ids)
        };
        let source = side(src, "source")?;
        let target = side(tgt, "target")?;
        pairs.push(Pair { source, target });
    }
    Ok(LoadedCorpus {
        corpus: ParallelCorpus::new(pairs, vocab.len(), max_len)?,
        unk_count,
    })
}
