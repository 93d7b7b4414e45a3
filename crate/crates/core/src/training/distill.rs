use std::collections::HashMap;

use crate::data::{ParallelCorpus, TokenId};
use crate::decoding::{at_beam, hypotheses};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model};

/// A corpus whose targets were produced by a teacher.
#[derive(Clone, Debug)]
pub struct Distilled {
    pub corpus: ParallelCorpus,
    /// Sources whose teacher output was empty and kept their raw target.
    pub fallbacks: usize,
}

/// Replaces every target with the teacher's beam output for its source.
/// Repeated sources are decoded once.
pub fn distill_corpus(teacher: &Model, raw: &ParallelCorpus, beam: usize) -> Result<Distilled> {
    if teacher.kind != DecoderKind::At {
        return Err(Error::invalid("distillation needs an autoregressive teacher"));
    }
    if teacher.config.vocab_size != raw.vocab_size() {
        return Err(Error::invalid(format!(
            "teacher vocabulary {} does not match corpus vocabulary {}",
            teacher.config.vocab_size,
            raw.vocab_size()
        )));
    }
    if beam == 0 {
        return Err(Error::invalid("beam must be >= 1"));
    }
    let unique = raw.unique_sources();
    let mut outputs: HashMap<&[TokenId], Vec<TokenId>> = HashMap::with_capacity(unique.len());
    let max_len = teacher.config.max_len.min(raw.max_len());
    for chunk in unique.chunks(128) {
        let out = hypotheses(&at_beam(teacher, chunk, beam, max_len)?);
        outputs.extend(chunk.iter().copied().zip(out));
    }
    let mut fallbacks = 0;
    let targets = raw
        .pairs()
        .iter()
        .map(|p| match &outputs[p.source.as_slice()] {
            t if t.is_empty() => {
                fallbacks += 1;
                p.target.clone()
            }
            t => t.clone(),
        })
        .collect();
    Ok(Distilled {
        corpus: raw.with_targets(targets)?,
        fallbacks,
    })
}
