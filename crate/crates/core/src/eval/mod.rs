//! Translation quality and weakness metrics, and linguistic probes.

mod metrics;
mod probe;
mod report;

pub use metrics::{
    corpus_bleu, lm_perplexity, repetition_ratio, word_accuracy, word_accuracy_by_frequency, FrequencyBucket,
    Perplexity, TokenScorer, UniformLm, WordAccuracy,
};
pub use probe::{
    length_bucket, permute_labels, pooled_encoder_states, run_probe, selen_examples, wc_examples, ProbeConfig,
    ProbeExample, ProbeReport, ProbeTask, MIN_PROBE_EXAMPLES, SELEN_BUCKETS,
};
pub use report::{read_records, write_records, MetricsReport};
