//! Encoder-decoder transformer with independently sized components.

mod config;
mod layers;
mod lm;
mod transformer;

pub use config::{param_count, ArchConfig, DESK_PRESETS, FULL_PRESETS};
pub use layers::{attention_mask, positions, Noise};
pub use lm::{LmConfig, TinyLm};
pub use transformer::{top_lengths, DecoderKind, Encoded, EncoderOutput, LengthCandidate, Model};

#[cfg(test)]
mod tests;
