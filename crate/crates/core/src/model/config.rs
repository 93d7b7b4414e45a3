use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::error::{Error, Result};

/// Per-component shape of an encoder-decoder transformer. Presets are
/// written `(enc_layers×enc_dim, dec_layers×dec_dim)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub enc_ffn: usize,
    pub dec_ffn: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f32,
}

/// Desk-scale preset names accepted by [`ArchConfig::preset`].
pub const DESK_PRESETS: &[&str] = &["base", "big", "deep", "cone", "enc-wide", "dec-wide", "enc-deep-wide"];

/// Full-size shapes, used for parameter-count comparisons only.
pub const FULL_PRESETS: &[&str] = &["full-base", "full-big", "full-deep", "full-cone"];

impl ArchConfig {
    /// Symmetric-or-not config with FFN = 4×width.
    pub fn shaped(
        (enc_layers, enc_dim): (usize, usize),
        (dec_layers, dec_dim): (usize, usize),
        heads: usize,
        vocab_size: usize,
        max_len: usize,
    ) -> Self {
        ArchConfig {
            enc_layers,
            dec_layers,
            enc_dim,
            dec_dim,
            enc_ffn: 4 * enc_dim,
            dec_ffn: 4 * dec_dim,
            enc_heads: heads,
            dec_heads: heads,
            vocab_size,
            max_len,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str, vocab_size: usize, max_len: usize) -> Result<Self> {
        let (enc, dec, heads) = match name {
            "base" => ((2, 64), (2, 64), 4),
            "big" => ((2, 128), (2, 128), 4),
            "deep" => ((8, 64), (8, 64), 4),
            "cone" => ((4, 128), (1, 32), 4),
            "enc-wide" => ((2, 128), (2, 64), 4),
            "dec-wide" => ((2, 64), (2, 128), 4),
            "enc-deep-wide" => ((4, 128), (2, 64), 4),
            "full-base" => ((6, 512), (6, 512), 8),
            "full-big" => ((6, 1024), (6, 1024), 16),
            "full-deep" => ((24, 512), (24, 512), 8),
            "full-cone" => ((12, 1024), (3, 256), 8),
            other => {
                return Err(Error::config(format!("unknown preset `{other}`")));
            }
        };
        let c = Self::shaped(enc, dec, heads, vocab_size, max_len);
        c.validate()?;
        Ok(c)
    }

    pub fn with_dropout(mut self, rate: f32) -> Self {
        self.dropout = rate;
        self
    }

    pub fn has_bridge(&self) -> bool {
        self.enc_dim != self.dec_dim
    }

    pub fn shares_embedding(&self) -> bool {
        !self.has_bridge()
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 9] = [
            (self.enc_layers >= 1, "enc_layers must be >= 1"),
            (self.dec_layers >= 1, "dec_layers must be >= 1"),
            (self.enc_dim >= 1 && self.dec_dim >= 1, "widths must be >= 1"),
            (self.enc_ffn >= 1 && self.dec_ffn >= 1, "ffn widths must be >= 1"),
            (
                self.enc_heads >= 1 && self.enc_dim.is_multiple_of(self.enc_heads),
                "enc_dim must be divisible by enc_heads",
            ),
            (
                self.dec_heads >= 1 && self.dec_dim.is_multiple_of(self.dec_heads),
                "dec_dim must be divisible by dec_heads",
            ),
            (self.vocab_size > RESERVED, "vocab_size must exceed the reserved ids"),
            (self.max_len >= 1, "max_len must be >= 1"),
            ((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }
}

fn attention_params(d: usize) -> usize {
    4 * (d * d + d)
}

fn ffn_params(d: usize, f: usize) -> usize {
    2 * d * f + f + d
}

/// Exact number of scalars in a model built from `c`.
pub fn param_count(c: &ArchConfig) -> usize {
    let (de, dd, v) = (c.enc_dim, c.dec_dim, c.vocab_size);
    let embeddings = if c.shares_embedding() { v * de } else { v * de + v * dd };
    let enc_layer = attention_params(de) + ffn_params(de, c.enc_ffn) + 2 * 2 * de;
    let dec_layer = 2 * attention_params(dd) + ffn_params(dd, c.dec_ffn) + 3 * 2 * dd;
    let bridge = if c.has_bridge() { de * dd + dd } else { 0 };
    let length_head = de * c.max_len + c.max_len;
    embeddings + c.enc_layers * enc_layer + 2 * de + bridge + c.dec_layers * dec_layer + 2 * dd + length_head
}
