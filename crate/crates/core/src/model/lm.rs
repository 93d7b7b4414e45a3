use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, attention_mask, Noise};
use crate::compute::{kernels, AttnShape, Graph, ParameterSet, Tensor, Var};
use crate::data::{encode_batch, Batch, TokenId, BOS, EOS, RESERVED, UNK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Longest sentence, excluding BOS/EOS.
    pub max_len: usize,
}

impl LmConfig {
    pub fn small(vocab_size: usize, max_len: usize) -> Self {
        LmConfig {
            layers: 1,
            dim: 32,
            ffn: 128,
            heads: 4,
            vocab_size,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.ffn == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads)
        {
            return Err(Error::config(
                "lm: layers, dim, ffn, heads must be positive with dim % heads == 0",
            ));
        }
        if self.vocab_size <= RESERVED || self.max_len == 0 {
            return Err(Error::config(
                "lm: vocab_size must exceed reserved ids and max_len >= 1",
            ));
        }
        Ok(())
    }
}

/// Decoder-only causal language model over target sentences.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
    pub params: ParameterSet,
}

impl TinyLm {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new(seed);
        let bound = 1.0 / (config.dim as f32).sqrt();
        p.insert(
            "lm.embed",
            Tensor::uniform(&[config.vocab_size, config.dim], bound, &mut rng),
        )?;
        for l in 0..config.layers {
            layers::init_norm(&mut p, &format!("lm.{l}.attn_norm"), config.dim)?;
            layers::init_attention(&mut p, &format!("lm.{l}.attn"), config.dim, &mut rng)?;
            layers::init_norm(&mut p, &format!("lm.{l}.ffn_norm"), config.dim)?;
            layers::init_ffn(&mut p, &format!("lm.{l}.ffn"), config.dim, config.ffn, &mut rng)?;
        }
        layers::init_norm(&mut p, "lm.norm", config.dim)?;
        Ok(TinyLm { config, params: p })
    }

    /// Teacher-forcing rows: inputs `<s> y`, targets `y </s>`.
    pub fn shifted<S: AsRef<[TokenId]>>(&self, sentences: &[S]) -> Result<(Batch, Vec<TokenId>)> {
        let inputs: Vec<Vec<TokenId>> = sentences
            .iter()
            .map(|s| std::iter::once(BOS).chain(s.as_ref().iter().copied()).collect())
            .collect();
        let batch = encode_batch(&inputs, self.config.max_len + 1)?;
        let mut targets = vec![0; batch.ids.len()];
        for (r, s) in sentences.iter().enumerate() {
            let s = s.as_ref();
            let row = &mut targets[r * batch.width..][..s.len() + 1];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS;
        }
        Ok((batch, targets))
    }

    /// Next-token logits `[rows·width, vocab]`.
    pub fn logits_in(&self, g: &mut Graph, inputs: &Batch, noise: &mut Noise) -> Result<Var> {
        let c = &self.config;
        let p = &self.params;
        let (batch, len) = (inputs.rows, inputs.width);
        let table = g.param(p, "lm.embed")?;
        let mut x = layers::embed(g, table, &inputs.ids, batch, len)?;
        let mask = attention_mask(&inputs.mask, batch, len, len, true);
        let geo = AttnShape {
            batch,
            q_len: len,
            k_len: len,
            heads: c.heads,
        };
        for l in 0..c.layers {
            x = layers::self_block(g, p, &format!("lm.{l}"), x, &mask, geo, noise)?;
        }
        let out = layers::norm(g, p, "lm.norm", x)?;
        g.matmul_nt(out, table)
    }

    /// Log-probability of every token of each sentence plus its EOS.
    /// Ids outside the vocabulary are scored as `<unk>`.
    pub fn token_log_probs<S: AsRef<[TokenId]>>(&self, sentences: &[S]) -> Result<Vec<Vec<f64>>> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let v = self.config.vocab_size;
        let clean: Vec<Vec<TokenId>> = sentences
            .iter()
            .map(|s| {
                s.as_ref()
                    .iter()
                    .map(|&t| if (t as usize) < v { t } else { UNK })
                    .collect()
            })
            .collect();
        let (inputs, targets) = self.shifted(&clean)?;
        let mut g = Graph::inference();
        let logits = self.logits_in(&mut g, &inputs, &mut Noise::off())?;
        let lv = g.value(logits);
        Ok(clean
            .iter()
            .enumerate()
            .map(|(r, s)| {
                (0..=s.len())
                    .map(|t| {
                        let i = r * inputs.width + t;
                        let row = &lv[i * v..(i + 1) * v];
                        (row[targets[i] as usize] - kernels::log_sum_exp(row)) as f64
                    })
                    .collect()
            })
            .collect())
    }
}
