use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use super::layers::{self, attention_mask, Noise};
use crate::compute::{checkpoint, AttnShape, Graph, ParameterSet, Tensor, Var};
use crate::data::{Batch, MASK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    /// Causal self-attention, left-to-right generation.
    At,
    /// Bidirectional self-attention over (partially) masked targets.
    Nat,
}

/// Encoder-decoder transformer.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ArchConfig,
    pub kind: DecoderKind,
    pub params: ParameterSet,
}

/// Encoder results bound inside a graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final encoder states `[batch·len, enc_dim]`.
    pub states: Var,
    /// What the decoder reads: bridged states when widths differ.
    pub memory: Var,
    /// Per decoder layer cross-attention keys and values.
    pub cross: Vec<(Var, Var)>,
    pub key_valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Encoder results detached from any graph.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch, len, enc_dim]`
    pub states: Tensor,
    pub mask: Vec<bool>,
    /// `[batch, len, dec_dim]`, present exactly when the model has a bridge.
    pub bridged_states: Option<Tensor>,
}

impl EncoderOutput {
    pub fn batch(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthCandidate {
    pub len: usize,
    pub log_prob: f32,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ArchConfig,
    kind: DecoderKind,
}

const SHARED_EMBED: &str = "embed";
const ENC_EMBED: &str = "enc.embed";
const DEC_EMBED: &str = "dec.embed";

impl Model {
    pub fn init(config: ArchConfig, kind: DecoderKind, seed: u64) -> Result<Self> {
        use layers::{init_attention, init_ffn, init_linear, init_norm};
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new(seed);
        if c.shares_embedding() {
            let bound = 1.0 / (c.enc_dim as f32).sqrt();
            p.insert(
                SHARED_EMBED,
                Tensor::uniform(&[c.vocab_size, c.enc_dim], bound, &mut rng),
            )?;
        } else {
            let be = 1.0 / (c.enc_dim as f32).sqrt();
            let bd = 1.0 / (c.dec_dim as f32).sqrt();
            p.insert(ENC_EMBED, Tensor::uniform(&[c.vocab_size, c.enc_dim], be, &mut rng))?;
            p.insert(DEC_EMBED, Tensor::uniform(&[c.vocab_size, c.dec_dim], bd, &mut rng))?;
        }
        for l in 0..c.enc_layers {
            init_norm(&mut p, &format!("enc.{l}.attn_norm"), c.enc_dim)?;
            init_attention(&mut p, &format!("enc.{l}.attn"), c.enc_dim, &mut rng)?;
            init_norm(&mut p, &format!("enc.{l}.ffn_norm"), c.enc_dim)?;
            init_ffn(&mut p, &format!("enc.{l}.ffn"), c.enc_dim, c.enc_ffn, &mut rng)?;
        }
        init_norm(&mut p, "enc.norm", c.enc_dim)?;
        if c.has_bridge() {
            init_linear(&mut p, "bridge", c.enc_dim, c.dec_dim, &mut rng)?;
        }
        for l in 0..c.dec_layers {
            init_norm(&mut p, &format!("dec.{l}.self_norm"), c.dec_dim)?;
            init_attention(&mut p, &format!("dec.{l}.self"), c.dec_dim, &mut rng)?;
            init_norm(&mut p, &format!("dec.{l}.cross_norm"), c.dec_dim)?;
            init_attention(&mut p, &format!("dec.{l}.cross"), c.dec_dim, &mut rng)?;
            init_norm(&mut p, &format!("dec.{l}.ffn_norm"), c.dec_dim)?;
            init_ffn(&mut p, &format!("dec.{l}.ffn"), c.dec_dim, c.dec_ffn, &mut rng)?;
        }
        init_norm(&mut p, "dec.norm", c.dec_dim)?;
        init_linear(&mut p, "length", c.enc_dim, c.max_len, &mut rng)?;
        Ok(Model {
            config,
            kind,
            params: p,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Encoder-side token embedding table `[vocab, enc_dim]`.
    pub fn source_embeddings(&self) -> Result<&Tensor> {
        self.params.get(self.enc_embed_name())
    }

    fn enc_embed_name(&self) -> &'static str {
        if self.config.shares_embedding() {
            SHARED_EMBED
        } else {
            ENC_EMBED
        }
    }

    fn dec_embed_name(&self) -> &'static str {
        if self.config.shares_embedding() {
            SHARED_EMBED
        } else {
            DEC_EMBED
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(bad) => Err(Error::invalid(format!(
                "token id {bad} outside vocab of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Runs the encoder, bridge, and cross-attention projections.
    pub fn encode_in(&self, g: &mut Graph, src: &Batch, noise: &mut Noise) -> Result<Encoded> {
        let c = &self.config;
        if src.width > c.max_len {
            return Err(Error::SequenceTooLong {
                index: src.lengths().iter().position(|&l| l > c.max_len).unwrap_or(0),
                len: src.width,
                max_len: c.max_len,
            });
        }
        if src.rows == 0 || src.width == 0 {
            return Err(Error::invalid("encode: empty source batch"));
        }
        self.check_ids(&src.ids)?;
        let p = &self.params;
        let (batch, len) = (src.rows, src.width);
        let table = g.param(p, self.enc_embed_name())?;
        let mut x = layers::embed(g, table, &src.ids, batch, len)?;
        x = noise.apply(g, x)?;
        let mask = attention_mask(&src.mask, batch, len, len, false);
        let geo = AttnShape {
            batch,
            q_len: len,
            k_len: len,
            heads: c.enc_heads,
        };
        for l in 0..c.enc_layers {
            x = layers::self_block(g, p, &format!("enc.{l}"), x, &mask, geo, noise)?;
        }
        let states = layers::norm(g, p, "enc.norm", x)?;
        let memory = if c.has_bridge() {
            layers::linear(g, p, "bridge", states)?
        } else {
            states
        };
        let cross = (0..c.dec_layers)
            .map(|l| layers::key_values(g, p, &format!("dec.{l}.cross"), memory))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded {
            states,
            memory,
            cross,
            key_valid: src.mask.clone(),
            batch,
            len,
        })
    }

    /// Repeats encoder rows: output row `i` is input row `rows[i]`.
    pub fn select_rows(&self, g: &mut Graph, enc: &Encoded, rows: &[usize]) -> Result<Encoded> {
        let len = enc.len;
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..len).map(move |t| r * len + t)).collect();
        let states = g.gather_rows(enc.states, &idx)?;
        let memory = if enc.memory == enc.states {
            states
        } else {
            g.gather_rows(enc.memory, &idx)?
        };
        let cross = enc
            .cross
            .iter()
            .map(|&(k, v)| Ok((g.gather_rows(k, &idx)?, g.gather_rows(v, &idx)?)))
            .collect::<Result<Vec<_>>>()?;
        let key_valid = rows
            .iter()
            .flat_map(|&r| enc.key_valid[r * len..(r + 1) * len].iter().copied())
            .collect();
        Ok(Encoded {
            states,
            memory,
            cross,
            key_valid,
            batch: rows.len(),
            len,
        })
    }

    /// Decoder logits `[batch·tgt_len, vocab]`.
    pub fn decode_in(&self, g: &mut Graph, enc: &Encoded, tgt: &Batch, noise: &mut Noise) -> Result<Var> {
        let c = &self.config;
        if tgt.rows != enc.batch {
            return Err(Error::invalid(format!(
                "decoder batch {} does not match encoder batch {}",
                tgt.rows, enc.batch
            )));
        }
        if tgt.width == 0 {
            return Err(Error::invalid("decode: empty target batch"));
        }
        self.check_ids(&tgt.ids)?;
        let causal = self.kind == DecoderKind::At;
        if causal && tgt.ids.iter().zip(&tgt.mask).any(|(&t, &m)| m && t == MASK) {
            return Err(Error::invalid("MASK token in autoregressive decoder input"));
        }
        let p = &self.params;
        let (batch, len) = (tgt.rows, tgt.width);
        let table = g.param(p, self.dec_embed_name())?;
        let mut y = layers::embed(g, table, &tgt.ids, batch, len)?;
        y = noise.apply(g, y)?;
        let self_mask = attention_mask(&tgt.mask, batch, len, len, causal);
        let cross_mask = attention_mask(&enc.key_valid, batch, len, enc.len, false);
        let self_geo = AttnShape {
            batch,
            q_len: len,
            k_len: len,
            heads: c.dec_heads,
        };
        let cross_geo = AttnShape {
            k_len: enc.len,
            ..self_geo
        };
        for (l, &(ck, cv)) in enc.cross.iter().enumerate() {
            let h = layers::norm(g, p, &format!("dec.{l}.self_norm"), y)?;
            let (k, v) = layers::key_values(g, p, &format!("dec.{l}.self"), h)?;
            let a = layers::attend(g, p, &format!("dec.{l}.self"), h, k, v, &self_mask, self_geo)?;
            let a = noise.apply(g, a)?;
            y = g.add(y, a)?;
            let h = layers::norm(g, p, &format!("dec.{l}.cross_norm"), y)?;
            let a = layers::attend(g, p, &format!("dec.{l}.cross"), h, ck, cv, &cross_mask, cross_geo)?;
            let a = noise.apply(g, a)?;
            y = g.add(y, a)?;
            let h = layers::norm(g, p, &format!("dec.{l}.ffn_norm"), y)?;
            let f = layers::ffn(g, p, &format!("dec.{l}.ffn"), h)?;
            let f = noise.apply(g, f)?;
            y = g.add(y, f)?;
        }
        let out = layers::norm(g, p, "dec.norm", y)?;
        g.matmul_nt(out, table)
    }

    /// Length logits `[batch, max_len]`; class `i` is length `i + 1`.
    pub fn length_logits_in(&self, g: &mut Graph, enc: &Encoded) -> Result<Var> {
        let pooled = g.mean_pool_masked(enc.states, &enc.key_valid, enc.batch)?;
        layers::linear(g, &self.params, "length", pooled)
    }

    pub fn encode(&self, src: &Batch) -> Result<EncoderOutput> {
        let mut g = Graph::inference();
        let enc = self.encode_in(&mut g, src, &mut Noise::off())?;
        let (b, t) = (enc.batch, enc.len);
        let states = reshape3(g.tensor(enc.states), b, t)?;
        let bridged_states = if self.config.has_bridge() {
            Some(reshape3(g.tensor(enc.memory), b, t)?)
        } else {
            None
        };
        Ok(EncoderOutput {
            states,
            mask: src.mask.clone(),
            bridged_states,
        })
    }

    /// Rebinds a detached encoder output inside `g`.
    pub fn bind_encoder_output(&self, g: &mut Graph, out: &EncoderOutput) -> Result<Encoded> {
        let (b, t) = (out.batch(), out.len());
        let flat = |x: &Tensor| -> Result<Tensor> {
            let d = x.shape()[2];
            Tensor::new(vec![b * t, d], x.values().to_vec())
        };
        let states = g.constant_tensor(&flat(&out.states)?)?;
        let memory = match &out.bridged_states {
            Some(bs) => g.constant_tensor(&flat(bs)?)?,
            None => states,
        };
        let cross = (0..self.config.dec_layers)
            .map(|l| layers::key_values(g, &self.params, &format!("dec.{l}.cross"), memory))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded {
            states,
            memory,
            cross,
            key_valid: out.mask.clone(),
            batch: b,
            len: t,
        })
    }

    /// Logits `[batch, tgt_len, vocab]`.
    pub fn decoder_forward(&self, enc: &EncoderOutput, tgt: &Batch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let bound = self.bind_encoder_output(&mut g, enc)?;
        let logits = self.decode_in(&mut g, &bound, tgt, &mut Noise::off())?;
        reshape3(g.tensor(logits), tgt.rows, tgt.width)
    }

    /// Probabilities over lengths `1..=max_len`, one row per sentence.
    pub fn length_distribution(&self, enc: &EncoderOutput) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::inference();
        let bound = self.bind_encoder_output(&mut g, enc)?;
        let logits = self.length_logits_in(&mut g, &bound)?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs)
            .chunks(self.config.max_len)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Top-`beam` distinct lengths per sentence, by descending log-probability.
    pub fn predict_length(&self, enc: &EncoderOutput, beam: usize) -> Result<Vec<Vec<LengthCandidate>>> {
        let mut g = Graph::inference();
        let bound = self.bind_encoder_output(&mut g, enc)?;
        let logits = self.length_logits_in(&mut g, &bound)?;
        let logits = g.value(logits).to_vec();
        top_lengths(&logits, self.config.max_len, beam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Metadata {
            config: self.config.clone(),
            kind: self.kind,
        })?;
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint) -> Result<Self> {
        let meta: Metadata =
            serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
        let template = Model::init(meta.config.clone(), meta.kind, 0)?;
        for (name, t) in template.params.iter() {
            let got = ck
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}", got.shape())));
            }
        }
        if ck.params.len() != template.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Model {
            config: meta.config,
            kind: meta.kind,
            params: ck.params,
        })
    }
}

fn reshape3(t: Tensor, b: usize, len: usize) -> Result<Tensor> {
    let d = t.numel() / (b * len).max(1);
    Tensor::new(vec![b, len, d], t.into_values())
}

/// Ranks length classes of each row of `logits` (`[rows, max_len]`).
pub fn top_lengths(logits: &[f32], max_len: usize, beam: usize) -> Result<Vec<Vec<LengthCandidate>>> {
    if beam == 0 || beam > max_len {
        return Err(Error::invalid(format!("length beam {beam} must be in 1..={max_len}")));
    }
    Ok(logits
        .chunks(max_len)
        .map(|row| {
            let lse = crate::compute::kernels::log_sum_exp(row);
            let mut idx: Vec<usize> = (0..max_len).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.into_iter()
                .take(beam)
                .map(|i| LengthCandidate {
                    len: i + 1,
                    log_prob: row[i] - lse,
                })
                .collect()
        })
        .collect())
}
