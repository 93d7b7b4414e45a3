//! Building blocks shared by the translation model and the language model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compute::{AttnShape, Graph, ParameterSet, Tensor, Var, MASK_NEG};
use crate::error::Result;

/// Dropout source; inactive when there is no rng or the rate is 0.
pub struct Noise<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    rate: f32,
}

impl<'a> Noise<'a> {
    pub fn off() -> Self {
        Noise { rng: None, rate: 0.0 }
    }

    pub fn new(rng: &'a mut ChaCha8Rng, rate: f32) -> Self {
        Noise { rng: Some(rng), rate }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

pub(crate) fn init_linear<R: Rng>(
    p: &mut ParameterSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    p.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn init_norm(p: &mut ParameterSet, name: &str, dim: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::filled(&[dim], 1.0))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[dim]))
}

pub(crate) fn init_attention<R: Rng>(p: &mut ParameterSet, name: &str, dim: usize, rng: &mut R) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{name}.{part}"), dim, dim, rng)?;
    }
    Ok(())
}

pub(crate) fn init_ffn<R: Rng>(p: &mut ParameterSet, name: &str, dim: usize, ffn: usize, rng: &mut R) -> Result<()> {
    let bound1 = 1.0 / (dim as f32).sqrt();
    let bound2 = 1.0 / (ffn as f32).sqrt();
    p.insert(format!("{name}.w1"), Tensor::uniform(&[dim, ffn], bound1, rng))?;
    p.insert(format!("{name}.b1"), Tensor::zeros(&[ffn]))?;
    p.insert(format!("{name}.w2"), Tensor::uniform(&[ffn, dim], bound2, rng))?;
    p.insert(format!("{name}.b2"), Tensor::zeros(&[dim]))
}

pub(crate) fn linear(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn norm(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(p, &format!("{name}.g"))?;
    let bias = g.param(p, &format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) fn ffn(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w1 = g.param(p, &format!("{name}.w1"))?;
    let b1 = g.param(p, &format!("{name}.b1"))?;
    let w2 = g.param(p, &format!("{name}.w2"))?;
    let b2 = g.param(p, &format!("{name}.b2"))?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h)?;
    g.linear(h, w2, Some(b2))
}

/// Multi-head attention with projected keys/values supplied by the caller.
pub(crate) fn attend(
    g: &mut Graph,
    p: &ParameterSet,
    name: &str,
    query_in: Var,
    keys: Var,
    values: Var,
    mask: &[f32],
    geo: AttnShape,
) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), query_in)?;
    let a = g.attention(q, keys, values, mask, geo)?;
    linear(g, p, &format!("{name}.o"), a)
}

pub(crate) fn key_values(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<(Var, Var)> {
    let k = linear(g, p, &format!("{name}.k"), x)?;
    let v = linear(g, p, &format!("{name}.v"), x)?;
    Ok((k, v))
}

/// Pre-norm self-attention + feed-forward block.
pub(crate) fn self_block(
    g: &mut Graph,
    p: &ParameterSet,
    prefix: &str,
    x: Var,
    mask: &[f32],
    geo: AttnShape,
    noise: &mut Noise,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.attn_norm"), x)?;
    let (k, v) = key_values(g, p, &format!("{prefix}.attn"), h)?;
    let a = attend(g, p, &format!("{prefix}.attn"), h, k, v, mask, geo)?;
    let a = noise.apply(g, a)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ffn_norm"), x)?;
    let f = ffn(g, p, &format!("{prefix}.ffn"), h)?;
    let f = noise.apply(g, f)?;
    g.add(x, f)
}

/// Additive mask `[batch, q_len, k_len]` hiding invalid keys and, when
/// `causal`, keys after the query position.
pub fn attention_mask(key_valid: &[bool], batch: usize, q_len: usize, k_len: usize, causal: bool) -> Vec<f32> {
    let mut m = vec![0.0; batch * q_len * k_len];
    for b in 0..batch {
        for i in 0..q_len {
            let row = &mut m[(b * q_len + i) * k_len..][..k_len];
            for (j, slot) in row.iter_mut().enumerate() {
                if !key_valid[b * k_len + j] || (causal && j > i) {
                    *slot = MASK_NEG;
                }
            }
        }
    }
    m
}

/// Sinusoidal position table for `len` positions, repeated `batch` times.
pub fn positions(batch: usize, len: usize, dim: usize) -> Vec<f32> {
    let mut one = vec![0.0f32; len * dim];
    for t in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / dim as f64);
            one[t * dim + i] = angle.sin() as f32;
            if i + 1 < dim {
                one[t * dim + i + 1] = angle.cos() as f32;
            }
        }
    }
    one.repeat(batch)
}

/// Scaled token embedding plus positions: `[batch·len, dim]`.
pub(crate) fn embed(g: &mut Graph, table: Var, ids: &[u32], batch: usize, len: usize) -> Result<Var> {
    let dim = g.shape(table)[1];
    let e = g.embedding(table, ids)?;
    let e = g.scale(e, (dim as f32).sqrt())?;
    let pos = g.constant(vec![batch * len, dim], positions(batch, len, dim))?;
    g.add(e, pos)
}
