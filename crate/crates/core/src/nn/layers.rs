//! Parameterized building blocks. Each layer stores only [`ParamId`] handles;
//! the values live in a [`ParamStore`] so the same layer runs in `f32` and `f64`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::kernels::{AttentionLayout, Segment};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Transformer dimensions shared by the encoder and decoder stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self { d_model: 768, ffn_dim: 3072, heads: 12, dropout: 0.5, enc_layers: 12, dec_layers: 4 }
    }
}

impl LayerConfig {
    /// Small profile that trains on a laptop CPU.
    pub fn desk() -> Self {
        Self { d_model: 64, ffn_dim: 256, heads: 4, dropout: 0.1, enc_layers: 2, dec_layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("layer dimensions must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[din, dout], INIT_STD, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), &[dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[d]),
            beta: store.add_zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, T::from_f64_lossy(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    /// Attention of `query` rows over `memory` rows, per segment.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        query: Var,
        memory: Var,
        q_segments: &[Segment],
        k_segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let d = g.value(query).cols();
        if d % self.heads != 0 || g.value(memory).cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "attention width {d} vs memory {} with {} heads",
                g.value(memory).cols(),
                self.heads
            )));
        }
        if q_segments.len() != k_segments.len() {
            return Err(Error::ShapeMismatch("query/key segment counts differ".into()));
        }
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let layout = Rc::new(AttentionLayout {
            heads: self.heads,
            q_segments: q_segments.to_vec(),
            k_segments: k_segments.to_vec(),
            causal,
        });
        let a = g.attention(q, k, v, layout);
        Ok(self.out.forward(g, a))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, dropout: f64) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h, dropout);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &LayerConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_dim, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, segments: &[Segment]) -> Result<Var> {
        let h = self.norm1.forward(g, x);
        let h = self.attn.forward(g, h, h, segments, segments, false)?;
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.ffn.forward(g, h, self.dropout);
        let h = g.dropout(h, self.dropout);
        Ok(g.add(x, h))
    }
}

/// Pre-norm decoder block with causal self-attention and cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &LayerConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.d_model, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.d_model, cfg.heads, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_dim, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        memory: Var,
        segments: &[Segment],
        mem_segments: &[Segment],
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x);
        let h = self.self_attn.forward(g, h, h, segments, segments, true)?;
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.cross_attn.forward(g, h, memory, segments, mem_segments, false)?;
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        let h = self.norm3.forward(g, x);
        let h = self.ffn.forward(g, h, self.dropout);
        let h = g.dropout(h, self.dropout);
        Ok(g.add(x, h))
    }
}
