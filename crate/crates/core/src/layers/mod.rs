//! Sequence-modeling layers built on [`crate::tensor::Graph`].
//!
//! Layers only hold [`ParamId`]s; the values live in the model's
//! [`ParamStore`]. All layers take batched input `[B, L, D]` where the
//! sequence axis `L` is the one the layer models, so the same layer can run
//! along time (batch over speakers) or along speakers (batch over time).

mod attention;
mod recurrent;

pub use attention::{sinusoidal_encoding, MultiHeadAttention, TransformerConfig, TransformerEncoderLayer};
pub use recurrent::{Blstm, BlstmConfig, LstmCell};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Affine map over the last axis: `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: Some(store.zeros(format!("{name}.bias"), &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "linear",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Learned gain and bias for a layer norm over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.full(format!("{name}.gain"), &[dim], 1.0),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// A layer that maps `[B, L, D_in]` to `[B, L, D_out]`, preserving `L`.
#[derive(Clone, Debug)]
pub enum SeqLayer {
    Blstm(Blstm),
    Transformer(TransformerEncoderLayer),
}

impl SeqLayer {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            SeqLayer::Blstm(l) => l.forward(g, x),
            SeqLayer::Transformer(l) => l.forward(g, x),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SeqLayer::Blstm(l) => l.out_dim(),
            SeqLayer::Transformer(l) => l.dim(),
        }
    }
}
