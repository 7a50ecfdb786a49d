use rand_chacha::ChaCha8Rng;

use super::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Scaled dot-product self-attention with `heads` heads over `[B, L, D]`.
/// The key projection carries no bias: softmax would cancel it.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, heads: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Splits `[B, L, D]` into `[B·h, L, D/h]` (or `[B·h, D/h, L]` when `keys`).
    fn split_heads(&self, g: &mut Graph, x: Var, keys: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let x = g.reshape(x, &[b, l, h, dh])?;
        if keys {
            let x = g.permute(x, &[0, 2, 3, 1])?;
            g.reshape(x, &[b * h, dh, l])
        } else {
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, l, dh])
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape {
                op: "attention",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        let (b, l, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let q = self.split_heads(g, q, false)?;
        let kt = self.split_heads(g, k, true)?;
        let v = self.split_heads(g, v, false)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores, 2)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[b, h, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, self.dim])?;
        self.out.forward(g, ctx)
    }
}

/// `Transformer(heads, dim, ff_dim)` sizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub positional_encoding: bool,
}

/// Pre-norm encoder layer: `x + MHSA(LN(x))`, then `+ FFN(LN(·))` with GELU.
#[derive(Clone, Debug)]
pub struct TransformerEncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub positional_encoding: bool,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.heads, cfg.dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.dim, cfg.ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, cfg.dim, rng),
            positional_encoding: cfg.positional_encoding,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = if self.positional_encoding {
            let s = g.shape(x).to_vec();
            if s.len() != 3 {
                return Err(Error::Shape {
                    op: "transformer",
                    lhs: s,
                    rhs: vec![self.dim()],
                });
            }
            let pe = g.input(sinusoidal_encoding(s[1], s[2]));
            g.add(x, pe)?
        } else {
            x
        };
        let n = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, n)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, x)?;
        let f = self.ff1.forward(g, n)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f)?;
        g.add(x, f)
    }
}

/// `[len, dim]` table with `sin` on even and `cos` on odd channels.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.set(&[pos, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
