use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Single-direction LSTM parameters; gate order is (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Xavier input weights, orthogonal recurrent blocks, forget bias 1.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = store.xavier(format!("{name}.w_ih"), input, 4 * hidden, rng);
        let mut whh = Tensor::zeros(&[hidden, 4 * hidden]);
        for gate in 0..4 {
            let q = random_orthogonal(hidden, rng);
            for r in 0..hidden {
                for c in 0..hidden {
                    whh.set(&[r, gate * hidden + c], q[r * hidden + c]);
                }
            }
        }
        let w_hh = store.add(format!("{name}.w_hh"), whh);
        let mut b = Tensor::zeros(&[4 * hidden]);
        for k in hidden..2 * hidden {
            b.data_mut()[k] = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    /// Full scan over `x: [B, T, I]`; returns `[B, T, 2H]` of `(h_t, c_t)`.
    pub fn scan(&self, g: &mut Graph, x: Var, init: Option<(Var, Var)>, reverse: bool) -> Result<Var> {
        let (w_ih, w_hh, bias) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        let (h0, c0) = match init {
            Some((h, c)) => (Some(h), Some(c)),
            None => (None, None),
        };
        g.lstm(x, w_ih, w_hh, bias, h0, c0, reverse)
    }

    /// One cell update for `x: [B, I]`, `h, c: [B, H]`, written with primitive ops.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let (w_ih, w_hh, bias) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.bias));
        let zx = g.matmul(x, w_ih)?;
        let zh = g.matmul(h, w_hh)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, bias)?;
        let zi = g.narrow(z, 1, 0, hd)?;
        let zf = g.narrow(z, 1, hd, hd)?;
        let zg = g.narrow(z, 1, 2 * hd, hd)?;
        let zo = g.narrow(z, 1, 3 * hd, hd)?;
        let (i, f, cand, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Gram-Schmidt on a Gaussian-ish matrix, rows orthonormalized.
    let mut m: Vec<f64> = (0..n * n)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= dot * m[j * n + k];
            }
        }
        let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt().max(1e-12);
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlstmConfig {
    pub input: usize,
    pub hidden: usize,
    /// Output projection size; `None` leaves `2·hidden` outputs.
    pub proj: Option<usize>,
}

/// Bidirectional LSTM with an optional output projection.
#[derive(Clone, Debug)]
pub struct Blstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub proj: Option<Linear>,
}

impl Blstm {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlstmConfig, rng: &mut ChaCha8Rng) -> Self {
        let fwd = LstmCell::new(store, &format!("{name}.fwd"), cfg.input, cfg.hidden, rng);
        let bwd = LstmCell::new(store, &format!("{name}.bwd"), cfg.input, cfg.hidden, rng);
        let proj = cfg
            .proj
            .map(|p| Linear::new(store, &format!("{name}.proj"), 2 * cfg.hidden, p, rng));
        Self { fwd, bwd, proj }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.as_ref().map_or(2 * self.fwd.hidden, |p| p.out_dim)
    }

    /// `[B, T, I] -> [B, T, 2H]`: forward states then backward states.
    pub fn forward_unprojected(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.fwd.input {
            return Err(Error::Shape {
                op: "blstm",
                lhs: shape,
                rhs: vec![self.fwd.input, self.fwd.hidden],
            });
        }
        let h = self.fwd.hidden;
        let f = self.fwd.scan(g, x, None, false)?;
        let b = self.bwd.scan(g, x, None, true)?;
        let fh = g.narrow(f, 2, 0, h)?;
        let bh = g.narrow(b, 2, 0, h)?;
        g.concat(&[fh, bh], 2)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.forward_unprojected(g, x)?;
        match &self.proj {
            Some(p) => p.forward(g, y),
            None => Ok(y),
        }
    }
}
