//! Plain loops behind the graph ops. Every reduction runs in a fixed order so
//! results are bit-reproducible.

use super::Tensor;
use crate::error::{Error, Result};

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum MatmulMode {
    /// `b` is a plain matrix shared by every leading index of `a`.
    Shared,
    /// `a` is a plain matrix shared by every leading index of `b`.
    SharedLhs,
    /// Equal leading axes, one product per index.
    Batched,
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    mode: MatmulMode,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let (mode, lead) = if b_lead.is_empty() {
            (MatmulMode::Shared, a_lead)
        } else if a_lead.is_empty() {
            (MatmulMode::SharedLhs, b_lead)
        } else if a_lead == b_lead {
            (MatmulMode::Batched, a_lead)
        } else {
            return Err(err());
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            mode,
            batch: lead.iter().product(),
            m,
            k,
            n,
            out_shape,
        })
    }

    pub(crate) fn forward(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * n];
        match self.mode {
            MatmulMode::Shared => mm_nn(a.data(), b.data(), &mut out, self.batch * m, k, n),
            MatmulMode::SharedLhs => {
                for bi in 0..self.batch {
                    mm_nn(
                        a.data(),
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            MatmulMode::Batched => {
                for bi in 0..self.batch {
                    mm_nn(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Tensor {
            shape: self.out_shape.clone(),
            data: out,
        }
    }

    /// Accumulates `∂L/∂a` and `∂L/∂b` given `∂L/∂out`.
    pub(crate) fn backward(
        &self,
        a: &Tensor,
        b: &Tensor,
        dout: &Tensor,
        da: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = dout.data();
        match self.mode {
            MatmulMode::Shared => {
                let rows = self.batch * m;
                if let Some(da) = da {
                    mm_nt(g, b.data(), da, rows, n, k);
                }
                if let Some(db) = db {
                    mm_tn(a.data(), g, db, rows, k, n);
                }
            }
            MatmulMode::SharedLhs => {
                if let Some(da) = da {
                    for bi in 0..self.batch {
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            da,
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(db) = db {
                    for bi in 0..self.batch {
                        mm_tn(
                            a.data(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            MatmulMode::Batched => {
                if let Some(da) = da {
                    for bi in 0..self.batch {
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(db) = db {
                    for bi in 0..self.batch {
                        mm_tn(
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat source index into a tensor of
/// shape `src_shape` where output axis `i` walks source axis `axis_of[i]`
/// with stride `src_stride[i]` (0 for broadcast axes).
fn gather_map(out_shape: &[usize], src_stride: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    if numel == 0 {
        return map;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::contract(format!(
            "invalid permutation {perm:?} for shape {shape:?}"
        )));
    }
    let st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    Ok((gather_map(&out_shape, &src_stride), out_shape))
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (map, shape) = permute_map(t.shape(), perm)?;
    let data = map.iter().map(|&i| t.data()[i]).collect();
    Ok(Tensor { shape, data })
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index map from a broadcast output shape back into `src_shape`.
pub(crate) fn broadcast_map(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let st = strides(src_shape);
    let offset = rank - src_shape.len();
    let src_stride: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || src_shape[i - offset] == 1 {
                0
            } else {
                st[i - offset]
            }
        })
        .collect();
    gather_map(out_shape, &src_stride)
}

/// How a broadcast operand relates to the output.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Operand repeats every `len` elements (its shape is a suffix of the output).
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out_shape: &[usize], src_shape: &[usize]) -> Self {
        if out_shape == src_shape {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = {
            let first = src_shape.iter().position(|&d| d != 1).unwrap_or(src_shape.len());
            src_shape[first..].to_vec()
        };
        if out_shape.ends_with(&trimmed) {
            return Bcast::Cycle(trimmed.iter().product());
        }
        Bcast::Map(broadcast_map(out_shape, src_shape))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }

    /// Sums `grad` (output-shaped) back into `acc` (operand-shaped).
    pub(crate) fn reduce_into(&self, grad: &[f64], acc: &mut [f64]) {
        match self {
            Bcast::Same => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            Bcast::Cycle(len) => {
                for chunk in grad.chunks(*len) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
            }
            Bcast::Map(m) => {
                for (g, &j) in grad.iter().zip(m) {
                    acc[j] += g;
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Numerically stable `-[t ln σ(z) + (1-t) ln(1-σ(z))]`.
#[inline]
pub(crate) fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) const PROB_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn bce_prob(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}
