use std::collections::HashMap;

use super::kernels::{self, Bcast, MatmulPlan};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var, MatmulPlan),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Bce { x: Var, target: Tensor, weight: Tensor, norm: f64, logits: bool },
    Lstm(Box<LstmSaved>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂v`; exactly zero for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A graph optionally borrows a [`ParamStore`]; [`Graph::param`] binds each
/// parameter once per graph. After [`Graph::backward`], [`Graph::param_grads`]
/// extracts the gradients to accumulate into the store.
pub struct Graph<'a> {
    nodes: Vec<Node>,
    store: Option<&'a ParamStore>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Graph for pure inference: parameters are bound as constants.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast, Bcast)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let ba = Bcast::new(&out_shape, &sa);
        let bb = Bcast::new(&out_shape, &sb);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..n).map(|i| f(da[ba.index(i)], db[bb.index(i)])).collect();
        Ok((Tensor { shape: out_shape, data }, ba, bb))
    }

    /// Element-wise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ba, bb) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b, ba, bb), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ba, bb) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b, ba, bb), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ba, bb) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b, ba, bb), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// Matrix product over the last two axes. Leading axes must either match
    /// or be absent on one side, in which case that operand is shared.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let t = plan.forward(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b, plan), ng))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (map, shape) = kernels::permute_map(self.shape(x), perm)?;
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Gather(x, map), ng))
    }

    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a1 >= perm.len() || a2 >= perm.len() {
            return Err(Error::contract(format!(
                "transpose axes ({a1},{a2}) out of range for {:?}",
                self.shape(x)
            )));
        }
        perm.swap(a1, a2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data().to_vec(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, alen, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { x, axis, start }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor { shape, data }, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// Gathers along axis 0: output row `i` is input row `rows[i]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::contract(format!("gather_rows index out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let mut map = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            map.extend(r * inner..(r + 1) * inner);
        }
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Gather(x, map), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    data[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x, axis }, ng))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn bce(&mut self, x: Var, target: &Tensor, weight: &Tensor, norm: f64, logits: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if target.shape() != shape.as_slice() || weight.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "bce",
                lhs: shape,
                rhs: target.shape().to_vec(),
            });
        }
        if norm <= 0.0 {
            return Err(Error::contract("bce normalizer must be positive"));
        }
        let src = self.value(x).data();
        let mut total = 0.0;
        for ((&v, &t), &w) in src.iter().zip(target.data()).zip(weight.data()) {
            if w != 0.0 {
                let l = if logits { kernels::bce_with_logit(v, t) } else { kernels::bce_prob(v, t) };
                total += w * l;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::Bce {
                x,
                target: target.clone(),
                weight: weight.clone(),
                norm,
                logits,
            },
            ng,
        ))
    }

    /// `Σ w·BCE(σ(z), t) / norm`, evaluated from logits.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor, weight: &Tensor, norm: f64) -> Result<Var> {
        self.bce(z, target, weight, norm, true)
    }

    /// `Σ w·BCE(p, t) / norm` for probabilities `p` (clamped away from 0 and 1).
    pub fn bce_with_probs(&mut self, p: Var, target: &Tensor, weight: &Tensor, norm: f64) -> Result<Var> {
        self.bce(p, target, weight, norm, false)
    }

    /// Runs an LSTM over `x: [B, T, I]` with gate order (input, forget, cell, output).
    ///
    /// Returns `[B, T, 2H]` holding `(h_t, c_t)` for every step, aligned with
    /// the input time axis even when `reverse` scans from `T-1` down to 0.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        h0: Option<Var>,
        c0: Option<Var>,
        reverse: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w_hh).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != 4 * ws[0] {
            return Err(Error::Shape { op: "lstm", lhs: xs, rhs: ws });
        }
        let (b, t, i) = (xs[0], xs[1], xs[2]);
        let h = ws[0];
        if self.shape(w_ih) != [i, 4 * h] || self.shape(bias) != [4 * h] {
            return Err(Error::Shape {
                op: "lstm",
                lhs: xs,
                rhs: self.shape(w_ih).to_vec(),
            });
        }
        for s in [h0, c0].into_iter().flatten() {
            if self.shape(s) != [b, h] {
                return Err(Error::Shape {
                    op: "lstm initial state",
                    lhs: vec![b, h],
                    rhs: self.shape(s).to_vec(),
                });
            }
        }
        let dims = LstmDims { b, t, i, h };
        let (out, saved) = lstm_forward(
            dims,
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(bias),
            h0.map(|v| self.value(v)),
            c0.map(|v| self.value(v)),
            reverse,
        );
        let ng = [Some(x), Some(w_ih), Some(w_hh), Some(bias), h0, c0]
            .into_iter()
            .flatten()
            .any(|v| self.ng(v));
        let saved = LstmSaved {
            dims,
            x,
            w_ih,
            w_hh,
            bias,
            h0,
            c0,
            reverse,
            gates: if ng { saved } else { Vec::new() },
        };
        Ok(self.push(out, Op::Lstm(Box::new(saved)), ng))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients of every parameter bound on this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self.bound.iter().map(|(&id, &v)| (id, grads.get(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b, ba, bb) => {
                self.acc(grads, *a, |d| ba.reduce_into(g, d));
                self.acc(grads, *b, |d| bb.reduce_into(g, d));
            }
            Op::Sub(a, b, ba, bb) => {
                self.acc(grads, *a, |d| ba.reduce_into(g, d));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(grads, *b, |d| bb.reduce_into(&neg, d));
            }
            Op::Mul(a, b, ba, bb) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * vb[bb.index(i)]).collect();
                    self.acc(grads, *a, |d| ba.reduce_into(&ga, d));
                }
                if self.ng(*b) {
                    let gb: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * va[ba.index(i)]).collect();
                    self.acc(grads, *b, |d| bb.reduce_into(&gb, d));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += c * gv;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            }),
            Op::MatMul(a, b, plan) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = self.ng(*a).then(|| vec![0.0; va.numel()]);
                let mut db = self.ng(*b).then(|| vec![0.0; vb.numel()]);
                plan.backward(va, vb, gout, da.as_deref_mut(), db.as_deref_mut());
                if let Some(da) = da {
                    self.acc(grads, *a, |d| add_into(d, &da));
                }
                if let Some(db) = db {
                    self.acc(grads, *b, |d| add_into(d, &db));
                }
            }
            Op::Gather(x, map) => self.acc(grads, *x, |d| {
                for (gv, &j) in g.iter().zip(map) {
                    d[j] += gv;
                }
            }),
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, alen, inner) = kernels::split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        add_into(&mut d[base..base + len * inner], src);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * yv;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), v) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv / v;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let dim = *node.value.shape().last().unwrap();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / dim;
                if self.ng(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let xr = &xhat[r * dim..(r + 1) * dim];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / dim as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] = inv_std[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, |d| add_into(d, &dx));
                }
                self.acc(grads, *gain, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for r in 0..rows {
                        add_into(d, &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += gv));
            }
            Op::Bce { x, target, weight, norm, logits } => {
                let gv = g[0] / norm;
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (((dv, &v), &t), &w) in d.iter_mut().zip(xv).zip(target.data()).zip(weight.data()) {
                        if w == 0.0 {
                            continue;
                        }
                        let local = if *logits {
                            kernels::sigmoid(v) - t
                        } else {
                            let p = v.clamp(kernels::PROB_EPS, 1.0 - kernels::PROB_EPS);
                            (p - t) / (p * (1.0 - p))
                        };
                        *dv += gv * w * local;
                    }
                });
            }
            Op::Lstm(s) => self.lstm_backward(s, g, grads),
        }
    }

    /// Runs `f` on the gradient buffer of `v`, creating it on first use.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn lstm_backward(&self, s: &LstmSaved, g: &[f64], grads: &mut [Option<Tensor>]) {
        let LstmDims { b, t, i, h } = s.dims;
        let h4 = 4 * h;
        let w_ih = self.value(s.w_ih).data();
        let w_hh = self.value(s.w_hh).data();
        let xv = self.value(s.x).data();
        let out = s.gates.as_slice();
        // out layout per (b, t): [i f g o | tanh(c) | c_prev | h_prev], 7H values
        let stride = 7 * h;
        let mut dz = vec![0.0; b * t * h4];
        let mut dh_carry = vec![0.0; b * h];
        let mut dc_carry = vec![0.0; b * h];
        let order: Vec<usize> = if s.reverse { (0..t).collect() } else { (0..t).rev().collect() };
        for &tt in &order {
            for bi in 0..b {
                let sv = &out[(bi * t + tt) * stride..(bi * t + tt + 1) * stride];
                let (ig, fg, gg, og) = (&sv[0..h], &sv[h..2 * h], &sv[2 * h..3 * h], &sv[3 * h..4 * h]);
                let tc = &sv[4 * h..5 * h];
                let c_prev = &sv[5 * h..6 * h];
                let gy = &g[(bi * t + tt) * 2 * h..(bi * t + tt + 1) * 2 * h];
                let dzr = &mut dz[(bi * t + tt) * h4..(bi * t + tt + 1) * h4];
                for k in 0..h {
                    let dh = gy[k] + dh_carry[bi * h + k];
                    let dc = gy[h + k] + dc_carry[bi * h + k] + dh * og[k] * (1.0 - tc[k] * tc[k]);
                    let d_o = dh * tc[k];
                    let d_i = dc * gg[k];
                    let d_g = dc * ig[k];
                    let d_f = dc * c_prev[k];
                    dzr[k] = d_i * ig[k] * (1.0 - ig[k]);
                    dzr[h + k] = d_f * fg[k] * (1.0 - fg[k]);
                    dzr[2 * h + k] = d_g * (1.0 - gg[k] * gg[k]);
                    dzr[3 * h + k] = d_o * og[k] * (1.0 - og[k]);
                    dc_carry[bi * h + k] = dc * fg[k];
                }
                let carry = &mut dh_carry[bi * h..(bi + 1) * h];
                carry.iter_mut().for_each(|v| *v = 0.0);
                kernels::mm_nt(dzr, w_hh, carry, 1, h4, h);
            }
        }
        let rows = b * t;
        if self.ng(s.x) {
            let mut dx = vec![0.0; rows * i];
            kernels::mm_nt(&dz, w_ih, &mut dx, rows, h4, i);
            self.acc(grads, s.x, |d| add_into(d, &dx));
        }
        self.acc(grads, s.w_ih, |d| kernels::mm_tn(xv, &dz, d, rows, i, h4));
        if self.ng(s.w_hh) {
            let mut hprev = vec![0.0; rows * h];
            for r in 0..rows {
                hprev[r * h..(r + 1) * h].copy_from_slice(&out[r * stride + 6 * h..r * stride + 7 * h]);
            }
            self.acc(grads, s.w_hh, |d| kernels::mm_tn(&hprev, &dz, d, rows, h, h4));
        }
        self.acc(grads, s.bias, |d| {
            for r in 0..rows {
                add_into(d, &dz[r * h4..(r + 1) * h4]);
            }
        });
        if let Some(h0) = s.h0 {
            self.acc(grads, h0, |d| add_into(d, &dh_carry));
        }
        if let Some(c0) = s.c0 {
            self.acc(grads, c0, |d| add_into(d, &dc_carry));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmDims {
    b: usize,
    t: usize,
    i: usize,
    h: usize,
}

struct LstmSaved {
    dims: LstmDims,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    h0: Option<Var>,
    c0: Option<Var>,
    reverse: bool,
    gates: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn lstm_forward(
    dims: LstmDims,
    x: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    h0: Option<&Tensor>,
    c0: Option<&Tensor>,
    reverse: bool,
) -> (Tensor, Vec<f64>) {
    let LstmDims { b, t, i, h } = dims;
    let h4 = 4 * h;
    let mut xw = vec![0.0; b * t * h4];
    kernels::mm_nn(x.data(), w_ih.data(), &mut xw, b * t, i, h4);
    let mut out = vec![0.0; b * t * 2 * h];
    let stride = 7 * h;
    let mut saved = vec![0.0; b * t * stride];
    let mut z = vec![0.0; h4];
    for bi in 0..b {
        let mut hs = h0.map(|v| v.row(bi).to_vec()).unwrap_or_else(|| vec![0.0; h]);
        let mut cs = c0.map(|v| v.row(bi).to_vec()).unwrap_or_else(|| vec![0.0; h]);
        for step in 0..t {
            let tt = if reverse { t - 1 - step } else { step };
            let r = bi * t + tt;
            z.copy_from_slice(&xw[r * h4..(r + 1) * h4]);
            add_into(&mut z, bias.data());
            kernels::mm_nn(&hs, w_hh.data(), &mut z, 1, h, h4);
            let sv = &mut saved[r * stride..(r + 1) * stride];
            sv[5 * h..6 * h].copy_from_slice(&cs);
            sv[6 * h..7 * h].copy_from_slice(&hs);
            for k in 0..h {
                let ig = kernels::sigmoid(z[k]);
                let fg = kernels::sigmoid(z[h + k]);
                let gg = z[2 * h + k].tanh();
                let og = kernels::sigmoid(z[3 * h + k]);
                let c = fg * cs[k] + ig * gg;
                let tc = c.tanh();
                cs[k] = c;
                hs[k] = og * tc;
                sv[k] = ig;
                sv[h + k] = fg;
                sv[2 * h + k] = gg;
                sv[3 * h + k] = og;
                sv[4 * h + k] = tc;
            }
            out[r * 2 * h..r * 2 * h + h].copy_from_slice(&hs);
            out[r * 2 * h + h..(r + 1) * 2 * h].copy_from_slice(&cs);
        }
    }
    (
        Tensor {
            shape: vec![b, t, 2 * h],
            data: out,
        },
        saved,
    )
}

/// Largest relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with the given `step`, using
/// `|a - n| / max(|a|, |n|, 1e-8)` per element.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(None, f, x, step)
}

/// [`grad_check`] on a graph bound to `store`, so `f` may use parameters.
pub fn grad_check_with<F>(store: Option<&ParamStore>, f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let graph = || match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    let mut g = graph();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.get(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = graph();
        let v = g.input(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += step;
        let mut minus = x.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[k], numeric));
    }
    Ok(worst)
}

/// Same check as [`grad_check`], taken over every scalar of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    let analytic: HashMap<ParamId, Tensor> = g.param_grads(&grads).into_iter().collect();
    drop(g);

    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let l = f(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.value(id).numel() {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&id).map(|t| t.data()[k]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
