//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s together with the
//! forward values. Values on the tape are `f64`; leaves are widened from the
//! `f32` storage of [`Tensor`] and gradients are narrowed back when they are
//! accumulated into a [`ParamStore`].
//!
//! One tape per sample: tapes are cheap to create and independent tapes can
//! run on separate threads against a shared, read-only [`ParamStore`].

use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Glu(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    Resample(Var),
    MatMul(Var, Var),
    /// Keeps `W^{-T}` from the forward factorization.
    LogAbsDet(Var, Vec<f64>),
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path reaches it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// First element, for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a value off the tape at storage precision.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_f64(&node.shape, &node.value).expect("tape shapes are valid")
    }

    pub(crate) fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("{op_name} output"),
            });
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf | Op::Param => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => ng(a) || ng(b),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Glu(a)
            | Op::Resample(a)
            | Op::LogAbsDet(a, _)
            | Op::SliceRows { input: a, .. } => ng(a),
            Op::Conv1d {
                input, kernel, bias, ..
            } => ng(input) || ng(kernel) || ng(bias),
            Op::ConcatRows(parts) => parts.iter().any(ng),
        }
    }

    /// Untracked input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), false)
    }

    /// Untracked input given directly at tape precision.
    pub fn constant_f64(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::dim("constant", "data length", numel(shape), value.len()));
        }
        Ok(self.leaf(shape.to_vec(), value, false))
    }

    /// Tracked input that is not a stored parameter.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), true)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored parameter on the tape; repeated calls share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().iter().map(|&v| v as f64).collect(),
            op: Op::Param,
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// Reverse sweep from a scalar.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let n = self.numel(loss);
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_leaves.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::gradients`] and adds parameter gradients into `store`.
    ///
    /// Repeated calls accumulate; zero the store between steps.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        accumulate(&grads, store);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                send(*a, reduce_broadcast(g, &node.shape, self.shape(*a)));
                send(*b, reduce_broadcast(g, &node.shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reduce_broadcast(g, &node.shape, self.shape(*a)));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, reduce_broadcast(&neg, &node.shape, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (ia, ib) = (
                    broadcast_map(&node.shape, self.shape(*a)),
                    broadcast_map(&node.shape, self.shape(*b)),
                );
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|k| g[k] * vb[ib[k]]).collect();
                let gb: Vec<f64> = (0..g.len()).map(|k| g[k] * va[ia[k]]).collect();
                send(*a, scatter(&ga, &ia, va.len()));
                send(*b, scatter(&gb, &ib, vb.len()));
            }
            Op::Div(a, b) => {
                let (ia, ib) = (
                    broadcast_map(&node.shape, self.shape(*a)),
                    broadcast_map(&node.shape, self.shape(*b)),
                );
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|k| g[k] / vb[ib[k]]).collect();
                let gb: Vec<f64> = (0..g.len())
                    .map(|k| -g[k] * va[ia[k]] / (vb[ib[k]] * vb[ib[k]]))
                    .collect();
                send(*a, scatter(&ga, &ia, va.len()));
                send(*b, scatter(&gb, &ib, vb.len()));
            }
            Op::Neg(a) => send(*a, g.iter().map(|v| -v).collect()),
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Exp(a) => send(*a, zip_map(g, &node.value, |g, y| g * y)),
            Op::Log(a) => send(*a, zip_map(g, val(*a), |g, x| g / x)),
            Op::Tanh(a) => send(*a, zip_map(g, &node.value, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, zip_map(g, &node.value, |g, y| g * y * (1.0 - y))),
            Op::Square(a) => send(*a, zip_map(g, val(*a), |g, x| 2.0 * g * x)),
            Op::Abs(a) => send(*a, zip_map(g, val(*a), |g, x| g * x.signum())),
            Op::Clamp(a, lo, hi) => send(*a, zip_map(g, val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 })),
            Op::Sum(a) => send(*a, vec![g[0]; self.numel(*a)]),
            Op::Mean(a) => {
                let n = self.numel(*a);
                send(*a, vec![g[0] / n as f64; n])
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = conv1d_backward(
                    g,
                    val(*input),
                    self.shape(*input),
                    val(*kernel),
                    self.shape(*kernel),
                    *stride,
                    *padding,
                );
                send(*input, gx);
                send(*kernel, gw);
                send(*bias, gb);
            }
            Op::Glu(a) => {
                let x = val(*a);
                let half = x.len() / 2;
                let mut gx = vec![0.0; x.len()];
                for k in 0..half {
                    let s = sigmoid(x[half + k]);
                    gx[k] = g[k] * s;
                    gx[half + k] = g[k] * x[k] * s * (1.0 - s);
                }
                send(*a, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.numel(*p);
                    send(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { input, start } => {
                let cols = node.shape[1];
                let mut gx = vec![0.0; self.numel(*input)];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                send(*input, gx);
            }
            Op::Resample(a) => {
                let (rows, t_in) = (self.shape(*a)[0], self.shape(*a)[1]);
                let t_out = node.shape[1];
                let mut gx = vec![0.0; rows * t_in];
                for r in 0..rows {
                    for t in 0..t_out {
                        gx[r * t_in + resample_source(t, t_in, t_out)] += g[r * t_out + t];
                    }
                }
                send(*a, gx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for l in 0..k {
                            ga[i * k + l] += gij * vb[l * n + j];
                            gb[l * n + j] += va[i * k + l] * gij;
                        }
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::LogAbsDet(a, inv_t) => send(*a, inv_t.iter().map(|v| v * g[0]).collect()),
        }
    }
}

/// Parameter gradients detached from their tape, summed in f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn from_gradients(g: &Gradients) -> Self {
        Self {
            grads: g.params().filter_map(|(id, g)| g.map(|g| (id, g.to_vec()))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }

    /// Elementwise sum; parameters missing on either side are kept.
    pub fn add(&mut self, other: &ParamGrads) {
        for (id, g) in &other.grads {
            match self.grads.iter_mut().find(|(i, _)| i == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => self.grads.push((*id, g.clone())),
            }
        }
        self.grads.sort_by_key(|(id, _)| *id);
    }

    /// Adds into the store's f32 grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.grads {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

/// Adds every parameter gradient in `grads` into the matching grad buffer.
pub fn accumulate(grads: &Gradients, store: &mut ParamStore) {
    for (id, g) in grads.params() {
        if let Some(g) = g {
            store.get_mut(id).accumulate_grad(g);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

/// Nearest-neighbour source index when resampling `t_in` steps to `t_out`.
pub(crate) fn resample_source(t: usize, t_in: usize, t_out: usize) -> usize {
    (t * t_in) / t_out
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => return Err(Error::dim(op, format!("axis {i}"), x, y)),
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if out == input {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + offset] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += in_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= in_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn scatter(g: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (gv, &j) in g.iter().zip(map) {
        out[j] += gv;
    }
    out
}

fn reduce_broadcast(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let map = broadcast_map(out_shape, in_shape);
    scatter(g, &map, numel(in_shape))
}

pub(crate) fn pad_rows(x: &[f64], rows: usize, t: usize, padding: usize) -> Vec<f64> {
    if padding == 0 {
        return x.to_vec();
    }
    let tp = t + 2 * padding;
    let mut xp = vec![0.0; rows * tp];
    for r in 0..rows {
        xp[r * tp + padding..r * tp + padding + t].copy_from_slice(&x[r * t..(r + 1) * t]);
    }
    xp
}

pub(crate) fn conv1d_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    b: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize) {
    let (c_in, t) = (x_shape[0], x_shape[1]);
    let (c_out, k) = (w_shape[0], w_shape[2]);
    let tp = t + 2 * padding;
    let t_out = (tp - k) / stride + 1;
    let xp = pad_rows(x, c_in, t, padding);
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        let orow = &mut out[co * t_out..(co + 1) * t_out];
        orow.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xrow = &xp[ci * tp..(ci + 1) * tp];
            for kk in 0..k {
                let wv = w[(co * c_in + ci) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                if stride == 1 {
                    for (o, xv) in orow.iter_mut().zip(&xrow[kk..kk + t_out]) {
                        *o += wv * xv;
                    }
                } else {
                    for (tt, o) in orow.iter_mut().enumerate() {
                        *o += wv * xrow[tt * stride + kk];
                    }
                }
            }
        }
    }
    (out, t_out)
}

fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c_in, t) = (x_shape[0], x_shape[1]);
    let (c_out, k) = (w_shape[0], w_shape[2]);
    let tp = t + 2 * padding;
    let t_out = (tp - k) / stride + 1;
    let xp = pad_rows(x, c_in, t, padding);
    let mut gxp = vec![0.0; c_in * tp];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for co in 0..c_out {
        let grow = &g[co * t_out..(co + 1) * t_out];
        gb[co] = grow.iter().sum();
        for ci in 0..c_in {
            let xrow = &xp[ci * tp..(ci + 1) * tp];
            let gxrow = &mut gxp[ci * tp..(ci + 1) * tp];
            for kk in 0..k {
                let widx = (co * c_in + ci) * k + kk;
                let wv = w[widx];
                let mut acc = 0.0;
                if stride == 1 {
                    for (tt, gv) in grow.iter().enumerate() {
                        acc += gv * xrow[tt + kk];
                        gxrow[tt + kk] += wv * gv;
                    }
                } else {
                    for (tt, gv) in grow.iter().enumerate() {
                        acc += gv * xrow[tt * stride + kk];
                        gxrow[tt * stride + kk] += wv * gv;
                    }
                }
                gw[widx] += acc;
            }
        }
    }
    let gx = if padding == 0 {
        gxp
    } else {
        let mut gx = vec![0.0; c_in * t];
        for r in 0..c_in {
            gx[r * t..(r + 1) * t].copy_from_slice(&gxp[r * tp + padding..r * tp + padding + t]);
        }
        gx
    };
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_bias_over_time() {
        // [2,1] broadcast over [2,3]
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        // [3] broadcast over [2,3]
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        // scalar
        assert_eq!(broadcast_map(&[2, 2], &[]), vec![0; 4]);
    }

    #[test]
    fn broadcast_shape_rejects_mismatch() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert!(broadcast_shape("t", &[4, 3], &[2]).is_err());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let v = tape.variable(&Tensor::zeros(&[3]));
        assert!(matches!(tape.gradients(v), Err(Error::Contract(_))));
    }
}
