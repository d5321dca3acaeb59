//! Reverse-mode tape over the fixed kernel set.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar loss with
//! respect to every node that depends on a parameter or a tracked leaf.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::params::{ParamStore, RunningStats};
use super::{RngStream, Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm constants.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        axis: usize,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Reshape(Var),
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Pocm {
        x: Var,
        omega: Var,
        beta: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Mix {
        branches: Vec<Var>,
        weights: Var,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter; repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geo }, &ins))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
    ) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, stride }, &ins))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Dense { x, w, b }, &ins))
    }

    /// Batch normalization along `axis` (channel axis of `[N, C, T, F]`, or
    /// the feature axis of `[rows, features]`).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        axis: usize,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(format!("batch norm axis {axis} on rank {}", xv.rank())));
        }
        let layout = kernels::axis_layout(xv.shape(), axis);
        let (outer, ch, inner) = layout;
        if self.value(scale).shape() != [ch] || self.value(shift).shape() != [ch] {
            return Err(Error::config(format!(
                "batch norm affine parameters must have {ch} entries"
            )));
        }
        if stats.mean.len() != ch {
            return Err(Error::config(format!(
                "batch norm statistics track {} channels, input has {ch}",
                stats.mean.len()
            )));
        }
        let eps = T::c(BN_EPS);
        let train = mode == Mode::Train;
        let (mean, var) = if train {
            let (mean, var) = kernels::channel_moments(xv.data(), layout);
            let count = outer * inner;
            let mom = T::c(BN_MOMENTUM);
            let unbias = if count > 1 {
                T::c(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..ch {
                stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = xv.data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xhat[i] - mean[c]) * inv_std[c];
                    y[i] = sc[c] * xhat[i] + sh[c];
                }
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                axis,
                train,
            },
            &[x, scale, shift],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = kernels::softmax(self.value(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let y = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        Ok(self.push(y, Op::Dropout { x, mask }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k), &[x])
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .shape()
            .to_vec();
        let n = first[0];
        let rest = &first[2..];
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || &s[2..] != rest {
                return Err(Error::shape(format!("concat {first:?} with {s:?}")));
            }
            channels += s[1];
        }
        let inner: usize = rest.iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).slice_outer(i));
            }
        }
        let mut shape = vec![n, channels];
        shape.extend_from_slice(rest);
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Per-channel affine modulation: `γ_c·X_c + β_c` with `γ, β: [N, C]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [n, c] {
                return Err(Error::shape(format!(
                    "FiLM {what} {:?} for features {:?}",
                    self.shape(v),
                    xv.shape()
                )));
            }
        }
        let inner = xv.len() / (n * c).max(1);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = xv.data().to_vec();
        for (k, plane) in y.chunks_mut(inner.max(1)).enumerate() {
            for v in plane.iter_mut() {
                *v = g[k] * *v + b[k];
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(y, Op::Film { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Point-wise convolutional modulation: `β_c + Σ_j ω_cj·X_j` with
    /// `ω: [N, C, C]`, `β: [N, C]`.
    pub fn pocm(&mut self, x: Var, omega: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        if self.shape(omega) != [n, c, c] || self.shape(beta) != [n, c] {
            return Err(Error::shape(format!(
                "PoCM parameters {:?}/{:?} for features {:?}",
                self.shape(omega),
                self.shape(beta),
                xv.shape()
            )));
        }
        let inner = xv.len() / (n * c).max(1);
        let w = self.value(omega).data();
        let b = self.value(beta).data();
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            let xi = xv.slice_outer(i);
            let yi = &mut y[i * c * inner..(i + 1) * c * inner];
            for (co, out) in yi.chunks_mut(inner.max(1)).enumerate() {
                out.fill(b[i * c + co]);
                for j in 0..c {
                    let wij = w[(i * c + co) * c + j];
                    for (o, &xv) in out.iter_mut().zip(&xi[j * inner..(j + 1) * inner]) {
                        *o += wij * xv;
                    }
                }
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(y, Op::Pocm { x, omega, beta }, &[x, omega, beta]))
    }

    /// Columns `start..start+len` of an `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = match *xv.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::shape(format!("slice_cols needs [N, D], got {:?}", xv.shape()))),
        };
        if start + len > d {
            return Err(Error::shape(format!("columns {start}..{} of {d}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for row in xv.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let y = Tensor::new(vec![n, len], data)?;
        Ok(self.push(y, Op::SliceCols { x, start }, &[x]))
    }

    /// Attention-weighted branch sum. Each branch is `[N·G, F]` with the rows
    /// of example `n` contiguous; `weights` is `[N, K]`.
    pub fn mix(&mut self, branches: &[Var], weights: Var) -> Result<Var> {
        let k = branches.len();
        let first = self
            .value(*branches.first().ok_or_else(|| Error::shape("mix of no branches"))?)
            .shape()
            .to_vec();
        for &b in branches {
            if self.shape(b) != first.as_slice() {
                return Err(Error::shape("mix branches differ in shape"));
            }
        }
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || ws[1] != k || ws[0] == 0 || !first[0].is_multiple_of(ws[0]) {
            return Err(Error::shape(format!(
                "mix weights {ws:?} for {k} branches of {first:?}"
            )));
        }
        let n = ws[0];
        let per = self.value(branches[0]).len() / n;
        let w = self.value(weights).data().to_vec();
        let mut y = vec![T::zero(); self.value(branches[0]).len()];
        for (bi, &b) in branches.iter().enumerate() {
            let bv = self.value(b).data();
            for i in 0..n {
                let wk = w[i * k + bi];
                let range = i * per..(i + 1) * per;
                for (o, &v) in y[range.clone()].iter_mut().zip(&bv[range]) {
                    if bi == 0 {
                        *o = wk * v;
                    } else {
                        *o += wk * v;
                    }
                }
            }
        }
        let y = Tensor::new(first, y)?;
        let mut ins = branches.to_vec();
        ins.push(weights);
        Ok(self.push(
            y,
            Op::Mix {
                branches: branches.to_vec(),
                weights,
            },
            &ins,
        ))
    }

    /// Selects rows of a `[V, D]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.dim(0), tv.dim(1));
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(Error::Validation(format!("row {r} outside table of {v}")));
            }
            data.extend_from_slice(tv.slice_outer(r));
        }
        let y = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            y,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "mse")?;
        let p = self.value(pred);
        let t = self.value(target);
        let count = T::c(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(s / count), Op::Mse { pred, target }, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Gradient of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.backprop(&node.op, &node.value, &dy, &mut grads)?;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo } => {
                let g = kernels::conv2d_backward(self.value(*x), self.value(*w), dy, *geo, self.wants(*x))?;
                if let Some(dx) = g.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, g.dw);
                if let Some(b) = b {
                    self.acc(grads, *b, g.db);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let g = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    self.wants(*x),
                )?;
                if let Some(dx) = g.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, g.dw);
                if let Some(b) = b {
                    self.acc(grads, *b, g.db);
                }
            }
            Op::Dense { x, w, b } => {
                let g = kernels::dense_backward(self.value(*x), self.value(*w), dy, self.wants(*x));
                if let Some(dx) = g.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, g.dw);
                if let Some(b) = b {
                    self.acc(grads, *b, g.db);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                axis,
                train,
            } => {
                let (outer, ch, inner) = kernels::axis_layout(y.shape(), *axis);
                let sc = self.value(*scale).data();
                let dyd = dy.data();
                let mut dscale = vec![T::zero(); ch];
                let mut dshift = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            dscale[c] += dyd[i] * xhat[i];
                            dshift[c] += dyd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dyd.len()];
                    let m = T::c((outer * inner) as f64);
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            for i in base..base + inner {
                                dx[i] = if *train {
                                    // d/dx of scale·(x-μ)/σ with batch μ, σ
                                    sc[c] * inv_std[c] / m
                                        * (m * dyd[i] - dshift[c] - xhat[i] * dscale[c])
                                } else {
                                    sc[c] * inv_std[c] * dyd[i]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                self.acc(grads, *scale, Tensor::new(vec![ch], dscale)?);
                self.acc(grads, *shift, Tensor::new(vec![ch], dshift)?);
            }
            Op::Relu(x) => {
                let g = y.zip_map(dy, |v, d| if v > T::zero() { d } else { T::zero() });
                self.acc(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = y.zip_map(dy, |s, d| d * s * (T::one() - s));
                self.acc(grads, *x, g);
            }
            Op::Softmax(x) => {
                let k = *y.shape().last().unwrap_or(&1);
                let mut g = dy.data().to_vec();
                for (grow, yrow) in g.chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                    for (gv, &s) in grow.iter_mut().zip(yrow) {
                        *gv = s * (*gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Dropout { x, mask } => {
                let g = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, dy.zip_map(self.value(*b), |d, q| d * q));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, dy.zip_map(self.value(*a), |d, p| d * p));
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.acc(grads, *x, dy.map(|d| d * k));
            }
            Op::Concat(parts) => {
                let n = y.dim(0);
                let inner: usize = y.shape()[2..].iter().product();
                let total_c = y.dim(1);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(n * c * inner);
                        for i in 0..n {
                            let start = (i * total_c + offset) * inner;
                            g.extend_from_slice(&dy.data()[start..start + c * inner]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), g)?);
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let g = dy.clone().reshape(self.shape(*x).to_vec())?;
                self.acc(grads, *x, g);
            }
            Op::Film { x, gamma, beta } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.len() / (n * c).max(1);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); n * c];
                let mut dbeta = vec![T::zero(); n * c];
                let mut dx = vec![T::zero(); xv.len()];
                for k in 0..n * c {
                    let r = k * inner..(k + 1) * inner;
                    for ((&d, &xv), o) in dy.data()[r.clone()].iter().zip(&xv.data()[r.clone()]).zip(&mut dx[r]) {
                        dgamma[k] += d * xv;
                        dbeta[k] += d;
                        *o = d * gv[k];
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.acc(grads, *gamma, Tensor::new(vec![n, c], dgamma)?);
                self.acc(grads, *beta, Tensor::new(vec![n, c], dbeta)?);
            }
            Op::Pocm { x, omega, beta } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.len() / (n * c).max(1);
                let w = self.value(*omega).data();
                let mut dw = vec![T::zero(); n * c * c];
                let mut db = vec![T::zero(); n * c];
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..n {
                    let xi = xv.slice_outer(i);
                    let dyi = dy.slice_outer(i);
                    let dxi = &mut dx[i * c * inner..(i + 1) * c * inner];
                    for co in 0..c {
                        let drow = &dyi[co * inner..(co + 1) * inner];
                        db[i * c + co] = drow.iter().copied().sum();
                        for j in 0..c {
                            let xrow = &xi[j * inner..(j + 1) * inner];
                            dw[(i * c + co) * c + j] =
                                drow.iter().zip(xrow).map(|(&d, &v)| d * v).sum();
                            let wij = w[(i * c + co) * c + j];
                            for (o, &d) in dxi[j * inner..(j + 1) * inner].iter_mut().zip(drow) {
                                *o += wij * d;
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.acc(grads, *omega, Tensor::new(vec![n, c, c], dw)?);
                self.acc(grads, *beta, Tensor::new(vec![n, c], db)?);
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x).to_vec();
                let len = y.dim(1);
                let mut g = vec![T::zero(); xs[0] * xs[1]];
                for (row, drow) in g.chunks_mut(xs[1]).zip(dy.data().chunks(len)) {
                    row[*start..*start + len].copy_from_slice(drow);
                }
                self.acc(grads, *x, Tensor::new(xs, g)?);
            }
            Op::Mix { branches, weights } => {
                let k = branches.len();
                let n = self.shape(*weights)[0];
                let per = y.len() / n;
                let w = self.value(*weights).data();
                let mut dw = vec![T::zero(); n * k];
                for (bi, &b) in branches.iter().enumerate() {
                    let bv = self.value(b).data();
                    let mut db = if self.wants(b) { vec![T::zero(); y.len()] } else { Vec::new() };
                    for i in 0..n {
                        let r = i * per..(i + 1) * per;
                        dw[i * k + bi] = dy.data()[r.clone()]
                            .iter()
                            .zip(&bv[r.clone()])
                            .map(|(&d, &v)| d * v)
                            .sum();
                        if !db.is_empty() {
                            let wk = w[i * k + bi];
                            for (o, &d) in db[r.clone()].iter_mut().zip(&dy.data()[r]) {
                                *o = wk * d;
                            }
                        }
                    }
                    if !db.is_empty() {
                        self.acc(grads, b, Tensor::new(y.shape().to_vec(), db)?);
                    }
                }
                self.acc(grads, *weights, Tensor::new(vec![n, k], dw)?);
            }
            Op::Gather { table, rows } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut g = vec![T::zero(); ts[0] * d];
                for (&r, drow) in rows.iter().zip(dy.data().chunks(d)) {
                    for (o, &v) in g[r * d..(r + 1) * d].iter_mut().zip(drow) {
                        *o += v;
                    }
                }
                self.acc(grads, *table, Tensor::new(ts, g)?);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let k = dy.data()[0] * T::c(2.0 / p.len() as f64);
                if self.wants(*pred) {
                    self.acc(grads, *pred, p.zip_map(t, |a, b| k * (a - b)));
                }
                if self.wants(*target) {
                    self.acc(grads, *target, p.zip_map(t, |a, b| k * (b - a)));
                }
            }
            Op::Sum(x) => {
                let d = dy.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), d));
            }
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (name, &v) in &self.bound {
            if let (Some(g), Some(p)) = (grads.get(v), store.get_mut(name)) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Names of bound parameters, in no particular order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
