//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Model parameters from a
//! [`ParamStore`] are bound as the first leaves, so a parameter's index in the
//! store is also its [`Var`]. Calling [`Graph::backward`] on a scalar node
//! returns gradients for every node that depends on a parameter or on an input
//! created with [`Graph::input`].

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, matmul_nt_acc, matmul_tn_acc};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` = allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask { rows, cols, allowed }
    }

    /// Every query may attend to exactly the keys flagged in `keys`.
    pub fn keys(rows: usize, keys: &[bool]) -> Self {
        Self::from_fn(rows, keys.len(), |_, j| keys[j])
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    fn grad<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Marker for "no source element" in gather / scatter index maps.
pub const NO_INDEX: u32 = u32::MAX;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<u32>>),
    ScatterAdd(Var, Arc<Vec<u32>>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Haar(Var),
    Sum(Var),
    BceLogits {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    Focal {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        gamma: T,
        alpha: T,
    },
    L1(Var, Vec<T>),
    Giou(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    n_params: usize,
    fault: Option<Fault>,
}

/// Deliberate backward-pass bugs, used to show the gradient checks catch them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient reaching the right operand of every matmul.
    NegateMatMulRhs,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn empty() -> Self {
        Graph {
            nodes: Vec::new(),
            n_params: 0,
            fault: None,
        }
    }

    /// A graph whose first `store.len()` leaves are the store's parameters.
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn new(store: &ParamStore<T>) -> Self {
        let mut g = Graph {
            nodes: Vec::with_capacity(store.len() + 1024),
            n_params: store.len(),
            fault: None,
        };
        for t in store.tensors() {
            g.push(t.clone(), Op::Leaf, true);
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (e.g. input pixels for saliency maps).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x * s);
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, s), t)
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(dim_err!(
                "add_row: row of {} values for width {n}",
                self.value(row).len()
            ));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in v.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x = *x + b;
            }
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::nn::matmul(self.value(a), self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let t = self.tracked(&[a]);
        Ok(self.push(v, Op::Transpose(a), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let t = self.tracked(&[a]);
        Ok(self.push(v, Op::Reshape(a), t))
    }

    /// `out.flat[i] = src.flat[index[i]]`, or 0 where `index[i] == NO_INDEX`.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if index.len() != n {
            return Err(dim_err!("gather: {} indices for shape {shape:?}", index.len()));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == NO_INDEX {
                out.push(T::zero());
            } else {
                let x = *s
                    .get(i as usize)
                    .ok_or_else(|| dim_err!("gather index {i} out of {}", s.len()))?;
                out.push(x);
            }
        }
        let v = Tensor::new(shape, out)?;
        let t = self.tracked(&[src]);
        Ok(self.push(v, Op::Gather(src, index), t))
    }

    /// `out.flat[index[i]] += src.flat[i]`; entries with `NO_INDEX` are dropped.
    pub fn scatter_add(&mut self, src: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let s = self.value(src).data();
        if index.len() != s.len() {
            return Err(dim_err!(
                "scatter_add: {} indices for {} values",
                index.len(),
                s.len()
            ));
        }
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for (&i, &x) in index.iter().zip(s) {
            if i != NO_INDEX {
                let slot = out
                    .get_mut(i as usize)
                    .ok_or_else(|| dim_err!("scatter index {i} out of {n}"))?;
                *slot = *slot + x;
            }
        }
        let v = Tensor::new(shape, out)?;
        let t = self.tracked(&[src]);
        Ok(self.push(v, Op::ScatterAdd(src, index), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_rows of nothing"));
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        let t = self.tracked(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), t))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        let t = self.tracked(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), t))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows.iter() {
            if i >= r {
                return Err(dim_err!("gather_rows: row {i} out of {r}"));
            }
            out.extend_from_slice(src.row(i));
        }
        let v = Tensor::new(&[rows.len(), c], out)?;
        let t = self.tracked(&[a]);
        Ok(self.push(v, Op::GatherRows(a, rows), t))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let t = self.tracked(&[a]);
        self.push(v, Op::Act(a, f), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.act(a, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.act(a, Activation::Gelu)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err!("layer_norm: affine params must have {d} values"));
        }
        let (xhat, rstd) = crate::nn::normalize_rows(self.value(x), T::c(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let t = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q [nq×D]`, `k [nk×D]`, `v [nk×D]`. Masked-out keys get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let (out, probs) = crate::nn::attention_core(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            mask,
        )?;
        let t = self.tracked(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            t,
        ))
    }

    /// Orthonormal single-level Haar transform of an `[H×W]` map into `[4, H/2, W/2]`
    /// (LL, LH, HL, HH).
    pub fn haar(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("haar expects [H, W], got {shape:?}"));
        }
        let data = wavelet::haar_forward(self.value(x).data(), shape[0], shape[1])?;
        let v = Tensor::new(&[4, shape[0] / 2, shape[1] / 2], data)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Haar(x), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(v, Op::Sum(a), t)
    }

    /// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)` computed in logit space.
    pub fn bce_logits(&mut self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let xs = self.value(x).data();
        if targets.len() != xs.len() || weights.len() != xs.len() {
            return Err(dim_err!(
                "bce: {} logits, {} targets, {} weights",
                xs.len(),
                targets.len(),
                weights.len()
            ));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::c(t)).collect();
        let weights: Vec<T> = weights.iter().map(|&w| T::c(w)).collect();
        let mut total = T::zero();
        for ((&xi, &ti), &wi) in xs.iter().zip(&targets).zip(&weights) {
            total = total + wi * (kernels::softplus(xi) - ti * xi);
        }
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                x,
                targets,
                weights,
            },
            t,
        ))
    }

    /// `Σ wᵢ · FL(xᵢ, tᵢ)` with `FL = −α_t (1 − p_t)^γ ln p_t`.
    pub fn focal(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
        gamma: f64,
        alpha: f64,
    ) -> Result<Var> {
        let xs = self.value(x).data();
        if targets.len() != xs.len() || weights.len() != xs.len() {
            return Err(dim_err!("focal: length mismatch"));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::c(t)).collect();
        let weights: Vec<T> = weights.iter().map(|&w| T::c(w)).collect();
        let (gamma, alpha) = (T::c(gamma), T::c(alpha));
        let mut total = T::zero();
        for ((&xi, &ti), &wi) in xs.iter().zip(&targets).zip(&weights) {
            total = total + wi * focal_term(xi, ti, gamma, alpha).0;
        }
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                x,
                targets,
                weights,
                gamma,
                alpha,
            },
            t,
        ))
    }

    /// `Σ |xᵢ − targetᵢ|`.
    pub fn l1(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xs = self.value(x).data();
        if target.len() != xs.len() {
            return Err(dim_err!("l1: length mismatch"));
        }
        let target: Vec<T> = target.iter().map(|&t| T::c(t)).collect();
        let total = xs
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>();
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::L1(x, target), t))
    }

    /// `Σ (1 − GIoU)` over rows of `x [n×4]` (cxcywh) against `target [n×4]`.
    pub fn giou_loss(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xs = self.value(x);
        if xs.cols() != 4 || target.len() != xs.len() {
            return Err(dim_err!("giou_loss: expected [n, 4] boxes"));
        }
        let positive = |w: f64, h: f64| w > 0.0 && h > 0.0;
        if xs.data().chunks(4).any(|b| !positive(b[2].f64(), b[3].f64()))
            || target.chunks(4).any(|b| !positive(b[2], b[3]))
        {
            return Err(Error::Input("box with non-positive extent".into()));
        }
        let target: Vec<T> = target.iter().map(|&t| T::c(t)).collect();
        let total = xs
            .data()
            .chunks(4)
            .zip(target.chunks(4))
            .map(|(p, g)| crate::boxes::giou_loss_grad(p, g).0)
            .sum::<T>();
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Giou(x, target), t))
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        if !self.value(root).all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![T::one()])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |buf| axpy(buf, gd, T::one()));
                self.acc_with(grads, *b, |buf| axpy(buf, gd, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |buf| axpy(buf, gd, T::one()));
                self.acc_with(grads, *b, |buf| axpy(buf, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                self.acc_with(grads, *a, |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(gd).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                self.acc_with(grads, *b, |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(gd).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::Scale(a, s) => self.acc_with(grads, *a, |buf| axpy(buf, gd, *s)),
            Op::AddRow(a, row) => {
                self.acc_with(grads, *a, |buf| axpy(buf, gd, T::one()));
                let n = g.cols();
                self.acc_with(grads, *row, |buf| {
                    for chunk in gd.chunks(n) {
                        axpy(buf, chunk, T::one());
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc_with(grads, *a, |buf| matmul_nt_acc(gd, bv.data(), buf, m, k, n));
                if self.fault == Some(Fault::NegateMatMulRhs) {
                    self.acc_with(grads, *b, |buf| {
                        let mut tmp = vec![T::zero(); buf.len()];
                        matmul_tn_acc(av.data(), gd, &mut tmp, m, k, n);
                        axpy(buf, &tmp, -T::one());
                    });
                } else {
                    self.acc_with(grads, *b, |buf| matmul_tn_acc(av.data(), gd, buf, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose().expect("2-D");
                self.acc_with(grads, *a, |buf| axpy(buf, gt.data(), T::one()));
            }
            Op::Reshape(a) => self.acc_with(grads, *a, |buf| axpy(buf, gd, T::one())),
            Op::Gather(src, index) => self.acc_with(grads, *src, |buf| {
                for (&i, &gi) in index.iter().zip(gd) {
                    if i != NO_INDEX {
                        buf[i as usize] = buf[i as usize] + gi;
                    }
                }
            }),
            Op::ScatterAdd(src, index) => self.acc_with(grads, *src, |buf| {
                for (o, &i) in buf.iter_mut().zip(index.iter()) {
                    if i != NO_INDEX {
                        *o = *o + gd[i as usize];
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    let chunk = &gd[offset..offset + n];
                    self.acc_with(grads, *p, |buf| axpy(buf, chunk, T::one()));
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                self.acc_with(grads, *a, |buf| {
                    axpy(&mut buf[start * c..start * c + gd.len()], gd, T::one())
                });
            }
            Op::GatherRows(a, rows) => {
                let c = g.cols();
                self.acc_with(grads, *a, |buf| {
                    for (r, chunk) in rows.iter().zip(gd.chunks(c)) {
                        axpy(&mut buf[r * c..(r + 1) * c], chunk, T::one());
                    }
                });
            }
            Op::Act(a, f) => {
                let x = nodes[a.0].value.data();
                let y = node.value.data();
                self.acc_with(grads, *a, |buf| {
                    for (((o, &gi), &xi), &yi) in buf.iter_mut().zip(gd).zip(x).zip(y) {
                        *o = *o + gi * f.grad(xi, yi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let gam = nodes[gamma.0].value.data();
                self.acc_with(grads, *gamma, |buf| {
                    for (grow, xrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gi), &xh) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gi * xh;
                        }
                    }
                });
                self.acc_with(grads, *beta, |buf| {
                    for grow in gd.chunks(d) {
                        axpy(buf, grow, T::one());
                    }
                });
                let inv_d = T::one() / T::c(d as f64);
                self.acc_with(grads, *x, |buf| {
                    for (r, ((grow, xrow), orow)) in gd
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(buf.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = grow[j] * gam[j];
                            mean_dy = mean_dy + dy;
                            mean_dy_xhat = mean_dy_xhat + dy * xrow[j];
                        }
                        mean_dy = mean_dy * inv_d;
                        mean_dy_xhat = mean_dy_xhat * inv_d;
                        for j in 0..d {
                            let dy = grow[j] * gam[j];
                            orow[j] =
                                orow[j] + rstd[r] * (dy - mean_dy - xrow[j] * mean_dy_xhat);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (dq, dk, dv) =
                    crate::nn::attention_core_backward(qv, kv, vv, *heads, probs, g);
                self.acc_with(grads, *q, |buf| axpy(buf, dq.data(), T::one()));
                self.acc_with(grads, *k, |buf| axpy(buf, dk.data(), T::one()));
                self.acc_with(grads, *v, |buf| axpy(buf, dv.data(), T::one()));
            }
            Op::Haar(a) => {
                let s = nodes[a.0].value.shape();
                let back = wavelet::haar_inverse(gd, s[0], s[1]).expect("checked in forward");
                self.acc_with(grads, *a, |buf| axpy(buf, &back, T::one()));
            }
            Op::Sum(a) => {
                let gi = gd[0];
                self.acc_with(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gi;
                    }
                });
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                let xs = nodes[x.0].value.data();
                let gi = gd[0];
                self.acc_with(grads, *x, |buf| {
                    for (((o, &xi), &ti), &wi) in buf.iter_mut().zip(xs).zip(targets).zip(weights)
                    {
                        *o = *o + gi * wi * (kernels::sigmoid(xi) - ti);
                    }
                });
            }
            Op::Focal {
                x,
                targets,
                weights,
                gamma,
                alpha,
            } => {
                let xs = nodes[x.0].value.data();
                let gi = gd[0];
                self.acc_with(grads, *x, |buf| {
                    for (((o, &xi), &ti), &wi) in buf.iter_mut().zip(xs).zip(targets).zip(weights)
                    {
                        *o = *o + gi * wi * focal_term(xi, ti, *gamma, *alpha).1;
                    }
                });
            }
            Op::L1(x, target) => {
                let xs = nodes[x.0].value.data();
                let gi = gd[0];
                self.acc_with(grads, *x, |buf| {
                    for ((o, &xi), &ti) in buf.iter_mut().zip(xs).zip(target) {
                        let s = if xi > ti {
                            T::one()
                        } else if xi < ti {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o = *o + gi * s;
                    }
                });
            }
            Op::Giou(x, target) => {
                let xs = nodes[x.0].value.data();
                let gi = gd[0];
                self.acc_with(grads, *x, |buf| {
                    for ((o, p), t) in buf.chunks_mut(4).zip(xs.chunks(4)).zip(target.chunks(4)) {
                        let (_, d) = crate::boxes::giou_loss_grad(p, t);
                        for j in 0..4 {
                            o[j] = o[j] + gi * d[j];
                        }
                    }
                });
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn axpy<T: Scalar>(out: &mut [T], x: &[T], a: T) {
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = *o + a * xi;
    }
}

/// Focal loss term and its derivative with respect to the logit.
fn focal_term<T: Scalar>(x: T, t: T, gamma: T, alpha: T) -> (T, T) {
    let p = kernels::sigmoid(x);
    let q = T::one() - p;
    let ln_p = -kernels::softplus(-x);
    let ln_q = -kernels::softplus(x);
    // targets are binary; soft targets interpolate the two branches
    let pos = {
        let loss = -alpha * q.powf(gamma) * ln_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * ln_p - q);
        (loss, grad)
    };
    let neg = {
        let loss = -(T::one() - alpha) * p.powf(gamma) * ln_q;
        let grad = (T::one() - alpha) * p.powf(gamma) * (p - gamma * q * ln_q);
        (loss, grad)
    };
    (
        t * pos.0 + (T::one() - t) * neg.0,
        t * pos.1 + (T::one() - t) * neg.1,
    )
}
