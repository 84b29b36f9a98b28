//! Tensor primitives and the transformer building blocks (linear, layer norm,
//! multi-head attention, feed-forward) used by every encoder and decoder.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Activation, Graph, Mask, Var};
use crate::kernels::{self, matmul_acc};
use crate::params::{Init, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(dim_err!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(dim_err!("matmul inner extents {k} and {k2} differ"));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(dim_err!("softmax axis {axis} for shape {shape:?}"));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[at(j)];
            }
            kernels::softmax_row(&mut lane, None);
            for (j, &l) in lane.iter().enumerate() {
                data[at(j)] = l;
            }
        }
    }
    Ok(out)
}

/// Per-row standardization; returns the normalized values and `1/σ` per row.
pub(crate) fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let d = x.cols();
    let inv_d = T::one() / T::c(d as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.rows());
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(dim_err!("layer_norm: width {d} vs affine {}", gamma.len()));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let (mut xhat, _) = normalize_rows(x, T::c(eps));
    for row in xhat.chunks_mut(d) {
        for ((o, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Tensor::new(x.shape(), xhat)
}

fn check_attention_shapes<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<()> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(dim_err!("width {d} is not divisible by {heads} heads"));
    }
    if k.cols() != d || v.cols() != d {
        return Err(dim_err!(
            "attention widths differ: q {d}, k {}, v {}",
            k.cols(),
            v.cols()
        ));
    }
    if k.rows() != v.rows() {
        return Err(dim_err!("{} keys but {} values", k.rows(), v.rows()));
    }
    if let Some(m) = mask {
        if m.rows != q.rows() || m.cols != k.rows() {
            return Err(dim_err!(
                "mask {}×{} for {} queries and {} keys",
                m.rows,
                m.cols,
                q.rows(),
                k.rows()
            ));
        }
    }
    Ok(())
}

/// Scaled dot-product attention per head over projected inputs. Returns the
/// concatenated head outputs and the attention probabilities `[heads][nq][nk]`.
pub(crate) fn attention_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_attention_shapes(q, k, v, heads, mask)?;
    let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * d];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..nq {
            let qi = &q.row(i)[hs.clone()];
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k.row(j)[hs.clone()];
                *pj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            if !kernels::softmax_row(p, mask.map(|m| m.row(i))) {
                return Err(Error::DegenerateMask { row: i });
            }
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &pj) in p.iter().enumerate() {
                if pj == T::zero() {
                    continue;
                }
                for (ov, &vv) in o.iter_mut().zip(&v.row(j)[hs.clone()]) {
                    *ov = *ov + pj * vv;
                }
            }
        }
    }
    Ok((Tensor::new(&[nq, d], out)?, probs))
}

pub(crate) fn attention_core_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let gi = &grad.row(i)[hs.clone()];
            let mut dot = T::zero();
            for j in 0..nk {
                let vj = &v.row(j)[hs.clone()];
                dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                dot = dot + dp[j] * p[j];
                if p[j] != T::zero() {
                    for (o, &g) in dv.row_mut(j)[hs.clone()].iter_mut().zip(gi) {
                        *o = *o + p[j] * g;
                    }
                }
            }
            let qi = &q.row(i)[hs.clone()];
            for j in 0..nk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &k.row(j)[hs.clone()];
                for (o, &kv) in dq.row_mut(i)[hs.clone()].iter_mut().zip(kj) {
                    *o = *o + ds * kv;
                }
                for (o, &qv) in dk.row_mut(j)[hs.clone()].iter_mut().zip(qi) {
                    *o = *o + ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(pb, name, in_dim, out_dim, Init::DEFAULT)
    }

    pub fn with_init<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        pb.scope(name, |pb| Linear {
            w: pb.param("weight", &[in_dim, out_dim], init),
            b: pb.param("bias", &[out_dim], Init::Zeros),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add_row(y, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| LayerNorm {
            gamma: pb.param("gamma", &[dim], Init::Ones),
            beta: pb.param("beta", &[dim], Init::Zeros),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(dim_err!("width {dim} is not divisible by {heads} heads"));
        }
        Ok(pb.scope(name, |pb| AttentionParams {
            q: Linear::new(pb, "q", dim, dim),
            k: Linear::new(pb, "k", dim, dim),
            v: Linear::new(pb, "v", dim, dim),
            o: Linear::new(pb, "o", dim, dim),
            heads,
            dim,
        }))
    }

    /// Attention of `queries` over `context` (keys and values come from the same rows).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }

    pub fn forward_qkv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let v = self.v.forward(g, v_in)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }
}

/// `linear(D→hidden) → activation → linear(hidden→D)`.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Ffn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Self {
        pb.scope(name, |pb| Ffn {
            fc1: Linear::new(pb, "fc1", dim, hidden),
            fc2: Linear::new(pb, "fc2", hidden, dim),
            act: Activation::Gelu,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.act(h, self.act);
        self.fc2.forward(g, h)
    }
}

/// Two-layer prediction head `linear(D→D) → GELU → linear(D→out)`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, out: usize) -> Self {
        pb.scope(name, |pb| Mlp {
            fc1: Linear::new(pb, "fc1", dim, dim),
            fc2: Linear::new(pb, "fc2", dim, out),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(EncoderLayer {
                ln1: LayerNorm::new(pb, "ln1", dim),
                attn: AttentionParams::new(pb, "attn", dim, heads)?,
                ln2: LayerNorm::new(pb, "ln2", dim),
                ffn: Ffn::new(pb, "ffn", dim, 4 * dim),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Evaluates `multi_head_attention` outside of any training graph.
pub fn multi_head_attention<T: Scalar>(
    store: &ParamStore<T>,
    params: &AttentionParams,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    for t in [q, k, v] {
        if t.cols() != params.dim {
            return Err(dim_err!("input width {} vs model width {}", t.cols(), params.dim));
        }
    }
    let mut g = Graph::new(store);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = params.forward_qkv(&mut g, q, k, v, mask)?;
    Ok(g.value(out).clone())
}

pub fn ffn<T: Scalar>(store: &ParamStore<T>, params: &Ffn, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(store);
    let x = g.constant(x.clone());
    let out = params.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}
