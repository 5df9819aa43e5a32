//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the inputs that
//! require them. Nodes whose inputs are all constant are never visited, which
//! keeps a frozen backbone cheap during adapter finetuning.

use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Glu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    DepthwiseConv { x: Var, w: Var, bias: Var, left_pad: usize },
    RowScale { x: Var, scale: Vec<T> },
    Embedding { table: Var, indices: Vec<usize> },
    GroupMatMul { x: Var, w: Var, groups: Vec<usize> },
    GroupBias { x: Var, bias: Var, groups: Vec<usize> },
    AddPositions { x: Var, table: Var },
    BroadcastJoin { a: Var, b: Var },
    Reshape(Var),
    Sum(Var),
    ScalarWithGrad { input: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records forward operations for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the tape's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` when the leaf is constant or unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "add")?;
        let mut out = self.val(a).clone();
        out.add_assign(self.val(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "sub")?;
        let bv = self.val(b).data().to_vec();
        let mut out = self.val(a).clone();
        out.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x -= y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "mul")?;
        let bv = self.val(b).data().to_vec();
        let mut out = self.val(a).clone();
        out.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.val(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a vector along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.val(x).last_dim();
        if self.val(bias).numel() != n {
            return Err(dim_err!(
                "bias {:?} for input {:?}",
                self.val(bias).shape(),
                self.val(x).shape()
            ));
        }
        let b = self.val(bias).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += *bb);
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[..., k] · w[k, n]`, flattening the leading dimensions of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.val(x).matmul(self.val(w))?;
        Ok(self.push(out, Op::MatMul(x, w), &[x, w]))
    }

    /// Batched product of `[G, m, k]` with `[G, k, n]` (or `[G, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm {:?} x {:?}", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err!("bmm inner extent {:?} x {:?}", sa, sb));
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                &av[gi * m * k..(gi + 1) * m * k],
                (k, 1),
                &bv[gi * k * n..(gi + 1) * k * n],
                b_strides,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.val(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Swish: `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Gated linear unit over the trailing dimension: `a·σ(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let two_c = xv.last_dim();
        if !two_c.is_multiple_of(2) {
            return Err(dim_err!("glu needs an even trailing extent, got {two_c}"));
        }
        let c = two_c / 2;
        let mut data = Vec::with_capacity(xv.numel() / 2);
        for row in xv.data().chunks(two_c) {
            for i in 0..c {
                data.push(row[i] * sigmoid(row[c + i]));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Glu(x), &[x]))
    }

    /// Normalizes each trailing-dimension slice, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.val(x).last_dim();
        if self.val(gamma).numel() != d || self.val(beta).numel() != d {
            return Err(dim_err!(
                "layer_norm over {d} with gamma {:?}, beta {:?}",
                self.val(gamma).shape(),
                self.val(beta).shape()
            ));
        }
        let xv = self.val(x);
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let rows = xv.numel() / d.max(1);
        let inv_d = T::one() / lit::<T>(d as f64);
        let mut normed = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                normed.push(n);
                out.push(g[i] * n + b[i]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the trailing dimension of `x[G, T, S]` after adding an
    /// additive mask `[M, T, S]`; group `g` uses mask `g / group_div`.
    /// Masked entries should be `-inf` and every row needs one open entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>, group_div: usize) -> Result<Var> {
        let xv = self.val(x);
        let s = xv.shape();
        if s.len() != 3 || mask.rank() != 3 || mask.shape()[1..] != s[1..] {
            return Err(dim_err!("masked_softmax {:?} with mask {:?}", s, mask.shape()));
        }
        let (g, t, k) = (s[0], s[1], s[2]);
        if group_div == 0 || g / group_div > mask.shape()[0] || g % group_div != 0 {
            return Err(dim_err!("mask groups {:?} do not cover {g} groups", mask.shape()));
        }
        let mut out = Vec::with_capacity(xv.numel());
        let mut z = vec![T::zero(); k];
        for gi in 0..g {
            let mrow = mask.row(gi / group_div);
            for ti in 0..t {
                let xr = &xv.data()[(gi * t + ti) * k..(gi * t + ti + 1) * k];
                let mr = &mrow[ti * k..(ti + 1) * k];
                let mut max = T::neg_infinity();
                for j in 0..k {
                    z[j] = xr[j] + mr[j];
                    max = max.max(z[j]);
                }
                let mut sum = T::zero();
                for zj in z.iter_mut() {
                    *zj = (*zj - max).exp();
                    sum += *zj;
                }
                out.extend(z.iter().map(|&e| e / sum));
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `[B, T, H·dh]` → `[B·H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.val(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(dim_err!("split_heads {:?} into {heads}", s));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = &xv.data()[(bi * t + ti) * d + h * dh..][..dh];
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(src);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, dh], out)?;
        Ok(self.push(out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[B·H, T, dh]` → `[B, T, H·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.val(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(dim_err!("merge_heads {:?} from {heads}", s));
        }
        let (bh, t, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let mut out = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    out[(bi * t + ti) * d + h * dh..][..dh]
                        .copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, d], out)?;
        Ok(self.push(out, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Per-channel convolution over time of `x[B, T, C]` with kernel `w[K, C]`.
    /// Output frame `t` reads input frames `t - left_pad .. t - left_pad + K`;
    /// frames outside `[0, T)` count as zero. `left_pad = K - 1` is causal.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Var, left_pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(bias));
        let s = xv.shape();
        if s.len() != 3 || wv.rank() != 2 || wv.shape()[1] != s[2] || bv.numel() != s[2] {
            return Err(dim_err!(
                "depthwise_conv1d x {:?}, w {:?}, bias {:?}",
                s,
                wv.shape(),
                bv.shape()
            ));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let kw = wv.shape()[0];
        if left_pad >= kw.max(1) {
            return Err(dim_err!("left pad {left_pad} for kernel width {kw}"));
        }
        let mut out = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * c..][..c];
                o.copy_from_slice(bv.data());
                for k in 0..kw {
                    let src = ti + k;
                    if src < left_pad || src - left_pad >= t {
                        continue;
                    }
                    let xr = &xv.data()[(bi * t + src - left_pad) * c..][..c];
                    let wr = &wv.data()[k * c..][..c];
                    for ch in 0..c {
                        o[ch] += wr[ch] * xr[ch];
                    }
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::DepthwiseConv {
                x,
                w,
                bias,
                left_pad,
            },
            &[x, w, bias],
        ))
    }

    /// Multiplies each trailing-dimension row by a constant factor.
    pub fn row_scale(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let xv = self.val(x);
        let n = xv.last_dim();
        if xv.numel() != scale.len() * n {
            return Err(dim_err!("row_scale {} factors for {:?}", scale.len(), xv.shape()));
        }
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(n).zip(&scale) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::RowScale { x, scale }, &[x]))
    }

    /// Gathers rows of `table[N, e]`.
    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let tv = self.val(table);
        if tv.rank() != 2 {
            return Err(dim_err!("embedding table {:?}", tv.shape()));
        }
        let (rows, e) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in &indices {
            if i >= rows {
                return Err(Error::Range(format!("embedding index {i} >= {rows}")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![indices.len(), e], out)?;
        Ok(self.push(out, Op::Embedding { table, indices }, &[table]))
    }

    /// Row `b` of `x[B, T, din]` is multiplied by block `groups[b]` of the
    /// stacked matrix `w[G·din, dout]`.
    pub fn group_matmul(&mut self, x: Var, w: Var, groups: Vec<usize>) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let s = xv.shape();
        if s.len() != 3 || wv.rank() != 2 || s[0] != groups.len() || wv.shape()[0] % s[2].max(1) != 0
        {
            return Err(dim_err!(
                "group_matmul x {:?}, w {:?}, {} groups",
                s,
                wv.shape(),
                groups.len()
            ));
        }
        let (b, t, din) = (s[0], s[1], s[2]);
        let dout = wv.shape()[1];
        let n_groups = wv.shape()[0] / din.max(1);
        let mut out = vec![T::zero(); b * t * dout];
        for (bi, &g) in groups.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::Range(format!("group {g} >= {n_groups}")));
            }
            T::gemm(
                t,
                din,
                dout,
                &xv.data()[bi * t * din..(bi + 1) * t * din],
                (din, 1),
                &wv.data()[g * din * dout..(g + 1) * din * dout],
                (dout, 1),
                &mut out[bi * t * dout..(bi + 1) * t * dout],
                false,
            );
        }
        let out = Tensor::new(vec![b, t, dout], out)?;
        Ok(self.push(out, Op::GroupMatMul { x, w, groups }, &[x, w]))
    }

    /// Adds row `groups[b]` of `bias[G, n]` to every frame of utterance `b`.
    pub fn group_bias(&mut self, x: Var, bias: Var, groups: Vec<usize>) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        let s = xv.shape();
        if s.len() != 3 || bv.rank() != 2 || bv.shape()[1] != s[2] || s[0] != groups.len() {
            return Err(dim_err!("group_bias x {:?}, bias {:?}", s, bv.shape()));
        }
        let n = s[2];
        let mut out = xv.clone();
        for (bi, &g) in groups.iter().enumerate() {
            if g >= bv.shape()[0] {
                return Err(Error::Range(format!("group {g} >= {}", bv.shape()[0])));
            }
            let brow = bv.row(g).to_vec();
            for row in out.row_mut(bi).chunks_mut(n) {
                row.iter_mut().zip(&brow).for_each(|(v, b)| *v += *b);
            }
        }
        Ok(self.push(out, Op::GroupBias { x, bias, groups }, &[x, bias]))
    }

    /// Adds row `t` of `table[P, d]` to frame `t` of `x[B, T, d]`.
    pub fn add_positions(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.val(x), self.val(table));
        let s = xv.shape();
        if s.len() != 3 || tv.rank() != 2 || tv.shape()[1] != s[2] || tv.shape()[0] < s[1] {
            return Err(dim_err!("add_positions x {:?}, table {:?}", s, tv.shape()));
        }
        let (t, d) = (s[1], s[2]);
        let mut out = xv.clone();
        for frame in out.data_mut().chunks_mut(t * d) {
            frame
                .iter_mut()
                .zip(&tv.data()[..t * d])
                .for_each(|(v, p)| *v += *p);
        }
        Ok(self.push(out, Op::AddPositions { x, table }, &[x, table]))
    }

    /// `out[b, t, u, :] = a[b, t, :] + c[b, u, :]`.
    pub fn broadcast_join(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.val(a), self.val(c));
        let (sa, sc) = (av.shape(), cv.shape());
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[2] {
            return Err(dim_err!("broadcast_join {:?} + {:?}", sa, sc));
        }
        let (b, t, u, j) = (sa[0], sa[1], sc[1], sa[2]);
        let mut out = Vec::with_capacity(b * t * u * j);
        for bi in 0..b {
            for ti in 0..t {
                let ar = &av.data()[(bi * t + ti) * j..][..j];
                for ui in 0..u {
                    let cr = &cv.data()[(bi * u + ui) * j..][..j];
                    out.extend(ar.iter().zip(cr).map(|(x, y)| *x + *y));
                }
            }
        }
        let out = Tensor::new(vec![b, t, u, j], out)?;
        Ok(self.push(out, Op::BroadcastJoin { a, b: c }, &[a, c]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Scalar node whose value and local gradient were computed externally
    /// (fused kernels such as the transducer loss).
    pub fn scalar_with_grad(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        same_shape(self.val(input), &grad, "scalar_with_grad")?;
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { input, grad }, &[input]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Only leaves carry gradients out.
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        // Hands out the gradient buffer of `v` when it needs one.
        macro_rules! with_grad {
            ($v:expr, |$gb:ident| $body:expr) => {
                if nodes[$v.0].requires_grad {
                    let $gb: &mut Tensor<T> = grads[$v.0]
                        .get_or_insert_with(|| Tensor::zeros(nodes[$v.0].value.shape()));
                    $body
                }
            };
        }
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| ga.add_assign(g));
                with_grad!(*b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| ga.add_assign(g));
                with_grad!(*b, |gb| gb
                    .data_mut()
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_grad!(*a, |ga| {
                    for ((x, gy), bb) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *x += *gy * *bb;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, gy), aa) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *x += *gy * *aa;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |ga| {
                    for (x, gy) in ga.data_mut().iter_mut().zip(gd) {
                        *x += *gy * *s;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                with_grad!(*x, |gx| gx.add_assign(g));
                with_grad!(*bias, |gb| {
                    let n = gb.numel();
                    for row in gd.chunks(n) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                });
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k.max(1);
                with_grad!(*x, |gx| T::gemm(m, n, k, gd, (n, 1), wv.data(), (1, n), gx.data_mut(), true));
                with_grad!(*w, |gw| T::gemm(k, m, n, xv.data(), (1, k), gd, (n, 1), gw.data_mut(), true));
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                with_grad!(*a, |ga| {
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    for gi in 0..gn {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[gi * m * n..][..m * n],
                            (n, 1),
                            &bv.data()[gi * k * n..][..k * n],
                            bt,
                            &mut ga.data_mut()[gi * m * k..][..m * k],
                            true,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for gi in 0..gn {
                        let gslice = &gd[gi * m * n..][..m * n];
                        let aslice = &av.data()[gi * m * k..][..m * k];
                        let dst = &mut gb.data_mut()[gi * k * n..][..k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gslice, (1, n), aslice, (k, 1), dst, true);
                        } else {
                            T::gemm(k, m, n, aslice, (1, k), gslice, (n, 1), dst, true);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for ((a, gy), v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        if *v > T::zero() {
                            *a += *gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |gx| {
                    for ((a, gy), y) in gx.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *a += *gy * *y * (T::one() - *y);
                    }
                });
            }
            Op::Tanh(x) => {
                with_grad!(*x, |gx| {
                    for ((a, gy), y) in gx.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *a += *gy * (T::one() - *y * *y);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for ((a, gy), v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(*v);
                        *a += *gy * (s + *v * s * (T::one() - s));
                    }
                });
            }
            Op::Glu(x) => {
                let xv = &nodes[x.0].value;
                let two_c = xv.last_dim();
                let c = two_c / 2;
                with_grad!(*x, |gx| {
                    for ((grow, xrow), gyrow) in gx
                        .data_mut()
                        .chunks_mut(two_c)
                        .zip(xv.data().chunks(two_c))
                        .zip(gd.chunks(c))
                    {
                        for i in 0..c {
                            let s = sigmoid(xrow[c + i]);
                            grow[i] += gyrow[i] * s;
                            grow[c + i] += gyrow[i] * xrow[i] * s * (T::one() - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = nodes[gamma.0].value.data();
                with_grad!(*gamma, |gg| {
                    for (gyrow, nrow) in gd.chunks(d).zip(normed.chunks(d)) {
                        for i in 0..d {
                            gg.data_mut()[i] += gyrow[i] * nrow[i];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for gyrow in gd.chunks(d) {
                        gb.data_mut().iter_mut().zip(gyrow).for_each(|(a, b)| *a += *b);
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_d = T::one() / lit::<T>(d as f64);
                    for (((gxrow, gyrow), nrow), r) in gx
                        .data_mut()
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(normed.chunks(d))
                        .zip(rstd)
                    {
                        let mut mean_dn = T::zero();
                        let mut mean_dn_n = T::zero();
                        for i in 0..d {
                            let dn = gyrow[i] * gv[i];
                            mean_dn += dn;
                            mean_dn_n += dn * nrow[i];
                        }
                        mean_dn *= inv_d;
                        mean_dn_n *= inv_d;
                        for i in 0..d {
                            let dn = gyrow[i] * gv[i];
                            gxrow[i] += *r * (dn - mean_dn - nrow[i] * mean_dn_n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = out.last_dim();
                with_grad!(*x, |gx| {
                    for ((gxrow, gyrow), yrow) in gx
                        .data_mut()
                        .chunks_mut(k)
                        .zip(gd.chunks(k))
                        .zip(out.data().chunks(k))
                    {
                        let dot: T = gyrow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for i in 0..k {
                            gxrow[i] += yrow[i] * (gyrow[i] - dot);
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                with_grad!(*x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = ((bi * heads + h) * t + ti) * dh;
                                let dst = &mut gx.data_mut()[(bi * t + ti) * d + h * dh..][..dh];
                                dst.iter_mut().zip(&gd[src..src + dh]).for_each(|(a, b)| *a += *b);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (bh, t, dh) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = dh * heads;
                with_grad!(*x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                let src = &gd[(bi * t + ti) * d + h * dh..][..dh];
                                gx.data_mut()[dst..dst + dh]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += *b);
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv {
                x,
                w,
                bias,
                left_pad,
            } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let s = xv.shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let kw = wv.shape()[0];
                let lp = *left_pad;
                with_grad!(*bias, |gb| {
                    for row in gd.chunks(c) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                });
                with_grad!(*x, |gx| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let gyr = &gd[(bi * t + ti) * c..][..c];
                            for k in 0..kw {
                                let src = ti + k;
                                if src < lp || src - lp >= t {
                                    continue;
                                }
                                let wr = &wv.data()[k * c..][..c];
                                let gxr = &mut gx.data_mut()[(bi * t + src - lp) * c..][..c];
                                for ch in 0..c {
                                    gxr[ch] += wr[ch] * gyr[ch];
                                }
                            }
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let gyr = &gd[(bi * t + ti) * c..][..c];
                            for k in 0..kw {
                                let src = ti + k;
                                if src < lp || src - lp >= t {
                                    continue;
                                }
                                let xr = &xv.data()[(bi * t + src - lp) * c..][..c];
                                let gwr = &mut gw.data_mut()[k * c..][..c];
                                for ch in 0..c {
                                    gwr[ch] += xr[ch] * gyr[ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::RowScale { x, scale } => {
                let n = out.last_dim();
                with_grad!(*x, |gx| {
                    for ((grow, gyrow), f) in gx.data_mut().chunks_mut(n).zip(gd.chunks(n)).zip(scale) {
                        grow.iter_mut().zip(gyrow).for_each(|(a, b)| *a += *b * *f);
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let e = out.last_dim();
                with_grad!(*table, |gt| {
                    for (row, &i) in gd.chunks(e).zip(indices) {
                        gt.row_mut(i).iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                });
            }
            Op::GroupMatMul { x, w, groups } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let s = xv.shape();
                let (t, din) = (s[1], s[2]);
                let dout = wv.shape()[1];
                with_grad!(*x, |gx| {
                    for (bi, &gr) in groups.iter().enumerate() {
                        T::gemm(
                            t,
                            dout,
                            din,
                            &gd[bi * t * dout..][..t * dout],
                            (dout, 1),
                            &wv.data()[gr * din * dout..][..din * dout],
                            (1, dout),
                            &mut gx.data_mut()[bi * t * din..][..t * din],
                            true,
                        );
                    }
                });
                with_grad!(*w, |gw| {
                    for (bi, &gr) in groups.iter().enumerate() {
                        T::gemm(
                            din,
                            t,
                            dout,
                            &xv.data()[bi * t * din..][..t * din],
                            (1, din),
                            &gd[bi * t * dout..][..t * dout],
                            (dout, 1),
                            &mut gw.data_mut()[gr * din * dout..][..din * dout],
                            true,
                        );
                    }
                });
            }
            Op::GroupBias { x, bias, groups } => {
                let n = out.last_dim();
                let per_b = out.numel() / groups.len().max(1);
                with_grad!(*x, |gx| gx.add_assign(g));
                with_grad!(*bias, |gb| {
                    for (bi, &gr) in groups.iter().enumerate() {
                        for row in gd[bi * per_b..(bi + 1) * per_b].chunks(n) {
                            gb.row_mut(gr).iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                        }
                    }
                });
            }
            Op::AddPositions { x, table } => {
                let s = out.shape();
                let (t, d) = (s[1], s[2]);
                with_grad!(*x, |gx| gx.add_assign(g));
                with_grad!(*table, |gt| {
                    for frame in gd.chunks(t * d) {
                        gt.data_mut()[..t * d]
                            .iter_mut()
                            .zip(frame)
                            .for_each(|(a, b)| *a += *b);
                    }
                });
            }
            Op::BroadcastJoin { a, b } => {
                let s = out.shape();
                let (bn, t, u, j) = (s[0], s[1], s[2], s[3]);
                with_grad!(*a, |ga| {
                    for bi in 0..bn {
                        for ti in 0..t {
                            let dst = &mut ga.data_mut()[(bi * t + ti) * j..][..j];
                            for ui in 0..u {
                                let src = &gd[((bi * t + ti) * u + ui) * j..][..j];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += *y);
                            }
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for bi in 0..bn {
                        for ti in 0..t {
                            for ui in 0..u {
                                let src = &gd[((bi * t + ti) * u + ui) * j..][..j];
                                let dst = &mut gb.data_mut()[(bi * u + ui) * j..][..j];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += *y);
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| {
                    gx.data_mut().iter_mut().zip(gd).for_each(|(a, b)| *a += *b);
                });
            }
            Op::Sum(x) => {
                let gy = gd[0];
                with_grad!(*x, |gx| gx.data_mut().iter_mut().for_each(|a| *a += gy));
            }
            Op::ScalarWithGrad { input, grad } => {
                let gy = gd[0];
                with_grad!(*input, |gi| {
                    gi.data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, b)| *a += gy * *b);
                });
            }
        }
    }
}
