use std::sync::Arc;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// `a[..., k] · b[k, n]`
    MatMul { a: Var, b: Var },
    /// batched `a[.., m, k] · b[.., k, n]` (or `b[.., n, k]ᵀ`)
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    BroadcastBatch { x: Var },
    DepthwiseConv { x: Var, f: Var },
    Gap { x: Var },
    PositionBias { x: Var, table: Var, index: Arc<Vec<i32>> },
    FilterNorm { x: Var, scale: Var, xhat: Vec<T>, denom: Vec<T>, std: Vec<T> },
    HeadScale { f: Var, a: Var },
    UpsampleTokens { x: Var, h: usize, w: usize, factor: usize },
    MergeGather { x: Var, h: usize, w: usize },
    Unfold { x: Var, patch: usize },
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>>, probs: Vec<T> },
    L1 { pred: Var, target: Tensor<T> },
    BalancedBce { logits: Var, target: Tensor<T>, w_pos: T, w_neg: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Eagerly recorded computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// reverse topological order and [`Tape::backward`] visits each node once.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

impl<T: Real> Tape<T> {
    /// Non-finite checks run after every op in debug builds only.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Plain 2-D product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        self.linear(a, b)
    }

    /// `x[..., k] · w[k×n]`, flattening the leading axes of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", &sx, &sw));
        }
        let k = sw[0];
        let n = sw[1];
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(&shape, out)?, Op::MatMul { a: x, b: w }, &[x, w])
    }

    /// Batched product over matching leading axes. With `trans_b`, `b` is
    /// stored as `[.., n, k]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push("bmm", Tensor::new(&shape, out)?, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    // ---------------------------------------------------------------- layout

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (out, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        self.push(
            "permute",
            Tensor::new(&out_shape, out)?,
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        )
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", Tensor::new(&out_shape, out)?, Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let src = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(batch * src.numel());
        for _ in 0..batch {
            out.extend_from_slice(src.data());
        }
        self.push("broadcast_batch", Tensor::new(&shape, out)?, Op::BroadcastBatch { x }, &[x])
    }

    // ---------------------------------------------------------------- elementwise

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), out)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a `[C]` vector to every row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let c = sb[0];
        let b = self.value(bias).data();
        let out: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let value = Tensor::new(self.shape(x), out)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.map_value(x, |v| v * c);
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x` by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let value = self.map_value(x, |v| v * c);
        self.push("scale_by", value, Op::ScaleBy { x, s }, &[x, s])
    }

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect()).expect("same numel")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map_value(x, kernels::sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.map_value(x, |v| T::of(kernels::gelu(v.as_f64())));
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = *src.shape().last().filter(|&&n| n > 0).ok_or_else(|| Error::shape("softmax", src.shape(), &[]))?;
        let mut out = src.data().to_vec();
        kernels::softmax_rows(&mut out, n);
        let value = Tensor::new(src.shape(), out)?;
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (out, xhat, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        );
        let value = Tensor::new(sx, out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    // ---------------------------------------------------------------- spatial

    /// Instance-conditional depthwise correlation: `x[B×C×h×w]` with
    /// per-sample filters `[B×C×k×k]`, stride 1, same padding.
    pub fn depthwise_conv2d(&mut self, x: Var, filters: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(filters).to_vec());
        if sx.len() != 4 || sf.len() != 4 || sx[..2] != sf[..2] || sf[2] != sf[3] {
            return Err(Error::shape("depthwise_conv2d", &sx, &sf));
        }
        let k = sf[2];
        if k % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
        }
        let out = kernels::depthwise_conv2d(self.value(x).data(), self.value(filters).data(), sx[1], sx[2], sx[3], k);
        self.push(
            "depthwise_conv2d",
            Tensor::new(&sx, out)?,
            Op::DepthwiseConv { x, f: filters },
            &[x, filters],
        )
    }

    /// Mean over the spatial axes of `[B×C×h×w]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] * sx[3] == 0 {
            return Err(Error::shape("global_avg_pool", &sx, &[]));
        }
        let plane = sx[2] * sx[3];
        let inv = T::ONE / T::of(plane as f64);
        let out: Vec<T> = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push("global_avg_pool", Tensor::new(&sx[..2], out)?, Op::Gap { x }, &[x])
    }

    /// `scores[B×H×L×L] + table[h, index[l·L+m]]`; negative indices add nothing.
    pub fn add_position_bias(&mut self, scores: Var, table: Var, index: Arc<Vec<i32>>) -> Result<Var> {
        let (ss, st) = (self.shape(scores).to_vec(), self.shape(table).to_vec());
        if ss.len() != 4 || st.len() != 2 || st[0] != ss[1] || index.len() != ss[2] * ss[3] {
            return Err(Error::shape("position_bias", &ss, &st));
        }
        let (heads, rel) = (st[0], st[1]);
        let plane = ss[2] * ss[3];
        let tab = self.value(table).data();
        let mut out = self.value(scores).data().to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(plane).enumerate() {
            let h = chunk_idx % heads;
            for (v, &ix) in chunk.iter_mut().zip(index.iter()) {
                if ix >= 0 {
                    *v += tab[h * rel + ix as usize];
                }
            }
        }
        self.push(
            "position_bias",
            Tensor::new(&ss, out)?,
            Op::PositionBias { x: scores, table, index },
            &[scores, table],
        )
    }

    /// Standardizes each row of `x[B×C×K]` (mean 0, population std 1 over K,
    /// `eps` added to the std) and multiplies by a per-channel `scale[C]`.
    pub fn filter_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(scale) != [sx[1]] {
            return Err(Error::shape("filter_norm", &sx, self.shape(scale)));
        }
        let (c, kk) = (sx[1], sx[2]);
        let eps = T::of(eps);
        let inv_k = T::ONE / T::of(kk as f64);
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let rows = src.len() / kk;
        let mut out = vec![T::ZERO; src.len()];
        let mut xhat = vec![T::ZERO; src.len()];
        let mut denom = vec![T::ZERO; rows];
        let mut std = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &src[r * kk..(r + 1) * kk];
            let mean = row.iter().copied().sum::<T>() * inv_k;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_k;
            let s = var.sqrt();
            let d = s + eps;
            std[r] = s;
            denom[r] = d;
            for j in 0..kk {
                let h = (row[j] - mean) / d;
                xhat[r * kk + j] = h;
                out[r * kk + j] = h * sc[r % c];
            }
        }
        self.push(
            "filter_norm",
            Tensor::new(&sx, out)?,
            Op::FilterNorm { x, scale, xhat, denom, std },
            &[x, scale],
        )
    }

    /// `out[b,n,h·d+c] = f[b,n,h·d+c] · a[b,h,n]` with `d = C/H`.
    pub fn head_scale(&mut self, f: Var, a: Var) -> Result<Var> {
        let (sf, sa) = (self.shape(f).to_vec(), self.shape(a).to_vec());
        if sf.len() != 3 || sa.len() != 3 || sa[0] != sf[0] || sa[2] != sf[1] || sa[1] == 0 || sf[2] % sa[1] != 0 {
            return Err(Error::shape("head_scale", &sf, &sa));
        }
        let (b, n, c, heads) = (sf[0], sf[1], sf[2], sa[1]);
        let d = c / heads;
        let (fv, av) = (self.value(f).data(), self.value(a).data());
        let mut out = vec![T::ZERO; fv.len()];
        for bi in 0..b {
            for ni in 0..n {
                let row = (bi * n + ni) * c;
                for h in 0..heads {
                    let w = av[(bi * heads + h) * n + ni];
                    for ci in h * d..(h + 1) * d {
                        out[row + ci] = fv[row + ci] * w;
                    }
                }
            }
        }
        self.push("head_scale", Tensor::new(&sf, out)?, Op::HeadScale { f, a }, &[f, a])
    }

    /// Nearest-neighbour upsampling of row-major grid tokens `[B×(h·w)×C]`.
    pub fn upsample_tokens(&mut self, x: Var, h: usize, w: usize, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != h * w || factor == 0 {
            return Err(Error::shape("upsample_tokens", &sx, &[h, w, factor]));
        }
        let (b, c) = (sx[0], sx[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = (bi * h * w + (y / factor) * w + xx / factor) * c;
                    out.extend_from_slice(&src[s..s + c]);
                }
            }
        }
        self.push(
            "upsample_tokens",
            Tensor::new(&[b, oh * ow, c], out)?,
            Op::UpsampleTokens { x, h, w, factor },
            &[x],
        )
    }

    /// Concatenates each 2×2 neighbourhood of grid tokens `[B×(h·w)×C]` into
    /// `[B×(h/2·w/2)×4C]`, ordered top-left, bottom-left, top-right, bottom-right.
    pub fn merge_gather(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != h * w {
            return Err(Error::shape("merge_gather", &sx, &[h, w]));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("patch merging needs even grid extents, got {h}x{w}")));
        }
        let (b, c) = (sx[0], sx[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..b {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let s = (bi * h * w + (2 * y + dy) * w + 2 * xx + dx) * c;
                        out.extend_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push(
            "merge_gather",
            Tensor::new(&[b, h * w / 4, 4 * c], out)?,
            Op::MergeGather { x, h, w },
            &[x],
        )
    }

    /// Splits `[B×C×H×W]` into non-overlapping `p×p` patches, giving
    /// `[B×(H/p·W/p)×(C·p·p)]` with features ordered channel, row, column.
    pub fn unfold_patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("unfold_patches", &sx, &[patch]));
        }
        let (b, c, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
        if patch == 0 || hh % patch != 0 || ww % patch != 0 {
            return Err(Error::config(format!(
                "image extents {hh}x{ww} are not divisible by patch size {patch}"
            )));
        }
        let (gh, gw) = (hh / patch, ww / patch);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..b {
            for py in 0..gh {
                for px in 0..gw {
                    for ci in 0..c {
                        for i in 0..patch {
                            let row = ((bi * c + ci) * hh + py * patch + i) * ww + px * patch;
                            out.extend_from_slice(&src[row..row + patch]);
                        }
                    }
                }
            }
        }
        self.push(
            "unfold_patches",
            Tensor::new(&[b, gh * gw, c * patch * patch], out)?,
            Op::Unfold { x, patch },
            &[x],
        )
    }

    // ---------------------------------------------------------------- losses

    /// Mean cross-entropy of `logits[..., K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let k = *sl.last().unwrap_or(&0);
        let rows = self.value(logits).numel() / k.max(1);
        if k == 0 || labels.len() != rows {
            return Err(Error::shape("cross_entropy", &sl, &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows(&mut probs, k);
        let src = self.value(logits).data();
        let mut total = T::ZERO;
        for (r, &l) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[l];
        }
        let loss = total / T::of(rows as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels, probs },
            &[logits],
        )
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("l1_loss", self.shape(pred), target.shape())?;
        let n = T::of(target.numel() as f64);
        let s = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum::<T>();
        self.push(
            "l1_loss",
            Tensor::scalar(s / n),
            Op::L1 { pred, target: target.clone() },
            &[pred],
        )
    }

    /// Class-balanced binary cross-entropy on logits against a 0/1 target.
    ///
    /// Positives are weighted by the fraction of negatives in the batch and
    /// vice versa; the weighted sum is divided by the element count.
    pub fn balanced_bce(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("balanced_bce", self.shape(logits), target.shape())?;
        let count = target.numel();
        let positives = target.data().iter().filter(|&&t| t > T::of(0.5)).count();
        let w_pos = T::of((count - positives) as f64 / count as f64);
        let w_neg = T::ONE - w_pos;
        let mut total = T::ZERO;
        for (&x, &t) in self.value(logits).data().iter().zip(target.data()) {
            // -log σ(x) = softplus(-x), -log(1-σ(x)) = softplus(x)
            if t > T::of(0.5) {
                total += w_pos * kernels::softplus(-x);
            } else {
                total += w_neg * kernels::softplus(x);
            }
        }
        let loss = total / T::of(count as f64);
        self.push(
            "balanced_bce",
            Tensor::scalar(loss),
            Op::BalancedBce { logits, target: target.clone(), w_pos, w_neg },
            &[logits],
        )
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d root / d leaf` into every leaf that requires grad.
    ///
    /// Calling it again without [`Tape::zero_grads`] adds to the stored
    /// gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not on this tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::ONE]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += *v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let need = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        let mut send = |v: Var, contrib: Vec<T>| match &mut adj[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += *c),
            slot @ None => *slot = Some(contrib),
        };

        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul { a, b } => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                if need(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    send(*a, da);
                }
                if need(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = nodes[i].value.shape()[r - 1];
                let batch = g.len() / (m * n).max(1);
                let (av, bv) = (val(*a), val(*b));
                if need(*a) {
                    let mut da = vec![T::ZERO; av.len()];
                    for j in 0..batch {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let bj = &bv[j * k * n..(j + 1) * k * n];
                        // trans_b: b is n×k, da = g·b; else b is k×n, da = g·bᵀ
                        T::gemm(m, n, k, gj, false, bj, !trans_b, &mut da[j * m * k..(j + 1) * m * k], false);
                    }
                    send(*a, da);
                }
                if need(*b) {
                    let mut db = vec![T::ZERO; bv.len()];
                    for j in 0..batch {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let aj = &av[j * m * k..(j + 1) * m * k];
                        let dbj = &mut db[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gj, true, aj, false, dbj, false);
                        } else {
                            T::gemm(k, m, n, aj, true, gj, false, dbj, false);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Permute { x, perm } => {
                let out_shape = nodes[i].value.shape();
                let (dx, _) = kernels::permute(g, out_shape, &kernels::inverse_permutation(perm));
                send(*x, dx);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Add { a, b } => {
                if need(*a) {
                    send(*a, g.to_vec());
                }
                if need(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if need(*a) {
                    send(*a, g.to_vec());
                }
                if need(*b) {
                    send(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect());
                }
                if need(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::AddBias { x, bias } => {
                if need(*x) {
                    send(*x, g.to_vec());
                }
                if need(*bias) {
                    let c = val(*bias).len();
                    let mut db = vec![T::ZERO; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    send(*bias, db);
                }
            }
            Op::Scale { x, c } => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                if need(*x) {
                    send(*x, g.iter().map(|&v| v * sv).collect());
                }
                if need(*s) {
                    let ds = g.iter().zip(val(*x)).map(|(&gv, &xv)| gv * xv).sum::<T>();
                    send(*s, vec![ds]);
                }
            }
            Op::Sigmoid { x } => send(*x, g.iter().zip(out).map(|(&gv, &y)| gv * y * (T::ONE - y)).collect()),
            Op::Gelu { x } => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * T::of(kernels::gelu_grad(xv.as_f64())))
                    .collect(),
            ),
            Op::Softmax { x } => {
                let n = *nodes[i].value.shape().last().unwrap();
                let mut dx = vec![T::ZERO; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = val(*gamma);
                let c = gm.len();
                if need(*x) {
                    let inv_c = T::ONE / T::of(c as f64);
                    let mut dx = vec![T::ZERO; g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::ZERO;
                        let mut mean_dh = T::ZERO;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dh = mean_dh * inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (gr[j] * gm[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    send(*x, dx);
                }
                if need(*gamma) {
                    let mut dg = vec![T::ZERO; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if need(*beta) {
                    let mut db = vec![T::ZERO; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                    send(*beta, db);
                }
            }
            Op::Sum { x } => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean { x } => {
                let n = val(*x).len();
                send(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Slice { x, axis, start } => {
                let sx = nodes[x.0].value.shape();
                let len = nodes[i].value.shape()[*axis];
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis + 1..].iter().product();
                let mut dx = vec![T::ZERO; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].value.shape()[*axis] * inner;
                    if need(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        send(v, dv);
                    }
                    offset += len;
                }
            }
            Op::BroadcastBatch { x } => {
                let n = val(*x).len();
                let mut dx = vec![T::ZERO; n];
                for chunk in g.chunks(n) {
                    dx.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
                send(*x, dx);
            }
            Op::DepthwiseConv { x, f } => {
                let sx = nodes[x.0].value.shape();
                let k = nodes[f.0].value.shape()[2];
                let (dx, df) = kernels::depthwise_conv2d_backward(val(*x), val(*f), g, sx[2], sx[3], k);
                if need(*x) {
                    send(*x, dx);
                }
                if need(*f) {
                    send(*f, df);
                }
            }
            Op::Gap { x } => {
                let sx = nodes[x.0].value.shape();
                let plane = sx[2] * sx[3];
                let inv = T::ONE / T::of(plane as f64);
                let dx = g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(plane)).collect();
                send(*x, dx);
            }
            Op::PositionBias { x, table, index } => {
                if need(*x) {
                    send(*x, g.to_vec());
                }
                if need(*table) {
                    let st = nodes[table.0].value.shape();
                    let (heads, rel) = (st[0], st[1]);
                    let plane = index.len();
                    let mut dt = vec![T::ZERO; heads * rel];
                    for (chunk_idx, chunk) in g.chunks(plane).enumerate() {
                        let h = chunk_idx % heads;
                        for (&gv, &ix) in chunk.iter().zip(index.iter()) {
                            if ix >= 0 {
                                dt[h * rel + ix as usize] += gv;
                            }
                        }
                    }
                    send(*table, dt);
                }
            }
            Op::FilterNorm { x, scale, xhat, denom, std } => {
                let sc = val(*scale);
                let c = sc.len();
                let kk = nodes[x.0].value.shape()[2];
                let inv_k = T::ONE / T::of(kk as f64);
                if need(*x) {
                    let mut dx = vec![T::ZERO; g.len()];
                    for r in 0..denom.len() {
                        let s = sc[r % c];
                        let gr = &g[r * kk..(r + 1) * kk];
                        let hr = &xhat[r * kk..(r + 1) * kk];
                        // with u = x - mean, d = std + eps: y = s·u/d
                        let mean_dy = gr.iter().copied().sum::<T>() * s * inv_k;
                        let dot_u = gr.iter().zip(hr).map(|(&a, &h)| a * s * h).sum::<T>() * denom[r];
                        let coef = if std[r] > T::ZERO {
                            dot_u / (denom[r] * denom[r] * std[r]) * inv_k
                        } else {
                            T::ZERO
                        };
                        for j in 0..kk {
                            let u = hr[j] * denom[r];
                            dx[r * kk + j] = (gr[j] * s - mean_dy) / denom[r] - coef * u;
                        }
                    }
                    send(*x, dx);
                }
                if need(*scale) {
                    let mut ds = vec![T::ZERO; c];
                    for (r, (gr, hr)) in g.chunks(kk).zip(xhat.chunks(kk)).enumerate() {
                        ds[r % c] += gr.iter().zip(hr).map(|(&a, &h)| a * h).sum::<T>();
                    }
                    send(*scale, ds);
                }
            }
            Op::HeadScale { f, a } => {
                let sf = nodes[f.0].value.shape();
                let heads = nodes[a.0].value.shape()[1];
                let (b, n, c) = (sf[0], sf[1], sf[2]);
                let d = c / heads;
                let (fv, av) = (val(*f), val(*a));
                let mut df = if need(*f) { vec![T::ZERO; fv.len()] } else { Vec::new() };
                let mut da = if need(*a) { vec![T::ZERO; av.len()] } else { Vec::new() };
                for bi in 0..b {
                    for ni in 0..n {
                        let row = (bi * n + ni) * c;
                        for h in 0..heads {
                            let ai = (bi * heads + h) * n + ni;
                            let w = av[ai];
                            let mut acc = T::ZERO;
                            for ci in h * d..(h + 1) * d {
                                if !df.is_empty() {
                                    df[row + ci] = g[row + ci] * w;
                                }
                                acc += g[row + ci] * fv[row + ci];
                            }
                            if !da.is_empty() {
                                da[ai] = acc;
                            }
                        }
                    }
                }
                if need(*f) {
                    send(*f, df);
                }
                if need(*a) {
                    send(*a, da);
                }
            }
            Op::UpsampleTokens { x, h, w, factor } => {
                let c = nodes[x.0].value.shape()[2];
                let b = nodes[x.0].value.shape()[0];
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::ZERO; val(*x).len()];
                for bi in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let s = (bi * h * w + (y / factor) * w + xx / factor) * c;
                            let o = (bi * oh * ow + y * ow + xx) * c;
                            dx[s..s + c].iter_mut().zip(&g[o..o + c]).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MergeGather { x, h, w } => {
                let sx = nodes[x.0].value.shape();
                let (b, c) = (sx[0], sx[2]);
                let mut dx = vec![T::ZERO; val(*x).len()];
                let mut o = 0;
                for bi in 0..b {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            for (dy, dxo) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                                let s = (bi * h * w + (2 * y + dy) * w + 2 * xx + dxo) * c;
                                dx[s..s + c].copy_from_slice(&g[o..o + c]);
                                o += c;
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Unfold { x, patch } => {
                let sx = nodes[x.0].value.shape();
                let (b, c, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
                let (gh, gw) = (hh / patch, ww / patch);
                let mut dx = vec![T::ZERO; val(*x).len()];
                let mut o = 0;
                for bi in 0..b {
                    for py in 0..gh {
                        for px in 0..gw {
                            for ci in 0..c {
                                for r in 0..*patch {
                                    let row = ((bi * c + ci) * hh + py * patch + r) * ww + px * patch;
                                    dx[row..row + patch].copy_from_slice(&g[o..o + patch]);
                                    o += patch;
                                }
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = *nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= scale;
                }
                send(*logits, dx);
            }
            Op::L1 { pred, target } => {
                let scale = g[0] / T::of(target.numel() as f64);
                let dx = val(*pred)
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                send(*pred, dx);
            }
            Op::BalancedBce { logits, target, w_pos, w_neg } => {
                let scale = g[0] / T::of(target.numel() as f64);
                let dx = val(*logits)
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| {
                        let s = kernels::sigmoid(x);
                        if t > T::of(0.5) {
                            -*w_pos * (T::ONE - s) * scale
                        } else {
                            *w_neg * s * scale
                        }
                    })
                    .collect();
                send(*logits, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let zero = tape.constant(t(&[2, 1], &[0.0, 0.0]));
        let z = tape.matmul(row, zero).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 1]);
        assert_eq!(tape.value(z).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1000.0, 1000.0]).unwrap());
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[5.0, 5.0, 1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] + 1.0).abs() < 1e-9 && (out[3] - 1.0).abs() < 1e-9);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn depthwise_delta_is_identity_and_zero_filter_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f32 * 0.37).sin()));
        let mut delta = vec![0.0; 2 * 9];
        delta[4] = 1.0;
        delta[9 + 4] = 1.0;
        let f = tape.constant(Tensor::new(&[1, 2, 3, 3], delta).unwrap());
        let y = tape.depthwise_conv2d(x, f).unwrap();
        assert!(tape.value(y).bitwise_eq(tape.value(x)));

        let zf = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let z = tape.depthwise_conv2d(x, zf).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.depthwise_conv2d(x, even), Err(Error::Config(_))));
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[1, 3, 2, 5], 7.0));
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 7.0, 7.0]);
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f32 * 0.25 - 0.5), true);
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f32).cos()));
        let y = tape.linear(x, w).unwrap();
        let y = tape.gelu(y).unwrap();
        let l = tape.mean(y).unwrap();
        tape.zero_grads();
        tape.backward(l).unwrap();
        let once = tape.grad(w).unwrap();
        tape.backward(l).unwrap();
        let twice = tape.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let w = tape.leaf(Tensor::ones(&[2]), true);
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_results_are_errors_in_debug() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1], 3.0e38));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
