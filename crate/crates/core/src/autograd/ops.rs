use super::kernels::{
    broadcast_binary, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, permute, reduce_to_shape,
};
use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// Row indices for [`Var::gather_rows`] / [`Var::scatter_rows`]: either one
/// list shared by every batch slice, or one list per slice (all equal length).
#[derive(Clone, Debug)]
pub struct RowIndex(pub Vec<Vec<usize>>);

impl RowIndex {
    pub fn shared(idx: Vec<usize>) -> Self {
        RowIndex(vec![idx])
    }

    fn for_batch(&self, b: usize) -> &[usize] {
        if self.0.len() == 1 {
            &self.0[0]
        } else {
            &self.0[b]
        }
    }

    fn len_each(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }
}

/// Recorded operation. Carries whatever the backward rule needs beyond the
/// parent and output values.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    Gelu,
    Sum,
    Mean,
    MeanAxis { axis: usize },
    Softmax { axis: usize },
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    MatMul { trans_b: bool },
    Permute { perm: Vec<usize> },
    Reshape,
    Concat { axis: usize },
    GatherRows { idx: RowIndex },
    ScatterRows { idx: RowIndex },
    BroadcastTo,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::BroadcastTo => "broadcast_to",
        }
    }
}

fn norm_axis(op: &'static str, shape: &[usize], axis: isize) -> Result<usize> {
    let r = shape.len() as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(Error::Index {
            op,
            index: axis.unsigned_abs(),
            extent: shape.len(),
        });
    }
    Ok(a as usize)
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Matrix-batch layout of a matmul: per-output-batch offsets into each operand.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    out_shape: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (kb, n) = if trans_b {
        (b[rb - 1], b[rb - 2])
    } else {
        (b[rb - 2], b[rb - 1])
    };
    if k != kb {
        return Err(Error::dim("matmul", a, b));
    }
    let (ab, bb) = (&a[..ra - 2], &b[..rb - 2]);
    let batch = broadcast_shape("matmul", ab, bb).map_err(|_| Error::dim("matmul", a, b))?;
    let nb: usize = batch.iter().product();
    let (a_off, b_off) = if bb.is_empty() {
        // rank-2 right operand: fold every batch of `a` into the row count
        ((0..nb).map(|i| i * m * k).collect(), vec![0; nb])
    } else {
        let ia = batch_offsets(ab, &batch);
        let ib = batch_offsets(bb, &batch);
        (
            ia.into_iter().map(|i| i * m * k).collect(),
            ib.into_iter().map(|i| i * k * n).collect(),
        )
    };
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        a_off,
        b_off,
        out_shape,
    })
}

/// For every index of the broadcast batch shape `out`, the flat batch index
/// into an operand with batch shape `src`.
fn batch_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let src_strides = crate::tensor::strides(src);
    let off = out.len() - src.len();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for d in (0..out.len()).rev() {
                let i = rem % out[d];
                rem /= out[d];
                if d >= off && src[d - off] != 1 {
                    idx += i * src_strides[d - off];
                }
            }
            idx
        })
        .collect()
}

impl<T: Scalar> Var<T> {
    fn binary(&self, other: &Var<T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
        let data = broadcast_binary(&shape, a.shape(), a.data(), b.shape(), b.data(), f);
        let out = Tensor::new(&shape, data)?;
        drop((a, b));
        Ok(Var::from_op(out, op, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = self.value().map(|x| x * s);
        Var::from_op(out, Op::Scale(s), vec![self.clone()])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let out = self.value().map(gelu);
        Var::from_op(out, Op::Gelu, vec![self.clone()])
    }

    pub fn sum(&self) -> Var<T> {
        let s = self.value().data().iter().copied().sum();
        Var::from_op(Tensor::scalar(s), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Var<T> {
        let v = self.value();
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let s: T = v.data().iter().copied().sum();
        drop(v);
        Var::from_op(Tensor::scalar(s / n), Op::Mean, vec![self.clone()])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: isize) -> Result<Var<T>> {
        let v = self.value();
        let axis = norm_axis("mean_axis", v.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let x = v.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = T::one() / T::from_usize(len.max(1)).unwrap();
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, out)?;
        drop(v);
        Ok(Var::from_op(out, Op::MeanAxis { axis }, vec![self.clone()]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, target: &Var<T>) -> Result<Var<T>> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Var<T>> {
        let v = self.value();
        let axis = norm_axis("softmax", v.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[at(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                let inv = T::one() / z;
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        drop(v);
        Ok(Var::from_op(out, Op::Softmax { axis }, vec![self.clone()]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last-axis size).
    pub fn layer_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: T) -> Result<Var<T>> {
        let v = self.value();
        let d = *v.shape().last().ok_or_else(|| Error::dim("layer_norm", v.shape(), &[]))?;
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", v.shape(), g.shape()));
        }
        let rows = v.numel() / d.max(1);
        let x = v.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        let inv_d = T::one() / T::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&y| (y - mu) * (y - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        drop((v, g, b));
        Ok(Var::from_op(
            out,
            Op::LayerNorm { xhat, rstd },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    fn matmul_impl(&self, other: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        let p = matmul_plan(a.shape(), b.shape(), trans_b)?;
        let (m, k, n) = (p.m, p.k, p.n);
        let mut out = vec![T::zero(); p.out_shape.iter().product()];
        if b.rank() == 2 {
            let rows = a.numel() / k.max(1);
            if trans_b {
                gemm_nt(a.data(), b.data(), &mut out, rows, k, n);
            } else {
                gemm_nn(a.data(), b.data(), &mut out, rows, k, n);
            }
        } else {
            for (bi, (&ao, &bo)) in p.a_off.iter().zip(&p.b_off).enumerate() {
                let c = &mut out[bi * m * n..(bi + 1) * m * n];
                let (am, bm) = (&a.data()[ao..ao + m * k], &b.data()[bo..bo + k * n]);
                if trans_b {
                    gemm_nt(am, bm, c, m, k, n);
                } else {
                    gemm_nn(am, bm, c, m, k, n);
                }
            }
        }
        let out = Tensor::new(&p.out_shape, out)?;
        drop((a, b));
        Ok(Var::from_op(out, Op::MatMul { trans_b }, vec![self.clone(), other.clone()]))
    }

    /// `self[.., m, k] · other[.., k, n]`, batch axes broadcast.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, false)
    }

    /// `self[.., m, k] · other[.., n, k]ᵀ`, batch axes broadcast.
    pub fn matmul_t(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, true)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let v = self.value();
        let mut seen = vec![false; perm.len()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", v.shape(), perm));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let out = Tensor::new(&shape, permute(v.data(), v.shape(), perm))?;
        drop(v);
        Ok(Var::from_op(out, Op::Permute { perm: perm.to_vec() }, vec![self.clone()]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        Ok(Var::from_op(out, Op::Reshape, vec![self.clone()]))
    }

    pub fn concat(parts: &[Var<T>], axis: isize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", &[], &[]))?.shape();
        let axis = norm_axis("concat", &first, axis)?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::dim("concat", &first, &s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(vals);
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(Var::from_op(out, Op::Concat { axis }, parts.to_vec()))
    }

    /// Selects rows along axis -2 of `[.., N, D]`.
    pub fn gather_rows(&self, idx: &RowIndex) -> Result<Var<T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::dim("gather_rows", s, &[]));
        }
        let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.numel() / (n * d).max(1);
        check_row_index("gather_rows", idx, batch, n, false)?;
        let k = idx.len_each();
        let mut data = Vec::with_capacity(batch * k * d);
        for b in 0..batch {
            for &i in idx.for_batch(b) {
                let base = (b * n + i) * d;
                data.extend_from_slice(&v.data()[base..base + d]);
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = k;
        let out = Tensor::new(&shape, data)?;
        drop(v);
        Ok(Var::from_op(out, Op::GatherRows { idx: idx.clone() }, vec![self.clone()]))
    }

    /// Places the rows of `[.., K, D]` at positions `idx` of a zero `[.., n, D]`.
    pub fn scatter_rows(&self, idx: &RowIndex, n: usize) -> Result<Var<T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::dim("scatter_rows", s, &[]));
        }
        let (k, d) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.numel() / (k * d).max(1);
        check_row_index("scatter_rows", idx, batch, n, true)?;
        if idx.len_each() != k {
            return Err(Error::dim("scatter_rows", s, &[idx.len_each()]));
        }
        let mut data = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            for (r, &i) in idx.for_batch(b).iter().enumerate() {
                let src = (b * k + r) * d;
                data[(b * n + i) * d..(b * n + i + 1) * d].copy_from_slice(&v.data()[src..src + d]);
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = n;
        let out = Tensor::new(&shape, data)?;
        drop(v);
        Ok(Var::from_op(out, Op::ScatterRows { idx: idx.clone() }, vec![self.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let v = self.value();
        let target = broadcast_shape("broadcast_to", v.shape(), shape)?;
        if target != shape {
            return Err(Error::dim("broadcast_to", v.shape(), shape));
        }
        let data = broadcast_binary(shape, v.shape(), v.data(), &[], &[T::zero()], |x, _| x);
        let out = Tensor::new(shape, data)?;
        drop(v);
        Ok(Var::from_op(out, Op::BroadcastTo, vec![self.clone()]))
    }
}

fn check_row_index(op: &'static str, idx: &RowIndex, batch: usize, n: usize, unique: bool) -> Result<()> {
    if idx.0.is_empty() || (idx.0.len() != 1 && idx.0.len() != batch) {
        return Err(Error::dim(op, &[batch], &[idx.0.len()]));
    }
    let k = idx.len_each();
    for list in &idx.0 {
        if list.len() != k {
            return Err(Error::dim(op, &[k], &[list.len()]));
        }
        let mut seen = vec![false; n];
        for &i in list {
            if i >= n {
                return Err(Error::Index { op, index: i, extent: n });
            }
            if unique && std::mem::replace(&mut seen[i], true) {
                return Err(Error::Index { op, index: i, extent: n });
            }
        }
    }
    Ok(())
}

/// Gradients for each parent of a node, given the node's output value and
/// the gradient flowing into it. `None` for parents that need no gradient.
pub(super) fn backward<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    parents: &[Var<T>],
) -> Vec<Option<Vec<T>>> {
    let need = |i: usize| parents[i].requires_grad();
    let out_shape = out.shape();
    match op {
        Op::Leaf => vec![],
        Op::Add | Op::Sub => {
            let ga = need(0).then(|| reduce_to_shape(g, out_shape, parents[0].value().shape(), None));
            let gb = need(1).then(|| {
                let mut r = reduce_to_shape(g, out_shape, parents[1].value().shape(), None);
                if matches!(op, Op::Sub) {
                    r.iter_mut().for_each(|x| *x = -*x);
                }
                r
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (parents[0].value(), parents[1].value());
            let ga = need(0).then(|| reduce_to_shape(g, out_shape, a.shape(), Some((b.data(), b.shape()))));
            let gb = need(1).then(|| reduce_to_shape(g, out_shape, b.shape(), Some((a.data(), a.shape()))));
            vec![ga, gb]
        }
        Op::Scale(s) => vec![Some(g.iter().map(|&x| x * *s).collect())],
        Op::Gelu => {
            let x = parents[0].value();
            vec![Some(g.iter().zip(x.data()).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect())]
        }
        Op::Sum => {
            let n = parents[0].value().numel();
            vec![Some(vec![g[0]; n])]
        }
        Op::Mean => {
            let n = parents[0].value().numel();
            let v = g[0] / T::from_usize(n.max(1)).unwrap();
            vec![Some(vec![v; n])]
        }
        Op::MeanAxis { axis } => {
            let x = parents[0].value();
            let (outer, len, inner) = split_at_axis(x.shape(), *axis);
            let inv = T::one() / T::from_usize(len.max(1)).unwrap();
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s * inv;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Softmax { axis } => {
            let y = out.data();
            let (outer, len, inner) = split_at_axis(out_shape, *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut dotv = T::zero();
                    for l in 0..len {
                        dotv += g[at(l)] * y[at(l)];
                    }
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dotv);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { xhat, rstd } => {
            let d = *out_shape.last().unwrap();
            let rows = rstd.len();
            let gain = parents[1].value();
            let gam = gain.data();
            let inv_d = T::one() / T::from_usize(d).unwrap();
            let gx = need(0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                gx
            });
            let gg = need(1).then(|| {
                let mut gg = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                gg
            });
            let gb = need(2).then(|| {
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
                gb
            });
            vec![gx, gg, gb]
        }
        Op::MatMul { trans_b } => {
            let (a, b) = (parents[0].value(), parents[1].value());
            let p = matmul_plan(a.shape(), b.shape(), *trans_b).expect("validated in forward");
            let (m, k, n) = (p.m, p.k, p.n);
            let mut ga = need(0).then(|| vec![T::zero(); a.numel()]);
            let mut gb = need(1).then(|| vec![T::zero(); b.numel()]);
            if b.rank() == 2 {
                let rows = a.numel() / k.max(1);
                if let Some(ga) = ga.as_mut() {
                    if *trans_b {
                        gemm_nn(g, b.data(), ga, rows, n, k);
                    } else {
                        gemm_nt(g, b.data(), ga, rows, n, k);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    if *trans_b {
                        gemm_tn(g, a.data(), gb, n, rows, k);
                    } else {
                        gemm_tn(a.data(), g, gb, k, rows, n);
                    }
                }
            } else {
                for (bi, (&ao, &bo)) in p.a_off.iter().zip(&p.b_off).enumerate() {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        let bm = &b.data()[bo..bo + k * n];
                        let dst = &mut ga[ao..ao + m * k];
                        if *trans_b {
                            gemm_nn(gc, bm, dst, m, n, k);
                        } else {
                            gemm_nt(gc, bm, dst, m, n, k);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let am = &a.data()[ao..ao + m * k];
                        let dst = &mut gb[bo..bo + k * n];
                        if *trans_b {
                            gemm_tn(gc, am, dst, n, m, k);
                        } else {
                            gemm_tn(am, gc, dst, k, m, n);
                        }
                    }
                }
            }
            vec![ga, gb]
        }
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute(g, out_shape, &inv))]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat { axis } => {
            let (outer, total, inner) = split_at_axis(out_shape, *axis);
            let mut start = 0;
            parents
                .iter()
                .map(|p| {
                    let len = p.value().shape()[*axis];
                    let r = p.requires_grad().then(|| {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        gp
                    });
                    start += len;
                    r
                })
                .collect()
        }
        Op::GatherRows { idx } => {
            let x = parents[0].value();
            let s = x.shape();
            let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = x.numel() / (n * d).max(1);
            let k = idx.len_each();
            let mut gx = vec![T::zero(); x.numel()];
            for b in 0..batch {
                for (r, &i) in idx.for_batch(b).iter().enumerate() {
                    let src = &g[(b * k + r) * d..(b * k + r + 1) * d];
                    for (dst, &v) in gx[(b * n + i) * d..(b * n + i + 1) * d].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::ScatterRows { idx } => {
            let s = out_shape;
            let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = out.numel() / (n * d).max(1);
            let k = idx.len_each();
            let mut gx = vec![T::zero(); batch * k * d];
            for b in 0..batch {
                for (r, &i) in idx.for_batch(b).iter().enumerate() {
                    gx[(b * k + r) * d..(b * k + r + 1) * d]
                        .copy_from_slice(&g[(b * n + i) * d..(b * n + i + 1) * d]);
                }
            }
            vec![Some(gx)]
        }
        Op::BroadcastTo => vec![Some(reduce_to_shape(g, out_shape, parents[0].value().shape(), None))],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(shape: &[usize], d: &[f64]) -> Var<f64> {
        Var::param(Tensor::from_f64(shape, d).unwrap())
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let i = var(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = var(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = var(&[1, 2], &[1.0, 2.0]).matmul(&var(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = var(&[2, 3], &[0.0; 6]).matmul(&var(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(e, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn batched_matmul_broadcasts_left_batch() {
        // [2,1,2] x [1,2,1]: batch broadcast on both sides
        let a = var(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = var(&[1, 2, 1], &[1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = var(&[3], &[0.0, 0.0, 0.0]).softmax(-1).unwrap();
        for &p in s.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = var(&[2], &[1000.0, 0.0]).softmax(-1).unwrap();
        assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(s.value().data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_on_middle_axis_sums_to_one() {
        let x = var(&[2, 3, 2], &[0.1, -0.3, 2.0, 0.5, 1.0, -1.0, 0.0, 0.2, 0.3, 0.4, 0.9, -2.0]);
        let s = x.softmax(1).unwrap();
        let v = s.value();
        for o in 0..2 {
            for i in 0..2 {
                let tot: f64 = (0..3).map(|l| v.data()[(o * 3 + l) * 2 + i]).sum();
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = var(&[2], &[1.0, 1.0]);
        let b = var(&[2], &[0.0, 0.0]);
        let y = var(&[2], &[1.0, 3.0]).layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-9);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-9);
        let g3 = var(&[3], &[1.0; 3]);
        let b3 = var(&[3], &[0.0; 3]);
        let c = var(&[3], &[5.0; 3]).layer_norm(&g3, &b3, 1e-5).unwrap();
        assert!(c.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mse_hand_values() {
        let x = var(&[2], &[0.0, 2.0]);
        assert_eq!(x.mse(&x).unwrap().value().item(), 0.0);
        let z = var(&[2], &[0.0, 0.0]);
        assert_eq!(x.mse(&z).unwrap().value().item(), 2.0);
    }

    #[test]
    fn gather_scatter_partition_identity() {
        let x = var(&[1, 4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let all = RowIndex::shared(vec![0, 1, 2, 3]);
        assert_eq!(x.gather_rows(&all).unwrap().value().data(), x.value().data());
        let vis = RowIndex::shared(vec![1, 3]);
        let msk = RowIndex::shared(vec![0, 2]);
        let a = x.gather_rows(&vis).unwrap().scatter_rows(&vis, 4).unwrap();
        let b = x.gather_rows(&msk).unwrap().scatter_rows(&msk, 4).unwrap();
        assert_eq!(a.add(&b).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn gather_gradient_is_indicator() {
        let x = var(&[3, 2], &[0.0; 6]);
        x.gather_rows(&RowIndex::shared(vec![2, 0])).unwrap().sum().backward();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn row_index_errors() {
        let x = var(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            x.gather_rows(&RowIndex::shared(vec![3])),
            Err(Error::Index { index: 3, extent: 3, .. })
        ));
        let y = var(&[2, 2], &[0.0; 4]);
        assert!(y.scatter_rows(&RowIndex::shared(vec![1, 1]), 3).is_err());
    }

    #[test]
    fn per_batch_gather() {
        let x = var(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let g = x.gather_rows(&RowIndex(vec![vec![1], vec![0]])).unwrap();
        assert_eq!(g.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_and_split_grad() {
        let a = var(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = var(&[1, 1, 2], &[5.0, 6.0]);
        let c = Var::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Var::constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        c.mul(&w).unwrap().sum().backward();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap().data(), &[5.0, 6.0]);
        assert!(Var::concat(&[a, var(&[1, 1, 3], &[0.0; 3])], 1).is_err());
    }

    #[test]
    fn broadcast_add_gradient_sums() {
        let a = var(&[2, 3], &[0.0; 6]);
        let bias = var(&[3], &[1.0, 2.0, 3.0]);
        a.add(&bias).unwrap().sum().backward();
        assert_eq!(bias.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(a.add(&var(&[2], &[0.0; 2])).is_err());
    }
}
