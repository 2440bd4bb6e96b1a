//! Raw loops over contiguous slices. Everything here accumulates into its
//! output so callers can chain backward contributions without temporaries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::strides;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    acc.iter().fold(s, |s, &x| s + x)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] · b[k,n]`, register-blocked in `MR × NR` tiles.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for q in 0..NR {
                        row[q] += av * brow[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let ci = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for q in 0..NR {
                    ci[q] += row[q];
                }
            }
        }
        if n_main < n {
            for i in i0..i0 + MR {
                gemm_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, n_main);
            }
        }
    }
    for i in m_main..m {
        gemm_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n, 0);
    }
}

/// One output row from column `from` on.
#[inline]
fn gemm_row<T: Scalar>(ai: &[T], b: &[T], ci: &mut [T], n: usize, from: usize) {
    for (p, &aip) in ai.iter().enumerate() {
        axpy(aip, &b[p * n + from..(p + 1) * n], &mut ci[from..]);
    }
}

fn transposed<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for (c, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m < MR {
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    gemm_nn(a, &transposed(b, n, k), c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nn(&transposed(a, k, m), b, c, m, k, n);
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output row (all axes but the last) together with the
/// matching row offsets of the two operands and the inner stride of each.
fn for_each_broadcast_row(
    out: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let inner = out[r - 1];
    let rows: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for row in 0..rows {
        f(row * inner, oa, ob, inner, sa[r - 1], sb[r - 1]);
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub(crate) fn broadcast_binary<T: Scalar>(
    out_shape: &[usize],
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); n];
    for_each_broadcast_row(out_shape, a_shape, b_shape, |o, pa, pb, len, sa, sb| {
        for j in 0..len {
            out[o + j] = f(a[pa + j * sa], b[pb + j * sb]);
        }
    });
    out
}

/// Sums `grad` (shaped `out_shape`) down to `target` along broadcast axes.
/// `weight`, when present, multiplies `grad` elementwise with an operand that
/// is itself broadcast from `w_shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    target: &[usize],
    weight: Option<(&[T], &[usize])>,
) -> Vec<T> {
    let n: usize = target.iter().product();
    match weight {
        None if target == out_shape => return grad.to_vec(),
        Some((w, ws)) if target == out_shape && ws == out_shape => {
            return grad.iter().zip(w).map(|(&g, &x)| g * x).collect();
        }
        _ => {}
    }
    let mut acc = vec![T::zero(); n];
    let (w, ws) = weight.unwrap_or((&[], &[]));
    let has_w = weight.is_some();
    for_each_broadcast_row(out_shape, target, ws, |o, pt, pw, len, st, sw| {
        for j in 0..len {
            let g = grad[o + j];
            let g = if has_w { g * w[pw + j * sw] } else { g };
            acc[pt + j * st] += g;
        }
    });
    acc
}

/// Transposes axes according to `perm` (output axis i = input axis perm[i]).
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    if r == 0 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let rows = n / inner.max(1);
    let mut idx = vec![0usize; r - 1];
    let mut off = 0usize;
    for _ in 0..rows {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| data[off + j * inner_stride]));
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        permute(x, &[r, c], &[1, 0])
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[], &[3]).unwrap(), vec![3]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_add_outer() {
        // [2,1] + [1,3]
        let out = broadcast_binary(&[2, 3], &[2, 1], &[1.0, 2.0], &[1, 3], &[10.0, 20.0, 30.0], |a, b| a + b);
        assert_eq!(out, vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let back = reduce_to_shape(&[1.0; 6], &[2, 3], &[1, 3], None);
        assert_eq!(back, vec![2.0, 2.0, 2.0]);
        let back = reduce_to_shape(&[1.0; 6], &[2, 3], &[2, 1], None);
        assert_eq!(back, vec![3.0, 3.0]);
    }

    #[test]
    fn permute_3d() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let y = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        // y[k,i,j] = x[i,j,k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[k * 6 + i * 3 + j], x[i * 12 + j * 4 + k]);
                }
            }
        }
    }
}
