use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over all masked tokens and patch elements. An empty
/// target contributes exactly zero.
pub fn mae_loss<T: Scalar>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mae_loss", &pred.shape(), target.shape()));
    }
    if target.numel() == 0 {
        return Ok(Var::constant(Tensor::scalar(T::zero())));
    }
    pred.mse(&Var::constant(target.clone()))
}

/// Per-patch standardization of targets along the last axis.
pub fn normalize_patches<T: Scalar>(target: &Tensor<T>) -> Tensor<T> {
    let p = target.shape().last().copied().unwrap_or(0);
    let mut out = target.clone();
    if p == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(p) {
        let n = T::from_usize(p).unwrap();
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(1e-6)).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    out
}
