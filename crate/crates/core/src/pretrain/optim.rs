use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments and decoupled weight decay. Moments are
/// kept per parameter in store order; parameters without a gradient are
/// skipped entirely.
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of steps taken.
    pub t: u64,
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &ParamStore<T>, lr: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[self.moments.len()]));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (p, slot) in params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = p.var.grad() else { continue };
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            if m.shape() != g.shape() {
                return Err(Error::dim("adam_step", m.shape(), g.shape()));
            }
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let eps = self.eps;
            p.var.update_value(|w| {
                let it = w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
                for (((w, m), v), &g) in it {
                    let gf = g.as_f64();
                    let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                    let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                    *m = T::lit(mf);
                    *v = T::lit(vf);
                    let wf = w.as_f64();
                    let upd = (mf / c1) / ((vf / c2).sqrt() + eps) + decay * wf;
                    *w = T::lit(wf - lr * upd);
                }
            });
        }
        Ok(())
    }
}
