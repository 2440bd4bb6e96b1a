//! Central finite-difference gradient checking in double precision.
//!
//! The scalar probed is `sum(out ⊙ R)` for a fixed random `R`, so that ops
//! whose plain sum is constant (softmax, layer norm) still get a non-trivial
//! gradient. `R` seeds the backward pass directly; the probe itself records
//! no ops. Error is the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` per leaf, taken
//! as 0 when both norms are below 1e-8.

pub mod suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{no_grad, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per leaf (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafError {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub tolerance: f64,
    pub leaves: Vec<LeafError>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance && self.leaves.iter().all(|l| l.rel_err.is_finite())
    }
}

const ZERO_GRAD_NORM: f64 = 1e-8;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    // Both sides are rounding noise (e.g. key biases, whose gradient is
    // exactly zero under softmax shift invariance).
    if denom < ZERO_GRAD_NORM {
        0.0
    } else {
        diff / denom
    }
}

/// Checks the gradient of `f` with respect to each named leaf. `f` must be a
/// pure function of the leaves' current values.
pub fn check_leaves(
    name: &str,
    leaves: &[(String, Var<f64>)],
    f: impl Fn() -> Result<Var<f64>>,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out = f()?;
    let weights: Vec<f64> = (0..out.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe = |o: &Var<f64>| -> f64 { o.value().data().iter().zip(&weights).map(|(x, w)| x * w).sum() };

    for (_, v) in leaves {
        v.zero_grad();
    }
    out.backward_with(weights.clone());
    drop(out);

    let mut report = CheckReport {
        name: name.to_string(),
        tolerance: opts.tolerance,
        leaves: Vec::new(),
    };
    for (leaf_name, v) in leaves {
        let analytic = v.grad().map(|g| g.into_vec()).unwrap_or_else(|| vec![0.0; v.value().numel()]);
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = v.value().data()[c];
            let eval = |x: f64| -> Result<f64> {
                v.update_value(|t| t.data_mut()[c] = x);
                no_grad(|| -> Result<f64> { Ok(probe(&f()?)) })
            };
            let plus = eval(orig + opts.step)?;
            let minus = eval(orig - opts.step)?;
            v.update_value(|t| t.data_mut()[c] = orig);
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        report.leaves.push(LeafError {
            name: leaf_name.clone(),
            rel_err: rel_err(&picked, &numeric),
            coords: coords.len(),
        });
        v.zero_grad();
    }
    Ok(report)
}

/// Convenience for op-level checks: each input becomes a trainable leaf
/// named `x0`, `x1`, ...
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    opts: &CheckOptions,
) -> Result<CheckReport> {
    let vars: Vec<Var<f64>> = inputs.into_iter().map(Var::param).collect();
    let leaves: Vec<(String, Var<f64>)> = vars
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("x{i}"), v.clone()))
        .collect();
    check_leaves(name, &leaves, || f(&vars), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_rules() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let ok = check_op("gelu", vec![x.clone()], |v| Ok(v[0].gelu()), &CheckOptions::default()).unwrap();
        assert!(ok.passed(), "{ok:?}");

        crate::autograd::inject_sign_flip(Some("gelu"));
        let bad = check_op("gelu", vec![x], |v| Ok(v[0].gelu()), &CheckOptions::default()).unwrap();
        crate::autograd::inject_sign_flip(None);
        assert!(!bad.passed());
        assert!(bad.max_rel_err() > 1.0);
    }
}
