//! Multinomial logistic regression on frozen features, trained full-batch
//! with accelerated gradient descent.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    /// Ridge penalty on the weights (not the intercept).
    pub l2: f64,
    /// Stop when the gradient norm falls below this.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            tolerance: 1e-6,
            max_iters: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub accuracy: f64,
    pub n_eval: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Row-major `n × d` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::dim("features", &[n, d], &[data.len()]));
        }
        Ok(Self { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Features) -> Self {
        let n = x.n.max(1) as f64;
        let mut mean = vec![0.0; x.d];
        for i in 0..x.n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.d];
        for i in 0..x.n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Self { mean, inv_std }
    }

    /// Standardized rows with a trailing intercept column.
    fn apply(&self, x: &Features) -> Features {
        let d = x.d + 1;
        let mut data = Vec::with_capacity(x.n * d);
        for i in 0..x.n {
            for ((v, m), s) in x.row(i).iter().zip(&self.mean).zip(&self.inv_std) {
                data.push((v - m) * s);
            }
            data.push(1.0);
        }
        Features { n: x.n, d, data }
    }
}

fn check_labels(labels: &[usize], n: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim("linear_probe", &[n], &[labels.len()]));
    }
    if n == 0 {
        return Err(Error::config("probe", format!("{what} set is empty")));
    }
    Ok(())
}

/// Objective value and gradient for weights `w` (`d × k`, last row intercept).
fn objective(x: &Features, y: &[usize], k: usize, w: &[f64], l2: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let d = x.d;
    let n = x.n as f64;
    let mut loss = 0.0;
    let mut logits = vec![0.0; k];
    for i in 0..x.n {
        let row = x.row(i);
        logits.iter_mut().for_each(|l| *l = 0.0);
        for (j, &xj) in row.iter().enumerate() {
            if xj != 0.0 {
                for c in 0..k {
                    logits[c] += xj * w[j * k + c];
                }
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += z.ln() + max - logits[y[i]];
        for c in 0..k {
            let p = (logits[c] - max).exp() / z - if c == y[i] { 1.0 } else { 0.0 };
            for (j, &xj) in row.iter().enumerate() {
                grad[j * k + c] += p * xj / n;
            }
        }
    }
    let mut penalty = 0.0;
    for j in 0..d - 1 {
        for c in 0..k {
            let wj = w[j * k + c];
            penalty += wj * wj;
            grad[j * k + c] += l2 * wj;
        }
    }
    loss / n + 0.5 * l2 * penalty
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_norm(x: &Features) -> f64 {
    let mut v = vec![1.0 / (x.d as f64).sqrt(); x.d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut u = vec![0.0; x.d];
        for i in 0..x.n {
            let row = x.row(i);
            let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (uj, &xj) in u.iter_mut().zip(row) {
                *uj += s * xj / x.n as f64;
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = u.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Fits on the training split and reports accuracy on the evaluation split.
pub fn linear_probe(
    train: &Features,
    train_labels: &[usize],
    eval: &Features,
    eval_labels: &[usize],
    opts: &ProbeOptions,
) -> Result<ProbeFit> {
    check_labels(train_labels, train.n, "training")?;
    check_labels(eval_labels, eval.n, "evaluation")?;
    if train.d != eval.d {
        return Err(Error::dim("linear_probe", &[train.d], &[eval.d]));
    }
    let mut distinct: Vec<usize> = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::config("probe", "labels must take at least two distinct values"));
    }
    let k = distinct.iter().chain(eval_labels).max().unwrap() + 1;
    let scaler = Standardizer::fit(train);
    let (xt, xe) = (scaler.apply(train), scaler.apply(eval));
    let lip = 0.5 * gram_spectral_norm(&xt) + opts.l2;
    let step = 1.0 / lip.max(1e-12);

    let size = xt.d * k;
    let (mut w, mut w_prev, mut look, mut grad) = (vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]);
    let mut momentum = 1.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_obj = f64::INFINITY;
    while iterations < opts.max_iters {
        iterations += 1;
        let obj = objective(&xt, train_labels, k, &look, opts.l2, &mut grad);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < opts.tolerance {
            w.copy_from_slice(&look);
            converged = true;
            break;
        }
        w_prev.copy_from_slice(&w);
        for i in 0..size {
            w[i] = look[i] - step * grad[i];
        }
        // adaptive restart when the objective goes up
        if obj > prev_obj {
            momentum = 1.0;
        }
        prev_obj = obj;
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        momentum = next;
        for i in 0..size {
            look[i] = w[i] + beta * (w[i] - w_prev[i]);
        }
    }

    let mut correct = 0;
    for i in 0..xe.n {
        let row = xe.row(i);
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..k {
            let s: f64 = row.iter().enumerate().map(|(j, x)| x * w[j * k + c]).sum();
            if s > best.0 {
                best = (s, c);
            }
        }
        correct += usize::from(best.1 == eval_labels[i]);
    }
    Ok(ProbeFit {
        accuracy: correct as f64 / xe.n as f64,
        n_eval: xe.n,
        iterations,
        converged,
    })
}
