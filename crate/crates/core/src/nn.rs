//! Parameter bookkeeping and the transformer building blocks shared by the
//! encoder and the decoders.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

pub struct Param<T: Scalar> {
    pub name: String,
    pub var: Var<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered, named collection of trainable leaves.
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.var.value().numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.var.zero_grad());
    }

    /// Snapshot of every parameter value, in registration order.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.var.value().clone())).collect()
    }

    /// Overwrites parameters by name. Every stored parameter must be present
    /// with a matching shape.
    pub fn load(&self, values: &[(String, Tensor<T>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.params.len(),
                values.len()
            )));
        }
        for p in &self.params {
            let (_, t) = values
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.var.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: model {:?}, source {:?}",
                    p.name,
                    p.var.value().shape(),
                    t.shape()
                )));
            }
        }
        for p in &self.params {
            let (_, t) = values.iter().find(|(n, _)| *n == p.name).unwrap();
            p.var.set_value(t.clone());
        }
        Ok(())
    }
}

/// Creates named, initialized parameters into a [`ParamStore`].
pub struct ParamBuilder<T: Scalar> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> Var<T> {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        assert!(self.store.get(&full).is_none(), "duplicate parameter {full}");
        let var = Var::param(value);
        self.store.params.push(Param {
            name: full,
            var: var.clone(),
            decay,
        });
        var
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Var<T> {
        self.add(name, Tensor::zeros(shape), false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Var<T> {
        self.add(name, Tensor::full(shape, T::one()), false)
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Var<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.random_range(-a..a)));
        self.add(name, t, true)
    }

    /// Normal(0, std) truncated at ±2 std.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Var<T> {
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break T::lit(x);
            }
        });
        self.add(name, t, false)
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scope(name, |pb| Self {
            weight: pb.xavier("weight", fan_in, fan_out),
            bias: Some(pb.zeros("bias", &[fan_out])),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scope(name, |pb| Self {
            weight: pb.xavier("weight", fan_in, fan_out),
            bias: None,
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Zeroes weight and bias.
    pub fn zero_(&self) {
        self.weight.update_value(|t| t.data_mut().fill(T::zero()));
        if let Some(b) = &self.bias {
            b.update_value(|t| t.data_mut().fill(T::zero()));
        }
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gain: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| Self {
            gain: pb.ones("gain", &[dim]),
            bias: pb.zeros("bias", &[dim]),
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&self.gain, &self.bias, T::lit(LN_EPS))
    }
}

pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, dim: usize, ratio: f64) -> Self {
        let hidden = ((dim as f64) * ratio).round().max(1.0) as usize;
        pb.scope(name, |pb| Self {
            fc1: Linear::new(pb, "fc1", dim, hidden),
            fc2: Linear::new(pb, "fc2", hidden, dim),
        })
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

thread_local! {
    static ATTN_TRACE: RefCell<Option<Vec<Tensor<f64>>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns every attention probability tensor
/// (`[B, heads, Nq, Nk]`, cast to `f64`) computed on this thread meanwhile.
pub fn trace_attention<R>(f: impl FnOnce() -> R) -> (R, Vec<Tensor<f64>>) {
    let prev = ATTN_TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let r = f();
    let probs = ATTN_TRACE.with(|t| std::mem::replace(&mut *t.borrow_mut(), prev)).unwrap_or_default();
    (r, probs)
}

/// Multi-head scaled dot-product attention. Similarity is computed in a
/// `heads × qk_dim` space that need not match the value width `dim`.
pub struct Attention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize, qk_dim: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("{heads} heads do not divide width {dim}")));
        }
        if qk_dim == 0 {
            return Err(Error::config("attn_dim", "must be positive"));
        }
        Ok(pb.scope(name, |pb| Self {
            q: Linear::new(pb, "q", dim, heads * qk_dim),
            k: Linear::new(pb, "k", dim, heads * qk_dim),
            v: Linear::new(pb, "v", dim, dim),
            out: Linear::new(pb, "out", dim, dim),
            heads,
            qk_dim,
            v_dim: dim / heads,
        }))
    }

    fn split_heads(&self, x: &Var<T>, per_head: usize) -> Result<Var<T>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, per_head])?.permute(&[0, 2, 1, 3])
    }

    /// `queries: [B, Nq, D]`, `context: [B, Nk, D]` → `[B, Nq, D]` (no residual).
    pub fn forward(&self, queries: &Var<T>, context: &Var<T>) -> Result<Var<T>> {
        let (qs, cs) = (queries.shape(), context.shape());
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != cs[2] {
            return Err(Error::dim("attention", &qs, &cs));
        }
        let q = self.split_heads(&self.q.forward(queries)?, self.qk_dim)?;
        let k = self.split_heads(&self.k.forward(context)?, self.qk_dim)?;
        let v = self.split_heads(&self.v.forward(context)?, self.v_dim)?;
        let scale = T::one() / T::from_usize(self.qk_dim).unwrap().sqrt();
        let probs = q.matmul_t(&k)?.scale(scale).softmax(-1)?;
        ATTN_TRACE.with(|t| {
            if let Some(buf) = t.borrow_mut().as_mut() {
                buf.push(probs.value().cast());
            }
        });
        let mixed = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?;
        let mixed = mixed.reshape(&[qs[0], qs[1], self.heads * self.v_dim])?;
        self.out.forward(&mixed)
    }
}

/// Pre-norm transformer block. Queries are the block's own tokens; keys and
/// values additionally span `extra` tokens when given, normalized by the same
/// layer norm. Only the query tokens are returned.
pub struct TransformerBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        qk_dim: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                norm1: LayerNorm::new(pb, "norm1", dim),
                attn: Attention::new(pb, "attn", dim, heads, qk_dim)?,
                norm2: LayerNorm::new(pb, "norm2", dim),
                mlp: Mlp::new(pb, "mlp", dim, mlp_ratio),
            })
        })
    }

    pub fn forward(&self, x: &Var<T>, extra: Option<&Var<T>>) -> Result<Var<T>> {
        let h = self.norm1.forward(x)?;
        let ctx = match extra {
            Some(e) => Var::concat(&[h.clone(), self.norm1.forward(e)?], 1)?,
            None => h.clone(),
        };
        let z = x.add(&self.attn.forward(&h, &ctx)?)?;
        z.add(&self.mlp.forward(&self.norm2.forward(&z)?)?)
    }

    /// Zeroes value, output and MLP-output projections; the block becomes the
    /// identity on its query stream.
    pub fn zero_residual_branches(&self) {
        self.attn.v.zero_();
        self.attn.out.zero_();
        self.mlp.fc2.zero_();
    }
}

/// Pre-norm cross-attention block: `Z = Q + Attn(LN(Q), LN(KV))`, then
/// `X = Z + MLP(LN(Z))`.
pub struct CrossAttentionBlock<T: Scalar> {
    pub norm_q: LayerNorm<T>,
    pub norm_kv: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> CrossAttentionBlock<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        qk_dim: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                norm_q: LayerNorm::new(pb, "norm_q", dim),
                norm_kv: LayerNorm::new(pb, "norm_kv", dim),
                attn: Attention::new(pb, "attn", dim, heads, qk_dim)?,
                norm2: LayerNorm::new(pb, "norm2", dim),
                mlp: Mlp::new(pb, "mlp", dim, mlp_ratio),
            })
        })
    }

    pub fn forward(&self, queries: &Var<T>, keys_values: &Var<T>) -> Result<Var<T>> {
        let q = self.norm_q.forward(queries)?;
        let kv = self.norm_kv.forward(keys_values)?;
        let z = queries.add(&self.attn.forward(&q, &kv)?)?;
        z.add(&self.mlp.forward(&self.norm2.forward(&z)?)?)
    }

    pub fn zero_residual_branches(&self) {
        self.attn.v.zero_();
        self.attn.out.zero_();
        self.mlp.fc2.zero_();
    }
}
