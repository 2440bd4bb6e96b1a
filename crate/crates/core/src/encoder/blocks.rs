//! Fusion-path blocks: pairwise interaction grids, the dense and factorized
//! interaction fusion blocks, aggregation, and token fusion.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{CrossAttentionBlock, ParamBuilder, TransformerBlock};
use crate::scalar::Scalar;

/// `[B, n_a·n_v, D]` grid whose row `i·n_v + j` is `W_a·x_a[i] + W_v·x_v[j]`.
/// The grid is materialized in full.
pub fn interaction_grid<T: Scalar>(x_a: &Var<T>, x_v: &Var<T>, w_a: &Var<T>, w_v: &Var<T>) -> Result<Var<T>> {
    let (sa, sv) = (x_a.shape(), x_v.shape());
    if sa.len() != 3 || sv.len() != 3 || sa[0] != sv[0] || sa[2] != sv[2] {
        return Err(Error::dim("interaction_grid", &sa, &sv));
    }
    let (b, na, nv, d) = (sa[0], sa[1], sv[1], sa[2]);
    let pa = x_a.matmul(w_a)?;
    let pv = x_v.matmul(w_v)?;
    if pa.shape()[2] != d || pv.shape()[2] != d {
        return Err(Error::dim("interaction_grid", &w_a.shape(), &w_v.shape()));
    }
    let grid = pa.reshape(&[b, na, 1, d])?.add(&pv.reshape(&[b, 1, nv, d])?)?;
    grid.reshape(&[b, na * nv, d])
}

/// Fusion tokens updated by cross-attention over a linear interaction grid.
/// Shared by the dense and factorized variants; only the token sets fed to
/// the grid differ.
pub struct InteractionFusion<T: Scalar> {
    pub w_a: Var<T>,
    pub w_v: Var<T>,
    pub cross: CrossAttentionBlock<T>,
}

impl<T: Scalar> InteractionFusion<T> {
    pub fn new(pb: &mut ParamBuilder<T>, dim: usize, heads: usize, attn_dim: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            w_a: pb.xavier("w_a", dim, dim),
            w_v: pb.xavier("w_v", dim, dim),
            cross: CrossAttentionBlock::new(pb, "cross", dim, heads, attn_dim, mlp_ratio)?,
        })
    }

    pub fn forward(&self, fusion: &Var<T>, x_a: &Var<T>, x_v: &Var<T>) -> Result<Var<T>> {
        let grid = interaction_grid(x_a, x_v, &self.w_a, &self.w_v)?;
        self.cross.forward(fusion, &grid)
    }
}

/// Dense interactions over all audio/visual token pairs.
pub fn dense_fusion_block<T: Scalar>(
    block: &InteractionFusion<T>,
    fusion: &Var<T>,
    x_a: &Var<T>,
    x_v: &Var<T>,
) -> Result<Var<T>> {
    block.forward(fusion, x_a, x_v)
}

/// Aggregation tokens summarize a modality by cross-attending to its tokens.
pub fn aggregate_tokens<T: Scalar>(block: &CrossAttentionBlock<T>, agg_prev: &Var<T>, x_mod: &Var<T>) -> Result<Var<T>> {
    block.forward(agg_prev, x_mod)
}

/// Interactions restricted to the aggregated tokens (`n_agg_a × n_agg_v` pairs).
pub fn factorized_fusion_block<T: Scalar>(
    block: &InteractionFusion<T>,
    fusion: &Var<T>,
    agg_a: &Var<T>,
    agg_v: &Var<T>,
) -> Result<Var<T>> {
    block.forward(fusion, agg_a, agg_v)
}

/// Fusion tokens self-attend over `[X_mm; X_v; X_a]`; no pairwise terms.
pub fn token_fusion_block<T: Scalar>(
    block: &TransformerBlock<T>,
    fusion: &Var<T>,
    x_v: &Var<T>,
    x_a: &Var<T>,
) -> Result<Var<T>> {
    let ctx = Var::concat(&[x_v.clone(), x_a.clone()], 1)?;
    block.forward(fusion, Some(&ctx))
}

/// Modality branch update; keys and values also span the fusion tokens when
/// given.
pub fn modality_block<T: Scalar>(block: &TransformerBlock<T>, x_mod: &Var<T>, fusion_prev: Option<&Var<T>>) -> Result<Var<T>> {
    block.forward(x_mod, fusion_prev)
}

/// Cross-attention with residual and MLP, queries attending to `keys_values`.
pub fn cross_attention<T: Scalar>(block: &CrossAttentionBlock<T>, queries: &Var<T>, keys_values: &Var<T>) -> Result<Var<T>> {
    block.forward(queries, keys_values)
}

pub enum FusionBlock<T: Scalar> {
    Token(TransformerBlock<T>),
    Dense(InteractionFusion<T>),
    Factorized {
        agg_a: CrossAttentionBlock<T>,
        agg_v: CrossAttentionBlock<T>,
        fuse: InteractionFusion<T>,
    },
}
