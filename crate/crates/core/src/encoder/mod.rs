//! Three-branch encoder: a visual and an audio transformer whose attention
//! also spans a small set of fusion tokens, plus a fusion branch updating
//! those tokens.

mod blocks;
mod config;

pub use blocks::{
    aggregate_tokens, cross_attention, dense_fusion_block, factorized_fusion_block, interaction_grid, modality_block,
    token_fusion_block, FusionBlock, InteractionFusion,
};
pub use config::{FusionConfig, FusionLayers, FusionMode, LayerPreset};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{CrossAttentionBlock, ParamBuilder, TransformerBlock};
use crate::scalar::Scalar;

pub const TOKEN_INIT_STD: f64 = 0.02;

pub struct EncoderLayer<T: Scalar> {
    pub visual: TransformerBlock<T>,
    pub audio: TransformerBlock<T>,
    pub fusion: Option<FusionBlock<T>>,
}

pub struct EncoderOutput<T: Scalar> {
    pub visual: Var<T>,
    pub audio: Var<T>,
    pub fusion: Var<T>,
}

/// Fusion and aggregation tokens as carried between layers.
pub struct FusionState<T: Scalar> {
    pub fusion: Var<T>,
    pub agg_a: Option<Var<T>>,
    pub agg_v: Option<Var<T>>,
}

pub struct Encoder<T: Scalar> {
    pub cfg: FusionConfig,
    pub layers: Vec<EncoderLayer<T>>,
    /// `[F, D]` initial fusion tokens.
    pub fusion_tokens: Var<T>,
    pub agg_tokens_a: Option<Var<T>>,
    pub agg_tokens_v: Option<Var<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Parameters are registered under `encoder.*`.
    pub fn new(pb: &mut ParamBuilder<T>, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let fusion_at = cfg.layers();
        let d = cfg.dim;
        pb.scope("encoder", |pb| {
            let fusion_tokens = pb.trunc_normal("fusion_tokens", &[cfg.fusion_tokens, d], TOKEN_INIT_STD);
            let (agg_tokens_a, agg_tokens_v) = if cfg.fusion_mode == FusionMode::Factorized {
                (
                    Some(pb.trunc_normal("agg_tokens_a", &[cfg.agg_tokens_a, d], TOKEN_INIT_STD)),
                    Some(pb.trunc_normal("agg_tokens_v", &[cfg.agg_tokens_v, d], TOKEN_INIT_STD)),
                )
            } else {
                (None, None)
            };
            let mut layers = Vec::with_capacity(cfg.depth);
            for l in 1..=cfg.depth {
                let layer = pb.scope(&format!("layer{l}"), |pb| -> Result<_> {
                    let visual = TransformerBlock::new(pb, "visual", d, cfg.heads, d / cfg.heads, cfg.mlp_ratio_modality)?;
                    let audio = TransformerBlock::new(pb, "audio", d, cfg.heads, d / cfg.heads, cfg.mlp_ratio_modality)?;
                    let fusion = if fusion_at.contains(&l) {
                        Some(pb.scope("fusion", |pb| Self::fusion_block(pb, cfg))?)
                    } else {
                        None
                    };
                    Ok(EncoderLayer { visual, audio, fusion })
                })?;
                layers.push(layer);
            }
            Ok(Self {
                cfg: cfg.clone(),
                layers,
                fusion_tokens,
                agg_tokens_a,
                agg_tokens_v,
            })
        })
    }

    fn fusion_block(pb: &mut ParamBuilder<T>, cfg: &FusionConfig) -> Result<FusionBlock<T>> {
        let (d, h, a, r) = (cfg.dim, cfg.heads, cfg.attn_dim, cfg.mlp_ratio_fusion);
        Ok(match cfg.fusion_mode {
            FusionMode::Token => FusionBlock::Token(TransformerBlock::new(pb, "block", d, h, a, r)?),
            FusionMode::Dense => FusionBlock::Dense(InteractionFusion::new(pb, d, h, a, r)?),
            FusionMode::Factorized => FusionBlock::Factorized {
                agg_a: CrossAttentionBlock::new(pb, "agg_a", d, h, a, r)?,
                agg_v: CrossAttentionBlock::new(pb, "agg_v", d, h, a, r)?,
                fuse: InteractionFusion::new(pb, d, h, a, r)?,
            },
            FusionMode::None => unreachable!("validated: no fusion layers"),
        })
    }

    pub fn initial_state(&self, batch: usize) -> Result<FusionState<T>> {
        let tile = |v: &Var<T>| {
            let s = v.shape();
            v.broadcast_to(&[batch, s[0], s[1]])
        };
        Ok(FusionState {
            fusion: tile(&self.fusion_tokens)?,
            agg_a: self.agg_tokens_a.as_ref().map(tile).transpose()?,
            agg_v: self.agg_tokens_v.as_ref().map(tile).transpose()?,
        })
    }

    /// `x_v: [B, n_v, D]`, `x_a: [B, n_a, D]` (visible tokens only).
    pub fn forward(&self, x_v: &Var<T>, x_a: &Var<T>) -> Result<EncoderOutput<T>> {
        let (sv, sa) = (x_v.shape(), x_a.shape());
        let d = self.cfg.dim;
        if sv.len() != 3 || sa.len() != 3 || sv[0] != sa[0] || sv[2] != d || sa[2] != d {
            return Err(Error::dim("encoder_forward", &sv, &sa));
        }
        let mut state = self.initial_state(sv[0])?;
        let (mut x_v, mut x_a) = (x_v.clone(), x_a.clone());
        for layer in &self.layers {
            let prev = state.fusion.clone();
            if let Some(block) = &layer.fusion {
                state.fusion = match block {
                    FusionBlock::Token(b) => token_fusion_block(b, &prev, &x_v, &x_a)?,
                    FusionBlock::Dense(f) => dense_fusion_block(f, &prev, &x_a, &x_v)?,
                    FusionBlock::Factorized { agg_a, agg_v, fuse } => {
                        let (ba, bv) = if self.cfg.aggregation_passthrough {
                            (x_a.clone(), x_v.clone())
                        } else {
                            let pa = state.agg_a.as_ref().expect("factorized state");
                            let pv = state.agg_v.as_ref().expect("factorized state");
                            (aggregate_tokens(agg_a, pa, &x_a)?, aggregate_tokens(agg_v, pv, &x_v)?)
                        };
                        let out = factorized_fusion_block(fuse, &prev, &ba, &bv)?;
                        state.agg_a = Some(ba);
                        state.agg_v = Some(bv);
                        out
                    }
                };
            }
            let keys = layer.fusion.as_ref().map(|_| &prev);
            let next_v = modality_block(&layer.visual, &x_v, keys)?;
            let next_a = modality_block(&layer.audio, &x_a, keys)?;
            x_v = next_v;
            x_a = next_a;
        }
        Ok(EncoderOutput {
            visual: x_v,
            audio: x_a,
            fusion: state.fusion,
        })
    }
}
