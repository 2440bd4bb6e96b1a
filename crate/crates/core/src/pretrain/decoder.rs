use crate::autograd::{RowIndex, Var};
use crate::encoder::TOKEN_INIT_STD;
use crate::error::{Error, Result};
use crate::masking::{masked_index, visible_index, MaskPlan};
use crate::nn::{LayerNorm, Linear, ParamBuilder, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::sincos_pos_embed;

use super::config::{DecoderConfig, InputPolicy};

/// Reconstructs the masked patches of one modality. Mask tokens carry the
/// positional embedding of the slot they fill; the sequence is completed by
/// the (projected) fusion tokens and, depending on the input policy, the
/// visible tokens of the modality.
pub struct Decoder<T: Scalar> {
    pub cfg: DecoderConfig,
    pub embed: Linear<T>,
    /// `[dim]`
    pub mask_token: Var<T>,
    /// `[n_tokens, dim]`
    pub pos: Var<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
    pub n_tokens: usize,
    pub patch_dim: usize,
    head_only: bool,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cfg: &DecoderConfig,
        enc_dim: usize,
        grid: (usize, usize),
        patch_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let pos = Var::constant(sincos_pos_embed(grid, cfg.dim)?);
        pb.scope(name, |pb| {
            let embed = Linear::new(pb, "embed", enc_dim, cfg.dim);
            let mask_token = pb.trunc_normal("mask_token", &[cfg.dim], TOKEN_INIT_STD);
            let blocks = (0..cfg.depth)
                .map(|i| TransformerBlock::new(pb, &format!("block{i}"), cfg.dim, cfg.heads, cfg.dim / cfg.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                cfg: cfg.clone(),
                embed,
                mask_token,
                pos,
                blocks,
                norm: LayerNorm::new(pb, "norm", cfg.dim),
                head: Linear::new(pb, "head", cfg.dim, patch_dim),
                n_tokens: grid.0 * grid.1,
                patch_dim,
                head_only: false,
            })
        })
    }

    /// Test hook: predictions become `head(mask_token)` with positional
    /// embedding, blocks and final norm bypassed.
    pub fn set_head_only(&mut self, on: bool) {
        self.head_only = on;
    }

    /// `fusion: [B, F, D]`, `visible: [B, |V|, D]` → predictions
    /// `[B, |M|, patch_dim]` in `M` order.
    pub fn decode(&self, fusion: &Var<T>, visible: &Var<T>, plans: &[MaskPlan]) -> Result<Var<T>> {
        let vs = visible.shape();
        let b = plans.len();
        if vs.len() != 3 || vs[0] != b || fusion.shape()[0] != b {
            return Err(Error::dim("decode", &vs, &[b]));
        }
        let n_masked = plans.first().map_or(0, |p| p.masked.len());
        for p in plans {
            if p.n_tokens != self.n_tokens || p.visible.len() != vs[1] || p.masked.len() != n_masked {
                return Err(Error::dim("decode", &[self.n_tokens, vs[1], n_masked], &[p.n_tokens, p.visible.len(), p.masked.len()]));
            }
        }
        if n_masked == 0 {
            return Ok(Var::constant(Tensor::zeros(&[b, 0, self.patch_dim])));
        }
        let d = self.cfg.dim;
        let m_idx = masked_index(plans);
        let masks = self
            .mask_token
            .reshape(&[1, 1, d])?
            .broadcast_to(&[b, n_masked, d])?
            .scatter_rows(&m_idx, self.n_tokens)?;
        if self.head_only {
            return self.head.forward(&masks.gather_rows(&m_idx)?);
        }
        let mut slots = masks.add(&self.pos)?;
        let seq = match self.cfg.input_policy {
            InputPolicy::FusionPlusUnimodal => {
                let vis = self.embed.forward(visible)?.scatter_rows(&visible_index(plans), self.n_tokens)?;
                slots = slots.add(&vis)?;
                slots
            }
            InputPolicy::FusionOnly => slots.gather_rows(&m_idx)?,
        };
        let mut x = Var::concat(&[seq, self.embed.forward(fusion)?], 1)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
        }
        let x = self.norm.forward(&x)?;
        let picked = match self.cfg.input_policy {
            InputPolicy::FusionPlusUnimodal => x.gather_rows(&m_idx)?,
            InputPolicy::FusionOnly => x.gather_rows(&RowIndex::shared((0..n_masked).collect()))?,
        };
        self.head.forward(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_plans;
    use crate::nn::trace_attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn decoder(policy: InputPolicy, patch_dim: usize) -> Decoder<f64> {
        let cfg = DecoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            input_policy: policy,
        };
        let mut pb = ParamBuilder::new(3);
        Decoder::new(&mut pb, "dec", &cfg, 12, (2, 3), patch_dim).unwrap()
    }

    #[test]
    fn shapes_and_sequence_composition() {
        let plans = sample_plans(2, 6, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fusion = Var::constant(tensor(&[2, 4, 12], 1));
        let vis = Var::constant(tensor(&[2, 3, 12], 2));
        for (policy, nk) in [(InputPolicy::FusionPlusUnimodal, 6 + 4), (InputPolicy::FusionOnly, 3 + 4)] {
            let dec = decoder(policy, 5);
            let (pred, probs) = trace_attention(|| dec.decode(&fusion, &vis, &plans).unwrap());
            assert_eq!(pred.shape(), vec![2, 3, 5]);
            assert_eq!(probs[0].shape()[3], nk);
        }
    }

    #[test]
    fn nothing_masked_gives_empty_prediction() {
        let dec = decoder(InputPolicy::FusionPlusUnimodal, 5);
        let plans = vec![MaskPlan::full(6)];
        let pred = dec
            .decode(&Var::constant(tensor(&[1, 4, 12], 1)), &Var::constant(tensor(&[1, 6, 12], 2)), &plans)
            .unwrap();
        assert_eq!(pred.shape(), vec![1, 0, 5]);
    }

    #[test]
    fn plan_mismatch_is_a_dimension_error() {
        let dec = decoder(InputPolicy::FusionPlusUnimodal, 5);
        let plans = sample_plans(1, 7, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = dec.decode(&Var::constant(tensor(&[1, 4, 12], 1)), &Var::constant(tensor(&[1, 3, 12], 2)), &plans);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn head_isolation_recovers_patch() {
        let mut dec = decoder(InputPolicy::FusionPlusUnimodal, 8);
        dec.head.weight.set_value(Tensor::eye(8));
        let patch = tensor(&[8], 9);
        dec.mask_token.set_value(patch.clone());
        dec.set_head_only(true);
        let plans = sample_plans(2, 6, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let pred = dec
            .decode(&Var::constant(tensor(&[2, 4, 12], 1)), &Var::constant(tensor(&[2, 3, 12], 2)), &plans)
            .unwrap();
        for row in pred.value().data().chunks(8) {
            assert_eq!(row, patch.data());
        }
    }
}
