use rand::Rng;

use crate::autograd::{RowIndex, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenize::TokenBatch;
use crate::tensor::Tensor;

/// Disjoint visible/masked partition of `0..n_tokens`, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Plan with nothing masked.
    pub fn full(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            visible: (0..n_tokens).collect(),
            masked: Vec::new(),
        }
    }

    pub fn ratio(&self) -> f64 {
        if self.n_tokens == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.n_tokens as f64
        }
    }
}

/// Number of masked tokens for `ratio` of `n`.
pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64).round() as usize
}

/// Uniform random partition with `round(ratio · n)` masked tokens.
pub fn sample_mask(n_tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("mask_ratio", format!("{ratio} is outside [0, 1)")));
    }
    let k = masked_count(n_tokens, ratio);
    if n_tokens > 0 && k >= n_tokens {
        return Err(Error::config(
            "mask_ratio",
            format!("{ratio} masks all {n_tokens} tokens; at least one must stay visible"),
        ));
    }
    let mut is_masked = vec![false; n_tokens];
    for i in rand::seq::index::sample(rng, n_tokens, k) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_tokens).partition(|&i| is_masked[i]);
    Ok(MaskPlan {
        n_tokens,
        visible,
        masked,
    })
}

/// One independent plan per sample.
pub fn sample_plans(batch: usize, n_tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<MaskPlan>> {
    (0..batch).map(|_| sample_mask(n_tokens, ratio, rng)).collect()
}

pub(crate) fn visible_index(plans: &[MaskPlan]) -> RowIndex {
    RowIndex(plans.iter().map(|p| p.visible.clone()).collect())
}

pub(crate) fn masked_index(plans: &[MaskPlan]) -> RowIndex {
    RowIndex(plans.iter().map(|p| p.masked.clone()).collect())
}

fn check_plans<T: Scalar>(batch: &TokenBatch<T>, plans: &[MaskPlan]) -> Result<()> {
    if plans.len() != batch.batch_size() {
        return Err(Error::dim("apply_mask", &[batch.batch_size()], &[plans.len()]));
    }
    for p in plans {
        if p.n_tokens != batch.len() {
            return Err(Error::dim("apply_mask", &[batch.len()], &[p.n_tokens]));
        }
        if p.masked.len() != plans[0].masked.len() {
            return Err(Error::dim("apply_mask", &[plans[0].masked.len()], &[p.masked.len()]));
        }
    }
    Ok(())
}

/// Splits a token batch by per-sample plans. Returns the visible tokens (with
/// their positional embeddings) and the raw patch contents at the masked
/// positions, `[B, |M|, patch_dim]`, in `M` order.
pub fn apply_mask<T: Scalar>(batch: &TokenBatch<T>, plans: &[MaskPlan]) -> Result<(TokenBatch<T>, Tensor<T>)> {
    check_plans(batch, plans)?;
    let vis = visible_index(plans);
    let raw = Var::constant(batch.patches.clone());
    let visible = TokenBatch {
        tokens: batch.tokens.gather_rows(&vis)?,
        patches: raw.gather_rows(&vis)?.value().clone(),
        modality: batch.modality,
        grid: batch.grid,
        patch_size: batch.patch_size,
    };
    let targets = raw.gather_rows(&masked_index(plans))?.value().clone();
    Ok((visible, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use crate::tokenize::{patchify, unpatchify, Modality, PatchEmbed};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_mask(10, 0.0, &mut rng).unwrap();
        assert_eq!(p.visible, (0..10).collect::<Vec<_>>());
        assert!(p.masked.is_empty());
        assert_eq!(sample_mask(196, 0.75, &mut rng).unwrap().masked.len(), 147);
        assert!(sample_mask(10, 1.0, &mut rng).is_err());
        assert!(sample_mask(10, -0.1, &mut rng).is_err());
        assert!(sample_mask(2, 0.9, &mut rng).is_err());
    }

    #[test]
    fn deterministic_under_fixed_rng() {
        let a = sample_mask(50, 0.6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(50, 0.6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_index_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_mask(8, 0.5, &mut rng).unwrap().masked {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn modalities_get_independent_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let (mut both, mut v0, mut a0) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let pv = sample_mask(64, 0.75, &mut rng).unwrap();
            let pa = sample_mask(24, 0.75, &mut rng).unwrap();
            let mv = pv.masked.contains(&0) as u8 as f64;
            let ma = pa.masked.contains(&0) as u8 as f64;
            both += mv * ma;
            v0 += mv;
            a0 += ma;
        }
        let cov = both / n as f64 - (v0 / n as f64) * (a0 / n as f64);
        assert!(cov.abs() < 0.02, "covariance {cov}");
    }

    fn embedded(seed: u64) -> (TokenBatch<f64>, Tensor<f64>) {
        let img = Tensor::<f64>::from_fn(&[2, 3, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0);
        let mut pb = ParamBuilder::new(seed);
        let e = PatchEmbed::new(&mut pb, "v", Modality::Visual, (2, 2), 8, 192, 16).unwrap();
        (crate::tokenize::patchify_image(&img, &e).unwrap(), img)
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let (tb, _) = embedded(0);
        let plans = vec![MaskPlan::full(4); 2];
        let (vis, targets) = apply_mask(&tb, &plans).unwrap();
        assert_eq!(vis.tokens.value().data(), tb.tokens.value().data());
        assert_eq!(targets.shape(), &[2, 0, 192]);
    }

    #[test]
    fn reassembly_and_targets_match_ground_truth() {
        let (tb, img) = embedded(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plans = sample_plans(2, 4, 0.5, &mut rng).unwrap();
        let (vis, targets) = apply_mask(&tb, &plans).unwrap();
        // reassemble tokens
        let v_part = vis.tokens.scatter_rows(&visible_index(&plans), 4).unwrap();
        let masked_tokens = tb.tokens.gather_rows(&masked_index(&plans)).unwrap();
        let m_part = masked_tokens.scatter_rows(&masked_index(&plans), 4).unwrap();
        assert_eq!(v_part.add(&m_part).unwrap().value().data(), tb.tokens.value().data());
        // targets equal the unpatchified image at masked positions
        let gt = patchify(&img, 8).unwrap();
        let back = unpatchify(&gt, (2, 2), 8, 3).unwrap();
        assert_eq!(back, img);
        for (b, p) in plans.iter().enumerate() {
            for (r, &m) in p.masked.iter().enumerate() {
                let t = &targets.data()[(b * 2 + r) * 192..(b * 2 + r + 1) * 192];
                let g = &gt.data()[(b * 4 + m) * 192..(b * 4 + m + 1) * 192];
                assert_eq!(t, g);
                // spot check against pixel layout: first element is pixel (0,0,ch0) of the patch
                let (row, col) = (m / 2, m % 2);
                assert_eq!(t[0], img.data()[((b * 3) * 16 + row * 8) * 16 + col * 8]);
            }
        }
    }

    #[test]
    fn count_mismatch_is_dimension_error() {
        let (tb, _) = embedded(0);
        let plans = vec![MaskPlan::full(5); 2];
        assert!(matches!(apply_mask(&tb, &plans), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 1usize..300, ratio in 0.0f64..0.99, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match sample_mask(n, ratio, &mut rng) {
                Ok(p) => {
                    prop_assert_eq!(p.masked.len(), (ratio * n as f64).round() as usize);
                    prop_assert_eq!(p.masked.len() + p.visible.len(), n);
                    let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
                    all.sort();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                    prop_assert!(p.visible.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(p.masked.windows(2).all(|w| w[0] < w[1]));
                }
                Err(_) => prop_assert!(masked_count(n, ratio) >= n),
            }
        }
    }
}
