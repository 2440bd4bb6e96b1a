//! Patch tokenization of images and spectrograms, and fixed 2-D sin-cos
//! positional embeddings.
//!
//! Patch contents are flattened in `(row-in-patch, col-in-patch, channel)`
//! order. Spectrograms are `[B, 1, bins, frames]`; the time axis is
//! zero-padded up to the next multiple of the patch size.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Fusion,
}

/// Patch-token sequence of one modality.
#[derive(Clone, Debug)]
pub struct TokenBatch<T: Scalar> {
    /// `[B, N, D]` embedded tokens (positional embedding included).
    pub tokens: Var<T>,
    /// `[B, N, patch_dim]` raw patch contents before projection.
    pub patches: Tensor<T>,
    pub modality: Modality,
    /// `(rows, cols)` patch layout.
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[B, C, H, W]` → `[B, (H/p)(W/p), p·p·C]`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim("patchify", s, &[0, 0, 0, 0]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(
            "patch",
            format!("image {h}x{w} is not divisible by patch size {patch}"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let x = images.data();
    let mut out = Vec::with_capacity(b * gr * gc * pd);
    for bi in 0..b {
        for r in 0..gr {
            for col in 0..gc {
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            let (y, xx) = (r * patch + py, col * patch + px);
                            out.push(x[((bi * c + ch) * h + y) * w + xx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, gr * gc, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    grid: (usize, usize),
    patch: usize,
    channels: usize,
) -> Result<Tensor<T>> {
    let s = patches.shape();
    let pd = patch * patch * channels;
    if s.len() != 3 || s[1] != grid.0 * grid.1 || s[2] != pd {
        return Err(Error::dim("unpatchify", s, &[grid.0 * grid.1, pd]));
    }
    let (b, h, w) = (s[0], grid.0 * patch, grid.1 * patch);
    let mut out = vec![T::zero(); b * channels * h * w];
    let x = patches.data();
    let mut i = 0;
    for bi in 0..b {
        for r in 0..grid.0 {
            for col in 0..grid.1 {
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..channels {
                            let (y, xx) = (r * patch + py, col * patch + px);
                            out[((bi * channels + ch) * h + y) * w + xx] = x[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, channels, h, w], out)
}

/// Grid of a `bins × frames` spectrogram: `(bins/p, ceil(frames/p))`.
pub fn spectrogram_grid(bins: usize, frames: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !bins.is_multiple_of(patch) {
        return Err(Error::config(
            "spec_patch",
            format!("{bins} frequency bins are not divisible by patch size {patch}"),
        ));
    }
    Ok((bins / patch, frames.div_ceil(patch)))
}

/// Zero-pads the time axis of `[B, 1, bins, frames]` to a multiple of `patch`
/// and patchifies.
pub fn patchify_spectrogram_raw<T: Scalar>(spec: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = spec.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim("patchify_spectrogram", s, &[0, 1, 0, 0]));
    }
    let (b, bins, frames) = (s[0], s[2], s[3]);
    let (_, cols) = spectrogram_grid(bins, frames, patch)?;
    let padded_t = cols * patch;
    if padded_t == frames {
        return patchify(spec, patch);
    }
    let mut padded = Tensor::zeros(&[b, 1, bins, padded_t]);
    {
        let dst = padded.data_mut();
        for bi in 0..b {
            for f in 0..bins {
                let src = &spec.data()[(bi * bins + f) * frames..(bi * bins + f + 1) * frames];
                dst[(bi * bins + f) * padded_t..(bi * bins + f) * padded_t + frames].copy_from_slice(src);
            }
        }
    }
    patchify(&padded, patch)
}

/// Fixed 2-D sin-cos embedding, `[rows·cols, dim]`. The first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_pos_embed<T: Scalar>(grid: (usize, usize), dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::config("dim", format!("positional embedding width {dim} is not divisible by 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(grid.0 * grid.1 * dim);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
                out.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
            }
        }
    }
    Tensor::new(&[grid.0 * grid.1, dim], out)
}

/// Learned linear patch projection plus fixed positional embedding.
pub struct PatchEmbed<T: Scalar> {
    pub proj: Linear<T>,
    pub pos: Option<Var<T>>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub modality: Modality,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        modality: Modality,
        grid: (usize, usize),
        patch_size: usize,
        patch_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, name, patch_dim, dim),
            pos: Some(Var::constant(sincos_pos_embed(grid, dim)?)),
            grid,
            patch_size,
            modality,
        })
    }

    /// Projects raw `[B, N, patch_dim]` patches to tokens.
    pub fn embed(&self, patches: &Tensor<T>) -> Result<TokenBatch<T>> {
        let n = patches.shape().get(1).copied().unwrap_or(0);
        if n != self.grid.0 * self.grid.1 {
            return Err(Error::dim("patch_embed", patches.shape(), &[self.grid.0 * self.grid.1]));
        }
        let mut tokens = self.proj.forward(&Var::constant(patches.clone()))?;
        if let Some(pos) = &self.pos {
            tokens = tokens.add(pos)?;
        }
        Ok(TokenBatch {
            tokens,
            patches: patches.clone(),
            modality: self.modality,
            grid: self.grid,
            patch_size: self.patch_size,
        })
    }
}

/// Image `[B, C, H, W]` to embedded visual tokens.
pub fn patchify_image<T: Scalar>(images: &Tensor<T>, embed: &PatchEmbed<T>) -> Result<TokenBatch<T>> {
    embed.embed(&patchify(images, embed.patch_size)?)
}

/// Spectrogram `[B, 1, bins, frames]` to embedded audio tokens.
pub fn patchify_spectrogram<T: Scalar>(spec: &Tensor<T>, embed: &PatchEmbed<T>) -> Result<TokenBatch<T>> {
    embed.embed(&patchify_spectrogram_raw(spec, embed.patch_size)?)
}
