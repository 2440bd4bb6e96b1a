use crate::autograd::Var;
use crate::config::DataConfig;
use crate::encoder::{Encoder, EncoderOutput, FusionConfig};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskPlan};
use crate::nn::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::{patchify_image, patchify_spectrogram, Modality, PatchEmbed, TokenBatch};

use super::config::DecoderConfig;
use super::decoder::Decoder;
use super::loss::{mae_loss, normalize_patches};

/// Patch embeddings, the fusion encoder and one decoder per modality.
pub struct AvMae<T: Scalar> {
    pub params: ParamStore<T>,
    pub embed_v: PatchEmbed<T>,
    pub embed_a: PatchEmbed<T>,
    pub encoder: Encoder<T>,
    pub dec_v: Decoder<T>,
    pub dec_a: Decoder<T>,
}

pub struct Losses<T: Scalar> {
    pub total: Var<T>,
    pub visual: Var<T>,
    pub audio: Var<T>,
}

impl<T: Scalar> AvMae<T> {
    pub fn new(model: &FusionConfig, decoder: &DecoderConfig, data: &DataConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        decoder.validate()?;
        data.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let d = model.dim;
        let (gv, ga) = (data.visual_grid(), data.audio_grid()?);
        let (pv, pa) = (data.visual_patch_dim(), data.audio_patch_dim());
        let embed_v = PatchEmbed::new(&mut pb, "embed_v", Modality::Visual, gv, data.image_patch, pv, d)?;
        let embed_a = PatchEmbed::new(&mut pb, "embed_a", Modality::Audio, ga, data.spec_patch, pa, d)?;
        let encoder = Encoder::new(&mut pb, model)?;
        let dec_v = Decoder::new(&mut pb, "decoder_v", decoder, d, gv, pv)?;
        let dec_a = Decoder::new(&mut pb, "decoder_a", decoder, d, ga, pa)?;
        Ok(Self {
            params: pb.finish(),
            embed_v,
            embed_a,
            encoder,
            dec_v,
            dec_a,
        })
    }

    pub fn tokens(&self, images: &Tensor<T>, specs: &Tensor<T>) -> Result<(TokenBatch<T>, TokenBatch<T>)> {
        let v = patchify_image(images, &self.embed_v)?;
        let a = patchify_spectrogram(specs, &self.embed_a)?;
        if v.batch_size() != a.batch_size() {
            return Err(Error::dim("pair", images.shape(), specs.shape()));
        }
        Ok((v, a))
    }

    /// Full (unmasked) encoding.
    pub fn encode(&self, images: &Tensor<T>, specs: &Tensor<T>) -> Result<EncoderOutput<T>> {
        let (v, a) = self.tokens(images, specs)?;
        self.encoder.forward(&v.tokens, &a.tokens)
    }

    /// Joint masked reconstruction loss; `total = visual + audio`.
    pub fn losses(
        &self,
        images: &Tensor<T>,
        specs: &Tensor<T>,
        plans_v: &[MaskPlan],
        plans_a: &[MaskPlan],
        norm_pix: bool,
    ) -> Result<Losses<T>> {
        let (v, a) = self.tokens(images, specs)?;
        let (vis_v, mut target_v) = apply_mask(&v, plans_v)?;
        let (vis_a, mut target_a) = apply_mask(&a, plans_a)?;
        if norm_pix {
            target_v = normalize_patches(&target_v);
            target_a = normalize_patches(&target_a);
        }
        let out = self.encoder.forward(&vis_v.tokens, &vis_a.tokens)?;
        let pred_v = self.dec_v.decode(&out.fusion, &out.visual, plans_v)?;
        let pred_a = self.dec_a.decode(&out.fusion, &out.audio, plans_a)?;
        let visual = mae_loss(&pred_v, &target_v)?;
        let audio = mae_loss(&pred_a, &target_a)?;
        Ok(Losses {
            total: visual.add(&audio)?,
            visual,
            audio,
        })
    }
}

/// Joint masked reconstruction loss of one paired batch.
pub fn av_mae_loss<T: Scalar>(
    model: &AvMae<T>,
    images: &Tensor<T>,
    specs: &Tensor<T>,
    plans_v: &[MaskPlan],
    plans_a: &[MaskPlan],
) -> Result<Losses<T>> {
    model.losses(images, specs, plans_v, plans_a, false)
}
