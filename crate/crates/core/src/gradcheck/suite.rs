//! The named finite-difference suite: every differentiable op, every encoder
//! and decoder block, and small end-to-end models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_leaves, check_op, CheckOptions, CheckReport};
use crate::autograd::{RowIndex, Var};
use crate::config::DataConfig;
use crate::encoder::{
    aggregate_tokens, cross_attention, dense_fusion_block, factorized_fusion_block, interaction_grid,
    modality_block, token_fusion_block, FusionConfig, FusionLayers, FusionMode, InteractionFusion, LayerPreset,
};
use crate::error::{Error, Result};
use crate::masking::sample_plans;
use crate::nn::{CrossAttentionBlock, ParamBuilder, ParamStore, TransformerBlock};
use crate::pretrain::{AvMae, Decoder, DecoderConfig, InputPolicy};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Block,
    Model,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Op => "op",
            CheckKind::Block => "block",
            CheckKind::Model => "model",
        }
    }
}

pub struct SuiteCheck {
    pub name: &'static str,
    pub kind: CheckKind,
    run: fn(&CheckOptions) -> Result<CheckReport>,
}

impl SuiteCheck {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CheckKind::Model => MODEL_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }

    pub fn run(&self) -> Result<CheckReport> {
        let opts = CheckOptions {
            tolerance: self.tolerance(),
            max_coords: match self.kind {
                CheckKind::Op => None,
                CheckKind::Block => Some(24),
                CheckKind::Model => Some(16),
            },
            ..CheckOptions::default()
        };
        (self.run)(&opts)
    }
}

macro_rules! checks {
    ($($kind:ident $name:ident),* $(,)?) => {
        vec![$(SuiteCheck { name: stringify!($name), kind: CheckKind::$kind, run: $name }),*]
    };
}

pub fn checks() -> Vec<SuiteCheck> {
    checks![
        Op add, Op sub, Op mul, Op scale, Op gelu, Op sum, Op mean, Op mean_axis, Op mse,
        Op softmax, Op layer_norm, Op matmul, Op matmul_t, Op permute, Op transpose,
        Op reshape, Op concat, Op gather_rows, Op scatter_rows, Op broadcast_to,
        Block modality_self, Block modality_with_fusion, Block token_fusion, Block cross_attention_block,
        Block interaction, Block dense_fusion, Block aggregation, Block factorized_fusion,
        Block decoder_fusion_plus_unimodal, Block decoder_fusion_only,
        Model full_model, Model full_model_dense, Model full_model_token,
    ]
}

/// Checks selected by `scope`: `all`, a kind (`op`, `block`, `model`), or a
/// check name. Substring matches on names are accepted when unambiguous
/// prefixes are not (`cross_attention` selects `cross_attention_block`).
pub fn select(scope: &str) -> Result<Vec<SuiteCheck>> {
    let all = checks();
    let picked: Vec<SuiteCheck> = match scope {
        "all" => all,
        "op" | "ops" => all.into_iter().filter(|c| c.kind == CheckKind::Op).collect(),
        "block" | "blocks" => all.into_iter().filter(|c| c.kind == CheckKind::Block).collect(),
        "model" | "models" => all.into_iter().filter(|c| c.kind == CheckKind::Model).collect(),
        s => {
            if all.iter().any(|c| c.name == s) {
                all.into_iter().filter(|c| c.name == s).collect()
            } else {
                all.into_iter().filter(|c| c.name.contains(s)).collect()
            }
        }
    };
    if picked.is_empty() {
        let names: Vec<&str> = checks().iter().map(|c| c.name).collect();
        return Err(Error::config("scope", format!("no check matches {scope:?}; known: {}", names.join(", "))));
    }
    Ok(picked)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rng(opts: &CheckOptions) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9)
}

fn merge(mut a: CheckReport, b: CheckReport) -> CheckReport {
    let n = a.leaves.len();
    a.leaves.extend(b.leaves.into_iter().map(|mut l| {
        l.name = format!("{}#{n}", l.name);
        l
    }));
    a
}

fn add(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("add", vec![random(&[2, 1, 3, 4], &mut r), random(&[3, 1], &mut r)], |v| v[0].add(&v[1]), o)
}

fn sub(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("sub", vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)], |v| v[0].sub(&v[1]), o)
}

fn mul(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("mul", vec![random(&[2, 3, 1, 4], &mut r), random(&[5, 1], &mut r)], |v| v[0].mul(&v[1]), o)
}

fn scale(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("scale", vec![random(&[3, 4], &mut r)], |v| Ok(v[0].scale(-1.7)), o)
}

fn gelu(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let x = random(&[2, 3, 5], &mut r).map(|x| 3.0 * x);
    check_op("gelu", vec![x], |v| Ok(v[0].gelu()), o)
}

fn sum(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("sum", vec![random(&[2, 2, 3], &mut r)], |v| Ok(v[0].sum()), o)
}

fn mean(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("mean", vec![random(&[4, 3], &mut r)], |v| Ok(v[0].mean()), o)
}

fn mean_axis(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("mean_axis", vec![random(&[2, 3, 4, 2], &mut r)], |v| v[0].mean_axis(1), o)
}

fn mse(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("mse", vec![random(&[3, 4], &mut r), random(&[3, 4], &mut r)], |v| v[0].mse(&v[1]), o)
}

fn softmax(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let x = random(&[2, 3, 5], &mut r).map(|x| 2.0 * x);
    let last = check_op("softmax", vec![x.clone()], |v| v[0].softmax(-1), o)?;
    let middle = check_op("softmax", vec![x], |v| v[0].softmax(1), o)?;
    Ok(merge(last, middle))
}

fn layer_norm(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let inputs = vec![random(&[2, 3, 6], &mut r), random(&[6], &mut r), random(&[6], &mut r)];
    check_op("layer_norm", inputs, |v| v[0].layer_norm(&v[1], &v[2], 1e-5), o)
}

fn matmul(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let shared = check_op("matmul", vec![random(&[2, 3, 4], &mut r), random(&[4, 5], &mut r)], |v| v[0].matmul(&v[1]), o)?;
    let batched =
        check_op("matmul", vec![random(&[2, 1, 3, 4], &mut r), random(&[3, 4, 2], &mut r)], |v| v[0].matmul(&v[1]), o)?;
    Ok(merge(shared, batched))
}

fn matmul_t(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("matmul_t", vec![random(&[2, 3, 4], &mut r), random(&[2, 5, 4], &mut r)], |v| v[0].matmul_t(&v[1]), o)
}

fn permute(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("permute", vec![random(&[2, 3, 4, 2], &mut r)], |v| v[0].permute(&[2, 0, 3, 1]), o)
}

fn transpose(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("transpose", vec![random(&[2, 3, 4], &mut r)], |v| v[0].transpose(), o)
}

fn reshape(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("reshape", vec![random(&[2, 3, 4], &mut r)], |v| v[0].reshape(&[4, 6])?.reshape(&[24]), o)
}

fn concat(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let inputs = vec![random(&[2, 3, 4], &mut r), random(&[2, 1, 4], &mut r), random(&[2, 2, 4], &mut r)];
    check_op("concat", inputs, |v| Var::concat(v, 1), o)
}

fn gather_rows(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let idx = RowIndex(vec![vec![4, 0, 2], vec![1, 1, 3]]);
    check_op("gather_rows", vec![random(&[2, 5, 3], &mut r)], |v| v[0].gather_rows(&idx), o)
}

fn scatter_rows(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let idx = RowIndex(vec![vec![4, 0, 2], vec![1, 3, 0]]);
    check_op("scatter_rows", vec![random(&[2, 3, 3], &mut r)], |v| v[0].scatter_rows(&idx, 5), o)
}

fn broadcast_to(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    check_op("broadcast_to", vec![random(&[1, 3, 1], &mut r)], |v| v[0].broadcast_to(&[2, 3, 4]), o)
}

const DIM: usize = 8;
const HEADS: usize = 2;

/// Moves every parameter off its initial value (unit gains, zero biases) so
/// that no coordinate sits at a special point.
fn jitter(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter() {
        p.var.update_value(|t| t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2)));
    }
}

fn leaves(store: &ParamStore<f64>, inputs: &[(&str, &Var<f64>)]) -> Vec<(String, Var<f64>)> {
    let mut out: Vec<(String, Var<f64>)> = inputs.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect();
    out.extend(store.iter().map(|p| (p.name.clone(), p.var.clone())));
    out
}

fn input(shape: &[usize], rng: &mut ChaCha8Rng) -> Var<f64> {
    Var::param(random(shape, rng))
}

fn modality_self(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(1);
    let block = TransformerBlock::new(&mut pb, "block", DIM, HEADS, DIM / HEADS, 2.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let x = input(&[2, 5, DIM], &mut r);
    check_leaves("modality_self", &leaves(&store, &[("x", &x)]), || modality_block(&block, &x, None), o)
}

fn modality_with_fusion(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(2);
    let block = TransformerBlock::new(&mut pb, "block", DIM, HEADS, DIM / HEADS, 2.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let x = input(&[2, 5, DIM], &mut r);
    let fusion = input(&[2, 3, DIM], &mut r);
    let l = leaves(&store, &[("x", &x), ("fusion", &fusion)]);
    check_leaves("modality_with_fusion", &l, || modality_block(&block, &x, Some(&fusion)), o)
}

fn token_fusion(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(3);
    let block = TransformerBlock::new(&mut pb, "block", DIM, HEADS, 4, 1.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let fusion = input(&[2, 3, DIM], &mut r);
    let xv = input(&[2, 4, DIM], &mut r);
    let xa = input(&[2, 2, DIM], &mut r);
    let l = leaves(&store, &[("fusion", &fusion), ("x_v", &xv), ("x_a", &xa)]);
    check_leaves("token_fusion", &l, || token_fusion_block(&block, &fusion, &xv, &xa), o)
}

fn cross_attention_block(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(4);
    let block = CrossAttentionBlock::new(&mut pb, "cross", DIM, HEADS, 4, 1.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let q = input(&[2, 3, DIM], &mut r);
    let kv = input(&[2, 6, DIM], &mut r);
    let l = leaves(&store, &[("queries", &q), ("keys_values", &kv)]);
    check_leaves("cross_attention_block", &l, || cross_attention(&block, &q, &kv), o)
}

fn interaction(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let xa = input(&[2, 3, DIM], &mut r);
    let xv = input(&[2, 4, DIM], &mut r);
    let wa = input(&[DIM, DIM], &mut r);
    let wv = input(&[DIM, DIM], &mut r);
    let l: Vec<(String, Var<f64>)> = [("x_a", &xa), ("x_v", &xv), ("w_a", &wa), ("w_v", &wv)]
        .iter()
        .map(|(n, v)| (n.to_string(), (*v).clone()))
        .collect();
    check_leaves("interaction", &l, || interaction_grid(&xa, &xv, &wa, &wv), o)
}

fn dense_fusion(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(5);
    let block = InteractionFusion::new(&mut pb, DIM, HEADS, 4, 1.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let fusion = input(&[2, 3, DIM], &mut r);
    let xa = input(&[2, 3, DIM], &mut r);
    let xv = input(&[2, 4, DIM], &mut r);
    let l = leaves(&store, &[("fusion", &fusion), ("x_a", &xa), ("x_v", &xv)]);
    check_leaves("dense_fusion", &l, || dense_fusion_block(&block, &fusion, &xa, &xv), o)
}

fn aggregation(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(6);
    let block = CrossAttentionBlock::new(&mut pb, "agg", DIM, HEADS, 4, 1.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let agg = input(&[2, 2, DIM], &mut r);
    let x = input(&[2, 6, DIM], &mut r);
    let l = leaves(&store, &[("agg", &agg), ("x", &x)]);
    check_leaves("aggregation", &l, || aggregate_tokens(&block, &agg, &x), o)
}

fn factorized_fusion(o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let mut pb = ParamBuilder::new(7);
    let agg_a = CrossAttentionBlock::new(&mut pb, "agg_a", DIM, HEADS, 4, 1.0)?;
    let agg_v = CrossAttentionBlock::new(&mut pb, "agg_v", DIM, HEADS, 4, 1.0)?;
    let fuse = InteractionFusion::new(&mut pb, DIM, HEADS, 4, 1.0)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let fusion = input(&[2, 3, DIM], &mut r);
    let ta = input(&[2, 2, DIM], &mut r);
    let tv = input(&[2, 2, DIM], &mut r);
    let xa = input(&[2, 5, DIM], &mut r);
    let xv = input(&[2, 6, DIM], &mut r);
    let l = leaves(&store, &[("fusion", &fusion), ("agg_a", &ta), ("agg_v", &tv), ("x_a", &xa), ("x_v", &xv)]);
    check_leaves(
        "factorized_fusion",
        &l,
        || {
            let a = aggregate_tokens(&agg_a, &ta, &xa)?;
            let v = aggregate_tokens(&agg_v, &tv, &xv)?;
            factorized_fusion_block(&fuse, &fusion, &a, &v)
        },
        o,
    )
}

fn decoder_check(name: &str, policy: InputPolicy, o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let cfg = DecoderConfig {
        depth: 1,
        dim: DIM,
        heads: HEADS,
        mlp_ratio: 2.0,
        input_policy: policy,
    };
    let mut pb = ParamBuilder::new(8);
    let dec = Decoder::new(&mut pb, "decoder", &cfg, 6, (2, 3), 5)?;
    let store = pb.finish();
    jitter(&store, &mut r);
    let plans = sample_plans(2, 6, 0.5, &mut r)?;
    let fusion = input(&[2, 3, 6], &mut r);
    let visible = input(&[2, 3, 6], &mut r);
    let l = leaves(&store, &[("fusion", &fusion), ("visible", &visible)]);
    check_leaves(name, &l, || dec.decode(&fusion, &visible, &plans), o)
}

fn decoder_fusion_plus_unimodal(o: &CheckOptions) -> Result<CheckReport> {
    decoder_check("decoder_fusion_plus_unimodal", InputPolicy::FusionPlusUnimodal, o)
}

fn decoder_fusion_only(o: &CheckOptions) -> Result<CheckReport> {
    decoder_check("decoder_fusion_only", InputPolicy::FusionOnly, o)
}

/// Two-layer, width-16 configuration used by the end-to-end checks.
pub fn tiny_model_config(mode: FusionMode) -> (FusionConfig, DecoderConfig, DataConfig) {
    let model = FusionConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        attn_dim: 8,
        fusion_tokens: 3,
        agg_tokens_a: 2,
        agg_tokens_v: 2,
        mlp_ratio_modality: 2.0,
        mlp_ratio_fusion: 1.0,
        fusion_mode: mode,
        fusion_layers: FusionLayers::Preset(LayerPreset::All),
        aggregation_passthrough: false,
    };
    let decoder = DecoderConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        ..DecoderConfig::default()
    };
    let data = DataConfig {
        classes: 2,
        image_size: 8,
        channels: 3,
        spec_bins: 8,
        spec_frames: 8,
        image_patch: 4,
        spec_patch: 4,
        ..DataConfig::default()
    };
    (model, decoder, data)
}

fn model_check(name: &str, mode: FusionMode, o: &CheckOptions) -> Result<CheckReport> {
    let mut r = rng(o);
    let (model_cfg, dec_cfg, data) = tiny_model_config(mode);
    let model = AvMae::<f64>::new(&model_cfg, &dec_cfg, &data, 9)?;
    jitter(&model.params, &mut r);
    let images = random(&[2, 3, 8, 8], &mut r);
    let specs = random(&[2, 1, 8, 8], &mut r);
    let plans_v = sample_plans(2, data.visual_tokens(), 0.5, &mut r)?;
    let plans_a = sample_plans(2, data.audio_tokens()?, 0.5, &mut r)?;
    let l = leaves(&model.params, &[]);
    check_leaves(name, &l, || Ok(model.losses(&images, &specs, &plans_v, &plans_a, false)?.total), o)
}

fn full_model(o: &CheckOptions) -> Result<CheckReport> {
    model_check("full_model", FusionMode::Factorized, o)
}

fn full_model_dense(o: &CheckOptions) -> Result<CheckReport> {
    model_check("full_model_dense", FusionMode::Dense, o)
}

fn full_model_token(o: &CheckOptions) -> Result<CheckReport> {
    model_check("full_model_token", FusionMode::Token, o)
}
