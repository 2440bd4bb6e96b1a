//! Forward-pass throughput, peak tensor memory and interaction counts of the
//! fusion modes.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::encoder::{Encoder, FusionConfig, FusionLayers, FusionMode, LayerPreset};
use crate::error::{Error, Result};
use crate::memory;
use crate::nn::ParamBuilder;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InteractionCount {
    pub dense: u64,
    pub factorized: u64,
    /// `dense / factorized`.
    pub ratio: f64,
}

pub fn interaction_count(n_v: usize, n_a: usize, n_agg_v: usize, n_agg_a: usize) -> InteractionCount {
    let dense = (n_v * n_a) as u64;
    let factorized = (n_agg_v * n_agg_a) as u64;
    InteractionCount {
        dense,
        factorized,
        ratio: dense as f64 / factorized as f64,
    }
}

/// Pairwise interactions materialized per fusion layer under `cfg`.
pub fn mode_interactions(cfg: &FusionConfig, n_v: usize, n_a: usize) -> u64 {
    match cfg.fusion_mode {
        FusionMode::Dense => (n_v * n_a) as u64,
        FusionMode::Factorized => (cfg.agg_tokens_v * cfg.agg_tokens_a) as u64,
        FusionMode::Token | FusionMode::None => 0,
    }
}

fn hidden(dim: usize, ratio: f64) -> u64 {
    ((dim as f64) * ratio).round().max(1.0) as u64
}

/// Multiply-adds of one attention call including projections.
fn attention_macs(nq: u64, nk: u64, dim: u64, heads: u64, qk: u64) -> u64 {
    nq * dim * heads * qk + nk * dim * heads * qk + nk * dim * dim + nq * nk * heads * qk + nq * nk * dim + nq * dim * dim
}

fn mlp_macs(rows: u64, dim: u64, ratio: f64) -> u64 {
    2 * rows * dim * hidden(dim as usize, ratio)
}

/// Analytic forward FLOPs (2 per multiply-add) of the encoder on one batch;
/// normalization, softmax and activations are not counted.
pub fn flops_estimate(cfg: &FusionConfig, n_v: usize, n_a: usize, batch: usize) -> u64 {
    let (d, h, a) = (cfg.dim as u64, cfg.heads as u64, cfg.attn_dim as u64);
    let (nv, na, f) = (n_v as u64, n_a as u64, cfg.fusion_tokens as u64);
    let (rm, rf) = (cfg.mlp_ratio_modality, cfg.mlp_ratio_fusion);
    let fusion_at = cfg.layers();
    let mut macs = 0;
    for l in 1..=cfg.depth {
        let fused = fusion_at.contains(&l);
        let extra = if fused { f } else { 0 };
        for n in [nv, na] {
            macs += attention_macs(n, n + extra, d, h, d / h) + mlp_macs(n, d, rm);
        }
        if !fused {
            continue;
        }
        let cross = |nk: u64| attention_macs(f, nk, d, h, a) + mlp_macs(f, d, rf);
        macs += match cfg.fusion_mode {
            FusionMode::Token => cross(f + nv + na),
            FusionMode::Dense => (nv + na) * d * d + cross(nv * na),
            FusionMode::Factorized => {
                let (ga, gv) = (cfg.agg_tokens_a as u64, cfg.agg_tokens_v as u64);
                let agg = attention_macs(ga, na, d, h, a) + mlp_macs(ga, d, rf) + attention_macs(gv, nv, d, h, a) + mlp_macs(gv, d, rf);
                agg + (ga + gv) * d * d + cross(ga * gv)
            }
            FusionMode::None => 0,
        };
    }
    2 * macs * batch as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub config_id: String,
    pub fusion: FusionConfig,
    pub n_v: usize,
    pub n_a: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config_id: String,
    pub fusion_mode: FusionMode,
    pub n_v: usize,
    pub n_a: usize,
    pub n_agg_v: usize,
    pub n_agg_a: usize,
    pub fusion_tokens: usize,
    pub samples_per_sec: f64,
    pub peak_bytes: usize,
    pub interactions: u64,
    pub flops_estimate: u64,
    /// Set when the cell could not be measured.
    pub error: Option<String>,
}

impl BenchReport {
    fn unmeasured(cfg: &BenchConfig) -> Self {
        Self {
            config_id: cfg.config_id.clone(),
            fusion_mode: cfg.fusion.fusion_mode,
            n_v: cfg.n_v,
            n_a: cfg.n_a,
            n_agg_v: cfg.fusion.agg_tokens_v,
            n_agg_a: cfg.fusion.agg_tokens_a,
            fusion_tokens: cfg.fusion.fusion_tokens,
            samples_per_sec: 0.0,
            peak_bytes: 0,
            interactions: mode_interactions(&cfg.fusion, cfg.n_v, cfg.n_a),
            flops_estimate: flops_estimate(&cfg.fusion, cfg.n_v, cfg.n_a, cfg.batch_size),
            error: None,
        }
    }
}

/// Deterministic `[B, N, D]` token inputs.
pub fn bench_inputs(cfg: &BenchConfig) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.fusion.dim;
    let mut draw = |n: usize| Tensor::from_fn(&[cfg.batch_size, n, d], |_| rng.random_range(-1.0f32..1.0));
    let v = draw(cfg.n_v);
    (v, draw(cfg.n_a))
}

/// Median forward time and peak transient tensor bytes of the encoder
/// without gradient tracking, measured on the calling thread.
pub fn bench_forward(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.timed_iters < 3 {
        return Err(Error::config("timed_iters", "at least 3 timed iterations are required"));
    }
    if cfg.batch_size == 0 || cfg.n_v == 0 || cfg.n_a == 0 {
        return Err(Error::config("bench", "batch size and token counts must be positive"));
    }
    let mut pb = ParamBuilder::<f32>::new(cfg.seed);
    let encoder = Encoder::new(&mut pb, &cfg.fusion)?;
    let (xv, xa) = bench_inputs(cfg);
    let (xv, xa) = (Var::constant(xv), Var::constant(xa));
    for _ in 0..cfg.warmup_iters {
        no_grad(|| encoder.forward(&xv, &xa))?;
    }
    let mut times = Vec::with_capacity(cfg.timed_iters);
    let mut peak = 0;
    for _ in 0..cfg.timed_iters {
        memory::reset_peak();
        let base = memory::current_bytes();
        let t = Instant::now();
        let out = no_grad(|| encoder.forward(&xv, &xa))?;
        times.push(t.elapsed().as_secs_f64());
        peak = peak.max(memory::peak_bytes() - base);
        drop(out);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let mut report = BenchReport::unmeasured(cfg);
    report.samples_per_sec = cfg.batch_size as f64 / median;
    report.peak_bytes = peak;
    Ok(report)
}

/// Measures every cell on the calling thread, one after another, and
/// returns the reports sorted by `config_id`. Failed cells carry an error.
pub fn sweep(cells: &[BenchConfig]) -> Vec<BenchReport> {
    let mut out: Vec<BenchReport> = cells
        .iter()
        .map(|cfg| match catch_unwind(AssertUnwindSafe(|| bench_forward(cfg))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => BenchReport {
                error: Some(e.to_string()),
                ..BenchReport::unmeasured(cfg)
            },
            Err(_) => BenchReport {
                error: Some("measurement panicked".into()),
                ..BenchReport::unmeasured(cfg)
            },
        })
        .collect();
    out.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    out
}

pub const BENCH_CSV_HEADER: &str =
    "config_id,fusion_mode,n_v,n_a,n_agg_v,n_agg_a,F,samples_per_sec,peak_bytes,interactions,flops_estimate";

/// Failed cells keep their analytic columns and leave the measured ones
/// empty, with the error in a trailing column.
pub fn write_bench_csv(mut w: impl Write, reports: &[BenchReport]) -> std::io::Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER},status")?;
    for r in reports {
        let (speed, peak, status) = match &r.error {
            None => (format!("{:.4}", r.samples_per_sec), r.peak_bytes.to_string(), "ok".to_string()),
            Some(e) => (String::new(), String::new(), format!("failed: {}", e.replace([',', '\n'], ";"))),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_id,
            r.fusion_mode.as_str(),
            r.n_v,
            r.n_a,
            r.n_agg_v,
            r.n_agg_a,
            r.fusion_tokens,
            speed,
            peak,
            r.interactions,
            r.flops_estimate,
            status
        )?;
    }
    Ok(())
}

/// Settings shared by every cell of a grid file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridDefaults {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub fusion_tokens: usize,
    pub agg_tokens_a: usize,
    pub agg_tokens_v: usize,
    pub mlp_ratio_modality: f64,
    pub mlp_ratio_fusion: f64,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
}

impl Default for GridDefaults {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 192,
            heads: 3,
            attn_dim: 16,
            fusion_tokens: 16,
            agg_tokens_a: 8,
            agg_tokens_v: 8,
            mlp_ratio_modality: 4.0,
            mlp_ratio_fusion: 1.0,
            batch_size: 2,
            warmup_iters: 1,
            timed_iters: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub config_id: String,
    pub fusion_mode: FusionMode,
    pub n_v: usize,
    pub n_a: usize,
    #[serde(default)]
    pub fusion_layers: Option<FusionLayers>,
    #[serde(default)]
    pub agg_tokens_a: Option<usize>,
    #[serde(default)]
    pub agg_tokens_v: Option<usize>,
    #[serde(default)]
    pub fusion_tokens: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    #[serde(default)]
    pub defaults: GridDefaults,
    #[serde(default, rename = "cell")]
    pub cells: Vec<GridCell>,
}

impl BenchGrid {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("grid", e.to_string()))
    }

    /// Expands cells into validated bench configurations.
    pub fn configs(&self) -> Result<Vec<BenchConfig>> {
        if self.cells.is_empty() {
            return Err(Error::config("cell", "the grid has no cells"));
        }
        let d = &self.defaults;
        self.cells
            .iter()
            .map(|c| {
                let layers = c.fusion_layers.clone().unwrap_or(if c.fusion_mode == FusionMode::None {
                    FusionLayers::Preset(LayerPreset::None)
                } else {
                    FusionLayers::Preset(LayerPreset::All)
                });
                let fusion = FusionConfig {
                    depth: d.depth,
                    dim: d.dim,
                    heads: d.heads,
                    attn_dim: d.attn_dim,
                    fusion_tokens: c.fusion_tokens.unwrap_or(d.fusion_tokens),
                    agg_tokens_a: c.agg_tokens_a.unwrap_or(d.agg_tokens_a),
                    agg_tokens_v: c.agg_tokens_v.unwrap_or(d.agg_tokens_v),
                    mlp_ratio_modality: d.mlp_ratio_modality,
                    mlp_ratio_fusion: d.mlp_ratio_fusion,
                    fusion_mode: c.fusion_mode,
                    fusion_layers: layers,
                    aggregation_passthrough: false,
                };
                fusion
                    .validate()
                    .map_err(|e| Error::config(format!("cell {}", c.config_id), e.to_string()))?;
                Ok(BenchConfig {
                    config_id: c.config_id.clone(),
                    fusion,
                    n_v: c.n_v,
                    n_a: c.n_a,
                    batch_size: c.batch_size.unwrap_or(d.batch_size),
                    warmup_iters: d.warmup_iters,
                    timed_iters: d.timed_iters,
                    seed: d.seed,
                })
            })
            .collect()
    }
}
