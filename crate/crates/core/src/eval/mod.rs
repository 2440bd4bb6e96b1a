//! Frozen-feature evaluation: pooled token families, linear probes,
//! nearest-neighbor retrieval and the pretrain-then-probe ablation grid.

mod ablation;
mod probe;
mod retrieval;

pub use ablation::{ablation_grid, run_cell, PROBE_STREAM, write_ablation_csv, AblationCell, AblationSpec, ProbePlan};
pub use probe::{linear_probe, Features, ProbeFit, ProbeOptions};
pub use retrieval::nn_retrieval;

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::encoder::FusionMode;
use crate::error::{Error, Result};
use crate::pretrain::AvMae;
use crate::rawio::RawSample;
use crate::scalar::Scalar;
use crate::synthetic::{generate_synthetic_batch, stack, SyntheticConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Visual,
    Audio,
    Fusion,
    /// All available families side by side.
    Concat,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 4] = [Self::Visual, Self::Audio, Self::Fusion, Self::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Visual => "visual",
            Self::Audio => "audio",
            Self::Fusion => "fusion",
            Self::Concat => "concat",
        }
    }
}

impl FromStr for FeatureFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config("family", format!("unknown feature family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    ClassId,
    /// `(visual_factor + audio_factor) mod classes`; needs both modalities.
    CrossLabel,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 2] = [Self::ClassId, Self::CrossLabel];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClassId => "class_id",
            Self::CrossLabel => "cross_label",
        }
    }
}

impl FromStr for ProbeTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("task", format!("unknown probe task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub feature_family: FeatureFamily,
    pub task: ProbeTask,
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
}

/// `[B, N, D]` → `[B, D]` mean over tokens.
pub fn mean_pool<T: Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::dim("mean_pool", s, &[0, 1, 0]));
    }
    Ok(no_grad(|| Var::constant(tokens.clone()).mean_axis(1))?.value().clone())
}

fn concat_columns<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let b = parts[0].shape()[0];
    let d: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[b, d], out)
}

/// Mean-pooled final-layer features of one family for an unmasked batch.
pub fn extract_features<T: Scalar>(
    model: &AvMae<T>,
    images: &Tensor<T>,
    specs: &Tensor<T>,
    family: FeatureFamily,
) -> Result<Tensor<T>> {
    let fused = model.encoder.cfg.fusion_mode != FusionMode::None;
    if family == FeatureFamily::Fusion && !fused {
        return Err(Error::config(
            "model.fusion_mode",
            "fusion-token features do not exist when fusion_mode is none",
        ));
    }
    no_grad(|| {
        let out = model.encode(images, specs)?;
        let pool = |v: &Var<T>| mean_pool(&v.value());
        match family {
            FeatureFamily::Visual => pool(&out.visual),
            FeatureFamily::Audio => pool(&out.audio),
            FeatureFamily::Fusion => pool(&out.fusion),
            FeatureFamily::Concat => {
                let mut parts = vec![pool(&out.visual)?, pool(&out.audio)?];
                if fused {
                    parts.push(pool(&out.fusion)?);
                }
                concat_columns(&parts)
            }
        }
    })
}

/// Paired inputs with their labels, held as stacked tensors.
pub struct LabeledSet<T: Scalar> {
    /// `[N, C, H, W]`
    pub images: Tensor<T>,
    /// `[N, 1, bins, frames]`
    pub specs: Tensor<T>,
    pub class_ids: Vec<usize>,
    pub cross_labels: Option<Vec<usize>>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn synthetic(n: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Self> {
        let samples = generate_synthetic_batch::<T>(n, cfg, seed)?;
        let (images, specs) = crate::synthetic::stack_batch(&samples)?;
        Ok(Self {
            images,
            specs,
            class_ids: samples.iter().map(|s| s.class_id).collect(),
            cross_labels: Some(samples.iter().map(|s| s.cross_label).collect()),
        })
    }

    /// Every sample must carry a class id.
    pub fn from_files(samples: &[RawSample<T>]) -> Result<Self> {
        let class_ids = samples
            .iter()
            .map(|s| {
                s.class_id
                    .ok_or_else(|| Error::config("labels.csv", format!("no label for `{}`", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
        let specs: Vec<&Tensor<T>> = samples.iter().map(|s| &s.spectrogram).collect();
        Ok(Self {
            images: stack(&imgs)?,
            specs: stack(&specs)?,
            class_ids,
            cross_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn labels(&self, task: ProbeTask) -> Result<&[usize]> {
        match task {
            ProbeTask::ClassId => Ok(&self.class_ids),
            ProbeTask::CrossLabel => self
                .cross_labels
                .as_deref()
                .ok_or_else(|| Error::config("task", "cross_label needs synthetic data")),
        }
    }
}

fn rows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, t.data()[start * per..end * per].to_vec())
}

/// Features of a whole set, computed `chunk` samples at a time.
pub fn set_features<T: Scalar>(
    model: &AvMae<T>,
    set: &LabeledSet<T>,
    family: FeatureFamily,
    chunk: usize,
) -> Result<Features> {
    let n = set.len();
    let mut data = Vec::new();
    let mut d = 0;
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let f = extract_features(model, &rows(&set.images, start, end)?, &rows(&set.specs, start, end)?, family)?;
        d = f.shape()[1];
        data.extend(f.to_f64_vec());
    }
    Features::new(n, d, data)
}

/// Probes every requested `(family, task)` pair.
pub fn probe_model<T: Scalar>(
    model: &AvMae<T>,
    train: &LabeledSet<T>,
    eval: &LabeledSet<T>,
    families: &[FeatureFamily],
    tasks: &[ProbeTask],
    opts: &ProbeOptions,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for &family in families {
        let ft = set_features(model, train, family, 32)?;
        let fe = set_features(model, eval, family, 32)?;
        for &task in tasks {
            let fit = linear_probe(&ft, train.labels(task)?, &fe, eval.labels(task)?, opts)?;
            out.push(ProbeResult {
                feature_family: family,
                task,
                accuracy: fit.accuracy,
                n_eval: fit.n_eval,
                seed,
            });
        }
    }
    Ok(out)
}

pub const PROBE_CSV_HEADER: &str = "feature_family,task,accuracy,n_eval,seed";

pub fn write_probe_csv(mut w: impl Write, results: &[ProbeResult]) -> std::io::Result<()> {
    writeln!(w, "{PROBE_CSV_HEADER}")?;
    for r in results {
        writeln!(
            w,
            "{},{},{:.6},{},{}",
            r.feature_family.as_str(),
            r.task.as_str(),
            r.accuracy,
            r.n_eval,
            r.seed
        )?;
    }
    Ok(())
}

pub fn write_json_lines<S: Serialize>(mut w: impl Write, records: &[S]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io("<json lines>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_run(mode: FusionMode) -> RunConfig {
        let mut overrides = vec![format!("model.fusion_mode=\"{}\"", mode.as_str())];
        if mode == FusionMode::None {
            overrides.push("model.fusion_layers=\"none\"".into());
        }
        RunConfig::parse(
            "[model]\ndepth = 1\ndim = 16\nheads = 2\nfusion_tokens = 4\n[decoder]\ndim = 16\nheads = 2\ndepth = 1\n\
             [data]\nimage_size = 16\nspec_bins = 16\nspec_frames = 16\n",
            &overrides,
        )
        .unwrap()
    }

    #[test]
    fn pooling_matches_row_means() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i * 7 % 5) as f64);
        let p = mean_pool(&t).unwrap();
        for b in 0..2 {
            for d in 0..4 {
                let want: f64 = (0..3).map(|n| t.data()[(b * 3 + n) * 4 + d]).sum::<f64>() / 3.0;
                assert!((p.data()[b * 4 + d] - want).abs() < 1e-12);
            }
        }
        let c = Tensor::<f64>::full(&[1, 5, 3], 2.5);
        assert_eq!(mean_pool(&c).unwrap().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn families_and_errors() {
        let cfg = tiny_run(FusionMode::Factorized);
        let model = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, 0).unwrap();
        let set = LabeledSet::<f32>::synthetic(3, &cfg.data.synthetic(), 1).unwrap();
        for (fam, d) in [
            (FeatureFamily::Visual, 16),
            (FeatureFamily::Fusion, 16),
            (FeatureFamily::Concat, 48),
        ] {
            let f = extract_features(&model, &set.images, &set.specs, fam).unwrap();
            assert_eq!(f.shape(), &[3, d]);
            assert!(f.all_finite());
        }
        let none = tiny_run(FusionMode::None);
        let model = AvMae::<f32>::new(&none.model, &none.decoder, &none.data, 0).unwrap();
        let r = extract_features(&model, &set.images, &set.specs, FeatureFamily::Fusion);
        assert!(matches!(r, Err(Error::Config { .. })));
        let f = extract_features(&model, &set.images, &set.specs, FeatureFamily::Concat).unwrap();
        assert_eq!(f.shape(), &[3, 32]);
    }

    #[test]
    fn chunked_features_match_whole_batch() {
        let cfg = tiny_run(FusionMode::Token);
        let model = AvMae::<f64>::new(&cfg.model, &cfg.decoder, &cfg.data, 0).unwrap();
        let set = LabeledSet::<f64>::synthetic(5, &cfg.data.synthetic(), 2).unwrap();
        let whole = set_features(&model, &set, FeatureFamily::Audio, 5).unwrap();
        let parts = set_features(&model, &set, FeatureFamily::Audio, 2).unwrap();
        for (a, b) in whole.data.iter().zip(&parts.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_has_one_row_per_result() {
        let r = ProbeResult {
            feature_family: FeatureFamily::Fusion,
            task: ProbeTask::CrossLabel,
            accuracy: 0.5,
            n_eval: 10,
            seed: 3,
        };
        let mut buf = Vec::new();
        write_probe_csv(&mut buf, &[r.clone(), r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(1).unwrap(), "fusion,cross_label,0.500000,10,3");
    }
}
