use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{probe_model, FeatureFamily, LabeledSet, ProbeOptions, ProbeResult, ProbeTask};
use crate::config::RunConfig;
use crate::encoder::FusionMode;
use crate::error::{Error, Result};
use crate::pretrain::{derive_seed, pretrain, AvMae, DataSource, StepRecord, TrainState};
use crate::scalar::Scalar;

/// Stream id for the probe train (step 0) and eval (step 1) sets.
pub const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct ProbePlan {
    pub n_train: usize,
    pub n_eval: usize,
    pub families: Vec<FeatureFamily>,
    pub tasks: Vec<ProbeTask>,
    pub options: ProbeOptions,
}

impl Default for ProbePlan {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_eval: 512,
            families: FeatureFamily::ALL.to_vec(),
            tasks: ProbeTask::ALL.to_vec(),
            options: ProbeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub fusion_mode: FusionMode,
    pub fusion_layers: Vec<usize>,
    pub fusion_tokens: usize,
    pub agg_tokens_a: usize,
    pub agg_tokens_v: usize,
    pub seed: u64,
    /// Mean total loss over the last ten steps.
    pub final_loss: Option<f64>,
    pub results: Vec<ProbeResult>,
    pub error: Option<String>,
}

/// Pretrains one configuration on synthetic data for its full schedule, then
/// probes it on held-out synthetic sets derived from the same seed. The
/// fusion family is skipped for models without fusion.
pub fn run_cell<T: Scalar>(cfg: &RunConfig, plan: &ProbePlan) -> Result<(Vec<StepRecord>, Vec<ProbeResult>)> {
    cfg.validate()?;
    if cfg.data.dir.is_some() {
        return Err(Error::config("data.dir", "ablation cells run on synthetic data"));
    }
    let model = AvMae::<T>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed)?;
    let mut state = TrainState::new(&model, &cfg.train);
    let data = DataSource::Synthetic(cfg.data.synthetic());
    let records = pretrain(&model, &mut state, &cfg.train, &data, cfg.seed, cfg.train.total_steps(), |_, _| Ok(()))?;
    let synth = cfg.data.synthetic();
    let train = LabeledSet::synthetic(plan.n_train, &synth, derive_seed(cfg.seed, PROBE_STREAM, 0))?;
    let eval = LabeledSet::synthetic(plan.n_eval, &synth, derive_seed(cfg.seed, PROBE_STREAM, 1))?;
    let families: Vec<FeatureFamily> = plan
        .families
        .iter()
        .copied()
        .filter(|&f| f != FeatureFamily::Fusion || cfg.model.fusion_mode != FusionMode::None)
        .collect();
    let results = probe_model(&model, &train, &eval, &families, &plan.tasks, &plan.options, cfg.seed)?;
    Ok((records, results))
}

/// Runs every cell (in parallel where threads are available). A failing
/// cell is recorded with its error and does not stop the others.
pub fn ablation_grid<T: Scalar>(specs: &[AblationSpec], plan: &ProbePlan) -> Vec<AblationCell> {
    specs
        .par_iter()
        .map(|spec| {
            let m = &spec.config.model;
            let mut cell = AblationCell {
                name: spec.name.clone(),
                fusion_mode: m.fusion_mode,
                fusion_layers: m.layers(),
                fusion_tokens: m.fusion_tokens,
                agg_tokens_a: m.agg_tokens_a,
                agg_tokens_v: m.agg_tokens_v,
                seed: spec.config.seed,
                final_loss: None,
                results: Vec::new(),
                error: None,
            };
            match run_cell::<T>(&spec.config, plan) {
                Ok((records, results)) => {
                    let tail = &records[records.len().saturating_sub(10)..];
                    if !tail.is_empty() {
                        cell.final_loss = Some(tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len() as f64);
                    }
                    cell.results = results;
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "cell,fusion_mode,fusion_layers,fusion_tokens,agg_tokens_a,agg_tokens_v,seed,final_loss,feature_family,task,accuracy,n_eval,status";

/// One row per probe result; failed cells get a single row with the error.
pub fn write_ablation_csv(mut w: impl Write, cells: &[AblationCell]) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_CSV_HEADER}")?;
    for c in cells {
        let layers: Vec<String> = c.fusion_layers.iter().map(usize::to_string).collect();
        let prefix = format!(
            "{},{},{},{},{},{},{},{}",
            c.name,
            c.fusion_mode.as_str(),
            layers.join(" "),
            c.fusion_tokens,
            c.agg_tokens_a,
            c.agg_tokens_v,
            c.seed,
            c.final_loss.map(|l| format!("{l:.6}")).unwrap_or_default()
        );
        match &c.error {
            Some(e) => writeln!(w, "{prefix},,,,,failed: {}", e.replace([',', '\n'], ";"))?,
            None => {
                for r in &c.results {
                    writeln!(
                        w,
                        "{prefix},{},{},{:.6},{},ok",
                        r.feature_family.as_str(),
                        r.task.as_str(),
                        r.accuracy,
                        r.n_eval
                    )?;
                }
            }
        }
    }
    Ok(())
}
