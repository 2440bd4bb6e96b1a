use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::sample_plans;
use crate::rawio::RawSample;
use crate::scalar::Scalar;
use crate::synthetic::{generate_synthetic_batch, stack, stack_batch, SyntheticConfig};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::AvMae;
use super::optim::AdamW;
use super::schedule::lr_schedule;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_v: f64,
    pub loss_a: f64,
}

/// Mutable training state: everything besides the parameters that a resumed
/// run needs.
pub struct TrainState<T: Scalar> {
    /// Next step to run.
    pub step: usize,
    pub opt: AdamW<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &AvMae<T>, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            opt: AdamW::new(model.params.len(), cfg.beta1, cfg.beta2, cfg.weight_decay),
        }
    }
}

/// Where paired batches come from. Every batch is a pure function of
/// `(seed, step)`.
#[derive(Clone)]
pub enum DataSource<T: Scalar> {
    Synthetic(SyntheticConfig),
    Files(Arc<Vec<RawSample<T>>>),
}

const DATA_STREAM: u64 = 0x6461_7461;
const MASK_STREAM: u64 = 0x6d61_736b;

/// Independent sub-seed for `(seed, stream, step)`.
pub fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(32) ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Scalar> DataSource<T> {
    pub fn batch(&self, batch_size: usize, seed: u64, step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = derive_seed(seed, DATA_STREAM, step as u64);
        match self {
            DataSource::Synthetic(cfg) => stack_batch(&generate_synthetic_batch(batch_size, cfg, s)?),
            DataSource::Files(samples) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let picks: Vec<usize> = (0..batch_size)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..samples.len()))
                    .collect();
                let imgs: Vec<&Tensor<T>> = picks.iter().map(|&i| &samples[i].image).collect();
                let specs: Vec<&Tensor<T>> = picks.iter().map(|&i| &samples[i].spectrogram).collect();
                Ok((stack(&imgs)?, stack(&specs)?))
            }
        }
    }
}

/// Runs steps `state.step..until`. A producer thread prepares batches ahead
/// through a bounded queue. `on_step` sees each record after the parameter
/// update, with `state.step` already advanced.
pub fn pretrain<T: Scalar>(
    model: &AvMae<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &DataSource<T>,
    seed: u64,
    until: usize,
    mut on_step: impl FnMut(&StepRecord, &TrainState<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let n_v = model.embed_v.grid.0 * model.embed_v.grid.1;
    let n_a = model.embed_a.grid.0 * model.embed_a.grid.1;
    let first = state.step;
    let mut records = Vec::with_capacity(until.saturating_sub(first));
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<(Tensor<T>, Tensor<T>)>>(2);
        let source = data.clone();
        let bs = cfg.batch_size;
        scope.spawn(move || {
            for step in first..until {
                if tx.send(source.batch(bs, seed, step)).is_err() {
                    break;
                }
            }
        });
        for step in first..until {
            let (images, specs) = rx.recv().expect("producer ended early")?;
            let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MASK_STREAM, step as u64));
            let plans_v = sample_plans(bs, n_v, cfg.mask_ratio_v, &mut mask_rng)?;
            let plans_a = sample_plans(bs, n_a, cfg.mask_ratio_a, &mut mask_rng)?;
            let lr = lr_schedule(step, cfg);
            model.params.zero_grad();
            let losses = model.losses(&images, &specs, &plans_v, &plans_a, cfg.norm_pix)?;
            let rec = StepRecord {
                step,
                lr,
                loss_total: losses.total.value().item().as_f64(),
                loss_v: losses.visual.value().item().as_f64(),
                loss_a: losses.audio.value().item().as_f64(),
            };
            if !(rec.loss_total.is_finite() && rec.loss_v.is_finite() && rec.loss_a.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    total: rec.loss_total,
                    visual: rec.loss_v,
                    audio: rec.loss_a,
                });
            }
            losses.total.backward();
            drop(losses);
            state.opt.step(&model.params, lr)?;
            state.step = step + 1;
            on_step(&rec, state)?;
            records.push(rec);
        }
        Ok(())
    })?;
    Ok(records)
}
