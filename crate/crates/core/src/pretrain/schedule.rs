use std::f64::consts::PI;

use super::config::TrainConfig;

/// Linear warmup from 0 to the peak rate, then cosine decay to 0 at the last
/// step. Steps past the end return 0.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr();
    let (warm, total) = (cfg.warmup_steps(), cfg.total_steps());
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}
