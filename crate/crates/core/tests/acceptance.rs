//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line (written past the test harness's output capture) and then asserts.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use avfusion::autograd::Var;
use avfusion::bench::{bench_forward, interaction_count, mode_interactions, BenchGrid};
use avfusion::checkpoint::Checkpoint;
use avfusion::config::RunConfig;
use avfusion::encoder::{Encoder, FusionConfig, FusionMode};
use avfusion::eval::{ablation_grid, AblationCell, AblationSpec, FeatureFamily, ProbePlan, ProbeTask};
use avfusion::gradcheck::suite::{checks, CheckKind};
use avfusion::masking::{masked_count, sample_mask};
use avfusion::nn::ParamBuilder;
use avfusion::pretrain::{pretrain, AvMae, DataSource, StepRecord, TrainState};
use avfusion::synthetic::{generate_synthetic_batch, stack_batch};
use avfusion::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {verdict}  {title}  [{detail}; {:.1}s]", elapsed.as_secs_f64());
    let _ = out.flush();
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = [0.0f64; 3];
    let mut failing = Vec::new();
    for c in checks() {
        let rep = c.run().expect("check runs");
        let slot = match c.kind {
            CheckKind::Op => 0,
            CheckKind::Block => 1,
            CheckKind::Model => 2,
        };
        worst[slot] = worst[slot].max(rep.max_rel_err());
        if !rep.passed() {
            failing.push(c.name);
        }
    }
    let elapsed = t.elapsed();
    let pass = failing.is_empty() && elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} checks, max rel err ops {:.1e}, blocks {:.1e} (tol 1e-4), full model {:.1e} (tol 1e-3){}",
        checks().len(),
        worst[0],
        worst[1],
        worst[2],
        if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
    );
    report(1, "gradient correctness", pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_2_factorized_degenerates_to_dense() {
    let _g = serial();
    let t = Instant::now();
    let (n_v, n_a) = (64, 24);
    let dense_cfg = FusionConfig {
        fusion_mode: FusionMode::Dense,
        ..FusionConfig::default()
    };
    let fact_cfg = FusionConfig {
        fusion_mode: FusionMode::Factorized,
        aggregation_passthrough: true,
        agg_tokens_a: n_a,
        agg_tokens_v: n_v,
        ..dense_cfg.clone()
    };
    let mut worst = 0.0f64;
    let mut branches_equal = true;
    for seed in 0..3u64 {
        let mut pb = ParamBuilder::<f64>::new(seed);
        let dense = Encoder::new(&mut pb, &dense_cfg).unwrap();
        let dense_params = pb.finish();
        let mut pb = ParamBuilder::<f64>::new(seed + 100);
        let fact = Encoder::new(&mut pb, &fact_cfg).unwrap();
        let fact_params = pb.finish();
        for p in dense_params.iter() {
            fact_params.get(&p.name).expect("shared name").set_value(p.var.value().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = Var::constant(tensor(&[2, n_v, dense_cfg.dim], &mut rng));
        let xa = Var::constant(tensor(&[2, n_a, dense_cfg.dim], &mut rng));
        let a = dense.forward(&xv, &xa).unwrap();
        let b = fact.forward(&xv, &xa).unwrap();
        worst = worst
            .max(a.fusion.value().max_abs_diff(&b.fusion.value()))
            .max(a.visual.value().max_abs_diff(&b.visual.value()))
            .max(a.audio.value().max_abs_diff(&b.audio.value()));
        branches_equal &= a.visual.shape() == b.visual.shape();
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-6 && branches_equal;
    report(2, "factorized == dense under pass-through aggregation", pass, &format!("max |diff| {worst:.1e} over 3 seeds"), elapsed);
    assert!(pass);
}

#[test]
fn criterion_3_interaction_counts() {
    let _g = serial();
    let t = Instant::now();
    let mut runner = TestRunner::new(ProptestConfig::with_cases(256));
    let strategy = (1usize..300, 1usize..300, 1usize..32, 1usize..32);
    let prop = runner.run(&strategy, |(n_v, n_a, g_v, g_a)| {
        let c = interaction_count(n_v, n_a, g_v, g_a);
        prop_assert_eq!(c.dense, (n_a * n_v) as u64);
        prop_assert_eq!(c.factorized, (g_a * g_v) as u64);
        let cfg = FusionConfig {
            agg_tokens_a: g_a,
            agg_tokens_v: g_v,
            fusion_mode: FusionMode::Dense,
            ..FusionConfig::default()
        };
        prop_assert_eq!(mode_interactions(&cfg, n_v, n_a), (n_a * n_v) as u64);
        let cfg = FusionConfig { fusion_mode: FusionMode::Factorized, ..cfg };
        prop_assert_eq!(mode_interactions(&cfg, n_v, n_a), (g_a * g_v) as u64);
        Ok(())
    });
    let paper = interaction_count(196, 96, 8, 8);
    let elapsed = t.elapsed();
    let pass = prop.is_ok() && paper.dense == 18816 && paper.factorized == 64 && paper.ratio == 294.0;
    let detail = format!(
        "256 random configs {}, 196x96 vs 8x8: {} / {} = {}",
        if prop.is_ok() { "exact" } else { "MISMATCH" },
        paper.dense,
        paper.factorized,
        paper.ratio
    );
    report(3, "interaction-count oracle", pass, &detail, elapsed);
    assert!(pass, "{prop:?}");
}

#[test]
fn criterion_4_efficiency_direction() {
    let _g = serial();
    let t = Instant::now();
    let grid = BenchGrid::parse(
        r#"
        [defaults]
        dim = 192
        heads = 3
        depth = 4
        fusion_tokens = 16
        agg_tokens_a = 8
        agg_tokens_v = 8
        batch_size = 2
        warmup_iters = 1
        timed_iters = 3

        [[cell]]
        config_id = "dense"
        fusion_mode = "dense"
        n_v = 196
        n_a = 96

        [[cell]]
        config_id = "factorized"
        fusion_mode = "factorized"
        n_v = 196
        n_a = 96

        [[cell]]
        config_id = "none"
        fusion_mode = "none"
        n_v = 196
        n_a = 96
        "#,
    )
    .unwrap();
    let reports: Vec<_> = grid.configs().unwrap().iter().map(|c| bench_forward(c).unwrap()).collect();
    let (dense, fact, none) = (&reports[0], &reports[1], &reports[2]);
    let speedup = fact.samples_per_sec / dense.samples_per_sec;
    let mem = fact.peak_bytes as f64 / dense.peak_bytes as f64;
    let elapsed = t.elapsed();
    let pass = speedup >= 1.5
        && mem <= 0.6
        && none.samples_per_sec >= fact.samples_per_sec
        && elapsed < Duration::from_secs(300);
    let detail = format!(
        "samples/s dense {:.2}, factorized {:.2}, none {:.2}; factorized/dense speed {speedup:.2}x, memory {mem:.3}x",
        dense.samples_per_sec, fact.samples_per_sec, none.samples_per_sec
    );
    report(4, "efficiency direction (forward only)", pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

fn train(cfg: &RunConfig, until: usize) -> Vec<StepRecord> {
    let model = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&model, &cfg.train);
    let data = DataSource::Synthetic(cfg.data.synthetic());
    pretrain(&model, &mut state, &cfg.train, &data, cfg.seed, until, |_, _| Ok(())).unwrap()
}

fn mean_loss(r: &[StepRecord]) -> f64 {
    r.iter().map(|x| x.loss_total).sum::<f64>() / r.len() as f64
}

#[test]
fn criterion_5_training_reduces_loss() {
    let _g = serial();
    let t = Instant::now();
    let cfg = RunConfig::parse("", &[]).unwrap();
    let steps = cfg.train.total_steps();
    let recs = train(&cfg, steps);
    let first = mean_loss(&recs[..10]);
    let last = mean_loss(&recs[steps - 10..]);
    let replay = train(&cfg, 10);
    let deterministic = replay[..] == recs[..10];
    let elapsed = t.elapsed();
    let pass = steps == 200 && last <= 0.5 * first && deterministic && elapsed < Duration::from_secs(600);
    let detail = format!(
        "{steps} steps, mean loss steps 0-9 {first:.4}, steps {}-{} {last:.4} ({:.1}% of start), replay identical: {deterministic}",
        steps - 10,
        steps - 1,
        100.0 * last / first
    );
    report(5, "training works", pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_6_cross_modal_gradient_flow() {
    let _g = serial();
    let t = Instant::now();
    let base = RunConfig::parse("", &[]).unwrap();
    let samples = generate_synthetic_batch::<f64>(2, &base.data.synthetic(), 3).unwrap();
    let (img, spec) = stack_batch(&samples).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plans_v = avfusion::masking::sample_plans(2, base.data.visual_tokens(), 0.75, &mut rng).unwrap();
    let plans_a = avfusion::masking::sample_plans(2, base.data.audio_tokens().unwrap(), 0.75, &mut rng).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (mode, layers) in [("none", "\"none\""), ("token", "\"all\""), ("dense", "\"all\""), ("factorized", "\"all\"")] {
        let cfg = RunConfig::parse(
            "",
            &[format!("model.fusion_mode=\"{mode}\""), format!("model.fusion_layers={layers}")],
        )
        .unwrap();
        let model = AvMae::<f64>::new(&cfg.model, &cfg.decoder, &cfg.data, 0).unwrap();
        model.params.zero_grad();
        model.losses(&img, &spec, &plans_v, &plans_a, false).unwrap().visual.backward();
        let energy: f64 = model
            .params
            .iter()
            .filter(|p| p.name.contains(".audio.") || p.name.starts_with("embed_a."))
            .filter_map(|p| p.var.grad())
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, |a, b| a + b);
        let ok = if mode == "none" { energy == 0.0 } else { energy > 0.0 };
        pass &= ok;
        lines.push(format!("{mode} {energy:.2e}"));
    }
    let elapsed = t.elapsed();
    report(6, "cross-modal gradient flow", pass, &format!("audio-branch |grad|^2 under visual loss: {}", lines.join(", ")), elapsed);
    assert!(pass);
}

fn accuracy(cells: &[AblationCell], name: &str, family: FeatureFamily) -> f64 {
    let accs: Vec<f64> = cells
        .iter()
        .filter(|c| c.name == name)
        .map(|c| {
            assert!(c.error.is_none(), "{name}: {:?}", c.error);
            c.results
                .iter()
                .find(|r| r.feature_family == family && r.task == ProbeTask::CrossLabel)
                .expect("probe result")
                .accuracy
        })
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

#[test]
fn criterion_7_fusion_benefit_direction() {
    let _g = serial();
    let t = Instant::now();
    let seeds = [0u64, 1, 2];
    let mut specs = Vec::new();
    for seed in seeds {
        for (name, mode, layers) in [("early", "factorized", "\"all\""), ("late", "factorized", "\"last\""), ("none", "none", "\"none\"")] {
            let config = RunConfig::parse(
                "",
                &[
                    format!("model.fusion_mode=\"{mode}\""),
                    format!("model.fusion_layers={layers}"),
                    format!("seed={seed}"),
                ],
            )
            .unwrap();
            specs.push(AblationSpec { name: name.to_string(), config });
        }
    }
    let cells = ablation_grid::<f32>(&specs, &ProbePlan::default());
    let early = accuracy(&cells, "early", FeatureFamily::Concat);
    let late = accuracy(&cells, "late", FeatureFamily::Concat);
    let none = accuracy(&cells, "none", FeatureFamily::Concat);
    let fusion = accuracy(&cells, "early", FeatureFamily::Fusion);
    let visual = accuracy(&cells, "early", FeatureFamily::Visual);
    let audio = accuracy(&cells, "early", FeatureFamily::Audio);
    let elapsed = t.elapsed();
    let ordered = early > late && late > none;
    let gap = (fusion - visual).min(fusion - audio);
    let pass = ordered && gap >= 0.10 && elapsed < Duration::from_secs(3600);
    let detail = format!(
        "cross_label, mean of {} seeds: concat early {early:.3} / late {late:.3} / none {none:.3}; \
         early fusion {fusion:.3} vs visual {visual:.3}, audio {audio:.3} (gap {:+.1} points, need +10)",
        seeds.len(),
        100.0 * gap
    );
    report(7, "fusion benefit direction", pass, &detail, elapsed);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_8_masking_invariants() {
    let _g = serial();
    let t = Instant::now();
    let mut runner = TestRunner::new(ProptestConfig::with_cases(256));
    let prop = runner.run(&(1usize..200, 0.0f64..=1.0, any::<u64>()), |(n, ratio, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if masked_count(n, ratio) == n {
            prop_assert!(sample_mask(n, ratio, &mut rng).is_err());
            return Ok(());
        }
        let plan = sample_mask(n, ratio, &mut rng).unwrap();
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.masked.len(), (ratio * n as f64).round() as usize);
        prop_assert_eq!(plan.masked.len(), masked_count(n, ratio));
        prop_assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        Ok(())
    });
    let (n, ratio, draws) = (64, 0.75, 10_000);
    let mut counts = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..draws {
        for &i in &sample_mask(n, ratio, &mut rng).unwrap().masked {
            counts[i] += 1;
        }
    }
    let worst = counts.iter().map(|&c| (c as f64 / draws as f64 - ratio).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = prop.is_ok() && worst <= 0.02;
    let detail = format!(
        "256 random plans {}, per-index masking frequency over {draws} draws within {:.2} points of {ratio}",
        if prop.is_ok() { "valid" } else { "INVALID" },
        100.0 * worst
    );
    report(8, "masking invariants", pass, &detail, elapsed);
    assert!(pass, "{prop:?}");
}

#[test]
fn criterion_9_persistence() {
    let _g = serial();
    let t = Instant::now();
    let cfg = RunConfig::parse("", &["train.total_epochs=2".into(), "train.warmup_epochs=1".into(), "seed=9".into()]).unwrap();
    let total = cfg.train.total_steps();
    let data = DataSource::Synthetic(cfg.data.synthetic());

    let full = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed).unwrap();
    let mut full_state = TrainState::new(&full, &cfg.train);
    let uninterrupted = pretrain(&full, &mut full_state, &cfg.train, &data, cfg.seed, total, |_, _| Ok(())).unwrap();

    let first = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&first, &cfg.train);
    let mut records = pretrain(&first, &mut state, &cfg.train, &data, cfg.seed, total / 2, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let saved = Checkpoint::capture(&cfg.to_toml(), cfg.seed, &first, &state);
    saved.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let byte_exact = loaded.encode() == std::fs::read(&path).unwrap() && loaded == saved;

    let rc = loaded.config().unwrap();
    let resumed = AvMae::<f32>::new(&rc.model, &rc.decoder, &rc.data, rc.seed).unwrap();
    let mut resumed_state = TrainState::new(&resumed, &rc.train);
    loaded.restore(&resumed, &mut resumed_state).unwrap();
    let params_exact = resumed
        .params
        .iter()
        .zip(first.params.iter())
        .all(|(a, b)| a.var.value().data().iter().zip(b.var.value().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    records.extend(pretrain(&resumed, &mut resumed_state, &rc.train, &data, rc.seed, total, |_, _| Ok(())).unwrap());
    let same_losses = records == uninterrupted;
    let elapsed = t.elapsed();
    let pass = byte_exact && params_exact && same_losses && elapsed < Duration::from_secs(120);
    let detail = format!(
        "save/load byte-exact {byte_exact}, parameters bit-exact {params_exact}, resumed at step {} of {total}: loss sequence identical {same_losses}",
        total / 2
    );
    report(9, "persistence", pass, &detail, elapsed);
    assert!(pass, "{detail}");
}
