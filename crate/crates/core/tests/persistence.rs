use avfusion::checkpoint::Checkpoint;
use avfusion::config::RunConfig;
use avfusion::pretrain::{pretrain, AvMae, DataSource, StepRecord, TrainState};
use avfusion::synthetic::{generate_synthetic_batch, stack_batch};

fn cfg(extra: &[&str]) -> RunConfig {
    let mut ov: Vec<String> = ["model.dim=32", "model.depth=2", "decoder.dim=32", "decoder.depth=1", "train.batch_size=4"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::parse("", &ov).unwrap()
}

fn train(model: &AvMae<f32>, state: &mut TrainState<f32>, cfg: &RunConfig, until: usize) -> Vec<StepRecord> {
    let data = DataSource::Synthetic(cfg.data.synthetic());
    pretrain(model, state, &cfg.train, &data, cfg.seed, until, |_, _| Ok(())).unwrap()
}

fn bits(model: &AvMae<f32>) -> Vec<(String, Vec<u32>)> {
    model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.var.value().data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn round_trip_is_bit_exact_and_forward_identical() {
    let c = cfg(&[]);
    let model = AvMae::<f32>::new(&c.model, &c.decoder, &c.data, c.seed).unwrap();
    let mut state = TrainState::new(&model, &c.train);
    train(&model, &mut state, &c, 3);
    let ckpt = Checkpoint::capture(&c.to_toml(), c.seed, &model, &state);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.encode(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.config().unwrap(), c);

    let fresh = AvMae::<f32>::new(&c.model, &c.decoder, &c.data, 999).unwrap();
    assert_ne!(bits(&fresh), bits(&model));
    let mut fresh_state = TrainState::new(&fresh, &c.train);
    loaded.restore(&fresh, &mut fresh_state).unwrap();
    assert_eq!(bits(&fresh), bits(&model));
    assert_eq!(fresh_state.step, 3);

    let samples = generate_synthetic_batch::<f32>(2, &c.data.synthetic(), 5).unwrap();
    let (img, spec) = stack_batch(&samples).unwrap();
    let a = model.encode(&img, &spec).unwrap();
    let b = fresh.encode(&img, &spec).unwrap();
    assert_eq!(a.fusion.value().data(), b.fusion.value().data());
    assert_eq!(a.visual.value().data(), b.visual.value().data());
    assert_eq!(a.audio.value().data(), b.audio.value().data());
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let c = cfg(&["seed=4", "train.warmup_epochs=0", "train.total_epochs=1", "train.steps_per_epoch=6"]);
    let full = AvMae::<f32>::new(&c.model, &c.decoder, &c.data, c.seed).unwrap();
    let mut full_state = TrainState::new(&full, &c.train);
    let uninterrupted = train(&full, &mut full_state, &c, 6);

    let first = AvMae::<f32>::new(&c.model, &c.decoder, &c.data, c.seed).unwrap();
    let mut first_state = TrainState::new(&first, &c.train);
    let mut records = train(&first, &mut first_state, &c, 2);
    let bytes = Checkpoint::capture(&c.to_toml(), c.seed, &first, &first_state).encode();
    drop(first);

    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let rc = ckpt.config().unwrap();
    let resumed = AvMae::<f32>::new(&rc.model, &rc.decoder, &rc.data, rc.seed).unwrap();
    let mut state = TrainState::new(&resumed, &rc.train);
    ckpt.restore(&resumed, &mut state).unwrap();
    records.extend(train(&resumed, &mut state, &rc, 6));

    assert_eq!(records, uninterrupted);
    assert_eq!(bits(&resumed), bits(&full));
    assert_eq!(
        Checkpoint::capture(&rc.to_toml(), rc.seed, &resumed, &state).encode(),
        Checkpoint::capture(&c.to_toml(), c.seed, &full, &full_state).encode()
    );
}

#[test]
fn mismatched_architecture_is_rejected_untouched() {
    let c = cfg(&[]);
    let model = AvMae::<f32>::new(&c.model, &c.decoder, &c.data, 1).unwrap();
    let state = TrainState::new(&model, &c.train);
    let ckpt = Checkpoint::capture(&c.to_toml(), 1, &model, &state);

    let other = cfg(&["model.fusion_tokens=8"]);
    let target = AvMae::<f32>::new(&other.model, &other.decoder, &other.data, 2).unwrap();
    let before = bits(&target);
    let mut target_state = TrainState::new(&target, &other.train);
    let err = ckpt.restore(&target, &mut target_state).unwrap_err();
    assert!(err.to_string().contains("architecture mismatch"), "{err}");
    assert_eq!(bits(&target), before);
    assert_eq!(target_state.step, 0);
}
