use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use avfusion::autograd::inject_sign_flip;
use avfusion::bench::{sweep, write_bench_csv, BenchGrid};
use avfusion::checkpoint::{Checkpoint, VERSION};
use avfusion::config::RunConfig;
use avfusion::encoder::FusionMode;
use avfusion::error::Error;
use avfusion::eval::{
    probe_model, write_json_lines, write_probe_csv, FeatureFamily, LabeledSet, ProbeOptions, ProbeTask, PROBE_STREAM,
};
use avfusion::gradcheck::suite::select;
use avfusion::pretrain::{derive_seed, pretrain, AvMae, DataSource, TrainState};
use avfusion::rawio::load_dataset;

/// Names a backward rule whose gradient `gradcheck` negates, to confirm the
/// suite notices.
const FAULT_INJECT_ENV: &str = "AVFUSION_FAULT_INJECT";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "avfusion", version, about = "Audio-visual fusion transformer: pretraining, probing, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked reconstruction pretraining; writes metrics.jsonl and checkpoints.
    Pretrain(PretrainArgs),
    /// Linear probes on frozen features; writes CSV.
    Probe(ProbeArgs),
    /// Forward-pass throughput and memory over a grid file; writes CSV.
    Bench(BenchArgs),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
    /// Prints the header, configuration and tensor table of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this step instead of the configured total.
    #[arg(long)]
    until: Option<usize>,
    /// `section.key=value` overrides.
    overrides: Vec<String>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Trained checkpoint to probe.
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Probe a freshly initialized model built from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of visual,audio,fusion,concat.
    #[arg(long, value_delimiter = ',')]
    families: Vec<FeatureFamily>,
    /// Comma-separated subset of class_id,cross_label.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<ProbeTask>,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_eval: usize,
    /// Seed for the probe sets; the run seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    overrides: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML grid with a `[defaults]` table and `[[cell]]` entries.
    grid: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all`, `op`, `block`, `model`, or a check name.
    #[arg(long, default_value = "all")]
    scope: String,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::parse("", overrides),
    }
}

fn data_source(cfg: &RunConfig) -> Result<DataSource<f32>, Error> {
    Ok(match &cfg.data.dir {
        Some(dir) => DataSource::Files(Arc::new(load_dataset(dir)?)),
        None => DataSource::Synthetic(cfg.data.synthetic()),
    })
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

fn cmd_pretrain(a: PretrainArgs) -> Result<ExitCode, Error> {
    let (cfg, resume) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = RunConfig::parse(&ckpt.config_text, &a.overrides)?;
            (cfg, Some(ckpt))
        }
        None => (load_config(a.config.as_deref(), &a.overrides)?, None),
    };
    let out_dir = cfg.output.resolved_dir();
    let occupied = fs::read_dir(&out_dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if resume.is_none() && occupied {
        return Err(Error::config(
            "output.dir",
            format!("{} already exists and is not empty; choose another directory or resume", out_dir.display()),
        ));
    }
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let config_text = cfg.to_toml();
    let config_path = out_dir.join("config.toml");
    fs::write(&config_path, &config_text).map_err(io_err(&config_path))?;

    let model = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed)?;
    let mut state = TrainState::new(&model, &cfg.train);
    if let Some(ckpt) = &resume {
        ckpt.restore(&model, &mut state)?;
    }
    let data = data_source(&cfg)?;
    let total = cfg.train.total_steps();
    let until = a.until.unwrap_or(total).min(total);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    eprintln!(
        "pretraining {} params, steps {}..{until} of {total}, output {}",
        model.params.numel(),
        state.step,
        out_dir.display()
    );
    let every = cfg.output.checkpoint_every;
    let mut last_saved = None;
    pretrain(&model, &mut state, &cfg.train, &data, cfg.seed, until, |rec, st| {
        write_json_lines(&mut metrics, std::slice::from_ref(rec))?;
        if rec.step % 10 == 0 || st.step == until {
            eprintln!(
                "step {:>6}  lr {:.3e}  loss {:.5} (visual {:.5}, audio {:.5})",
                rec.step, rec.lr, rec.loss_total, rec.loss_v, rec.loss_a
            );
        }
        if every > 0 && st.step % every == 0 {
            Checkpoint::capture(&config_text, cfg.seed, &model, st).save(&checkpoint_path(&out_dir, st.step))?;
            last_saved = Some(st.step);
        }
        Ok(())
    })?;
    if last_saved != Some(state.step) {
        Checkpoint::capture(&config_text, cfg.seed, &model, &state).save(&checkpoint_path(&out_dir, state.step))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(a: ProbeArgs) -> Result<ExitCode, Error> {
    let (cfg, ckpt) = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (RunConfig::parse(&ckpt.config_text, &a.overrides)?, Some(ckpt))
        }
        None => (load_config(a.config.as_deref(), &a.overrides)?, None),
    };
    let model = AvMae::<f32>::new(&cfg.model, &cfg.decoder, &cfg.data, cfg.seed)?;
    if let Some(ckpt) = &ckpt {
        ckpt.restore_params(&model)?;
    }
    let fuses = cfg.model.fusion_mode != FusionMode::None;
    let families = if a.families.is_empty() {
        FeatureFamily::ALL.iter().copied().filter(|&f| fuses || f != FeatureFamily::Fusion).collect()
    } else {
        a.families.clone()
    };
    if !fuses && families.contains(&FeatureFamily::Fusion) {
        return Err(Error::config(
            "model.fusion_mode",
            "the fusion feature family needs fusion tokens, but this model was built with fusion_mode none",
        ));
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let (train, eval, default_tasks) = match &cfg.data.dir {
        Some(dir) => {
            let samples = load_dataset::<f32>(dir)?;
            if samples.len() < 2 {
                return Err(Error::config("data.dir", "at least two labeled samples are needed"));
            }
            let cut = (samples.len() / 2).max(1);
            let (tr, ev) = samples.split_at(cut);
            (LabeledSet::from_files(tr)?, LabeledSet::from_files(ev)?, vec![ProbeTask::ClassId])
        }
        None => {
            let syn = cfg.data.synthetic();
            (
                LabeledSet::synthetic(a.n_train, &syn, derive_seed(seed, PROBE_STREAM, 0))?,
                LabeledSet::synthetic(a.n_eval, &syn, derive_seed(seed, PROBE_STREAM, 1))?,
                ProbeTask::ALL.to_vec(),
            )
        }
    };
    let tasks = if a.tasks.is_empty() { default_tasks } else { a.tasks.clone() };
    let results = probe_model(&model, &train, &eval, &families, &tasks, &ProbeOptions::default(), seed)?;
    let mut out = open_output(a.output.as_deref())?;
    write_probe_csv(&mut out, &results).map_err(|e| Error::io(a.output.clone().unwrap_or_default(), e))?;
    out.flush().map_err(|e| Error::io(a.output.clone().unwrap_or_default(), e))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode, Error> {
    let text = fs::read_to_string(&a.grid).map_err(io_err(&a.grid))?;
    let cells = BenchGrid::parse(&text)?.configs()?;
    let reports = sweep(&cells);
    let mut out = open_output(a.output.as_deref())?;
    write_bench_csv(&mut out, &reports).map_err(|e| Error::io(a.output.clone().unwrap_or_default(), e))?;
    out.flush().map_err(|e| Error::io(a.output.clone().unwrap_or_default(), e))?;
    let failed: Vec<&str> = reports.iter().filter(|r| r.error.is_some()).map(|r| r.config_id.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("failed cells: {}", failed.join(", "));
    }
    if failed.len() == reports.len() {
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode, Error> {
    let checks = select(&a.scope)?;
    let fault = std::env::var(FAULT_INJECT_ENV).ok().filter(|s| !s.is_empty());
    if let Some(op) = &fault {
        eprintln!("{FAULT_INJECT_ENV}={op}: negating the `{op}` backward rule");
    }
    inject_sign_flip(fault.as_deref());
    let mut failing = Vec::new();
    println!("{:<32} {:<6} {:>12} {:>10}  result", "check", "kind", "max_rel_err", "tolerance");
    for c in &checks {
        let report = c.run()?;
        let ok = report.passed();
        println!(
            "{:<32} {:<6} {:>12.3e} {:>10.0e}  {}",
            c.name,
            c.kind.as_str(),
            report.max_rel_err(),
            report.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failing.push(c.name);
        }
    }
    inject_sign_flip(None);
    if failing.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failing: {}", failing.join(", "));
        Ok(ExitCode::from(EXIT_FAILURE))
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<ExitCode, Error> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let numel: usize = ckpt.params.iter().map(|(_, t)| t.numel()).sum();
    let with_moments = ckpt.moments.iter().filter(|m| m.is_some()).count();
    println!("format version: {VERSION}");
    println!("next step: {}", ckpt.step);
    println!("seed: {}", ckpt.seed);
    println!("optimizer steps: {}", ckpt.adam_t);
    println!("tensors: {} ({numel} values, {with_moments} with optimizer moments)", ckpt.params.len());
    for (name, t) in &ckpt.params {
        println!("  {name} {:?}", t.shape());
    }
    println!("config:");
    for line in ckpt.config_text.lines() {
        println!("  {line}");
    }
    Ok(ExitCode::SUCCESS)
}
