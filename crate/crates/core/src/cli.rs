//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_ablation, run_one, AblationRun, AblationTable, ExperimentGrid, Objective};
use crate::checks::{check_loss_term, LossTermKind, GRADCHECK_TOL};
use crate::data::{content_hash, gen_synthetic, import_csv, load_dataset, save_dataset, CsvSchema, Dataset, SyntheticSpec};
use crate::encoder::{init_encoder, load_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::probe::{few_shot_eval, EvalConfig, FineTuneConfig, Protocol};
use crate::results::{emit_results, format_for, Format};
use crate::rng::SeededRng;
use crate::train::{load_training_checkpoint, pretrain, RunOptions, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PRIMUS_OUT";

#[derive(Parser, Debug)]
#[command(name = "primus", version, about = "Multi-objective contrastive pretraining for IMU encoders")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic aligned-triplet dataset.
    GenData(GenDataArgs),
    /// Pretrain an encoder.
    Pretrain(PretrainArgs),
    /// Few-shot linear probing of a checkpoint.
    Probe(ProbeArgs),
    /// Run an objective / alignment-fraction grid.
    Ablate(AblateArgs),
    /// Finite-difference check of the loss gradients on a tiny config.
    Gradcheck(GradcheckArgs),
    /// Window a labeled 6-channel CSV into a dataset.
    ImportCsv(ImportCsvArgs),
    /// Print statistics of the feature queue stored in a checkpoint.
    InspectQueue(InspectQueueArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// SyntheticSpec JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per segment.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    imu_noise: Option<f64>,
    #[arg(long)]
    video_noise: Option<f64>,
    #[arg(long)]
    text_noise: Option<f64>,
    #[arg(long)]
    text_coarseness: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TrainConfig JSON, or a run manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    aligned_fraction: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    nn_warmup: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// One learnable temperature per loss term.
    #[arg(long)]
    per_term_tau: bool,
    /// Output directory (default `$PRIMUS_OUT/pretrain`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Comma-separated shots per class.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed; trial i samples with base + i.
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
}

impl EvalArgs {
    fn apply(&self, mut cfg: EvalConfig) -> EvalConfig {
        if let Some(s) = &self.shots {
            cfg.shots = s.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.eval_seed {
            cfg.base_seed = s;
        }
        if let Some(t) = &self.task {
            cfg.task = t.clone();
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
    /// Results file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Objective label written to the results (default from the checkpoint).
    #[arg(long)]
    objective: Option<String>,
    /// Replace the checkpoint weights by a seeded random init.
    #[arg(long)]
    random_init: bool,
    /// Fine-tune a randomly initialized encoder jointly with the classifier
    /// instead of linear probing.
    #[arg(long)]
    standard_training: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// fig4 or fig5.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    preset: Option<String>,
    /// ExperimentGrid JSON.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Base TrainConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel worker processes.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, hide = true)]
    run_index: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Comma-separated subset of ss, mm, nn, combined.
    #[arg(long, value_delimiter = ',')]
    terms: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Debug fault injection: perturb the linear-layer adjoint.
    #[arg(long)]
    corrupt_adjoint: bool,
}

#[derive(Args, Debug)]
struct ImportCsvArgs {
    #[arg(long)]
    input: PathBuf,
    /// CsvSchema JSON (column names, window, hop).
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    rate: f64,
    /// Window length in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Hop in seconds (default: the window length).
    #[arg(long)]
    hop: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectQueueArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Write the queue as JSON lines here.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_pairs: usize,
}

/// Written next to every command's outputs; `resolved_config` carries every
/// default, so feeding it back through `--config` repeats the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub resolved_config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    fn start(command: &str, config: &impl Serialize, dataset: Option<&Dataset>, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            resolved_config: serde_json::to_value(config)?,
            dataset_hash: dataset.map(content_hash).transpose()?,
            seeds,
            started_unix: now(),
            finished_unix: None,
        })
    }

    fn write(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = Some(now());
        self.write(path)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Reads a JSON config; a run manifest is accepted in place of the bare
/// config.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let mut v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    if let Some(inner) = v.get_mut("resolved_config") {
        v = inner.take();
    }
    serde_json::from_value(v).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ImportCsv(a) => cmd_import_csv(a),
        Command::InspectQueue(a) => cmd_inspect_queue(a),
    }
}

macro_rules! set {
    ($dst:expr, $opt:expr) => {
        if let Some(v) = $opt {
            $dst = v;
        }
    };
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => SyntheticSpec::default(),
    };
    set!(spec.n_classes, a.classes);
    set!(spec.segments_per_class, a.per_class);
    set!(spec.seed, a.seed);
    set!(spec.t, a.length);
    set!(spec.sample_rate_hz, a.rate);
    set!(spec.embed_dim, a.embed_dim);
    set!(spec.imu_noise, a.imu_noise);
    set!(spec.video_noise, a.video_noise);
    set!(spec.text_noise, a.text_noise);
    set!(spec.text_coarseness, a.text_coarseness);
    let ds = gen_synthetic(&spec)?;
    let manifest = RunManifest::start("gen-data", &spec, None, vec![spec.seed])?;
    let m = save_dataset(&ds, &a.out)?;
    let hash = content_hash(&ds)?;
    RunManifest {
        dataset_hash: Some(hash.clone()),
        ..manifest
    }
    .finish(&a.out.join("run_manifest.json"))?;
    println!(
        "{}: {} segments ({} train / {} test), {} classes, T={} at {} Hz, embed_dim={}, {}",
        a.out.display(),
        m.n_segments,
        ds.train.len(),
        ds.test.len(),
        m.class_names.len(),
        m.t,
        m.sample_rate_hz,
        m.embed_dim,
        hash
    );
    Ok(0)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    set!(cfg.epochs, a.epochs);
    set!(cfg.seed, a.seed);
    set!(cfg.batch_size, a.batch_size);
    set!(cfg.lr, a.lr);
    set!(cfg.loss.alpha, a.alpha);
    set!(cfg.loss.beta, a.beta);
    set!(cfg.loss.gamma, a.gamma);
    set!(cfg.aligned_fraction, a.aligned_fraction);
    set!(cfg.queue_capacity, a.queue_capacity);
    set!(cfg.loss.nn_warmup, a.nn_warmup);
    set!(cfg.checkpoint_every, a.checkpoint_every);
    if a.per_term_tau {
        cfg.loss.per_term_tau = true;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let out = a.out.unwrap_or_else(|| out_root().join("pretrain"));
    let manifest_path = out.join("run_manifest.json");
    let manifest = RunManifest::start("pretrain", &cfg, Some(&ds), vec![cfg.seed])?;
    manifest.write(&manifest_path)?;
    let opts = RunOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        log_path: Some(out.join("train.jsonl")),
        resume_from: a.resume,
        stop_after_steps: None,
    };
    let res = pretrain(&ds, &cfg, &opts)?;
    let n_train = ds.train.len();
    println!(
        "aligned training segments: {} of {} ({:.1}%)",
        res.aligned_train,
        n_train,
        100.0 * res.aligned_train as f64 / n_train as f64
    );
    if let (Some(first), Some(last)) = (res.log.first(), res.log.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", first.total, last.total, res.log.len());
    }
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = &res.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    manifest.finish(&manifest_path)?;
    Ok(0)
}

/// Loads encoder weights plus the objective name recorded with them.
fn load_any_checkpoint(path: &Path) -> Result<(EncoderParams, Option<String>)> {
    match load_training_checkpoint(path) {
        Ok(c) => {
            let l = &c.config.loss;
            Ok((c.params, Some(Objective::from_weights(l.alpha, l.beta, l.gamma).name)))
        }
        Err(Error::CorruptCheckpoint(_)) => Ok((load_encoder(path)?, None)),
        Err(e) => Err(e),
    }
}

fn check_compatible(params: &EncoderParams, ds: &Dataset) -> Result<()> {
    let cfg = &params.config;
    let channels = ds.segments[0].imu.shape()[0];
    if channels != cfg.in_channels {
        return Err(Error::config(
            "ckpt",
            format!("encoder expects {} channels, dataset has {channels}", cfg.in_channels),
        ));
    }
    if cfg.output_len(ds.segment_len()).is_none() {
        return Err(Error::config(
            "ckpt",
            format!("dataset segments have {} samples, encoder needs at least {}", ds.segment_len(), cfg.min_input_len()),
        ));
    }
    let d = ds.embed_dim();
    if d != 0 && d != cfg.embed_dim {
        return Err(Error::config(
            "ckpt",
            format!("encoder embeds into {} dimensions, dataset embeddings have {d}", cfg.embed_dim),
        ));
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<i32> {
    let ds = load_dataset(&a.data)?;
    let (mut params, objective) = load_any_checkpoint(&a.ckpt)?;
    check_compatible(&params, &ds)?;
    if a.random_init || a.standard_training {
        params = init_encoder(&params.config, &mut SeededRng::derive(a.seed, 0))?;
    }
    let mut eval = a.eval.apply(EvalConfig::default());
    if a.standard_training {
        eval.protocol = Protocol::FineTune(FineTuneConfig::default());
    }
    let label = a.objective.clone().unwrap_or_else(|| match (a.standard_training, a.random_init) {
        (true, _) => "standard-training".into(),
        (_, true) => "random-init".into(),
        _ => objective.unwrap_or_else(|| "encoder".into()),
    });
    let out = a.out.unwrap_or_else(|| out_root().join("probe").join("results.csv"));
    let manifest_path = out.with_extension("manifest.json");
    let manifest = RunManifest::start("probe", &eval, Some(&ds), vec![eval.base_seed, a.seed])?;
    manifest.write(&manifest_path)?;
    let reports = few_shot_eval(&params, &ds, &eval, &label, 1.0)?;
    emit_results(&reports, &out, format_for(&out))?;
    for r in &reports {
        println!("{:>4}-shot: {:.4} ± {:.4}", r.n_per_class, r.mean, r.stderr);
    }
    println!("results: {}", out.display());
    manifest.finish(&manifest_path)?;
    Ok(0)
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let mut base: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    set!(base.epochs, a.epochs);
    set!(base.seed, a.seed);
    set!(base.lr, a.lr);
    set!(base.batch_size, a.batch_size);
    let grid = match (&a.preset, &a.grid) {
        (Some(p), _) => ExperimentGrid::preset(p, a.eval.apply(EvalConfig::default()))?,
        (None, Some(path)) => {
            let mut g: ExperimentGrid = read_config(path)?;
            g.eval = a.eval.apply(g.eval);
            g
        }
        (None, None) => return Err(Error::config("preset", "give --preset or --grid")),
    };
    grid.validate()?;
    base.validate()?;
    let ds = load_dataset(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| out_root().join("ablate"));
    let runs = grid.runs();

    if let Some(i) = a.run_index {
        let (objective, fraction) = runs
            .get(i)
            .ok_or_else(|| Error::config("run_index", format!("grid has {} runs", runs.len())))?;
        let run = run_or_record(&ds, objective, *fraction, &base, &grid.eval);
        write_json(&out.join("runs").join(format!("run-{i}.json")), &run)?;
        return Ok(0);
    }

    let manifest_path = out.join("run_manifest.json");
    #[derive(Serialize)]
    struct Resolved<'a> {
        grid: &'a ExperimentGrid,
        base: &'a TrainConfig,
    }
    let manifest = RunManifest::start("ablate", &Resolved { grid: &grid, base: &base }, Some(&ds), vec![base.seed])?;
    manifest.write(&manifest_path)?;

    let table = if a.workers <= 1 {
        run_ablation(&ds, &grid, &base)?
    } else {
        run_parallel(&a, &grid, &base, &out, runs.len())?
    };
    write_json(&out.join("ablation.json"), &table)?;
    let reports = table.reports();
    if reports.is_empty() {
        return Err(Error::Data("every ablation run failed".into()));
    }
    emit_results(&reports, &out.join("results.csv"), Format::Csv)?;
    for run in &table.runs {
        match (&run.error, &run.diagnostic) {
            (Some(e), _) => println!("{} @ {}: FAILED {e}", run.objective.name, run.aligned_fraction),
            (None, d) => {
                let accs: Vec<String> =
                    run.reports.iter().map(|r| format!("{}:{:.3}±{:.3}", r.n_per_class, r.mean, r.stderr)).collect();
                let flag = d.as_ref().is_some_and(|d| d.collapsed);
                println!(
                    "{} @ {}: {}{}",
                    run.objective.name,
                    run.aligned_fraction,
                    accs.join(" "),
                    if flag { " [collapsed]" } else { "" }
                );
            }
        }
    }
    manifest.finish(&manifest_path)?;
    Ok(0)
}

fn run_or_record(ds: &Dataset, objective: &Objective, fraction: f64, base: &TrainConfig, eval: &EvalConfig) -> AblationRun {
    run_one(ds, objective, fraction, base, eval).unwrap_or_else(|e| AblationRun {
        objective: objective.clone(),
        aligned_fraction: fraction,
        reports: Vec::new(),
        diagnostic: None,
        first_epoch_loss: None,
        last_epoch_loss: None,
        error: Some(e.to_string()),
    })
}

/// Re-invokes this executable once per grid cell, at most `workers` at a
/// time, then merges the per-run files in grid order.
fn run_parallel(a: &AblateArgs, grid: &ExperimentGrid, base: &TrainConfig, out: &Path, n: usize) -> Result<AblationTable> {
    let exe = std::env::current_exe()?;
    fs::create_dir_all(out)?;
    let grid_path = out.join("grid.json");
    let base_path = out.join("base_config.json");
    write_json(&grid_path, grid)?;
    write_json(&base_path, base)?;
    let mut pending: Vec<usize> = (0..n).rev().collect();
    let mut running = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < a.workers {
            let Some(i) = pending.pop() else { break };
            let child = Process::new(&exe)
                .arg("ablate")
                .arg("--data")
                .arg(&a.data)
                .arg("--grid")
                .arg(&grid_path)
                .arg("--config")
                .arg(&base_path)
                .arg("--out")
                .arg(out)
                .arg("--run-index")
                .arg(i.to_string())
                .spawn()?;
            running.push((i, child));
        }
        let (i, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(i);
        }
    }
    let runs = grid.runs();
    let mut table = AblationTable::default();
    for (i, (objective, fraction)) in runs.into_iter().enumerate() {
        let path = out.join("runs").join(format!("run-{i}.json"));
        let run = match fs::read_to_string(&path) {
            Ok(text) if !failed.contains(&i) => serde_json::from_str(&text)?,
            _ => AblationRun {
                objective,
                aligned_fraction: fraction,
                reports: Vec::new(),
                diagnostic: None,
                first_epoch_loss: None,
                last_epoch_loss: None,
                error: Some("worker process failed".into()),
            },
        };
        table.runs.push(run);
    }
    Ok(table)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let terms = match &a.terms {
        Some(t) => t.iter().map(|s| s.parse()).collect::<Result<Vec<LossTermKind>>>()?,
        None => LossTermKind::ALL.to_vec(),
    };
    let mut ok = true;
    for term in terms {
        let r = check_loss_term(term, a.seed, a.corrupt_adjoint)?;
        let pass = r.failure.is_none() && r.max_rel_error < GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{:<9} max_rel_error {:.3e} over {} elements  {}",
            term.name(),
            r.max_rel_error,
            r.checked,
            if pass { "ok" } else { "FAIL" }
        );
        if let Some(f) = &r.failure {
            println!("          failure: {f}");
        }
    }
    Ok(if ok { 0 } else { 1 })
}

fn cmd_import_csv(a: ImportCsvArgs) -> Result<i32> {
    let mut schema: CsvSchema = match &a.schema {
        Some(p) => read_config(p)?,
        None => CsvSchema::default(),
    };
    set!(schema.window_s, a.window);
    schema.hop_s = a.hop.unwrap_or(if a.window.is_some() { schema.window_s } else { schema.hop_s });
    let ds = import_csv(&a.input, &schema, a.rate)?;
    let m = save_dataset(&ds, &a.out)?;
    println!(
        "{}: {} windows of {} samples, {} classes ({})",
        a.out.display(),
        m.n_segments,
        m.t,
        m.class_names.len(),
        m.class_names.join(", ")
    );
    Ok(0)
}

fn cmd_inspect_queue(a: InspectQueueArgs) -> Result<i32> {
    let ckpt = load_training_checkpoint(&a.ckpt)?;
    let stats = ckpt.queue.snapshot_stats(a.seed, a.max_pairs);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    if let Some(p) = &a.dump {
        fs::write(p, ckpt.queue.dump_jsonl())?;
        println!("queue dump: {}", p.display());
    }
    Ok(0)
}
