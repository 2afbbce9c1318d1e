//! `dreamer` command-line tool: config presets, cost reports, training,
//! FLOP/parameter matching, routing analysis and greedy generation.

mod run_dir;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dreamer_core::analysis::{write_report, TelemetryLog};
use dreamer_core::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use dreamer_core::cost::{count_memory, cost_report, match_model, DEFAULT_SEQ_LEN};
use dreamer_core::train::{DataSource, OptimConfig, StepMetrics, TaskKind, TaskSpec, TrainConfig, TrainEvent, Trainer};
use dreamer_core::{Error, Model, ModelConfig, Scalar, Variant};

use run_dir::{prepare, resolve_out, RunManifest, UsageError};

#[derive(Parser)]
#[command(name = "dreamer", version, about = "Depth-recurrent attention mixture models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or write a preset model config.
    Config(ConfigArgs),
    /// Parameter count, FLOPs per token and memory of a config.
    Cost(CostArgs),
    /// Train a model on a synthetic task or a token file.
    Train(Box<TrainArgs>),
    /// Resize a candidate's experts to match a baseline's FLOPs and parameters.
    Match(MatchArgs),
    /// Collect routing telemetry and write the usage analyses.
    Analyze(AnalyzeArgs),
    /// Greedy decoding from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    La,
    Dr,
    DrDa,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::La => Variant::La,
            VariantArg::Dr => Variant::Dr,
            VariantArg::DrDa => Variant::DrDa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
    ModularSumChain,
    TokenLm,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Reverse => TaskKind::Reverse,
            TaskArg::ModularSumChain => TaskKind::ModularSumChain,
            TaskArg::TokenLm => TaskKind::TokenLm,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, value_enum, default_value = "dr-da")]
    variant: VariantArg,
    /// Depth override; the full-scale preset defaults to 16.
    #[arg(long)]
    depth: Option<usize>,
    /// Output file; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, value_enum, default_value = "copy")]
    task: TaskArg,
    /// Tokens per training sequence, including the separator.
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    /// Task vocabulary; defaults to the model vocabulary.
    #[arg(long)]
    task_vocab: Option<usize>,
    #[arg(long, default_value_t = 7)]
    modulus: usize,
    /// Token file for language modeling (implies `--task token-lm`).
    #[arg(long)]
    tokens: Option<PathBuf>,
}

impl TaskArgs {
    fn spec(&self, cfg: &ModelConfig, seed: u64) -> Result<TaskSpec> {
        let kind = if self.tokens.is_some() { TaskKind::TokenLm } else { self.task.into() };
        let spec = TaskSpec {
            kind,
            seq_len: self.seq_len,
            vocab: self.task_vocab.unwrap_or(cfg.vocab),
            modulus: self.modulus,
            seed,
            token_file: self.tokens.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Model config; optional when resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train each seed for `--select-after` steps and continue the one with
    /// the lower recent loss.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["seed", "resume"])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    select_after: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip: Option<f64>,
    /// Checkpoint cadence in steps; 0 keeps only the first and last.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    stop_at_loss: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Checkpoint to continue from, with its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trained model to collect telemetry from.
    #[arg(long, conflicts_with = "telemetry")]
    checkpoint: Option<PathBuf>,
    /// Config to check the checkpoint against, or to interpret `--telemetry`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Existing telemetry file to analyze instead of running a model.
    #[arg(long, requires = "config")]
    telemetry: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 1000)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt_tokens: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Config(a) => cmd_config(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Train(a) => match a.precision {
            Precision::F32 => cmd_train::<f32>(*a),
            Precision::F64 => cmd_train::<f64>(*a),
        },
        Command::Match(a) => cmd_match(a),
        Command::Analyze(a) => match a.precision {
            Precision::F32 => cmd_analyze::<f32>(a),
            Precision::F64 => cmd_analyze::<f64>(a),
        },
        Command::Generate(a) => match a.precision {
            Precision::F32 => cmd_generate::<f32>(a),
            Precision::F64 => cmd_generate::<f64>(a),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NumericOverflow { .. }) => 3,
        _ => 2,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    ModelConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn cmd_config(a: ConfigArgs) -> Result<()> {
    let variant = a.variant.into();
    let mut cfg = match a.preset {
        Preset::Desk => ModelConfig::desk(variant),
        Preset::Full => ModelConfig::full_scale(variant, a.depth.unwrap_or(16)),
    };
    if let Some(d) = a.depth {
        cfg.depth = d;
    }
    cfg.validate()?;
    let text = cfg.to_toml();
    match a.out {
        None => print!("{}", text),
        Some(path) => {
            if path.exists() && !a.force {
                bail!(UsageError(format!("{} exists; pass --force to overwrite", path.display())));
            }
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    #[serde(flatten)]
    report: dreamer_core::cost::CostReport,
    memory: dreamer_core::cost::MemoryReport,
    config_hash: String,
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let out = CostOutput {
        report: cost_report(&cfg, a.seq_len, 4),
        memory: count_memory(&cfg, a.seq_len, 4),
        config_hash: cfg.hash(),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSetup<'a> {
    train: &'a TrainConfig,
    task: &'a TaskSpec,
    resumed_from: Option<String>,
}

#[derive(Serialize)]
struct SeedSelection {
    seeds: Vec<u64>,
    select_after: usize,
    recent_mean_loss: Vec<f64>,
    selected: u64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    step: usize,
    last_metrics: Option<&'a StepMetrics>,
}

fn train_config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let d = OptimConfig::default();
    TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seed,
        optim: OptimConfig {
            max_lr: a.lr.unwrap_or(d.max_lr),
            warmup_steps: a.warmup.unwrap_or(d.warmup_steps),
            weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
            max_grad_norm: a.clip.unwrap_or(d.max_grad_norm),
            ..d
        },
        checkpoint_every: a.checkpoint_every,
        stop_at_loss: a.stop_at_loss,
    }
}

fn mean_recent_loss(hist: &[StepMetrics]) -> f64 {
    let tail = &hist[hist.len().saturating_sub(10)..];
    if tail.is_empty() {
        return f64::INFINITY;
    }
    tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64
}

fn log_step(m: &StepMetrics, w: &mut BufWriter<File>) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(m)?)?;
    w.flush()?;
    Ok(())
}

fn cmd_train<T: Scalar>(a: TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint::<T>(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let cfg = match (&resumed, &a.config) {
        (Some(ck), Some(path)) => {
            let given = load_config(path)?;
            if given.hash() != ck.header.config.hash() {
                bail!(UsageError(format!("{} does not match the checkpoint's config", path.display())));
            }
            given
        }
        (Some(ck), None) => ck.header.config.clone(),
        (None, Some(path)) => load_config(path)?,
        (None, None) => bail!(UsageError("train needs --config or --resume".into())),
    };
    if !a.seeds.is_empty() && a.seeds.len() < 2 {
        bail!(UsageError("--seeds needs at least two values".into()));
    }

    let out = resolve_out(a.out.clone(), "train");
    prepare(&out, a.force)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);

    let (mut trainer, seed) = if let Some(ck) = resumed {
        let data = DataSource::new(a.task.spec(&cfg, a.seed)?)?;
        let mut t = Trainer::new(ck.model, data, train_config(&a, a.seed))?;
        if let Some(state) = ck.optimizer {
            t.optimizer.restore(state)?;
        }
        t.step = ck.header.step as usize;
        (t, a.seed)
    } else if a.seeds.is_empty() {
        let data = DataSource::new(a.task.spec(&cfg, a.seed)?)?;
        (Trainer::new(Model::<T>::new(cfg.clone(), a.seed)?, data, train_config(&a, a.seed))?, a.seed)
    } else {
        let warm = a.select_after.min(a.steps);
        let mut candidates = Vec::new();
        for &s in &a.seeds {
            let data = DataSource::new(a.task.spec(&cfg, s)?)?;
            let mut tc = train_config(&a, s);
            tc.steps = warm;
            tc.stop_at_loss = None;
            let mut t = Trainer::new(Model::<T>::new(cfg.clone(), s)?, data, tc)?;
            let hist = t.run(|_| Ok(()))?;
            candidates.push((mean_recent_loss(&hist), s, t, hist));
        }
        let best = (0..candidates.len())
            .min_by(|&i, &j| candidates[i].0.total_cmp(&candidates[j].0))
            .expect("at least two seeds");
        write_json(
            &out.join("seed_selection.json"),
            &SeedSelection {
                seeds: a.seeds.clone(),
                select_after: warm,
                recent_mean_loss: candidates.iter().map(|c| c.0).collect(),
                selected: candidates[best].1,
            },
        )?;
        let (_, s, mut t, hist) = candidates.swap_remove(best);
        for m in &hist {
            log_step(m, &mut metrics)?;
        }
        t.config.steps = a.steps;
        t.config.stop_at_loss = a.stop_at_loss;
        (t, s)
    };

    write_json(
        &out.join("train_config.json"),
        &TrainSetup {
            train: &trainer.config,
            task: trainer.data.spec(),
            resumed_from: a.resume.as_ref().map(|p| p.display().to_string()),
        },
    )?;
    let mut manifest = RunManifest::new("train", &out);
    manifest.config_path = a.config.as_ref().or(a.resume.as_ref()).map(|p| p.display().to_string());
    manifest.config_hash = Some(cfg.hash());
    manifest.seed = Some(seed);
    manifest.precision = Some(a.precision.name().into());
    manifest.write(&out)?;

    let mut last: Option<StepMetrics> = None;
    let result = trainer.run(|ev| {
        match ev {
            TrainEvent::Step(m) => {
                log_step(m, &mut metrics).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
                last = Some(m.clone());
            }
            TrainEvent::Checkpoint { step, model, optimizer } => {
                let path = ckpt_dir.join(format!("step_{:06}.ckpt", step));
                save_checkpoint(&path, model, Some(optimizer), step as u64)?;
            }
        }
        Ok(())
    });
    drop(metrics);
    match result {
        Ok(_) => {
            match &last {
                Some(m) => eprintln!("trained to step {} (loss {:.6}); run in {}", trainer.step, m.loss, out.display()),
                None => eprintln!("no steps run; run in {}", out.display()),
            }
            Ok(())
        }
        Err(e) => {
            if matches!(e, Error::NumericOverflow { .. }) {
                write_json(
                    &out.join("diagnostic.json"),
                    &Diagnostic { error: e.to_string(), step: trainer.step, last_metrics: last.as_ref() },
                )?;
            }
            Err(anyhow::Error::new(e).context(format!("training failed at step {}", trainer.step)))
        }
    }
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let baseline = load_config(&a.baseline)?;
    let candidate = load_config(&a.candidate)?;
    let result = match_model(&candidate, &baseline, a.seq_len)?;
    let out = resolve_out(a.out, "match");
    prepare(&out, a.force)?;
    fs::write(out.join("matched.toml"), result.config.to_toml())?;
    write_json(&out.join("match_report.json"), &result)?;
    let mut manifest = RunManifest::new("match", &out);
    manifest.config_path = Some(a.candidate.display().to_string());
    manifest.config_hash = Some(result.config.hash());
    manifest.write(&out)?;
    println!(
        "intermediate {} experts {}: flops rel error {:.4}%, params rel error {:.4}%",
        result.config.ea.intermediate,
        result.config.ea.experts,
        100.0 * result.flops_rel_error,
        100.0 * result.params_rel_error
    );
    if result.boundary_warning {
        eprintln!("warning: a search stopped at its range limit; see match_report.json");
    }
    Ok(())
}

/// Router families present in a config, with their expert counts.
fn router_families(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut r = vec![(".ea".to_string(), cfg.ea.experts)];
    if cfg.uses_routed_projections() {
        r.push((".sa".into(), cfg.projection_experts()));
        if cfg.has_da() {
            r.push((".da".into(), cfg.projection_experts()));
        }
    }
    r
}

fn collect_telemetry<T: Scalar>(model: &Model<T>, a: &AnalyzeArgs) -> Result<TelemetryLog> {
    if a.batch_size == 0 {
        bail!(UsageError("--batch-size must be positive".into()));
    }
    let spec = a.task.spec(&model.config, a.seed)?;
    if spec.seq_len > model.config.context {
        bail!(UsageError(format!("--seq-len {} exceeds context {}", spec.seq_len, model.config.context)));
    }
    if spec.vocab > model.config.vocab {
        bail!(UsageError(format!("task vocab {} exceeds model vocab {}", spec.vocab, model.config.vocab)));
    }
    let data = DataSource::new(spec)?;
    let mut log = TelemetryLog::new();
    let mut start = 0;
    while start < a.sequences {
        let end = (start + a.batch_size).min(a.sequences);
        let batch = (start..end)
            .map(|i| data.example(i as u64).map(|e| e.input))
            .collect::<dreamer_core::Result<Vec<_>>>()?;
        let mut part = TelemetryLog::new();
        model.forward_with(&batch, Some(&mut part))?;
        // sequence ids are batch-local in the model; make them global
        for ev in &mut part.routing {
            ev.sequence += start;
        }
        for row in &mut part.da_rows {
            row.sequence += start;
        }
        log.routing.extend(part.routing);
        log.da_rows.extend(part.da_rows);
        start = end;
    }
    Ok(log)
}

fn cmd_analyze<T: Scalar>(a: AnalyzeArgs) -> Result<()> {
    let given = a.config.as_deref().map(load_config).transpose()?;
    let (cfg, log) = match (&a.checkpoint, &a.telemetry) {
        (Some(path), _) => {
            let header = read_header(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(g) = &given {
                if g.hash() != header.config.hash() {
                    bail!(UsageError("--config does not match the checkpoint's config".into()));
                }
            }
            let ck = load_checkpoint::<T>(path)?;
            let log = collect_telemetry(&ck.model, &a)?;
            (ck.header.config, log)
        }
        (None, Some(path)) => {
            let log = TelemetryLog::read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
            (given.expect("clap requires --config with --telemetry"), log)
        }
        (None, None) => bail!(UsageError("analyze needs --checkpoint or --config with --telemetry".into())),
    };

    let out = resolve_out(a.out.clone(), "analysis");
    prepare(&out, a.force)?;
    log.write_jsonl(&out.join("telemetry.jsonl"))?;
    let summary = write_report(&log, cfg.depth, &router_families(&cfg), &out)?;
    let mut manifest = RunManifest::new("analyze", &out);
    manifest.config_path = a
        .checkpoint
        .as_ref()
        .or(a.config.as_ref())
        .map(|p| p.display().to_string());
    manifest.config_hash = Some(cfg.hash());
    manifest.seed = Some(a.seed);
    manifest.precision = Some(a.precision.name().into());
    manifest.write(&out)?;
    for r in &summary.routers {
        match r.gini {
            Some(g) => println!("{}: gini {:.4}, unused experts {}", r.router, g, r.unused_experts),
            None => println!("{}: no routing events", r.router),
        }
    }
    Ok(())
}

fn cmd_generate<T: Scalar>(a: GenerateArgs) -> Result<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let tokens = ck.model.decode(&a.prompt_tokens, a.n)?;
    let mut stdout = std::io::stdout().lock();
    for t in tokens {
        writeln!(stdout, "{}", t)?;
    }
    Ok(())
}
