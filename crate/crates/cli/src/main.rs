//! `famnet`: synthesize data, train and evaluate branch networks, run the
//! ablation and render reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use famnet::config::Config;
use famnet::data::{Dataset, Manifest};
use famnet::metrics::{self, RunReport};
use famnet::model::Branch;
use famnet::preprocess::FullFrame;
use famnet::training::{self, ABLATION_ROWS};
use famnet::{synthetic, Error};

const OUTPUT_ROOT_ENV: &str = "FAMNET_OUTPUT_ROOT";
const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "famnet", version, about = "Micro-expression recognition with FAMNet")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config with [data], [synthetic] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$FAMNET_OUTPUT_ROOT/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for both data synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override `section.key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Leave-one-subject-out training of one branch.
    Train(TrainArgs),
    /// Evaluate saved fold checkpoints, optionally fusing both branches.
    Eval(EvalArgs),
    /// Train and tabulate the ablation configurations.
    Ablate(AblateArgs),
    /// Summarise one or more metrics.json files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    per_subject: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (JSON lines); without one a synthetic set is built
    /// in memory from the [synthetic] section.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Drop the hierarchical attention stacks.
    #[arg(long)]
    no_attention: bool,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch learning-rate decay factor.
    #[arg(long)]
    decay: Option<f64>,
    /// Epochs per fold.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Channel multiplier on the ResNet18 widths.
    #[arg(long)]
    width: Option<f64>,
    /// Side length of the network input.
    #[arg(long)]
    image_size: Option<usize>,
    /// Frames sampled per clip for the 3D branch.
    #[arg(long)]
    depth: Option<usize>,
    /// Folds trained concurrently.
    #[arg(long)]
    parallel_folds: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "fused")]
    branch: EvalBranch,
    /// Directory of 2D fold checkpoints.
    #[arg(long)]
    ckpt2d: Option<PathBuf>,
    /// Directory of 3D fold checkpoints.
    #[arg(long)]
    ckpt3d: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Rows to produce (default: all six).
    #[arg(long = "row", value_name = "ROW")]
    rows: Vec<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.json files written by train, eval or ablate.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BranchArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalBranch {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
    Fused,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Single,
    Dual,
}

/// Exit status 1 for bad invocations, 2 for failures while running.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
        Command::Report(_) => "report",
    };
    let out = output_dir(&cli.common, name);
    let mut cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Synth(a) => {
            let mut sets = Vec::new();
            push(&mut sets, "synthetic.n_subjects", a.subjects);
            push(&mut sets, "synthetic.samples_per_subject", a.per_subject);
            push(&mut sets, "synthetic.image_size", a.image_size);
            push(&mut sets, "synthetic.frames", a.frames);
            push(&mut sets, "synthetic.noise", a.noise);
            cfg.apply_overrides(&sets)?;
            cmd_synth(&cfg, &out)
        }
        Command::Train(a) => {
            let mut sets = hyper_overrides(&a.hyper);
            push(&mut sets, "train.branch", a.branch.map(|b| Branch::from(b).to_string()));
            push(&mut sets, "train.task", a.task.map(|t| format!("{t:?}").to_lowercase()));
            if a.no_attention {
                sets.push("train.attention=false".into());
            }
            cfg.apply_overrides(&sets)?;
            set_manifest(&mut cfg, a.data.manifest);
            cmd_train(&cfg, &out)
        }
        Command::Eval(a) => {
            set_manifest(&mut cfg, a.data.manifest);
            cmd_eval(&cfg, &out, a.branch, a.ckpt2d.as_deref(), a.ckpt3d.as_deref())
        }
        Command::Ablate(a) => {
            cfg.apply_overrides(&hyper_overrides(&a.hyper))?;
            set_manifest(&mut cfg, a.data.manifest);
            cmd_ablate(&cfg, &out, &a.rows)
        }
        Command::Report(a) => cmd_report(&a.inputs, cli.common.out.as_deref()),
    }
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::TwoD => Branch::TwoD,
            BranchArg::ThreeD => Branch::ThreeD,
        }
    }
}

fn output_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

fn base_config(common: &Common) -> Result<Config, Failure> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => {
            return Err(Failure::Runtime(anyhow::anyhow!(Error::MissingArtifact(format!(
                "config file {}",
                p.display()
            )))))
        }
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.synthetic.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn push(sets: &mut Vec<String>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        let v = v.to_string();
        // Strings need quoting to survive the TOML-literal parse of overrides.
        let literal = if v.parse::<f64>().is_ok() { v } else { format!("\"{v}\"") };
        sets.push(format!("{key}={literal}"));
    }
}

fn hyper_overrides(h: &HyperArgs) -> Vec<String> {
    let mut sets = Vec::new();
    push(&mut sets, "train.lr", h.lr);
    push(&mut sets, "train.decay", h.decay);
    push(&mut sets, "train.epochs", h.epochs);
    push(&mut sets, "train.batch_size", h.batch_size);
    push(&mut sets, "train.width", h.width);
    push(&mut sets, "train.image_size", h.image_size);
    push(&mut sets, "train.depth", h.depth);
    push(&mut sets, "train.parallel_folds", h.parallel_folds);
    sets
}

fn set_manifest(cfg: &mut Config, manifest: Option<PathBuf>) {
    if manifest.is_some() {
        cfg.data.manifest = manifest;
    }
}

/// Writes the resolved config next to the outputs.
fn prepare_output(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let path = out.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn load_dataset(cfg: &Config) -> anyhow::Result<Dataset> {
    match &cfg.data.manifest {
        Some(path) => {
            if !path.exists() {
                bail!(Error::MissingArtifact(format!("manifest {}", path.display())));
            }
            let manifest = Manifest::load(path)?;
            Ok(Dataset::load(&manifest, &FullFrame)?)
        }
        None => {
            log::info!(
                "no manifest given; generating {} subjects x {} synthetic samples",
                cfg.synthetic.n_subjects,
                cfg.synthetic.samples_per_subject
            );
            Ok(synthetic::generate(&cfg.synthetic)?.dataset)
        }
    }
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<(), Failure> {
    cfg.synthetic.validate().map_err(|e| Failure::Usage(e.into()))?;
    prepare_output(cfg, out)?;
    let set = synthetic::generate(&cfg.synthetic)?;
    let manifest = set.write(out)?;
    println!("{} samples written; manifest {}", set.dataset.samples.len(), manifest.display());
    Ok(())
}

fn write_traces(run: &training::LosoRun, out: &Path) -> anyhow::Result<()> {
    let path = out.join("trace.jsonl");
    let mut text = String::new();
    for f in &run.folds {
        for rec in &f.trace {
            let mut v = serde_json::to_value(rec)?;
            v["fold"] = f.subject.clone().into();
            text.push_str(&v.to_string());
            text.push('\n');
        }
    }
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path) -> Result<(), Failure> {
    cfg.train.validate()?;
    prepare_output(cfg, out)?;
    let dataset = load_dataset(cfg)?;
    let label = format!(
        "{:?}+{}({})",
        cfg.train.task,
        if cfg.train.attention { "HA" } else { "noHA" },
        cfg.train.branch.to_string().to_uppercase()
    );
    let run = training::run_loso(&cfg.train, &dataset, &label, &cfg.hash())?;
    run.save_checkpoints(&dataset, &out.join("checkpoints"))?;
    write_traces(&run, out)?;
    let files = metrics::emit_report(&run.report, out)?;
    println!("{label}: UAR {:.4} UF1 {:.4} ({})", run.report.uar(), run.report.uf1(), files.metrics.display());
    Ok(())
}

fn cmd_eval(cfg: &Config, out: &Path, branch: EvalBranch, ckpt2d: Option<&Path>, ckpt3d: Option<&Path>) -> Result<(), Failure> {
    let need = |dir: Option<&Path>, flag: &str| -> Result<PathBuf, Failure> {
        let dir = dir.ok_or_else(|| Failure::Usage(anyhow::anyhow!("--{flag} is required for this branch")))?;
        if !dir.is_dir() {
            return Err(Error::MissingArtifact(format!("checkpoint directory {}", dir.display())).into());
        }
        Ok(dir.to_path_buf())
    };
    let (dirs, label) = match branch {
        EvalBranch::TwoD => (vec![need(ckpt2d, "ckpt2d")?], "2D"),
        EvalBranch::ThreeD => (vec![need(ckpt3d, "ckpt3d")?], "3D"),
        EvalBranch::Fused => (vec![need(ckpt2d, "ckpt2d")?, need(ckpt3d, "ckpt3d")?], "FAMNet"),
    };
    prepare_output(cfg, out)?;
    let dataset = load_dataset(cfg)?;
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    let report = training::evaluate_checkpoints(&refs, &dataset, label, &cfg.hash())?;
    let files = metrics::emit_report(&report, out)?;
    println!("{label}: UAR {:.4} UF1 {:.4} ({})", report.uar(), report.uf1(), files.metrics.display());
    Ok(())
}

fn cmd_ablate(cfg: &Config, out: &Path, rows: &[String]) -> Result<(), Failure> {
    cfg.train.validate()?;
    if let Some(bad) = rows.iter().find(|r| !ABLATION_ROWS.contains(&r.as_str())) {
        return Err(Failure::Usage(anyhow::anyhow!(
            "unknown ablation row `{bad}` (expected one of {})",
            ABLATION_ROWS.join(", ")
        )));
    }
    prepare_output(cfg, out)?;
    let dataset = load_dataset(cfg)?;
    let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
    let ablation = training::run_ablation(&cfg.train, &dataset, &rows, &cfg.hash())?;
    for (row, report) in &ablation.rows {
        metrics::emit_report(report, &out.join(row_dir(row)))?;
    }
    let table = ablation.table();
    let path = out.join("ablation.md");
    fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{table}");
    Ok(())
}

/// `Dual+HA(2D)` becomes `dual_ha_2d`.
fn row_dir(row: &str) -> String {
    let mut s = String::new();
    for c in row.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') && !s.is_empty() {
            s.push('_');
        }
    }
    s.trim_end_matches('_').to_string()
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for path in inputs {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("metrics file {}", path.display())).into());
        }
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let report: RunReport =
            serde_json::from_str(&text).with_context(|| format!("{} is not a metrics report", path.display()))?;
        reports.push(report);
    }
    let mut table = format!("| {:<14} | {:<10} | {:>6} | {:>6} | {:>5} |\n", "Method", "Dataset", "UAR", "UF1", "Folds");
    table.push_str("|----------------|------------|--------|--------|-------|\n");
    for r in &reports {
        table.push_str(&format!(
            "| {:<14} | {:<10} | {:>6.4} | {:>6.4} | {:>5} |\n",
            r.label,
            r.dataset,
            r.uar(),
            r.uf1(),
            r.folds.len()
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("report.md"), &table).with_context(|| format!("cannot write into {}", dir.display()))?;
        if let [single] = reports.as_slice() {
            metrics::emit_report(single, dir)?;
        }
    }
    print!("{table}");
    Ok(())
}
