//! `lethe` — train a small CNN through two-task continual-learning sequences
//! and attribute the forgetting of the first task to individual parameters.

mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lethe_core::attribution::{
    run_with_attribution, PathIntegralConfig, Quadrature, RunReport, TrackingWindow, TrainConfig,
};
use lethe_core::data::{
    build_sequence, default_cache_dir, fetch_dataset, ScenarioKind, ScenarioSpec, Source,
};
use lethe_core::optim::AdamParams;
use lethe_core::report::{run_stats, to_csv, to_json, FigureMode, MultiRunStats};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "lethe",
    version,
    about = "Per-parameter attribution of catastrophic forgetting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through a two-task scenario and write attribution reports.
    Run(RunArgs),
    /// Aggregate saved runs into CSV, JSON, or an SVG figure.
    Report(ReportArgs),
    /// Self-checks: gradient oracle, quadrature exactness and convergence.
    Verify(VerifyArgs),
    /// Download datasets into the local cache.
    Fetch(FetchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario: itl, idl-permute, idl-invert, or icl.
    #[arg(long)]
    scenario: ScenarioKind,
    /// Base seed; run i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of runs (seeds) to execute.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Quadrature rule: left or trapezoid.
    #[arg(long, default_value = "trapezoid")]
    quadrature: Quadrature,
    /// Quadrature sub-intervals per optimizer step.
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    /// Examples the first task's loss is evaluated on.
    #[arg(long, default_value_t = 1024)]
    eval_size: usize,
    /// Tracking window: full or first-epoch.
    #[arg(long, default_value = "full")]
    window: TrackingWindow,
    /// Dataset cache directory (defaults to the fetch cache).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for reports (default runs/<scenario>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding run_*.json files from `lethe run`.
    #[arg(long = "in")]
    in_dir: PathBuf,
    /// Output format: csv, json, or svg.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Aggregate for svg: sum or mean (per element).
    #[arg(long, default_value = "sum")]
    mode: FigureMode,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Check analytic gradients against central finite differences.
    #[arg(long)]
    gradients: bool,
    /// Check trapezoid attribution is exact on a quadratic loss.
    #[arg(long)]
    quadratic_oracle: bool,
    /// Check attribution error shrinks as substeps grow, on the real model.
    #[arg(long)]
    quadrature_convergence: bool,
}

#[derive(Args)]
struct FetchArgs {
    /// mnist or fashion-mnist (both when omitted).
    #[arg(long)]
    source: Option<Source>,
    /// Mirror URL, file:// URL, or local directory.
    #[arg(long)]
    mirror: Option<String>,
    /// Cache directory (default: $LETHE_DATA_DIR or ~/.cache/lethe).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

/// Everything needed to reproduce the runs in an output directory.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    scenario: ScenarioSpec,
    seeds: Vec<u64>,
    train: TrainConfig,
    path: PathIntegralConfig,
    data_dir: PathBuf,
    run_files: Vec<String>,
    stats_file: String,
    created_unix: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Verify(args) => verify::cmd_verify(args),
        Command::Fetch(args) => cmd_fetch(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let data_dir = args.data_dir.unwrap_or_else(default_cache_dir);
    let spec = ScenarioSpec::new(args.scenario, args.seed);
    for source in spec.sources() {
        // Reuses structurally valid cached files; downloads the rest.
        fetch_dataset(source, source.default_mirror(), &data_dir)
            .with_context(|| format!("fetching {source}"))?;
    }
    let sequence = build_sequence(&spec, &data_dir)?;
    println!(
        "scenario {}: task A = {}, task B = {}",
        args.scenario, sequence.tasks[0].name, sequence.tasks[1].name
    );

    let train = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamParams::with_lr(args.lr),
        window: args.window,
    };
    let path = PathIntegralConfig {
        quadrature: args.quadrature,
        substeps: args.substeps,
        eval_set_size: args.eval_size,
        eval_set_seed: 0,
    };

    let out_dir = args
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(args.scenario.to_string()));
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let mut reports = Vec::with_capacity(args.runs);
    let mut run_files = Vec::with_capacity(args.runs);
    let mut seeds = Vec::with_capacity(args.runs);
    for i in 0..args.runs {
        let seed = args.seed + i as u64;
        let (_, report) = run_with_attribution(&sequence, &train, &path, seed)?;
        let att = &report.attribution;
        println!(
            "run {i} (seed {seed}): loss {:.6} -> {:.6}, exact dL {:+.6}, \
             attributed {:+.6}, rel err {:.2e}",
            att.loss_start, att.loss_end, att.exact_delta, att.approx_delta, att.relative_error
        );
        let file = format!("run_{i:03}.json");
        write_json(&out_dir.join(&file), &report)?;
        run_files.push(file);
        seeds.push(seed);
        reports.push(report);
    }

    let stats = run_stats(&reports)?;
    fs::write(out_dir.join("stats.json"), to_json(&stats)?)
        .with_context(|| format!("writing {}", out_dir.join("stats.json").display()))?;

    let manifest = RunManifest {
        scenario: spec,
        seeds,
        train,
        path,
        data_dir,
        run_files,
        stats_file: "stats.json".into(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!("wrote {} run(s) to {}", args.runs, out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Load every run_*.json in the directory, in filename order.
fn load_runs(dir: &Path) -> Result<Vec<RunReport>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no run_*.json files in {}", dir.display());
    }
    files
        .iter()
        .map(|p| {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let runs = load_runs(&args.in_dir)?;
    let stats: MultiRunStats = run_stats(&runs)?;
    let rendered = match args.format.as_str() {
        "csv" => to_csv(&stats),
        "json" => to_json(&stats)?,
        "svg" => lethe_core::figure::render_figure(&stats, args.mode)?,
        other => bail!("unknown format {other:?}; expected csv, json, or svg"),
    };
    match args.out {
        Some(path) => {
            fs::write(&path, rendered)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fetch(args: FetchArgs) -> Result<ExitCode> {
    let cache_dir = args.cache_dir.unwrap_or_else(default_cache_dir);
    let sources = match args.source {
        Some(s) => vec![s],
        None => vec![Source::Mnist, Source::FashionMnist],
    };
    for source in sources {
        let mirror = args
            .mirror
            .clone()
            .unwrap_or_else(|| source.default_mirror().to_string());
        let files = fetch_dataset(source, &mirror, &cache_dir)?;
        println!("{source}: cached under {}", cache_dir.join(source.dir_name()).display());
        for path in files.all() {
            println!("  {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
