use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use episodic_control::analysis::{self, SIMILARITY};
use episodic_control::checkpoint::Checkpoint;
use episodic_control::harness::{self, AggregateRow};
use episodic_control::{parallel, plot, CellName, Preset, RunConfig};

#[derive(Parser)]
#[command(
    name = "epctl",
    version,
    about = "Episodic control experiments on water-maze tasks"
)]
struct Cli {
    /// Worker threads (overrides the EPCTL_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured condition for every seed.
    Run(RunArgs),
    /// Representational analysis of a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Render learning curves and similarity heatmaps as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; preset defaults fill in missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to start from.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seed list, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment to run when the config does not set one.
    #[arg(long)]
    experiment: Option<u8>,
    /// Restrict to these condition cells.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<CellName>>,
    /// Override the episode budget.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint written by `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// When given, the checkpoint must have been trained under this config.
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probe mazes per goal.
    #[arg(long)]
    probe_mazes: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// A `run` output directory or an aggregate CSV file.
    #[arg(long)]
    input: PathBuf,
    /// Where to write SVG files (defaults to `<input>/plots`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
        .map_err(|e: episodic_control::Error| e.to_string())
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    match &args.config {
        Some(path) => Ok(RunConfig::load(path, args.preset)?),
        None => Ok(RunConfig::preset(args.preset.unwrap_or(Preset::Desk))),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(e) = args.experiment {
        cfg.experiment = e;
        cfg.conditions.clear();
    }
    if let Some(c) = args.conditions {
        if let (None, Some(first)) = (args.experiment, c.first()) {
            cfg.experiment = first.condition().experiment;
        }
        cfg.conditions = c;
    }
    if let Some(n) = args.episodes {
        cfg.harness.episodes = n;
    }
    cfg.validate()?;
    log::info!("resolved config:\n{}", cfg.to_toml_string());
    let report = harness::run_experiment(&cfg)?;
    for (cell, seed, msg) in &report.failed {
        eprintln!("run {cell}/{seed} failed: {msg}");
    }
    for row in &report.summary {
        println!(
            "{}/{}: explore excess {:.3}, exploit excess {:.3}",
            row.condition, row.seed, row.explore_excess, row.exploit_excess
        );
    }
    if report.completed.is_empty() {
        bail!("no run completed");
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let ck = if args.config.config.is_some() {
        let expected = load_config(&args.config)?;
        Checkpoint::load_matching(&args.checkpoint, &expected)?
    } else {
        Checkpoint::load(&args.checkpoint)?
    };
    let out = match args.out {
        Some(o) => o,
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let probes = args.probe_mazes.unwrap_or(ck.config.harness.probe_mazes);
    let reps = analysis::collect_representations(&ck, probes)?;
    let header = format!("{}# similarity: {SIMILARITY}\n", ck.config.header_comment());
    analysis::write_representations(&out.join("representations.csv"), &header, &reps)?;
    let q: Vec<_> = reps.iter().map(|r| r.query.clone()).collect();
    let k: Vec<_> = reps.iter().map(|r| r.key.clone()).collect();
    let v: Vec<_> = reps.iter().map(|r| r.value.clone()).collect();
    for (name, a, b) in [
        ("qk", &q, &k),
        ("qq", &q, &q),
        ("kk", &k, &k),
        ("vv", &v, &v),
    ] {
        let m = analysis::similarity_matrix(a, b);
        analysis::write_matrix(&out.join(format!("similarity_{name}.csv")), &header, &m)?;
        let svg = plot::heatmap(&format!("{} {name} ({SIMILARITY})", ck.cell), &m);
        std::fs::write(out.join(format!("similarity_{name}.svg")), svg)?;
    }
    let summary = analysis::alignment_scores(&reps);
    analysis::write_summary(
        &out.join("summary.csv"),
        &ck.config.header_comment(),
        &summary,
    )?;
    for g in &summary.goals {
        println!(
            "goal {}: matched {:.3}, mismatched {:.3}, margin {:.3} +- {:.3}",
            g.goal + 1,
            g.matched,
            g.mismatched,
            g.margin,
            g.margin_sem
        );
    }
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> Result<()> {
    let (rows, base): (Vec<AggregateRow>, PathBuf) = if args.input.is_dir() {
        let agg = args.input.join("aggregate.csv");
        if !agg.exists() {
            bail!(
                "{} has no aggregate.csv; is it a `run` output directory?",
                args.input.display()
            );
        }
        (harness::read_aggregate(&agg)?, args.input.clone())
    } else {
        let parent = args
            .input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        (harness::read_aggregate(&args.input)?, parent)
    };
    let out = args.out.unwrap_or_else(|| base.join("plots"));
    for path in plot::plot_aggregate(&rows, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = parallel::configure_threads(cli.threads);
    log::debug!("{threads} worker thread(s)");
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
