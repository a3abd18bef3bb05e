use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use blocksona::experiment::{
    consensus_demo, run_experiment, sweep_blocks, validate_experiment, write_run, write_sweep,
    ConsensusDemoOptions, ExperimentConfig, ScheduleKind,
};
use clap::{Parser, Subcommand};

/// Block-iterative distributed optimization simulator.
#[derive(Debug, Parser)]
#[command(name = "blocksona", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv and meta.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per block count and write a summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        blocks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pure block consensus on a random graph, without optimization.
    ConsensusDemo {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "shifted-round-robin")]
        schedule: ScheduleKind,
        #[arg(long, default_value_t = 0.3)]
        graph_p: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Directory for consensus.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check config invariants and the structural conditions of the network
    /// and schedule; exits nonzero on any violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    let output = run_experiment(&cfg)?;
    write_run(&dir, &output)?;
    let last = output.log.last().context("empty trace")?;
    println!(
        "{} iterations, J = {:e}, D = {:e}, written to {}",
        last.t,
        last.stationarity,
        last.disagreement,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn sweep(config: &Path, blocks: &[usize], out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    let output = sweep_blocks(&cfg, blocks)?;
    write_sweep(&dir, &output)?;
    for row in &output.summary {
        match (row.t_end, row.t_end_norm) {
            (Some(t), Some(norm)) => println!("B = {}: t_end = {t}, t_end/B = {norm:.2}", row.blocks),
            _ => println!("B = {}: tolerance not reached", row.blocks),
        }
    }
    println!("written to {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn demo(options: ConsensusDemoOptions, out: Option<PathBuf>) -> Result<ExitCode> {
    let demo = consensus_demo(&options)?;
    let last = demo.deviation.last().copied().unwrap_or(0.0);
    println!(
        "{} iterations, max deviation {last:e}, fitted rate {:.4}",
        demo.deviation.len() - 1,
        demo.decay.rho
    );
    if let Some(dir) = out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("consensus.csv");
        fs::write(&path, demo.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(config: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let checks = validate_experiment(&cfg)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BLOCKSONA_LOG", "warn")).init();
    let cli = Cli::parse();
    log::debug!("{cli:?}");
    dispatch(cli).unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => run(&config, out),
        Command::Sweep { config, blocks, out } => sweep(&config, &blocks, out),
        Command::ConsensusDemo { n, blocks, seed, schedule, graph_p, tol, out } => demo(
            ConsensusDemoOptions { agents: n, blocks, schedule, graph_p, seed, tolerance: tol, ..Default::default() },
            out,
        ),
        Command::Validate { config } => validate(&config),
    }
}
