use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ibflow::experiments::{run_and_write, ExperimentConfig, ExperimentKind, Via};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    Solve,
    Sweep,
    Contour,
    Compare,
    Verify,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViaArg {
    Flow,
    Solver,
}

/// Gradient-flow implicit-bias experiments.
#[derive(Debug, Parser)]
#[command(name = "ibflow", version)]
struct Cli {
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    via: Option<ViaArg>,
    /// Use N = 100, d = 1000.
    #[arg(long)]
    paper_scale: bool,
    /// Overrides both the config seed and the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn configure(cli: &Cli) -> ibflow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    cfg.kind = match cli.command {
        Command::Simulate => ExperimentKind::Simulate,
        Command::Solve => ExperimentKind::Solve,
        Command::Sweep => ExperimentKind::Sweep,
        Command::Contour => ExperimentKind::Contour,
        Command::Compare => ExperimentKind::Compare,
        Command::Verify => ExperimentKind::Verify,
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(v) = cli.via {
        cfg.via = match v {
            ViaArg::Flow => Via::Flow,
            ViaArg::Solver => Via::Solver,
        };
    }
    if cli.paper_scale {
        cfg.paper_scale();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure(&cli).and_then(|cfg| run_and_write(&cfg).map(|ok| (ok, cfg)));
    match result {
        Ok((true, cfg)) => {
            eprintln!("ok: outputs in {}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Ok((false, cfg)) => {
            eprintln!("some checks failed; see {}", cfg.out.display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
