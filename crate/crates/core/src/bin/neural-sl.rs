use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use neural_sl::experiment::{load_config, run_command, Command, Experiment, Overrides, Preset};
use neural_sl::render::WeightMode;
use neural_sl::Error;

/// Structured-light depth from a neural signed distance field, with Gray
/// code and phase-shift baselines. Output goes to `--out`, or to a run
/// directory under `$NEURAL_SL_OUT` (default `./runs`).
#[derive(Parser)]
#[command(name = "neural-sl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    weight_mode: Option<ModeArg>,
    /// Number of projected patterns.
    #[arg(long, global = true)]
    patterns: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write the configured pattern set and its manifest.
    GenPatterns,
    /// Render captures, contrast maps and true depth.
    Simulate,
    /// Fit the network to the captures.
    Train,
    /// Extract depth from the trained network.
    Extract,
    /// Score a depth map against the simulator.
    Eval,
    /// Gray code baseline on the same pattern budget.
    DecodeGc,
    /// Gray code plus phase shifting reference depth.
    DecodePs,
    /// Neural and Gray code error against the pattern count.
    Sweep,
    /// Training with patterns added during the run.
    Incremental,
}

#[derive(ValueEnum, Clone, Copy)]
enum ModeArg {
    Eq3,
    Alpha,
}

#[derive(ValueEnum, Clone, Copy)]
enum PresetArg {
    Desk,
    Paper,
}

fn run(cli: Cli) -> neural_sl::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let overrides = Overrides {
        preset: cli.preset.map(|p| match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }),
        seed: cli.seed,
        out: cli.out,
        weight_mode: cli.weight_mode.map(|m| match m {
            ModeArg::Eq3 => WeightMode::Eq3,
            ModeArg::Alpha => WeightMode::Alpha,
        }),
        patterns: cli.patterns,
    };
    let config = load_config(cli.config.as_deref(), &overrides)?;
    let exp = Experiment::new(config)?;
    let command = match cli.command {
        Cmd::GenPatterns => Command::GenPatterns,
        Cmd::Simulate => Command::Simulate,
        Cmd::Train => Command::Train,
        Cmd::Extract => Command::Extract,
        Cmd::Eval => Command::Eval,
        Cmd::DecodeGc => Command::DecodeGc,
        Cmd::DecodePs => Command::DecodePs,
        Cmd::Sweep => Command::Sweep,
        Cmd::Incremental => Command::Incremental,
    };
    let dir = run_command(command, &exp, &mut std::io::stderr())?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
