use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod common;
mod manifest;

use common::{Ctx, NumericFailure, UsageError};

/// Flow subspace toolkit: analytic motion bases, projection losses,
/// synthetic scenes and visualizations.
#[derive(Debug, Parser)]
#[command(name = "flowspan", version)]
struct Cli {
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress the human-readable report on stdout.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a motion basis and write it as a stack of .flo files.
    Basis(cmd::basis::Args),
    /// Project a flow onto a basis and report the reconstruction loss.
    Project(cmd::project::Args),
    /// Render a synthetic scene with exact and instantaneous flow.
    Synth(cmd::synth::Args),
    /// Recover camera motion, focal length and object motion from a flow.
    Analyze(cmd::analyze::Args),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(cmd::gradcheck::Args),
    /// Evaluate predicted depth against ground truth.
    Metrics(cmd::metrics::Args),
    /// Label pixels by their nearest seed in bilateral embedding space.
    Segment(cmd::segment::Args),
    /// Render flow, embeddings or scalar maps as PNG.
    Colorize(cmd::colorize::Args),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<flowspan::Error>() {
        Some(
            flowspan::Error::SvdNonConvergence
            | flowspan::Error::NearThresholdSingularValue { .. }
            | flowspan::Error::Io(_)
            | flowspan::Error::Json(_)
            | flowspan::Error::Image(_),
        ) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        threads: cli.threads,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::Basis(a) => cmd::basis::run(&ctx, a),
        Command::Project(a) => cmd::project::run(&ctx, a),
        Command::Synth(a) => cmd::synth::run(&ctx, a),
        Command::Analyze(a) => cmd::analyze::run(&ctx, a),
        Command::Gradcheck(a) => cmd::gradcheck::run(&ctx, a),
        Command::Metrics(a) => cmd::metrics::run(&ctx, a),
        Command::Segment(a) => cmd::segment::run(&ctx, a),
        Command::Colorize(a) => cmd::colorize::run(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
