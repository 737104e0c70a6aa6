use anyhow::Result;
use clap::{Parser, Subcommand};
use diffalloc_cli::{run_verb, Verb};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "diffalloc",
    about = "Two-stage power-allocation toolkit: online collection, \
             offline diffusion planning, baselines, and evaluation tables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// Run directory for artifacts and manifests
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the online agent and export the labeled trajectory dataset
    Collect(CommonArgs),
    /// Train the conditional trajectory diffusion model on the dataset
    TrainDiffusion(CommonArgs),
    /// Train the offline Q-learning baseline on the dataset
    TrainBcq(CommonArgs),
    /// Produce comparison and convergence tables over trained methods
    Evaluate(CommonArgs),
    /// Compute the optimal allocation per scenario
    Oracle(CommonArgs),
    /// Report dataset quality metrics
    Stats(CommonArgs),
    /// Execute one generated plan and emit its walk (plus 2-user surface)
    Trace(CommonArgs),
    /// Emit generated plans and the first plan's denoising trace
    Sample(CommonArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (verb, args) = match &cli.command {
        Command::Collect(a) => (Verb::Collect, a),
        Command::TrainDiffusion(a) => (Verb::TrainDiffusion, a),
        Command::TrainBcq(a) => (Verb::TrainBcq, a),
        Command::Evaluate(a) => (Verb::Evaluate, a),
        Command::Oracle(a) => (Verb::Oracle, a),
        Command::Stats(a) => (Verb::Stats, a),
        Command::Trace(a) => (Verb::Trace, a),
        Command::Sample(a) => (Verb::Sample, a),
    };
    let manifest = run_verb(verb, &args.config, &args.out)?;
    println!(
        "{}: wrote {} artifact(s) to {}",
        verb.name(),
        manifest.outputs.len(),
        args.out.display()
    );
    for (name, value) in &manifest.metrics {
        println!("  {name} = {value}");
    }
    Ok(())
}
