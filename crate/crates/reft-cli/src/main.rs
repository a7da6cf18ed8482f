//! `reft-sim`: plan, simulate, and drill in-memory checkpoint protection
//! for hybrid-parallel training jobs.

mod analyze;
mod codec;
mod common;
mod drill;
mod simulate;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "reft-sim", version, about = "Snapshot scheduling and recovery toolkit")]
struct Cli {
    /// Configuration file (sectioned `key = value`; every key has a default).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration value; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    /// Seed for everything sampled (failure scripts, drill payloads).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the discrete-event simulation and report snapshot overhead.
    Simulate(simulate::SimulateArgs),
    /// Survival curves, threshold crossings, and interval planning.
    Analyze(analyze::AnalyzeArgs),
    /// Populate host buffers, lose nodes, and verify recovery bitwise.
    RecoverDrill(drill::DrillArgs),
    /// Exercise the redundancy codecs on one synthetic group.
    Codec(codec::CodecArgs),
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    let cfg = common::load_config(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Simulate(args) => simulate::run(&cfg, cli.seed, &args),
        Cmd::Analyze(args) => analyze::run(&cfg, &args),
        Cmd::RecoverDrill(args) => drill::run(&cfg, cli.seed, &args),
        Cmd::Codec(args) => codec::run(&cfg, cli.seed, &args),
    }
}
