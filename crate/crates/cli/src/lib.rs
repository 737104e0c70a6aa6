//! Experiment harness: config parsing, manifests, and the verb pipeline.
//! The binary is a thin argument parser over `pipeline`; tests drive the
//! same functions in-process.

pub mod config;
pub mod manifest;
pub mod pipeline;

use anyhow::Result;
use pipeline::RunContext;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Collect,
    TrainDiffusion,
    TrainBcq,
    Evaluate,
    Oracle,
    Stats,
    Trace,
    Sample,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Collect => "collect",
            Verb::TrainDiffusion => "train-diffusion",
            Verb::TrainBcq => "train-bcq",
            Verb::Evaluate => "evaluate",
            Verb::Oracle => "oracle",
            Verb::Stats => "stats",
            Verb::Trace => "trace",
            Verb::Sample => "sample",
        }
    }
}

/// Runs one verb against a config, writing artifacts and a manifest into
/// `out_dir`. Returns the manifest.
pub fn run_verb(verb: Verb, config_path: &Path, out_dir: &Path) -> Result<manifest::Manifest> {
    let ctx = RunContext::load(config_path, out_dir)?;
    match verb {
        Verb::Collect => pipeline::cmd_collect(&ctx),
        Verb::TrainDiffusion => pipeline::cmd_train_diffusion(&ctx),
        Verb::TrainBcq => pipeline::cmd_train_bcq(&ctx),
        Verb::Evaluate => pipeline::cmd_evaluate(&ctx),
        Verb::Oracle => pipeline::cmd_oracle(&ctx),
        Verb::Stats => pipeline::cmd_stats(&ctx),
        Verb::Trace => pipeline::cmd_trace(&ctx),
        Verb::Sample => pipeline::cmd_sample(&ctx),
    }
}
