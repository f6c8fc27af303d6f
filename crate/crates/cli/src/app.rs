//! Argument handling, logging and the error JSON contract.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dekrr_core::BaselineKind;
use serde_json::json;

use crate::config::{config_hash, parse_config, ConfigError};
use crate::runner::{execute, load_dataset, prepare_output, verify, write_outputs, RunError};

/// Decentralized kernel ridge regression experiments
#[derive(Parser, Debug)]
#[command(name = "dekrr", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run every configured method for every seed
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline for each mean feature count and aggregate over seeds
    Sweep {
        config: PathBuf,
        /// Mean features per node, e.g. 10,20,40
        #[arg(long, value_delimiter = ',', required = true)]
        dbar: Vec<usize>,
        /// Methods to compare (defaults to the config's list)
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<BaselineKind>>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the config hash of an output directory and check every file
    Verify { dir: PathBuf },
}

#[derive(clap::Args, Debug)]
pub struct Common {
    /// Added to every configured seed
    #[arg(long, default_value_t = 0)]
    pub seed_offset: u64,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    pub force: bool,
    /// Output directory (overrides the config's `output`)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Run(RunError),
}

impl Failure {
    /// Machine-readable description written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Config(e) => json!({"error": {
                "kind": "config",
                "message": e.to_string(),
                "key": e.key(),
                "lines": e.lines(),
            }}),
            Failure::Run(e) => {
                let (kind, extra) = match e {
                    RunError::Output(_) => ("output", json!({})),
                    RunError::Io { path, .. } => ("io", json!({"path": path})),
                    RunError::Core(_) => ("numerical", json!({})),
                    RunError::Seed { dbar, seed, .. } => ("numerical", json!({"dbar": dbar, "seed": seed})),
                    RunError::Verify(p) => ("verify", json!({"problems": p})),
                };
                let mut v = json!({"kind": kind, "message": e.to_string()});
                if let (Some(obj), Some(more)) = (v.as_object_mut(), extra.as_object()) {
                    obj.extend(more.clone());
                }
                json!({ "error": v })
            }
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Run(e)
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json());
            1
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, common } => experiment(&config, &common, None, None),
        Command::Sweep {
            config,
            dbar,
            methods,
            common,
        } => experiment(&config, &common, Some(dbar), methods),
        Command::Verify { dir } => {
            let m = verify(&dir)?;
            println!("{}", json!({"verified": m.files.len() + 1, "config_hash": m.config_hash}));
            Ok(())
        }
    }
}

fn experiment(path: &PathBuf, common: &Common, dbars: Option<Vec<usize>>, methods: Option<Vec<BaselineKind>>) -> Result<(), Failure> {
    let parsed = parse_config(path)?;
    for (key, value) in &parsed.defaults {
        eprintln!("default {key} = {value}");
    }
    let mut cfg = parsed.config;
    if let Some(m) = methods {
        cfg.methods = m;
    }
    if common.seed_offset > 0 {
        cfg.seeds = cfg.seeds.iter().map(|s| s + common.seed_offset).collect();
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    let sweep = dbars.is_some();
    let dbars = dbars.unwrap_or_else(|| vec![cfg.dbar()]);
    if dbars.contains(&0) {
        return Err(ConfigError::Invalid {
            key: "dbar".into(),
            message: "must be at least 1".into(),
        }
        .into());
    }
    prepare_output(&cfg.output, common.force)?;
    eprintln!("config_hash {}", config_hash(&cfg, &dbars));
    let (ds, digest) = load_dataset(&cfg)?;
    let rows = execute(&ds, &cfg, &dbars)?;
    let command = if sweep { "sweep" } else { "run" };
    let manifest = write_outputs(&cfg.output, command, &cfg, digest, dbars, &rows, sweep)?;
    eprintln!("wrote {} files to {}", manifest.files.len() + 1, cfg.output.display());
    Ok(())
}
