//! `smoothcert`: train, attack, certify, and bound smoothed classifiers from
//! the command line.
//!
//! Every subcommand reads a flat key/value config file (`--config`), applies
//! `--set key=value` overlays, writes its CSV artifacts and a JSON manifest
//! into the run directory, and is deterministic given (config, seed) — for
//! any `--threads` value.

mod commands;
mod config;
mod manifest;
mod schema;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{
    cmd_attack, cmd_bound, cmd_certify, cmd_gen_data, cmd_schema_check, cmd_train, cmd_transfer,
    cmd_verify, CliError, Ctx,
};
use config::RunConfig;

/// Environment variable naming the default output root (used when `--out` is
/// absent; the run directory is then `<root>/<subcommand>`).
const OUT_ROOT_ENV: &str = "SMOOTHCERT_OUT";

#[derive(Parser)]
#[command(
    name = "smoothcert",
    version,
    about = "Noise-averaged adversarial training, distributional robustness certificates, and smoothed-classifier certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key/value config file (`key = value` lines, `#` comments).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable; highest precedence.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run directory for artifacts (default: $SMOOTHCERT_OUT/<subcommand> or
    /// runs/<subcommand>). schema-check reads this directory instead.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Base RNG seed (overrides the config file's `seed`; `--set seed=` wins).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads (overrides the config file's `threads`).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the configured dataset and write train/test CSVs.
    GenData,
    /// Train a model, evaluate it, and save model/history/eval artifacts.
    Train,
    /// Sweep attack radii against a saved model.
    Attack,
    /// Certify a saved model's predictions and write the radius curve.
    Certify,
    /// Compute distributional-robustness certificate curves for a saved model.
    Bound,
    /// Train several methods and cross-evaluate transferred attacks.
    Transfer,
    /// Run the numerical verification suite (quick or full).
    Verify,
    /// Validate every artifact in a run directory against its schema.
    SchemaCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Certify => "certify",
            Command::Bound => "bound",
            Command::Transfer => "transfer",
            Command::Verify => "verify",
            Command::SchemaCheck => "schema-check",
        }
    }
}

fn resolve_out(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
    PathBuf::from(root).join(cli.command.name())
}

/// Flags override file values; `--set` overrides flags.
fn resolve_scalar(
    cfg: &RunConfig,
    sets: &[String],
    key: &str,
    flag: Option<u64>,
    default: u64,
) -> Result<u64, CliError> {
    let from_set = sets.iter().any(|s| {
        s.split_once('=').map(|(k, _)| k.trim() == key).unwrap_or(false)
    });
    if from_set {
        Ok(cfg.u64_or(key, default)?)
    } else if let Some(v) = flag {
        Ok(v)
    } else {
        Ok(cfg.u64_or(key, default)?)
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let seed = resolve_scalar(&cfg, &cli.set, "seed", cli.seed, 0)?;
    let default_threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let threads = resolve_scalar(
        &cfg,
        &cli.set,
        "threads",
        cli.threads.map(|t| t as u64),
        default_threads as u64,
    )? as usize;
    if threads == 0 {
        return Err(CliError::Usage("threads must be >= 1".into()));
    }
    // Size the shared worker pool once, up front. Results are identical for
    // every pool size; this only controls parallelism.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let out = resolve_out(cli);
    if !matches!(cli.command, Command::SchemaCheck) {
        std::fs::create_dir_all(&out)?;
    }
    let ctx = Ctx { cfg, out, seed, threads };
    match cli.command {
        Command::GenData => cmd_gen_data(&ctx).map(|()| true),
        Command::Train => cmd_train(&ctx).map(|()| true),
        Command::Attack => cmd_attack(&ctx).map(|()| true),
        Command::Certify => cmd_certify(&ctx).map(|()| true),
        Command::Bound => cmd_bound(&ctx).map(|()| true),
        Command::Transfer => cmd_transfer(&ctx).map(|()| true),
        Command::Verify => cmd_verify(&ctx),
        Command::SchemaCheck => cmd_schema_check(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
