mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ConfigError, Layer, RunConfig, PROVIDER_URL_ENV};
use fragtide_core::curriculum::CurriculumError;
use fragtide_core::dialogue::LoadError;
use fragtide_core::embeddings::EmbeddingError;
use fragtide_core::metrics::MetricsError;
use fragtide_core::pipeline::PipelineError;
use fragtide_core::rewards::RewardError;

#[derive(Debug, Parser)]
#[command(name = "fragtide", version, about = "Fragment retrieval rewards, metrics, curriculum and corpus tools")]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set reward.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Embedding provider: `synthetic[:SEED[:DIM]]`, `file:PATH` or an http(s) URL.
    #[arg(long, global = true)]
    provider: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score candidate outputs and compute group advantages.
    Reward(commands::reward::Args),
    /// Evaluate predictions against tasks.
    Evaluate(commands::evaluate::Args),
    /// Bucket tasks by difficulty and build a training schedule.
    Curriculum(commands::curriculum::Args),
    /// Embedding-similarity baseline with a threshold sweep.
    Baseline(commands::baseline::Args),
    /// Corpus construction steps.
    #[command(subcommand)]
    Pipeline(commands::pipeline::Command),
    /// Merge per-window predictions into per-task predictions.
    Windows(commands::windows::Args),
    /// Render dialogue contexts, whole or windowed.
    Render(commands::render::Args),
}

/// Errors caused by inputs or usage rather than by the tool itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// Settings shared by all commands.
pub struct Context {
    pub cfg: RunConfig,
}

impl Context {
    pub fn meta(&self, command: &str, args: &impl serde::Serialize) -> output::Meta {
        let args = serde_json::to_string(args).expect("arguments serialize");
        output::Meta::new(command, self.cfg.hash(&args))
    }

    pub fn provider(&self, command: &str) -> Result<std::sync::Arc<dyn fragtide_core::embeddings::EmbeddingProvider>> {
        let p = self
            .cfg
            .provider
            .as_ref()
            .ok_or_else(|| input_error(format!("{command} needs an embedding provider (--provider)")))?;
        Ok(p.build()?)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let file = match &cli.config {
        Some(p) => Layer::load(p)?,
        None => Layer::default(),
    };
    let mut flags = Layer::default();
    for pair in &cli.set {
        flags.set_pair(pair)?;
    }
    if let Some(p) = &cli.provider {
        config::provider_flag(p, &mut flags)?;
    }
    if let Some(s) = cli.seed {
        flags.set("seed", s)?;
    }
    if let Some(n) = cli.parallelism {
        flags.set("parallelism", n)?;
    }
    match &cli.command {
        Command::Reward(a) => a.overrides(&mut flags)?,
        Command::Windows(a) => a.overrides(&mut flags)?,
        _ => {}
    }
    let env_url = std::env::var(PROVIDER_URL_ENV).ok();
    RunConfig::resolve(&file, env_url.as_deref(), &flags)
}

/// 2 for bad input or usage, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let input = cause.is::<InputError>()
            || cause.is::<ConfigError>()
            || cause.is::<LoadError>()
            || cause.is::<CurriculumError>()
            || cause.is::<MetricsError>()
            || matches!(
                cause.downcast_ref::<PipelineError>(),
                Some(PipelineError::InvalidConfig(_) | PipelineError::UnknownDialogue(_))
            )
            || matches!(cause.downcast_ref::<RewardError>(), Some(RewardError::InvalidConfig(_)))
            || matches!(
                cause.downcast_ref::<EmbeddingError>(),
                Some(EmbeddingError::KeyNotFound(_) | EmbeddingError::InvalidStore(_))
            );
        if input {
            return 2;
        }
    }
    1
}

/// The error chain on one line, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<u8> {
    let ctx = Context { cfg: resolve(&cli)? };
    match cli.command {
        Command::Reward(a) => commands::reward::run(&a, &ctx),
        Command::Evaluate(a) => commands::evaluate::run(&a, &ctx),
        Command::Curriculum(a) => commands::curriculum::run(&a, &ctx),
        Command::Baseline(a) => commands::baseline::run(&a, &ctx),
        Command::Pipeline(c) => commands::pipeline::run(&c, &ctx),
        Command::Windows(a) => commands::windows::run(&a, &ctx),
        Command::Render(a) => commands::render::run(&a, &ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
