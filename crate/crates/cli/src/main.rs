mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "infominima", version, about = "Local-minima metrics, bounds and regularized training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train a network with optional regularization.
    Train,
    /// Measure a trained model.
    Metrics,
    /// Run a multi-seed experiment scenario.
    Scenario,
    /// Evaluate the generalization bound, optionally over a sweep of γ.
    Bound,
    /// Run the built-in numerical checks.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Metrics => "metrics",
            Command::Scenario => "scenario",
            Command::Bound => "bound",
            Command::Verify => "verify",
        }
    }
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

/// What a subcommand hands back for the manifest.
pub struct Outcome {
    pub config: Value,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub timings: Value,
    pub success: bool,
}

pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub quiet: bool,
    config_path: Option<PathBuf>,
    command: &'static str,
}

impl Context {
    /// Reads the config, unwrapping a manifest when one is given.
    pub fn load_config<T: DeserializeOwned>(&self) -> Result<Option<T>, CliError> {
        let Some(path) = &self.config_path else { return Ok(None) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", path.display())))?;
        if let Some(obj) = value.as_object() {
            if obj.contains_key("format_version") && obj.contains_key("config") {
                let sub = obj.get("subcommand").and_then(Value::as_str).unwrap_or_default();
                if sub != self.command {
                    return Err(CliError::Usage(format!(
                        "manifest {} was written by `{sub}`, not `{}`",
                        path.display(),
                        self.command
                    )));
                }
                value = obj["config"].clone();
            }
        }
        serde_json::from_value(value)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn require_config<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        self.load_config()?
            .ok_or_else(|| CliError::Usage(format!("`{}` needs --config PATH", self.command)))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    Ok(serde_json::to_value(v)?)
}

fn write_manifest(ctx: &Context, threads: Option<usize>, outcome: &Outcome, total: f64) -> anyhow::Result<()> {
    let mut timings = outcome.timings.clone();
    if let Some(obj) = timings.as_object_mut() {
        obj.insert("total_s".into(), json!(total));
    }
    let manifest = json!({
        "format_version": FORMAT_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "subcommand": ctx.command,
        "seed": outcome.seed,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "config": outcome.config,
        "outputs": outcome.outputs,
        "success": outcome.success,
        "timings": timings,
    });
    infominima::persist::write_json(&ctx.path("manifest.json"), &manifest)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Context {
        out: cli.out,
        seed: cli.seed,
        quiet: cli.quiet,
        config_path: cli.config,
        command: cli.command.name(),
    };
    let start = Instant::now();
    let prepared = match cli.command {
        Command::Train => commands::train(&ctx),
        Command::Metrics => commands::metrics(&ctx),
        Command::Scenario => commands::scenario(&ctx),
        Command::Bound => commands::bound(&ctx),
        Command::Verify => commands::verify(&ctx),
    }?;
    write_manifest(&ctx, cli.threads, &prepared, start.elapsed().as_secs_f64())?;
    log::info!("wrote {} to {}", prepared.outputs.join(", "), display(&ctx.out));
    Ok(prepared.success)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
