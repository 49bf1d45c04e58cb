//! The `modalgate` command line: `serve`, `respond`, `datagen`, `eval`,
//! `stats` and `compare`.
//!
//! Data goes to stdout as JSON, logs to stderr. Exit status is 0 on success,
//! 1 for usage errors and 2 for runtime failures. `--config FILE` reads a
//! flat JSON object whose keys are the subcommand's long flags (with `_` or
//! `-`); flags given on the command line win.

mod args;
mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use args::{Cli, Command, CompareArgs, DatagenArgs, EvalArgs, RespondArgs, ServeArgs, StatsArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type ConfigMap = serde_json::Map<String, serde_json::Value>;

fn load_config(path: &Path) -> Result<ConfigMap, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Fills fields not given on the command line from the config file.
fn overlay<T: Serialize + DeserializeOwned>(args: T, m: &ArgMatches, config: Option<&ConfigMap>) -> Result<T, CliError> {
    let Some(config) = config else {
        return Ok(args);
    };
    let serde_json::Value::Object(mut fields) = serde_json::to_value(&args).expect("args serialize") else {
        unreachable!("argument structs serialize to objects")
    };
    for (raw_key, value) in config {
        let key = raw_key.replace('-', "_");
        if !fields.contains_key(&key) {
            return Err(CliError::Usage(format!("unknown config key {raw_key:?}")));
        }
        if m.value_source(&key) != Some(ValueSource::CommandLine) {
            fields.insert(key, value.clone());
        }
    }
    serde_json::from_value(serde_json::Value::Object(fields)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("MODALGATE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(filter)
        .try_init();
}

/// Writes `value` as pretty JSON to stdout.
pub(crate) fn emit<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(CliError::runtime)?;
    writeln!(out).map_err(CliError::runtime)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<(), CliError> {
    let config = cli.config.as_deref().map(load_config).transpose()?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let config = config.as_ref();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    match cli.command {
        Command::Serve(a) => rt.block_on(commands::serve(overlay(a, sub, config)?)),
        Command::Respond(a) => rt.block_on(commands::respond(overlay(a, sub, config)?)),
        Command::Datagen(a) => rt.block_on(commands::datagen(overlay(a, sub, config)?)),
        Command::Eval(a) => rt.block_on(commands::eval(overlay(a, sub, config)?)),
        Command::Stats(a) => commands::stats(overlay(a, sub, config)?),
        Command::Compare(a) => commands::compare(overlay(a, sub, config)?),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    init_logging(&cli.log_level);
    match run(cli, &matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
