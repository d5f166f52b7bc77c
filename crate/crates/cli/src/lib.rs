//! `dedtwin` command-line front end.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

mod commands;
pub mod manifest;

use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "dedtwin", version, about = "Digital twin of a laser/hot-wire DED process")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Command configuration (plant config for `generate`, loop config for `control`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run protocols open loop on the virtual plant and write records.
    Generate(commands::generate::GenerateArgs),
    /// Fit dynamic models to a record.
    Identify(commands::identify::IdentifyArgs),
    /// Train signature-to-property surrogates.
    Train(commands::train::TrainArgs),
    /// Tune PID gains and run both closed-loop scenarios.
    Control(commands::control::ControlArgs),
    /// Extract melt-pool width and length from PGM frames.
    Vision(commands::vision::VisionArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Identify(_) => "identify",
            Command::Train(_) => "train",
            Command::Control(_) => "control",
            Command::Vision(_) => "vision",
        }
    }
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, files or configuration: exit code 2.
    Input(String),
    /// Fitting, training or tuning failed: exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<dedtwin_core::Error> for CliError {
    fn from(e: dedtwin_core::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Per-run state: resolved output directory and the manifest being built.
pub struct Run {
    pub global: GlobalArgs,
    pub manifest: Manifest,
}

impl Run {
    fn new(global: GlobalArgs, command: &str) -> CliResult<Self> {
        std::fs::create_dir_all(&global.out)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", global.out.display())))?;
        let manifest = Manifest::new(command, global.config.as_deref());
        Ok(Self { global, manifest })
    }

    pub fn seed_or(&mut self, default: u64) -> u64 {
        let seed = self.global.seed.unwrap_or(default);
        self.manifest.seed = Some(seed);
        seed
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes =
            std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.add_input(path, &bytes);
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let bytes = self.read_input(path)?;
        parse_json(path, &bytes)
    }

    /// Reads the global `--config` file, or returns `T::default()` without one.
    pub fn config<T: DeserializeOwned + Default>(&mut self) -> CliResult<T> {
        match self.global.config.clone() {
            Some(p) => self.read_json(&p),
            None => Ok(T::default()),
        }
    }

    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.global.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        self.write_output(name, text.as_bytes())
    }

    /// Renders CSV through a core writer and stores it.
    pub fn write_csv(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> dedtwin_core::Result<()>,
    ) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_output(name, &buf)
    }

    fn finish(self) -> CliResult<()> {
        let text = self.manifest.to_json();
        let path = self.global.out.join(manifest::MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
    }
}

/// JSON with the failing line, column and field in the message.
pub fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        if at == "." {
            CliError::Input(format!("{}: {inner}", path.display()))
        } else {
            CliError::Input(format!("{}: field `{at}`: {inner}", path.display()))
        }
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut run = Run::new(cli.global.clone(), cli.command.name())?;
    let result = match &cli.command {
        Command::Generate(a) => commands::generate::run(&mut run, a),
        Command::Identify(a) => commands::identify::run(&mut run, a),
        Command::Train(a) => commands::train::run(&mut run, a),
        Command::Control(a) => commands::control::run(&mut run, a),
        Command::Vision(a) => commands::vision::run(&mut run, a),
    };
    // Failed numerical runs may still have written best-effort outputs.
    if result.is_ok() || !run.manifest.outputs.is_empty() {
        let finished = run.finish();
        result.and(finished)
    } else {
        result
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
