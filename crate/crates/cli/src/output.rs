use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use squq_core::clients::ClientError;
use squq_core::ingest::{write_atomically, IngestError};

pub const EXIT_SELF_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_EXTERNAL: u8 = 3;

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        CliError { code: EXIT_USAGE, source: e.into() }
    }

    pub fn external(e: impl Into<anyhow::Error>) -> Self {
        CliError { code: EXIT_EXTERNAL, source: e.into() }
    }

    pub fn self_check(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_SELF_CHECK, source: anyhow::anyhow!(msg.into()) }
    }

    pub fn context(self, ctx: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        CliError { code: self.code, source: self.source.context(ctx) }
    }
}

impl From<squq_core::Error> for CliError {
    fn from(e: squq_core::Error) -> Self {
        CliError::usage(e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::usage(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::usage(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::usage(e)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Record(_) | ClientError::Config(_) | ClientError::FixtureMissing(_) => CliError::usage(e),
            _ => CliError::external(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Everything needed to reproduce a run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: &'static str,
    pub duration_secs: f64,
}

pub struct Run {
    command: &'static str,
    seed: u64,
    started: Instant,
}

impl Run {
    pub fn start(command: &'static str, seed: u64) -> Self {
        Run { command, seed, started: Instant::now() }
    }

    /// Write `<outputs[0]>.manifest.json`.
    pub fn finish(self, config: Value, inputs: &[&Path], outputs: &[&Path]) -> CliResult<()> {
        let Some(first) = outputs.first() else { return Ok(()) };
        let manifest = RunManifest {
            command: self.command.into(),
            seed: self.seed,
            config,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            version: env!("CARGO_PKG_VERSION"),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(first);
        write_json(&path, &manifest)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    write_atomically(path, |w| {
        for row in rows {
            serde_json::to_writer(&mut *w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|e| CliError::usage(e).context(format!("writing {}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomically(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
    .map_err(|e| CliError::usage(e).context(format!("writing {}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomically(path, |w| w.write_all(text.as_bytes()))
        .map_err(|e| CliError::usage(e).context(format!("writing {}", path.display())))
}

/// `<prefix>.<ext>`, keeping any dots already in the prefix.
pub fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}
