//! Output directory of one CLI run plus its reproduction manifest.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use crate::args::Cli;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    generator: &'a str,
    argv: Vec<String>,
    /// Fully resolved settings, defaults included.
    flags: serde_json::Value,
    seed: u64,
    threads: Option<usize>,
    input: Option<InputRecord>,
    started_at: &'a str,
    finished_at: String,
    files: Vec<String>,
}

pub struct RunDir {
    path: PathBuf,
    command: &'static str,
    started_at: String,
    files: std::cell::RefCell<Vec<String>>,
}

impl RunDir {
    /// Uses `out` when given, else a fresh directory under the workspace.
    pub fn create(cli: &Cli, command: &'static str, out: Option<&Path>) -> Result<Self, CliError> {
        let now = Utc::now();
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => cli
                .workspace
                .join("runs")
                .join(format!("{command}-{}", now.format("%Y%m%dT%H%M%S%.3fZ"))),
        };
        fs::create_dir_all(&path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            path,
            command,
            started_at: now.to_rfc3339_opts(SecondsFormat::Millis, true),
            files: Default::default(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let target = self.path.join(name);
        fs::write(&target, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", target.display())))?;
        self.files.borrow_mut().push(name.to_string());
        Ok(target)
    }

    pub fn write_manifest(
        &self,
        cli: &Cli,
        flags: serde_json::Value,
        seed: u64,
        input: Option<InputRecord>,
    ) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: self.command,
            generator: demand_core::pipeline::GENERATOR,
            argv: std::env::args().collect(),
            flags,
            seed,
            threads: cli.threads,
            input,
            started_at: &self.started_at,
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            files: self.files.borrow().clone(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        self.write("manifest.json", &bytes)
    }
}
