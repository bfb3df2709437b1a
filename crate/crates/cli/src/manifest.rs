use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of the append-only run log kept next to the outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub engine_version: String,
    pub wall_time_secs: f64,
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &'static str, seed: u64) -> Self {
        Self { command, started: Instant::now(), config: None, seed, inputs: vec![], outputs: vec![] }
    }

    /// Appends the entry to `manifest.jsonl` in `dir`.
    pub fn finish(self, dir: &Path) -> CliResult<PathBuf> {
        let show = |p: &PathBuf| p.display().to_string();
        let entry = RunManifest {
            command: self.command.to_string(),
            config: self.config.as_ref().map(show),
            seed: self.seed,
            inputs: self.inputs.iter().map(show).collect(),
            outputs: self.outputs.iter().map(show).collect(),
            engine_version: gcwm_core::VERSION.to_string(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        writeln!(f, "{}", serde_json::to_string(&entry).expect("manifest serializes"))?;
        Ok(path)
    }
}

/// Directory holding `path`, or the working directory for a bare file name.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
