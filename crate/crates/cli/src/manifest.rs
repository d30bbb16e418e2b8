use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
}

/// Written as `manifest.json` next to the outputs of every run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path to lowercase hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub status: &'static str,
    pub exit_code: u8,
    pub error: Option<String>,
    pub details: serde_json::Value,
    pub timings: Timings,
}

/// Bookkeeping for one invocation.
pub struct Run {
    pub out_dir: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Run {
    pub fn new(command: &str, out_dir: PathBuf, seed: Option<u64>) -> Self {
        Self {
            out_dir,
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config: serde_json::Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                status: "ok",
                exit_code: 0,
                error: None,
                details: serde_json::Value::Null,
                timings: Timings { wall_clock_seconds: 0.0, stages: Vec::new() },
            },
        }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.manifest.config = config;
    }

    pub fn set_details(&mut self, details: serde_json::Value) {
        self.manifest.details = details;
    }

    /// Read a whole input file and record its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        self.manifest.inputs.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(bytes)
    }

    /// Path of an output file inside the output directory, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.into());
        self.out_dir.join(name)
    }

    pub fn stage<T>(&mut self, name: &str, job: impl FnOnce(&mut Self) -> T) -> T {
        let t = Instant::now();
        let out = job(self);
        self.manifest.timings.stages.push(StageTiming { stage: name.into(), seconds: t.elapsed().as_secs_f64() });
        out
    }

    /// Close the record and write `manifest.json`. Returns the exit code.
    pub fn finish(mut self, result: Result<(), CliError>) -> u8 {
        if let Err(e) = &result {
            self.manifest.status = "error";
            self.manifest.exit_code = e.code;
            self.manifest.error = Some(e.message.clone());
        }
        self.manifest.timings.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = self.out_dir.join("manifest.json");
        let written = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| e.to_string())
            .and_then(|s| std::fs::write(&path, s + "\n").map_err(|e| e.to_string()));
        if let Err(e) = written {
            eprintln!("error: cannot write {}: {e}", path.display());
            return self.manifest.exit_code.max(1);
        }
        self.manifest.exit_code
    }
}
