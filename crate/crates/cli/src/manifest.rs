use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use rope_probe_core::Result;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

/// Record of one command invocation, kept next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Every setting the run used, defaults included.
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    /// Creates `dir` and writes the manifest in the `running` state.
    pub fn start(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let m = Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config,
            started_at: now(),
            finished_at: None,
            status: Status::Running,
            error: None,
            outputs: Vec::new(),
            dir: dir.to_owned(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of an output file; it is listed in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_owned());
        }
        self.dir.join(name)
    }

    pub fn finish(mut self, result: &Result<()>) -> Result<()> {
        self.finished_at = Some(now());
        match result {
            Ok(()) => self.status = Status::Ok,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.dir.join(FILE_NAME), text + "\n")?;
        Ok(())
    }
}
