use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use lacnet_core::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written into its output directory
/// before any other artifact and completed when the command finishes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, name: &str, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.inputs.push((name.to_string(), p.display().to_string()));
        }
        self
    }

    pub fn output(mut self, name: &str, path: Option<&Path>) -> Self {
        if let Some(p) = path {
            self.outputs.push((name.to_string(), p.display().to_string()));
        }
        self
    }

    pub fn finish(&self) -> Self {
        RunManifest {
            finished_unix: Some(now()),
            ..self.clone()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })
    }
}
