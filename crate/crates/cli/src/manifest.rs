use std::fs;
use std::path::Path;

use serde::Serialize;

/// Record of one invocation, written as `manifest.json` in the output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub output_dir: String,
    pub seed: u64,
    pub threads: usize,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub exit_code: u8,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(dir.join("manifest.json"), text + "\n")
    }
}
