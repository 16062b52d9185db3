use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub fracflock: &'static str,
    pub cli: &'static str,
}

/// Provenance record written once per command invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Hash of `value` with object keys sorted.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(&sort_keys(value)).unwrap_or_default();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn sort_keys(v: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<_> = m.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), sort_keys(&m[k]))).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: config_hash(&config),
            config,
            seed,
            versions: Versions {
                fracflock: fracflock::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            started_unix: unix_now(),
            finished_unix: 0.0,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, status: &str, out: &Path) -> std::io::Result<()> {
        self.status = status.to_owned();
        self.finished_unix = unix_now();
        std::fs::create_dir_all(out)?;
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(out.join(RUN_MANIFEST), text + "\n")
    }
}
