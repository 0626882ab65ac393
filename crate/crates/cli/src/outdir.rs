use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, CliResult};

pub const OUT_ENV: &str = "LORAC_OUT";
const DEFAULT_ROOT: &str = "runs";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from)
}

/// `root/{prefix}-NNN` for the smallest `NNN` not yet taken.
pub fn next_free(root: &Path, prefix: &str) -> PathBuf {
    (1..)
        .map(|i| root.join(format!("{prefix}-{i:03}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

/// Resolves the output directory and creates it. An explicit directory must
/// be absent or empty; prior runs are never overwritten.
pub fn prepare(explicit: Option<&Path>, prefix: &str) -> CliResult<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => next_free(&output_root(), prefix),
    };
    if dir.exists() {
        let non_empty = fs::read_dir(&dir)
            .map_err(|e| CliError::usage(format!("cannot inspect {}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; refusing to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config_path: Option<String>,
    pub overrides: Vec<String>,
    pub resolved_config: String,
    pub artifacts: BTreeMap<String, String>,
    pub started_at: String,
    pub ended_at: Option<String>,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, resolved_config: String) -> Self {
        Self {
            tool: "lorac",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config_path: None,
            overrides: Vec::new(),
            resolved_config,
            artifacts: BTreeMap::new(),
            started_at: now(),
            ended_at: None,
            status: "running".into(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.to_string(), path.display().to_string());
    }

    pub fn finish(&mut self, status: &str) {
        self.status = status.to_string();
        self.ended_at = Some(now());
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
