use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use midnet::io::{sha256_file, write_atomic};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Everything needed to replay a run: the arguments, the resolved configs
/// and hashes of what went in and came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub results: serde_json::Value,
    pub threads: usize,
    pub deterministic: bool,
    pub wall_seconds: f64,
    pub version: String,
    pub git: Option<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::config::invalid(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| crate::config::invalid(format!("{}: {e}", path.display())))
    }

    /// Inputs whose current hash differs from the recorded one.
    pub fn changed_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|r| sha256_file(&r.path).map(|h| h != r.sha256).unwrap_or(true))
            .map(|r| r.path.clone())
            .collect()
    }
}

pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Serialize)]
struct Diagnostic<'a> {
    command: &'a str,
    args: &'a [String],
    error: Vec<String>,
    version: &'static str,
}

/// Writes the error chain next to the run's outputs, or to the temp dir
/// when the run has no output directory.
pub fn dump_diagnostic(dir: Option<&Path>, command: &str, args: &[String], err: &anyhow::Error) -> Option<PathBuf> {
    let d = Diagnostic {
        command,
        args,
        error: err.chain().map(|e| e.to_string()).collect(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let path = match dir {
        Some(dir) if std::fs::create_dir_all(dir).is_ok() => dir.join("diagnostic.json"),
        _ => std::env::temp_dir().join(format!("midnet-diagnostic-{}.json", std::process::id())),
    };
    let text = serde_json::to_string_pretty(&d).ok()?;
    write_atomic(&path, text.as_bytes()).ok()?;
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "a").unwrap();
        let m = RunManifest {
            command: "gen".into(),
            args: vec!["gen".into()],
            config: serde_json::json!({"seed": 1}),
            seeds: BTreeMap::from([("seed".into(), 1)]),
            inputs: vec![FileRecord::of(&input).unwrap()],
            outputs: vec![],
            results: serde_json::Value::Null,
            threads: 1,
            deterministic: true,
            wall_seconds: 0.5,
            version: "0".into(),
            git: None,
        };
        let p = m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        assert!(m.changed_inputs().is_empty());
        std::fs::write(&input, "b").unwrap();
        assert_eq!(m.changed_inputs(), vec![input]);
    }
}
