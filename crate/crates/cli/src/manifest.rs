use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io::write_json;

pub const ARTIFACT_VERSION: &str = concat!("tppgw ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Everything needed to repeat a command: the argument vector, the resolved
/// configuration, the seed and digests of every input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub artifact_version: String,
    /// path -> lowercase hex SHA-256
    pub input_digests: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    path: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest location: `manifest.json` inside an output directory, or
/// `<file>.manifest.json` next to an output file.
pub fn manifest_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct ManifestSpec<'a> {
    pub command: &'a str,
    pub argv: &'a [String],
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub inputs: &'a [PathBuf],
}

impl RunManifest {
    /// Hashes the inputs and writes the manifest with status `running`.
    pub fn begin(path: PathBuf, spec: ManifestSpec<'_>) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        for p in spec.inputs {
            input_digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            command: spec.command.to_string(),
            argv: spec.argv.to_vec(),
            config: spec.config,
            seed: spec.seed,
            threads: spec.threads,
            artifact_version: ARTIFACT_VERSION.to_string(),
            input_digests,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
            path,
        };
        manifest.write()?;
        Ok(manifest)
    }

    fn write(&self) -> Result<()> {
        write_json(&self.path, self)
    }

    /// Stamps the end time and outcome and rewrites the file.
    pub fn finish<T>(mut self, outcome: &Result<T>) -> Result<()> {
        self.finished_at = Some(now());
        match outcome {
            Ok(_) => self.status = RunStatus::Succeeded,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_hex() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "abc").unwrap();
        let d = sha256_file(&p).unwrap();
        assert_eq!(d, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(sha256_file(&p).unwrap(), d);
    }

    #[test]
    fn begin_then_finish() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        fs::write(&input, "{}").unwrap();
        let path = manifest_path(&dir.path().join("out.csv"), false);
        assert!(path.ends_with("out.csv.manifest.json"));
        let argv = vec!["tppgw".to_string(), "kernel".to_string()];
        let m = RunManifest::begin(
            path.clone(),
            ManifestSpec {
                command: "kernel",
                argv: &argv,
                config: serde_json::json!({"mode": "singleton"}),
                seed: 3,
                threads: Some(1),
                inputs: &[input],
            },
        )
        .unwrap();
        let written: RunManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(written.status, RunStatus::Running);
        assert!(written.finished_at.is_none());
        m.finish(&Ok::<(), CliError>(())).unwrap();
        let done: RunManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(done.status, RunStatus::Succeeded);
        assert!(done.finished_at.is_some());
        assert_eq!(done.input_digests.len(), 1);
        assert_eq!(done.artifact_version, ARTIFACT_VERSION);
    }
}
