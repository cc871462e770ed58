//! Run manifests: every command that writes outputs records how it was
//! invoked, so a run can be audited and replayed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::write_json_pretty;

#[derive(Debug, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand path, e.g. "synth" or "consist shift-study".
    pub command: String,
    /// Full argument vector as invoked.
    pub arguments: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    pub wall_time_secs: f64,
}

/// Collects inputs and timing for one command run.
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    inputs: Vec<InputDigest>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> ManifestBuilder {
        ManifestBuilder {
            command: command.to_string(),
            seed: None,
            inputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(mut self, seed: u64) -> ManifestBuilder {
        self.seed = Some(seed);
        self
    }

    /// Hashes an input file and records its digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: format!("{digest:x}"),
        });
        Ok(())
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            arguments: std::env::args().collect(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

/// Writes the manifest next to an output path: inside `target` if it is a
/// directory, else as `<target file>.manifest.json`.
pub fn write_manifest_for(target: &Path, manifest: &RunManifest) -> Result<()> {
    let path = manifest_path(target);
    write_json_pretty(&path, manifest)
}

pub fn manifest_path(target: &Path) -> PathBuf {
    if target.is_dir() {
        target.join("manifest.json")
    } else {
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        target.with_file_name(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_digest_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.json");
        fs::write(&input, b"{}").unwrap();
        let mut b = ManifestBuilder::new("rig perturb").seed(9);
        b.input(&input).unwrap();
        let m = b.finish();
        assert_eq!(m.command, "rig perturb");
        assert_eq!(m.seed, Some(9));
        // sha256 of "{}".
        assert_eq!(
            m.inputs[0].sha256,
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
        write_manifest_for(dir.path(), &m).unwrap();
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn file_targets_get_sibling_manifest() {
        let p = manifest_path(Path::new("/tmp/nonexistent-out.csv"));
        assert_eq!(p, Path::new("/tmp/nonexistent-out.csv.manifest.json"));
    }
}
