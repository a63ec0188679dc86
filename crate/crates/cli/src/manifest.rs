//! Run manifests: a JSON record of what a command is about to do.
//!
//! Every command writes one into its output directory before producing any
//! other artifact, capturing the resolved configuration, the seed, the code
//! version, digests of all file inputs, and the planned output names.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use texsyn_core::CoreError;

/// SHA-256 digest of one input file.
#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record emitted by every command.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub unix_time: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            unix_time,
        }
    }

    /// Hashes `path` and records it as an input.
    pub fn add_input(&mut self, path: &Path) -> Result<(), CoreError> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn add_outputs(&mut self, names: &[&str]) {
        self.outputs.extend(names.iter().map(|s| s.to_string()));
    }

    /// Creates `dir` and writes `dir/manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<(), CoreError> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::data(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// All `.vx` files in `dir`, sorted by name.
pub fn voxel_files(dir: &Path) -> Result<Vec<PathBuf>, CoreError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CoreError::data(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "vx") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CoreError::data(format!("no .vx volumes in {}", dir.display())));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"abc").unwrap();
        let mut m = RunManifest::new("test", 0, serde_json::json!({}));
        m.add_input(&path).unwrap();
        assert_eq!(
            m.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn write_creates_directory_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/run");
        let mut m = RunManifest::new("sample", 7, serde_json::json!({"n": 4}));
        m.add_outputs(&["a.png"]);
        m.write(&out).unwrap();
        let text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "sample");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["outputs"][0], "a.png");
    }

    #[test]
    fn voxel_listing_is_sorted_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(voxel_files(dir.path()).is_err());
        std::fs::write(dir.path().join("b.vx"), b"").unwrap();
        std::fs::write(dir.path().join("a.vx"), b"").unwrap();
        std::fs::write(dir.path().join("c.txt"), b"").unwrap();
        let files = voxel_files(dir.path()).unwrap();
        let names: Vec<_> =
            files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.vx", "b.vx"]);
    }
}
