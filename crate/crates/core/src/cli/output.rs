//! Output files of a run and the manifest that lists them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;

/// Shortest round-trip decimal; non-finite values become empty cells.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(CliError::runtime)?;
    for row in rows {
        w.write_record(row).map_err(CliError::runtime)?;
    }
    w.into_inner().map_err(|e| CliError::runtime(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub hash_algorithm: &'static str,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub wall_clock_seconds: f64,
    pub resolved_config: Option<String>,
    pub outputs: Vec<OutputEntry>,
    pub config: C,
}

/// Files written into one output directory, with their hashes.
pub struct OutputSet {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
    started: Instant,
}

impl OutputSet {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let probe = dir.join(".pg-lab-write-probe");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| CliError::runtime(format!("{} is not writable: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.entries
    }

    /// Writes a file outside the hashed output list.
    pub fn write_untracked(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.write_untracked(name, bytes)?;
        self.entries.push(OutputEntry {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> Result<PathBuf, CliError> {
        let bytes = csv_bytes(header, rows)?;
        self.write(name, &bytes)
    }

    /// Writes `manifest.toml` through a temporary file and a rename.
    pub fn finish<C: Serialize>(
        self,
        command: &str,
        config: C,
        resolved_config: Option<&str>,
    ) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            hash_algorithm: "sha256",
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            resolved_config: resolved_config.map(str::to_owned),
            outputs: self.entries,
            config,
        };
        let body = toml::to_string(&manifest).map_err(CliError::runtime)?;
        let text = format!(
            "# pg-lab run manifest; output hashes are SHA-256 over the raw file bytes\n{body}"
        );
        let tmp = self.dir.join("manifest.toml.tmp");
        let path = self.dir.join("manifest.toml");
        let mut f = fs::File::create(&tmp)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", tmp.display())))?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", tmp.display())))?;
        fs::rename(&tmp, &path)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Reads the `outputs` table back from a manifest.
pub fn read_manifest_outputs(path: &Path) -> Result<Vec<OutputEntry>, CliError> {
    #[derive(serde::Deserialize)]
    struct Entry {
        path: String,
        sha256: String,
    }
    #[derive(serde::Deserialize)]
    struct Partial {
        outputs: Vec<Entry>,
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
    let partial: Partial = toml::from_str(&text).map_err(CliError::runtime)?;
    Ok(partial
        .outputs
        .into_iter()
        .map(|e| OutputEntry {
            path: e.path,
            sha256: e.sha256,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e21, 5.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::NAN), "");
        assert_eq!(opt_num(None), "");
        assert_eq!(num(1.0419548074702748e-14), "1.0419548074702748e-14");
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = OutputSet::create(dir.path()).unwrap();
        set.write_csv("a.csv", &["x".into()], &[vec!["1".into()]]).unwrap();
        let path = set.finish("test", serde_json_like(), None).unwrap();
        let outputs = read_manifest_outputs(&path).unwrap();
        assert_eq!(outputs.len(), 1);
        assert_eq!(outputs[0].sha256, sha256_hex(b"x\n1\n"));
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("# pg-lab run manifest"));
        assert!(!dir.path().join("manifest.toml.tmp").exists());
    }

    fn serde_json_like() -> std::collections::BTreeMap<String, i64> {
        [("k".to_owned(), 1)].into_iter().collect()
    }
}
