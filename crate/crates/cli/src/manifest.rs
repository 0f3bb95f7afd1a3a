//! `manifest.json`: the config digest and a SHA-256 for every emitted file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::parse_config_str;
use crate::error::CliError;
use crate::runner::run_experiment;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// SHA-256 of `resolved_config.json`.
    pub config_digest: String,
    /// Sorted by path.
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn build(
        out: &Path,
        config_digest: String,
        mut files: Vec<String>,
    ) -> Result<Self, CliError> {
        files.sort();
        files.dedup();
        let files = files
            .into_iter()
            .map(|path| {
                let sha256 = hash_file(&out.join(&path))?;
                Ok(ManifestEntry { path, sha256 })
            })
            .collect::<Result<_, CliError>>()?;
        Ok(Self {
            config_digest,
            files,
        })
    }

    pub fn read(out: &Path) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("malformed {}: {e}", path.display())))
    }

    pub fn csv_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.files.iter().filter(|f| f.path.ends_with(".csv"))
    }
}

pub fn write_manifest(m: &Manifest, out: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Discrepancies found by [`verify`]; empty when everything matches.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes every digest listed in `out/manifest.json`. With `rerun`, the
/// resolved config is executed again in a scratch directory and the CSV
/// digests of both runs are compared.
pub fn verify(out: &Path, rerun: bool) -> Result<VerifyReport, CliError> {
    let manifest = Manifest::read(out)?;
    let mut report = VerifyReport::default();
    for entry in &manifest.files {
        report.checked += 1;
        match hash_file(&out.join(&entry.path)) {
            Ok(h) if h == entry.sha256 => {}
            Ok(_) => report
                .mismatches
                .push(format!("{}: digest differs", entry.path)),
            Err(e) => report.mismatches.push(format!("{}: {e}", entry.path)),
        }
    }
    let config_path = out.join("resolved_config.json");
    let config_text = fs::read_to_string(&config_path)
        .map_err(|e| CliError::io(format!("reading {}", config_path.display()), e))?;
    if sha256_hex(config_text.as_bytes()) != manifest.config_digest {
        report
            .mismatches
            .push("resolved_config.json: config digest differs".into());
    }
    if rerun {
        let scratch =
            tempfile::tempdir().map_err(|e| CliError::io("creating scratch directory", e))?;
        let mut cfg = parse_config_str(&config_text)?;
        cfg.output_dir = scratch.path().to_path_buf();
        let again = run_experiment(&cfg)?.manifest;
        for entry in manifest.csv_entries() {
            report.checked += 1;
            match again.files.iter().find(|f| f.path == entry.path) {
                Some(f) if f.sha256 == entry.sha256 => {}
                Some(_) => report
                    .mismatches
                    .push(format!("{}: rerun differs", entry.path)),
                None => report
                    .mismatches
                    .push(format!("{}: missing from rerun", entry.path)),
            }
        }
        for f in again.csv_entries() {
            if !manifest.files.iter().any(|e| e.path == f.path) {
                report
                    .mismatches
                    .push(format!("{}: produced by rerun but not listed", f.path));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn build_sorts_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.csv"), "abc").unwrap();
        fs::write(dir.path().join("a.csv"), "").unwrap();
        let m =
            Manifest::build(dir.path(), "d".into(), vec!["b.csv".into(), "a.csv".into()]).unwrap();
        assert_eq!(m.files[0].path, "a.csv");
        assert_eq!(
            m.files[1].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        write_manifest(&m, dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }
}
