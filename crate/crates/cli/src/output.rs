//! CSV tables and run manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Request;
use crate::error::CliError;

/// File name of the manifest written next to the data files.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Formats a float with 17 significant digits.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV table with a one-line header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    /// Empty table with the given columns.
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    /// Appends a row of already formatted cells.
    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Renders the table as CSV text.
    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Collects the files written by one command.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    /// Creates the directory if needed.
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Write { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    /// Path of `name` inside the directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `bytes` to `name` and records the file.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        let wrap = |source| CliError::Write { path: path.clone(), source };
        let mut out = BufWriter::new(fs::File::create(&path).map_err(wrap)?);
        out.write_all(bytes).map_err(wrap)?;
        out.flush().map_err(wrap)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes a CSV table.
    pub fn table(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        self.write(name, table.render().as_bytes())
    }

    /// Writes a value as pretty-printed JSON.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Names of the files written so far.
    pub fn files(&self) -> &[String] {
        &self.files
    }
}

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Horizon and step count of the run grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    /// Horizon `T`.
    pub horizon: f64,
    /// Number of grid cells.
    pub steps: usize,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Version of the tool that produced the run.
    pub version: String,
    /// SHA-256 of the configuration text.
    pub config_sha256: String,
    /// Configuration file as given on the command line.
    pub config_path: String,
    /// Full configuration text.
    pub config: String,
    /// Command and its parameters.
    pub request: Request,
    /// Grid of the run.
    pub grid: GridInfo,
    /// Wall-clock duration in seconds.
    pub wall_clock_seconds: f64,
    /// Data files written, relative to the manifest.
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// Reads a manifest and checks the configuration digest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("manifest {}: {e}", path.display())))?;
        let digest = sha256_hex(manifest.config.as_bytes());
        if digest != manifest.config_sha256 {
            return Err(CliError::Parse(format!(
                "manifest {}: configuration digest {digest} does not match the recorded {}",
                path.display(),
                manifest.config_sha256
            )));
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_significant_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(-2.0), "-2.0000000000000000e0");
        assert_eq!(float(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn table_renders_header_then_rows() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "2".into()]);
        assert_eq!(t.render(), "a,b\n1,2\n");
    }

    #[test]
    fn sha256_matches_known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
