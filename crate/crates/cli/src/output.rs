//! Artifact writing: the JSON report envelope and plain CSV tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Reproducibility {
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
}

/// Top-level layout of `report.json`. The timestamp is the only field that
/// varies between identical runs and always sits alone on the second line.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    timestamp: u64,
    pipeline: &'a str,
    reproducibility: &'a Reproducibility,
    result: &'a T,
}

pub struct Artifacts {
    dir: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Shortest round-trip decimal; empty for `None`.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len(), "{name}");
            w.write_record(&row).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn report(&mut self, pipeline: &str, repro: &Reproducibility, result: &impl Serialize) -> Result<(), CliError> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.json(
            "report.json",
            &Envelope {
                timestamp,
                pipeline,
                reproducibility: repro,
                result,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        let repro = Reproducibility {
            config_hash: "ab".into(),
            seed: 3,
            version: VERSION,
        };
        a.report("diffuse", &repro, &vec![1.5, 2.0]).unwrap();
        let text = fs::read_to_string(a.path("report.json")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].trim_start().starts_with("\"timestamp\""));
        assert_eq!(text.matches("timestamp").count(), 1);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["reproducibility"]["seed"], 3);
    }

    #[test]
    fn csv_has_header_and_blank_options() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        a.csv("t.csv", &["j", "x"], [vec!["0".into(), num(None)], vec!["1".into(), num(Some(0.1))]])
            .unwrap();
        let text = fs::read_to_string(a.path("t.csv")).unwrap();
        assert_eq!(text, "j,x\n0,\n1,0.1\n");
    }
}
