//! Run directories: manifest, CSV tables, JSON artifacts and the summary.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{io_context, CliError, CliResult};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SUMMARY: &str = "summary.json";

/// One CSV cell. Floats are written as `{:.12e}` so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v:.12e}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

pub fn csv_string(header: &[String], rows: &[Vec<Cell>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(Cell::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// An output directory with its manifest already written.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    started: Instant,
}

impl RunDir {
    /// Create `root` and append the start record to the manifest.
    pub fn create(
        root: &Path,
        command: &str,
        cfg: &Config,
        threads: Option<usize>,
    ) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(io_context(format!("creating {}", root.display())))?;
        let run = Self {
            root: root.to_path_buf(),
            started: Instant::now(),
        };
        let hash = hex::encode(Sha256::digest(cfg.canonical().as_bytes()));
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        run.append_manifest(&json!({
            "event": "start",
            "command": command,
            "config_sha256": hash,
            "seed": cfg.get("seed"),
            "threads": threads,
            "versions": {
                "gradphi": env!("CARGO_PKG_VERSION"),
                "gradphi-cli": env!("CARGO_PKG_VERSION"),
            },
            "git_describe": git_describe(),
            "unix_time": unix,
            "config": cfg.entries(),
        }))?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn append_manifest(&self, v: &Value) -> CliResult<()> {
        let p = self.path(MANIFEST);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(io_context(p.display().to_string()))?;
        writeln!(f, "{v}").map_err(io_context(p.display().to_string()))
    }

    pub fn finish(&self, flags: &[String]) -> CliResult<()> {
        self.append_manifest(&json!({
            "event": "finish",
            "status": if flags.is_empty() { "ok" } else { "flagged" },
            "flags": flags,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
        }))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_context(dir.display().to_string()))?;
        }
        fs::write(&p, bytes).map_err(io_context(p.display().to_string()))?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv(
        &self,
        name: &str,
        header: &[String],
        rows: &[Vec<Cell>],
    ) -> CliResult<PathBuf> {
        self.write_text(name, &csv_string(header, rows))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> CliResult<T> {
        read_json(&self.path(name))
    }

    /// Merge `section` into `summary.json` under `key`.
    pub fn summarise(&self, key: &str, section: Value) -> CliResult<()> {
        let p = self.path(SUMMARY);
        let mut map: Map<String, Value> = if p.exists() {
            read_json(&p)?
        } else {
            Map::new()
        };
        map.insert(key.to_string(), section);
        self.write_json(SUMMARY, &map).map(|_| ())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingOutput(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(io_context(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_use_fixed_scientific_format() {
        assert_eq!(Cell::from(0.5).to_string(), "5.000000000000e-1");
        assert_eq!(Cell::from(-3i64).to_string(), "-3");
        let s = csv_string(
            &["a".into(), "b".into()],
            &[vec![1usize.into(), 2.0.into()]],
        );
        assert_eq!(s, "a,b\n1,2.000000000000e0\n");
    }

    #[test]
    fn manifest_is_written_first() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::load(None, &[]).unwrap();
        let run = RunDir::create(dir.path(), "torus", &cfg, None).unwrap();
        let text = fs::read_to_string(run.path(MANIFEST)).unwrap();
        let v: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["event"], "start");
        assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn summary_sections_merge() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::load(None, &[]).unwrap();
        let run = RunDir::create(dir.path(), "x", &cfg, None).unwrap();
        run.summarise("a", json!(1)).unwrap();
        run.summarise("b", json!(2)).unwrap();
        let m: Map<String, Value> = run.read_json(SUMMARY).unwrap();
        assert_eq!(m.len(), 2);
    }
}
