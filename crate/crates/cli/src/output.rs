// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command output directories: hash-stamped JSONL logs that resume by
//! prompt id, CSV tables, and a manifest.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

const HASH_FILE: &str = ".config_hash";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub model_id: String,
    pub corpus_hash: String,
    /// Hashes of upstream outputs this command read, keyed by command.
    #[serde(default)]
    pub inputs: Value,
    pub n_records: usize,
    pub files: Vec<String>,
    /// Command-specific facts, e.g. the selected layers.
    #[serde(default)]
    pub details: Value,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Records that a JSONL log can resume on.
pub trait Keyed {
    fn key(&self) -> &str;
}

#[derive(Serialize, Deserialize)]
struct Line<T> {
    config_hash: String,
    #[serde(flatten)]
    record: T,
}

pub struct OutputDir {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl OutputDir {
    /// Open `root/command` for writing under `config_hash`.
    ///
    /// A fresh or empty directory is stamped with the hash. An existing one
    /// is reused only if it carries the same hash, unless `overwrite` clears it.
    pub fn open(root: &Path, command: &str, config_hash: &str, overwrite: bool) -> Result<Self, CliError> {
        let dir = root.join(command);
        if overwrite && dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let stamp = dir.join(HASH_FILE);
        let empty = fs::read_dir(&dir)?.next().is_none();
        if empty {
            fs::write(&stamp, config_hash)?;
        } else {
            match fs::read_to_string(&stamp) {
                Ok(h) if h == config_hash => {}
                Ok(h) => {
                    return Err(CliError::Config(format!(
                        "{} holds outputs of config {h}, this config is {config_hash}; refusing to mix (use --overwrite)",
                        dir.display()
                    )))
                }
                Err(_) => {
                    return Err(CliError::Config(format!(
                        "{} is not empty and has no config stamp (use --overwrite)",
                        dir.display()
                    )))
                }
            }
        }
        Ok(Self { dir, config_hash: config_hash.to_string() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn log<T: Serialize + DeserializeOwned + Keyed>(&self, name: &str) -> Result<JsonlLog<T>, CliError> {
        JsonlLog::open(self.path(name), &self.config_hash)
    }

    /// CSV with a leading `config_hash` column.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(std::iter::once("config_hash").chain(header.iter().copied()))?;
        for r in rows {
            w.write_record(std::iter::once(self.config_hash.as_str()).chain(r.iter().map(String::as_str)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Pretty JSON with the config hash added at the top level.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let v = serde_json::json!({ "config_hash": self.config_hash, "data": value });
        write_text(&self.path(name), &(serde_json::to_string_pretty(&v)? + "\n"))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<(), CliError> {
        write_text(&self.path(MANIFEST), &(serde_json::to_string_pretty(manifest)? + "\n"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Read every record of a JSONL log, checking each line's config hash.
pub fn read_log<T: DeserializeOwned>(path: &Path, config_hash: &str) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l: Line<T> = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if l.config_hash != config_hash {
            return Err(CliError::Config(format!(
                "{}:{}: record from config {}, expected {config_hash}; refusing to mix",
                path.display(),
                i + 1,
                l.config_hash
            )));
        }
        out.push(l.record);
    }
    Ok(out)
}

/// Append-only JSONL log of keyed records.
pub struct JsonlLog<T> {
    path: PathBuf,
    config_hash: String,
    records: Vec<T>,
    done: BTreeSet<String>,
}

impl<T: Serialize + DeserializeOwned + Keyed> JsonlLog<T> {
    fn open(path: PathBuf, config_hash: &str) -> Result<Self, CliError> {
        let records = if path.exists() {
            drop_partial_line(&path)?;
            read_log(&path, config_hash)?
        } else {
            Vec::new()
        };
        let done = records.iter().map(|r: &T| r.key().to_string()).collect();
        Ok(Self { path, config_hash: config_hash.to_string(), records, done })
    }

    pub fn is_done(&self, key: &str) -> bool {
        self.done.contains(key)
    }

    pub fn append(&mut self, batch: Vec<T>) -> Result<(), CliError> {
        let f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut w = BufWriter::new(f);
        for record in batch {
            let line = Line { config_hash: self.config_hash.clone(), record };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
            self.done.insert(line.record.key().to_string());
            self.records.push(line.record);
        }
        w.flush()?;
        Ok(())
    }

    pub fn into_records(self) -> Vec<T> {
        self.records
    }
}

/// Cut a trailing line without its newline, left by an interrupted write.
fn drop_partial_line(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        File::options().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        prompt_id: String,
        x: f64,
    }

    impl Keyed for Rec {
        fn key(&self) -> &str {
            &self.prompt_id
        }
    }

    fn rec(id: &str, x: f64) -> Rec {
        Rec { prompt_id: id.into(), x }
    }

    #[test]
    fn log_resumes_and_survives_partial_line() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutputDir::open(tmp.path(), "run", "h1", false).unwrap();
        let mut log = out.log::<Rec>("r.jsonl").unwrap();
        log.append(vec![rec("a", 0.1), rec("b", 2.0)]).unwrap();
        let mut f = OpenOptions::new().append(true).open(out.path("r.jsonl")).unwrap();
        f.write_all(br#"{"config_hash":"h1","prompt_"#).unwrap();
        drop(f);

        let out = OutputDir::open(tmp.path(), "run", "h1", false).unwrap();
        let log = out.log::<Rec>("r.jsonl").unwrap();
        assert!(log.is_done("a") && log.is_done("b") && !log.is_done("c"));
        assert_eq!(log.into_records(), vec![rec("a", 0.1), rec("b", 2.0)]);
        let text = fs::read_to_string(out.path("r.jsonl")).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"config_hash":"h1","prompt_id":"a","x":0.1}"#);
    }

    #[test]
    fn mixing_configs_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        OutputDir::open(tmp.path(), "run", "h1", false).unwrap();
        assert!(matches!(OutputDir::open(tmp.path(), "run", "h2", false), Err(CliError::Config(_))));
        let out = OutputDir::open(tmp.path(), "run", "h2", true).unwrap();
        assert_eq!(fs::read_to_string(out.path(HASH_FILE)).unwrap(), "h2");

        fs::write(out.path("x.jsonl"), "{\"config_hash\":\"h9\",\"prompt_id\":\"a\",\"x\":1}\n").unwrap();
        assert!(matches!(read_log::<Rec>(&out.path("x.jsonl"), "h2"), Err(CliError::Config(_))));
    }

    #[test]
    fn unstamped_directory_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("run")).unwrap();
        fs::write(tmp.path().join("run/notes.txt"), "x").unwrap();
        assert!(OutputDir::open(tmp.path(), "run", "h", false).is_err());
    }

    #[test]
    fn csv_has_hash_column() {
        let tmp = tempfile::tempdir().unwrap();
        let out = OutputDir::open(tmp.path(), "t", "abc", false).unwrap();
        out.write_csv("t.csv", &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        assert_eq!(fs::read_to_string(out.path("t.csv")).unwrap(), "config_hash,a,b\nabc,1,\"x,y\"\n");
    }
}
