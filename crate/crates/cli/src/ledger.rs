//! Append-only record of completed runs, one JSON object per line, guarded by
//! an exclusive file lock so concurrent invocations can share it.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Content hash of everything that determines the run's output.
    pub hash: String,
    pub stage: String,
    pub artifacts: Vec<PathBuf>,
    pub secs: f64,
}

#[derive(Clone, Debug)]
pub struct RunLedger {
    root: PathBuf,
    path: PathBuf,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl RunLedger {
    /// The ledger of an output directory, created on first write.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        Ok(Self {
            root: dir.to_path_buf(),
            path: dir.join(LEDGER_FILE),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn handle(&self) -> Result<File, CliError> {
        OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&self.path)
            .map_err(io(&self.path))
    }

    fn read_locked(&self, file: &File) -> Result<Vec<LedgerEntry>, CliError> {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&self.path))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: LedgerEntry = serde_json::from_str(&line)
                .map_err(|e| CliError::Io(format!("{} line {}: {e}", self.path.display(), i + 1)))?;
            e.artifacts = e.artifacts.iter().map(|a| self.root.join(a)).collect();
            out.push(e);
        }
        Ok(out)
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, CliError> {
        let file = self.handle()?;
        file.lock_shared().map_err(io(&self.path))?;
        let out = self.read_locked(&file);
        file.unlock().map_err(io(&self.path))?;
        out
    }

    /// The latest completed run with this hash whose artifacts still exist.
    pub fn completed(&self, hash: &str) -> Result<Option<LedgerEntry>, CliError> {
        Ok(self
            .entries()?
            .into_iter()
            .rev()
            .find(|e| e.hash == hash && e.artifacts.iter().all(|a| a.exists())))
    }

    /// Appends an entry. Artifacts inside the output directory are stored
    /// relative to it, so the directory can be moved or compared across runs.
    pub fn record(&self, entry: &LedgerEntry) -> Result<(), CliError> {
        let mut stored = entry.clone();
        stored.artifacts = entry
            .artifacts
            .iter()
            .map(|a| a.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| a.clone()))
            .collect();
        let mut file = self.handle()?;
        file.lock().map_err(io(&self.path))?;
        let mut line = serde_json::to_string(&stored).map_err(|e| CliError::Io(e.to_string()))?;
        line.push('\n');
        let res = file.write_all(line.as_bytes()).and_then(|_| file.sync_data());
        file.unlock().map_err(io(&self.path))?;
        res.map_err(io(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(hash: &str, artifact: PathBuf) -> LedgerEntry {
        LedgerEntry {
            hash: hash.into(),
            stage: "generate".into(),
            artifacts: vec![artifact],
            secs: 0.5,
        }
    }

    #[test]
    fn records_survive_reopening() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a.txt");
        std::fs::write(&art, "x").unwrap();
        let ledger = RunLedger::open(dir.path()).unwrap();
        assert!(ledger.completed("h1").unwrap().is_none());
        ledger.record(&entry("h1", art.clone())).unwrap();
        let again = RunLedger::open(dir.path()).unwrap();
        assert_eq!(again.completed("h1").unwrap(), Some(entry("h1", art)));
        assert!(again.completed("h2").unwrap().is_none());
        let text = std::fs::read_to_string(again.path()).unwrap();
        assert!(text.contains("\"a.txt\"") && !text.contains(&*dir.path().to_string_lossy()));
    }

    #[test]
    fn missing_artifacts_void_an_entry() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = RunLedger::open(dir.path()).unwrap();
        ledger.record(&entry("h", dir.path().join("gone"))).unwrap();
        assert!(ledger.completed("h").unwrap().is_none());
    }

    #[test]
    fn concurrent_writers_keep_whole_lines() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a");
        std::fs::write(&art, "").unwrap();
        std::thread::scope(|s| {
            for t in 0..4 {
                let (dir, art) = (dir.path(), art.clone());
                s.spawn(move || {
                    let ledger = RunLedger::open(dir).unwrap();
                    for i in 0..25 {
                        ledger.record(&entry(&format!("{t}-{i}"), art.clone())).unwrap();
                    }
                });
            }
        });
        assert_eq!(RunLedger::open(dir.path()).unwrap().entries().unwrap().len(), 100);
    }
}
