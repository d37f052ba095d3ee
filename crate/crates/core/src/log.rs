//! Append-only JSON-lines log, one file per session.
//!
//! Each record is serialized to a single line and written with one
//! `write_all` on a file opened in append mode. On reload a final line that
//! does not parse (an interrupted write) is skipped; a bad line anywhere
//! else is reported as corruption.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: line {line} is corrupt: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("invalid session id {0:?}")]
    InvalidSession(String),
}

/// Records read back from a log file.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// A torn final line was found and ignored.
    pub truncated_tail: bool,
}

/// Appends one record. A torn final line left by an earlier crash is cut
/// off first so that it cannot merge with the new record.
pub fn append<T: Serialize>(path: &Path, record: &T) -> Result<(), LogError> {
    let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
    line.push(b'\n');
    drop_torn_tail(path)?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    f.sync_data()?;
    Ok(())
}

fn drop_torn_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>, LogError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    // Anything after the last LF is an unfinished write, whatever it holds;
    // the next append drops it too.
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let truncated_tail = complete < bytes.len();
    let mut records = Vec::new();
    for (i, l) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if l.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = serde_json::from_slice(l).map_err(|e| LogError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(Loaded { records, truncated_tail })
}

/// Session ids double as file names: 1 to 128 ASCII alphanumerics, `-` or `_`.
pub fn valid_session(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Directory of per-session logs (`<dir>/<session>.jsonl`).
#[derive(Debug)]
pub struct LogStore<T> {
    dir: PathBuf,
    write_lock: Mutex<()>,
    _records: PhantomData<fn() -> T>,
}

impl<T: Serialize + DeserializeOwned> LogStore<T> {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(LogStore {
            dir,
            write_lock: Mutex::new(()),
            _records: PhantomData,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, session: &str) -> Result<PathBuf, LogError> {
        if !valid_session(session) {
            return Err(LogError::InvalidSession(session.to_string()));
        }
        Ok(self.dir.join(format!("{session}.jsonl")))
    }

    pub fn append(&self, session: &str, record: &T) -> Result<(), LogError> {
        let path = self.path_for(session)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        append(&path, record)
    }

    pub fn load(&self, session: &str) -> Result<Loaded<T>, LogError> {
        load(&self.path_for(session)?)
    }

    /// Session ids that have a log file.
    pub fn sessions(&self) -> Result<Vec<String>, LogError> {
        let mut out: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".jsonl").map(str::to_string))
            .collect();
        out.sort();
        Ok(out)
    }
}

/// Appends bytes without framing; used to simulate a torn write.
#[doc(hidden)]
pub fn append_raw(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
        text: String,
    }

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let store: LogStore<Rec> = LogStore::open(dir.path()).unwrap();
        let recs: Vec<Rec> = (0..3).map(|n| Rec { n, text: format!("line\n{n}") }).collect();
        for r in &recs {
            store.append("s1", r).unwrap();
        }
        assert_eq!(store.load("s1").unwrap(), Loaded { records: recs.clone(), truncated_tail: false });

        append_raw(&store.path_for("s1").unwrap(), br#"{"n":3,"te"#).unwrap();
        assert_eq!(store.load("s1").unwrap(), Loaded { records: recs.clone(), truncated_tail: true });
        assert_eq!(store.sessions().unwrap(), vec!["s1".to_string()]);

        // The next append discards the fragment.
        let next = Rec { n: 4, text: "after crash".into() };
        store.append("s1", &next).unwrap();
        let loaded = store.load("s1").unwrap();
        assert!(!loaded.truncated_tail);
        assert_eq!(loaded.records.len(), 4);
        assert_eq!(loaded.records[3], next);
        assert!(store.load("nobody").unwrap().records.is_empty());
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        append_raw(&path, b"{\"n\":1,\"text\":\"a\"}\nnot json\n{\"n\":2,\"text\":\"b\"}\n").unwrap();
        assert!(matches!(load::<Rec>(&path), Err(LogError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn session_ids_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let store: LogStore<Rec> = LogStore::open(dir.path()).unwrap();
        for bad in ["", "../etc", "a b", "x/y"] {
            assert!(matches!(store.path_for(bad), Err(LogError::InvalidSession(_))));
        }
    }
}
