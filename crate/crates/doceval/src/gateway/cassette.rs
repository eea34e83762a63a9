//! Request/response cassettes: an append-only, line-delimited store keyed
//! by request hash, enabling deterministic offline replay.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, ModelResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// Call providers on misses and append the response.
    Record,
    /// Serve stored responses only; never perform network activity.
    Replay,
    /// Always call providers; store nothing.
    Passthrough,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    hash: String,
    response: ModelResponse,
}

/// The entry store. File-backed cassettes are line-delimited JSON records
/// of `(hash, response)`; replay cassettes are opened read-only and
/// [`Cassette::insert`] refuses to touch them.
pub struct Cassette {
    mode: CassetteMode,
    path: Option<PathBuf>,
    entries: BTreeMap<String, ModelResponse>,
}

impl Cassette {
    pub fn in_memory(mode: CassetteMode) -> Self {
        Self {
            mode,
            path: None,
            entries: BTreeMap::new(),
        }
    }

    /// Opens a file-backed cassette. In replay mode the file must exist and
    /// is opened read-only; in record mode existing entries are loaded and
    /// new ones are appended.
    pub fn open(path: impl AsRef<Path>, mode: CassetteMode) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        match mode {
            CassetteMode::Replay => {
                let file = fs::OpenOptions::new()
                    .read(true)
                    .open(&path)
                    .map_err(|e| GatewayError::CassetteIo(format!("{}: {e}", path.display())))?;
                Self::load_entries(BufReader::new(file), &mut entries)?;
            }
            CassetteMode::Record => {
                if path.exists() {
                    let file = fs::File::open(&path)
                        .map_err(|e| GatewayError::CassetteIo(format!("{}: {e}", path.display())))?;
                    Self::load_entries(BufReader::new(file), &mut entries)?;
                }
            }
            CassetteMode::Passthrough => {}
        }
        Ok(Self {
            mode,
            path: Some(path),
            entries,
        })
    }

    fn load_entries<R: BufRead>(
        reader: R,
        entries: &mut BTreeMap<String, ModelResponse>,
    ) -> Result<(), GatewayError> {
        for line in reader.lines() {
            let line = line.map_err(|e| GatewayError::CassetteIo(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CassetteLine = serde_json::from_str(&line)
                .map_err(|e| GatewayError::CassetteIo(format!("bad cassette line: {e}")))?;
            // Append-only files may carry re-recordings; the last one wins.
            entries.insert(parsed.hash, parsed.response);
        }
        Ok(())
    }

    /// A replay-mode view over an existing cassette's entries.
    pub fn replay_of(other: Cassette) -> Self {
        Self {
            mode: CassetteMode::Replay,
            path: other.path,
            entries: other.entries,
        }
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, hash: &str) -> Option<&ModelResponse> {
        self.entries.get(hash)
    }

    /// Stores a response under its request hash, appending to the backing
    /// file when present. Exactly one entry is kept per hash.
    pub fn insert(&mut self, hash: &str, response: &ModelResponse) -> Result<(), GatewayError> {
        if self.mode == CassetteMode::Replay {
            return Err(GatewayError::ReadOnlyCassette);
        }
        if self.entries.contains_key(hash) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CassetteLine {
                hash: hash.to_string(),
                response: response.clone(),
            })
            .map_err(|e| GatewayError::CassetteIo(e.to_string()))?;
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::CassetteIo(format!("{}: {e}", path.display())))?;
            writeln!(file, "{line}").map_err(|e| GatewayError::CassetteIo(e.to_string()))?;
        }
        self.entries.insert(hash.to_string(), response.clone());
        Ok(())
    }

    /// Digest over the sorted entry set, independent of recording order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (hash, response) in &self.entries {
            hasher.update(hash.as_bytes());
            hasher.update(
                serde_json::to_vec(response).expect("responses serialize"),
            );
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FinishState;

    fn response(text: &str) -> ModelResponse {
        ModelResponse {
            raw_text: text.to_string(),
            input_units: 10,
            output_units: 5,
            latency_seconds: 0.5,
            finish_state: FinishState::Complete,
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");

        let mut recording = Cassette::open(&path, CassetteMode::Record).unwrap();
        recording.insert("h1", &response("one")).unwrap();
        recording.insert("h2", &response("two")).unwrap();
        // Duplicate hash: file keeps one line per hash.
        recording.insert("h1", &response("one")).unwrap();

        let replaying = Cassette::open(&path, CassetteMode::Replay).unwrap();
        assert_eq!(replaying.len(), 2);
        assert_eq!(replaying.lookup("h1").unwrap().raw_text, "one");
        assert_eq!(replaying.digest(), recording.digest());
    }

    #[test]
    fn replay_requires_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Cassette::open(dir.path().join("missing.jsonl"), CassetteMode::Replay).is_err());
    }

    #[test]
    fn replay_cassette_refuses_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let mut recording = Cassette::open(&path, CassetteMode::Record).unwrap();
        recording.insert("h1", &response("one")).unwrap();

        let mut replaying = Cassette::open(&path, CassetteMode::Replay).unwrap();
        assert!(matches!(
            replaying.insert("h2", &response("two")),
            Err(GatewayError::ReadOnlyCassette)
        ));
    }

    #[test]
    fn digest_is_order_independent() {
        let mut a = Cassette::in_memory(CassetteMode::Record);
        a.insert("h1", &response("one")).unwrap();
        a.insert("h2", &response("two")).unwrap();
        let mut b = Cassette::in_memory(CassetteMode::Record);
        b.insert("h2", &response("two")).unwrap();
        b.insert("h1", &response("one")).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
