//! Record/replay cassettes for deterministic offline runs.
//!
//! A cassette is a JSONL file of `{digest, role, template_id, response, meta}`
//! records. The digest is a stable content hash of the logical request —
//! timestamps, latency, and credentials never enter it — so a recording made
//! once keeps replaying as long as the prompts and payloads are unchanged.
//! In replay mode a digest miss is an error, never a live call.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub digest: String,
    pub role: String,
    #[serde(default)]
    pub template_id: Option<String>,
    pub response: String,
    #[serde(default)]
    pub meta: CassetteMeta,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CassetteMeta {
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub recorded_at: u64,
}

/// Append-only cassette writer (record mode).
#[derive(Debug)]
pub struct CassetteWriter {
    path: PathBuf,
    file: fs::File,
}

impl CassetteWriter {
    pub fn create(path: &Path) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| GatewayError::CassetteIo {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::CassetteIo {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(CassetteWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(
        &mut self,
        digest: &str,
        role: &str,
        template_id: Option<&str>,
        response: &str,
        latency_ms: u64,
    ) -> Result<(), GatewayError> {
        let record = CassetteRecord {
            digest: digest.to_string(),
            role: role.to_string(),
            template_id: template_id.map(str::to_string),
            response: response.to_string(),
            meta: CassetteMeta {
                latency_ms,
                recorded_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            },
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| GatewayError::CassetteIo {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Replay store: an immutable digest → response map, safe for lock-free
/// concurrent reads. Duplicate digests keep the first recording.
#[derive(Debug, Default)]
pub struct ReplayStore {
    responses: HashMap<String, String>,
}

impl ReplayStore {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = fs::File::open(path).map_err(|e| GatewayError::CassetteIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let reader = BufReader::new(file);
        let mut responses = HashMap::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::CassetteIo {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CassetteRecord =
                serde_json::from_str(&line).map_err(|e| GatewayError::CassetteIo {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", line_no + 1),
                })?;
            responses.entry(record.digest).or_insert(record.response);
        }
        Ok(ReplayStore { responses })
    }

    pub fn lookup(&self, digest: &str) -> Result<&str, GatewayError> {
        self.responses
            .get(digest)
            .map(String::as_str)
            .ok_or_else(|| GatewayError::DigestMiss {
                digest: digest.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}
