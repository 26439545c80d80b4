//! The JSON Lines record store.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::icmp::{PingMeasurement, PingMethod};
use crate::transport::{ErrorClass, HttpVersion, QueryMeasurement, TimingBreakdown, TlsVersion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Doh,
    Ping,
}

/// One persisted observation: a DoH query or a ping round.
///
/// Fields that do not apply to the record kind are absent from the JSON.
/// Unknown fields survive a load/persist cycle through `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub kind: RecordKind,
    pub campaign_id: String,
    pub round: u64,
    pub vantage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolver_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub ts_utc: DateTime<Utc>,
    #[serde(default)]
    pub timing: TimingBreakdown,
    pub outcome: ErrorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rcode: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_version: Option<HttpVersion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls_version: Option<TlsVersion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtts_ms: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_rtt_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<PingMethod>,
    /// Address a ping round actually probed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl MeasurementRecord {
    pub fn from_query(campaign_id: &str, round: u64, m: &QueryMeasurement) -> Self {
        MeasurementRecord {
            kind: RecordKind::Doh,
            campaign_id: campaign_id.to_string(),
            round,
            vantage: m.vantage.clone(),
            resolver_url: Some(m.resolver_url.clone()),
            host: None,
            domain: Some(m.domain.clone()),
            ts_utc: m.timestamp_utc,
            timing: m.timing,
            outcome: m.outcome,
            http_status: m.http_status,
            rcode: m.rcode,
            http_version: m.http_version,
            tls_version: m.tls_version,
            rtts_ms: None,
            avg_rtt_ms: None,
            sent: None,
            received: None,
            method: None,
            address: None,
            detail: m.detail.clone(),
            extra: Map::new(),
        }
    }

    pub fn from_ping(campaign_id: &str, round: u64, m: &PingMeasurement) -> Self {
        MeasurementRecord {
            kind: RecordKind::Ping,
            campaign_id: campaign_id.to_string(),
            round,
            vantage: m.vantage.clone(),
            resolver_url: None,
            host: Some(m.host.clone()),
            domain: None,
            ts_utc: m.timestamp_utc,
            timing: TimingBreakdown::default(),
            outcome: ping_outcome(m),
            http_status: None,
            rcode: None,
            http_version: None,
            tls_version: None,
            rtts_ms: Some(m.rtts_ms.clone()),
            avg_rtt_ms: m.average_ms,
            sent: Some(m.sent),
            received: Some(m.received),
            method: Some(m.method),
            address: m.address,
            detail: m.detail.clone(),
            extra: Map::new(),
        }
    }

    pub fn is_doh(&self) -> bool {
        self.kind == RecordKind::Doh
    }

    pub fn is_ping(&self) -> bool {
        self.kind == RecordKind::Ping
    }

    pub fn is_success(&self) -> bool {
        self.outcome.is_success()
    }

    /// Hostname the record is about: the ping target, or the resolver
    /// URL's host for DoH records.
    pub fn hostname(&self) -> Option<String> {
        match self.kind {
            RecordKind::Ping => self.host.clone(),
            RecordKind::Doh => self
                .resolver_url
                .as_deref()
                .and_then(|u| url::Url::parse(u).ok())
                .and_then(|u| u.host_str().map(|h| h.trim_matches(|c| c == '[' || c == ']').to_ascii_lowercase())),
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("record serializes");
        line.push('\n');
        line
    }
}

/// Outcome for a ping round: Success once any reply arrived.
pub fn ping_outcome(m: &PingMeasurement) -> ErrorClass {
    if m.received > 0 {
        ErrorClass::Success
    } else if m.unresolved() {
        ErrorClass::NameResolutionFailure
    } else {
        ErrorClass::CouldNotConnect
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
}

/// Records read from one or more files.
#[derive(Debug, Default)]
pub struct LoadedRecords {
    pub records: Vec<MeasurementRecord>,
    pub warnings: Vec<String>,
}

/// Reads a JSON Lines file. A malformed final line without a trailing
/// newline is treated as an interrupted write: it is skipped with a warning.
pub fn load_records(path: &Path) -> Result<LoadedRecords, StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut data = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut data))
        .map_err(io_err)?;
    parse_records(&data).map_err(|(line, message)| StoreError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses JSON Lines text; errors carry the 1-based line number.
pub fn parse_records(data: &str) -> Result<LoadedRecords, (usize, String)> {
    let mut out = LoadedRecords::default();
    let unterminated = !data.is_empty() && !data.ends_with('\n');
    let lines: Vec<&str> = data.split_terminator('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MeasurementRecord>(line) {
            Ok(r) => out.records.push(r),
            Err(e) if unterminated && i + 1 == lines.len() => {
                out.warnings
                    .push(format!("line {}: ignoring truncated final record ({e})", i + 1));
            }
            Err(e) => return Err((i + 1, e.to_string())),
        }
    }
    Ok(out)
}

/// Loads and concatenates several files in order.
pub fn load_many<P: AsRef<Path>>(paths: &[P]) -> Result<LoadedRecords, StoreError> {
    let mut all = LoadedRecords::default();
    for p in paths {
        let loaded = load_records(p.as_ref())?;
        all.records.extend(loaded.records);
        all.warnings.extend(
            loaded
                .warnings
                .into_iter()
                .map(|w| format!("{}: {w}", p.as_ref().display())),
        );
    }
    Ok(all)
}

/// Append-only writer. Each record goes out as one `write` of a complete
/// line; [`RecordSink::sync`] makes everything written so far durable.
#[derive(Debug)]
pub struct RecordSink {
    path: PathBuf,
    file: File,
    written: u64,
}

impl RecordSink {
    /// Opens `path` for appending, creating it if needed. A partial line
    /// left by an interrupted writer is cut off so new records start on a
    /// fresh line; the number of discarded bytes is returned.
    pub fn open(path: &Path) -> Result<(RecordSink, u64), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let dropped = repair_tail(&mut file).map_err(io_err)?;
        Ok((
            RecordSink {
                path: path.to_path_buf(),
                file,
                written: 0,
            },
            dropped,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MeasurementRecord) -> Result<(), StoreError> {
        self.file
            .write_all(record.to_json_line().as_bytes())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.written += 1;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.file.sync_data().map_err(|source| StoreError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Records appended through this sink.
    pub fn written(&self) -> u64 {
        self.written
    }
}

/// Appends one record to `path` and syncs it.
pub fn persist_record(path: &Path, record: &MeasurementRecord) -> Result<(), StoreError> {
    let (mut sink, _) = RecordSink::open(path)?;
    sink.append(record)?;
    sink.sync()
}

fn repair_tail(file: &mut File) -> io::Result<u64> {
    let len = file.seek(SeekFrom::End(0))?;
    if len == 0 {
        return Ok(0);
    }
    let mut last = [0u8; 1];
    file.seek(SeekFrom::Start(len - 1))?;
    file.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(0);
    }
    file.seek(SeekFrom::Start(0))?;
    let mut keep = 0u64;
    let mut pos = 0u64;
    let mut reader = BufReader::new(&*file);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        pos += n as u64;
        if buf.last() == Some(&b'\n') {
            keep = pos;
        }
    }
    file.set_len(keep)?;
    file.sync_data()?;
    Ok(len - keep)
}
