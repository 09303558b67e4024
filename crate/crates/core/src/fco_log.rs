//! Global sequencing: a single total order over every call intent, fixed in
//! sealed batches before anything executes.
//!
//! The sequencer only orders. It never reads or writes service state; all it
//! knows about services is which names are deployed.
//!
//! On-disk layout (all integers little-endian):
//!
//! * `log.records`: one record per entry, `len: u32 | entry bytes | crc32: u32`.
//! * `log.batches`: one fixed 28-byte record per sealed batch,
//!   `number: u64 | first: u64 | last: u64 | crc32: u32`, where an empty
//!   batch has `last = first - 1`.
//!
//! A torn trailing record in either file is discarded on reopen.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ids::{Position, ServiceId};
use crate::value::{Address, Value};

pub const DEFAULT_MAX_GAS: u64 = 10_000_000;

const RECORDS_FILE: &str = "log.records";
const BATCHES_FILE: &str = "log.batches";
const BATCH_RECORD_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("gas limit {limit} exceeds global maximum {max}")]
    GasLimitExceeded { limit: u64, max: u64 },
    #[error("invalid intent: {0}")]
    InvalidIntent(String),
    #[error("range {start}..={end} is not within the sealed prefix (sealed through {sealed})")]
    UnsealedRange {
        start: Position,
        end: Position,
        sealed: Position,
    },
    #[error("corrupt log file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallIntent {
    pub caller: Address,
    pub target: ServiceId,
    pub method: String,
    pub args: Vec<Value>,
    pub gas_limit: u64,
}

impl CallIntent {
    pub fn new(
        caller: Address,
        target: ServiceId,
        method: impl Into<String>,
        args: Vec<Value>,
        gas_limit: u64,
    ) -> Self {
        CallIntent {
            caller,
            target,
            method: method.into(),
            args,
            gas_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub position: Position,
    pub intent: CallIntent,
    pub batch: u64,
}

impl LogEntry {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        out.extend_from_slice(&self.position.to_le_bytes());
        out.extend_from_slice(&self.batch.to_le_bytes());
        out.extend_from_slice(&self.intent.caller.0);
        put_str(&mut out, self.intent.target.as_str());
        put_str(&mut out, &self.intent.method);
        out.extend_from_slice(&self.intent.gas_limit.to_le_bytes());
        Value::List(self.intent.args.clone()).encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LogEntry, LogError> {
        let corrupt = |m: &str| LogError::Corrupt(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        let position = cur.u64().ok_or_else(|| corrupt("position"))?;
        let batch = cur.u64().ok_or_else(|| corrupt("batch"))?;
        let caller = Address(
            cur.take(20)
                .ok_or_else(|| corrupt("caller"))?
                .try_into()
                .unwrap(),
        );
        let target = cur.string().ok_or_else(|| corrupt("target"))?;
        let target = ServiceId::new(target).map_err(LogError::Corrupt)?;
        let method = cur.string().ok_or_else(|| corrupt("method"))?;
        let gas_limit = cur.u64().ok_or_else(|| corrupt("gas limit"))?;
        let args = match Value::decode(&bytes[cur.pos..]) {
            Ok(Value::List(args)) => args,
            Ok(_) => return Err(corrupt("args are not a list")),
            Err(e) => return Err(LogError::Corrupt(e.to_string())),
        };
        Ok(LogEntry {
            position,
            batch,
            intent: CallIntent {
                caller,
                target,
                method,
                args,
                gas_limit,
            },
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Option<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub number: u64,
    /// Inclusive; empty batches have `end == start - 1`.
    pub range: RangeInclusive<Position>,
    pub sealed: bool,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn len(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            self.range.end() - self.range.start() + 1
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    pub max_gas: u64,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            max_gas: DEFAULT_MAX_GAS,
        }
    }
}

struct LogFiles {
    dir: PathBuf,
    records: File,
    batches: File,
}

/// The sequencer's log.
pub struct FcoLog {
    config: LogConfig,
    deployed: BTreeSet<ServiceId>,
    entries: Vec<LogEntry>,
    sealed: Vec<Batch>,
    files: Option<LogFiles>,
}

/// Anything that accepts call intents for ordering.
pub trait Sequencer {
    fn submit(&mut self, intent: CallIntent) -> Result<Position, LogError>;
}

impl Sequencer for FcoLog {
    fn submit(&mut self, intent: CallIntent) -> Result<Position, LogError> {
        FcoLog::submit(self, intent)
    }
}

impl FcoLog {
    pub fn new(config: LogConfig) -> Self {
        FcoLog {
            config,
            deployed: BTreeSet::new(),
            entries: Vec::new(),
            sealed: Vec::new(),
            files: None,
        }
    }

    /// Opens (or creates) a file-backed log in `dir`, replaying whatever
    /// records survived.
    pub fn open(dir: &Path, config: LogConfig) -> Result<Self, LogError> {
        fs::create_dir_all(dir)?;
        let records_path = dir.join(RECORDS_FILE);
        let batches_path = dir.join(BATCHES_FILE);

        let raw = fs::read(&records_path).unwrap_or_default();
        let mut entries = Vec::new();
        let mut good = 0usize;
        while let Some((entry, next)) = read_record(&raw, good) {
            let entry = LogEntry::decode(entry)?;
            if entry.position != entries.len() as u64 + 1 {
                return Err(LogError::Corrupt(format!(
                    "entry at position {} out of sequence",
                    entry.position
                )));
            }
            entries.push(entry);
            good = next;
        }
        truncate_to(&records_path, good as u64)?;

        let raw = fs::read(&batches_path).unwrap_or_default();
        let mut sealed: Vec<Batch> = Vec::new();
        let mut good = 0usize;
        for chunk in raw.chunks_exact(BATCH_RECORD_LEN) {
            let body = &chunk[..24];
            let crc = u32::from_le_bytes(chunk[24..].try_into().unwrap());
            if crc32fast::hash(body) != crc {
                break;
            }
            let number = u64::from_le_bytes(body[0..8].try_into().unwrap());
            let first = u64::from_le_bytes(body[8..16].try_into().unwrap());
            let last = u64::from_le_bytes(body[16..24].try_into().unwrap());
            let expected_first = sealed.last().map_or(1, |b| b.range.end() + 1);
            if number != sealed.len() as u64 + 1 || first != expected_first || last + 1 < first {
                return Err(LogError::Corrupt(format!(
                    "batch {number} does not extend the log"
                )));
            }
            if last > entries.len() as u64 {
                return Err(LogError::Corrupt(format!(
                    "batch {number} covers missing entries"
                )));
            }
            sealed.push(Batch {
                number,
                range: first..=last,
                sealed: true,
            });
            good += BATCH_RECORD_LEN;
        }
        truncate_to(&batches_path, good as u64)?;

        let records = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)?;
        let batches = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&batches_path)?;
        Ok(FcoLog {
            config,
            deployed: BTreeSet::new(),
            entries,
            sealed,
            files: Some(LogFiles {
                dir: dir.to_path_buf(),
                records,
                batches,
            }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.files.as_ref().map(|f| f.dir.as_path())
    }

    pub fn register_service(&mut self, service: ServiceId) {
        self.deployed.insert(service);
    }

    pub fn is_deployed(&self, service: &ServiceId) -> bool {
        self.deployed.contains(service)
    }

    pub fn max_gas(&self) -> u64 {
        self.config.max_gas
    }

    /// Appends an intent to the open batch. The intent is not executed.
    pub fn submit(&mut self, intent: CallIntent) -> Result<Position, LogError> {
        if intent.method.is_empty() {
            return Err(LogError::InvalidIntent("empty method name".into()));
        }
        if intent.gas_limit > self.config.max_gas {
            return Err(LogError::GasLimitExceeded {
                limit: intent.gas_limit,
                max: self.config.max_gas,
            });
        }
        if !self.deployed.contains(&intent.target) {
            return Err(LogError::UnknownService(intent.target));
        }
        let entry = LogEntry {
            position: self.entries.len() as u64 + 1,
            batch: self.sealed.len() as u64 + 1,
            intent,
        };
        if let Some(files) = &mut self.files {
            let body = entry.encode();
            let mut rec = Vec::with_capacity(body.len() + 8);
            rec.extend_from_slice(&(body.len() as u32).to_le_bytes());
            rec.extend_from_slice(&body);
            rec.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
            files.records.write_all(&rec)?;
            files.records.flush()?;
        }
        let position = entry.position;
        self.entries.push(entry);
        Ok(position)
    }

    /// Seals the open batch (possibly empty) and opens the next one.
    pub fn seal_batch(&mut self) -> Result<Batch, LogError> {
        let first = self.sealed_frontier() + 1;
        let last = self.entries.len() as u64;
        let batch = Batch {
            number: self.sealed.len() as u64 + 1,
            range: first..=last,
            sealed: true,
        };
        if let Some(files) = &mut self.files {
            let mut body = Vec::with_capacity(BATCH_RECORD_LEN);
            body.extend_from_slice(&batch.number.to_le_bytes());
            body.extend_from_slice(&first.to_le_bytes());
            body.extend_from_slice(&last.to_le_bytes());
            let crc = crc32fast::hash(&body);
            body.extend_from_slice(&crc.to_le_bytes());
            files.batches.write_all(&body)?;
            files.batches.flush()?;
        }
        self.sealed.push(batch.clone());
        Ok(batch)
    }

    /// Last position covered by a sealed batch (0 if none).
    pub fn sealed_frontier(&self) -> Position {
        self.sealed.last().map_or(0, |b| *b.range.end())
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sealed_batches(&self) -> &[Batch] {
        &self.sealed
    }

    pub fn batch(&self, number: u64) -> Option<&Batch> {
        number
            .checked_sub(1)
            .and_then(|i| self.sealed.get(i as usize))
    }

    /// The currently open (unsealed) batch.
    pub fn open_batch(&self) -> Batch {
        Batch {
            number: self.sealed.len() as u64 + 1,
            range: self.sealed_frontier() + 1..=self.entries.len() as u64,
            sealed: false,
        }
    }

    fn check_sealed(&self, range: &RangeInclusive<Position>) -> Result<(), LogError> {
        let sealed = self.sealed_frontier();
        if range.is_empty() {
            return Ok(());
        }
        if *range.start() == 0 || *range.end() > sealed {
            return Err(LogError::UnsealedRange {
                start: *range.start(),
                end: *range.end(),
                sealed,
            });
        }
        Ok(())
    }

    pub fn read(&self, range: RangeInclusive<Position>) -> Result<Vec<LogEntry>, LogError> {
        self.check_sealed(&range)?;
        if range.is_empty() {
            return Ok(Vec::new());
        }
        let (s, e) = (*range.start() as usize, *range.end() as usize);
        Ok(self.entries[s - 1..e].to_vec())
    }

    /// Entries in `range` whose top-level target is in `targets`. Calls that
    /// an entry makes into other services are not visible here.
    pub fn subsequence(
        &self,
        targets: &BTreeSet<ServiceId>,
        range: RangeInclusive<Position>,
    ) -> Result<Vec<LogEntry>, LogError> {
        Ok(self
            .read(range)?
            .into_iter()
            .filter(|e| targets.contains(&e.intent.target))
            .collect())
    }
}

fn read_record(raw: &[u8], at: usize) -> Option<(&[u8], usize)> {
    let len = u32::from_le_bytes(raw.get(at..at + 4)?.try_into().unwrap()) as usize;
    let body = raw.get(at + 4..at + 4 + len)?;
    let crc = u32::from_le_bytes(raw.get(at + 4 + len..at + 8 + len)?.try_into().unwrap());
    (crc32fast::hash(body) == crc).then_some((body, at + 8 + len))
}

fn truncate_to(path: &Path, len: u64) -> io::Result<()> {
    match OpenOptions::new().write(true).open(path) {
        Ok(f) => f.set_len(len),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}
