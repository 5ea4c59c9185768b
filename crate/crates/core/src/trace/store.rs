use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::event::{EventKind, TraceEvent};
use super::TraceError;
use crate::model::{content_key, CacheKey};

const CHAIN_FIELD: &str = ",\"chain\":\"";

fn io(e: std::io::Error) -> TraceError {
    TraceError::Io(e.to_string())
}

/// Sidecar directory of a trace file: `trace.jsonl` → `trace.blobs`.
pub fn blob_dir(trace_path: &Path) -> PathBuf {
    trace_path.with_extension("blobs")
}

fn chain_next(prev: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

/// Splits a line into its chain-free body and chain value.
fn split_chain(line: &str) -> Option<(String, &str)> {
    let at = line.rfind(CHAIN_FIELD)?;
    let rest = line[at + CHAIN_FIELD.len()..].strip_suffix("\"}")?;
    if rest.len() != 64 || !rest.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    Some((format!("{}}}", &line[..at]), rest))
}

#[derive(Debug, Clone)]
pub enum BlobStore {
    Dir(PathBuf),
    Memory(BTreeMap<String, Vec<u8>>),
}

impl BlobStore {
    pub fn put(&mut self, bytes: &[u8]) -> Result<String, TraceError> {
        let hex = content_key(bytes).to_hex();
        match self {
            BlobStore::Memory(m) => {
                m.entry(hex.clone()).or_insert_with(|| bytes.to_vec());
            }
            BlobStore::Dir(dir) => {
                let path = dir.join(&hex);
                if !path.exists() {
                    let tmp = dir.join(format!(".{hex}.tmp"));
                    fs::write(&tmp, bytes).map_err(io)?;
                    fs::rename(&tmp, &path).map_err(io)?;
                }
            }
        }
        Ok(hex)
    }

    /// Reads a blob and checks it against its name.
    pub fn get(&self, hex: &str) -> Option<Vec<u8>> {
        let bytes = match self {
            BlobStore::Memory(m) => m.get(hex).cloned()?,
            BlobStore::Dir(dir) => {
                CacheKey::from_hex(hex)?;
                fs::read(dir.join(hex)).ok()?
            }
        };
        (content_key(&bytes).to_hex() == hex).then_some(bytes)
    }
}

enum Sink {
    File(BufWriter<File>),
    Memory,
}

/// Append-only trace writer. Assigns sequence numbers and the hash chain.
pub struct TraceWriter {
    sink: Sink,
    blobs: BlobStore,
    events: Vec<TraceEvent>,
    lines: Vec<String>,
    seq: u64,
    chain: String,
    start: Instant,
    offset_ms: u64,
    path: Option<PathBuf>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let dir = blob_dir(path);
        fs::create_dir_all(&dir).map_err(io)?;
        let file = File::create(path).map_err(io)?;
        Ok(Self::with_sink(Sink::File(BufWriter::new(file)), BlobStore::Dir(dir), Some(path.into())))
    }

    pub fn memory() -> Self {
        Self::with_sink(Sink::Memory, BlobStore::Memory(BTreeMap::new()), None)
    }

    fn with_sink(sink: Sink, blobs: BlobStore, path: Option<PathBuf>) -> Self {
        TraceWriter {
            sink,
            blobs,
            events: Vec::new(),
            lines: Vec::new(),
            seq: 0,
            chain: String::new(),
            start: Instant::now(),
            offset_ms: 0,
            path,
        }
    }

    /// Reopens a trace file, cutting it back to its first `len` lines,
    /// which must end at `chain`.
    pub fn resume(path: &Path, len: u64, chain: &str, elapsed_ms: u64) -> Result<Self, TraceError> {
        let text = fs::read_to_string(path).map_err(io)?;
        let kept: Vec<&str> = text.lines().take(len as usize).collect();
        if kept.len() as u64 != len {
            return Err(TraceError::CorruptCheckpoint(format!("trace has fewer than {len} lines")));
        }
        let last = kept.last().and_then(|l| split_chain(l)).map(|(_, c)| c).unwrap_or("");
        if last != chain {
            return Err(TraceError::CorruptCheckpoint("trace does not match the checkpoint chain".into()));
        }
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(path, body).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        let mut w = Self::with_sink(Sink::File(BufWriter::new(file)), BlobStore::Dir(blob_dir(path)), Some(path.into()));
        w.seq = len;
        w.chain = chain.to_string();
        w.offset_ms = elapsed_ms;
        Ok(w)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.offset_ms + self.start.elapsed().as_millis() as u64
    }

    pub fn put_blob(&mut self, bytes: &[u8]) -> Result<String, TraceError> {
        self.blobs.put(bytes)
    }

    pub fn put_json<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<String, TraceError> {
        self.put_blob(&serde_json::to_vec(value).map_err(|e| TraceError::Format(e.to_string()))?)
    }

    pub fn emit(&mut self, mut ev: TraceEvent) -> Result<u64, TraceError> {
        self.seq += 1;
        ev.seq = self.seq;
        ev.wall_time_ms = self.elapsed_ms();
        ev.chain.clear();
        let body = serde_json::to_string(&ev).map_err(|e| TraceError::Format(e.to_string()))?;
        let chain = chain_next(&self.chain, &body);
        let line = format!("{}{CHAIN_FIELD}{chain}\"}}", &body[..body.len() - 1]);
        match &mut self.sink {
            Sink::File(f) => writeln!(f, "{line}").map_err(io)?,
            Sink::Memory => {
                self.lines.push(line);
            }
        }
        ev.chain = chain.clone();
        self.chain = chain;
        if matches!(self.sink, Sink::Memory) {
            self.events.push(ev);
        }
        Ok(self.seq)
    }

    /// Pushes buffered lines to disk.
    pub fn flush(&mut self) -> Result<(), TraceError> {
        if let Sink::File(f) = &mut self.sink {
            f.flush().map_err(io)?;
            f.get_ref().sync_data().map_err(io)?;
        }
        Ok(())
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn chain(&self) -> &str {
        &self.chain
    }

    /// Closes the writer; memory traces come back as a log.
    pub fn finish(mut self) -> Result<Option<TraceLog>, TraceError> {
        self.flush()?;
        Ok(match self.sink {
            Sink::Memory => Some(TraceLog { events: self.events, lines: self.lines, blobs: self.blobs }),
            Sink::File(_) => None,
        })
    }
}

/// A trace read back for replay or reporting.
#[derive(Debug, Clone)]
pub struct TraceLog {
    pub events: Vec<TraceEvent>,
    lines: Vec<String>,
    blobs: BlobStore,
}

impl TraceLog {
    /// Parses every line; an unparsable line is reported as a divergence at
    /// its position.
    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let text = fs::read_to_string(path).map_err(io)?;
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            let ev: TraceEvent = serde_json::from_str(line)
                .map_err(|e| TraceError::Divergence { seq: i as u64 + 1, reason: format!("unparsable line: {e}") })?;
            events.push(ev);
        }
        if events.is_empty() {
            return Err(TraceError::Incomplete);
        }
        Ok(TraceLog { events, lines, blobs: BlobStore::Dir(blob_dir(path)) })
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn is_complete(&self) -> bool {
        self.events.last().is_some_and(|e| e.kind == EventKind::RunEnd)
    }

    /// Checks sequence numbers, the hash chain and every referenced blob.
    pub fn verify(&self) -> Result<(), TraceError> {
        let mut prev = String::new();
        for (i, (line, ev)) in self.lines.iter().zip(&self.events).enumerate() {
            let seq = i as u64 + 1;
            let diverge = |reason: &str| TraceError::Divergence { seq, reason: reason.into() };
            if ev.seq != seq {
                return Err(diverge("sequence number out of order"));
            }
            let (body, chain) = split_chain(line).ok_or_else(|| diverge("missing chain"))?;
            if chain_next(&prev, &body) != chain || ev.chain != chain {
                return Err(diverge("chain mismatch"));
            }
            for d in ev.inputs.iter().chain(&ev.outputs) {
                if self.blobs.get(d).is_none() {
                    return Err(diverge(&format!("blob {d} missing or altered")));
                }
            }
            prev = chain.to_string();
        }
        if !self.is_complete() {
            return Err(TraceError::Incomplete);
        }
        Ok(())
    }

    pub fn blob(&self, hex: &str) -> Result<Vec<u8>, TraceError> {
        self.blobs.get(hex).ok_or_else(|| TraceError::Format(format!("blob {hex} missing or altered")))
    }

    pub fn blob_json<T: DeserializeOwned>(&self, hex: &str) -> Result<T, TraceError> {
        serde_json::from_slice(&self.blob(hex)?).map_err(|e| TraceError::Format(format!("blob {hex}: {e}")))
    }

    pub fn first(&self, kind: EventKind) -> Option<&TraceEvent> {
        self.events.iter().find(|e| e.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn normalized(&self) -> Vec<TraceEvent> {
        self.events.iter().map(TraceEvent::normalized).collect()
    }

    /// Writes the lines and blobs to a new trace location.
    pub fn write_to(&self, path: &Path) -> Result<(), TraceError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut target = BlobStore::Dir(blob_dir(path));
        fs::create_dir_all(blob_dir(path)).map_err(io)?;
        for ev in &self.events {
            for d in ev.inputs.iter().chain(&ev.outputs) {
                target.put(&self.blob(d)?)?;
            }
        }
        let mut body = self.lines.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(io)
    }
}
