//! Append-only transfer journal.
//!
//! One JSON record per line. The first record echoes the transfer spec, one
//! `file` record per file echoes its chunk plan, and `chunk` records track
//! each chunk through dispatched → stored → verified (or failed). Only records
//! that commit verified state are synced to disk before the append returns.
//!
//! On load, a final line that is incomplete or unparsable is ignored as a
//! torn write; damage anywhere else is an error.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::TransferSpec;
use crate::planner::{ChunkDescriptor, ChunkPlan};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o error on {path:?}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("journal line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("journal does not match this transfer: {0}")]
    Incompatible(String),
    #[error("journal writer stopped after {0} records")]
    Crashed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkState {
    Dispatched,
    Stored,
    Verified,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEcho {
    pub file_id: u64,
    pub source: String,
    pub destination: String,
    pub file_size: u64,
    pub chunk_size: u64,
    pub chunk_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordBody {
    Transfer {
        spec: TransferSpec,
    },
    File(FileEcho),
    Chunk {
        file_id: u64,
        chunk_index: u64,
        attempt: u32,
        state: ChunkState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_digest: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        destination_digest: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub ts_ms: u64,
    pub transfer_id: String,
    #[serde(flatten)]
    pub body: RecordBody,
}

impl JournalRecord {
    fn must_sync(&self) -> bool {
        match &self.body {
            RecordBody::Chunk { state, .. } => *state == ChunkState::Verified,
            _ => true,
        }
    }
}

pub fn new_transfer_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct JournalWriter {
    path: PathBuf,
    file: File,
    transfer_id: String,
    next_seq: u64,
    appended: u64,
    crash_after: Option<u64>,
}

impl JournalWriter {
    /// Starts a new journal, replacing any file at `path`.
    pub fn create(path: &Path, transfer_id: &str) -> Result<Self, JournalError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        Ok(JournalWriter {
            path: path.to_path_buf(),
            file,
            transfer_id: transfer_id.to_string(),
            next_seq: 1,
            appended: 0,
            crash_after: None,
        })
    }

    /// Reopens a loaded journal for appending. A torn tail is cut off first.
    pub fn resume(path: &Path, state: &ResumeState) -> Result<Self, JournalError> {
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        file.set_len(state.valid_len).map_err(|e| io_err(path, e))?;
        let mut file = file;
        use std::io::Seek;
        file.seek(io::SeekFrom::End(0))
            .map_err(|e| io_err(path, e))?;
        Ok(JournalWriter {
            path: path.to_path_buf(),
            file,
            transfer_id: state.transfer_id.clone(),
            next_seq: state.last_seq + 1,
            appended: 0,
            crash_after: None,
        })
    }

    /// Makes every append after the first `n` fail, as if the process died
    /// at that record boundary.
    pub fn crash_after(&mut self, n: Option<u64>) {
        self.crash_after = n;
    }

    pub fn transfer_id(&self) -> &str {
        &self.transfer_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, body: RecordBody) -> Result<u64, JournalError> {
        if self.crash_after.is_some_and(|n| self.appended >= n) {
            return Err(JournalError::Crashed(self.appended));
        }
        let record = JournalRecord {
            seq: self.next_seq,
            ts_ms: now_ms(),
            transfer_id: self.transfer_id.clone(),
            body,
        };
        let mut line = serde_json::to_vec(&record).expect("journal records always serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|e| io_err(&self.path, e))?;
        if record.must_sync() {
            self.file.sync_data().map_err(|e| io_err(&self.path, e))?;
        }
        self.next_seq += 1;
        self.appended += 1;
        Ok(record.seq)
    }
}

fn io_err(path: &Path, source: io::Error) -> JournalError {
    JournalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEntry {
    pub state: ChunkState,
    pub attempt: u32,
    pub source_digest: Option<String>,
    pub destination_digest: Option<String>,
}

/// Replayed journal contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub transfer_id: String,
    pub spec: Option<TransferSpec>,
    pub files: BTreeMap<u64, FileEcho>,
    pub chunks: BTreeMap<(u64, u64), ChunkEntry>,
    pub last_seq: u64,
    /// Length of the journal prefix made of complete, valid records.
    pub valid_len: u64,
}

impl ResumeState {
    pub fn verified(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.chunks
            .iter()
            .filter(|(_, e)| e.state == ChunkState::Verified)
            .map(|(k, _)| *k)
    }

    pub fn is_verified(&self, file_id: u64, chunk_index: u64) -> bool {
        self.chunks
            .get(&(file_id, chunk_index))
            .is_some_and(|e| e.state == ChunkState::Verified)
    }

    /// Checks that `plan` is the plan this journal was written for.
    pub fn check_plan(&self, plan: &ChunkPlan) -> Result<(), JournalError> {
        let Some(echo) = self.files.get(&plan.file_id) else {
            return Err(JournalError::Incompatible(format!(
                "file {} is not in the journal",
                plan.file_id
            )));
        };
        if echo.file_size != plan.file_size {
            return Err(JournalError::Incompatible(format!(
                "file {} was {} bytes, now {}",
                plan.file_id, echo.file_size, plan.file_size
            )));
        }
        if echo.chunk_size != plan.chunk_size || echo.chunk_count != plan.chunk_count() {
            return Err(JournalError::Incompatible(format!(
                "file {} was planned with chunk size {}, now {}",
                plan.file_id, echo.chunk_size, plan.chunk_size
            )));
        }
        Ok(())
    }
}

fn advances(prev: &ChunkEntry, attempt: u32, state: ChunkState) -> bool {
    if prev.state == ChunkState::Verified {
        return false;
    }
    if attempt != prev.attempt {
        return attempt > prev.attempt;
    }
    match (prev.state, state) {
        // A chunk whose session was lost, or whose run was interrupted, is
        // dispatched again under the same attempt.
        (ChunkState::Dispatched, ChunkState::Dispatched) => true,
        (ChunkState::Failed, _) => false,
        (_, ChunkState::Failed) => true,
        (p, s) => s > p,
    }
}

/// Replays the journal at `path`.
pub fn load(path: &Path) -> Result<ResumeState, JournalError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| io_err(path, e))?;
    replay(&raw)
}

/// Replays journal bytes. Pure: the same bytes always give the same state.
pub fn replay(raw: &[u8]) -> Result<ResumeState, JournalError> {
    let mut lines: Vec<(usize, &[u8], bool)> = Vec::new();
    let mut start = 0;
    while start < raw.len() {
        match raw[start..].iter().position(|&b| b == b'\n') {
            Some(i) => {
                lines.push((start, &raw[start..start + i], true));
                start += i + 1;
            }
            None => {
                lines.push((start, &raw[start..], false));
                start = raw.len();
            }
        }
    }

    let mut state = ResumeState {
        transfer_id: String::new(),
        spec: None,
        files: BTreeMap::new(),
        chunks: BTreeMap::new(),
        last_seq: 0,
        valid_len: 0,
    };
    let count = lines.len();
    for (i, (at, line, complete)) in lines.into_iter().enumerate() {
        let is_last = i + 1 == count;
        let parsed: Result<JournalRecord, String> = if !complete {
            Err("incomplete line".into())
        } else {
            serde_json::from_slice(line).map_err(|e| e.to_string())
        };
        let record = match parsed {
            Ok(r) => r,
            Err(_) if is_last => break,
            Err(reason) => {
                return Err(JournalError::Corrupt {
                    line: i + 1,
                    reason,
                })
            }
        };
        apply(&mut state, record).map_err(|reason| JournalError::Corrupt {
            line: i + 1,
            reason,
        })?;
        state.valid_len = (at + line.len() + 1) as u64;
    }
    Ok(state)
}

fn apply(state: &mut ResumeState, record: JournalRecord) -> Result<(), String> {
    if record.seq <= state.last_seq {
        return Err(format!(
            "sequence {} does not follow {}",
            record.seq, state.last_seq
        ));
    }
    if state.transfer_id.is_empty() {
        state.transfer_id = record.transfer_id.clone();
    } else if state.transfer_id != record.transfer_id {
        return Err(format!("foreign transfer id {}", record.transfer_id));
    }
    state.last_seq = record.seq;
    match record.body {
        RecordBody::Transfer { spec } => state.spec = Some(spec),
        RecordBody::File(echo) => {
            if let Some(prev) = state.files.get(&echo.file_id) {
                if *prev != echo {
                    return Err(format!("file {} re-planned differently", echo.file_id));
                }
            }
            state.files.insert(echo.file_id, echo);
        }
        RecordBody::Chunk {
            file_id,
            chunk_index,
            attempt,
            state: chunk_state,
            source_digest,
            destination_digest,
        } => {
            let next = ChunkEntry {
                state: chunk_state,
                attempt,
                source_digest,
                destination_digest,
            };
            match state.chunks.get_mut(&(file_id, chunk_index)) {
                Some(prev) => {
                    if !advances(prev, attempt, chunk_state) {
                        return Err(format!(
                            "chunk {file_id}/{chunk_index} went from {:?}#{} to {:?}#{}",
                            prev.state, prev.attempt, chunk_state, attempt
                        ));
                    }
                    let keep_src = prev.source_digest.take();
                    *prev = ChunkEntry {
                        source_digest: next.source_digest.or(if prev.attempt == attempt {
                            keep_src
                        } else {
                            None
                        }),
                        ..next
                    };
                }
                None => {
                    state.chunks.insert((file_id, chunk_index), next);
                }
            }
        }
    }
    Ok(())
}

/// What a resumed transfer still has to do for one plan.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pending {
    /// Chunks whose payload must be (re)sent, with the attempt number to use.
    pub retransmit: Vec<(ChunkDescriptor, u32)>,
    /// Chunks durably stored but not yet verified, with the recorded source
    /// digest when one exists. These need a destination re-read, not a resend.
    pub stored: Vec<(ChunkDescriptor, u32, Option<String>)>,
    pub verified: Vec<ChunkDescriptor>,
}

impl Pending {
    pub fn is_empty(&self) -> bool {
        self.retransmit.is_empty() && self.stored.is_empty()
    }
}

pub fn pending_chunks(state: &ResumeState, plan: &ChunkPlan) -> Pending {
    let mut out = Pending::default();
    for c in &plan.chunks {
        match state.chunks.get(&(c.file_id, c.chunk_index)) {
            None => out.retransmit.push((*c, 0)),
            Some(e) => match e.state {
                ChunkState::Verified => out.verified.push(*c),
                ChunkState::Stored => out.stored.push((*c, e.attempt, e.source_digest.clone())),
                ChunkState::Dispatched => out.retransmit.push((*c, e.attempt)),
                ChunkState::Failed => out.retransmit.push((*c, e.attempt + 1)),
            },
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::plan_with_size;

    fn chunk(file_id: u64, idx: u64, attempt: u32, state: ChunkState) -> RecordBody {
        RecordBody::Chunk {
            file_id,
            chunk_index: idx,
            attempt,
            state,
            source_digest: (state >= ChunkState::Stored).then(|| "aa".repeat(16)),
            destination_digest: None,
        }
    }

    fn file(plan: &ChunkPlan) -> RecordBody {
        RecordBody::File(FileEcho {
            file_id: plan.file_id,
            source: "src".into(),
            destination: "dst".into(),
            file_size: plan.file_size,
            chunk_size: plan.chunk_size,
            chunk_count: plan.chunk_count(),
        })
    }

    #[test]
    fn verified_chunk_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let plan = plan_with_size(0, 600, 100);
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.append(file(&plan)).unwrap();
        w.append(chunk(0, 5, 0, ChunkState::Dispatched)).unwrap();
        w.append(chunk(0, 5, 0, ChunkState::Stored)).unwrap();
        w.append(chunk(0, 5, 0, ChunkState::Verified)).unwrap();
        let st = load(&p).unwrap();
        assert!(st.is_verified(0, 5));
        assert_eq!(st.last_seq, 4);
    }

    #[test]
    fn sequence_numbers_increase_across_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        let a = w.append(chunk(0, 0, 0, ChunkState::Dispatched)).unwrap();
        let b = w.append(chunk(0, 1, 0, ChunkState::Dispatched)).unwrap();
        assert!(b > a);
        drop(w);
        let st = load(&p).unwrap();
        let mut w = JournalWriter::resume(&p, &st).unwrap();
        let c = w.append(chunk(0, 0, 0, ChunkState::Stored)).unwrap();
        assert_eq!(c, b + 1);
        assert_eq!(load(&p).unwrap().last_seq, c);
    }

    #[test]
    fn pending_after_two_of_four_verified() {
        let plan = plan_with_size(0, 400, 100);
        let mut raw = Vec::new();
        let mut seq = 0;
        let mut push = |body| {
            seq += 1;
            let r = JournalRecord {
                seq,
                ts_ms: 0,
                transfer_id: "t".into(),
                body,
            };
            raw.extend(serde_json::to_vec(&r).unwrap());
            raw.push(b'\n');
        };
        push(file(&plan));
        for i in 0..2 {
            push(chunk(0, i, 0, ChunkState::Dispatched));
            push(chunk(0, i, 0, ChunkState::Stored));
            push(chunk(0, i, 0, ChunkState::Verified));
        }
        let st = replay(&raw).unwrap();
        st.check_plan(&plan).unwrap();
        let pending = pending_chunks(&st, &plan);
        let idx: Vec<u64> = pending
            .retransmit
            .iter()
            .map(|(c, _)| c.chunk_index)
            .collect();
        assert_eq!(idx, vec![2, 3]);
        assert!(pending.stored.is_empty());
        assert_eq!(pending.verified.len(), 2);
    }

    #[test]
    fn empty_and_full_pending() {
        let plan = plan_with_size(0, 300, 100);
        let st = replay(b"").unwrap();
        assert_eq!(pending_chunks(&st, &plan).retransmit.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        for i in 0..3 {
            w.append(chunk(0, i, 0, ChunkState::Verified)).unwrap();
        }
        let pending = pending_chunks(&load(&p).unwrap(), &plan);
        assert!(pending.is_empty());
    }

    #[test]
    fn stored_chunk_is_reverified_not_resent() {
        let plan = plan_with_size(0, 200, 100);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Dispatched)).unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Stored)).unwrap();
        w.append(chunk(0, 1, 2, ChunkState::Failed)).unwrap();
        let pending = pending_chunks(&load(&p).unwrap(), &plan);
        assert_eq!(pending.stored.len(), 1);
        assert_eq!(
            pending.stored[0].2.as_deref(),
            Some("aa".repeat(16).as_str())
        );
        assert_eq!(pending.retransmit, vec![(plan.chunks[1], 3)]);
    }

    #[test]
    fn torn_final_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Verified)).unwrap();
        w.append(chunk(0, 1, 0, ChunkState::Verified)).unwrap();
        drop(w);
        let full = std::fs::read(&p).unwrap();
        let first_len = full.iter().position(|&b| b == b'\n').unwrap() + 1;
        for cut in first_len..full.len() {
            let st = replay(&full[..cut]).unwrap();
            assert!(st.is_verified(0, 0));
            assert!(!st.is_verified(0, 1), "cut at {cut}");
            assert_eq!(st.valid_len, first_len as u64);
        }
        // Resuming truncates the torn tail before appending.
        std::fs::write(&p, &full[..full.len() - 5]).unwrap();
        let st = load(&p).unwrap();
        let mut w = JournalWriter::resume(&p, &st).unwrap();
        w.append(chunk(0, 1, 0, ChunkState::Verified)).unwrap();
        let st = load(&p).unwrap();
        assert!(st.is_verified(0, 1));
        assert_eq!(st.last_seq, 2);
    }

    #[test]
    fn corruption_before_the_tail_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        for i in 0..3 {
            w.append(chunk(0, i, 0, ChunkState::Dispatched)).unwrap();
        }
        let mut raw = std::fs::read(&p).unwrap();
        raw[3] = b'#';
        assert!(matches!(
            replay(&raw),
            Err(JournalError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn regressions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Stored)).unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Dispatched)).unwrap();
        w.append(chunk(0, 0, 0, ChunkState::Dispatched)).unwrap();
        assert!(matches!(
            load(&p),
            Err(JournalError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn changed_chunk_size_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mib = 1 << 20;
        let plan = plan_with_size(0, 256 * mib, 64 * mib);
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.append(file(&plan)).unwrap();
        let st = load(&p).unwrap();
        st.check_plan(&plan).unwrap();
        let smaller = plan_with_size(0, 256 * mib, 32 * mib);
        assert!(matches!(
            st.check_plan(&smaller),
            Err(JournalError::Incompatible(_))
        ));
        let grown = plan_with_size(0, 300 * mib, 64 * mib);
        assert!(matches!(
            st.check_plan(&grown),
            Err(JournalError::Incompatible(_))
        ));
    }

    #[test]
    fn simulated_crash_stops_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        w.crash_after(Some(2));
        w.append(chunk(0, 0, 0, ChunkState::Dispatched)).unwrap();
        w.append(chunk(0, 1, 0, ChunkState::Dispatched)).unwrap();
        assert!(matches!(
            w.append(chunk(0, 2, 0, ChunkState::Dispatched)),
            Err(JournalError::Crashed(2))
        ));
        assert_eq!(load(&p).unwrap().chunks.len(), 2);
    }

    #[test]
    fn replay_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j");
        let mut w = JournalWriter::create(&p, "t").unwrap();
        for i in 0..10 {
            w.append(chunk(0, i % 4, (i / 4) as u32, ChunkState::Dispatched))
                .unwrap();
        }
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(replay(&raw).unwrap(), replay(&raw).unwrap());
    }
}
