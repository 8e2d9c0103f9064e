//! The client-side transfer engine.
//!
//! A transfer sizes and plans every file, pre-sizes the destinations, then
//! runs N mover-pair sessions that pull work from a shared queue. Each
//! session tells its source agent to connect P data streams straight to its
//! destination agent and then drives ERET/ESTO pairs and CKSM re-reads with
//! up to D chunk command groups outstanding.

mod control;
mod report;
mod session;
pub mod timeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::Algorithm;
use crate::journal::{
    self, pending_chunks, ChunkState, FileEcho, JournalError, JournalWriter, RecordBody,
};
use crate::planner::{
    plan_chunks, plan_with_size, ChunkDescriptor, ChunkPlan, PlannerConfig, WorkQueue,
};
use crate::protocol::{Command, ReplyCode, Verb};

pub use report::{
    emit_report, ChunkRetries, CsvRow, FileOutcome, Mismatch, ReportFormat, SessionSummary,
    TransferReport, CSV_HEADER,
};

use control::{PairLink, Side};
use session::run_session;
use timeline::{measure, Activity, Timeline};

pub const DEFAULT_RETRY_LIMIT: u32 = 3;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("invalid transfer: {0}")]
    Invalid(String),
    #[error("endpoint unreachable: {0}")]
    Connectivity(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("verification failed for {path} [{offset}, +{length}) after {attempts} attempt(s)")]
    VerificationExhausted {
        path: String,
        offset: u64,
        length: u64,
        attempts: u32,
    },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

impl TransferError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            TransferError::Invalid(_) => 1,
            TransferError::VerificationExhausted { .. } => 2,
            TransferError::Connectivity(_) | TransferError::Protocol(_) => 3,
            TransferError::Io(_) => 4,
            TransferError::Journal(JournalError::Incompatible(_)) => 1,
            TransferError::Journal(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    /// `host:port` of the agent.
    pub addr: String,
    /// Shared secret for HELLO. Never written to the journal.
    #[serde(skip)]
    pub token: String,
}

impl Endpoint {
    pub fn new(addr: impl Into<String>, token: impl Into<String>) -> Self {
        Endpoint {
            addr: addr.into(),
            token: token.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePair {
    /// Path relative to the source agent's root.
    pub source: String,
    /// Path relative to the destination agent's root.
    pub destination: String,
    /// Chunk size for this file only, overriding the planner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<u64>,
}

impl FilePair {
    pub fn new(source: impl Into<String>, destination: impl Into<String>) -> Self {
        FilePair {
            source: source.into(),
            destination: destination.into(),
            chunk_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityMode {
    None,
    #[serde(alias = "whole")]
    WholeFile,
    #[serde(alias = "chunk")]
    PerChunk,
}

impl std::str::FromStr for IntegrityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(IntegrityMode::None),
            "whole" | "whole_file" | "whole-file" => Ok(IntegrityMode::WholeFile),
            "chunk" | "per_chunk" | "per-chunk" => Ok(IntegrityMode::PerChunk),
            _ => Err(format!("unknown integrity mode {s:?} (none, whole, chunk)")),
        }
    }
}

impl std::fmt::Display for IntegrityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntegrityMode::None => "none",
            IntegrityMode::WholeFile => "whole",
            IntegrityMode::PerChunk => "chunk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub source: Endpoint,
    pub destination: Endpoint,
    pub files: Vec<FilePair>,
    pub integrity: IntegrityMode,
    pub chunked: bool,
    pub planner: PlannerConfig,
    /// Retransmissions allowed per chunk after a failed verification.
    pub retry_limit: u32,
    pub algo: Algorithm,
}

impl TransferSpec {
    pub fn new(source: Endpoint, destination: Endpoint, files: Vec<FilePair>) -> Self {
        TransferSpec {
            source,
            destination,
            files,
            integrity: IntegrityMode::PerChunk,
            chunked: true,
            planner: PlannerConfig::default(),
            retry_limit: DEFAULT_RETRY_LIMIT,
            algo: Algorithm::Md5,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: String| Err(TransferError::Invalid(m));
        if self.integrity == IntegrityMode::PerChunk && !self.chunked {
            return bad("per-chunk integrity requires chunked mode".into());
        }
        if self.files.is_empty() {
            return bad("no files to transfer".into());
        }
        self.planner
            .validate()
            .map_err(|e| TransferError::Invalid(e.to_string()))?;
        let mut dests = BTreeSet::new();
        for f in &self.files {
            for p in [&f.source, &f.destination] {
                crate::protocol::validate_path(p)
                    .map_err(|e| TransferError::Invalid(e.to_string()))?;
            }
            if !dests.insert(&f.destination) {
                return bad(format!("destination {} listed twice", f.destination));
            }
            if f.chunk_size == Some(0) {
                return bad(format!("chunk size for {} must be positive", f.source));
            }
        }
        Ok(())
    }

    /// Short label such as "chunked/chunk" for reports.
    pub fn label(&self) -> String {
        format!(
            "{}/{}",
            if self.chunked { "chunked" } else { "whole" },
            self.integrity
        )
    }

    fn check(&self) -> Check {
        match (self.integrity, self.chunked) {
            (IntegrityMode::None, _) => Check::Nothing,
            (IntegrityMode::PerChunk, _) | (IntegrityMode::WholeFile, false) => Check::EachChunk,
            (IntegrityMode::WholeFile, true) => Check::WholeFile,
        }
    }
}

/// How stored data is checked. Non-chunked whole-file checking is the
/// single-chunk case of per-chunk checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Check {
    Nothing,
    EachChunk,
    WholeFile,
}

#[derive(Debug, Clone)]
pub struct TransferOptions {
    pub journal: Option<PathBuf>,
    /// Continue from an existing journal instead of starting a new one.
    pub resume: bool,
    /// Delay added to every control reply, modelling the link round trip.
    pub command_latency: Duration,
    /// Stop journaling after this many records, as if the process died.
    pub crash_after_records: Option<u64>,
    pub connect_timeout: Duration,
    /// Longest wait for any single reply before the session is given up.
    pub reply_timeout: Duration,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            journal: None,
            resume: false,
            command_latency: Duration::ZERO,
            crash_after_records: None,
            connect_timeout: Duration::from_secs(10),
            reply_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Task {
    Transfer {
        chunk: ChunkDescriptor,
        attempt: u32,
    },
    /// Re-read a stored chunk and compare with its recorded source digest.
    Verify {
        chunk: ChunkDescriptor,
        attempt: u32,
        source_digest: String,
    },
    /// Digest both complete files and compare.
    WholeFile { file_id: u64, attempt: u32 },
}

struct FileRun {
    pair: FilePair,
    plan: ChunkPlan,
}

#[derive(Default)]
struct RunState {
    failure: Option<TransferError>,
    /// Chunks stored but awaiting the whole-file check, per file.
    stored: BTreeMap<u64, BTreeSet<u64>>,
    verified: BTreeMap<u64, BTreeSet<u64>>,
    mismatches: Vec<Mismatch>,
    retries: BTreeMap<(u64, u64), u32>,
    retransmissions: u64,
    payload_bytes: u64,
}

/// State shared by all sessions of one transfer.
pub(crate) struct Run<'a> {
    spec: &'a TransferSpec,
    opts: &'a TransferOptions,
    check: Check,
    files: Vec<FileRun>,
    queue: WorkQueue<Task>,
    journal: Mutex<Option<JournalWriter>>,
    state: Mutex<RunState>,
    timeline: Timeline,
    live_sessions: AtomicUsize,
}

impl Run<'_> {
    fn file(&self, id: u64) -> &FileRun {
        &self.files[id as usize]
    }

    fn failed(&self) -> bool {
        self.state.lock().unwrap().failure.is_some()
    }

    /// Records the first fatal error and stops all sessions.
    fn fail(&self, e: TransferError) {
        let mut st = self.state.lock().unwrap();
        if st.failure.is_none() {
            log::error!("transfer failed: {e}");
            st.failure = Some(e);
        }
        drop(st);
        self.queue.close();
    }

    fn journal(&self, body: RecordBody) -> Result<(), ()> {
        let mut j = self.journal.lock().unwrap();
        let Some(w) = j.as_mut() else { return Ok(()) };
        match w.append(body) {
            Ok(_) => Ok(()),
            Err(e) => {
                drop(j);
                self.fail(e.into());
                Err(())
            }
        }
    }

    fn chunk_record(
        &self,
        chunk: &ChunkDescriptor,
        attempt: u32,
        state: ChunkState,
        source_digest: Option<&str>,
        destination_digest: Option<&str>,
    ) -> Result<(), ()> {
        self.journal(RecordBody::Chunk {
            file_id: chunk.file_id,
            chunk_index: chunk.chunk_index,
            attempt,
            state,
            source_digest: source_digest.map(str::to_string),
            destination_digest: destination_digest.map(str::to_string),
        })
    }

    fn mark_verified(&self, chunk: &ChunkDescriptor) {
        self.state
            .lock()
            .unwrap()
            .verified
            .entry(chunk.file_id)
            .or_default()
            .insert(chunk.chunk_index);
    }

    fn record_interval(&self, activity: Activity, file_id: u64, start: Instant) {
        self.timeline
            .record(activity, file_id, start, Instant::now());
    }
}

fn plan_file(spec: &TransferSpec, id: u64, pair: &FilePair, size: u64) -> ChunkPlan {
    if !spec.chunked {
        return plan_with_size(id, size, size);
    }
    match pair.chunk_size {
        Some(s) => plan_with_size(id, size, s),
        None => plan_chunks(id, size, &spec.planner),
    }
}

/// Looks up source sizes and pre-sizes destination files, pipelining the
/// commands so setup costs one round trip per phase rather than per file.
fn setup(spec: &TransferSpec, opts: &TransferOptions) -> Result<Vec<u64>, TransferError> {
    let mut link = PairLink::connect(
        &spec.source,
        &spec.destination,
        opts.command_latency,
        opts.connect_timeout,
    )?;
    let mut tags = Vec::with_capacity(spec.files.len());
    for f in &spec.files {
        tags.push(link.send(
            Side::Source,
            Command::new(0, Verb::Size, f.source.as_str(), 0, 0),
        )?);
    }
    link.flush()?;
    let mut sizes = Vec::with_capacity(tags.len());
    for (tag, f) in tags.into_iter().zip(&spec.files) {
        let r = link.expect(tag, opts.reply_timeout)?;
        if r.code != ReplyCode::Status {
            return Err(TransferError::Io(format!(
                "source {}: {}",
                f.source, r.text
            )));
        }
        let size = r
            .text
            .parse()
            .map_err(|_| TransferError::Protocol(format!("bad SIZE reply {:?}", r.text)))?;
        sizes.push(size);
    }
    let mut tags = Vec::with_capacity(spec.files.len());
    for (f, size) in spec.files.iter().zip(&sizes) {
        let cmd = Command::new(0, Verb::Allo, f.destination.as_str(), 0, *size);
        tags.push(link.send(Side::Destination, cmd)?);
    }
    link.flush()?;
    for (tag, f) in tags.into_iter().zip(&spec.files) {
        let r = link.expect(tag, opts.reply_timeout)?;
        if r.code != ReplyCode::Ok {
            return Err(TransferError::Io(format!(
                "destination {}: {}",
                f.destination, r.text
            )));
        }
    }
    link.quit();
    Ok(sizes)
}

/// Moves every file in `spec` and reports how it went.
pub fn transfer(
    spec: &TransferSpec,
    opts: &TransferOptions,
) -> Result<TransferReport, TransferError> {
    spec.validate()?;
    let resume_state = match (&opts.journal, opts.resume) {
        (Some(path), true) => {
            let st = journal::load(path)?;
            if let Some(old) = &st.spec {
                if old.files != spec.files {
                    return Err(JournalError::Incompatible("file list differs".into()).into());
                }
            }
            Some(st)
        }
        (None, true) => return Err(TransferError::Invalid("resume needs a journal".into())),
        _ => None,
    };

    let started = Instant::now();
    let sizes = setup(spec, opts)?;
    let files: Vec<FileRun> = spec
        .files
        .iter()
        .zip(&sizes)
        .enumerate()
        .map(|(i, (pair, &size))| FileRun {
            pair: pair.clone(),
            plan: plan_file(spec, i as u64, pair, size),
        })
        .collect();

    let check = spec.check();
    let mut tasks = Vec::new();
    let mut state = RunState::default();
    let writer = match (&opts.journal, &resume_state) {
        (Some(path), Some(st)) => {
            for f in &files {
                // A file whose plan never reached the journal starts afresh.
                if st.files.contains_key(&f.plan.file_id) {
                    st.check_plan(&f.plan)?;
                }
            }
            Some(JournalWriter::resume(path, st)?)
        }
        (Some(path), None) => Some(JournalWriter::create(path, &journal::new_transfer_id())?),
        (None, _) => None,
    };
    for f in &files {
        let id = f.plan.file_id;
        let Some(st) = &resume_state else {
            tasks.extend(f.plan.chunks.iter().map(|c| Task::Transfer {
                chunk: *c,
                attempt: 0,
            }));
            continue;
        };
        let mut pending = pending_chunks(st, &f.plan);
        if check == Check::WholeFile && pending.verified.len() as u64 != f.plan.chunk_count() {
            // A whole-file check that was cut short covers every chunk again.
            for c in pending.verified.drain(..) {
                let e = &st.chunks[&(c.file_id, c.chunk_index)];
                pending.stored.push((c, e.attempt, e.source_digest.clone()));
            }
        }
        let verified = state.verified.entry(id).or_default();
        verified.extend(pending.verified.iter().map(|c| c.chunk_index));
        for (c, attempt) in pending.retransmit {
            tasks.push(Task::Transfer { chunk: c, attempt });
        }
        let mut whole_attempt = None;
        for (c, attempt, source_digest) in pending.stored {
            match (check, source_digest) {
                (Check::EachChunk, Some(d)) => tasks.push(Task::Verify {
                    chunk: c,
                    attempt,
                    source_digest: d,
                }),
                (Check::EachChunk, None) => tasks.push(Task::Transfer { chunk: c, attempt }),
                (Check::WholeFile, _) => {
                    state.stored.entry(id).or_default().insert(c.chunk_index);
                    whole_attempt = Some(whole_attempt.unwrap_or(0).max(attempt));
                }
                // Stored without checking is as good as it gets.
                (Check::Nothing, _) => {
                    tasks.push(Task::Verify {
                        chunk: c,
                        attempt,
                        source_digest: String::new(),
                    });
                }
            }
        }
        let stored = state.stored.get(&id).map_or(0, |s| s.len() as u64);
        if check == Check::WholeFile && stored == f.plan.chunk_count() {
            tasks.push(Task::WholeFile {
                file_id: id,
                attempt: whole_attempt.unwrap_or(0),
            });
        }
    }

    let run = Run {
        spec,
        opts,
        check,
        queue: WorkQueue::new(tasks, spec.planner.pipeline_depth as usize),
        files,
        journal: Mutex::new(writer),
        state: Mutex::new(state),
        timeline: Timeline::new(started),
        live_sessions: AtomicUsize::new(0),
    };

    {
        let mut j = run.journal.lock().unwrap();
        if let Some(w) = j.as_mut() {
            if let Some(n) = opts.crash_after_records {
                w.crash_after(Some(n));
            }
        }
    }
    if resume_state.as_ref().is_none_or(|st| st.spec.is_none()) {
        let _ = run.journal(RecordBody::Transfer { spec: spec.clone() });
    }
    for f in &run.files {
        if resume_state
            .as_ref()
            .is_none_or(|st| !st.files.contains_key(&f.plan.file_id))
        {
            let _ = run.journal(RecordBody::File(FileEcho {
                file_id: f.plan.file_id,
                source: f.pair.source.clone(),
                destination: f.pair.destination.clone(),
                file_size: f.plan.file_size,
                chunk_size: f.plan.chunk_size,
                chunk_count: f.plan.chunk_count(),
            }));
        }
    }

    let sessions: Vec<SessionSummary> = if run.queue.pending_len() == 0 || run.failed() {
        Vec::new()
    } else {
        let n = spec.planner.concurrency;
        run.live_sessions.store(n as usize, Ordering::SeqCst);
        thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|id| {
                    let run = &run;
                    s.spawn(move || run_session(run, id))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("session thread panicked"))
                .collect()
        })
    };
    let wall = started.elapsed();

    let st = run.state.into_inner().unwrap();
    if let Some(e) = st.failure {
        return Err(e);
    }
    let undone: u64 = run
        .files
        .iter()
        .map(|f| {
            f.plan.chunk_count()
                - st.verified
                    .get(&f.plan.file_id)
                    .map_or(0, |s| s.len() as u64)
        })
        .sum();
    if undone > 0 {
        return Err(TransferError::Connectivity(format!(
            "all sessions lost with {undone} chunk(s) unfinished"
        )));
    }

    let spans = run.timeline.spans();
    let total = measure(&spans, wall);
    let files: Vec<FileOutcome> = run
        .files
        .iter()
        .map(|f| {
            let own: Vec<_> = spans
                .iter()
                .copied()
                .filter(|s| s.file_id == f.plan.file_id)
                .collect();
            let first = own.iter().map(|s| s.start).min().unwrap_or_default();
            let last = own.iter().map(|s| s.end).max().unwrap_or_default();
            let b = measure(&own, last.saturating_sub(first));
            FileOutcome {
                file_id: f.plan.file_id,
                source: f.pair.source.clone(),
                destination: f.pair.destination.clone(),
                size: f.plan.file_size,
                chunk_size: f.plan.chunk_size,
                chunks: f.plan.chunk_count(),
                verified: true,
                transfer_s: b.transfer_time.as_secs_f64(),
                integrity_s: b.integrity_time.as_secs_f64(),
            }
        })
        .collect();
    let bytes_moved: u64 = files.iter().map(|f| f.size).sum();
    let transfer_id = run
        .journal
        .lock()
        .unwrap()
        .as_ref()
        .map(|w| w.transfer_id().to_string())
        .unwrap_or_default();
    Ok(TransferReport {
        transfer_id,
        files,
        bytes_moved,
        payload_bytes: st.payload_bytes,
        wall_s: wall.as_secs_f64(),
        transfer_s: total.transfer_time.as_secs_f64(),
        integrity_s: total.integrity_time.as_secs_f64(),
        overlap_s: total.overlap.as_secs_f64(),
        retries: st.retransmissions,
        chunk_retries: st
            .retries
            .iter()
            .map(|(&(file_id, chunk_index), &retries)| ChunkRetries {
                file_id,
                chunk_index,
                retries,
            })
            .collect(),
        mismatches: st.mismatches,
        sessions,
        throughput_bps: if wall.is_zero() {
            0.0
        } else {
            bytes_moved as f64 * 8.0 / wall.as_secs_f64()
        },
    })
}

/// Continues the transfer recorded in `journal_path`. Tokens are not stored
/// in journals, so they are supplied again here.
pub fn resume(
    journal_path: &std::path::Path,
    source_token: &str,
    destination_token: &str,
    opts: &TransferOptions,
) -> Result<TransferReport, TransferError> {
    let st = journal::load(journal_path)?;
    let mut spec = st
        .spec
        .ok_or_else(|| JournalError::Incompatible("journal has no transfer record".into()))?;
    spec.source.token = source_token.to_string();
    spec.destination.token = destination_token.to_string();
    let opts = TransferOptions {
        journal: Some(journal_path.to_path_buf()),
        resume: true,
        ..opts.clone()
    };
    transfer(&spec, &opts)
}
