//! One mover-pair session: pulls tasks from the shared queue and keeps up to
//! D command groups in flight until the queue drains.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use super::control::{PairLink, Side};
use super::timeline::Activity;
use super::{Check, Mismatch, Run, SessionSummary, Task, TransferError};
use crate::integrity::{verify_pair, Digest, Verdict};
use crate::journal::ChunkState;
use crate::planner::{ChunkDescriptor, Pull, SessionId};
use crate::protocol::{Command, Reply, ReplyCode, Verb};

const IDLE_POLL: Duration = Duration::from_millis(20);

/// A chunk-level command group: the commands issued for one task.
struct Group {
    task: Task,
    issued: Instant,
    eret: Option<u32>,
    esto: Option<u32>,
    src_sum: Option<u32>,
    dst_sum: Option<u32>,
    eret_reply: Option<Reply>,
    esto_reply: Option<Reply>,
    src_reply: Option<Reply>,
    dst_reply: Option<Reply>,
    moved: bool,
    source_digest: Option<String>,
    check_started: Option<Instant>,
}

impl Group {
    fn new(task: Task) -> Self {
        Group {
            task,
            issued: Instant::now(),
            eret: None,
            esto: None,
            src_sum: None,
            dst_sum: None,
            eret_reply: None,
            esto_reply: None,
            src_reply: None,
            dst_reply: None,
            moved: false,
            source_digest: None,
            check_started: None,
        }
    }

    fn owns(&self, tag: u32) -> bool {
        [self.eret, self.esto, self.src_sum, self.dst_sum].contains(&Some(tag))
    }

    fn accept(&mut self, reply: Reply) {
        let t = Some(reply.tag);
        let slot = if t == self.eret {
            &mut self.eret_reply
        } else if t == self.esto {
            &mut self.esto_reply
        } else if t == self.src_sum {
            &mut self.src_reply
        } else {
            &mut self.dst_reply
        };
        *slot = Some(reply);
    }

    /// The task to hand back to the queue if this session dies. A chunk
    /// that is already stored only needs its checksum.
    fn salvage(self, check: Check) -> Task {
        match (self.task, self.moved, self.source_digest) {
            (Task::Transfer { chunk, attempt }, true, Some(d)) if check == Check::EachChunk => {
                Task::Verify {
                    chunk,
                    attempt,
                    source_digest: d,
                }
            }
            (task, _, _) => task,
        }
    }
}

enum Outcome {
    Wait,
    /// Finished; the tasks (possibly none) go back on the queue.
    Done(Vec<Task>),
    /// The session's connections are unusable.
    Lost(String),
    /// The transfer has failed; already recorded.
    Stop,
}

struct Session<'r, 'a> {
    run: &'r Run<'a>,
    id: SessionId,
    link: PairLink,
    chunks: u64,
    payload_bytes: u64,
}

impl<'r, 'a> Session<'r, 'a> {
    fn path_of(&self, chunk: &ChunkDescriptor, side: Side) -> &str {
        let f = &self.run.file(chunk.file_id).pair;
        match side {
            Side::Source => &f.source,
            Side::Destination => &f.destination,
        }
    }

    fn algo(&self) -> &'static str {
        self.run.spec.algo.name()
    }

    fn cksm(&mut self, side: Side, path: &str, offset: u64, length: u64) -> Result<u32, String> {
        let cmd = Command::new(0, Verb::Cksm, path, offset, length).with_algo(self.algo());
        self.link.send(side, cmd).map_err(|e| e.to_string())
    }

    /// Issues the commands for `task`. Returns `None` when the task needed
    /// no commands and is already complete.
    fn start(&mut self, task: Task) -> Result<Option<Group>, Outcome> {
        let run = self.run;
        let mut g = Group::new(task.clone());
        match task {
            Task::Transfer { chunk, attempt } => {
                if attempt > 0 {
                    let mut st = run.state.lock().unwrap();
                    st.retransmissions += 1;
                    st.retries
                        .insert((chunk.file_id, chunk.chunk_index), attempt);
                }
                run.chunk_record(&chunk, attempt, ChunkState::Dispatched, None, None)
                    .map_err(|_| Outcome::Stop)?;
                let src = self.path_of(&chunk, Side::Source).to_string();
                let dst = self.path_of(&chunk, Side::Destination).to_string();
                let eret = Command::new(0, Verb::Eret, src, chunk.offset, chunk.length)
                    .with_algo(self.algo());
                let esto = Command::new(0, Verb::Esto, dst, chunk.offset, chunk.length);
                g.esto = Some(self.link.send(Side::Destination, esto).map_err(lost)?);
                g.eret = Some(self.link.send(Side::Source, eret).map_err(lost)?);
            }
            Task::Verify {
                chunk,
                attempt,
                source_digest,
            } => {
                if run.check == Check::Nothing {
                    run.chunk_record(&chunk, attempt, ChunkState::Verified, None, None)
                        .map_err(|_| Outcome::Stop)?;
                    run.mark_verified(&chunk);
                    return Ok(None);
                }
                g.moved = true;
                g.source_digest = Some(source_digest);
                let dst = self.path_of(&chunk, Side::Destination).to_string();
                g.dst_sum = Some(
                    self.cksm(Side::Destination, &dst, chunk.offset, chunk.length)
                        .map_err(Outcome::Lost)?,
                );
                g.check_started = Some(Instant::now());
            }
            Task::WholeFile { file_id, .. } => {
                let f = run.file(file_id);
                let (src, dst, size) = (
                    f.pair.source.clone(),
                    f.pair.destination.clone(),
                    f.plan.file_size,
                );
                g.moved = true;
                g.src_sum = Some(
                    self.cksm(Side::Source, &src, 0, size)
                        .map_err(Outcome::Lost)?,
                );
                g.dst_sum = Some(
                    self.cksm(Side::Destination, &dst, 0, size)
                        .map_err(Outcome::Lost)?,
                );
                g.check_started = Some(Instant::now());
            }
        }
        Ok(Some(g))
    }

    fn advance(&mut self, g: &mut Group) -> Outcome {
        match g.task.clone() {
            Task::Transfer { chunk, attempt } => {
                if !g.moved {
                    let (Some(er), Some(es)) = (&g.eret_reply, &g.esto_reply) else {
                        return Outcome::Wait;
                    };
                    for (r, what) in [(er, "ERET"), (es, "ESTO")] {
                        if let Err(o) = self.check_reply(r, ReplyCode::Complete, what, &chunk) {
                            return o;
                        }
                    }
                    g.moved = true;
                    g.source_digest = Some(er.text.clone());
                    self.run
                        .record_interval(Activity::Payload, chunk.file_id, g.issued);
                    self.chunks += 1;
                    self.payload_bytes += chunk.length;
                    self.run.state.lock().unwrap().payload_bytes += chunk.length;
                    if self
                        .run
                        .chunk_record(
                            &chunk,
                            attempt,
                            ChunkState::Stored,
                            g.source_digest.as_deref(),
                            None,
                        )
                        .is_err()
                    {
                        return Outcome::Stop;
                    }
                    return match self.run.check {
                        Check::Nothing => self.verified(&chunk, attempt, None, None),
                        Check::EachChunk => {
                            let dst = self.path_of(&chunk, Side::Destination).to_string();
                            match self.cksm(Side::Destination, &dst, chunk.offset, chunk.length) {
                                Ok(tag) => {
                                    g.dst_sum = Some(tag);
                                    g.check_started = Some(Instant::now());
                                    Outcome::Wait
                                }
                                Err(e) => Outcome::Lost(e),
                            }
                        }
                        Check::WholeFile => self.stored_for_whole_file(&chunk, attempt),
                    };
                }
                self.chunk_checked(g, chunk, attempt)
            }
            Task::Verify { chunk, attempt, .. } => self.chunk_checked(g, chunk, attempt),
            Task::WholeFile { file_id, attempt } => self.file_checked(g, file_id, attempt),
        }
    }

    fn check_reply(
        &self,
        r: &Reply,
        want: ReplyCode,
        what: &str,
        chunk: &ChunkDescriptor,
    ) -> Result<(), Outcome> {
        if r.code == want {
            return Ok(());
        }
        match r.code {
            ReplyCode::Broken => Err(Outcome::Lost(format!("{what}: {}", r.text))),
            ReplyCode::FileError | ReplyCode::BadArgument => {
                let f = &self.run.file(chunk.file_id).pair;
                self.run.fail(TransferError::Io(format!(
                    "{what} {} -> {} [{}, +{}): {} {}",
                    f.source,
                    f.destination,
                    chunk.offset,
                    chunk.length,
                    r.code.value(),
                    r.text
                )));
                Err(Outcome::Stop)
            }
            c => Err(Outcome::Lost(format!(
                "{what}: unexpected reply {}",
                c.value()
            ))),
        }
    }

    fn verified(
        &self,
        chunk: &ChunkDescriptor,
        attempt: u32,
        src: Option<&str>,
        dst: Option<&str>,
    ) -> Outcome {
        if self
            .run
            .chunk_record(chunk, attempt, ChunkState::Verified, src, dst)
            .is_err()
        {
            return Outcome::Stop;
        }
        self.run.mark_verified(chunk);
        Outcome::Done(vec![])
    }

    fn stored_for_whole_file(&self, chunk: &ChunkDescriptor, attempt: u32) -> Outcome {
        let count = self.run.file(chunk.file_id).plan.chunk_count();
        let mut st = self.run.state.lock().unwrap();
        let stored = st.stored.entry(chunk.file_id).or_default();
        stored.insert(chunk.chunk_index);
        if stored.len() as u64 == count {
            Outcome::Done(vec![Task::WholeFile {
                file_id: chunk.file_id,
                attempt,
            }])
        } else {
            Outcome::Done(vec![])
        }
    }

    fn compare(&self, src: &str, dst: &str) -> Result<Verdict, String> {
        let algo = self.run.spec.algo;
        let a = Digest::from_hex(algo, src).map_err(|e| format!("source digest: {e}"))?;
        let b = Digest::from_hex(algo, dst).map_err(|e| format!("destination digest: {e}"))?;
        verify_pair(&a, &b).map_err(|e| e.to_string())
    }

    fn chunk_checked(&mut self, g: &mut Group, chunk: ChunkDescriptor, attempt: u32) -> Outcome {
        let Some(r) = &g.dst_reply else {
            return Outcome::Wait;
        };
        if let Err(o) = self.check_reply(r, ReplyCode::Status, "CKSM", &chunk) {
            return o;
        }
        self.run.record_interval(
            Activity::Integrity,
            chunk.file_id,
            g.check_started.unwrap_or(g.issued),
        );
        let src = g.source_digest.clone().unwrap_or_default();
        let dst = r.text.clone();
        match self.compare(&src, &dst) {
            Err(e) => Outcome::Lost(e),
            Ok(Verdict::Ok) => self.verified(&chunk, attempt, Some(&src), Some(&dst)),
            Ok(Verdict::Mismatch) => {
                let f = &self.run.file(chunk.file_id).pair;
                log::warn!(
                    "checksum mismatch on {} [{}, +{}) attempt {attempt}",
                    f.destination,
                    chunk.offset,
                    chunk.length
                );
                self.run.state.lock().unwrap().mismatches.push(Mismatch {
                    file_id: chunk.file_id,
                    source: f.source.clone(),
                    destination: f.destination.clone(),
                    offset: chunk.offset,
                    length: chunk.length,
                    attempt,
                    source_digest: src.clone(),
                    destination_digest: dst.clone(),
                });
                if self
                    .run
                    .chunk_record(&chunk, attempt, ChunkState::Failed, Some(&src), Some(&dst))
                    .is_err()
                {
                    return Outcome::Stop;
                }
                if attempt >= self.run.spec.retry_limit {
                    self.run.fail(TransferError::VerificationExhausted {
                        path: f.destination.clone(),
                        offset: chunk.offset,
                        length: chunk.length,
                        attempts: attempt + 1,
                    });
                    return Outcome::Stop;
                }
                Outcome::Done(vec![Task::Transfer {
                    chunk,
                    attempt: attempt + 1,
                }])
            }
        }
    }

    fn file_checked(&mut self, g: &mut Group, file_id: u64, attempt: u32) -> Outcome {
        let (Some(sr), Some(dr)) = (&g.src_reply, &g.dst_reply) else {
            return Outcome::Wait;
        };
        let run = self.run;
        let f = run.file(file_id);
        let whole = ChunkDescriptor {
            file_id,
            chunk_index: 0,
            offset: 0,
            length: f.plan.file_size,
        };
        for r in [sr, dr] {
            if let Err(o) = self.check_reply(r, ReplyCode::Status, "CKSM", &whole) {
                return o;
            }
        }
        run.record_interval(
            Activity::Integrity,
            file_id,
            g.check_started.unwrap_or(g.issued),
        );
        let (src, dst) = (sr.text.clone(), dr.text.clone());
        match self.compare(&src, &dst) {
            Err(e) => Outcome::Lost(e),
            Ok(Verdict::Ok) => {
                for c in &f.plan.chunks {
                    if let Outcome::Stop = self.verified(c, attempt, None, None) {
                        return Outcome::Stop;
                    }
                }
                run.state.lock().unwrap().stored.remove(&file_id);
                Outcome::Done(vec![])
            }
            Ok(Verdict::Mismatch) => {
                log::warn!(
                    "whole-file checksum mismatch on {} attempt {attempt}",
                    f.pair.destination
                );
                {
                    let mut st = run.state.lock().unwrap();
                    st.mismatches.push(Mismatch {
                        file_id,
                        source: f.pair.source.clone(),
                        destination: f.pair.destination.clone(),
                        offset: 0,
                        length: f.plan.file_size,
                        attempt,
                        source_digest: src.clone(),
                        destination_digest: dst.clone(),
                    });
                    st.stored.remove(&file_id);
                }
                for c in &f.plan.chunks {
                    if run
                        .chunk_record(c, attempt, ChunkState::Failed, None, None)
                        .is_err()
                    {
                        return Outcome::Stop;
                    }
                }
                if attempt >= run.spec.retry_limit {
                    run.fail(TransferError::VerificationExhausted {
                        path: f.pair.destination.clone(),
                        offset: 0,
                        length: f.plan.file_size,
                        attempts: attempt + 1,
                    });
                    return Outcome::Stop;
                }
                Outcome::Done(
                    f.plan
                        .chunks
                        .iter()
                        .map(|c| Task::Transfer {
                            chunk: *c,
                            attempt: attempt + 1,
                        })
                        .collect(),
                )
            }
        }
    }

    fn finish(&self, tasks: Vec<Task>) {
        for t in tasks {
            self.run.queue.push(t);
        }
        self.run.queue.acknowledge(self.id);
    }

    /// Hands every unfinished group back to the queue.
    fn salvage(&self, groups: Vec<Group>) {
        for g in groups {
            self.run.queue.requeue(self.id, g.salvage(self.run.check));
        }
    }

    fn main_loop(&mut self) -> Result<(), String> {
        let depth = self.run.spec.planner.pipeline_depth as usize;
        let timeout = self.run.opts.reply_timeout;
        let mut groups: Vec<Group> = Vec::with_capacity(depth);
        loop {
            if self.run.failed() {
                return Ok(());
            }
            let mut drained = false;
            while groups.len() < depth {
                let pulled = if groups.is_empty() {
                    self.run.queue.wait_pull(self.id, IDLE_POLL)
                } else {
                    self.run.queue.pull(self.id)
                };
                let task = match pulled {
                    Pull::Item(t) => t,
                    Pull::Drained => {
                        drained = true;
                        break;
                    }
                    Pull::AtDepth | Pull::Idle => break,
                };
                match self.start(task.clone()) {
                    Ok(Some(g)) => groups.push(g),
                    Ok(None) => self.finish(vec![]),
                    Err(Outcome::Lost(e)) => {
                        self.run.queue.requeue(self.id, task);
                        self.salvage(groups);
                        return Err(e);
                    }
                    Err(_) => return Ok(()),
                }
            }
            if let Err(e) = self.link.flush() {
                self.salvage(groups);
                return Err(e.to_string());
            }
            if groups.is_empty() {
                if drained {
                    return Ok(());
                }
                continue;
            }

            let Some(d) = self.link.recv(timeout) else {
                self.salvage(groups);
                return Err("timed out waiting for replies".into());
            };
            let Some(reply) = d.reply else {
                self.salvage(groups);
                return Err(format!("{:?} control connection lost", d.side));
            };
            let Some(i) = groups.iter().position(|g| g.owns(reply.tag)) else {
                self.salvage(groups);
                return Err(format!("unexpected reply {reply:?}"));
            };
            groups[i].accept(reply);
            match self.advance(&mut groups[i]) {
                Outcome::Wait => {}
                Outcome::Done(tasks) => {
                    groups.remove(i);
                    self.finish(tasks);
                }
                Outcome::Lost(e) => {
                    self.salvage(groups);
                    return Err(e);
                }
                Outcome::Stop => return Ok(()),
            }
        }
    }
}

fn lost(e: TransferError) -> Outcome {
    Outcome::Lost(e.to_string())
}

fn open_data(
    link: &mut PairLink,
    parallelism: u32,
    timeout: Duration,
) -> Result<(), TransferError> {
    let pasv = link.call(
        Side::Destination,
        Command::new(0, Verb::Pasv, "", 0, parallelism as u64),
        timeout,
    )?;
    if pasv.code != ReplyCode::Ok {
        return Err(TransferError::Connectivity(format!(
            "PASV refused: {}",
            pasv.text
        )));
    }
    let port = link.call(
        Side::Source,
        Command::new(0, Verb::Port, pasv.text.as_str(), 0, parallelism as u64),
        timeout,
    )?;
    if port.code != ReplyCode::Ok {
        return Err(TransferError::Connectivity(format!(
            "PORT refused: {}",
            port.text
        )));
    }
    Ok(())
}

/// Runs session `id` until the queue drains, the transfer fails, or the
/// session's connections break. A broken session returns its unfinished
/// work to the queue for the others.
pub(crate) fn run_session(run: &Run<'_>, id: SessionId) -> SessionSummary {
    let spec = run.spec;
    let opts = run.opts;
    let connected = PairLink::connect(
        &spec.source,
        &spec.destination,
        opts.command_latency,
        opts.connect_timeout,
    )
    .and_then(|mut link| {
        open_data(&mut link, spec.planner.parallelism, opts.reply_timeout).map(|()| link)
    });
    let mut summary = SessionSummary {
        session: id,
        chunks: 0,
        payload_bytes: 0,
        lost: false,
    };
    let result = match connected {
        Ok(link) => {
            let mut s = Session {
                run,
                id,
                link,
                chunks: 0,
                payload_bytes: 0,
            };
            let r = s.main_loop();
            summary.chunks = s.chunks;
            summary.payload_bytes = s.payload_bytes;
            if r.is_ok() && !run.failed() {
                s.link.quit();
            } else {
                s.link.abort();
            }
            r
        }
        Err(e) => Err(e.to_string()),
    };
    if let Err(e) = result {
        log::warn!("session {id} lost: {e}");
        summary.lost = true;
    }
    if run.live_sessions.fetch_sub(1, Ordering::SeqCst) == 1
        && summary.lost
        && run.queue.pending_len() > 0
    {
        run.fail(TransferError::Connectivity(
            "every session was lost before the transfer finished".into(),
        ));
    }
    summary
}
