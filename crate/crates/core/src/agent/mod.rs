//! The mover agent: an endpoint daemon serving partial retrieves (ERET),
//! partial stores (ESTO), re-read checksums (CKSM) and size queries against a
//! sandboxed root directory.
//!
//! Each accepted control connection is one session. Commands are read in
//! order on the control thread; ERET, ESTO and CKSM are handed to one worker
//! thread each, so a checksum for one chunk runs while later chunks move.
//! Replies carry the command's tag and may complete out of order.

mod data;
pub mod sandbox;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use crate::harness::faults::{FaultInjector, Throttle};
use crate::integrity::Algorithm;
use crate::protocol::{
    decode_command, parse_hello, read_line, write_reply, BlockHeader, Command, Reply, ReplyCode,
    Verb, BANNER,
};
use data::{covers, for_each_block, LegError, ReceivePlane, SendPlane};
use sandbox::{Sandbox, SandboxError};

pub const DEFAULT_IO_BLOCK: usize = 256 * 1024;
pub const MIN_IO_BLOCK: usize = 4 * 1024;
const DATA_ACCEPT_TIMEOUT: Duration = Duration::from_secs(30);
const HELLO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub listen: String,
    pub root_dir: PathBuf,
    pub max_sessions: usize,
    pub io_block: usize,
    pub token: String,
    /// Fault and performance injection, for the test harness.
    pub faults: Option<Arc<FaultInjector>>,
}

impl AgentConfig {
    pub fn new(root_dir: impl Into<PathBuf>, token: impl Into<String>) -> Self {
        AgentConfig {
            listen: "127.0.0.1:0".into(),
            root_dir: root_dir.into(),
            max_sessions: 64,
            io_block: DEFAULT_IO_BLOCK,
            token: token.into(),
            faults: None,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.io_block < MIN_IO_BLOCK {
            return Err(AgentError::Config(format!(
                "io_block must be at least {MIN_IO_BLOCK} bytes"
            )));
        }
        if !self.root_dir.is_dir() {
            return Err(AgentError::Config(format!(
                "root {} is not a directory",
                self.root_dir.display()
            )));
        }
        if self.max_sessions == 0 {
            return Err(AgentError::Config("max_sessions must be at least 1".into()));
        }
        if self.token.is_empty() || self.token.contains(['\r', '\n']) {
            return Err(AgentError::Config(
                "token must be a non-empty single line".into(),
            ));
        }
        Ok(())
    }
}

/// Byte and event counters, for tests and benchmarks.
#[derive(Debug, Default)]
pub struct AgentStats {
    payload_sent: Arc<AtomicU64>,
    payload_received: Arc<AtomicU64>,
    reread_bytes: AtomicU64,
    sessions_accepted: AtomicU64,
    sessions_refused: AtomicU64,
    erets: AtomicU64,
    estos: AtomicU64,
    cksms: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentCounters {
    pub payload_sent: u64,
    pub payload_received: u64,
    pub reread_bytes: u64,
    pub sessions_accepted: u64,
    pub sessions_refused: u64,
    pub erets: u64,
    pub estos: u64,
    pub cksms: u64,
}

impl AgentStats {
    pub fn snapshot(&self) -> AgentCounters {
        AgentCounters {
            payload_sent: self.payload_sent.load(Ordering::SeqCst),
            payload_received: self.payload_received.load(Ordering::SeqCst),
            reread_bytes: self.reread_bytes.load(Ordering::SeqCst),
            sessions_accepted: self.sessions_accepted.load(Ordering::SeqCst),
            sessions_refused: self.sessions_refused.load(Ordering::SeqCst),
            erets: self.erets.load(Ordering::SeqCst),
            estos: self.estos.load(Ordering::SeqCst),
            cksms: self.cksms.load(Ordering::SeqCst),
        }
    }
}

struct Shared {
    cfg: AgentConfig,
    sandbox: Sandbox,
    stats: AgentStats,
    active: AtomicUsize,
    next_session: AtomicU64,
    shutdown: AtomicBool,
    stored: Mutex<HashSet<PathBuf>>,
    presize: Mutex<()>,
}

/// A running agent. Dropping it stops accepting new sessions.
pub struct Agent {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Agent {
    pub fn spawn(cfg: AgentConfig) -> Result<Agent, AgentError> {
        cfg.validate()?;
        let sandbox = Sandbox::new(&cfg.root_dir)?;
        let listener = TcpListener::bind(&cfg.listen)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            cfg,
            sandbox,
            stats: AgentStats::default(),
            active: AtomicUsize::new(0),
            next_session: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            stored: Mutex::new(HashSet::new()),
            presize: Mutex::new(()),
        });
        let accept_shared = Arc::clone(&shared);
        let accept = thread::Builder::new()
            .name(format!("agent-accept-{}", addr.port()))
            .spawn(move || accept_loop(listener, accept_shared))?;
        log::info!("agent listening on {addr}");
        Ok(Agent {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> AgentCounters {
        self.shared.stats.snapshot()
    }

    pub fn active_sessions(&self) -> usize {
        self.shared.active.load(Ordering::SeqCst)
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(h) = self.accept.take() {
            self.shared.shutdown.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = h.join();
        }
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Runs an agent until the process is terminated.
pub fn serve(cfg: AgentConfig) -> Result<(), AgentError> {
    Agent::spawn(cfg)?.join();
    Ok(())
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                let shared = Arc::clone(&shared);
                let _ = thread::Builder::new()
                    .name("agent-session".into())
                    .spawn(move || {
                        if let Err(e) = handle_connection(shared, stream) {
                            log::debug!("session ended: {e}");
                        }
                    });
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn handle_connection(shared: Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let local_ip = stream.local_addr()?.ip();
    let mut writer = stream.try_clone()?;
    writer.write_all(format!("{BANNER}\r\n").as_bytes())?;

    stream.set_read_timeout(Some(HELLO_TIMEOUT))?;
    let mut reader = BufReader::new(stream);
    let hello = match read_line(&mut reader) {
        Ok(Some(line)) => line,
        _ => return Ok(()),
    };
    if parse_hello(&hello).ok() != Some(shared.cfg.token.as_str()) {
        log::warn!("rejected connection with bad token");
        let _ = writer.shutdown(Shutdown::Both);
        return Ok(());
    }
    reader.get_ref().set_read_timeout(None)?;

    if shared.active.fetch_add(1, Ordering::SeqCst) >= shared.cfg.max_sessions {
        shared.active.fetch_sub(1, Ordering::SeqCst);
        shared.stats.sessions_refused.fetch_add(1, Ordering::SeqCst);
        let _ = write_reply(
            &mut writer,
            &Reply::new(0, ReplyCode::Busy, "too many sessions"),
        );
        return Ok(());
    }
    let _guard = ActiveGuard(&shared.active);
    shared
        .stats
        .sessions_accepted
        .fetch_add(1, Ordering::SeqCst);
    write_reply(&mut writer, &Reply::new(0, ReplyCode::Ok, "ready"))
        .map_err(|e| io::Error::other(e.to_string()))?;

    let id = shared.next_session.fetch_add(1, Ordering::SeqCst);
    let mut session = Session::new(Arc::clone(&shared), id, writer, local_ip);
    session.run(reader);
    Ok(())
}

type ReplyWriter = Arc<Mutex<TcpStream>>;

fn send(ctl: &ReplyWriter, reply: Reply) {
    let mut w = ctl.lock().unwrap();
    if let Err(e) = write_reply(&mut *w, &reply) {
        log::debug!("reply {reply:?} not delivered: {e}");
    }
}

/// Pre-validated target of a data command. An invalid command still
/// occupies its slot in the data stream so both ends stay in step.
type Target<T> = Result<T, Reply>;

struct EretJob {
    tag: u32,
    rel: String,
    offset: u64,
    length: u64,
    target: Target<(PathBuf, Algorithm)>,
}

struct EstoJob {
    tag: u32,
    offset: u64,
    length: u64,
    target: Target<PathBuf>,
}

struct CksmJob {
    cmd: Command,
}

#[derive(Default)]
struct Planes {
    send: Option<Arc<SendPlane>>,
    receive: Option<Arc<ReceivePlane>>,
}

struct Session {
    shared: Arc<Shared>,
    id: u64,
    ctl: ReplyWriter,
    local_ip: IpAddr,
    eret_jobs: Option<Sender<EretJob>>,
    esto_jobs: Option<Sender<EstoJob>>,
    cksm_jobs: Option<Sender<CksmJob>>,
    planes: Arc<Mutex<Planes>>,
    closed: Arc<AtomicBool>,
}

fn sandbox_reply(tag: u32, e: SandboxError) -> Reply {
    match e {
        SandboxError::Escape(p) => Reply::new(
            tag,
            ReplyCode::BadArgument,
            format!("path {p:?} escapes root"),
        ),
        SandboxError::Io { path, source } => {
            Reply::new(tag, ReplyCode::FileError, format!("{path}: {source}"))
        }
    }
}

fn file_error(tag: u32, what: impl std::fmt::Display) -> Reply {
    Reply::new(tag, ReplyCode::FileError, what.to_string())
}

fn range_end(offset: u64, length: u64) -> Option<u64> {
    offset.checked_add(length)
}

impl Session {
    fn new(shared: Arc<Shared>, id: u64, writer: TcpStream, local_ip: IpAddr) -> Self {
        Session {
            shared,
            id,
            ctl: Arc::new(Mutex::new(writer)),
            local_ip,
            eret_jobs: None,
            esto_jobs: None,
            cksm_jobs: None,
            planes: Arc::new(Mutex::new(Planes::default())),
            closed: Arc::new(AtomicBool::new(false)),
        }
    }

    fn reply(&self, r: Reply) {
        send(&self.ctl, r);
    }

    fn run(&mut self, mut reader: BufReader<TcpStream>) {
        let mut graceful = false;
        loop {
            let line = match read_line(&mut reader) {
                Ok(Some(line)) => line,
                Ok(None) => break,
                Err(crate::protocol::ProtocolError::Malformed(m)) => {
                    // The rest of the overlong line is still unread; drop the session.
                    self.reply(Reply::new(0, ReplyCode::BadArgument, m));
                    break;
                }
                Err(_) => break,
            };
            let cmd = match decode_command(&line) {
                Ok(c) => c,
                Err(e) => {
                    let tag = std::str::from_utf8(&line)
                        .ok()
                        .and_then(|l| l.split(' ').next())
                        .and_then(|t| t.parse().ok())
                        .unwrap_or(0);
                    self.reply(Reply::new(tag, e.reply_code(), e.to_string()));
                    continue;
                }
            };
            if cmd.verb == Verb::Quit {
                self.reply(Reply::new(cmd.tag, ReplyCode::Ok, "bye"));
                graceful = true;
                break;
            }
            self.dispatch(cmd);
        }
        self.closed.store(true, Ordering::SeqCst);
        self.eret_jobs = None;
        self.esto_jobs = None;
        self.cksm_jobs = None;
        if !graceful {
            let planes = self.planes.lock().unwrap();
            if let Some(p) = &planes.send {
                p.abort();
            }
            if let Some(p) = &planes.receive {
                p.abort();
            }
        }
        log::debug!("session {} closed (graceful: {graceful})", self.id);
    }

    fn dispatch(&mut self, cmd: Command) {
        let tag = cmd.tag;
        match cmd.verb {
            Verb::Noop => self.reply(Reply::new(tag, ReplyCode::Ok, "")),
            Verb::Size => {
                let r = self.handle_size(&cmd);
                self.reply(r)
            }
            Verb::Allo => {
                let r = self.handle_allo(&cmd);
                self.reply(r)
            }
            Verb::Pasv => self.handle_pasv(&cmd),
            Verb::Port => {
                let r = self.handle_port(&cmd);
                self.reply(r)
            }
            Verb::Eret => self.handle_eret(cmd),
            Verb::Esto => self.handle_esto(cmd),
            Verb::Cksm => self.handle_cksm(cmd),
            Verb::Quit => unreachable!("handled by the command loop"),
        }
    }

    fn handle_size(&self, cmd: &Command) -> Reply {
        let path = match self.shared.sandbox.resolve(&cmd.path) {
            Ok(p) => p,
            Err(e) => return sandbox_reply(cmd.tag, e),
        };
        match std::fs::metadata(&path) {
            Ok(m) if m.is_file() => Reply::new(cmd.tag, ReplyCode::Status, m.len().to_string()),
            Ok(_) => file_error(cmd.tag, format!("{}: not a regular file", cmd.path)),
            Err(e) => file_error(cmd.tag, format!("{}: {e}", cmd.path)),
        }
    }

    /// Creates the destination file if needed and sets its length. Safe to
    /// repeat: a file already at the requested length is left alone.
    fn handle_allo(&self, cmd: &Command) -> Reply {
        let path = match self.shared.sandbox.resolve_for_create(&cmd.path) {
            Ok(p) => p,
            Err(e) => return sandbox_reply(cmd.tag, e),
        };
        let _guard = self.shared.presize.lock().unwrap();
        let r = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .and_then(|f| {
                if f.metadata()?.len() != cmd.length {
                    f.set_len(cmd.length)?;
                }
                Ok(())
            });
        match r {
            Ok(()) => Reply::new(cmd.tag, ReplyCode::Ok, cmd.length.to_string()),
            Err(e) => file_error(cmd.tag, format!("{}: {e}", cmd.path)),
        }
    }

    fn handle_pasv(&mut self, cmd: &Command) {
        if self.esto_jobs.is_some() {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::BadArgument,
                "data already set up",
            ));
        }
        let count = cmd.length as usize;
        if count == 0 || count > 64 {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::BadArgument,
                "connection count must be 1..=64",
            ));
        }
        let listener = match TcpListener::bind((self.local_ip, 0)).and_then(|l| {
            l.set_nonblocking(true)?;
            Ok(l)
        }) {
            Ok(l) => l,
            Err(e) => return self.reply(Reply::new(cmd.tag, ReplyCode::Broken, e.to_string())),
        };
        let addr = match listener.local_addr() {
            Ok(a) => a,
            Err(e) => return self.reply(Reply::new(cmd.tag, ReplyCode::Broken, e.to_string())),
        };
        let (tx, rx) = unbounded();
        self.esto_jobs = Some(tx);
        let worker = EstoWorker {
            shared: Arc::clone(&self.shared),
            ctl: Arc::clone(&self.ctl),
            planes: Arc::clone(&self.planes),
            closed: Arc::clone(&self.closed),
        };
        thread::spawn(move || worker.run(listener, count, rx));
        self.reply(Reply::new(cmd.tag, ReplyCode::Ok, addr.to_string()));
    }

    fn handle_port(&mut self, cmd: &Command) -> Reply {
        if self.eret_jobs.is_some() {
            return Reply::new(cmd.tag, ReplyCode::BadArgument, "data already set up");
        }
        let count = cmd.length as usize;
        if count == 0 || count > 64 {
            return Reply::new(
                cmd.tag,
                ReplyCode::BadArgument,
                "connection count must be 1..=64",
            );
        }
        let addr: SocketAddr = match cmd.path.parse() {
            Ok(a) => a,
            Err(_) => {
                return Reply::new(
                    cmd.tag,
                    ReplyCode::BadArgument,
                    format!("bad address {:?}", cmd.path),
                )
            }
        };
        let mut streams = Vec::with_capacity(count);
        for _ in 0..count {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(10)) {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    streams.push(s);
                }
                Err(e) => return Reply::new(cmd.tag, ReplyCode::Broken, e.to_string()),
            }
        }
        let faults = self
            .shared
            .cfg
            .faults
            .as_ref()
            .map(|f| (Arc::clone(f), f.register_source_session()));
        let policy = self.shared.cfg.faults.as_ref().map(|f| f.policy().clone());
        let plane = match SendPlane::new(
            streams,
            policy,
            faults,
            Arc::clone(&self.shared.stats.payload_sent),
        ) {
            Ok(p) => Arc::new(p),
            Err(e) => return Reply::new(cmd.tag, ReplyCode::Broken, e.to_string()),
        };
        self.planes.lock().unwrap().send = Some(Arc::clone(&plane));
        let (tx, rx) = unbounded();
        self.eret_jobs = Some(tx);
        let worker = EretWorker {
            shared: Arc::clone(&self.shared),
            ctl: Arc::clone(&self.ctl),
            closed: Arc::clone(&self.closed),
            plane,
        };
        thread::spawn(move || worker.run(rx));
        Reply::new(cmd.tag, ReplyCode::Ok, format!("{count} connections"))
    }

    fn handle_eret(&mut self, cmd: Command) {
        let Some(jobs) = &self.eret_jobs else {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::Broken,
                "no data connections",
            ));
        };
        if range_end(cmd.offset, cmd.length).is_none() {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::BadArgument,
                "range overflows",
            ));
        }
        let target = cmd
            .algo
            .as_deref()
            .unwrap_or("MD5")
            .parse::<Algorithm>()
            .map_err(|e| Reply::new(cmd.tag, ReplyCode::BadArgument, e.to_string()))
            .and_then(|algo| {
                self.shared
                    .sandbox
                    .resolve(&cmd.path)
                    .map(|p| (p, algo))
                    .map_err(|e| sandbox_reply(cmd.tag, e))
            });
        let _ = jobs.send(EretJob {
            tag: cmd.tag,
            rel: cmd.path,
            offset: cmd.offset,
            length: cmd.length,
            target,
        });
    }

    fn handle_esto(&mut self, cmd: Command) {
        let Some(jobs) = &self.esto_jobs else {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::Broken,
                "no data connections",
            ));
        };
        if range_end(cmd.offset, cmd.length).is_none() {
            return self.reply(Reply::new(
                cmd.tag,
                ReplyCode::BadArgument,
                "range overflows",
            ));
        }
        let target = self
            .shared
            .sandbox
            .resolve(&cmd.path)
            .map_err(|e| sandbox_reply(cmd.tag, e));
        let _ = jobs.send(EstoJob {
            tag: cmd.tag,
            offset: cmd.offset,
            length: cmd.length,
            target,
        });
    }

    fn handle_cksm(&mut self, cmd: Command) {
        if self.cksm_jobs.is_none() {
            let (tx, rx) = unbounded();
            let worker = CksmWorker {
                shared: Arc::clone(&self.shared),
                ctl: Arc::clone(&self.ctl),
                closed: Arc::clone(&self.closed),
            };
            thread::spawn(move || worker.run(rx));
            self.cksm_jobs = Some(tx);
        }
        let _ = self.cksm_jobs.as_ref().unwrap().send(CksmJob { cmd });
    }
}

struct EretWorker {
    shared: Arc<Shared>,
    ctl: ReplyWriter,
    closed: Arc<AtomicBool>,
    plane: Arc<SendPlane>,
}

impl EretWorker {
    fn run(self, jobs: Receiver<EretJob>) {
        for job in jobs {
            if self.closed.load(Ordering::SeqCst) && self.plane.is_broken() {
                break;
            }
            let reply = self.retrieve(job);
            send(&self.ctl, reply);
        }
    }

    fn retrieve(&self, job: EretJob) -> Reply {
        self.shared.stats.erets.fetch_add(1, Ordering::SeqCst);
        let end = job.offset + job.length;
        let (path, algo) = match job.target {
            Ok(t) => t,
            Err(reply) => {
                let _ = self.plane.finish_chunk(end);
                return reply;
            }
        };
        let opened = File::open(&path).and_then(|f| {
            let len = f.metadata()?.len();
            Ok((f, len))
        });
        let file = match opened {
            Ok((f, len)) if end <= len => f,
            Ok((_, len)) => {
                let _ = self.plane.finish_chunk(end);
                return file_error(
                    job.tag,
                    format!(
                        "range [{}, {end}) beyond end of file ({len} bytes)",
                        job.offset
                    ),
                );
            }
            Err(e) => {
                let _ = self.plane.finish_chunk(end);
                return file_error(job.tag, format!("{}: {e}", job.rel));
            }
        };

        let flip = self
            .shared
            .cfg
            .faults
            .as_ref()
            .and_then(|f| f.on_retrieve(&job.rel, job.offset, job.length));
        let mut hasher = algo.hasher();
        let mut lane = 0usize;
        let read = for_each_block(
            &file,
            job.offset,
            job.length,
            self.shared.cfg.io_block,
            |pos, mut buf| {
                if self.plane.is_broken() {
                    return Err(io::Error::new(
                        io::ErrorKind::BrokenPipe,
                        "data plane broken",
                    ));
                }
                hasher.update(&buf);
                if let Some(b) = flip {
                    if b >= pos && b < pos + buf.len() as u64 {
                        buf[(b - pos) as usize] ^= 0xff;
                    }
                }
                let n = buf.len() as u64;
                self.plane.send(lane, BlockHeader::data(pos, n), buf);
                lane += 1;
                Ok(())
            },
        );
        let finished = self.plane.finish_chunk(end);
        match (read, finished) {
            (_, Err(e)) => Reply::new(job.tag, ReplyCode::Broken, e),
            (Err(_), _) if self.plane.is_broken() => {
                Reply::new(job.tag, ReplyCode::Broken, "data connection lost")
            }
            (Err(e), _) => file_error(job.tag, format!("read failed: {e}")),
            (Ok(()), Ok(())) => Reply::new(job.tag, ReplyCode::Complete, hasher.finish().to_hex()),
        }
    }
}

struct EstoWorker {
    shared: Arc<Shared>,
    ctl: ReplyWriter,
    planes: Arc<Mutex<Planes>>,
    closed: Arc<AtomicBool>,
}

impl EstoWorker {
    fn accept(&self, listener: TcpListener, count: usize) -> io::Result<Vec<TcpStream>> {
        let deadline = Instant::now() + DATA_ACCEPT_TIMEOUT;
        let mut streams = Vec::with_capacity(count);
        while streams.len() < count {
            match listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    let _ = s.set_nodelay(true);
                    streams.push(s);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline || self.closed.load(Ordering::SeqCst) {
                        return Err(io::Error::new(
                            io::ErrorKind::TimedOut,
                            "data connections did not arrive",
                        ));
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(streams)
    }

    fn run(self, listener: TcpListener, count: usize, jobs: Receiver<EstoJob>) {
        let plane = match self
            .accept(listener, count)
            .and_then(|s| ReceivePlane::new(s, Arc::clone(&self.shared.stats.payload_received)))
        {
            Ok(p) => Arc::new(p),
            Err(e) => {
                for job in jobs {
                    send(
                        &self.ctl,
                        Reply::new(job.tag, ReplyCode::Broken, e.to_string()),
                    );
                }
                return;
            }
        };
        self.planes.lock().unwrap().receive = Some(Arc::clone(&plane));
        if self.closed.load(Ordering::SeqCst) {
            plane.abort();
        }
        for job in jobs {
            let reply = self.store(&plane, job);
            send(&self.ctl, reply);
        }
    }

    fn store(&self, plane: &ReceivePlane, job: EstoJob) -> Reply {
        self.shared.stats.estos.fetch_add(1, Ordering::SeqCst);
        let tag = job.tag;
        let end = job.offset + job.length;
        let drain = |reply: Reply| match plane.receive_chunk(None, job.offset, job.length) {
            Err(LegError::Broken(e)) => Reply::new(tag, ReplyCode::Broken, e),
            _ => reply,
        };
        let path = match job.target {
            Ok(p) => p,
            Err(reply) => return drain(reply),
        };
        let file = match OpenOptions::new().write(true).open(&path) {
            Ok(f) => f,
            Err(e) => return drain(file_error(tag, format!("open for store: {e}"))),
        };
        match file.metadata() {
            Ok(m) if m.len() >= end => {}
            Ok(m) => {
                return drain(file_error(
                    tag,
                    format!("file is {} bytes, not pre-sized to cover {end}", m.len()),
                ))
            }
            Err(e) => return drain(file_error(tag, e)),
        }
        let file = Arc::new(file);
        match plane.receive_chunk(Some(Arc::clone(&file)), job.offset, job.length) {
            Ok(mut ranges) => {
                if !covers(&mut ranges, job.offset, job.length) {
                    return file_error(tag, "chunk arrived incomplete");
                }
                if let Err(e) = file.sync_data() {
                    return file_error(tag, format!("flush failed: {e}"));
                }
                self.shared.stored.lock().unwrap().insert(path);
                Reply::new(tag, ReplyCode::Complete, job.length.to_string())
            }
            Err(LegError::Broken(e)) => Reply::new(tag, ReplyCode::Broken, e),
            Err(LegError::Write(e)) => file_error(tag, format!("write failed: {e}")),
        }
    }
}

struct CksmWorker {
    shared: Arc<Shared>,
    ctl: ReplyWriter,
    closed: Arc<AtomicBool>,
}

impl CksmWorker {
    fn run(self, jobs: Receiver<CksmJob>) {
        for job in jobs {
            if self.closed.load(Ordering::SeqCst) {
                break;
            }
            let reply = self.checksum(&job.cmd);
            send(&self.ctl, reply);
        }
    }

    fn checksum(&self, cmd: &Command) -> Reply {
        self.shared.stats.cksms.fetch_add(1, Ordering::SeqCst);
        let tag = cmd.tag;
        let algo = match cmd.algo.as_deref().unwrap_or("MD5").parse::<Algorithm>() {
            Ok(a) => a,
            Err(e) => return Reply::new(tag, ReplyCode::BadArgument, e.to_string()),
        };
        let path = match self.shared.sandbox.resolve(&cmd.path) {
            Ok(p) => p,
            Err(e) => return sandbox_reply(tag, e),
        };
        let Some(end) = range_end(cmd.offset, cmd.length) else {
            return Reply::new(tag, ReplyCode::BadArgument, "range overflows");
        };
        if let Some(inj) = &self.shared.cfg.faults {
            let stored_here = self.shared.stored.lock().unwrap().contains(&path);
            if stored_here {
                if let Some(b) = inj.on_reread(&cmd.path, cmd.offset, cmd.length) {
                    if let Err(e) = flip_stored_byte(&path, b) {
                        log::warn!("could not inject at-rest corruption: {e}");
                    }
                }
            }
        }

        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) => return file_error(tag, format!("{}: {e}", cmd.path)),
        };
        match file.metadata() {
            Ok(m) if m.len() >= end => {}
            Ok(m) => {
                return file_error(
                    tag,
                    format!("range ends at {end}, file has {} bytes", m.len()),
                )
            }
            Err(e) => return file_error(tag, e),
        }

        let mut throttle = self
            .shared
            .cfg
            .faults
            .as_ref()
            .and_then(|f| f.policy().reread_cap)
            .map(Throttle::new);
        let mut hasher = algo.hasher();
        let reread = &self.shared.stats.reread_bytes;
        let r = for_each_block(
            &file,
            cmd.offset,
            cmd.length,
            self.shared.cfg.io_block,
            |_, buf| {
                if let Some(t) = &mut throttle {
                    t.consume(buf.len());
                }
                reread.fetch_add(buf.len() as u64, Ordering::SeqCst);
                hasher.update(&buf);
                Ok(())
            },
        );
        match r {
            Ok(()) => Reply::new(tag, ReplyCode::Status, hasher.finish().to_hex()),
            Err(e) => file_error(tag, format!("re-read failed: {e}")),
        }
    }
}

fn flip_stored_byte(path: &std::path::Path, at: u64) -> io::Result<()> {
    let f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut byte = [0u8; 1];
    f.read_exact_at(&mut byte, at)?;
    f.write_all_at(&[byte[0] ^ 0xff], at)?;
    f.sync_data()
}
