//! Client side of the control channel: one connection to each endpoint of a
//! mover pair, with replies from both merged into a single ordered stream.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::{Endpoint, TransferError};
use crate::protocol::{
    decode_reply, hello_line, read_line, write_command, Command, Reply, ReplyCode, BANNER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Destination,
}

impl Side {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug)]
pub struct Delivery {
    pub side: Side,
    /// `None` when the endpoint closed the connection or sent garbage.
    pub reply: Option<Reply>,
    arrived: Instant,
}

/// Control connections to a source and a destination agent.
///
/// Replies are stamped on arrival and handed out no earlier than the
/// configured latency afterwards, which models a command round trip on a
/// long link without slowing the data plane.
pub struct PairLink {
    writers: [BufWriter<TcpStream>; 2],
    streams: [TcpStream; 2],
    rx: Receiver<Delivery>,
    latency: Duration,
    next_tag: u32,
}

fn connect_one(
    ep: &Endpoint,
    side: Side,
    timeout: Duration,
    tx: Sender<Delivery>,
) -> Result<TcpStream, TransferError> {
    let unreachable = |why: String| TransferError::Connectivity(format!("{}: {why}", ep.addr));
    let addrs: Vec<_> = ep
        .addr
        .to_socket_addrs()
        .map_err(|e| unreachable(e.to_string()))?
        .collect();
    let mut last = None;
    let mut stream = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let stream =
        stream.ok_or_else(|| unreachable(last.map_or("no addresses".into(), |e| e.to_string())))?;
    let _ = stream.set_nodelay(true);
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| unreachable(e.to_string()))?;
    let mut reader = BufReader::new(stream.try_clone().map_err(|e| unreachable(e.to_string()))?);

    let banner = read_line(&mut reader)
        .map_err(|e| unreachable(e.to_string()))?
        .ok_or_else(|| unreachable("closed before banner".into()))?;
    if banner.strip_suffix(b"\r\n") != Some(BANNER.as_bytes()) {
        return Err(unreachable(format!(
            "unexpected banner {:?}",
            String::from_utf8_lossy(&banner)
        )));
    }
    (&stream)
        .write_all(hello_line(&ep.token).as_bytes())
        .map_err(|e| unreachable(e.to_string()))?;
    let line = read_line(&mut reader)
        .map_err(|e| unreachable(e.to_string()))?
        .ok_or_else(|| unreachable("authentication rejected".into()))?;
    let reply = decode_reply(&line).map_err(|e| unreachable(e.to_string()))?;
    match reply.code {
        ReplyCode::Ok => {}
        ReplyCode::Busy => return Err(unreachable("agent is busy".into())),
        code => return Err(unreachable(format!("login refused ({})", code.value()))),
    }
    stream
        .set_read_timeout(None)
        .map_err(|e| unreachable(e.to_string()))?;

    thread::spawn(move || loop {
        let reply = match read_line(&mut reader) {
            Ok(Some(line)) => decode_reply(&line).ok(),
            _ => None,
        };
        let end = reply.is_none();
        let sent = tx.send(Delivery {
            side,
            reply,
            arrived: Instant::now(),
        });
        if end || sent.is_err() {
            return;
        }
    });
    Ok(stream)
}

impl PairLink {
    pub fn connect(
        source: &Endpoint,
        destination: &Endpoint,
        latency: Duration,
        timeout: Duration,
    ) -> Result<PairLink, TransferError> {
        let (tx, rx) = unbounded();
        let src = connect_one(source, Side::Source, timeout, tx.clone())?;
        let dst = connect_one(destination, Side::Destination, timeout, tx)?;
        let w = |s: &TcpStream| {
            s.try_clone()
                .map(BufWriter::new)
                .map_err(|e| TransferError::Connectivity(e.to_string()))
        };
        Ok(PairLink {
            writers: [w(&src)?, w(&dst)?],
            streams: [src, dst],
            rx,
            latency,
            next_tag: 1,
        })
    }

    /// Queues a command; call [`flush`](Self::flush) to put it on the wire.
    pub fn send(&mut self, side: Side, mut cmd: Command) -> Result<u32, TransferError> {
        cmd.tag = self.next_tag;
        self.next_tag = self.next_tag.wrapping_add(1).max(1);
        let w = &mut self.writers[side.index()];
        write_command(w, &cmd).map_err(|e| TransferError::Protocol(e.to_string()))?;
        Ok(cmd.tag)
    }

    pub fn flush(&mut self) -> Result<(), TransferError> {
        for w in &mut self.writers {
            w.flush()
                .map_err(|e| TransferError::Connectivity(format!("control write: {e}")))?;
        }
        Ok(())
    }

    /// Next reply from either side, or `None` on timeout.
    pub fn recv(&self, timeout: Duration) -> Option<Delivery> {
        let d = match self.rx.recv_timeout(timeout) {
            Ok(d) => d,
            Err(RecvTimeoutError::Timeout) => return None,
            Err(RecvTimeoutError::Disconnected) => {
                return Some(Delivery {
                    side: Side::Source,
                    reply: None,
                    arrived: Instant::now(),
                })
            }
        };
        let due = d.arrived + self.latency;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        Some(d)
    }

    /// Sends one command and waits for its reply. Only for use when nothing
    /// else is outstanding.
    pub fn call(
        &mut self,
        side: Side,
        cmd: Command,
        timeout: Duration,
    ) -> Result<Reply, TransferError> {
        let tag = self.send(side, cmd)?;
        self.flush()?;
        self.expect(tag, timeout)
    }

    /// Waits for the reply carrying `tag`.
    pub fn expect(&self, tag: u32, timeout: Duration) -> Result<Reply, TransferError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(d) = self.recv(left) else {
                return Err(TransferError::Connectivity(
                    "timed out waiting for a reply".into(),
                ));
            };
            match d.reply {
                None => {
                    return Err(TransferError::Connectivity(
                        "control connection lost".into(),
                    ))
                }
                Some(r) if r.tag == tag => return Ok(r),
                Some(r) => log::debug!("dropping stray reply {r:?}"),
            }
        }
    }

    pub fn quit(mut self) {
        for side in [Side::Source, Side::Destination] {
            let _ = self.send(side, Command::new(0, crate::protocol::Verb::Quit, "", 0, 0));
        }
        let _ = self.flush();
    }

    /// Drops both connections without a goodbye; the agents abort the
    /// session's data streams.
    pub fn abort(self) {
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
