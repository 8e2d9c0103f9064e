//! Data connections of one session.
//!
//! A source session stripes each retrieved chunk round-robin over its P
//! connections in `io_block` units and closes the chunk with an end-of-chunk
//! marker on every connection. A destination session runs one reader per
//! connection; for each stored chunk every reader consumes blocks up to its
//! marker, writing payload at the offsets carried in the block headers.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded, Sender};

use crate::harness::faults::{wrap_connection, FaultInjector, LinkPolicy};
use crate::protocol::{read_block_header, write_block, BlockHeader, ProtocolError};

/// Outcome of one connection's share of a chunk.
#[derive(Debug)]
pub enum LegError {
    /// Connection lost or framing violated. The connection is unusable.
    Broken(String),
    /// Payload arrived intact but could not be written.
    Write(io::Error),
}

enum WriterMsg {
    Block(BlockHeader, Vec<u8>),
    EndOfChunk(u64, Sender<Result<(), String>>),
}

/// Sending half of a source session.
pub struct SendPlane {
    writers: Vec<Sender<WriterMsg>>,
    streams: Vec<TcpStream>,
    broken: Arc<AtomicBool>,
}

impl SendPlane {
    pub fn new(
        streams: Vec<TcpStream>,
        policy: Option<LinkPolicy>,
        faults: Option<(Arc<FaultInjector>, u32)>,
        sent: Arc<AtomicU64>,
    ) -> io::Result<Self> {
        let broken = Arc::new(AtomicBool::new(false));
        let session_bytes = Arc::new(AtomicU64::new(0));
        let started = Instant::now();
        let all: Vec<TcpStream> = streams
            .iter()
            .map(|s| s.try_clone())
            .collect::<io::Result<_>>()?;
        let mut writers = Vec::with_capacity(streams.len());
        for stream in streams {
            let (tx, rx) = bounded::<WriterMsg>(4);
            let policy = policy.clone().unwrap_or_default();
            let broken = Arc::clone(&broken);
            let faults = faults.clone();
            let session_bytes = Arc::clone(&session_bytes);
            let sent = Arc::clone(&sent);
            let peers: Vec<TcpStream> = all
                .iter()
                .map(|s| s.try_clone())
                .collect::<io::Result<_>>()?;
            thread::spawn(move || {
                let mut out = BufWriter::with_capacity(64 * 1024, wrap_connection(stream, &policy));
                let cut = |peers: &[TcpStream]| {
                    for p in peers {
                        let _ = p.shutdown(Shutdown::Both);
                    }
                };
                for msg in rx {
                    match msg {
                        WriterMsg::Block(h, payload) => {
                            if broken.load(Ordering::SeqCst) {
                                continue;
                            }
                            if let Err(e) = write_block(&mut out, &h, &payload) {
                                log::debug!("data write failed: {e}");
                                broken.store(true, Ordering::SeqCst);
                                continue;
                            }
                            sent.fetch_add(h.length, Ordering::Relaxed);
                            let total =
                                session_bytes.fetch_add(h.length, Ordering::SeqCst) + h.length;
                            if let Some((inj, ordinal)) = &faults {
                                if inj.should_disconnect(*ordinal, total, started) {
                                    log::info!("injecting disconnect on source session {ordinal}");
                                    broken.store(true, Ordering::SeqCst);
                                    let _ = out.flush();
                                    cut(&peers);
                                }
                            }
                        }
                        WriterMsg::EndOfChunk(end, done) => {
                            let r = if broken.load(Ordering::SeqCst) {
                                Err("data connection broken".to_string())
                            } else {
                                write_block(&mut out, &BlockHeader::end_of_chunk(end), &[])
                                    .and_then(|_| out.flush())
                                    .map_err(|e| {
                                        broken.store(true, Ordering::SeqCst);
                                        e.to_string()
                                    })
                            };
                            let _ = done.send(r);
                        }
                    }
                }
                if !broken.load(Ordering::SeqCst) {
                    let _ = write_block(&mut out, &BlockHeader::end_of_session(), &[]);
                    let _ = out.flush();
                }
            });
            writers.push(tx);
        }
        Ok(SendPlane {
            writers,
            streams: all,
            broken,
        })
    }

    pub fn is_broken(&self) -> bool {
        self.broken.load(Ordering::SeqCst)
    }

    /// Queues a payload block on connection `lane`.
    pub fn send(&self, lane: usize, header: BlockHeader, payload: Vec<u8>) {
        let _ = self.writers[lane % self.writers.len()].send(WriterMsg::Block(header, payload));
    }

    /// Closes the current chunk on every connection and waits until all
    /// connections have flushed it.
    pub fn finish_chunk(&self, end: u64) -> Result<(), String> {
        let (tx, rx) = unbounded();
        for w in &self.writers {
            if w.send(WriterMsg::EndOfChunk(end, tx.clone())).is_err() {
                return Err("data writer gone".into());
            }
        }
        drop(tx);
        let mut result = Ok(());
        for _ in 0..self.writers.len() {
            match rx.recv() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => result = Err(e),
                Err(_) => result = Err("data writer gone".into()),
            }
        }
        result
    }

    pub fn abort(&self) {
        self.broken.store(true, Ordering::SeqCst);
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

struct ReaderJob {
    file: Option<Arc<File>>,
    offset: u64,
    length: u64,
    done: Sender<Result<Vec<(u64, u64)>, LegError>>,
}

/// Receiving half of a destination session.
pub struct ReceivePlane {
    readers: Vec<Sender<ReaderJob>>,
    streams: Vec<TcpStream>,
}

fn read_leg<R: Read>(
    stream: &mut R,
    buf: &mut Vec<u8>,
    job: &ReaderJob,
    received: &AtomicU64,
) -> Result<Vec<(u64, u64)>, LegError> {
    let end = job.offset + job.length;
    let mut ranges = Vec::new();
    let mut write_err = None;
    loop {
        let h = match read_block_header(stream) {
            Ok(Some(h)) => h,
            Ok(None) => return Err(LegError::Broken("data connection closed".into())),
            Err(e) => return Err(LegError::Broken(e.to_string())),
        };
        if h.is_end_of_session() {
            return Err(LegError::Broken("peer ended the session mid-chunk".into()));
        }
        if h.is_end_of_chunk() {
            if h.offset != end || h.length != 0 {
                return Err(LegError::Broken(format!(
                    "end-of-chunk marker at {} does not close chunk ending at {end}",
                    h.offset
                )));
            }
            break;
        }
        if h.offset < job.offset || h.offset + h.length > end {
            return Err(LegError::Broken(
                ProtocolError::Framing(format!(
                    "block [{}, {}) outside chunk [{}, {end})",
                    h.offset,
                    h.offset + h.length,
                    job.offset
                ))
                .to_string(),
            ));
        }
        buf.resize(h.length as usize, 0);
        stream
            .read_exact(buf)
            .map_err(|e| LegError::Broken(format!("payload truncated: {e}")))?;
        received.fetch_add(h.length, Ordering::Relaxed);
        if let Some(f) = &job.file {
            if write_err.is_none() {
                if let Err(e) = f.write_all_at(buf, h.offset) {
                    write_err = Some(e);
                }
            }
        }
        ranges.push((h.offset, h.length));
    }
    match write_err {
        Some(e) => Err(LegError::Write(e)),
        None => Ok(ranges),
    }
}

impl ReceivePlane {
    pub fn new(streams: Vec<TcpStream>, received: Arc<AtomicU64>) -> io::Result<Self> {
        let mut readers = Vec::with_capacity(streams.len());
        let mut all = Vec::with_capacity(streams.len());
        for stream in streams {
            all.push(stream.try_clone()?);
            let (tx, rx) = unbounded::<ReaderJob>();
            let received = Arc::clone(&received);
            thread::spawn(move || {
                let mut stream = BufReader::with_capacity(256 * 1024, stream);
                let mut buf = Vec::new();
                let mut dead: Option<String> = None;
                for job in rx {
                    let r = match &dead {
                        Some(why) => Err(LegError::Broken(why.clone())),
                        None => read_leg(&mut stream, &mut buf, &job, &received),
                    };
                    if let Err(LegError::Broken(why)) = &r {
                        dead.get_or_insert_with(|| why.clone());
                    }
                    let _ = job.done.send(r);
                }
            });
            readers.push(tx);
        }
        Ok(ReceivePlane {
            readers,
            streams: all,
        })
    }

    /// Receives one chunk from every connection. With `file` absent the
    /// payload is consumed and discarded. Returns the received ranges.
    pub fn receive_chunk(
        &self,
        file: Option<Arc<File>>,
        offset: u64,
        length: u64,
    ) -> Result<Vec<(u64, u64)>, LegError> {
        let (tx, rx) = unbounded();
        for r in &self.readers {
            let job = ReaderJob {
                file: file.clone(),
                offset,
                length,
                done: tx.clone(),
            };
            if r.send(job).is_err() {
                return Err(LegError::Broken("data reader gone".into()));
            }
        }
        drop(tx);
        let mut ranges = Vec::new();
        let mut err = None;
        for _ in 0..self.readers.len() {
            match rx.recv() {
                Ok(Ok(mut r)) => ranges.append(&mut r),
                Ok(Err(e)) => {
                    // Broken wins over write failures.
                    if !matches!(err, Some(LegError::Broken(_))) {
                        err = Some(e);
                    }
                }
                Err(_) => err = Some(LegError::Broken("data reader gone".into())),
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok(ranges),
        }
    }

    pub fn abort(&self) {
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Whether `ranges` (possibly overlapping, in any order) cover `[offset, offset+length)`.
pub fn covers(ranges: &mut [(u64, u64)], offset: u64, length: u64) -> bool {
    ranges.sort_unstable();
    let end = offset + length;
    let mut reached = offset;
    for &(o, l) in ranges.iter() {
        if o > reached {
            return false;
        }
        reached = reached.max(o + l);
        if reached >= end {
            break;
        }
    }
    reached >= end
}

/// Reads `[offset, offset+length)` from `file` in `block`-sized pieces.
pub fn for_each_block(
    file: &File,
    offset: u64,
    length: u64,
    block: usize,
    mut f: impl FnMut(u64, Vec<u8>) -> io::Result<()>,
) -> io::Result<()> {
    let mut pos = offset;
    let end = offset + length;
    while pos < end {
        let n = (end - pos).min(block as u64) as usize;
        let mut buf = vec![0u8; n];
        file.read_exact_at(&mut buf, pos)?;
        f(pos, buf)?;
        pos += n as u64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage() {
        assert!(covers(&mut [], 5, 0));
        assert!(covers(&mut [(0, 10)], 0, 10));
        assert!(covers(&mut [(5, 5), (0, 5)], 0, 10));
        assert!(covers(&mut [(0, 6), (4, 6), (0, 6)], 0, 10));
        assert!(!covers(&mut [(0, 4), (5, 5)], 0, 10));
        assert!(!covers(&mut [(0, 9)], 0, 10));
        assert!(!covers(&mut [(1, 9)], 0, 10));
    }

    fn frames(blocks: &[(u64, &[u8])], eoc: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        for (off, data) in blocks {
            write_block(&mut buf, &BlockHeader::data(*off, data.len() as u64), data).unwrap();
        }
        write_block(&mut buf, &BlockHeader::end_of_chunk(eoc), &[]).unwrap();
        buf
    }

    fn job(file: Option<Arc<File>>, offset: u64, length: u64) -> ReaderJob {
        ReaderJob {
            file,
            offset,
            length,
            done: unbounded().0,
        }
    }

    fn store(blocks: &[(u64, &[u8])], base: &[u8], offset: u64, length: u64) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::write(&p, base).unwrap();
        let f = Arc::new(std::fs::OpenOptions::new().write(true).open(&p).unwrap());
        let wire = frames(blocks, offset + length);
        let mut buf = Vec::new();
        let n = AtomicU64::new(0);
        let mut ranges =
            read_leg(&mut &wire[..], &mut buf, &job(Some(f), offset, length), &n).unwrap();
        assert!(covers(&mut ranges, offset, length));
        std::fs::read(&p).unwrap()
    }

    #[test]
    fn stored_chunk_leaves_rest_untouched() {
        let base = vec![b'.'; 1000];
        let payload = vec![b'x'; 300];
        let out = store(&[(300, &payload)], &base, 300, 300);
        assert!(out[..300].iter().all(|&b| b == b'.'));
        assert!(out[300..600].iter().all(|&b| b == b'x'));
        assert!(out[600..].iter().all(|&b| b == b'.'));
    }

    #[test]
    fn reverse_order_equals_in_order() {
        let data: Vec<u8> = (0..1000u32).map(|i| (i * 7 % 256) as u8).collect();
        let blocks: Vec<(u64, &[u8])> = data
            .chunks(64)
            .enumerate()
            .map(|(i, c)| ((i * 64) as u64, c))
            .collect();
        let base = vec![0u8; 1000];
        let forward = store(&blocks, &base, 0, 1000);
        let mut rev = blocks.clone();
        rev.reverse();
        assert_eq!(store(&rev, &base, 0, 1000), forward);
        assert_eq!(forward, data);
    }

    #[test]
    fn duplicate_block_is_idempotent() {
        let base = vec![0u8; 10];
        let out = store(&[(0, b"hello"), (0, b"hello"), (5, b"world")], &base, 0, 10);
        assert_eq!(out, b"helloworld");
    }

    #[test]
    fn block_outside_chunk_breaks_leg() {
        let wire = frames(&[(0, b"abc")], 13);
        let mut buf = Vec::new();
        let n = AtomicU64::new(0);
        let r = read_leg(&mut &wire[..], &mut buf, &job(None, 10, 3), &n);
        assert!(matches!(r, Err(LegError::Broken(_))));
    }

    #[test]
    fn wrong_marker_breaks_leg() {
        let wire = frames(&[(0, b"abc")], 4);
        let mut buf = Vec::new();
        let n = AtomicU64::new(0);
        let r = read_leg(&mut &wire[..], &mut buf, &job(None, 0, 3), &n);
        assert!(matches!(r, Err(LegError::Broken(_))));
    }

    #[test]
    fn eof_mid_chunk_breaks_leg() {
        let mut wire = Vec::new();
        write_block(&mut wire, &BlockHeader::data(0, 3), b"abc").unwrap();
        let mut buf = Vec::new();
        let n = AtomicU64::new(0);
        let r = read_leg(&mut &wire[..], &mut buf, &job(None, 0, 10), &n);
        assert!(matches!(r, Err(LegError::Broken(_))));
    }
}
