//! Control-channel command language and data-channel block framing.
//!
//! Control lines are CRLF-terminated text:
//!
//! ```text
//! command: TAG VERB OFFSET LENGTH ALGO PATH\r\n
//! reply:   TAG CODE[ TEXT]\r\n
//! ```
//!
//! Data connections carry a sequence of blocks, each a 17-byte big-endian
//! header (`flags ‖ length ‖ offset`) followed by `length` payload bytes.

use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use thiserror::Error;

/// Sent by a server immediately after accepting a control connection.
pub const BANNER: &str = "CHUNKFERRY/1";
pub const MAX_LINE: usize = 4096;
pub const BLOCK_HEADER_LEN: usize = 17;
/// Largest payload a single block may announce.
pub const MAX_BLOCK_PAYLOAD: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// Reply code a server sends back for this error.
    pub fn reply_code(&self) -> ReplyCode {
        match self {
            ProtocolError::Malformed(_) | ProtocolError::BadArgument(_) => ReplyCode::BadArgument,
            ProtocolError::Framing(_) | ProtocolError::Closed | ProtocolError::Io(_) => {
                ReplyCode::Broken
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    /// Size of a file.
    Size,
    /// Partial retrieve: stream `[offset, offset+length)` over the data connections.
    Eret,
    /// Partial store: receive `[offset, offset+length)` from the data connections.
    Esto,
    /// Re-read `[offset, offset+length)` from storage and digest it.
    Cksm,
    Noop,
    Quit,
    /// Pre-size a destination file to `length` bytes.
    Allo,
    /// Listen for `length` data connections; reply text is the address.
    Pasv,
    /// Open `length` data connections to the address carried in the path field.
    Port,
}

impl Verb {
    pub const ALL: [Verb; 9] = [
        Verb::Size,
        Verb::Eret,
        Verb::Esto,
        Verb::Cksm,
        Verb::Noop,
        Verb::Quit,
        Verb::Allo,
        Verb::Pasv,
        Verb::Port,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Size => "SIZE",
            Verb::Eret => "ERET",
            Verb::Esto => "ESTO",
            Verb::Cksm => "CKSM",
            Verb::Noop => "NOOP",
            Verb::Quit => "QUIT",
            Verb::Allo => "ALLO",
            Verb::Pasv => "PASV",
            Verb::Port => "PORT",
        }
    }

    /// Whether the path field must name a file.
    pub fn needs_path(self) -> bool {
        matches!(
            self,
            Verb::Size | Verb::Eret | Verb::Esto | Verb::Cksm | Verb::Allo | Verb::Port
        )
    }
}

impl FromStr for Verb {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ProtocolError::Malformed(format!("unknown verb {s:?}")))
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    pub tag: u32,
    pub verb: Verb,
    pub offset: u64,
    pub length: u64,
    pub algo: Option<String>,
    pub path: String,
}

impl Command {
    pub fn new(tag: u32, verb: Verb, path: impl Into<String>, offset: u64, length: u64) -> Self {
        Command {
            tag,
            verb,
            offset,
            length,
            algo: None,
            path: path.into(),
        }
    }

    pub fn with_algo(mut self, algo: impl Into<String>) -> Self {
        self.algo = Some(algo.into());
        self
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if let Some(a) = &self.algo {
            validate_algo(a)?;
        }
        if self.verb.needs_path() || !self.path.is_empty() {
            validate_path(&self.path)?;
        }
        Ok(())
    }
}

fn validate_algo(a: &str) -> Result<(), ProtocolError> {
    if a.is_empty()
        || a == "-"
        || !a
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
    {
        return Err(ProtocolError::BadArgument(format!(
            "bad algorithm name {a:?}"
        )));
    }
    Ok(())
}

/// Checks that `path` is a relative path with no parent-directory segment.
pub fn validate_path(path: &str) -> Result<(), ProtocolError> {
    let bad = |why: &str| Err(ProtocolError::BadArgument(format!("path {path:?}: {why}")));
    if path.is_empty() {
        return bad("empty");
    }
    if path.starts_with('/') || path.starts_with('\\') {
        return bad("absolute");
    }
    if path.bytes().any(|b| b == 0 || b == b'\r' || b == b'\n') {
        return bad("control character");
    }
    if path.split(['/', '\\']).any(|seg| seg == "..") {
        return bad("parent segment");
    }
    Ok(())
}

pub fn encode_command(cmd: &Command) -> Result<Vec<u8>, ProtocolError> {
    cmd.validate()?;
    let line = format!(
        "{} {} {} {} {} {}\r\n",
        cmd.tag,
        cmd.verb,
        cmd.offset,
        cmd.length,
        cmd.algo.as_deref().unwrap_or("-"),
        cmd.path
    );
    if line.len() > MAX_LINE {
        return Err(ProtocolError::BadArgument("line too long".into()));
    }
    Ok(line.into_bytes())
}

fn strip_crlf(line: &[u8]) -> Result<&str, ProtocolError> {
    if line.len() > MAX_LINE {
        return Err(ProtocolError::Malformed(format!(
            "line of {} bytes exceeds {MAX_LINE}",
            line.len()
        )));
    }
    let body = line
        .strip_suffix(b"\r\n")
        .ok_or_else(|| ProtocolError::Malformed("missing CRLF terminator".into()))?;
    let text = std::str::from_utf8(body)
        .map_err(|_| ProtocolError::Malformed("line is not UTF-8".into()))?;
    if text.contains(['\r', '\n']) {
        return Err(ProtocolError::Malformed("embedded line break".into()));
    }
    Ok(text)
}

fn parse_decimal<T: FromStr>(field: &str, what: &str) -> Result<T, ProtocolError> {
    // FromStr for integers tolerates a leading '+'; the grammar does not.
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::Malformed(format!(
            "{what} is not a decimal numeral: {field:?}"
        )));
    }
    field
        .parse()
        .map_err(|_| ProtocolError::Malformed(format!("{what} out of range: {field:?}")))
}

pub fn decode_command(line: &[u8]) -> Result<Command, ProtocolError> {
    let text = strip_crlf(line)?;
    let mut fields = text.splitn(6, ' ');
    let mut next = |what: &str| {
        fields
            .next()
            .ok_or_else(|| ProtocolError::Malformed(format!("missing {what}")))
    };
    let tag = parse_decimal(next("tag")?, "tag")?;
    let verb: Verb = next("verb")?.parse()?;
    let offset = parse_decimal(next("offset")?, "offset")?;
    let length = parse_decimal(next("length")?, "length")?;
    let algo = match next("algo")? {
        "-" => None,
        a => Some(a.to_string()),
    };
    let path = next("path")?.to_string();
    let cmd = Command {
        tag,
        verb,
        offset,
        length,
        algo,
        path,
    };
    cmd.validate()?;
    Ok(cmd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplyCode {
    Ok = 200,
    Status = 213,
    Complete = 226,
    Broken = 426,
    Busy = 450,
    BadArgument = 501,
    FileError = 550,
}

impl ReplyCode {
    pub const ALL: [ReplyCode; 7] = [
        ReplyCode::Ok,
        ReplyCode::Status,
        ReplyCode::Complete,
        ReplyCode::Broken,
        ReplyCode::Busy,
        ReplyCode::BadArgument,
        ReplyCode::FileError,
    ];

    pub fn value(self) -> u16 {
        self as u16
    }

    pub fn from_value(v: u16) -> Option<ReplyCode> {
        ReplyCode::ALL.iter().copied().find(|c| c.value() == v)
    }

    pub fn is_success(self) -> bool {
        self.value() < 400
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Reply {
    pub tag: u32,
    pub code: ReplyCode,
    pub text: String,
}

impl Reply {
    pub fn new(tag: u32, code: ReplyCode, text: impl Into<String>) -> Self {
        Reply {
            tag,
            code,
            text: text.into(),
        }
    }
}

pub fn encode_reply(reply: &Reply) -> Result<Vec<u8>, ProtocolError> {
    if reply.text.contains(['\r', '\n']) {
        return Err(ProtocolError::BadArgument(
            "reply text has a line break".into(),
        ));
    }
    let line = if reply.text.is_empty() {
        format!("{} {}\r\n", reply.tag, reply.code.value())
    } else {
        format!("{} {} {}\r\n", reply.tag, reply.code.value(), reply.text)
    };
    if line.len() > MAX_LINE {
        return Err(ProtocolError::BadArgument("reply too long".into()));
    }
    Ok(line.into_bytes())
}

pub fn decode_reply(line: &[u8]) -> Result<Reply, ProtocolError> {
    let text = strip_crlf(line)?;
    let mut fields = text.splitn(3, ' ');
    let tag = parse_decimal(fields.next().unwrap_or(""), "tag")?;
    let code_field = fields
        .next()
        .ok_or_else(|| ProtocolError::Malformed("missing reply code".into()))?;
    if code_field.len() != 3 {
        return Err(ProtocolError::Malformed(format!(
            "reply code must have 3 digits: {code_field:?}"
        )));
    }
    let code_num: u16 = parse_decimal(code_field, "reply code")?;
    let code = ReplyCode::from_value(code_num)
        .ok_or_else(|| ProtocolError::Malformed(format!("unknown reply code {code_num}")))?;
    Ok(Reply {
        tag,
        code,
        text: fields.next().unwrap_or("").to_string(),
    })
}

/// Reads one CRLF-terminated line of at most [`MAX_LINE`] bytes.
///
/// Returns `Ok(None)` on clean EOF before any byte. An over-long line is
/// reported as malformed once its first `MAX_LINE + 1` bytes have arrived.
pub fn read_line<R: BufRead>(reader: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut line = Vec::new();
    let mut limited = reader.take(MAX_LINE as u64 + 1);
    let n = limited.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        if line.len() > MAX_LINE {
            return Err(ProtocolError::Malformed(format!(
                "line exceeds {MAX_LINE} bytes"
            )));
        }
        return Err(ProtocolError::Closed);
    }
    Ok(Some(line))
}

pub fn write_command<W: Write>(w: &mut W, cmd: &Command) -> Result<(), ProtocolError> {
    w.write_all(&encode_command(cmd)?)?;
    w.flush()?;
    Ok(())
}

pub fn write_reply<W: Write>(w: &mut W, reply: &Reply) -> Result<(), ProtocolError> {
    w.write_all(&encode_reply(reply)?)?;
    w.flush()?;
    Ok(())
}

pub fn hello_line(token: &str) -> String {
    format!("HELLO {token}\r\n")
}

/// Extracts the token from a `HELLO <token>` line.
pub fn parse_hello(line: &[u8]) -> Result<&str, ProtocolError> {
    let text = strip_crlf(line)?;
    text.strip_prefix("HELLO ")
        .ok_or_else(|| ProtocolError::Malformed("expected HELLO".into()))
}

pub const FLAG_END_OF_CHUNK: u8 = 0x01;
pub const FLAG_END_OF_SESSION: u8 = 0x02;
const FLAG_RESERVED: u8 = !(FLAG_END_OF_CHUNK | FLAG_END_OF_SESSION);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub descriptor: u8,
    pub length: u64,
    pub offset: u64,
}

impl BlockHeader {
    pub fn data(offset: u64, length: u64) -> Self {
        BlockHeader {
            descriptor: 0,
            length,
            offset,
        }
    }

    pub fn end_of_chunk(offset: u64) -> Self {
        BlockHeader {
            descriptor: FLAG_END_OF_CHUNK,
            length: 0,
            offset,
        }
    }

    pub fn end_of_session() -> Self {
        BlockHeader {
            descriptor: FLAG_END_OF_SESSION,
            length: 0,
            offset: 0,
        }
    }

    pub fn is_end_of_chunk(&self) -> bool {
        self.descriptor & FLAG_END_OF_CHUNK != 0
    }

    pub fn is_end_of_session(&self) -> bool {
        self.descriptor & FLAG_END_OF_SESSION != 0
    }
}

pub fn encode_block_header(h: &BlockHeader) -> [u8; BLOCK_HEADER_LEN] {
    let mut out = [0u8; BLOCK_HEADER_LEN];
    out[0] = h.descriptor;
    out[1..9].copy_from_slice(&h.length.to_be_bytes());
    out[9..17].copy_from_slice(&h.offset.to_be_bytes());
    out
}

pub fn decode_block_header(bytes: &[u8]) -> Result<BlockHeader, ProtocolError> {
    if bytes.len() < BLOCK_HEADER_LEN {
        return Err(ProtocolError::Framing(format!(
            "block header needs {BLOCK_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let descriptor = bytes[0];
    if descriptor & FLAG_RESERVED != 0 {
        return Err(ProtocolError::Framing(format!(
            "reserved descriptor bits set: {descriptor:#04x}"
        )));
    }
    let length = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
    let offset = u64::from_be_bytes(bytes[9..17].try_into().unwrap());
    if length > MAX_BLOCK_PAYLOAD {
        return Err(ProtocolError::Framing(format!(
            "block length {length} exceeds limit"
        )));
    }
    if offset.checked_add(length).is_none() {
        return Err(ProtocolError::Framing("block range overflows".into()));
    }
    Ok(BlockHeader {
        descriptor,
        length,
        offset,
    })
}

/// Reads one block header from a data connection. `Ok(None)` on EOF at a
/// block boundary; a partial header is a framing error.
pub fn read_block_header<R: Read>(r: &mut R) -> Result<Option<BlockHeader>, ProtocolError> {
    let mut buf = [0u8; BLOCK_HEADER_LEN];
    let mut filled = 0;
    while filled < BLOCK_HEADER_LEN {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Framing(format!(
                    "stream ended inside a block header ({filled} bytes)"
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode_block_header(&buf).map(Some)
}

pub fn write_block<W: Write>(w: &mut W, h: &BlockHeader, payload: &[u8]) -> io::Result<()> {
    debug_assert_eq!(h.length, payload.len() as u64);
    w.write_all(&encode_block_header(h))?;
    w.write_all(payload)
}

/// A block parsed out of a byte buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: BlockHeader,
    pub payload: Vec<u8>,
}

/// Splits `bytes` into frames. Parsing stops at the first violation, which is
/// returned alongside every frame that preceded it.
pub fn decode_frames(mut bytes: &[u8]) -> (Vec<Frame>, Option<ProtocolError>) {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        let header = match decode_block_header(bytes) {
            Ok(h) => h,
            Err(e) => return (frames, Some(e)),
        };
        let rest = &bytes[BLOCK_HEADER_LEN..];
        if (rest.len() as u64) < header.length {
            return (
                frames,
                Some(ProtocolError::Framing(format!(
                    "payload truncated: want {} bytes, have {}",
                    header.length,
                    rest.len()
                ))),
            );
        }
        let (payload, tail) = rest.split_at(header.length as usize);
        frames.push(Frame {
            header,
            payload: payload.to_vec(),
        });
        bytes = tail;
    }
    (frames, None)
}

/// Credit counter bounding the number of unreplied command groups a client
/// keeps in flight on one session. Depth 1 is stop-and-wait.
#[derive(Debug, Clone)]
pub struct PipelineWindow {
    depth: usize,
    outstanding: usize,
}

impl PipelineWindow {
    pub fn new(depth: usize) -> Self {
        PipelineWindow {
            depth: depth.max(1),
            outstanding: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Remaining command credit.
    pub fn remaining(&self) -> usize {
        self.depth - self.outstanding
    }

    pub fn try_acquire(&mut self) -> bool {
        if self.outstanding < self.depth {
            self.outstanding += 1;
            true
        } else {
            false
        }
    }

    pub fn release(&mut self) {
        assert!(self.outstanding > 0, "pipeline window underflow");
        self.outstanding -= 1;
    }
}
