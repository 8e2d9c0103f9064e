//! A source and a destination agent on loopback, each serving its own
//! temporary directory, optionally sharing one fault injector.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use super::faults::{FaultInjector, LinkPolicy};
use crate::agent::{Agent, AgentConfig, AgentCounters};
use crate::orchestrator::{Endpoint, FilePair, TransferOptions, TransferSpec};

const TOKEN: &str = "testbed";

pub struct Testbed {
    pub source: Agent,
    pub destination: Agent,
    pub faults: Option<Arc<FaultInjector>>,
    src_dir: TempDir,
    dst_dir: TempDir,
}

impl Testbed {
    pub fn new(policy: Option<LinkPolicy>) -> io::Result<Testbed> {
        Self::in_dir(policy, &std::env::temp_dir())
    }

    /// Like [`new`](Self::new), with the sandboxes created under `parent`.
    pub fn in_dir(policy: Option<LinkPolicy>, parent: &Path) -> io::Result<Testbed> {
        let faults = policy.map(|p| Arc::new(FaultInjector::new(p)));
        let src_dir = tempfile::Builder::new()
            .prefix("cf-src")
            .tempdir_in(parent)?;
        let dst_dir = tempfile::Builder::new()
            .prefix("cf-dst")
            .tempdir_in(parent)?;
        let spawn = |dir: &Path| {
            let mut cfg = AgentConfig::new(dir, TOKEN);
            cfg.faults = faults.clone();
            Agent::spawn(cfg).map_err(io::Error::other)
        };
        Ok(Testbed {
            source: spawn(src_dir.path())?,
            destination: spawn(dst_dir.path())?,
            faults,
            src_dir,
            dst_dir,
        })
    }

    pub fn token(&self) -> &str {
        TOKEN
    }

    pub fn source_root(&self) -> &Path {
        self.src_dir.path()
    }

    pub fn destination_root(&self) -> &Path {
        self.dst_dir.path()
    }

    pub fn source_path(&self, rel: &str) -> PathBuf {
        self.src_dir.path().join(rel)
    }

    pub fn destination_path(&self, rel: &str) -> PathBuf {
        self.dst_dir.path().join(rel)
    }

    /// Writes `size` pseudo-random bytes derived from `seed` at `rel` under
    /// the source root.
    pub fn write_random(&self, rel: &str, size: u64, seed: u64) -> io::Result<()> {
        write_random(&self.source_path(rel), size, seed)
    }

    pub fn spec(&self, files: Vec<FilePair>) -> TransferSpec {
        TransferSpec::new(
            Endpoint::new(self.source.addr().to_string(), TOKEN),
            Endpoint::new(self.destination.addr().to_string(), TOKEN),
            files,
        )
    }

    /// Transfer options carrying the policy's command latency.
    pub fn options(&self) -> TransferOptions {
        TransferOptions {
            command_latency: self
                .faults
                .as_ref()
                .map(|f| f.policy().latency())
                .unwrap_or_default(),
            ..TransferOptions::default()
        }
    }

    /// Whether the destination copy of a file pair is byte-identical.
    pub fn delivered(&self, pair: &FilePair) -> io::Result<bool> {
        same_bytes(
            &self.source_path(&pair.source),
            &self.destination_path(&pair.destination),
        )
    }

    pub fn counters(&self) -> (AgentCounters, AgentCounters) {
        (self.source.stats(), self.destination.stats())
    }
}

pub fn write_random(path: &Path, size: u64, seed: u64) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BufWriter::new(File::create(path)?);
    let mut buf = vec![0u8; 1 << 20];
    let mut left = size;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        out.write_all(&buf[..n])?;
        left -= n as u64;
    }
    out.flush()
}

pub fn same_bytes(a: &Path, b: &Path) -> io::Result<bool> {
    let (mut fa, mut fb) = (File::open(a)?, File::open(b)?);
    if fa.metadata()?.len() != fb.metadata()?.len() {
        return Ok(false);
    }
    let mut ba = vec![0u8; 1 << 20];
    let mut bb = vec![0u8; 1 << 20];
    loop {
        let n = read_full(&mut fa, &mut ba)?;
        let m = read_full(&mut fb, &mut bb)?;
        if n != m || ba[..n] != bb[..m] {
            return Ok(false);
        }
        if n == 0 {
            return Ok(true);
        }
    }
}

fn read_full(f: &mut File, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}
