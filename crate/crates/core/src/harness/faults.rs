//! Link policies and the runtime that applies them.
//!
//! Bandwidth caps are enforced per data connection with a token bucket,
//! command latency is applied to control-channel replies on the client side,
//! and corruption / disconnect events are decided per chunk from a seeded
//! hash so the same seed always yields the same schedule regardless of how
//! sessions interleave.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("corruption probability {0} is outside [0, 1]")]
    Probability(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("disconnect needs after_bytes or after_secs")]
    DisconnectTrigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Flip a payload byte on the wire, after the source digest was taken.
    InFlight,
    /// Flip a stored byte at the destination just before the re-read.
    AtRestBeforeReread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPolicy {
    pub probability: f64,
    pub mode: CorruptionMode,
    /// Corrupt every attempt of an affected chunk, not only the first.
    #[serde(default)]
    pub persistent: bool,
    /// Restrict injection to the chunk starting at this offset.
    #[serde(default)]
    pub at_offset: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisconnectPolicy {
    /// Ordinal of the source-side session to cut, in order of data setup.
    pub session: u32,
    #[serde(default)]
    pub after_bytes: Option<u64>,
    #[serde(default)]
    pub after_secs: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkPolicy {
    /// Per data connection, bytes per second.
    #[serde(default)]
    pub bandwidth: Option<u64>,
    /// Added to every command round trip.
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub corruption: Option<CorruptionPolicy>,
    #[serde(default)]
    pub disconnect: Option<DisconnectPolicy>,
    /// Per re-read (CKSM) operation at an agent, bytes per second.
    #[serde(default)]
    pub reread_cap: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

impl LinkPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if let Some(c) = &self.corruption {
            if !(0.0..=1.0).contains(&c.probability) || c.probability.is_nan() {
                return Err(PolicyError::Probability(c.probability));
            }
        }
        if self.bandwidth == Some(0) {
            return Err(PolicyError::NonPositive("bandwidth"));
        }
        if self.reread_cap == Some(0) {
            return Err(PolicyError::NonPositive("reread_cap"));
        }
        if let Some(d) = &self.disconnect {
            if d.after_bytes.is_none() && d.after_secs.is_none() {
                return Err(PolicyError::DisconnectTrigger);
            }
        }
        Ok(())
    }

    pub fn latency(&self) -> Duration {
        Duration::from_millis(self.latency_ms)
    }
}

/// Token bucket pacing writes to `rate` bytes per second. Starts empty, so
/// sending `n` bytes never takes less than `n / rate` seconds.
#[derive(Debug)]
pub struct Throttle {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl Throttle {
    pub fn new(rate: u64) -> Self {
        let rate = rate.max(1) as f64;
        Throttle {
            rate,
            burst: (rate * 0.05).max(4096.0),
            tokens: 0.0,
            last: Instant::now(),
        }
    }

    pub fn consume(&mut self, n: usize) {
        let now = Instant::now();
        self.tokens =
            (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.burst);
        self.last = now;
        self.tokens -= n as f64;
        if self.tokens < 0.0 {
            std::thread::sleep(Duration::from_secs_f64(-self.tokens / self.rate));
        }
    }
}

/// A stream whose writes are paced by a [`Throttle`].
#[derive(Debug)]
pub struct PolicedStream<S> {
    inner: S,
    throttle: Option<Throttle>,
}

impl<S> PolicedStream<S> {
    pub fn get_ref(&self) -> &S {
        &self.inner
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Read> Read for PolicedStream<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}

impl<S: Write> Write for PolicedStream<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some(t) = &mut self.throttle {
            t.consume(buf.len());
            self.inner.write_all(buf)?;
            Ok(buf.len())
        } else {
            self.inner.write(buf)
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Applies the bandwidth part of `policy` to a data connection.
pub fn wrap_connection<S>(conn: S, policy: &LinkPolicy) -> PolicedStream<S> {
    PolicedStream {
        inner: conn,
        throttle: policy.bandwidth.map(Throttle::new),
    }
}

/// One injected corruption.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct InjectedFault {
    pub path: String,
    /// Start of the affected range (the chunk or whole-file check range).
    pub offset: u64,
    pub length: u64,
    pub attempt: u32,
    pub mode: CorruptionMode,
    /// Absolute file offset of the flipped byte.
    pub byte: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Site {
    Retrieve,
    Reread,
}

/// Shared runtime for one [`LinkPolicy`], attached to agents.
#[derive(Debug)]
pub struct FaultInjector {
    policy: LinkPolicy,
    attempts: Mutex<HashMap<(Site, String, u64, u64), u32>>,
    ledger: Mutex<Vec<InjectedFault>>,
    next_ordinal: AtomicU32,
    disconnect_fired: AtomicBool,
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in *part {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl FaultInjector {
    pub fn new(policy: LinkPolicy) -> Self {
        FaultInjector {
            policy,
            attempts: Mutex::new(HashMap::new()),
            ledger: Mutex::new(Vec::new()),
            next_ordinal: AtomicU32::new(0),
            disconnect_fired: AtomicBool::new(false),
        }
    }

    pub fn policy(&self) -> &LinkPolicy {
        &self.policy
    }

    fn next_attempt(&self, site: Site, path: &str, offset: u64, length: u64) -> u32 {
        let mut map = self.attempts.lock().unwrap();
        let n = map
            .entry((site, path.to_string(), offset, length))
            .or_insert(0);
        let a = *n;
        *n += 1;
        a
    }

    fn rng_for(&self, path: &str, offset: u64, attempt: u32) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(&[
            &self.policy.seed.to_le_bytes(),
            path.as_bytes(),
            &offset.to_le_bytes(),
            &attempt.to_le_bytes(),
        ]))
    }

    fn decide(
        &self,
        site: Site,
        mode: CorruptionMode,
        path: &str,
        offset: u64,
        length: u64,
    ) -> Option<u64> {
        let c = self.policy.corruption.as_ref()?;
        if c.mode != mode {
            return None;
        }
        let attempt = self.next_attempt(site, path, offset, length);
        if length == 0 || (!c.persistent && attempt > 0) {
            return None;
        }
        if c.at_offset.is_some_and(|o| o != offset) {
            return None;
        }
        let mut rng = self.rng_for(path, offset, attempt);
        if !rng.gen_bool(c.probability) {
            return None;
        }
        let byte = offset + rng.gen_range(0..length);
        self.ledger.lock().unwrap().push(InjectedFault {
            path: path.to_string(),
            offset,
            length,
            attempt,
            mode,
            byte,
        });
        Some(byte)
    }

    /// Called by a source agent per retrieve. Returns the absolute offset of
    /// the byte to flip on the wire, if any.
    pub fn on_retrieve(&self, path: &str, offset: u64, length: u64) -> Option<u64> {
        self.decide(
            Site::Retrieve,
            CorruptionMode::InFlight,
            path,
            offset,
            length,
        )
    }

    /// Called by an agent before re-reading data it stored. Returns the
    /// absolute offset of the stored byte to flip, if any.
    pub fn on_reread(&self, path: &str, offset: u64, length: u64) -> Option<u64> {
        self.decide(
            Site::Reread,
            CorruptionMode::AtRestBeforeReread,
            path,
            offset,
            length,
        )
    }

    /// Hands out source-session ordinals for disconnect targeting.
    pub fn register_source_session(&self) -> u32 {
        self.next_ordinal.fetch_add(1, Ordering::SeqCst)
    }

    /// Whether the session with `ordinal` should lose its data connections now.
    /// Fires at most once per injector.
    pub fn should_disconnect(&self, ordinal: u32, bytes_sent: u64, since: Instant) -> bool {
        let Some(d) = &self.policy.disconnect else {
            return false;
        };
        if d.session != ordinal || self.disconnect_fired.load(Ordering::SeqCst) {
            return false;
        }
        let hit = d.after_bytes.is_some_and(|b| bytes_sent >= b)
            || d.after_secs
                .is_some_and(|s| since.elapsed().as_secs_f64() >= s);
        hit && !self.disconnect_fired.swap(true, Ordering::SeqCst)
    }

    pub fn disconnect_fired(&self) -> bool {
        self.disconnect_fired.load(Ordering::SeqCst)
    }

    pub fn injected(&self) -> Vec<InjectedFault> {
        let mut v = self.ledger.lock().unwrap().clone();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn throttle_bounds_throughput() {
        // 2 MiB at 10 MiB/s must take at least 0.2 s.
        let policy = LinkPolicy {
            bandwidth: Some(10 << 20),
            ..LinkPolicy::default()
        };
        let mut s = wrap_connection(Cursor::new(Vec::new()), &policy);
        let block = vec![0u8; 64 << 10];
        let start = Instant::now();
        for _ in 0..32 {
            s.write_all(&block).unwrap();
        }
        let elapsed = start.elapsed().as_secs_f64();
        assert!(elapsed >= 0.2, "elapsed {elapsed}");
        assert!(elapsed < 0.4, "elapsed {elapsed}");
        assert_eq!(s.into_inner().into_inner().len(), 2 << 20);
    }

    #[test]
    fn unthrottled_passes_through() {
        let mut s = wrap_connection(Cursor::new(Vec::new()), &LinkPolicy::default());
        s.write_all(b"abc").unwrap();
        assert_eq!(s.get_ref().get_ref(), b"abc");
    }

    fn corrupting(p: f64, persistent: bool) -> LinkPolicy {
        LinkPolicy {
            corruption: Some(CorruptionPolicy {
                probability: p,
                mode: CorruptionMode::InFlight,
                persistent,
                at_offset: None,
            }),
            seed: 42,
            ..LinkPolicy::default()
        }
    }

    #[test]
    fn probability_one_hits_every_first_attempt() {
        let inj = FaultInjector::new(corrupting(1.0, false));
        for i in 0..20u64 {
            let b = inj.on_retrieve("f", i * 100, 100).unwrap();
            assert!((i * 100..i * 100 + 100).contains(&b));
            assert!(inj.on_retrieve("f", i * 100, 100).is_none());
        }
        assert_eq!(inj.injected().len(), 20);
        assert!(inj.on_reread("f", 0, 100).is_none());
        assert!(inj.on_retrieve("f", 5000, 0).is_none());
    }

    #[test]
    fn persistent_corruption_repeats() {
        let inj = FaultInjector::new(corrupting(1.0, true));
        for _ in 0..4 {
            assert!(inj.on_retrieve("f", 0, 10).is_some());
        }
        let attempts: Vec<u32> = inj.injected().iter().map(|f| f.attempt).collect();
        assert_eq!(attempts, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_same_schedule_in_any_order() {
        let run = |order: &[u64]| {
            let inj = FaultInjector::new(corrupting(0.3, false));
            for &i in order {
                inj.on_retrieve("data/x", i * 4096, 4096);
            }
            inj.injected()
        };
        let forward: Vec<u64> = (0..200).collect();
        let backward: Vec<u64> = (0..200).rev().collect();
        let a = run(&forward);
        assert_eq!(a, run(&backward));
        assert!(!a.is_empty() && a.len() < 200);
    }

    #[test]
    fn at_offset_targets_one_chunk() {
        let mut p = corrupting(1.0, false);
        p.corruption.as_mut().unwrap().at_offset = Some(300);
        let inj = FaultInjector::new(p);
        assert!(inj.on_retrieve("f", 0, 300).is_none());
        assert!(inj.on_retrieve("f", 300, 300).is_some());
        assert_eq!(inj.injected().len(), 1);
    }

    #[test]
    fn disconnect_fires_once() {
        let inj = FaultInjector::new(LinkPolicy {
            disconnect: Some(DisconnectPolicy {
                session: 1,
                after_bytes: Some(1000),
                after_secs: None,
            }),
            ..LinkPolicy::default()
        });
        let t = Instant::now();
        assert!(!inj.should_disconnect(0, 5000, t));
        assert!(!inj.should_disconnect(1, 999, t));
        assert!(inj.should_disconnect(1, 1000, t));
        assert!(!inj.should_disconnect(1, 2000, t));
        assert!(inj.disconnect_fired());
    }

    #[test]
    fn policy_validation() {
        assert!(LinkPolicy::default().validate().is_ok());
        assert_eq!(
            corrupting(1.5, false).validate(),
            Err(PolicyError::Probability(1.5))
        );
        let p = LinkPolicy {
            disconnect: Some(DisconnectPolicy {
                session: 0,
                after_bytes: None,
                after_secs: None,
            }),
            ..LinkPolicy::default()
        };
        assert_eq!(p.validate(), Err(PolicyError::DisconnectTrigger));
    }
}
