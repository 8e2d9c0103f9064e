//! Activity spans recorded during a transfer and the transfer/integrity
//! time split derived from them.

use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    /// An ERET/ESTO pair from issue until both replies are in.
    Payload,
    /// A CKSM from issue until its reply is in.
    Integrity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub activity: Activity,
    pub file_id: u64,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug)]
pub struct Timeline {
    origin: Instant,
    spans: Mutex<Vec<Span>>,
}

impl Timeline {
    pub fn new(origin: Instant) -> Self {
        Timeline {
            origin,
            spans: Mutex::new(Vec::new()),
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn record(&self, activity: Activity, file_id: u64, start: Instant, end: Instant) {
        let span = Span {
            activity,
            file_id,
            start: start.saturating_duration_since(self.origin),
            end: end.saturating_duration_since(self.origin),
        };
        self.spans.lock().unwrap().push(span);
    }

    pub fn spans(&self) -> Vec<Span> {
        self.spans.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Breakdown {
    pub wall: Duration,
    pub transfer_time: Duration,
    /// Time with a checksum pending and no payload in flight.
    pub integrity_time: Duration,
    /// Time with a checksum pending while payload was in flight.
    pub overlap: Duration,
}

/// Splits `wall` into transfer and integrity time. The integrity share is
/// the part of the union of integrity spans not covered by any payload span.
pub fn measure(spans: &[Span], wall: Duration) -> Breakdown {
    let payload = union(spans, Activity::Payload);
    let integrity = union(spans, Activity::Integrity);
    let checking: Duration = integrity.iter().map(|(a, b)| *b - *a).sum();
    let overlap = intersection_len(&payload, &integrity);
    let integrity_time = (checking - overlap).min(wall);
    Breakdown {
        wall,
        transfer_time: wall - integrity_time,
        integrity_time,
        overlap,
    }
}

fn union(spans: &[Span], activity: Activity) -> Vec<(Duration, Duration)> {
    let mut v: Vec<(Duration, Duration)> = spans
        .iter()
        .filter(|s| s.activity == activity && s.end > s.start)
        .map(|s| (s.start, s.end))
        .collect();
    v.sort();
    let mut out: Vec<(Duration, Duration)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersection_len(x: &[(Duration, Duration)], y: &[(Duration, Duration)]) -> Duration {
    let (mut i, mut j) = (0, 0);
    let mut total = Duration::ZERO;
    while i < x.len() && j < y.len() {
        let lo = x[i].0.max(y[j].0);
        let hi = x[i].1.min(y[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}
