//! Chunk sizing, file partitioning and the work queue sessions pull from.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlannerError {
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("chunk size bounds must satisfy 0 < s_min <= s_max (got {s_min}..{s_max})")]
    BadBounds { s_min: u64, s_max: u64 },
    #[error("chunk size override must be positive")]
    ZeroOverride,
}

/// Sizing knobs: concurrency (sessions), parallelism (streams per session),
/// pipeline depth, and the chunk size clamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub chunk_size_override: Option<u64>,
    pub concurrency: u32,
    pub parallelism: u32,
    pub pipeline_depth: u32,
    pub s_min: u64,
    pub s_max: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            chunk_size_override: None,
            concurrency: 4,
            parallelism: 2,
            pipeline_depth: 4,
            s_min: 4 * MIB,
            s_max: 64 * MIB,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.concurrency == 0 {
            return Err(PlannerError::ZeroCount("concurrency"));
        }
        if self.parallelism == 0 {
            return Err(PlannerError::ZeroCount("parallelism"));
        }
        if self.pipeline_depth == 0 {
            return Err(PlannerError::ZeroCount("pipeline depth"));
        }
        if self.s_min == 0 || self.s_min > self.s_max {
            return Err(PlannerError::BadBounds {
                s_min: self.s_min,
                s_max: self.s_max,
            });
        }
        if self.chunk_size_override == Some(0) {
            return Err(PlannerError::ZeroOverride);
        }
        Ok(())
    }

    /// Number of stream slots the chunk count should not fall below: N·P·D.
    pub fn slots(&self) -> u64 {
        self.concurrency as u64 * self.parallelism as u64 * self.pipeline_depth as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkDescriptor {
    pub file_id: u64,
    pub chunk_index: u64,
    pub offset: u64,
    pub length: u64,
}

impl ChunkDescriptor {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub file_id: u64,
    pub file_size: u64,
    pub chunk_size: u64,
    pub chunks: Vec<ChunkDescriptor>,
}

impl ChunkPlan {
    pub fn chunk_count(&self) -> u64 {
        self.chunks.len() as u64
    }
}

/// Picks the chunk size for a file of `file_size` bytes.
///
/// An explicit override always wins. Otherwise the file is split so there are
/// at least N·P·D chunks, keeping the size inside `[s_min, s_max]`. Files no
/// larger than `s_min` travel as a single chunk.
pub fn auto_chunk_size(file_size: u64, cfg: &PlannerConfig) -> u64 {
    if let Some(s) = cfg.chunk_size_override {
        return s;
    }
    if file_size <= cfg.s_min {
        return file_size;
    }
    (file_size / cfg.slots().max(1)).clamp(cfg.s_min, cfg.s_max)
}

/// Tiles `[0, file_size)` with chunks of `chunk_size` bytes (the last may be short).
/// An empty file gets a single zero-length chunk.
pub fn plan_with_size(file_id: u64, file_size: u64, chunk_size: u64) -> ChunkPlan {
    if file_size == 0 || chunk_size == 0 {
        return ChunkPlan {
            file_id,
            file_size,
            chunk_size: file_size,
            chunks: vec![ChunkDescriptor {
                file_id,
                chunk_index: 0,
                offset: 0,
                length: file_size,
            }],
        };
    }
    let count = file_size.div_ceil(chunk_size);
    let chunks = (0..count)
        .map(|i| {
            let offset = i * chunk_size;
            ChunkDescriptor {
                file_id,
                chunk_index: i,
                offset,
                length: chunk_size.min(file_size - offset),
            }
        })
        .collect();
    ChunkPlan {
        file_id,
        file_size,
        chunk_size,
        chunks,
    }
}

pub fn plan_chunks(file_id: u64, file_size: u64, cfg: &PlannerConfig) -> ChunkPlan {
    plan_with_size(file_id, file_size, auto_chunk_size(file_size, cfg))
}

/// Opaque identity of a session pulling from a [`WorkQueue`].
pub type SessionId = u32;

/// Result of a pull attempt.
#[derive(Debug, PartialEq, Eq)]
pub enum Pull<T> {
    Item(T),
    /// The session already holds `depth` unacknowledged items.
    AtDepth,
    /// Nothing queued right now, but other sessions hold items that may come back.
    Idle,
    /// Nothing queued and nothing outstanding anywhere; or the queue was closed.
    Drained,
}

struct QueueState<T> {
    pending: VecDeque<T>,
    outstanding: HashMap<SessionId, usize>,
    total_outstanding: usize,
    dispensed: u64,
    closed: bool,
}

/// A pull-based work queue shared by all sessions.
///
/// Every item is handed out once. An item only comes back if its holder
/// explicitly requeues it (failed verification, session loss). A session may
/// hold at most `depth` items that it has not yet acknowledged.
pub struct WorkQueue<T> {
    state: Mutex<QueueState<T>>,
    changed: Condvar,
    depth: usize,
}

impl<T> WorkQueue<T> {
    pub fn new(items: impl IntoIterator<Item = T>, depth: usize) -> Self {
        WorkQueue {
            state: Mutex::new(QueueState {
                pending: items.into_iter().collect(),
                outstanding: HashMap::new(),
                total_outstanding: 0,
                dispensed: 0,
                closed: false,
            }),
            changed: Condvar::new(),
            depth: depth.max(1),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn pull_locked(&self, st: &mut QueueState<T>, session: SessionId) -> Pull<T> {
        if st.closed {
            return Pull::Drained;
        }
        let held = st.outstanding.get(&session).copied().unwrap_or(0);
        if held >= self.depth {
            return Pull::AtDepth;
        }
        match st.pending.pop_front() {
            Some(item) => {
                *st.outstanding.entry(session).or_insert(0) += 1;
                st.total_outstanding += 1;
                st.dispensed += 1;
                Pull::Item(item)
            }
            None if st.total_outstanding == 0 => Pull::Drained,
            None => Pull::Idle,
        }
    }

    pub fn pull(&self, session: SessionId) -> Pull<T> {
        let mut st = self.state.lock().unwrap();
        self.pull_locked(&mut st, session)
    }

    /// Non-blocking: the next item for `session`, or `None` when exhausted or
    /// the session is at its depth limit.
    pub fn next_chunk(&self, session: SessionId) -> Option<T> {
        match self.pull(session) {
            Pull::Item(t) => Some(t),
            _ => None,
        }
    }

    /// Like [`pull`](Self::pull) but waits up to `timeout` while the queue is idle.
    pub fn wait_pull(&self, session: SessionId, timeout: Duration) -> Pull<T> {
        let mut st = self.state.lock().unwrap();
        let r = self.pull_locked(&mut st, session);
        if !matches!(r, Pull::Idle) {
            return r;
        }
        let (mut st, _) = self.changed.wait_timeout(st, timeout).unwrap();
        self.pull_locked(&mut st, session)
    }

    fn release(st: &mut QueueState<T>, session: SessionId) {
        let held = st
            .outstanding
            .get_mut(&session)
            .expect("release from a session holding no items");
        assert!(*held > 0, "release from a session holding no items");
        *held -= 1;
        st.total_outstanding -= 1;
    }

    /// The session finished an item for good.
    pub fn acknowledge(&self, session: SessionId) {
        let mut st = self.state.lock().unwrap();
        Self::release(&mut st, session);
        self.changed.notify_all();
    }

    /// Hands an item back so any session can pick it up again.
    pub fn requeue(&self, session: SessionId, item: T) {
        let mut st = self.state.lock().unwrap();
        Self::release(&mut st, session);
        st.pending.push_front(item);
        self.changed.notify_all();
    }

    /// Adds new work that was not part of the initial set.
    pub fn push(&self, item: T) {
        let mut st = self.state.lock().unwrap();
        st.pending.push_back(item);
        self.changed.notify_all();
    }

    /// Makes every subsequent pull report `Drained`.
    pub fn close(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        self.changed.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    pub fn outstanding(&self, session: SessionId) -> usize {
        let st = self.state.lock().unwrap();
        st.outstanding.get(&session).copied().unwrap_or(0)
    }

    pub fn pending_len(&self) -> usize {
        self.state.lock().unwrap().pending.len()
    }

    pub fn dispensed(&self) -> u64 {
        self.state.lock().unwrap().dispensed
    }
}

impl WorkQueue<ChunkDescriptor> {
    pub fn from_plans<'a>(plans: impl IntoIterator<Item = &'a ChunkPlan>, depth: usize) -> Self {
        WorkQueue::new(
            plans.into_iter().flat_map(|p| p.chunks.iter().copied()),
            depth,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::sync::Arc;

    const GB: u64 = 1_000_000_000;
    const MB: u64 = 1_000_000;

    fn desk(n: u32, p: u32, d: u32) -> PlannerConfig {
        PlannerConfig {
            concurrency: n,
            parallelism: p,
            pipeline_depth: d,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn one_gib_at_4x2x2_gives_64_mib_chunks() {
        let cfg = desk(4, 2, 2);
        let s = auto_chunk_size(1 << 30, &cfg);
        assert_eq!(s, 64 * MIB);
        assert_eq!(plan_chunks(0, 1 << 30, &cfg).chunk_count(), 16);
    }

    #[test]
    fn fixed_5000_mb_chunks_underfill_256_streams() {
        let cfg = PlannerConfig {
            chunk_size_override: Some(5000 * MB),
            concurrency: 64,
            parallelism: 4,
            pipeline_depth: 1,
            s_min: 50 * MB,
            s_max: 5000 * MB,
        };
        let plan = plan_chunks(0, 500 * GB, &cfg);
        assert_eq!(plan.chunk_count(), 100);
        assert!(plan.chunk_count() < 64 * 4);
    }

    #[test]
    fn five_hundred_mb_chunks_on_500_gb() {
        let plan = plan_with_size(0, 500 * GB, 500 * MB);
        assert_eq!(plan.chunk_count(), 1000);
        assert!(plan.chunks.iter().all(|c| c.length == 500 * MB));
    }

    #[test]
    fn empty_file_is_one_zero_length_chunk() {
        let cfg = PlannerConfig::default();
        assert_eq!(auto_chunk_size(0, &cfg), 0);
        let plan = plan_chunks(3, 0, &cfg);
        assert_eq!(
            plan.chunks,
            vec![ChunkDescriptor {
                file_id: 3,
                chunk_index: 0,
                offset: 0,
                length: 0
            }]
        );
    }

    #[test]
    fn small_file_travels_whole() {
        let cfg = PlannerConfig::default();
        assert_eq!(auto_chunk_size(1000, &cfg), 1000);
        assert_eq!(auto_chunk_size(cfg.s_min, &cfg), cfg.s_min);
        assert_eq!(plan_chunks(0, 1000, &cfg).chunk_count(), 1);
    }

    #[test]
    fn override_wins() {
        let cfg = PlannerConfig {
            chunk_size_override: Some(300),
            ..PlannerConfig::default()
        };
        assert_eq!(auto_chunk_size(10, &cfg), 300);
        assert_eq!(auto_chunk_size(1 << 40, &cfg), 300);
    }

    #[test]
    fn tiling_examples() {
        let ranges = |p: ChunkPlan| -> Vec<(u64, u64)> {
            p.chunks.iter().map(|c| (c.offset, c.end())).collect()
        };
        assert_eq!(
            ranges(plan_with_size(0, 1000, 300)),
            vec![(0, 300), (300, 600), (600, 900), (900, 1000)]
        );
        assert_eq!(ranges(plan_with_size(0, 300, 300)), vec![(0, 300)]);
    }

    #[test]
    fn clamp_at_s_max() {
        let cfg = desk(1, 1, 1);
        assert_eq!(auto_chunk_size(1 << 30, &cfg), cfg.s_max);
    }

    #[test]
    fn config_validation() {
        assert!(PlannerConfig::default().validate().is_ok());
        assert_eq!(
            desk(0, 1, 1).validate(),
            Err(PlannerError::ZeroCount("concurrency"))
        );
        let mut bad = PlannerConfig::default();
        bad.s_min = bad.s_max + 1;
        assert!(matches!(
            bad.validate(),
            Err(PlannerError::BadBounds { .. })
        ));
        bad = PlannerConfig::default();
        bad.chunk_size_override = Some(0);
        assert_eq!(bad.validate(), Err(PlannerError::ZeroOverride));
    }

    fn arb_cfg() -> impl Strategy<Value = PlannerConfig> {
        (
            1u32..=16,
            1u32..=8,
            1u32..=8,
            1u64..=(64 * MIB),
            0u64..=(256 * MIB),
        )
            .prop_map(|(n, p, d, s_min, extra)| PlannerConfig {
                chunk_size_override: None,
                concurrency: n,
                parallelism: p,
                pipeline_depth: d,
                s_min,
                s_max: s_min + extra,
            })
    }

    proptest! {
        #[test]
        fn plans_tile_the_file(size in 0u64..(1u64 << 32), cfg in arb_cfg()) {
            let plan = plan_chunks(9, size, &cfg);
            let mut next = 0u64;
            for (i, c) in plan.chunks.iter().enumerate() {
                prop_assert_eq!(c.chunk_index, i as u64);
                prop_assert_eq!(c.offset, next);
                prop_assert_eq!(c.file_id, 9);
                if size > 0 {
                    prop_assert!(c.length > 0);
                }
                if i + 1 < plan.chunks.len() {
                    prop_assert_eq!(c.length, plan.chunk_size);
                }
                next = c.end();
            }
            prop_assert_eq!(next, size);
            prop_assert_eq!(plan.chunks.iter().map(|c| c.length).sum::<u64>(), size);
            prop_assert_eq!(plan_chunks(9, size, &cfg), plan);
        }

        #[test]
        fn chunk_count_covers_every_slot(size in 0u64..(1u64 << 36), cfg in arb_cfg()) {
            let plan = plan_chunks(0, size, &cfg);
            if size >= cfg.slots() * cfg.s_min {
                prop_assert!(plan.chunk_count() >= cfg.slots());
            }
        }
    }

    #[test]
    fn alternating_pulls_dispense_each_chunk_once() {
        let q = WorkQueue::from_plans([&plan_with_size(0, 4, 1)], 4);
        let mut got = Vec::new();
        for turn in 0.. {
            match q.next_chunk(turn % 2) {
                Some(c) => got.push(c.chunk_index),
                None => break,
            }
        }
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_chunk_eight_sessions() {
        let q = WorkQueue::from_plans([&plan_with_size(0, 10, 10)], 4);
        let winners = (0..8).filter(|s| q.next_chunk(*s).is_some()).count();
        assert_eq!(winners, 1);
        assert_eq!(q.pull(5), Pull::Idle);
        q.acknowledge(0);
        assert_eq!(q.pull(5), Pull::Drained);
    }

    #[test]
    fn depth_limits_outstanding_under_random_completion() {
        // 256 chunks, 64 sessions, depth 4; sessions complete held items in random order.
        let plan = plan_with_size(0, 256, 1);
        let q = WorkQueue::from_plans([&plan], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut held: Vec<Vec<ChunkDescriptor>> = vec![Vec::new(); 64];
        let mut seen = HashSet::new();
        let mut max_held = 0;
        loop {
            let s = rng.gen_range(0..64u32);
            if rng.gen_bool(0.6) {
                match q.pull(s) {
                    Pull::Item(c) => {
                        assert!(seen.insert(c.chunk_index));
                        held[s as usize].push(c);
                    }
                    Pull::AtDepth => assert_eq!(held[s as usize].len(), 4),
                    Pull::Idle => {}
                    Pull::Drained => break,
                }
            } else if !held[s as usize].is_empty() {
                let h = &mut held[s as usize];
                h.shuffle(&mut rng);
                h.pop();
                q.acknowledge(s);
            }
            for (i, h) in held.iter().enumerate() {
                assert_eq!(q.outstanding(i as u32), h.len());
                assert!(h.len() <= 4);
                max_held = max_held.max(h.len());
            }
        }
        assert_eq!(seen.len(), 256);
        assert_eq!(max_held, 4);
    }

    #[test]
    fn requeued_item_is_dispensed_again() {
        let q = WorkQueue::new([1, 2], 2);
        assert_eq!(q.next_chunk(0), Some(1));
        q.requeue(0, 1);
        assert_eq!(q.next_chunk(1), Some(1));
        assert_eq!(q.next_chunk(1), Some(2));
        q.acknowledge(1);
        q.acknowledge(1);
        assert_eq!(q.pull(0), Pull::Drained);
    }

    #[test]
    fn concurrent_pullers_get_exactly_once() {
        let plan = plan_with_size(0, 5000, 1);
        let q = Arc::new(WorkQueue::from_plans([&plan], 3));
        let handles: Vec<_> = (0..8)
            .map(|s| {
                let q = Arc::clone(&q);
                std::thread::spawn(move || {
                    let mut mine = Vec::new();
                    loop {
                        match q.wait_pull(s, Duration::from_millis(10)) {
                            Pull::Item(c) => {
                                mine.push(c.chunk_index);
                                q.acknowledge(s);
                            }
                            Pull::Drained => break,
                            _ => {}
                        }
                    }
                    mine
                })
            })
            .collect();
        let mut all: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        all.sort();
        assert_eq!(all, (0..5000).collect::<Vec<_>>());
    }
}
