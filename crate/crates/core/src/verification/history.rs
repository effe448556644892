use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::keyspace::KeyError;
use crate::ops::OpKind;
use crate::sim;
use crate::tree::Tree;

/// One completed operation. Inserts carry their key in both `e1` and `e2`
/// and report 1/0 in `result`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpRecord {
    pub thread: u32,
    pub kind: OpKind,
    pub e1: u64,
    pub e2: u64,
    /// Invocation timestamp (ns, or ticks in a simulation).
    pub invoke: u64,
    pub response: u64,
    pub result: u64,
}

/// Operations of one run, sorted by invocation time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub records: Vec<OpRecord>,
}

impl History {
    pub fn new(mut records: Vec<OpRecord>) -> History {
        records.sort_by_key(|r| (r.invoke, r.thread));
        History { records }
    }

    /// Merges per-thread buffers.
    pub fn from_threads(threads: impl IntoIterator<Item = Vec<OpRecord>>) -> History {
        History::new(threads.into_iter().flatten().collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Global time source for histories: simulation ticks inside a simulated
/// run, otherwise nanoseconds since start or a shared logical counter.
#[derive(Debug, Clone)]
pub struct Clock {
    origin: Instant,
    counter: Option<Arc<AtomicU64>>,
}

impl Clock {
    /// Nanoseconds from a monotonic clock.
    pub fn start() -> Clock {
        Clock { origin: Instant::now(), counter: None }
    }

    /// A counter bumped on every read: reproducible timestamps.
    pub fn logical() -> Clock {
        Clock { origin: Instant::now(), counter: Some(Arc::new(AtomicU64::new(0))) }
    }

    pub fn now(&self) -> u64 {
        if let Some(t) = sim::clock_tick() {
            return t;
        }
        match &self.counter {
            Some(c) => c.fetch_add(1, Ordering::SeqCst) + 1,
            None => self.origin.elapsed().as_nanos() as u64,
        }
    }
}

/// Per-thread append-only history buffer.
#[derive(Debug)]
pub struct Recorder {
    thread: u32,
    clock: Clock,
    last: u64,
    records: Vec<OpRecord>,
}

impl Recorder {
    pub fn new(thread: u32, clock: Clock) -> Recorder {
        Recorder { thread, clock, last: 0, records: Vec::new() }
    }

    pub fn with_capacity(thread: u32, clock: Clock, ops: usize) -> Recorder {
        Recorder { records: Vec::with_capacity(ops), ..Recorder::new(thread, clock) }
    }

    /// Runs and records one operation.
    pub fn run(&mut self, tree: &Tree, kind: OpKind, e1: u64, e2: u64) -> Result<u64, KeyError> {
        let e2 = if kind == OpKind::Insert { e1 } else { e2 };
        let invoke = self.clock.now().max(self.last);
        let result = tree.apply(kind, e1, e2)?.value;
        let response = self.clock.now().max(invoke + 1);
        self.last = response;
        self.records.push(OpRecord { thread: self.thread, kind, e1, e2, invoke, response, result });
        Ok(result)
    }

    pub fn into_records(self) -> Vec<OpRecord> {
        self.records
    }
}
