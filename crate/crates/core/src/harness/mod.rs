//! Workloads and the drivers behind the `elb` command line: stress runs
//! with history capture, protocol schedule scenarios, and benchmarks.

pub mod bench;
pub mod scenarios;
pub mod stress;

use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::TreeConfig;
use crate::keyspace::MAX_KEY;
use crate::ops::OpKind;
use crate::tree::{ReclaimMode, TreeError};

pub use bench::{bench, BenchRow};
pub use scenarios::{run_scenario, Scenario, ScenarioReport};
pub use stress::{progress_run, stress, StressOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Relative weights of search, insert and remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mix {
    pub search: u32,
    pub insert: u32,
    pub remove: u32,
}

impl Mix {
    pub fn total(&self) -> u32 {
        self.search + self.insert + self.remove
    }

    fn pick(&self, roll: u32) -> OpKind {
        if roll < self.search {
            OpKind::Search
        } else if roll < self.search + self.insert {
            OpKind::Insert
        } else {
            OpKind::Remove
        }
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix { search: 50, insert: 25, remove: 25 }
    }
}

impl FromStr for Mix {
    type Err = String;

    /// `a:b:c`, integer weights.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("mix {s:?}: expected search:insert:remove"));
        }
        let w = |p: &str| p.trim().parse::<u32>().map_err(|_| format!("mix {s:?}: {p:?} is not a weight"));
        let mix = Mix { search: w(parts[0])?, insert: w(parts[1])?, remove: w(parts[2])? };
        if mix.total() == 0 {
            return Err(format!("mix {s:?}: weights sum to zero"));
        }
        Ok(mix)
    }
}

impl std::fmt::Display for Mix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.search, self.insert, self.remove)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub tree: TreeConfig,
    pub threads: usize,
    /// Operations per thread.
    pub ops: u64,
    /// Keys are drawn from `[1; range]`.
    pub range: u64,
    pub mix: Mix,
    pub seed: u64,
    pub reclaim: ReclaimMode,
    /// Time limit; bench runs for this long per row.
    pub duration: Option<Duration>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tree: TreeConfig::default(),
            threads: 4,
            ops: 100_000,
            range: 1 << 16,
            mix: Mix::default(),
            seed: 42,
            reclaim: ReclaimMode::Never,
            duration: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.tree.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.threads == 0 {
            return Err(HarnessError::Config("threads must be at least 1".into()));
        }
        if self.range == 0 || self.range > MAX_KEY {
            return Err(HarnessError::Config(format!("key range {} outside [1; 2^63)", self.range)));
        }
        if self.mix.total() == 0 {
            return Err(HarnessError::Config("operation mix weights sum to zero".into()));
        }
        if self.duration == Some(Duration::ZERO) {
            return Err(HarnessError::Config("duration must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded operation stream of one worker thread.
#[derive(Debug, Clone)]
pub struct Workload {
    rng: ChaCha8Rng,
    range: u64,
    mix: Mix,
}

/// Widest range a generated search or remove spans.
const MAX_WIDTH: u64 = 16;

impl Workload {
    pub fn new(seed: u64, thread: usize, range: u64, mix: Mix) -> Workload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(thread as u64);
        Workload { rng, range, mix }
    }

    pub fn for_thread(config: &RunConfig, thread: usize) -> Workload {
        Workload::new(config.seed, thread, config.range, config.mix)
    }

    pub fn next_op(&mut self) -> (OpKind, u64, u64) {
        let kind = self.mix.pick(self.rng.gen_range(0..self.mix.total()));
        let e1 = self.rng.gen_range(1..=self.range);
        let e2 = match kind {
            OpKind::Insert => e1,
            _ => e1.saturating_add(self.rng.gen_range(0..MAX_WIDTH)).min(self.range),
        };
        (kind, e1, e2)
    }
}

impl Iterator for Workload {
    type Item = (OpKind, u64, u64);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_op())
    }
}
