use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use crate::tree::{Tree, TreeOptions};

use super::{HarnessError, RunConfig, Workload};

/// Throughput of one thread count.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub threads: usize,
    pub ops: u64,
    pub seconds: f64,
    pub rebalances: u64,
}

impl BenchRow {
    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.seconds
    }

    pub const HEADER: &'static str = "threads\tops\tseconds\tops_per_sec\trebalances";
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.6}\t{:.0}\t{}", self.threads, self.ops, self.seconds, self.ops_per_sec(), self.rebalances)
    }
}

/// One row per entry of `thread_counts`. Each row prefills the tree with
/// half the key range, then runs until `config.duration` elapses (when set)
/// or every thread has done `config.ops` operations.
pub fn bench(config: &RunConfig, thread_counts: &[usize]) -> Result<Vec<BenchRow>, HarnessError> {
    config.validate()?;
    if thread_counts.is_empty() || thread_counts.contains(&0) {
        return Err(HarnessError::Config("thread counts must be positive".into()));
    }
    thread_counts.iter().map(|&threads| row(config, threads)).collect()
}

fn row(config: &RunConfig, threads: usize) -> Result<BenchRow, HarnessError> {
    let options = TreeOptions { reclaim: config.reclaim, instrument: false, restart_limit: None };
    let tree = Tree::with_options(config.tree, options)?;
    for k in (1..=config.range).step_by(2) {
        tree.insert(k).expect("key in range");
    }
    let prefill = tree.stats().completed;
    let stop = AtomicBool::new(false);
    let total = AtomicU64::new(0);
    let barrier = Barrier::new(threads + 1);
    let seconds = std::thread::scope(|scope| {
        for t in 0..threads {
            let (tree, stop, total, barrier) = (&tree, &stop, &total, &barrier);
            scope.spawn(move || {
                let mut done = 0u64;
                barrier.wait();
                for (kind, e1, e2) in Workload::for_thread(config, t).take(config.ops as usize) {
                    // checking the flag every op costs little next to a descent
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    tree.apply(kind, e1, e2).expect("key in range");
                    done += 1;
                }
                total.fetch_add(done, Ordering::Relaxed);
            });
        }
        barrier.wait();
        let start = Instant::now();
        if let Some(d) = config.duration {
            let deadline = start + d;
            while Instant::now() < deadline && total.load(Ordering::Relaxed) < (threads as u64) * config.ops {
                std::thread::sleep(Duration::from_millis(1).min(d));
            }
            stop.store(true, Ordering::Relaxed);
        }
        start
    });
    let seconds = seconds.elapsed().as_secs_f64();
    Ok(BenchRow {
        threads,
        ops: total.load(Ordering::Relaxed),
        seconds,
        rebalances: tree.stats().completed - prefill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TreeConfig;

    #[test]
    fn one_row_per_thread_count() {
        let config = RunConfig { ops: 2000, range: 1000, tree: TreeConfig::new(8, 8, 2).unwrap(), ..RunConfig::default() };
        let rows = bench(&config, &[1]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].ops_per_sec() > 0.0);
        let rows = bench(&config, &[1, 2, 4, 8]).unwrap();
        assert_eq!(rows.iter().map(|r| r.threads).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        assert!(rows.iter().all(|r| r.ops == 2000 * r.threads as u64));
    }

    #[test]
    fn zero_duration_is_rejected() {
        let config = RunConfig { duration: Some(Duration::ZERO), ..RunConfig::default() };
        assert!(matches!(bench(&config, &[1]), Err(HarnessError::Config(_))));
    }
}
