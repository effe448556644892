use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use crate::rebalance::{Action, RebalanceRecord};
use crate::tree::{StatsSnapshot, Tree, TreeOptions, Violation};
use crate::verification::progress::{self, progress_audit, ProgressReport};
use crate::verification::{check_final, check_history, CheckReport, Clock, History, HistoryViolation, Recorder};

use super::{HarnessError, RunConfig, Workload};

/// Everything a stress run produced and every check applied to it.
#[derive(Debug)]
pub struct StressOutcome {
    pub config: RunConfig,
    pub history: History,
    pub final_keys: Vec<u64>,
    pub structure: Vec<Violation>,
    pub check: CheckReport,
    pub final_state: Vec<HistoryViolation>,
    pub records: Vec<RebalanceRecord>,
    pub stats: StatsSnapshot,
    pub elapsed: Duration,
    pub progress: ProgressReport,
}

impl StressOutcome {
    /// Rebalances whose created leaves fall outside `[min(2S, D/2); D-1]`.
    /// Refresh copies and a sole remaining leaf are exempt.
    pub fn size_bound_violations(&self) -> Vec<&RebalanceRecord> {
        let (lo, hi) = (self.config.tree.balanced_lower(), self.config.tree.balanced_upper());
        self.records
            .iter()
            .filter(|r| matches!(r.action, Action::Split | Action::Merge | Action::Redistribute) && !r.sole_child)
            .filter(|r| r.leaf_sizes.iter().any(|s| *s < lo || *s > hi))
            .collect()
    }

    /// Rebalances that lost or gained a key or a subtree.
    pub fn preservation_violations(&self) -> Vec<&RebalanceRecord> {
        self.records.iter().filter(|r| !r.preserves_keys()).collect()
    }

    pub fn passed(&self) -> bool {
        self.structure.is_empty()
            && self.check.is_clean()
            && self.final_state.is_empty()
            && self.size_bound_violations().is_empty()
            && self.preservation_violations().is_empty()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "stress K={} D={} S={} threads={} ops={} range={} mix={} seed={} reclaim={:?}",
            c.tree.order, c.tree.leaf_capacity, c.tree.min_size, c.threads, c.ops, c.range, c.mix, c.seed, c.reclaim
        );
        let _ = writeln!(
            s,
            "ops {} in {:.3}s, final keys {}, rebalances {} (helped {}), restarts {}",
            self.history.len(),
            self.elapsed.as_secs_f64(),
            self.final_keys.len(),
            self.stats.completed,
            self.stats.helper_completions,
            self.stats.restarts
        );
        let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
        let _ = writeln!(s, "structure: {} ({} violations)", verdict(self.structure.is_empty()), self.structure.len());
        for v in self.structure.iter().take(10) {
            let _ = writeln!(s, "  {v}");
        }
        let _ = writeln!(
            s,
            "history: {} ({} malformed, {} violations, {} final-state)",
            verdict(self.check.is_clean() && self.final_state.is_empty()),
            self.check.malformed.len(),
            self.check.violations.len(),
            self.final_state.len()
        );
        for m in self.check.malformed.iter().take(10) {
            let _ = writeln!(s, "  {m}");
        }
        for v in self.check.violations.iter().chain(&self.final_state).take(10) {
            let _ = writeln!(s, "  {v}");
        }
        let sizes = self.size_bound_violations();
        let _ = writeln!(s, "leaf size bound: {} ({} of {} rebalances)", verdict(sizes.is_empty()), sizes.len(), self.records.len());
        let kept = self.preservation_violations();
        let _ = writeln!(s, "key preservation: {} ({} of {} rebalances)", verdict(kept.is_empty()), kept.len(), self.records.len());
        let _ = write!(s, "longest completion gap: {:.3} ms", self.progress.longest_stall as f64 / 1e6);
        s
    }
}

/// Runs the workload on `threads` threads, then quiesces and checks the
/// structure, the history, the final contents and every rebalance.
pub fn stress(config: &RunConfig) -> Result<StressOutcome, HarnessError> {
    config.validate()?;
    let options = TreeOptions { reclaim: config.reclaim, instrument: true, restart_limit: Some(1_000_000) };
    let tree = Tree::with_options(config.tree, options)?;
    // a single thread gets reproducible timestamps
    let clock = if config.threads == 1 { Clock::logical() } else { Clock::start() };
    let barrier = Barrier::new(config.threads);
    let start = Instant::now();
    let per_thread: Vec<Vec<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.threads)
            .map(|t| {
                let (tree, clock, barrier) = (&tree, clock.clone(), &barrier);
                scope.spawn(move || {
                    let mut rec = Recorder::with_capacity(t as u32, clock, config.ops as usize);
                    barrier.wait();
                    for (kind, e1, e2) in Workload::for_thread(config, t).take(config.ops as usize) {
                        rec.run(tree, kind, e1, e2).expect("generated arguments are valid");
                    }
                    rec.into_records()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let elapsed = start.elapsed();
    let history = History::from_threads(per_thread);
    let structure = tree.check_structure();
    let final_keys = tree.snapshot().unwrap_or_else(|_| {
        let mut keys = Vec::new();
        if let crate::tree::Layout::Internal(_, kids) = tree.layout() {
            collect_keys(&kids, &mut keys);
        }
        keys
    });
    let check = check_history(&history);
    let final_state = check_final(&history, &final_keys);
    let stats = tree.stats();
    let progress = progress_audit(&history, stats.completed, 100_000_000);
    Ok(StressOutcome {
        config: config.clone(),
        history,
        final_keys,
        structure,
        check,
        final_state,
        records: tree.take_records(),
        stats,
        elapsed,
        progress,
    })
}

fn collect_keys(layouts: &[crate::tree::Layout], out: &mut Vec<u64>) {
    for l in layouts {
        match l {
            crate::tree::Layout::Leaf(k) => out.extend(k),
            crate::tree::Layout::Internal(_, kids) => collect_keys(kids, out),
        }
    }
    out.sort_unstable();
}

/// Runs the workload on real threads for `duration` and reports gaps
/// between operation completions (sampled at 1 ms granularity per thread).
pub fn progress_run(config: &RunConfig, duration: Duration, window: Duration) -> Result<ProgressReport, HarnessError> {
    config.validate()?;
    let options = TreeOptions { reclaim: config.reclaim, instrument: false, restart_limit: Some(1_000_000) };
    let tree = Tree::with_options(config.tree, options)?;
    let stop = AtomicBool::new(false);
    let total = AtomicU64::new(0);
    let barrier = Barrier::new(config.threads + 1);
    let origin = Instant::now();
    let sample = Duration::from_millis(1).as_nanos() as u64;
    let mut completions: Vec<u64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.threads)
            .map(|t| {
                let (tree, stop, total, barrier) = (&tree, &stop, &total, &barrier);
                scope.spawn(move || {
                    let mut times = Vec::new();
                    let mut last = 0u64;
                    let mut done = 0u64;
                    barrier.wait();
                    for (kind, e1, e2) in Workload::for_thread(config, t) {
                        if stop.load(Ordering::Relaxed) {
                            break;
                        }
                        tree.apply(kind, e1, e2).expect("generated arguments are valid");
                        done += 1;
                        let now = origin.elapsed().as_nanos() as u64;
                        if now >= last + sample {
                            times.push(now);
                            last = now;
                        }
                    }
                    total.fetch_add(done, Ordering::Relaxed);
                    times
                })
            })
            .collect();
        barrier.wait();
        let begin = origin.elapsed().as_nanos() as u64;
        std::thread::sleep(duration);
        stop.store(true, Ordering::Relaxed);
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
        all.push(begin);
        all
    });
    completions.sort_unstable();
    let from = completions[0];
    let to = from + duration.as_nanos() as u64;
    let (longest_stall, stall_windows) = progress::stalls(&completions[1..], from, to, window.as_nanos() as u64);
    let stats = tree.stats();
    let completed_ops = total.load(Ordering::Relaxed);
    Ok(ProgressReport {
        completed_ops,
        rebalances_completed: stats.completed,
        ops_per_rebalance: (stats.completed > 0).then(|| completed_ops as f64 / stats.completed as f64),
        longest_stall,
        stall_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TreeConfig;
    use crate::verification::write_trace;

    #[test]
    fn single_thread_trace_is_reproducible() {
        let config = RunConfig { threads: 1, ops: 3000, range: 200, tree: TreeConfig::new(3, 4, 2).unwrap(), ..RunConfig::default() };
        let traces: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let out = stress(&config).unwrap();
                assert!(out.passed(), "{}", out.summary());
                let mut buf = Vec::new();
                write_trace(&mut buf, &out.history).unwrap();
                buf
            })
            .collect();
        assert_eq!(traces[0], traces[1]);
    }

    #[test]
    fn small_concurrent_run_passes() {
        let config = RunConfig { threads: 4, ops: 5000, range: 300, tree: TreeConfig::new(3, 4, 2).unwrap(), ..RunConfig::default() };
        let out = stress(&config).unwrap();
        assert!(out.passed(), "{}", out.summary());
        assert!(out.stats.completed > 0);
    }
}
