//! Lock-freedom smoke signals: periods with operations in flight but none
//! completing.

use super::history::History;

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressReport {
    pub completed_ops: u64,
    pub rebalances_completed: u64,
    /// Completed operations per completed rebalance (`None` without
    /// rebalances).
    pub ops_per_rebalance: Option<f64>,
    /// Longest time between consecutive completions while the run was active.
    pub longest_stall: u64,
    /// Stalls of at least the window length, as `[from, to)`.
    pub stall_windows: Vec<(u64, u64)>,
}

impl ProgressReport {
    pub fn is_clean(&self) -> bool {
        self.stall_windows.is_empty()
    }
}

/// Stalls in a set of completion times, given the span during which
/// operations were in flight. Completions must be sorted.
pub fn stalls(completions: &[u64], active_from: u64, active_to: u64, window: u64) -> (u64, Vec<(u64, u64)>) {
    let mut longest = 0;
    let mut windows = Vec::new();
    let mut prev = active_from;
    for &t in completions.iter().chain(std::iter::once(&active_to)) {
        let t = t.min(active_to);
        if t > prev {
            let gap = t - prev;
            longest = longest.max(gap);
            if gap >= window {
                windows.push((prev, t));
            }
            prev = t;
        }
    }
    (longest, windows)
}

/// Audits a recorded history: any interval of length `window` between the
/// first invocation and the last response without a response is a stall.
pub fn progress_audit(history: &History, rebalances_completed: u64, window: u64) -> ProgressReport {
    let mut completions: Vec<u64> = history.records.iter().map(|r| r.response).collect();
    completions.sort_unstable();
    let from = history.records.iter().map(|r| r.invoke).min().unwrap_or(0);
    let to = completions.last().copied().unwrap_or(0);
    let (longest_stall, stall_windows) = stalls(&completions, from, to, window);
    let completed_ops = history.len() as u64;
    ProgressReport {
        completed_ops,
        rebalances_completed,
        ops_per_rebalance: (rebalances_completed > 0).then(|| completed_ops as f64 / rebalances_completed as f64),
        longest_stall,
        stall_windows,
    }
}
