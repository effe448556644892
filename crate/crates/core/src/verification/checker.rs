//! Interval-semantics checker.
//!
//! Exact membership over time is not observable from a history, so each
//! key gets two bounds derived from successful updates alone. At time `t`
//! a key is certainly present if more inserts of it have responded than
//! removes of it have been invoked, and possibly present if more inserts
//! have been invoked than removes have responded. Only contradictions with
//! these bounds are reported, so a reported violation is always real.

use std::collections::HashMap;
use std::fmt;

use crate::keyspace::MAX_KEY;
use crate::ops::OpKind;

use super::history::{History, OpRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Clause {
    /// (a) A failed search/remove while a key in range was certainly
    /// present for its whole duration.
    MissedPresentKey,
    /// (b) A returned key outside the range, or never possibly present
    /// during the operation.
    ReturnedAbsentKey,
    /// (c) A remove returned a key larger than one certainly present in
    /// range for its whole duration.
    NotMinimal,
    /// (d) An insert succeeded while its key was certainly present
    /// throughout, or failed while it was certainly absent throughout.
    InsertConflict,
    /// (e) A key removed more often than it was inserted.
    DuplicateRemoval,
    /// The final tree contents disagree with the successful updates.
    FinalState,
}

impl Clause {
    pub fn letter(self) -> &'static str {
        match self {
            Clause::MissedPresentKey => "a",
            Clause::ReturnedAbsentKey => "b",
            Clause::NotMinimal => "c",
            Clause::InsertConflict => "d",
            Clause::DuplicateRemoval => "e",
            Clause::FinalState => "f",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Clause::MissedPresentKey => "failed lookup missed a key present throughout",
            Clause::ReturnedAbsentKey => "returned key never present during the operation",
            Clause::NotMinimal => "remove skipped a smaller key present throughout",
            Clause::InsertConflict => "insert result contradicts certain membership",
            Clause::DuplicateRemoval => "key removed without a matching insert",
            Clause::FinalState => "final contents disagree with successful updates",
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) {}", self.letter(), self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryViolation {
    pub clause: Clause,
    /// Index into `History::records`, if the violation belongs to one op.
    pub op: Option<usize>,
    pub key: u64,
    pub detail: String,
}

impl fmt::Display for HistoryViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Some(i) => write!(f, "clause {}: op #{i}: {}", self.clause, self.detail),
            None => write!(f, "clause {}: {}", self.clause, self.detail),
        }
    }
}

/// A record that breaks the history format itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub op: usize,
    pub reason: String,
}

impl fmt::Display for Malformed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed op #{}: {}", self.op, self.reason)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub malformed: Vec<Malformed>,
    pub violations: Vec<HistoryViolation>,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.malformed.is_empty() && self.violations.is_empty()
    }

    pub fn clauses(&self) -> Vec<Clause> {
        let mut c: Vec<Clause> = self.violations.iter().map(|v| v.clause).collect();
        c.sort();
        c.dedup();
        c
    }
}

fn describe(r: &OpRecord) -> String {
    let args = match r.kind {
        OpKind::Insert => format!("{}", r.e1),
        _ => format!("{}..={}", r.e1, r.e2),
    };
    format!("thread {} {}({args}) over [{}, {}) -> {}", r.thread, r.kind, r.invoke, r.response, r.result)
}

/// Successful updates of one key.
#[derive(Debug, Default)]
struct Updates {
    inserts: Vec<(u64, u64)>,
    removes: Vec<(u64, u64)>,
}

/// Half-open time intervals `[from, to)` during which a counting bound is
/// at least one.
fn positive_intervals(mut changes: Vec<(u64, i64)>) -> Vec<(u64, u64)> {
    changes.sort_unstable();
    let mut out = Vec::new();
    let mut level = 0i64;
    let mut start = None;
    let mut i = 0;
    while i < changes.len() {
        let t = changes[i].0;
        while i < changes.len() && changes[i].0 == t {
            level += changes[i].1;
            i += 1;
        }
        match (level >= 1, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, u64::MAX));
    }
    out
}

/// Membership bounds of one key over time.
#[derive(Debug, Default)]
struct Timeline {
    certain: Vec<(u64, u64)>,
    possible: Vec<(u64, u64)>,
}

impl Timeline {
    fn new(u: &Updates) -> Timeline {
        let certain = u.inserts.iter().map(|&(_, resp)| (resp, 1)).chain(u.removes.iter().map(|&(inv, _)| (inv, -1)));
        let possible = u.inserts.iter().map(|&(inv, _)| (inv, 1)).chain(u.removes.iter().map(|&(_, resp)| (resp, -1)));
        Timeline { certain: positive_intervals(certain.collect()), possible: positive_intervals(possible.collect()) }
    }

    fn sure_in(&self, t1: u64, t2: u64) -> bool {
        let i = self.certain.partition_point(|&(a, _)| a <= t1);
        i > 0 && self.certain[i - 1].1 >= t2
    }

    fn may_in(&self, t1: u64, t2: u64) -> bool {
        let i = self.possible.partition_point(|&(a, _)| a < t2);
        i > 0 && self.possible[i - 1].1 > t1
    }
}

fn updates(history: &History) -> HashMap<u64, Updates> {
    let mut map: HashMap<u64, Updates> = HashMap::new();
    for r in &history.records {
        match r.kind {
            OpKind::Insert if r.result == 1 => map.entry(r.e1).or_default().inserts.push((r.invoke, r.response)),
            OpKind::Remove if r.result != 0 => map.entry(r.result).or_default().removes.push((r.invoke, r.response)),
            _ => {}
        }
    }
    map
}

/// True only if the history proves `e` was present throughout `[t1; t2)`.
pub fn sure_in(history: &History, e: u64, t1: u64, t2: u64) -> bool {
    updates(history).get(&e).is_some_and(|u| Timeline::new(u).sure_in(t1, t2))
}

/// False only if the history proves `e` was absent throughout `[t1; t2)`.
pub fn may_in(history: &History, e: u64, t1: u64, t2: u64) -> bool {
    updates(history).get(&e).is_some_and(|u| Timeline::new(u).may_in(t1, t2))
}

/// Max segment tree over key indices.
struct MaxTree {
    n: usize,
    data: Vec<u64>,
}

impl MaxTree {
    fn new(n: usize) -> MaxTree {
        MaxTree { n, data: vec![0; 2 * n.max(1)] }
    }

    fn set(&mut self, i: usize, v: u64) {
        let mut p = i + self.n;
        self.data[p] = v;
        while p > 1 {
            p /= 2;
            self.data[p] = self.data[2 * p].max(self.data[2 * p + 1]);
        }
    }

    /// Max over `lo..hi`.
    fn max(&self, lo: usize, hi: usize) -> u64 {
        let (mut l, mut r) = (lo + self.n, hi + self.n);
        let mut best = 0;
        while l < r {
            if l & 1 == 1 {
                best = best.max(self.data[l]);
                l += 1;
            }
            if r & 1 == 1 {
                r -= 1;
                best = best.max(self.data[r]);
            }
            l /= 2;
            r /= 2;
        }
        best
    }

    fn get(&self, i: usize) -> u64 {
        self.data[i + self.n]
    }
}

fn malformed(history: &History) -> Vec<Malformed> {
    let mut out = Vec::new();
    let mut per_thread: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, r) in history.records.iter().enumerate() {
        let mut bad = |reason: String| out.push(Malformed { op: i, reason });
        if r.invoke >= r.response {
            bad(format!("invoke {} not before response {}", r.invoke, r.response));
        }
        if r.e1 == 0 || r.e1 > r.e2 || r.e2 > MAX_KEY {
            bad(format!("invalid key range {}..={}", r.e1, r.e2));
        }
        if r.kind == OpKind::Insert && r.e1 != r.e2 {
            bad(format!("insert with e1 {} != e2 {}", r.e1, r.e2));
        }
        if r.kind == OpKind::Insert && r.result > 1 {
            bad(format!("insert result {} is not 0 or 1", r.result));
        }
        per_thread.entry(r.thread).or_default().push(i);
    }
    for ops in per_thread.values_mut() {
        ops.sort_by_key(|&i| (history.records[i].invoke, history.records[i].response));
        for w in ops.windows(2) {
            let (a, b) = (&history.records[w[0]], &history.records[w[1]]);
            if b.invoke < a.response {
                out.push(Malformed { op: w[1], reason: format!("overlaps op #{} of the same thread {}", w[0], a.thread) });
            }
        }
    }
    out.sort_by_key(|m| m.op);
    out
}

/// Checks every operation against the bounds. Records may come in any order.
pub fn check_history(history: &History) -> CheckReport {
    let mut report = CheckReport { malformed: malformed(history), violations: Vec::new() };
    if !report.malformed.is_empty() {
        return report;
    }
    let by_key = updates(history);
    let timelines: HashMap<u64, Timeline> = by_key.iter().map(|(k, u)| (*k, Timeline::new(u))).collect();
    let mut push = |clause, op: usize, key, detail: String| {
        report.violations.push(HistoryViolation {
            clause,
            op: Some(op),
            key,
            detail: format!("{}: {detail}", describe(&history.records[op])),
        })
    };

    // (b) and (d): per-key checks
    for (i, r) in history.records.iter().enumerate() {
        let tl = |k: u64| timelines.get(&k);
        match r.kind {
            OpKind::Search | OpKind::Remove if r.result != 0 => {
                let e = r.result;
                if e < r.e1 || e > r.e2 {
                    push(Clause::ReturnedAbsentKey, i, e, format!("{e} is outside the range"));
                } else if !tl(e).is_some_and(|t| t.may_in(r.invoke, r.response)) {
                    push(Clause::ReturnedAbsentKey, i, e, format!("{e} was certainly absent throughout"));
                }
            }
            OpKind::Insert => {
                let e = r.e1;
                if r.result == 1 && tl(e).is_some_and(|t| t.sure_in(r.invoke, r.response)) {
                    push(Clause::InsertConflict, i, e, format!("{e} was certainly present throughout"));
                }
                if r.result == 0 && !tl(e).is_some_and(|t| t.may_in(r.invoke, r.response)) {
                    push(Clause::InsertConflict, i, e, format!("{e} was certainly absent throughout"));
                }
            }
            _ => {}
        }
    }

    // (a) and (c): is some key of a range certainly present throughout a
    // window? Sweep windows by start time; for each key the tree holds the
    // end of its latest certain interval that has started.
    let mut keys: Vec<u64> = timelines.keys().copied().collect();
    keys.sort_unstable();
    let mut starts: Vec<(u64, usize, u64)> = Vec::new();
    for (idx, k) in keys.iter().enumerate() {
        starts.extend(timelines[k].certain.iter().map(|&(a, b)| (a, idx, b)));
    }
    starts.sort_unstable();
    let mut queries: Vec<(u64, usize, u64, u64, Clause)> = Vec::new();
    for (i, r) in history.records.iter().enumerate() {
        match (r.kind, r.result) {
            (OpKind::Search | OpKind::Remove, 0) => queries.push((r.invoke, i, r.e1, r.e2, Clause::MissedPresentKey)),
            (OpKind::Remove, e) if e > r.e1 && e <= r.e2 => queries.push((r.invoke, i, r.e1, e - 1, Clause::NotMinimal)),
            _ => {}
        }
    }
    queries.sort_unstable_by_key(|q| (q.0, q.1));
    let mut tree = MaxTree::new(keys.len());
    let mut next = 0;
    for (t1, op, lo_key, hi_key, clause) in queries {
        while next < starts.len() && starts[next].0 <= t1 {
            tree.set(starts[next].1, starts[next].2);
            next += 1;
        }
        let t2 = history.records[op].response;
        let lo = keys.partition_point(|k| *k < lo_key);
        let hi = keys.partition_point(|k| *k <= hi_key);
        if lo < hi && tree.max(lo, hi) >= t2 {
            let witness = (lo..hi).find(|&j| tree.get(j) >= t2).map(|j| keys[j]).unwrap_or(0);
            let detail = match clause {
                Clause::MissedPresentKey => format!("{witness} was certainly present throughout"),
                _ => format!("smaller key {witness} was certainly present throughout"),
            };
            push(clause, op, witness, detail);
        }
    }

    // (e): pair each remove with the latest unpaired earlier-invoked insert
    let mut keys: Vec<&u64> = by_key.keys().collect();
    keys.sort_unstable();
    for key in keys {
        let u = &by_key[key];
        let mut inserts = u.inserts.clone();
        inserts.sort_unstable();
        let mut removes: Vec<(u64, u64)> = u.removes.iter().map(|&(inv, resp)| (resp, inv)).collect();
        removes.sort_unstable();
        let mut unpaired = 0usize;
        let mut next = 0;
        for (resp, inv) in removes {
            while next < inserts.len() && inserts[next].0 < resp {
                unpaired += 1;
                next += 1;
            }
            if unpaired == 0 {
                let op = history
                    .records
                    .iter()
                    .position(|r| r.kind == OpKind::Remove && r.result == *key && r.invoke == inv && r.response == resp);
                report.violations.push(HistoryViolation {
                    clause: Clause::DuplicateRemoval,
                    op,
                    key: *key,
                    detail: format!("remove of {key} over [{inv}, {resp}) has no earlier unpaired insert"),
                });
            } else {
                unpaired -= 1;
            }
        }
    }
    report.violations.sort_by_key(|v| (v.op, v.clause));
    report
}

/// Compares the final contents with the net effect of successful updates:
/// each key must have been inserted exactly once more than removed if
/// present, and equally often if absent.
pub fn check_final(history: &History, final_keys: &[u64]) -> Vec<HistoryViolation> {
    let by_key = updates(history);
    let present: std::collections::HashSet<u64> = final_keys.iter().copied().collect();
    let mut keys: Vec<u64> = by_key.keys().copied().chain(present.iter().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut out = Vec::new();
    for k in keys {
        let (ins, rem) = by_key.get(&k).map_or((0, 0), |u| (u.inserts.len() as i64, u.removes.len() as i64));
        let expect = present.contains(&k) as i64;
        if ins - rem != expect {
            out.push(HistoryViolation {
                clause: Clause::FinalState,
                op: None,
                key: k,
                detail: format!(
                    "key {k}: {ins} successful inserts, {rem} removals, but it is {} at the end",
                    if expect == 1 { "present" } else { "absent" }
                ),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rec(thread: u32, kind: OpKind, e1: u64, e2: u64, invoke: u64, response: u64, result: u64) -> OpRecord {
        OpRecord { thread, kind, e1, e2, invoke, response, result }
    }

    #[test]
    fn sure_in_examples() {
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 1, 10, 1)]);
        assert!(sure_in(&h, 5, 20, 30));
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 25, 27, 1)]);
        assert!(!sure_in(&h, 5, 20, 30));
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 1, 10, 1), rec(0, OpKind::Remove, 1, 9, 25, 28, 5)]);
        assert!(!sure_in(&h, 5, 20, 30));
    }

    #[test]
    fn may_in_examples() {
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 1, 10, 1)]);
        assert!(!may_in(&h, 9, 0, 100));
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 1, 15, 1), rec(0, OpKind::Remove, 5, 5, 35, 40, 5)]);
        assert!(may_in(&h, 5, 20, 30));
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 25, 35, 1)]);
        assert!(may_in(&h, 5, 20, 30));
    }

    #[test]
    fn crafted_negative_histories() {
        // insert(5) done at t=1, then a search over [2,3) misses it
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 0, 1, 1), rec(1, OpKind::Search, 1, 9, 2, 3, 0)]);
        assert_eq!(check_history(&h).clauses(), vec![Clause::MissedPresentKey]);
        // 5 and 50 certainly present, remove(1,100) returns 50
        let h = History::new(vec![
            rec(0, OpKind::Insert, 5, 5, 0, 1, 1),
            rec(0, OpKind::Insert, 50, 50, 1, 2, 1),
            rec(1, OpKind::Remove, 1, 100, 3, 4, 50),
        ]);
        assert_eq!(check_history(&h).clauses(), vec![Clause::NotMinimal]);
        // search returns a key nobody inserted
        let h = History::new(vec![rec(0, OpKind::Search, 1, 9, 2, 3, 5)]);
        assert_eq!(check_history(&h).clauses(), vec![Clause::ReturnedAbsentKey]);
        // two removals of one insertion
        let h = History::new(vec![
            rec(0, OpKind::Insert, 5, 5, 0, 1, 1),
            rec(0, OpKind::Remove, 5, 5, 2, 3, 5),
            rec(1, OpKind::Remove, 5, 5, 2, 4, 5),
        ]);
        assert!(check_history(&h).clauses().contains(&Clause::DuplicateRemoval));
        // double successful insert with the key present in between
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 0, 1, 1), rec(1, OpKind::Insert, 5, 5, 2, 3, 1)]);
        assert_eq!(check_history(&h).clauses(), vec![Clause::InsertConflict]);
    }

    #[test]
    fn overlapping_ops_of_one_thread_are_malformed() {
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 0, 10, 1), rec(0, OpKind::Search, 1, 9, 5, 12, 5)]);
        let r = check_history(&h);
        assert_eq!(r.malformed.len(), 1);
        let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 10, 10, 1)]);
        assert_eq!(check_history(&h).malformed.len(), 1);
    }

    #[test]
    fn concurrent_windows_are_tolerated() {
        // search overlapping the insert may or may not see it
        for result in [0, 5] {
            let h = History::new(vec![rec(0, OpKind::Insert, 5, 5, 0, 10, 1), rec(1, OpKind::Search, 1, 9, 5, 8, result)]);
            assert!(check_history(&h).is_clean());
        }
        // remove of 50 concurrent with the removal of 5
        let h = History::new(vec![
            rec(0, OpKind::Insert, 5, 5, 0, 1, 1),
            rec(0, OpKind::Insert, 50, 50, 1, 2, 1),
            rec(0, OpKind::Remove, 5, 5, 3, 10, 5),
            rec(1, OpKind::Remove, 1, 100, 4, 6, 50),
        ]);
        assert!(check_history(&h).is_clean());
    }

    /// Serial histories: the bounds are exact, so the checker must agree
    /// with the oracle in both directions.
    #[test]
    fn serial_histories_match_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut set = BTreeSet::new();
            let mut records = Vec::new();
            for i in 0..40u64 {
                let kind = [OpKind::Search, OpKind::Insert, OpKind::Remove][rng.gen_range(0..3)];
                let e1 = rng.gen_range(1..=10);
                let e2 = if kind == OpKind::Insert { e1 } else { (e1 + rng.gen_range(0..4)).min(10) };
                let result = crate::verification::oracle_apply(&mut set, kind, e1, e2);
                records.push(rec((i % 3) as u32, kind, e1, e2, 2 * i, 2 * i + 1, result));
            }
            let h = History::new(records.clone());
            assert!(check_history(&h).is_clean());
            assert!(check_final(&h, &set.iter().copied().collect::<Vec<_>>()).is_empty());
            // any single result change is caught
            let j = rng.gen_range(0..records.len());
            let mut bad = records.clone();
            let r = &mut bad[j];
            r.result = match r.kind {
                OpKind::Insert => 1 - r.result,
                _ if r.result == 0 => r.e1,
                _ => 0,
            };
            let mut s2 = BTreeSet::new();
            let replay_ok = bad.iter().all(|r| crate::verification::oracle_apply(&mut s2, r.kind, r.e1, r.e2) == r.result);
            let report = check_history(&History::new(bad));
            assert!(replay_ok || !report.is_clean(), "missed corruption at op {j}");
        }
    }

    /// Soundness of the bounds on serial ground truth: certain implies
    /// present implies possible.
    #[test]
    fn bounds_bracket_serial_truth() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut set = BTreeSet::new();
        let mut records = Vec::new();
        let mut truth = Vec::new();
        for i in 0..300u64 {
            let kind = if rng.gen_bool(0.5) { OpKind::Insert } else { OpKind::Remove };
            let e = rng.gen_range(1..=6);
            let result = crate::verification::oracle_apply(&mut set, kind, e, e);
            records.push(rec(0, kind, e, e, 10 * i, 10 * i + 5, result));
            truth.push(set.clone());
        }
        let h = History::new(records);
        for i in 0..299u64 {
            // window strictly between op i and op i+1: state is truth[i]
            let (t1, t2) = (10 * i + 6, 10 * i + 9);
            for e in 1..=6 {
                let present = truth[i as usize].contains(&e);
                assert!(!sure_in(&h, e, t1, t2) || present);
                assert!(!present || may_in(&h, e, t1, t2));
                assert_eq!(sure_in(&h, e, t1, t2), present);
            }
        }
    }
}
