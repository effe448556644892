//! Small protocol scenarios run under the deterministic scheduler: every
//! interleaving of two threads (optionally preemption-bounded), seeded
//! random schedules of three threads, a suspended-thread progress check and
//! a small-model comparison against brute force.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TreeConfig;
use crate::node::{Descriptor, NodePtr, Step};
use crate::ops::OpKind;
use crate::rebalance::Begin;
use crate::sim::{self, Decision, ExploreConfig, Explorer, Milestone, RandomStrategy, Replay, RunOutcome, Strategy, Suspend, Task};
use crate::tree::{Layout, Tree, TreeOptions};
use crate::verification::brute::serially_reachable;
use crate::verification::{check_final, check_history, Clock, History, OpRecord, Recorder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Two threads advertise the same split on the same grandparent.
    ConcurrentBegin,
    /// A rebalance is advertised (STEP1); one thread helps it while another
    /// searches through the grandparent.
    HelperStep1,
    /// A rebalance is prepared up to STEP2; two threads help it.
    HelperStep2,
    /// One thread helps a rebalance while another collapses the level above
    /// it, replacing the rebalance's grandparent.
    GrandparentReplaced,
    /// Three threads run short random workloads under random schedules.
    Seeded,
    /// One thread is suspended right after freezing; the others keep going.
    Suspended,
    /// Two threads run short workloads over keys 1..=4; every history is
    /// compared with brute-force enumeration.
    SmallModel,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::ConcurrentBegin,
        Scenario::HelperStep1,
        Scenario::HelperStep2,
        Scenario::GrandparentReplaced,
        Scenario::Seeded,
        Scenario::Suspended,
        Scenario::SmallModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ConcurrentBegin => "concurrent-begin",
            Scenario::HelperStep1 => "helper-step1",
            Scenario::HelperStep2 => "helper-step2",
            Scenario::GrandparentReplaced => "gp-replaced",
            Scenario::Seeded => "seeded",
            Scenario::Suspended => "suspended",
            Scenario::SmallModel => "small-model",
        }
    }

    /// Two-thread scenarios explored exhaustively.
    pub fn is_exhaustive(self) -> bool {
        matches!(
            self,
            Scenario::ConcurrentBegin | Scenario::HelperStep1 | Scenario::HelperStep2 | Scenario::GrandparentReplaced
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            format!("unknown scenario {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    /// Preemptive context switches allowed per schedule (`None`: unbounded).
    pub preemption_bound: Option<usize>,
    pub seed: u64,
    /// Random schedules for `seeded`; sampled workloads for `small-model`.
    pub samples: u64,
    /// `small-model` covers every workload up to this many operations
    /// before sampling longer ones.
    pub exhaustive_ops: usize,
    /// Operations the non-suspended threads of `suspended` must complete.
    pub progress_target: u64,
    pub step_limit: u64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions { preemption_bound: None, seed: 7, samples: 10_000, exhaustive_ops: 3, progress_target: 1000, step_limit: 200_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    /// Schedules run to completion and checked.
    pub schedules: u64,
    /// Schedules cut short by the partial-order reduction.
    pub pruned: u64,
    /// Every schedule within the bound was covered.
    pub exhaustive: bool,
    /// First failing schedule and what failed.
    pub violation: Option<(Vec<usize>, String)>,
    /// Operations completed by the running threads (`suspended` only).
    pub completed_ops: Option<u64>,
    pub elapsed: Duration,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} schedules ({} pruned){} in {:.2}s",
            self.scenario,
            self.schedules,
            self.pruned,
            if self.exhaustive { ", exhaustive" } else { "" },
            self.elapsed.as_secs_f64()
        )?;
        if let Some(n) = self.completed_ops {
            write!(f, ", {n} operations completed by running threads")?;
        }
        match &self.violation {
            None => write!(f, ", 0 violations"),
            Some((schedule, msg)) => write!(f, "\nVIOLATION: {msg}\nschedule: {}", format_schedule(schedule)),
        }
    }
}

/// Comma-separated thread ids, the form `replay` accepts.
pub fn format_schedule(schedule: &[usize]) -> String {
    schedule.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_schedule(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| format!("bad thread id {p:?} in schedule")))
        .collect()
}

type Exec<'e> = sim::Exec<'e>;

pub fn run_scenario(scenario: Scenario, options: &ScenarioOptions) -> ScenarioReport {
    let start = Instant::now();
    let explorer = |bound| {
        Explorer::new(ExploreConfig {
            preemption_bound: bound,
            sleep_sets: true,
            dpor: true,
            max_schedules: None,
            step_limit: options.step_limit,
        })
    };
    let mut report = ScenarioReport {
        scenario,
        schedules: 0,
        pruned: 0,
        exhaustive: false,
        violation: None,
        completed_ops: None,
        elapsed: Duration::ZERO,
    };
    match scenario {
        Scenario::Seeded => seeded(options, &mut report),
        Scenario::Suspended => suspended(options, &mut report),
        Scenario::SmallModel => small_model(options, &mut report),
        _ => {
            let r = explorer(options.preemption_bound).explore(|exec| protocol(scenario, exec));
            report.schedules = r.schedules;
            report.pruned = r.pruned;
            report.exhaustive = r.exhaustive;
            report.violation = r.violation;
        }
    }
    report.elapsed = start.elapsed();
    report
}

/// Runs one protocol scenario under a fixed schedule, for reproducing a
/// reported violation.
pub fn replay(scenario: Scenario, schedule: &[usize], step_limit: u64) -> Result<(), String> {
    if !scenario.is_exhaustive() {
        return Err(format!("{scenario} is not replayable"));
    }
    let mut failure = None;
    let verdict = protocol(scenario, &mut |tasks| {
        let outcome = sim::run(Box::new(Replay::new(schedule.to_vec())), tasks, step_limit);
        failure = outcome.failure.clone();
        outcome
    });
    match failure {
        Some(f) => Err(f),
        None => verdict,
    }
}

// ---------------------------------------------------------------------------
// Protocol scenarios

fn small_config() -> TreeConfig {
    TreeConfig::new(3, 4, 2).expect("valid")
}

fn leaf(keys: &[u64]) -> Layout {
    Layout::Leaf(keys.to_vec())
}

/// Root child with a full leaf and a half-full one.
fn split_layout() -> Layout {
    Layout::Internal(vec![4], vec![leaf(&[1, 2, 3, 4]), leaf(&[5, 6])])
}

/// (grandparent, parent) of the leaf holding `key`, as addresses.
fn leaf_context(tree: &Tree, key: u64) -> (usize, usize) {
    let guard = tree.pin();
    let path = tree.descend_in(key, &guard).expect("quiescent descent");
    let n = path.nodes.len();
    (path.nodes[n - 3] as usize, path.nodes[n - 2] as usize)
}

/// Advertises a rebalance from the calling (unscheduled) thread.
fn begin(tree: &Tree, gp: usize, parent: usize, key: u64) -> usize {
    let guard = tree.pin();
    match tree.begin(gp as NodePtr, parent as NodePtr, key, &guard) {
        Begin::Claimed(d) => d as *const Descriptor as usize,
        _ => panic!("setup could not claim the grandparent"),
    }
}

fn descriptor_id(addr: usize) -> u64 {
    // SAFETY: verification trees never free descriptors before the tree.
    unsafe { &*(addr as *const Descriptor) }.id
}

fn help(tree: &Tree, desc: usize) {
    let guard = tree.pin();
    // SAFETY: as in `descriptor_id`.
    tree.help(unsafe { &*(desc as *const Descriptor) }, &guard);
}

fn rebalance(tree: &Tree, gp: usize, parent: usize, key: u64) {
    let guard = tree.pin();
    tree.rebalance(gp as NodePtr, parent as NodePtr, key, &guard);
}

/// Post-conditions shared by the protocol scenarios: each descriptor in
/// `committed` swapped exactly once, no descriptor swapped twice, every
/// advertised rebalance finished, the keys are unchanged and the structure
/// is sound.
fn settle(tree: &Tree, keys: &[u64], committed: &[u64], min_swaps: u64) -> Result<(), String> {
    let records = tree.take_records();
    let mut ids: Vec<u64> = records.iter().map(|r| r.descriptor).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(format!("descriptor {} committed twice", w[0]));
    }
    for id in committed {
        if !ids.contains(id) {
            return Err(format!("descriptor {id} never committed"));
        }
    }
    let stats = tree.stats();
    if stats.swaps < min_swaps || stats.swaps != records.len() as u64 {
        return Err(format!("{} link swaps, {} records", stats.swaps, records.len()));
    }
    if stats.started != stats.completed || stats.completed != stats.swaps {
        return Err(format!("{} started, {} swapped, {} cleared", stats.started, stats.swaps, stats.completed));
    }
    if let Some(r) = records.iter().find(|r| !r.preserves_keys()) {
        return Err(format!("rebalance {} changed the keys: {:?} -> {:?}", r.descriptor, r.keys_before, r.keys_after));
    }
    match tree.snapshot() {
        Ok(k) if k == keys => {}
        other => return Err(format!("keys after: {other:?}, expected {keys:?}")),
    }
    let violations = tree.check_structure();
    if !violations.is_empty() {
        return Err(format!("structure: {violations:?}"));
    }
    Ok(())
}

fn root_cleared(tree: &Tree, seq: u64) -> Result<(), String> {
    let s = tree.root_status();
    if s.step != Step::None || s.sequence != seq {
        return Err(format!("root status {:?} seq {}, expected NONE seq {seq}", s.step, s.sequence));
    }
    Ok(())
}

fn protocol(scenario: Scenario, exec: &mut Exec<'_>) -> Result<(), String> {
    let options = TreeOptions::verification();
    match scenario {
        Scenario::ConcurrentBegin => {
            let tree = Tree::from_layout(small_config(), options, &split_layout()).expect("layout");
            let keys = tree.snapshot().expect("keys");
            let (gp, parent) = leaf_context(&tree, 1);
            let t = &tree;
            exec(vec![Box::new(move || rebalance(t, gp, parent, 1)), Box::new(move || rebalance(t, gp, parent, 1))]);
            settle(&tree, &keys, &[], 1)?;
            if tree.stats().swaps != 1 {
                return Err(format!("{} swaps, expected 1", tree.stats().swaps));
            }
            root_cleared(&tree, 1)
        }
        Scenario::HelperStep1 | Scenario::HelperStep2 => {
            let tree = Tree::from_layout(small_config(), options, &split_layout()).expect("layout");
            let keys = tree.snapshot().expect("keys");
            let (gp, parent) = leaf_context(&tree, 1);
            let desc = begin(&tree, gp, parent, 1);
            let t = &tree;
            if scenario == Scenario::HelperStep2 {
                let guard = tree.pin();
                // SAFETY: as in `descriptor_id`.
                tree.advance_to_step2(unsafe { &*(desc as *const Descriptor) }, &guard);
                if tree.root_status().step != Step::Step2 {
                    return Err("setup did not reach STEP2".into());
                }
                exec(vec![Box::new(move || help(t, desc)), Box::new(move || help(t, desc))]);
            } else {
                let searcher = move || {
                    let found = t.search(1, 9).expect("valid range");
                    assert_eq!(found, 1, "search(1, 9) during the split");
                };
                exec(vec![Box::new(move || help(t, desc)), Box::new(searcher)]);
            }
            settle(&tree, &keys, &[descriptor_id(desc)], 1)?;
            if tree.stats().swaps != 1 {
                return Err(format!("{} swaps, expected 1", tree.stats().swaps));
            }
            root_cleared(&tree, 1)
        }
        Scenario::GrandparentReplaced => {
            // root -> ic -> A -> P -> [full leaf, leaf]
            let layout = Layout::Internal(vec![], vec![Layout::Internal(vec![], vec![split_layout()])]);
            let tree = Tree::from_layout(small_config(), options, &layout).expect("layout");
            let keys = tree.snapshot().expect("keys");
            let (a, p) = leaf_context(&tree, 1);
            let (root, ic) = {
                let guard = tree.pin();
                let path = tree.descend_in(1, &guard).expect("quiescent descent");
                (path.nodes[0] as usize, path.nodes[1] as usize)
            };
            let desc = begin(&tree, a, p, 1);
            let t = &tree;
            exec(vec![Box::new(move || help(t, desc)), Box::new(move || rebalance(t, root, ic, 1))]);
            settle(&tree, &keys, &[descriptor_id(desc)], 2)?;
            root_cleared(&tree, 1)
        }
        _ => unreachable!("not a protocol scenario"),
    }
}

// ---------------------------------------------------------------------------
// Workload scenarios

/// A short random workload over `[1; range]`.
fn random_ops(rng: &mut ChaCha8Rng, n: usize, range: u64) -> Vec<(OpKind, u64, u64)> {
    (0..n)
        .map(|_| {
            let kind = match rng.gen_range(0..3) {
                0 => OpKind::Search,
                1 => OpKind::Insert,
                _ => OpKind::Remove,
            };
            let e1 = rng.gen_range(1..=range);
            let e2 = if kind == OpKind::Insert { e1 } else { rng.gen_range(e1..=range) };
            (kind, e1, e2)
        })
        .collect()
}

/// Runs per-thread workloads on `tree`, recording a history with
/// simulated timestamps.
fn recorded_run(
    tree: &Tree,
    workloads: &[Vec<(OpKind, u64, u64)>],
    strategy: Box<dyn Strategy>,
    step_limit: u64,
    exec: Option<&mut Exec<'_>>,
) -> (RunOutcome, History) {
    let buffers: Vec<std::sync::Mutex<Vec<OpRecord>>> = workloads.iter().map(|_| Default::default()).collect();
    let tasks: Vec<Task<'_>> = workloads
        .iter()
        .enumerate()
        .map(|(t, ops)| {
            let buffer = &buffers[t];
            Box::new(move || {
                let mut rec = Recorder::new(t as u32, Clock::logical());
                for &(kind, e1, e2) in ops {
                    rec.run(tree, kind, e1, e2).expect("valid arguments");
                }
                *buffer.lock().expect("buffer") = rec.into_records();
            }) as Task<'_>
        })
        .collect();
    let outcome = match exec {
        Some(exec) => exec(tasks),
        None => sim::run(strategy, tasks, step_limit),
    };
    let history = History::from_threads(buffers.into_iter().map(|b| b.into_inner().expect("buffer")));
    (outcome, history)
}

/// Checks a completed simulated run: structure, history and final contents.
fn check_run(tree: &Tree, history: &History) -> Result<BTreeSet<u64>, String> {
    let violations = tree.check_structure();
    if !violations.is_empty() {
        return Err(format!("structure: {violations:?}"));
    }
    let keys = tree.snapshot().map_err(|v| v.to_string())?;
    let report = check_history(history);
    if !report.is_clean() {
        return Err(format!("history: {:?} {:?}", report.malformed, report.violations));
    }
    let final_state = check_final(history, &keys);
    if !final_state.is_empty() {
        return Err(format!("final state: {final_state:?}"));
    }
    if let Some(r) = tree.take_records().iter().find(|r| !r.preserves_keys()) {
        return Err(format!("rebalance {} changed the keys", r.descriptor));
    }
    Ok(keys.into_iter().collect())
}

fn seeded(options: &ScenarioOptions, report: &mut ScenarioReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.samples {
        let tree = Tree::from_layout(small_config(), TreeOptions::verification(), &split_layout()).expect("layout");
        let workloads: Vec<_> = (0..3).map(|_| random_ops(&mut rng, 4, 12)).collect();
        let initial = tree.snapshot().expect("keys");
        let schedule_seed = rng.gen();
        let (outcome, history) =
            recorded_run(&tree, &workloads, Box::new(RandomStrategy::new(schedule_seed)), options.step_limit, None);
        report.schedules += 1;
        let verdict = match (&outcome.failure, outcome.aborted) {
            (Some(f), _) => Err(f.clone()),
            (None, true) => Err("run abandoned (step limit)".into()),
            (None, false) => {
                check_run(&tree, &with_initial(history, &initial)).map(|_| ())
            }
        };
        if let Err(msg) = verdict {
            report.violation = Some((outcome.schedule, format!("{msg} (workloads {workloads:?})")));
            return;
        }
    }
}

/// Adds the keys a tree started with as inserts completed before the run,
/// one pseudo-thread each.
fn with_initial(history: History, initial: &[u64]) -> History {
    let first = history.records.len() as u32 + 16;
    let mut records: Vec<OpRecord> = initial
        .iter()
        .enumerate()
        .map(|(i, &k)| OpRecord { thread: first + i as u32, kind: OpKind::Insert, e1: k, e2: k, invoke: 0, response: 1, result: 1 })
        .collect();
    records.extend(history.records.into_iter().map(|r| OpRecord { invoke: r.invoke + 2, response: r.response + 2, ..r }));
    History::new(records)
}

/// Prefers `first` until it stops being runnable, then random.
struct Favor {
    first: usize,
    random: RandomStrategy,
}

impl Strategy for Favor {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        if d.pending.iter().any(|(t, _)| *t == self.first) {
            return Some(self.first);
        }
        self.random.choose(d)
    }
}

fn suspended(options: &ScenarioOptions, report: &mut ScenarioReport) {
    // The victim inserts into a full leaf; it is parked for good right
    // after freezing the nodes of the split.
    let layout = Layout::Internal(vec![8], vec![leaf(&[1, 2, 4, 5]), leaf(&[9, 10])]);
    let tree = Tree::from_layout(small_config(), TreeOptions::verification(), &layout).expect("layout");
    let done = std::sync::atomic::AtomicU64::new(0);
    let target = options.progress_target;
    let t = &tree;
    let done_ref = &done;
    let worker = |thread: u64| {
        move || {
            let mut rng = ChaCha8Rng::seed_from_u64(thread);
            while done_ref.load(std::sync::atomic::Ordering::Relaxed) < target {
                let (kind, e1, e2) = random_ops(&mut rng, 1, 12)[0];
                t.apply(kind, e1, e2).expect("valid arguments");
                done_ref.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
        }
    };
    let strategy = Suspend::new(Favor { first: 0, random: RandomStrategy::new(options.seed) }, 0, Milestone::AfterFreeze);
    let tasks: Vec<Task<'_>> = vec![
        Box::new(move || {
            t.insert(3).expect("valid key");
        }),
        Box::new(worker(1)),
        Box::new(worker(2)),
    ];
    let outcome = sim::run(Box::new(strategy), tasks, u64::MAX);
    report.schedules = 1;
    let completed = done.load(std::sync::atomic::Ordering::Relaxed);
    report.completed_ops = Some(completed);
    let problem = if let Some(f) = outcome.failure {
        Some(f)
    } else if outcome.completed[0] {
        Some("the victim was never suspended".to_string())
    } else if !outcome.completed[1] || !outcome.completed[2] {
        Some("a running thread did not finish".to_string())
    } else if completed < target {
        Some(format!("only {completed} operations completed"))
    } else {
        None
    };
    if let Some(msg) = problem {
        report.violation = Some((outcome.schedule, msg));
    }
}

/// Every operation over keys `1..=range`.
fn all_ops(range: u64) -> Vec<(OpKind, u64, u64)> {
    let mut ops: Vec<_> = (1..=range).map(|k| (OpKind::Insert, k, k)).collect();
    for kind in [OpKind::Search, OpKind::Remove] {
        for e1 in 1..=range {
            ops.extend((e1..=range).map(|e2| (kind, e1, e2)));
        }
    }
    ops
}

/// Two-thread workloads over keys 1..=4 on an empty (K=3, D=4, S=2) tree:
/// all of them up to `exhaustive_ops` operations, then `samples` random ones
/// of up to six. Every schedule of each is explored.
fn small_model(options: &ScenarioOptions, report: &mut ScenarioReport) {
    let explorer = Explorer::new(ExploreConfig {
        preemption_bound: options.preemption_bound,
        sleep_sets: true,
        dpor: true,
        max_schedules: None,
        step_limit: options.step_limit,
    });
    report.exhaustive = true;
    let ops = all_ops(4);
    for total in 2..=options.exhaustive_ops.min(6) {
        let mut index = vec![0usize; total];
        loop {
            let chosen: Vec<_> = index.iter().map(|&i| ops[i]).collect();
            for split in 1..total {
                let workloads = vec![chosen[..split].to_vec(), chosen[split..].to_vec()];
                if !small_model_case(&explorer, &workloads, report) {
                    return;
                }
            }
            // odometer increment
            let Some(pos) = index.iter().rposition(|&i| i + 1 < ops.len()) else { break };
            index[pos] += 1;
            index[pos + 1..].iter_mut().for_each(|i| *i = 0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let shortest = (options.exhaustive_ops + 1).clamp(2, 6);
    for _ in 0..options.samples {
        let total = rng.gen_range(shortest..=6);
        let split = rng.gen_range(1..total);
        let workloads = vec![random_ops(&mut rng, split, 4), random_ops(&mut rng, total - split, 4)];
        if !small_model_case(&explorer, &workloads, report) {
            return;
        }
    }
}

/// Explores one workload; false after a violation.
fn small_model_case(explorer: &Explorer, workloads: &[Vec<(OpKind, u64, u64)>], report: &mut ScenarioReport) -> bool {
    let r = explorer.explore(|exec| {
        let tree = Tree::with_options(small_config(), TreeOptions::verification()).expect("config");
        let (outcome, history) = recorded_run(&tree, workloads, Box::new(RandomStrategy::new(0)), 0, Some(exec));
        if outcome.aborted {
            return Ok(());
        }
        let keys = check_run(&tree, &history)?;
        if !serially_reachable(&history, &keys) {
            return Err(format!("final keys {keys:?} not reachable by any serial order"));
        }
        Ok(())
    });
    report.schedules += r.schedules;
    report.pruned += r.pruned;
    report.exhaustive &= r.exhaustive;
    match r.violation {
        Some((schedule, msg)) => {
            report.violation = Some((schedule, format!("{msg} (workloads {workloads:?})")));
            false
        }
        None => true,
    }
}
