//! Deterministic scheduling of real threads over [`SharedWord`] accesses.
//!
//! A simulation runs a handful of closures on OS threads, but only one of
//! them executes at a time. Before every shared-cell access a thread parks
//! at a scheduling point and a [`Strategy`] picks which pending thread takes
//! the next step. Replaying the same sequence of choices replays the same
//! execution, which is what [`Explorer`] builds on to enumerate schedules.
//!
//! Only accesses made from threads spawned by [`run`] are scheduled; setup
//! code running on the caller's thread is unaffected.
//!
//! [`SharedWord`]: crate::shared::SharedWord

use std::any::Any;
use std::cell::RefCell;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard, Once};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static ACTIVE_RUNS: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static CONTEXT: RefCell<Option<(Arc<Scheduler>, usize)>> = const { RefCell::new(None) };
}

/// One pending shared-memory access. `cell` is a logical id assigned in
/// first-touch order, so it is stable across replays of the same prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Access {
    pub cell: u32,
    pub write: bool,
}

impl Access {
    /// Cell id of the simulated clock. A clock read is a write to it, so
    /// clock reads are ordered among themselves; reordering one against a
    /// tree access changes no recorded value.
    pub const CLOCK: u32 = u32::MAX;

    /// Two accesses commute unless they touch the same cell and one writes.
    pub fn independent(self, other: Access) -> bool {
        self.cell != other.cell || (!self.write && !other.write)
    }
}

/// Protocol points a thread can announce to the strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Milestone {
    /// All nodes of a rebalance are frozen.
    AfterFreeze,
    /// The grandparent status moved to STEP2.
    AfterStep2,
    /// The parent link was swapped.
    AfterSwap,
}

/// Scheduling decision input.
#[derive(Debug)]
pub struct Decision<'a> {
    /// Threads parked at a scheduling point, ascending by thread id.
    pub pending: &'a [(usize, Access)],
    /// Thread that took the previous step.
    pub last: Option<usize>,
    /// Number of steps granted so far.
    pub step: u64,
}

pub trait Strategy: Send {
    /// Picks the next thread to step. `None` abandons the run.
    fn choose(&mut self, decision: &Decision<'_>) -> Option<usize>;

    fn milestone(&mut self, _thread: usize, _milestone: Milestone) {}
}

/// Marker panic payload used to unwind threads of an abandoned run.
struct SimAbort;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ThreadState {
    Starting,
    /// Parked before touching `addr`.
    Pending(usize, bool),
    Running,
    Finished,
}

struct State {
    threads: Vec<ThreadState>,
    running: Option<usize>,
    last: Option<usize>,
    steps: u64,
    clock: u64,
    step_limit: u64,
    strategy: Box<dyn Strategy>,
    aborted: bool,
    exhausted: bool,
    /// Addresses in first-touch order; the index is the cell id.
    cells: Vec<usize>,
    schedule: Vec<usize>,
    failure: Option<String>,
}

impl State {
    fn cell_id(&mut self, addr: usize) -> u32 {
        if addr == CLOCK_ADDR {
            return Access::CLOCK;
        }
        // scenarios touch few cells; a scan beats hashing
        match self.cells.iter().position(|&a| a == addr) {
            Some(i) => i as u32,
            None => {
                self.cells.push(addr);
                self.cells.len() as u32 - 1
            }
        }
    }
}

struct Scheduler {
    state: Mutex<State>,
    /// One per thread, so a step wakes only the thread it grants.
    wake: Vec<Condvar>,
}

impl Scheduler {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Grants the next step if every live thread is parked.
    fn dispatch(&self, st: &mut State) {
        if st.aborted || st.running.is_some() {
            return;
        }
        if st
            .threads
            .iter()
            .any(|t| matches!(t, ThreadState::Starting | ThreadState::Running))
        {
            return;
        }
        // ids are assigned here, in thread order, so that they do not
        // depend on which thread parked first
        let mut pending: Vec<(usize, Access)> = Vec::with_capacity(st.threads.len());
        for i in 0..st.threads.len() {
            if let ThreadState::Pending(addr, write) = st.threads[i] {
                pending.push((i, Access { cell: st.cell_id(addr), write }));
            }
        }
        if pending.is_empty() {
            return;
        }
        if st.steps >= st.step_limit {
            st.exhausted = true;
            st.aborted = true;
            self.wake_all();
            return;
        }
        let decision = Decision { pending: &pending, last: st.last, step: st.steps };
        match st.strategy.choose(&decision) {
            Some(t) if pending.iter().any(|(p, _)| *p == t) => {
                st.threads[t] = ThreadState::Running;
                st.running = Some(t);
                st.last = Some(t);
                st.steps += 1;
                st.schedule.push(t);
                self.wake[t].notify_one();
            }
            Some(t) => {
                st.failure = Some(format!("strategy chose thread {t} which is not pending"));
                st.aborted = true;
                self.wake_all();
            }
            None => {
                st.aborted = true;
                self.wake_all();
            }
        }
    }

    fn wake_all(&self) {
        self.wake.iter().for_each(Condvar::notify_one);
    }

    fn park(&self, tid: usize, addr: usize, write: bool) {
        let mut st = self.lock();
        st.threads[tid] = ThreadState::Pending(addr, write);
        if st.running == Some(tid) {
            st.running = None;
        }
        self.dispatch(&mut st);
        while st.running != Some(tid) && !st.aborted {
            st = self.wake[tid].wait(st).unwrap_or_else(|e| e.into_inner());
        }
        if st.aborted {
            drop(st);
            panic::panic_any(SimAbort);
        }
    }

    fn finish(&self, tid: usize, failure: Option<String>) {
        let mut st = self.lock();
        st.threads[tid] = ThreadState::Finished;
        if st.running == Some(tid) {
            st.running = None;
        }
        if let Some(msg) = failure {
            st.failure.get_or_insert(msg);
            st.aborted = true;
        }
        self.dispatch(&mut st);
        if st.aborted {
            self.wake_all();
        }
    }
}

/// Hook called by [`SharedWord`](crate::shared::SharedWord) before every access.
#[inline]
pub(crate) fn before_access(addr: usize, write: bool) {
    if ACTIVE_RUNS.load(Ordering::Relaxed) == 0 {
        return;
    }
    before_access_slow(addr, write);
}

#[cold]
fn before_access_slow(addr: usize, write: bool) {
    let ctx = CONTEXT.with(|c| c.borrow().clone());
    if let Some((sched, tid)) = ctx {
        sched.park(tid, addr, write);
    }
}

/// Announces a protocol milestone to the active strategy (no-op outside a
/// simulation).
pub fn milestone(m: Milestone) {
    if ACTIVE_RUNS.load(Ordering::Relaxed) == 0 {
        return;
    }
    let ctx = CONTEXT.with(|c| c.borrow().clone());
    if let Some((sched, tid)) = ctx {
        sched.lock().strategy.milestone(tid, m);
    }
}

/// Steps granted so far in the simulation the caller runs in, if any.
pub fn logical_time() -> Option<u64> {
    if ACTIVE_RUNS.load(Ordering::Relaxed) == 0 {
        return None;
    }
    let ctx = CONTEXT.with(|c| c.borrow().clone());
    ctx.map(|(sched, _)| sched.lock().steps)
}

const CLOCK_ADDR: usize = usize::MAX;

/// Reads the simulated clock: a scheduling point returning a run-wide
/// strictly increasing tick. `None` outside a simulation.
pub fn clock_tick() -> Option<u64> {
    if ACTIVE_RUNS.load(Ordering::Relaxed) == 0 {
        return None;
    }
    let (sched, tid) = CONTEXT.with(|c| c.borrow().clone())?;
    sched.park(tid, CLOCK_ADDR, true);
    let mut st = sched.lock();
    st.clock += 1;
    Some(st.clock)
}

/// Id of the simulated thread the caller runs as, if any.
pub fn current_thread() -> Option<usize> {
    CONTEXT.with(|c| c.borrow().as_ref().map(|(_, t)| *t))
}

fn install_quiet_hook() {
    static HOOK: Once = Once::new();
    HOOK.call_once(|| {
        let prev = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if info.payload().is::<SimAbort>() {
                return;
            }
            prev(info)
        }));
    });
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic".to_string()
    }
}

/// Idle worker threads. Spawning fresh threads for every run dominated the
/// cost of exploring short schedules.
static POOL: Mutex<Vec<mpsc::Sender<Job<'static>>>> = Mutex::new(Vec::new());

/// Pool job: runs a task and returns its completion notice, which the
/// worker sends only after it is idle again.
type Job<'a> = Box<dyn FnOnce() -> Box<dyn FnOnce() + Send> + Send + 'a>;

fn pool_submit(job: Job<'static>) {
    let idle = POOL.lock().unwrap_or_else(|e| e.into_inner()).pop();
    let job = match idle {
        Some(worker) => match worker.send(job) {
            Ok(()) => return,
            Err(mpsc::SendError(job)) => job,
        },
        None => job,
    };
    let (tx, rx) = mpsc::channel::<Job<'static>>();
    tx.send(job).expect("fresh channel");
    std::thread::Builder::new()
        .name("sim-worker".into())
        .spawn(move || {
            while let Ok(job) = rx.recv() {
                let notify = job();
                POOL.lock().unwrap_or_else(|e| e.into_inner()).push(tx.clone());
                notify();
            }
        })
        .expect("spawn simulation worker");
}

/// Result of one simulated execution.
pub struct RunOutcome {
    /// Per thread: did its closure return normally.
    pub completed: Vec<bool>,
    /// The run was abandoned (strategy returned `None`, step limit, or a panic).
    pub aborted: bool,
    /// The step limit was hit.
    pub exhausted: bool,
    pub steps: u64,
    /// Thread chosen at each step.
    pub schedule: Vec<usize>,
    /// First genuine panic message from a worker.
    pub failure: Option<String>,
    pub strategy: Box<dyn Strategy>,
}

pub type Task<'a> = Box<dyn FnOnce() + Send + 'a>;

/// Runs `tasks` to completion (or abandonment) under `strategy`.
pub fn run<'a>(strategy: Box<dyn Strategy>, tasks: Vec<Task<'a>>, step_limit: u64) -> RunOutcome {
    install_quiet_hook();
    let n = tasks.len();
    let sched = Arc::new(Scheduler {
        state: Mutex::new(State {
            threads: vec![ThreadState::Starting; n],
            running: None,
            last: None,
            steps: 0,
            clock: 0,
            step_limit,
            strategy,
            aborted: false,
            exhausted: false,
            cells: Vec::new(),
            schedule: Vec::new(),
            failure: None,
        }),
        wake: (0..n).map(|_| Condvar::new()).collect(),
    });
    ACTIVE_RUNS.fetch_add(1, Ordering::SeqCst);
    let (done_tx, done_rx) = mpsc::channel();
    for (tid, task) in tasks.into_iter().enumerate() {
        let sched = Arc::clone(&sched);
        let done = done_tx.clone();
        let job: Job<'a> = Box::new(move || {
            CONTEXT.with(|c| *c.borrow_mut() = Some((Arc::clone(&sched), tid)));
            let result = panic::catch_unwind(AssertUnwindSafe(task));
            CONTEXT.with(|c| *c.borrow_mut() = None);
            let (ok, failure) = match result {
                Ok(()) => (true, None),
                Err(p) if p.is::<SimAbort>() => (false, None),
                Err(p) => (false, Some(format!("thread {tid}: {}", panic_message(&*p)))),
            };
            sched.finish(tid, failure);
            drop(sched);
            Box::new(move || {
                let _ = done.send((tid, ok));
            })
        });
        // SAFETY: the job cannot unwind past catch_unwind, and this function
        // does not return before every job has reported completion, so the
        // borrows inside it outlive its execution.
        let job: Job<'static> = unsafe { std::mem::transmute::<Job<'a>, Job<'static>>(job) };
        pool_submit(job);
    }
    drop(done_tx);
    let mut completed = vec![false; n];
    for _ in 0..n {
        let (tid, ok) = done_rx.recv().expect("simulation worker lost");
        completed[tid] = ok;
    }
    ACTIVE_RUNS.fetch_sub(1, Ordering::SeqCst);
    let sched = Arc::try_unwrap(sched).unwrap_or_else(|_| panic!("scheduler still shared"));
    let st = sched.state.into_inner().unwrap_or_else(|e| e.into_inner());
    RunOutcome {
        completed,
        aborted: st.aborted,
        exhausted: st.exhausted,
        steps: st.steps,
        schedule: st.schedule,
        failure: st.failure,
        strategy: st.strategy,
    }
}

/// Keeps running the last thread; switches only when it is no longer pending.
#[derive(Debug, Default)]
pub struct RunToCompletion;

impl Strategy for RunToCompletion {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        match d.last {
            Some(l) if d.pending.iter().any(|(t, _)| *t == l) => Some(l),
            _ => d.pending.first().map(|(t, _)| *t),
        }
    }
}

/// Uniformly random choice at every step, from a seed.
pub struct RandomStrategy {
    rng: ChaCha8Rng,
}

impl RandomStrategy {
    pub fn new(seed: u64) -> RandomStrategy {
        RandomStrategy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Strategy for RandomStrategy {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        let i = self.rng.gen_range(0..d.pending.len());
        Some(d.pending[i].0)
    }
}

/// Wraps another strategy and never schedules `victim` again once it has
/// announced `at`. The victim is left parked forever (the run ends with it
/// incomplete), which models a thread suspended indefinitely.
pub struct Suspend<S> {
    inner: S,
    victim: usize,
    at: Milestone,
    suspended: bool,
}

impl<S: Strategy> Suspend<S> {
    pub fn new(inner: S, victim: usize, at: Milestone) -> Suspend<S> {
        Suspend { inner, victim, at, suspended: false }
    }

    pub fn triggered(&self) -> bool {
        self.suspended
    }
}

impl<S: Strategy> Strategy for Suspend<S> {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        if !self.suspended {
            return self.inner.choose(d);
        }
        let others: Vec<(usize, Access)> =
            d.pending.iter().copied().filter(|(t, _)| *t != self.victim).collect();
        if others.is_empty() {
            return None;
        }
        let last = d.last.filter(|l| *l != self.victim);
        self.inner.choose(&Decision { pending: &others, last, step: d.step })
    }

    fn milestone(&mut self, thread: usize, m: Milestone) {
        if thread == self.victim && m == self.at {
            self.suspended = true;
        }
        self.inner.milestone(thread, m);
    }
}

/// Replays a fixed schedule, then falls back to run-to-completion.
#[derive(Debug, Clone)]
pub struct Replay {
    schedule: Vec<usize>,
    pos: usize,
}

impl Replay {
    pub fn new(schedule: Vec<usize>) -> Replay {
        Replay { schedule, pos: 0 }
    }
}

impl Strategy for Replay {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        if let Some(&t) = self.schedule.get(self.pos) {
            self.pos += 1;
            if d.pending.iter().any(|(p, _)| *p == t) {
                return Some(t);
            }
        }
        RunToCompletion.choose(d)
    }
}

// ---------------------------------------------------------------------------
// Systematic exploration

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    /// Maximum number of preemptive context switches per schedule.
    pub preemption_bound: Option<usize>,
    /// Sleep-set partial-order reduction.
    pub sleep_sets: bool,
    /// Dynamic partial-order reduction: branch only where two dependent
    /// accesses race. Ignored under a preemption bound.
    pub dpor: bool,
    /// Stop after this many complete schedules.
    pub max_schedules: Option<u64>,
    /// Steps per run before the run is declared livelocked.
    pub step_limit: u64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            preemption_bound: None,
            sleep_sets: true,
            dpor: true,
            max_schedules: None,
            step_limit: 100_000,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    pending: Vec<(usize, Access)>,
    sleep: Vec<(usize, Access)>,
    tried: Vec<usize>,
    /// Threads that must be tried here (`None`: all of them).
    backtrack: Option<Vec<usize>>,
    /// Vector clock of the step taken here.
    clock: Vec<u32>,
    last: Option<usize>,
    preemptions: usize,
}

impl Node {
    fn chosen(&self) -> usize {
        *self.tried.last().expect("node without a choice")
    }

    fn access_of(&self, t: usize) -> Access {
        self.pending.iter().find(|(p, _)| *p == t).map(|(_, a)| *a).expect("thread not pending")
    }

    fn cost(&self, t: usize) -> usize {
        match self.last {
            Some(l) if l != t && self.pending.iter().any(|(p, _)| *p == l) => 1,
            _ => 0,
        }
    }

    fn candidates(&self, bound: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        // The previous thread first, so the first schedule is preemption-free.
        let first = self.last.filter(|l| self.pending.iter().any(|(p, _)| p == l));
        first
            .into_iter()
            .chain(self.pending.iter().map(|(p, _)| *p).filter(move |p| Some(*p) != first))
            .filter(move |t| !self.sleep.iter().any(|(s, _)| s == t))
            .filter(move |t| bound.is_none_or(|b| self.preemptions + self.cost(*t) <= b))
    }

    fn request(&mut self, t: usize) {
        if let Some(b) = &mut self.backtrack {
            if !b.contains(&t) {
                b.push(t);
            }
        }
    }
}

struct DfsState {
    stack: Vec<Node>,
    depth: usize,
    /// Nodes below this depth have valid clocks.
    clocks_valid: usize,
    threads: usize,
    config: ExploreConfig,
    diverged: Option<String>,
    pruned: bool,
}

struct DfsStrategy(Arc<Mutex<DfsState>>);

impl Strategy for DfsStrategy {
    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).choose(d)
    }
}

impl DfsState {
    fn dpor(&self) -> bool {
        self.config.dpor && self.config.preemption_bound.is_none()
    }

    /// Clock of the last step of thread `t` before `depth`.
    fn thread_clock(&self, t: usize, depth: usize) -> Vec<u32> {
        self.stack[..depth]
            .iter()
            .rev()
            .find(|n| n.chosen() == t)
            .map_or_else(|| vec![0; self.threads], |n| n.clock.clone())
    }

    /// Sets the clock of the step at `depth`: it follows its thread's
    /// previous step and the latest dependent step of every other thread.
    fn stamp(&mut self, depth: usize) {
        let node = &self.stack[depth];
        let t = node.chosen();
        let a = node.access_of(t);
        let mut clock = self.thread_clock(t, depth);
        let mut seen = vec![false; self.threads];
        seen[t] = true;
        for prev in self.stack[..depth].iter().rev() {
            let q = prev.chosen();
            if !seen[q] && !prev.access_of(q).independent(a) {
                seen[q] = true;
                for (c, p) in clock.iter_mut().zip(&prev.clock) {
                    *c = (*c).max(*p);
                }
                if seen.iter().all(|s| *s) {
                    break;
                }
            }
        }
        clock[t] += 1;
        self.stack[depth].clock = clock;
    }

    /// For every pending access, finds the latest earlier step it races
    /// with and asks for the pending thread to be tried there.
    fn find_races(&mut self, pending: &[(usize, Access)]) {
        let depth = self.stack.len();
        for &(p, a) in pending {
            let known = self.thread_clock(p, depth);
            let race = (0..depth).rev().find(|&k| {
                let n = &self.stack[k];
                let q = n.chosen();
                q != p && !n.access_of(q).independent(a) && n.clock[q] > known[q]
            });
            if let Some(k) = race {
                self.stack[k].request(p);
            }
        }
    }

    fn choose(&mut self, d: &Decision<'_>) -> Option<usize> {
        let depth = self.depth;
        self.depth += 1;
        if depth == 0 && self.stack.is_empty() {
            self.threads = d.pending.iter().map(|(t, _)| t + 1).max().unwrap_or(0);
        }
        if depth < self.stack.len() {
            if self.stack[depth].pending != d.pending {
                self.diverged = Some(format!(
                    "nondeterministic replay at step {depth}: expected {:?}, saw {:?}",
                    self.stack[depth].pending, d.pending
                ));
                return None;
            }
            if self.dpor() && depth >= self.clocks_valid {
                self.stamp(depth);
                self.clocks_valid = depth + 1;
            }
            return Some(self.stack[depth].chosen());
        }
        if self.dpor() {
            self.find_races(d.pending);
        }
        let (sleep, preemptions) = match self.stack.last() {
            None => (Vec::new(), 0),
            Some(parent) => {
                let chosen = parent.chosen();
                let acc = parent.access_of(chosen);
                let mut sleep = Vec::new();
                if self.config.sleep_sets {
                    let earlier = parent.tried[..parent.tried.len() - 1]
                        .iter()
                        .map(|t| (*t, parent.access_of(*t)));
                    for (t, a) in parent.sleep.iter().copied().chain(earlier) {
                        if t != chosen && a.independent(acc) && d.pending.contains(&(t, a)) {
                            sleep.push((t, a));
                        }
                    }
                }
                (sleep, parent.preemptions + parent.cost(chosen))
            }
        };
        let mut node = Node {
            pending: d.pending.to_vec(),
            sleep,
            tried: Vec::new(),
            backtrack: self.dpor().then(Vec::new),
            clock: Vec::new(),
            last: d.last,
            preemptions,
        };
        let next = node.candidates(self.config.preemption_bound).next();
        match next {
            Some(t) => {
                node.tried.push(t);
                node.request(t);
                self.stack.push(node);
                if self.dpor() {
                    self.stamp(depth);
                    self.clocks_valid = depth + 1;
                }
                Some(t)
            }
            None => {
                self.pruned = true;
                None
            }
        }
    }

    /// Moves to the next unexplored branch. Returns false when done.
    fn backtrack(&mut self) -> bool {
        let bound = self.config.preemption_bound;
        while let Some(top) = self.stack.last_mut() {
            let next = top
                .candidates(bound)
                .find(|t| !top.tried.contains(t) && top.backtrack.as_ref().is_none_or(|b| b.contains(t)));
            if let Some(t) = next {
                top.tried.push(t);
                self.clocks_valid = self.clocks_valid.min(self.stack.len() - 1);
                return true;
            }
            self.stack.pop();
        }
        false
    }
}

/// Summary of a systematic exploration.
#[derive(Debug, Clone, Default)]
pub struct ExploreReport {
    /// Schedules that ran to completion and were checked.
    pub schedules: u64,
    /// Runs cut short by the sleep-set reduction.
    pub pruned: u64,
    /// The whole space was covered (no `max_schedules` cut-off, no violation).
    pub exhaustive: bool,
    /// First failing schedule and its message.
    pub violation: Option<(Vec<usize>, String)>,
}

/// Executes one schedule of the given tasks. Handed to scenarios by
/// [`Explorer::explore`].
pub type Exec<'e> = dyn FnMut(Vec<Task<'_>>) -> RunOutcome + 'e;

/// Depth-first enumeration of schedules.
pub struct Explorer {
    config: ExploreConfig,
}

impl Explorer {
    pub fn new(config: ExploreConfig) -> Explorer {
        Explorer { config }
    }

    /// Explores the schedules of a scenario. Each call of `scenario` must
    /// build fresh state, hand its tasks to the executor exactly once, and
    /// then check the final state, returning `Err` on a violation. The
    /// exploration stops at the first violation.
    pub fn explore<F>(&self, mut scenario: F) -> ExploreReport
    where
        F: FnMut(&mut Exec<'_>) -> Result<(), String>,
    {
        let state = Arc::new(Mutex::new(DfsState {
            stack: Vec::new(),
            depth: 0,
            clocks_valid: 0,
            threads: 0,
            config: self.config.clone(),
            diverged: None,
            pruned: false,
        }));
        let mut report = ExploreReport::default();
        loop {
            {
                let mut st = state.lock().unwrap_or_else(|e| e.into_inner());
                st.depth = 0;
                st.pruned = false;
            }
            let mut last: Option<(Vec<usize>, Option<String>, bool)> = None;
            let verdict = {
                let step_limit = self.config.step_limit;
                let state = Arc::clone(&state);
                let mut exec = |tasks: Vec<Task<'_>>| -> RunOutcome {
                    assert!(last.is_none(), "scenario ran its tasks twice");
                    let outcome =
                        run(Box::new(DfsStrategy(Arc::clone(&state))), tasks, step_limit);
                    let failure = if outcome.exhausted {
                        Some(format!("step limit {step_limit} exceeded (livelock?)"))
                    } else {
                        outcome.failure.clone()
                    };
                    last = Some((outcome.schedule.clone(), failure, outcome.aborted));
                    outcome
                };
                scenario(&mut exec)
            };
            let (schedule, failure, _aborted) = last.expect("scenario did not run its tasks");
            let mut st = state.lock().unwrap_or_else(|e| e.into_inner());
            let failure = st.diverged.take().or(failure);
            let problem = match failure {
                Some(f) => Some(f),
                None if st.pruned => None,
                None => verdict.err(),
            };
            if st.pruned {
                report.pruned += 1;
            } else {
                report.schedules += 1;
            }
            if let Some(msg) = problem {
                report.violation = Some((schedule, msg));
                return report;
            }
            let more = st.backtrack();
            if !more {
                report.exhaustive = true;
                return report;
            }
            if self.config.max_schedules.is_some_and(|m| report.schedules >= m) {
                return report;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shared::SharedWord;

    fn binomial(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
    }

    #[test]
    fn unreduced_count_matches_binomial() {
        for (n, m) in [(1u64, 1u64), (2, 3), (3, 3), (4, 2)] {
            let explorer = Explorer::new(ExploreConfig { sleep_sets: false, dpor: false, ..Default::default() });
            let report = explorer.explore(|exec| {
                let a = SharedWord::new(0);
                let b = SharedWord::new(0);
                exec(vec![
                    Box::new(|| (0..n).for_each(|i| a.store(i))),
                    Box::new(|| (0..m).for_each(|i| b.store(i))),
                ]);
                Ok(())
            });
            assert!(report.exhaustive);
            assert_eq!(report.schedules, binomial(n + m, n), "n={n} m={m}");
        }
    }

    #[test]
    fn sleep_sets_collapse_independent_threads() {
        let explorer = Explorer::new(ExploreConfig::default());
        let report = explorer.explore(|exec| {
            let a = SharedWord::new(0);
            let b = SharedWord::new(0);
            exec(vec![
                Box::new(|| (0..3).for_each(|i| a.store(i))),
                Box::new(|| (0..3).for_each(|i| b.store(i))),
            ]);
            Ok(())
        });
        assert!(report.exhaustive);
        assert_eq!(report.schedules, 1);
    }

    /// Each thread does `load a; store a; load b; cas b`; reports the final
    /// values of every explored schedule.
    fn outcomes(config: ExploreConfig, threads: usize) -> (ExploreReport, std::collections::BTreeSet<(u64, u64)>) {
        let mut seen = std::collections::BTreeSet::new();
        let report = Explorer::new(config).explore(|exec| {
            let a = SharedWord::new(0);
            let b = SharedWord::new(0);
            let c = SharedWord::new(0);
            let body = |i: u64| {
                let (a, b, c) = (&a, &b, &c);
                move || {
                    let v = a.load();
                    a.store(v * 3 + i);
                    c.load();
                    let w = b.load();
                    let _ = b.compare_exchange(w, w * 5 + i);
                }
            };
            exec((1..=threads as u64).map(|i| Box::new(body(i)) as Task<'_>).collect());
            seen.insert((a.load_quiescent(), b.load_quiescent()));
            Ok(())
        });
        (report, seen)
    }

    #[test]
    fn dpor_covers_every_trace_with_fewer_runs() {
        for threads in [2, 3] {
            let plain = outcomes(ExploreConfig { dpor: false, ..Default::default() }, threads);
            let reduced = outcomes(ExploreConfig::default(), threads);
            assert!(plain.0.exhaustive && reduced.0.exhaustive);
            assert_eq!(plain.1, reduced.1, "threads={threads}");
            assert_eq!(plain.0.schedules, reduced.0.schedules, "threads={threads}");
            assert!(reduced.0.pruned <= plain.0.pruned);
        }
    }

    #[test]
    fn finds_lost_update() {
        // load-then-store increments lose updates under some schedule.
        let explorer = Explorer::new(ExploreConfig::default());
        let report = explorer.explore(|exec| {
            let c = SharedWord::new(0);
            let inc = || {
                let v = c.load();
                c.store(v + 1);
            };
            exec(vec![Box::new(inc), Box::new(inc)]);
            let v = c.load_quiescent();
            if v == 2 { Ok(()) } else { Err(format!("counter = {v}")) }
        });
        let (schedule, msg) = report.violation.expect("lost update not found");
        assert_eq!(msg, "counter = 1");
        // replaying the reported schedule reproduces it
        let c = SharedWord::new(0);
        let inc = || {
            let v = c.load();
            c.store(v + 1);
        };
        run(Box::new(Replay::new(schedule)), vec![Box::new(inc), Box::new(inc)], 100);
        assert_eq!(c.load_quiescent(), 1);
    }

    #[test]
    fn cas_increments_never_lose_updates() {
        let explorer = Explorer::new(ExploreConfig { sleep_sets: false, dpor: false, ..Default::default() });
        let report = explorer.explore(|exec| {
            let c = SharedWord::new(0);
            let inc = || loop {
                let v = c.load();
                if c.compare_exchange(v, v + 1).is_ok() {
                    break;
                }
            };
            exec(vec![Box::new(inc), Box::new(inc)]);
            let v = c.load_quiescent();
            if v == 2 { Ok(()) } else { Err(format!("counter = {v}")) }
        });
        assert!(report.violation.is_none());
        assert!(report.exhaustive);
        assert!(report.schedules > 2);
    }

    #[test]
    fn preemption_bound_limits_schedules() {
        let count = |bound| {
            Explorer::new(ExploreConfig {
                sleep_sets: false,
                dpor: false,
                preemption_bound: Some(bound),
                ..Default::default()
            })
            .explore(|exec| {
                let a = SharedWord::new(0);
                let b = SharedWord::new(0);
                exec(vec![
                    Box::new(|| (0..3).for_each(|i| a.store(i))),
                    Box::new(|| (0..3).for_each(|i| b.store(i))),
                ]);
                Ok(())
            })
            .schedules
        };
        // zero preemptions: only the two serial orders
        assert_eq!(count(0), 2);
        assert!(count(1) > 2);
        assert!(count(1) < 20);
    }

    #[test]
    fn suspended_thread_stays_parked() {
        let c = SharedWord::new(0);
        let outcome = run(
            Box::new(Suspend::new(RunToCompletion, 0, Milestone::AfterFreeze)),
            vec![
                Box::new(|| {
                    c.store(1);
                    milestone(Milestone::AfterFreeze);
                    c.store(2);
                }),
                Box::new(|| {
                    for _ in 0..5 {
                        let v = c.load();
                        let _ = c.compare_exchange(v, v + 10);
                    }
                }),
            ],
            1000,
        );
        assert_eq!(outcome.completed, vec![false, true]);
        assert_eq!(c.load_quiescent(), 51);
    }
}
