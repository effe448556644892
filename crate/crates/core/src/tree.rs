//! The tree object: root anchoring, descent, reclamation, and the quiescent
//! structure checkers.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_epoch::{self as epoch, Guard};
use crossbeam_queue::SegQueue;
use thiserror::Error;

use crate::config::{ConfigError, TreeConfig};
use crate::keyspace::{check_key, KeyError, KeyWord, MAX_KEY};
use crate::node::{node, Descriptor, Node, NodePtr, Status, StatusView};
use crate::rebalance::{RebalanceRecord, Replacement};

/// How unlinked nodes are reclaimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReclaimMode {
    /// Epoch-based: freed once every operation that could still hold a
    /// reference has finished.
    #[default]
    Retire,
    /// Kept until the tree is dropped. Used by verification runs and the
    /// schedule explorer.
    Never,
}

impl std::str::FromStr for ReclaimMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retire" => Ok(ReclaimMode::Retire),
            "never" | "never-free" => Ok(ReclaimMode::Never),
            other => Err(format!("unknown reclamation mode {other:?} (retire | never-free)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeOptions {
    pub reclaim: ReclaimMode,
    /// Keep a [`RebalanceRecord`] for every committed rebalance.
    pub instrument: bool,
    /// Panic after this many restarts within one operation. Harness-only
    /// livelock detector.
    pub restart_limit: Option<u64>,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { reclaim: ReclaimMode::Retire, instrument: false, restart_limit: None }
    }
}

impl TreeOptions {
    /// Settings for verification runs: never-free, instrumented, livelock
    /// detection at 10^6 restarts.
    pub fn verification() -> TreeOptions {
        TreeOptions { reclaim: ReclaimMode::Never, instrument: true, restart_limit: Some(1_000_000) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("invalid layout: {0}")]
    Layout(String),
}

/// Descent met a frozen or pending node and helped; start over from the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("restart")]
pub struct Restart;

/// Rebalance counters, readable at any time.
#[derive(Debug, Default)]
pub struct Stats {
    pub(crate) started: AtomicU64,
    pub(crate) completed: AtomicU64,
    pub(crate) swaps: AtomicU64,
    pub(crate) helper_completions: AtomicU64,
    pub(crate) help_calls: AtomicU64,
    pub(crate) restarts: AtomicU64,
    pub(crate) ops: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    /// Rebalances advertised on a grandparent (begin succeeded).
    pub started: u64,
    /// Rebalances whose status was cleared.
    pub completed: u64,
    /// Parent-link replacements.
    pub swaps: u64,
    /// Completions performed by a thread other than the one that began.
    pub helper_completions: u64,
    /// Times an operation stopped to help a pending rebalance.
    pub help_calls: u64,
    /// Descents restarted from the root.
    pub restarts: u64,
    /// Completed public operations.
    pub ops: u64,
}

impl Stats {
    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        StatsSnapshot {
            started: g(&self.started),
            completed: g(&self.completed),
            swaps: g(&self.swaps),
            helper_completions: g(&self.helper_completions),
            help_calls: g(&self.help_calls),
            restarts: g(&self.restarts),
            ops: g(&self.ops),
        }
    }
}

pub(crate) enum Garbage {
    Node(NodePtr),
    Descriptor(*const Descriptor),
    Replacement(*const Replacement),
}

// SAFETY: garbage is only dropped once, by whoever pops it.
unsafe impl Send for Garbage {}

impl Garbage {
    /// # Safety
    /// The pointee must be unreachable by every thread.
    unsafe fn free(self) {
        match self {
            Garbage::Node(p) => drop(Box::from_raw(p as *mut Node)),
            Garbage::Descriptor(p) => drop(Box::from_raw(p as *mut Descriptor)),
            Garbage::Replacement(p) => drop(Box::from_raw(p as *mut Replacement)),
        }
    }
}

/// Path from the root to a leaf, with the key bounds accumulated from the
/// separators along the way: every key the reached leaf may hold lies in
/// `(lower; upper]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPath {
    pub(crate) nodes: Vec<NodePtr>,
    indices: Vec<usize>,
    lower: u64,
    upper: u64,
}

impl AccessPath {
    /// Child index taken at each internal node, root first.
    pub fn child_indices(&self) -> &[usize] {
        &self.indices
    }

    /// Exclusive lower and inclusive upper bound of the leaf's range.
    pub fn bounds(&self) -> (u64, u64) {
        (self.lower, self.upper)
    }

    /// Number of links followed from the root to the leaf.
    pub fn depth(&self) -> usize {
        self.indices.len()
    }

    pub(crate) fn leaf(&self) -> NodePtr {
        *self.nodes.last().expect("path ends in a leaf")
    }

    pub(crate) fn parent(&self) -> NodePtr {
        self.nodes[self.nodes.len() - 2]
    }
}

/// Shape description used to build a tree directly, for tests and
/// scripted scenarios.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    Leaf(Vec<u64>),
    Internal(Vec<u64>, Vec<Layout>),
}

/// Structural invariant violations found by [`Tree::check_structure`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("root has {0} children, expected exactly one")]
    RootDegree(usize),
    #[error("node {node:#x} has {parents} parents")]
    MultipleParents { node: u64, parents: usize },
    #[error("node {node:#x}: {children} children but {separators} separators")]
    Degree { node: u64, children: usize, separators: usize },
    #[error("node {node:#x}: separators not strictly increasing ({separators:?})")]
    SeparatorOrder { node: u64, separators: Vec<u64> },
    #[error("node {node:#x}: separator {separator} outside ({lower}; {upper}]")]
    SeparatorRange { node: u64, separator: u64, lower: u64, upper: u64 },
    #[error("leaf {node:#x}: key {key} outside its range ({lower}; {upper}]")]
    LeafRange { node: u64, key: u64, lower: u64, upper: u64 },
    #[error("key {key} stored more than once")]
    DuplicateKey { key: u64 },
    #[error("node {node:#x} is frozen but reachable")]
    FrozenReachable { node: u64 },
    #[error("node {node:#x} has a pending rebalance ({status:?})")]
    PendingRebalance { node: u64, status: StatusView },
    #[error("internal node {node:#x} has no children")]
    EmptyInternal { node: u64 },
}

/// A lock-free k-ary leaf-oriented search tree over keys in `(0; 2^63)`.
pub struct Tree {
    pub(crate) root: NodePtr,
    pub(crate) config: TreeConfig,
    pub(crate) options: TreeOptions,
    graveyard: SegQueue<Garbage>,
    pub(crate) stats: Stats,
    pub(crate) records: SegQueue<RebalanceRecord>,
    pub(crate) next_descriptor: AtomicU64,
}

// SAFETY: all shared state is accessed through atomics; raw node pointers are
// protected by the reclamation scheme.
unsafe impl Send for Tree {}
unsafe impl Sync for Tree {}

thread_local! {
    static THREAD_TOKEN: u64 = {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        NEXT.fetch_add(1, Ordering::Relaxed)
    };
}

pub(crate) fn thread_token() -> u64 {
    THREAD_TOKEN.with(|t| *t)
}

impl Tree {
    /// An empty tree: the root's single child is an internal node whose
    /// single child is an empty leaf.
    pub fn new(config: TreeConfig) -> Result<Tree, TreeError> {
        Tree::with_options(config, TreeOptions::default())
    }

    pub fn with_options(config: TreeConfig, options: TreeOptions) -> Result<Tree, TreeError> {
        Tree::from_layout(config, options, &Layout::Internal(vec![], vec![Layout::Leaf(vec![])]))
    }

    /// Builds a tree whose root child has the given shape. Leaves are
    /// filled in the listed order; the layout must satisfy the structural
    /// invariants.
    pub fn from_layout(config: TreeConfig, options: TreeOptions, layout: &Layout) -> Result<Tree, TreeError> {
        config.validate()?;
        if matches!(layout, Layout::Leaf(_)) {
            return Err(TreeError::Layout("the root's child must be internal".into()));
        }
        let child = build_layout(&config, layout)?;
        let root = Node::new_internal(vec![], &[child]);
        let tree = Tree {
            root,
            config,
            options,
            graveyard: SegQueue::new(),
            stats: Stats::default(),
            records: SegQueue::new(),
            next_descriptor: AtomicU64::new(1),
        };
        Ok(tree)
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn options(&self) -> &TreeOptions {
        &self.options
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Drains the recorded rebalances (instrumented trees only).
    pub fn take_records(&self) -> Vec<RebalanceRecord> {
        std::iter::from_fn(|| self.records.pop()).collect()
    }

    pub(crate) fn pin(&self) -> Guard {
        epoch::pin()
    }

    pub(crate) fn root<'g>(&self, guard: &'g Guard) -> &'g Node {
        // SAFETY: the root is never reclaimed before the tree.
        unsafe { node(self.root as u64, guard) }
    }

    /// Hands an unlinked object to the reclamation scheme.
    pub(crate) fn retire(&self, garbage: Garbage, guard: &Guard) {
        match self.options.reclaim {
            ReclaimMode::Never => self.graveyard.push(garbage),
            ReclaimMode::Retire => {
                // SAFETY: unlinked before retirement; epoch defers the free
                // until every pinned thread has moved on.
                unsafe { guard.defer_unchecked(move || garbage.free()) }
            }
        }
    }

    /// Frees an object that was never published.
    pub(crate) fn discard(&self, garbage: Garbage) {
        match self.options.reclaim {
            // keep addresses unique for the schedule explorer's cell ids
            ReclaimMode::Never => self.graveyard.push(garbage),
            // SAFETY: never shared with another thread.
            ReclaimMode::Retire => unsafe { garbage.free() },
        }
    }

    pub(crate) fn count_restart(&self, restarts: &mut u64) {
        Stats::bump(&self.stats.restarts);
        *restarts += 1;
        if let Some(limit) = self.options.restart_limit {
            if *restarts >= limit {
                panic!("operation restarted {restarts} times: livelock");
            }
        }
    }

    /// Smallest child index for `key` in the given internal node's
    /// separators.
    pub fn node_search(separators: &[u64], key: u64) -> usize {
        crate::node::node_search(separators, key)
    }

    /// Descends to the leaf responsible for `key`. A pending rebalance met
    /// on the way is completed first, after which the caller must restart.
    pub(crate) fn descend_in(&self, key: u64, guard: &Guard) -> Result<AccessPath, Restart> {
        let mut cur = self.root;
        let mut path = AccessPath { nodes: Vec::new(), indices: Vec::new(), lower: 0, upper: MAX_KEY };
        loop {
            path.nodes.push(cur);
            // SAFETY: reached through links while pinned.
            let n = unsafe { node(cur as u64, guard) };
            match n {
                Node::Leaf(_) => return Ok(path),
                Node::Internal(i) => {
                    // SAFETY: loaded from a protected node.
                    match unsafe { Status::decode(i.status.load(), guard) } {
                        Status::None { .. } => {}
                        Status::Step1(d) | Status::Step2(d) | Status::Frozen(d) => {
                            Stats::bump(&self.stats.help_calls);
                            self.help(d, guard);
                            return Err(Restart);
                        }
                    }
                    let j = i.child_index(key);
                    if j > 0 {
                        path.lower = i.separators[j - 1];
                    }
                    if j < i.separators.len() {
                        path.upper = i.separators[j];
                    }
                    path.indices.push(j);
                    cur = i.children[j].load() as NodePtr;
                }
            }
        }
    }

    /// Descends to the leaf whose range holds `key`, helping and restarting
    /// as needed.
    pub fn descend(&self, key: u64) -> Result<AccessPath, KeyError> {
        check_key(key)?;
        let guard = self.pin();
        let mut restarts = 0;
        loop {
            match self.descend_in(key, &guard) {
                Ok(path) => return Ok(path),
                Err(Restart) => self.count_restart(&mut restarts),
            }
        }
    }

    /// Single descent attempt (no retry).
    pub fn try_descend(&self, key: u64) -> Result<AccessPath, Restart> {
        let guard = self.pin();
        self.descend_in(key, &guard)
    }

    // -----------------------------------------------------------------------
    // Quiescent inspection. Callers guarantee no operation is in flight.

    fn walk<F: FnMut(NodePtr, &Node, u64, u64, usize)>(&self, mut visit: F) {
        let mut stack = vec![(self.root, 0u64, MAX_KEY, 0usize)];
        while let Some((ptr, lower, upper, depth)) = stack.pop() {
            // SAFETY: quiescent: every reachable node is live.
            let n = unsafe { &*ptr };
            visit(ptr, n, lower, upper, depth);
            if let Node::Internal(i) = n {
                for (j, c) in i.children.iter().enumerate().rev() {
                    let lo = if j > 0 { i.separators.get(j - 1).copied().unwrap_or(lower) } else { lower };
                    let hi = i.separators.get(j).copied().unwrap_or(upper);
                    stack.push((c.load_quiescent() as NodePtr, lo, hi, depth + 1));
                }
            }
        }
    }

    /// The set of keys in the tree, sorted. Reports a key held twice as a
    /// violation.
    pub fn snapshot(&self) -> Result<Vec<u64>, Violation> {
        let mut keys = Vec::new();
        self.walk(|_, n, _, _, _| {
            if let Node::Leaf(l) = n {
                keys.extend(l.payloads_quiescent());
            }
        });
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Violation::DuplicateKey { key: w[0] });
        }
        Ok(keys)
    }

    /// Number of links from the root to the leftmost leaf.
    pub fn height(&self) -> usize {
        let mut depth = 0;
        let mut cur = self.root;
        // SAFETY: quiescent.
        while let Node::Internal(i) = unsafe { &*cur } {
            cur = i.children[0].load_quiescent() as NodePtr;
            depth += 1;
        }
        depth
    }

    /// Sizes of all reachable leaves, left to right.
    pub fn leaf_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.walk(|_, n, _, _, _| {
            if let Node::Leaf(l) = n {
                sizes.push(l.payloads_quiescent().len());
            }
        });
        sizes
    }

    /// Status of the root (the grandparent of every root-level rebalance).
    pub fn root_status(&self) -> StatusView {
        let guard = self.pin();
        let Node::Internal(r) = self.root(&guard) else { unreachable!() };
        // SAFETY: root status.
        unsafe { Status::decode(r.status.load_quiescent(), &guard) }.view()
    }

    /// Status of the internal node at `depth` on the path to `key`
    /// (0 = root). Quiescent.
    pub fn status_on_path(&self, key: u64, depth: usize) -> Option<StatusView> {
        let guard = self.pin();
        let mut cur = self.root;
        for _ in 0..depth {
            // SAFETY: quiescent.
            let i = unsafe { &*cur }.as_internal()?;
            cur = i.children[i.child_index(key)].load_quiescent() as NodePtr;
        }
        // SAFETY: quiescent.
        let i = unsafe { &*cur }.as_internal()?;
        Some(unsafe { Status::decode(i.status.load_quiescent(), &guard) }.view())
    }

    /// Layout of the root's child, for inspection and tests.
    pub fn layout(&self) -> Layout {
        fn go(ptr: NodePtr) -> Layout {
            // SAFETY: quiescent.
            match unsafe { &*ptr } {
                Node::Leaf(l) => {
                    let mut k = l.payloads_quiescent();
                    k.sort_unstable();
                    Layout::Leaf(k)
                }
                Node::Internal(i) => Layout::Internal(
                    i.separators.to_vec(),
                    i.children.iter().map(|c| go(c.load_quiescent() as NodePtr)).collect(),
                ),
            }
        }
        // SAFETY: quiescent.
        let r = unsafe { &*self.root }.as_internal().expect("root is internal");
        go(r.children[0].load_quiescent() as NodePtr)
    }

    /// Checks the leaf-oriented search tree invariants: the root has one
    /// child, every other reachable node has exactly one parent, separators
    /// are strictly increasing within their node's range, every leaf key
    /// lies in its path-derived range, no key is stored twice, and no
    /// reachable node is frozen or has a pending rebalance.
    pub fn check_structure(&self) -> Vec<Violation> {
        let guard = self.pin();
        let mut violations = Vec::new();
        let mut parents: HashMap<NodePtr, usize> = HashMap::new();
        let mut seen_keys = BTreeSet::new();
        self.walk(|ptr, n, lower, upper, depth| {
            let id = ptr as u64;
            *parents.entry(ptr).or_default() += 1;
            match n {
                Node::Internal(i) => {
                    if depth == 0 && i.children.len() != 1 {
                        violations.push(Violation::RootDegree(i.children.len()));
                    }
                    if i.children.is_empty() {
                        violations.push(Violation::EmptyInternal { node: id });
                    }
                    if i.children.len() != i.separators.len() + 1 {
                        violations.push(Violation::Degree {
                            node: id,
                            children: i.children.len(),
                            separators: i.separators.len(),
                        });
                    }
                    if i.separators.windows(2).any(|w| w[0] >= w[1]) {
                        violations.push(Violation::SeparatorOrder { node: id, separators: i.separators.to_vec() });
                    }
                    for &s in i.separators.iter() {
                        if s <= lower || s > upper {
                            violations.push(Violation::SeparatorRange { node: id, separator: s, lower, upper });
                        }
                    }
                    // SAFETY: quiescent.
                    match unsafe { Status::decode(i.status.load_quiescent(), &guard) } {
                        Status::None { .. } => {}
                        Status::Frozen(_) => violations.push(Violation::FrozenReachable { node: id }),
                        s => violations.push(Violation::PendingRebalance { node: id, status: s.view() }),
                    }
                }
                Node::Leaf(l) => {
                    let mut frozen = false;
                    for slot in l.slots.iter() {
                        let w = KeyWord::from_bits(slot.load_quiescent());
                        frozen |= w.is_read_only();
                        let key = w.payload();
                        if key == 0 {
                            continue;
                        }
                        if key <= lower || key > upper {
                            violations.push(Violation::LeafRange { node: id, key, lower, upper });
                        }
                        if !seen_keys.insert(key) {
                            violations.push(Violation::DuplicateKey { key });
                        }
                    }
                    if frozen {
                        violations.push(Violation::FrozenReachable { node: id });
                    }
                }
            }
        });
        for (ptr, count) in parents {
            if count != 1 {
                violations.push(Violation::MultipleParents { node: ptr as u64, parents: count });
            }
        }
        violations
    }
}

fn build_layout(config: &TreeConfig, layout: &Layout) -> Result<NodePtr, TreeError> {
    match layout {
        Layout::Leaf(keys) => {
            if keys.len() > config.leaf_capacity {
                return Err(TreeError::Layout(format!("leaf with {} keys exceeds D", keys.len())));
            }
            for k in keys {
                check_key(*k)?;
            }
            Ok(Node::new_leaf(config.leaf_capacity, keys))
        }
        Layout::Internal(seps, children) => {
            if children.is_empty() || children.len() != seps.len() + 1 || children.len() > config.order {
                return Err(TreeError::Layout(format!(
                    "internal node with {} separators and {} children",
                    seps.len(),
                    children.len()
                )));
            }
            let kids = children.iter().map(|c| build_layout(config, c)).collect::<Result<Vec<_>, _>>()?;
            Ok(Node::new_internal(seps.clone(), &kids))
        }
    }
}

impl Drop for Tree {
    fn drop(&mut self) {
        let mut reachable = Vec::new();
        self.walk(|ptr, _, _, _, _| reachable.push(ptr));
        for ptr in reachable {
            // SAFETY: exclusive access; each reachable node has one parent.
            unsafe { Garbage::Node(ptr).free() };
        }
        while let Some(g) = self.graveyard.pop() {
            // SAFETY: unlinked and never freed before.
            unsafe { g.free() };
        }
    }
}

impl std::fmt::Debug for Tree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tree").field("config", &self.config).field("options", &self.options).finish()
    }
}
