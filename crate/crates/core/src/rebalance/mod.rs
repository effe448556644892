//! The rebalance protocol.
//!
//! A rebalance is advertised on the grandparent's status word (`begin`),
//! after which any thread may drive it: freeze the parent and the involved
//! children, plan, publish one replacement, move the status to STEP2, swap
//! the grandparent's link to the new parent, and clear the status with the
//! sequence bumped. Every step is a CAS that only one thread can win.

pub mod plan;

use crossbeam_epoch::Guard;

use crate::keyspace::KeyWord;
use crate::node::{node, Descriptor, Internal, Leaf, Node, NodePtr, Status};
use crate::shared::SharedWord;
use crate::sim::{self, Milestone};
use crate::tree::{thread_token, AccessPath, Garbage, Stats, Tree};

pub use plan::{Action, ChildId, InternalSnapshot, NewChild, NewNode, Plan, PlanError, Snapshot};

/// What one committed rebalance did, recorded by instrumented trees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RebalanceRecord {
    pub descriptor: u64,
    pub action: Action,
    /// Sizes of the leaves the rebalance created.
    pub leaf_sizes: Vec<usize>,
    /// The new parent has a single child (only possible for the last leaf
    /// of a nearly empty subtree).
    pub sole_child: bool,
    /// Live keys of the frozen involved leaves, sorted.
    pub keys_before: Vec<u64>,
    /// Keys of the created leaves, sorted.
    pub keys_after: Vec<u64>,
    /// Subtrees below the replaced nodes that were kept, before and after.
    pub subtrees_before: Vec<u64>,
    pub subtrees_after: Vec<u64>,
}

impl RebalanceRecord {
    /// Keys and kept subtrees are identical before and after.
    pub fn preserves_keys(&self) -> bool {
        self.keys_before == self.keys_after && self.subtrees_before == self.subtrees_after
    }
}

/// The published outcome of planning: a new parent ready to be linked.
pub(crate) struct Replacement {
    pub(crate) new_parent: NodePtr,
    pub(crate) link_index: usize,
    pub(crate) created: Vec<NodePtr>,
    pub(crate) retired: Vec<NodePtr>,
    pub(crate) record: Option<RebalanceRecord>,
}

/// Result of trying to advertise a rebalance.
pub(crate) enum Begin<'g> {
    Claimed(&'g Descriptor),
    /// Another rebalance is pending here (or the node is frozen): help it.
    Busy(&'g Descriptor),
    /// The parent is no longer linked under the grandparent.
    Stale,
}

/// The rebalance being prepared has already moved past this step.
struct Superseded;

impl Tree {
    pub(crate) fn begin<'g>(&self, gp: NodePtr, parent: NodePtr, key: u64, guard: &'g Guard) -> Begin<'g> {
        // SAFETY: gp came from a path read under `guard`.
        let gp_node = unsafe { node(gp as u64, guard) }.as_internal().expect("grandparent is internal");
        let word = gp_node.status.load();
        // SAFETY: loaded from a protected node.
        let seq = match unsafe { Status::decode(word, guard) } {
            Status::None { seq } => seq,
            Status::Step1(d) | Status::Step2(d) | Status::Frozen(d) => return Begin::Busy(d),
        };
        if gp_node.children[gp_node.child_index(key)].load() != parent as u64 {
            return Begin::Stale;
        }
        let desc = Box::into_raw(Box::new(Descriptor {
            id: self.next_descriptor.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            gp,
            parent,
            parent_key: key,
            unbalanced_key: key,
            seq,
            gp_is_root: gp == self.root,
            initiator: thread_token(),
            replacement: SharedWord::new(0),
        }));
        match gp_node.status.compare_exchange(word, Status::step1(desc)) {
            Ok(_) => {
                Stats::bump(&self.stats.started);
                // SAFETY: published; reclaimed only after clear.
                Begin::Claimed(unsafe { &*desc })
            }
            Err(now) => {
                self.discard(Garbage::Descriptor(desc));
                // SAFETY: loaded from a protected node.
                match unsafe { Status::decode(now, guard) } {
                    Status::None { .. } => Begin::Stale,
                    Status::Step1(d) | Status::Step2(d) | Status::Frozen(d) => Begin::Busy(d),
                }
            }
        }
    }

    /// Starts (or joins) a rebalance of the child of `parent` that `key`
    /// selects, with `gp` as grandparent, and drives it to completion.
    pub(crate) fn rebalance(&self, gp: NodePtr, parent: NodePtr, key: u64, guard: &Guard) {
        match self.begin(gp, parent, key, guard) {
            Begin::Claimed(d) => self.help(d, guard),
            Begin::Busy(d) => {
                Stats::bump(&self.stats.help_calls);
                self.help(d, guard)
            }
            Begin::Stale => {}
        }
    }

    /// Completes the rebalance described by `desc`, from whatever step it
    /// is in. Returns once its status has been cleared.
    pub(crate) fn help(&self, desc: &Descriptor, guard: &Guard) {
        // SAFETY: descriptors keep their grandparent alive: it is retired no
        // earlier than the descriptor's own clear.
        let gp = unsafe { node(desc.gp as u64, guard) }.as_internal().expect("grandparent is internal");
        loop {
            let word = gp.status.load();
            if word == Status::step1(desc) {
                if self.prepare(desc, gp, guard).is_ok()
                    && gp.status.compare_exchange(Status::step1(desc), Status::step2(desc)).is_ok()
                {
                    sim::milestone(Milestone::AfterStep2);
                }
            } else if word == Status::step2(desc) {
                self.commit(desc, gp, guard);
                return;
            } else {
                return;
            }
        }
    }

    /// Drives a rebalance up to its STEP2 transition and stops there.
    pub(crate) fn advance_to_step2(&self, desc: &Descriptor, guard: &Guard) {
        // SAFETY: as in `help`.
        let gp = unsafe { node(desc.gp as u64, guard) }.as_internal().expect("grandparent is internal");
        if gp.status.load() == Status::step1(desc) && self.prepare(desc, gp, guard).is_ok() {
            let _ = gp.status.compare_exchange(Status::step1(desc), Status::step2(desc));
        }
    }

    fn commit(&self, desc: &Descriptor, gp: &Internal, guard: &Guard) {
        let rep = desc.replacement(guard).expect("replacement published before STEP2");
        if gp.children[rep.link_index].compare_exchange(desc.parent as u64, rep.new_parent as u64).is_ok() {
            Stats::bump(&self.stats.swaps);
            if let (Some(record), true) = (&rep.record, self.options.instrument) {
                self.records.push(record.clone());
            }
            for &n in &rep.retired {
                self.retire(Garbage::Node(n), guard);
            }
            sim::milestone(Milestone::AfterSwap);
        }
        if gp.status.compare_exchange(Status::step2(desc), Status::none(desc.seq + 1)).is_ok() {
            Stats::bump(&self.stats.completed);
            if thread_token() != desc.initiator {
                Stats::bump(&self.stats.helper_completions);
            }
            self.retire(Garbage::Replacement(rep as *const Replacement), guard);
            self.retire(Garbage::Descriptor(desc as *const Descriptor), guard);
        }
    }

    /// Freezes, plans and publishes a replacement (first publisher wins).
    fn prepare(&self, desc: &Descriptor, gp: &Internal, guard: &Guard) -> Result<(), Superseded> {
        let link_index = gp.child_index(desc.parent_key);
        if gp.children[link_index].load() != desc.parent as u64 {
            return Err(Superseded);
        }
        // SAFETY: still linked under gp, which is protected.
        let parent = unsafe { node(desc.parent as u64, guard) }.as_internal().expect("parent is internal");
        self.freeze_internal(parent, desc, guard)?;
        let snapshot = InternalSnapshot {
            separators: parent.separators.to_vec(),
            children: parent.children.iter().map(|c| c.load()).collect(),
        };
        let planned = plan::plan(&self.config, desc.gp_is_root, &snapshot, desc.unbalanced_key, |i| {
            self.freeze_child(snapshot.children[i], desc, guard)
        });
        let plan = match planned {
            Ok(p) | Err(PlanError::NoLongerUnbalanced(p)) => p,
            Err(PlanError::Freeze(e)) => return Err(e),
        };
        sim::milestone(Milestone::AfterFreeze);
        if desc.replacement.load() != 0 {
            return Ok(());
        }
        let candidate = Box::into_raw(Box::new(self.materialize(&plan, &snapshot, link_index, desc)));
        if desc.replacement.compare_exchange(0, candidate as u64).is_err() {
            // SAFETY: never published.
            let lost = unsafe { Box::from_raw(candidate) };
            for n in lost.created.iter().chain(std::iter::once(&lost.new_parent)) {
                self.discard(Garbage::Node(*n));
            }
            self.discard(Garbage::Replacement(Box::into_raw(lost)));
        }
        Ok(())
    }

    fn materialize(&self, plan: &Plan, parent: &InternalSnapshot, link_index: usize, desc: &Descriptor) -> Replacement {
        let build = |n: &NewNode, created: &[NodePtr]| match n {
            NewNode::Leaf(keys) => Node::new_leaf(self.config.leaf_capacity, keys),
            NewNode::Internal { separators, children } => {
                let kids: Vec<NodePtr> = children
                    .iter()
                    .map(|c| match c {
                        NewChild::Existing(id) => *id as NodePtr,
                        NewChild::Created(i) => created[*i],
                    })
                    .collect();
                Node::new_internal(separators.clone(), &kids)
            }
        };
        let created: Vec<NodePtr> = plan.created.iter().map(|n| build(n, &[])).collect();
        let new_parent = build(&plan.new_parent, &created);
        let involved: Vec<NodePtr> = plan.involved.iter().map(|&i| parent.children[i] as NodePtr).collect();
        let mut retired = vec![desc.parent];
        retired.extend(&involved);
        let record = self.options.instrument.then(|| record(desc, plan, parent, &involved));
        Replacement { new_parent, link_index, created, retired, record }
    }

    /// Freezes an internal node for `desc`, helping whatever rebalance is
    /// pending on it first.
    fn freeze_internal(&self, n: &Internal, desc: &Descriptor, guard: &Guard) -> Result<(), Superseded> {
        loop {
            let word = n.status.load();
            // SAFETY: loaded from a protected node.
            match unsafe { Status::decode(word, guard) } {
                Status::None { .. } => {
                    if n.status.compare_exchange(word, Status::frozen(desc)).is_ok() {
                        return Ok(());
                    }
                }
                Status::Frozen(d) => {
                    return if std::ptr::eq(d, desc) { Ok(()) } else { Err(Superseded) };
                }
                Status::Step1(d) | Status::Step2(d) => {
                    Stats::bump(&self.stats.help_calls);
                    self.help(d, guard);
                }
            }
        }
    }

    fn freeze_child(&self, ptr: ChildId, desc: &Descriptor, guard: &Guard) -> Result<Snapshot, Superseded> {
        // SAFETY: read from the frozen parent, which is protected.
        match unsafe { node(ptr, guard) } {
            Node::Leaf(l) => Ok(Snapshot::Leaf(freeze_leaf(l))),
            Node::Internal(i) => {
                self.freeze_internal(i, desc, guard)?;
                Ok(Snapshot::Internal(InternalSnapshot {
                    separators: i.separators.to_vec(),
                    children: i.children.iter().map(|c| c.load()).collect(),
                }))
            }
        }
    }

    // -----------------------------------------------------------------------
    // Triggers

    /// The leaf at the end of `path` has no free slot. Splits it, or first
    /// the lowest full ancestor whose own parent has room (growing the tree
    /// at the root).
    pub(crate) fn fix_overflow(&self, path: &AccessPath, key: u64, guard: &Guard) {
        let mut p = path.nodes.len() - 2;
        while p > 1 {
            // SAFETY: path nodes were read under `guard`.
            let parent = unsafe { node(path.nodes[p] as u64, guard) }.as_internal().expect("internal");
            if parent.degree() < self.config.order {
                break;
            }
            p -= 1;
        }
        self.rebalance(path.nodes[p - 1], path.nodes[p], key, guard);
    }

    /// The leaf at the end of `path` holds fewer than S keys.
    pub(crate) fn fix_underflow(&self, path: &AccessPath, key: u64, guard: &Guard) {
        // SAFETY: path nodes were read under `guard`.
        let parent = unsafe { node(path.parent() as u64, guard) }.as_internal().expect("internal");
        if parent.degree() > 1 {
            let p = path.nodes.len() - 2;
            self.rebalance(path.nodes[p - 1], path.nodes[p], key, guard);
        }
    }

    /// Repairs internal nodes on the path to `key` left too small by leaf
    /// merges: underfull internal nodes merge with a sibling, and a root
    /// child with a single internal child collapses. Bounded number of
    /// passes.
    pub(crate) fn tidy_path(&self, key: u64, guard: &Guard) {
        for _ in 0..8 {
            let Ok(path) = self.descend_in(key, guard) else { continue };
            let Some((gp, parent)) = self.internal_fix_target(&path, guard) else { return };
            self.rebalance(gp, parent, key, guard);
        }
    }

    /// Deepest internal imbalance on `path`, as a (grandparent, parent) pair.
    fn internal_fix_target(&self, path: &AccessPath, guard: &Guard) -> Option<(NodePtr, NodePtr)> {
        let internal = |p: usize| {
            // SAFETY: path nodes were read under `guard`.
            unsafe { node(path.nodes[p] as u64, guard) }.as_internal()
        };
        let min = self.config.internal_min_children();
        for p in (2..path.nodes.len() - 1).rev() {
            let n = internal(p).expect("internal");
            if n.degree() < min && internal(p - 1).expect("internal").degree() > 1 {
                return Some((path.nodes[p - 2], path.nodes[p - 1]));
            }
        }
        let ic = internal(1).expect("root child is internal");
        // SAFETY: child link of a protected node.
        let only = (ic.degree() == 1).then(|| unsafe { node(ic.children[0].load(), guard) });
        if matches!(only, Some(Node::Internal(_))) {
            return Some((path.nodes[0], path.nodes[1]));
        }
        None
    }

    /// Root housekeeping: grows the tree if the root's child is full and
    /// collapses it if that child has a single internal child. Returns true
    /// if a rebalance ran.
    pub fn maybe_rebalance_root_path(&self) -> bool {
        let guard = self.pin();
        let root = self.root(&guard).as_internal().expect("root is internal");
        let ic_ptr = root.children[0].load() as NodePtr;
        // SAFETY: linked under the root.
        let ic = unsafe { node(ic_ptr as u64, &guard) }.as_internal().expect("root child is internal");
        // SAFETY: child link of a protected node.
        let collapse = ic.degree() == 1 && !unsafe { node(ic.children[0].load(), &guard) }.is_leaf();
        if ic.degree() >= self.config.order || collapse {
            let before = self.stats.completed.load(std::sync::atomic::Ordering::Relaxed);
            self.rebalance(self.root, ic_ptr, 1, &guard);
            return self.stats.completed.load(std::sync::atomic::Ordering::Relaxed) > before;
        }
        false
    }
}

/// Sets the read-only bit of every slot. Returns the live keys, sorted and
/// deduplicated (an insert race can leave one key in two slots).
pub(crate) fn freeze_leaf(leaf: &Leaf) -> Vec<u64> {
    let mut keys = Vec::with_capacity(leaf.slots.len());
    for slot in leaf.slots.iter() {
        let mut cur = slot.load();
        while !KeyWord::from_bits(cur).is_read_only() {
            match slot.compare_exchange(cur, KeyWord::from_bits(cur).set_readonly().bits()) {
                Ok(_) => break,
                Err(now) => cur = now,
            }
        }
        let payload = KeyWord::from_bits(cur).payload();
        if payload != 0 {
            keys.push(payload);
        }
    }
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn record(desc: &Descriptor, plan: &Plan, parent: &InternalSnapshot, involved: &[NodePtr]) -> RebalanceRecord {
    let mut keys_before = Vec::new();
    let mut subtrees_before: Vec<u64> = parent
        .children
        .iter()
        .enumerate()
        .filter(|(i, _)| !plan.involved.contains(i))
        .map(|(_, c)| *c)
        .collect();
    for &n in involved {
        // SAFETY: involved nodes are frozen and not yet retired.
        match unsafe { &*n } {
            Node::Leaf(l) => {
                keys_before.extend(l.payloads_quiescent());
            }
            Node::Internal(i) => subtrees_before.extend(i.children.iter().map(|c| c.load_quiescent())),
        }
    }
    keys_before.sort_unstable();
    keys_before.dedup();
    let mut keys_after = Vec::new();
    let mut subtrees_after = Vec::new();
    for n in plan.created.iter().chain(std::iter::once(&plan.new_parent)) {
        match n {
            NewNode::Leaf(k) => keys_after.extend(k),
            NewNode::Internal { children, .. } => subtrees_after.extend(children.iter().filter_map(|c| match c {
                NewChild::Existing(id) => Some(*id),
                NewChild::Created(_) => None,
            })),
        }
    }
    keys_after.sort_unstable();
    subtrees_before.sort_unstable();
    subtrees_after.sort_unstable();
    RebalanceRecord {
        descriptor: desc.id,
        action: plan.action,
        leaf_sizes: plan.leaf_sizes(),
        sole_child: plan.sole_child(),
        keys_before,
        keys_after,
        subtrees_before,
        subtrees_after,
    }
}
