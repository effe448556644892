//! Deciding how to rebalance, as a pure function of frozen node contents.
//!
//! The planner never reads shared memory itself. It asks a `freeze` callback
//! for each child it wants to involve, one at a time, and every later
//! decision depends only on what earlier (already frozen, hence immutable)
//! snapshots contained. Any two helpers replaying the same rebalance
//! therefore freeze the same nodes and produce identical plans.

use thiserror::Error;

use crate::config::TreeConfig;
use crate::node::node_search;

/// Opaque identity of an existing child (its address in a live tree).
pub type ChildId = u64;

/// Frozen contents of a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Snapshot {
    /// Live keys, sorted and deduplicated.
    Leaf(Vec<u64>),
    Internal(InternalSnapshot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalSnapshot {
    pub separators: Vec<u64>,
    pub children: Vec<ChildId>,
}

impl InternalSnapshot {
    pub fn degree(&self) -> usize {
        self.children.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// A full child becomes two.
    Split,
    /// Two or more adjacent children become one.
    Merge,
    /// Two or more adjacent children become two of even size.
    Redistribute,
    /// The root's full child becomes a node with two children (height + 1).
    Grow,
    /// The root's child with a single internal child is replaced by a copy
    /// of that grandchild (height - 1).
    Collapse,
    /// The frozen nodes turned out balanced; they are replaced by copies.
    Refresh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NewChild {
    Existing(ChildId),
    /// Index into [`Plan::created`].
    Created(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NewNode {
    Leaf(Vec<u64>),
    Internal { separators: Vec<u64>, children: Vec<NewChild> },
}

/// The replacement for a rebalance's parent node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub action: Action,
    /// Indices (in the old parent) of the frozen children this plan replaces.
    pub involved: Vec<usize>,
    /// Nodes created below the new parent.
    pub created: Vec<NewNode>,
    /// The node that replaces the old parent under the grandparent.
    pub new_parent: NewNode,
}

impl Plan {
    /// Sizes of the leaves this plan creates.
    pub fn leaf_sizes(&self) -> Vec<usize> {
        self.created
            .iter()
            .filter_map(|n| match n {
                NewNode::Leaf(k) => Some(k.len()),
                NewNode::Internal { .. } => None,
            })
            .collect()
    }

    /// True when the new parent ends up with a single child.
    pub fn sole_child(&self) -> bool {
        matches!(&self.new_parent, NewNode::Internal { children, .. } if children.len() == 1)
    }
}

#[derive(Debug, Error)]
pub enum PlanError<E> {
    /// The involved nodes were balanced by the time they were frozen. The
    /// frozen nodes still have to be replaced; the refresh plan that does so
    /// is attached.
    #[error("nodes no longer unbalanced")]
    NoLongerUnbalanced(Plan),
    /// The freeze callback gave up (the rebalance was already finished by
    /// another thread).
    #[error("freeze aborted")]
    Freeze(E),
}

/// Plans the rebalance of the child of `parent` that `unbalanced_key`
/// selects. `gp_is_root` marks `parent` as the root's single child, the
/// only place where the tree grows or shrinks in height.
pub fn plan<E, F>(
    config: &TreeConfig,
    gp_is_root: bool,
    parent: &InternalSnapshot,
    unbalanced_key: u64,
    mut freeze: F,
) -> Result<Plan, PlanError<E>>
where
    F: FnMut(usize) -> Result<Snapshot, E>,
{
    let degree = parent.degree();
    if gp_is_root && degree == config.order {
        return Ok(grow(parent));
    }
    let u = node_search(&parent.separators, unbalanced_key);
    let target = freeze(u).map_err(PlanError::Freeze)?;
    if gp_is_root && degree == 1 {
        if let Snapshot::Internal(child) = &target {
            return Ok(Plan {
                action: Action::Collapse,
                involved: vec![0],
                created: Vec::new(),
                new_parent: NewNode::Internal {
                    separators: child.separators.clone(),
                    children: child.children.iter().map(|c| NewChild::Existing(*c)).collect(),
                },
            });
        }
    }
    let overfull = match &target {
        Snapshot::Leaf(keys) => keys.len() >= config.leaf_capacity,
        Snapshot::Internal(n) => n.degree() >= config.order,
    };
    let underfull = match &target {
        Snapshot::Leaf(keys) => keys.len() < config.min_size,
        Snapshot::Internal(n) => n.degree() < config.internal_min_children(),
    };
    if overfull && degree < config.order {
        let halves = match &target {
            Snapshot::Leaf(keys) => split_leaf(keys),
            Snapshot::Internal(n) => split_internal(&n.separators, &n.children),
        };
        return Ok(replace_window(parent, u, u, Action::Split, halves));
    }
    if underfull && degree > 1 {
        return Ok(match target {
            Snapshot::Leaf(keys) => leaf_window(config, parent, u, keys, &mut freeze).map_err(PlanError::Freeze)?,
            Snapshot::Internal(n) => internal_pair(config, parent, u, n, &mut freeze).map_err(PlanError::Freeze)?,
        });
    }
    let copy = match target {
        Snapshot::Leaf(keys) => vec![(NewNode::Leaf(keys), None)],
        Snapshot::Internal(n) => vec![(internal_node(n.separators, &n.children), None)],
    };
    Err(PlanError::NoLongerUnbalanced(replace_window(parent, u, u, Action::Refresh, copy)))
}

/// A new node paired with the separator that bounds it on the right (None
/// for the last node of a window, which inherits the window's bound).
type Piece = (NewNode, Option<u64>);

fn internal_node(separators: Vec<u64>, children: &[ChildId]) -> NewNode {
    NewNode::Internal {
        separators,
        children: children.iter().map(|c| NewChild::Existing(*c)).collect(),
    }
}

fn split_leaf(keys: &[u64]) -> Vec<Piece> {
    let left = keys.len().div_ceil(2);
    vec![
        (NewNode::Leaf(keys[..left].to_vec()), Some(keys[left - 1])),
        (NewNode::Leaf(keys[left..].to_vec()), None),
    ]
}

fn split_internal(separators: &[u64], children: &[ChildId]) -> Vec<Piece> {
    let left = children.len().div_ceil(2);
    vec![
        (internal_node(separators[..left - 1].to_vec(), &children[..left]), Some(separators[left - 1])),
        (internal_node(separators[left..].to_vec(), &children[left..]), None),
    ]
}

fn grow(parent: &InternalSnapshot) -> Plan {
    let mut halves = split_internal(&parent.separators, &parent.children);
    let (right, _) = halves.pop().expect("two halves");
    let (left, sep) = halves.pop().expect("two halves");
    Plan {
        action: Action::Grow,
        involved: Vec::new(),
        created: vec![left, right],
        new_parent: NewNode::Internal {
            separators: vec![sep.expect("left half has a bound")],
            children: vec![NewChild::Created(0), NewChild::Created(1)],
        },
    }
}

/// New parent equal to `parent` with children `lo..=hi` replaced by `pieces`.
fn replace_window(parent: &InternalSnapshot, lo: usize, hi: usize, action: Action, pieces: Vec<Piece>) -> Plan {
    let mut separators = parent.separators[..lo].to_vec();
    let mut children: Vec<NewChild> =
        parent.children[..lo].iter().map(|c| NewChild::Existing(*c)).collect();
    let mut created = Vec::with_capacity(pieces.len());
    for (node, bound) in pieces {
        children.push(NewChild::Created(created.len()));
        created.push(node);
        if let Some(b) = bound {
            separators.push(b);
        }
    }
    // seps[hi] (when present) is the window's right bound and stays
    separators.extend_from_slice(&parent.separators[hi.min(parent.separators.len())..]);
    children.extend(parent.children[hi + 1..].iter().map(|c| NewChild::Existing(*c)));
    debug_assert_eq!(separators.len() + 1, children.len());
    Plan {
        action,
        involved: (lo..=hi).collect(),
        created,
        new_parent: NewNode::Internal { separators, children },
    }
}

fn leaf_keys(snapshot: Snapshot) -> Vec<u64> {
    match snapshot {
        Snapshot::Leaf(k) => k,
        Snapshot::Internal(_) => unreachable!("leaf siblings are leaves"),
    }
}

/// Merge or redistribute an underfull leaf with adjacent siblings: the
/// right sibling (left for the last child), then further neighbours while
/// the combined size is below `min(2S, D/2)`.
fn leaf_window<E, F>(
    config: &TreeConfig,
    parent: &InternalSnapshot,
    u: usize,
    keys: Vec<u64>,
    freeze: &mut F,
) -> Result<Plan, E>
where
    F: FnMut(usize) -> Result<Snapshot, E>,
{
    let last = parent.degree() - 1;
    let (mut lo, mut hi) = (u, u);
    let mut parts = std::collections::BTreeMap::new();
    parts.insert(u, keys);
    let mut total = parts[&u].len();
    loop {
        let next = if lo == u && hi == u {
            if u < last { u + 1 } else { u - 1 }
        } else if total < config.balanced_lower() && hi < last {
            hi + 1
        } else if total < config.balanced_lower() && lo > 0 {
            lo - 1
        } else {
            break;
        };
        let sib = leaf_keys(freeze(next)?);
        total += sib.len();
        parts.insert(next, sib);
        lo = lo.min(next);
        hi = hi.max(next);
    }
    let all: Vec<u64> = parts.into_values().flatten().collect();
    debug_assert!(all.windows(2).all(|w| w[0] < w[1]));
    let pieces = if all.len() <= config.balanced_upper() {
        (Action::Merge, vec![(NewNode::Leaf(all), None)])
    } else {
        (Action::Redistribute, split_leaf(&all))
    };
    Ok(replace_window(parent, lo, hi, pieces.0, pieces.1))
}

/// Merge or redistribute an underfull internal node with one sibling.
fn internal_pair<E, F>(
    config: &TreeConfig,
    parent: &InternalSnapshot,
    u: usize,
    node: InternalSnapshot,
    freeze: &mut F,
) -> Result<Plan, E>
where
    F: FnMut(usize) -> Result<Snapshot, E>,
{
    let sib_index = if u + 1 < parent.degree() { u + 1 } else { u - 1 };
    let sib = match freeze(sib_index)? {
        Snapshot::Internal(n) => n,
        Snapshot::Leaf(_) => unreachable!("internal siblings are internal"),
    };
    let (lo, left, right) = if sib_index > u { (u, node, sib) } else { (sib_index, sib, node) };
    let mut separators = left.separators;
    separators.push(parent.separators[lo]);
    separators.extend(right.separators);
    let mut children = left.children;
    children.extend(right.children);
    let (action, pieces) = if children.len() <= config.order {
        (Action::Merge, vec![(internal_node(separators, &children), None)])
    } else {
        (Action::Redistribute, split_internal(&separators, &children))
    };
    Ok(replace_window(parent, lo, lo + 1, action, pieces))
}

#[cfg(test)]
mod tests {
    use super::*;

    type Frozen = std::collections::HashMap<usize, Snapshot>;

    fn run(config: TreeConfig, root: bool, parent: InternalSnapshot, key: u64, frozen: Frozen) -> (Plan, Vec<usize>) {
        let mut order = Vec::new();
        let result = plan::<(), _>(&config, root, &parent, key, |i| {
            order.push(i);
            Ok(frozen[&i].clone())
        });
        let plan = match result {
            Ok(p) => p,
            Err(PlanError::NoLongerUnbalanced(p)) => p,
            Err(PlanError::Freeze(())) => unreachable!(),
        };
        (plan, order)
    }

    fn cfg(k: usize, d: usize, s: usize) -> TreeConfig {
        TreeConfig::new(k, d, s).unwrap()
    }

    fn parent(seps: &[u64]) -> InternalSnapshot {
        InternalSnapshot {
            separators: seps.to_vec(),
            children: (0..=seps.len() as u64).map(|i| 100 + i).collect(),
        }
    }

    /// Reference: sorted keys cut at the midpoint (rounded up on the left).
    fn split_oracle(keys: &[u64]) -> (Vec<u64>, Vec<u64>) {
        let mut sorted = keys.to_vec();
        sorted.sort_unstable();
        let mut left = Vec::new();
        let mut right = sorted;
        while left.len() < right.len() {
            left.push(right.remove(0));
        }
        (left, right)
    }

    #[test]
    fn split_full_leaf() {
        let frozen = Frozen::from([(0, Snapshot::Leaf(vec![2, 5, 7, 9]))]);
        let (p, order) = run(cfg(3, 4, 2), false, parent(&[]), 7, frozen);
        assert_eq!(order, vec![0]);
        assert_eq!(p.action, Action::Split);
        let (l, r) = split_oracle(&[2, 5, 7, 9]);
        assert_eq!(p.created, vec![NewNode::Leaf(l), NewNode::Leaf(r)]);
        assert_eq!(
            p.new_parent,
            NewNode::Internal { separators: vec![5], children: vec![NewChild::Created(0), NewChild::Created(1)] }
        );
    }

    #[test]
    fn merge_small_pair() {
        // sizes 1 and 2, D = 4, S = 2 -> one leaf of 3
        let frozen = Frozen::from([(0, Snapshot::Leaf(vec![3])), (1, Snapshot::Leaf(vec![12, 15]))]);
        let (p, order) = run(cfg(3, 4, 2), false, parent(&[10]), 3, frozen);
        assert_eq!(order, vec![0, 1]);
        assert_eq!(p.action, Action::Merge);
        assert_eq!(p.created, vec![NewNode::Leaf(vec![3, 12, 15])]);
        assert_eq!(p.new_parent, NewNode::Internal { separators: vec![], children: vec![NewChild::Created(0)] });
    }

    #[test]
    fn redistribute_when_merge_would_fill() {
        // sizes 1 and 3 -> 4 > D - 1 = 3 -> 2 and 2
        let frozen = Frozen::from([(0, Snapshot::Leaf(vec![3])), (1, Snapshot::Leaf(vec![12, 15, 18]))]);
        let (p, _) = run(cfg(3, 4, 2), false, parent(&[10]), 3, frozen);
        assert_eq!(p.action, Action::Redistribute);
        assert_eq!(p.leaf_sizes(), vec![2, 2]);
        assert_eq!(
            p.new_parent,
            NewNode::Internal { separators: vec![12], children: vec![NewChild::Created(0), NewChild::Created(1)] }
        );
    }

    #[test]
    fn rightmost_child_uses_left_sibling() {
        let frozen = Frozen::from([(0, Snapshot::Leaf(vec![1, 2])), (1, Snapshot::Leaf(vec![20]))]);
        let (p, order) = run(cfg(3, 4, 2), false, parent(&[10]), 20, frozen);
        assert_eq!(order, vec![1, 0]);
        assert_eq!(p.involved, vec![0, 1]);
        assert_eq!(p.created, vec![NewNode::Leaf(vec![1, 2, 20])]);
    }

    #[test]
    fn window_widens_until_lower_bound() {
        // D = 32, S = 8: 7 + 8 = 15 < min(16, 16); absorb the next sibling too
        let c = cfg(8, 32, 8);
        let leaf = |start: u64, n: u64| Snapshot::Leaf((start..start + n).collect());
        let frozen = Frozen::from([(0, leaf(1, 7)), (1, leaf(101, 8)), (2, leaf(201, 9))]);
        let (p, order) = run(c, false, parent(&[100, 200]), 5, frozen);
        assert_eq!(order, vec![0, 1, 2]);
        assert_eq!(p.action, Action::Merge);
        assert_eq!(p.leaf_sizes(), vec![24]);
        assert!(p.leaf_sizes().iter().all(|s| (c.balanced_lower()..=c.balanced_upper()).contains(s)));
    }

    #[test]
    fn balanced_target_is_refreshed() {
        let frozen = Frozen::from([(1, Snapshot::Leaf(vec![12, 15]))]);
        let result = plan::<(), _>(&cfg(3, 4, 2), false, &parent(&[10]), 12, |i| Ok(frozen[&i].clone()));
        match result {
            Err(PlanError::NoLongerUnbalanced(p)) => {
                assert_eq!(p.action, Action::Refresh);
                assert_eq!(p.involved, vec![1]);
                assert_eq!(p.created, vec![NewNode::Leaf(vec![12, 15])]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grow_splits_full_root_child() {
        let p = parent(&[10, 20]);
        let (plan, order) = run(cfg(3, 4, 2), true, p, 5, Frozen::new());
        assert!(order.is_empty());
        assert_eq!(plan.action, Action::Grow);
        assert_eq!(
            plan.created,
            vec![
                NewNode::Internal { separators: vec![10], children: vec![NewChild::Existing(100), NewChild::Existing(101)] },
                NewNode::Internal { separators: vec![], children: vec![NewChild::Existing(102)] },
            ]
        );
        assert_eq!(
            plan.new_parent,
            NewNode::Internal { separators: vec![20], children: vec![NewChild::Created(0), NewChild::Created(1)] }
        );
    }

    #[test]
    fn collapse_single_internal_child() {
        let child = InternalSnapshot { separators: vec![7], children: vec![1, 2] };
        let frozen = Frozen::from([(0, Snapshot::Internal(child))]);
        let (plan, _) = run(cfg(3, 4, 2), true, parent(&[]), 5, frozen);
        assert_eq!(plan.action, Action::Collapse);
        assert_eq!(
            plan.new_parent,
            NewNode::Internal { separators: vec![7], children: vec![NewChild::Existing(1), NewChild::Existing(2)] }
        );
    }

    #[test]
    fn internal_split_and_merge() {
        let c = cfg(3, 4, 2);
        let full = InternalSnapshot { separators: vec![3, 6], children: vec![1, 2, 3] };
        let frozen = Frozen::from([(0, Snapshot::Internal(full))]);
        let (plan, _) = run(c, false, parent(&[10]), 5, frozen);
        assert_eq!(plan.action, Action::Split);
        let NewNode::Internal { separators, .. } = &plan.new_parent else { panic!() };
        assert_eq!(separators, &vec![6, 10]);

        let lonely = InternalSnapshot { separators: vec![], children: vec![1] };
        let sib = InternalSnapshot { separators: vec![15], children: vec![2, 3] };
        let frozen = Frozen::from([(0, Snapshot::Internal(lonely)), (1, Snapshot::Internal(sib))]);
        let (plan, _) = run(c, false, parent(&[10]), 5, frozen);
        assert_eq!(plan.action, Action::Merge);
        assert_eq!(
            plan.created,
            vec![NewNode::Internal {
                separators: vec![10, 15],
                children: vec![NewChild::Existing(1), NewChild::Existing(2), NewChild::Existing(3)]
            }]
        );
    }

    proptest::proptest! {
        /// Same frozen contents, same plan; leaf sizes stay in bounds.
        #[test]
        fn deterministic_and_bounded(
            sizes in proptest::collection::vec(0usize..=8, 2..6),
            target in 0usize..6,
        ) {
            let c = cfg(8, 8, 2);
            let target = target % sizes.len();
            let mut seps = Vec::new();
            let mut frozen = Frozen::new();
            for (i, n) in sizes.iter().enumerate() {
                let base = 100 * i as u64;
                frozen.insert(i, Snapshot::Leaf((base + 1..=base + *n as u64).collect()));
                if i + 1 < sizes.len() {
                    seps.push(base + 99);
                }
            }
            let p = parent(&seps);
            let (a, _) = run(c, false, p.clone(), 100 * target as u64 + 1, frozen.clone());
            let (b, _) = run(c, false, p, 100 * target as u64 + 1, frozen);
            proptest::prop_assert_eq!(&a, &b);
            if matches!(a.action, Action::Split | Action::Merge | Action::Redistribute) && !a.sole_child() {
                for s in a.leaf_sizes() {
                    proptest::prop_assert!(s <= c.balanced_upper());
                    proptest::prop_assert!(s >= c.balanced_lower() || a.involved.len() == sizes.len());
                }
            }
        }
    }
}
