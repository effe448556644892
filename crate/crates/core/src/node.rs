//! Node layout and the status word.
//!
//! Nodes are immutable after publication except for leaf slots, the status
//! word of internal nodes, and internal child links (swapped only when the
//! node is the grandparent of a committing rebalance). Links are raw
//! pointers stored in [`SharedWord`]s; liveness is guaranteed by the tree's
//! reclamation mode.

use crossbeam_epoch::Guard;

use crate::keyspace::KeyWord;
use crate::rebalance::Replacement;
use crate::shared::SharedWord;

pub(crate) enum Node {
    Leaf(Leaf),
    Internal(Internal),
}

pub(crate) struct Leaf {
    pub(crate) slots: Box<[SharedWord]>,
}

pub(crate) struct Internal {
    pub(crate) separators: Box<[u64]>,
    pub(crate) children: Box<[SharedWord]>,
    pub(crate) status: SharedWord,
}

pub(crate) type NodePtr = *const Node;

impl Node {
    pub(crate) fn new_leaf(capacity: usize, keys: &[u64]) -> NodePtr {
        debug_assert!(keys.len() <= capacity);
        let slots = (0..capacity)
            .map(|i| SharedWord::new(keys.get(i).copied().unwrap_or(0)))
            .collect();
        Box::into_raw(Box::new(Node::Leaf(Leaf { slots })))
    }

    pub(crate) fn new_internal(separators: Vec<u64>, children: &[NodePtr]) -> NodePtr {
        debug_assert_eq!(separators.len() + 1, children.len());
        let children = children.iter().map(|c| SharedWord::new(*c as u64)).collect();
        Box::into_raw(Box::new(Node::Internal(Internal {
            separators: separators.into_boxed_slice(),
            children,
            status: SharedWord::new(Status::none(0)),
        })))
    }

    pub(crate) fn as_internal(&self) -> Option<&Internal> {
        match self {
            Node::Internal(i) => Some(i),
            Node::Leaf(_) => None,
        }
    }

    pub(crate) fn as_leaf(&self) -> Option<&Leaf> {
        match self {
            Node::Leaf(l) => Some(l),
            Node::Internal(_) => None,
        }
    }

    pub(crate) fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf(_))
    }
}

/// Dereferences a node link.
///
/// # Safety
/// `ptr` must have been read from a link of a node reachable while `guard`
/// was held (or from the tree root), so the node cannot be reclaimed yet.
pub(crate) unsafe fn node(ptr: u64, _guard: &Guard) -> &Node {
    &*(ptr as NodePtr)
}

impl Leaf {
    /// Quiescent read of the non-empty payloads, in slot order.
    pub(crate) fn payloads_quiescent(&self) -> Vec<u64> {
        self.slots
            .iter()
            .map(|s| KeyWord::from_bits(s.load_quiescent()).payload())
            .filter(|p| *p != 0)
            .collect()
    }
}

impl Internal {
    /// Smallest `j` with `key <= separators[j]`, else the last child. Ties
    /// go left: a separator bounds its left subtree inclusively.
    pub(crate) fn child_index(&self, key: u64) -> usize {
        node_search(&self.separators, key)
    }

    pub(crate) fn degree(&self) -> usize {
        self.children.len()
    }
}

/// Child index for `key` under the given separators.
pub fn node_search(separators: &[u64], key: u64) -> usize {
    separators.partition_point(|s| *s < key)
}

// ---------------------------------------------------------------------------
// Status word

/// Rebalance step advertised by a status word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    None,
    Step1,
    Step2,
    /// The node itself is frozen as part of a rebalance (never cleared).
    Frozen,
}

/// Decoded status word, as exposed to the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusView {
    pub parent_key: u64,
    pub unbalanced_key: u64,
    pub sequence: u64,
    pub step: Step,
}

/// Immutable record of one rebalance. The status word points at it while the
/// rebalance is pending, frozen nodes point at it forever.
pub(crate) struct Descriptor {
    pub(crate) id: u64,
    pub(crate) gp: NodePtr,
    pub(crate) parent: NodePtr,
    pub(crate) parent_key: u64,
    pub(crate) unbalanced_key: u64,
    pub(crate) seq: u64,
    pub(crate) gp_is_root: bool,
    pub(crate) initiator: u64,
    /// `*mut Replacement`, published once by the first helper to finish
    /// planning.
    pub(crate) replacement: SharedWord,
}

impl Descriptor {
    pub(crate) fn replacement<'g>(&self, _guard: &'g Guard) -> Option<&'g Replacement> {
        let p = self.replacement.load();
        // SAFETY: published replacements live as long as their descriptor.
        (p != 0).then(|| unsafe { &*(p as *const Replacement) })
    }
}

const TAG_MASK: u64 = 0b11;
const TAG_NONE: u64 = 0;
const TAG_STEP1: u64 = 1;
const TAG_STEP2: u64 = 2;
const TAG_FROZEN: u64 = 3;

#[derive(Clone, Copy)]
pub(crate) enum Status<'g> {
    None { seq: u64 },
    Step1(&'g Descriptor),
    Step2(&'g Descriptor),
    Frozen(&'g Descriptor),
}

impl<'g> Status<'g> {
    pub(crate) fn none(seq: u64) -> u64 {
        seq << 2 | TAG_NONE
    }

    pub(crate) fn step1(desc: *const Descriptor) -> u64 {
        desc as u64 | TAG_STEP1
    }

    pub(crate) fn step2(desc: *const Descriptor) -> u64 {
        desc as u64 | TAG_STEP2
    }

    pub(crate) fn frozen(desc: *const Descriptor) -> u64 {
        desc as u64 | TAG_FROZEN
    }

    /// # Safety
    /// `word` must have been loaded from a status cell of a node protected by
    /// `guard`; descriptors outlive every node that references them.
    pub(crate) unsafe fn decode(word: u64, _guard: &'g Guard) -> Status<'g> {
        let ptr = (word & !TAG_MASK) as *const Descriptor;
        match word & TAG_MASK {
            TAG_NONE => Status::None { seq: word >> 2 },
            TAG_STEP1 => Status::Step1(&*ptr),
            TAG_STEP2 => Status::Step2(&*ptr),
            _ => Status::Frozen(&*ptr),
        }
    }

    pub(crate) fn view(self) -> StatusView {
        let (d, step) = match self {
            Status::None { seq } => {
                return StatusView { parent_key: 0, unbalanced_key: 0, sequence: seq, step: Step::None }
            }
            Status::Step1(d) => (d, Step::Step1),
            Status::Step2(d) => (d, Step::Step2),
            Status::Frozen(d) => (d, Step::Frozen),
        };
        StatusView {
            parent_key: d.parent_key,
            unbalanced_key: d.unbalanced_key,
            sequence: d.seq,
            step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_search_examples() {
        assert_eq!(node_search(&[10, 20], 10), 0);
        assert_eq!(node_search(&[10, 20], 11), 1);
        assert_eq!(node_search(&[10, 20], 20), 1);
        assert_eq!(node_search(&[10, 20], 21), 2);
        assert_eq!(node_search(&[], 5), 0);
        assert_eq!(node_search(&[10, 20], 1), 0);
    }

    proptest::proptest! {
        #[test]
        fn node_search_brackets_key(
            mut seps in proptest::collection::btree_set(1u64..1000, 0..8),
            key in 1u64..1000,
        ) {
            let seps: Vec<u64> = std::mem::take(&mut seps).into_iter().collect();
            let j = node_search(&seps, key);
            proptest::prop_assert!(j <= seps.len());
            proptest::prop_assert!(j == 0 || seps[j - 1] < key);
            proptest::prop_assert!(j == seps.len() || key <= seps[j]);
        }
    }

    #[test]
    fn status_round_trip() {
        let guard = crossbeam_epoch::pin();
        let w = Status::none(4);
        match unsafe { Status::decode(w, &guard) } {
            Status::None { seq } => assert_eq!(seq, 4),
            _ => panic!("expected NONE"),
        }
        let desc = Box::new(Descriptor {
            id: 1,
            gp: std::ptr::null(),
            parent: std::ptr::null(),
            parent_key: 20,
            unbalanced_key: 10,
            seq: 4,
            gp_is_root: false,
            initiator: 0,
            replacement: SharedWord::new(0),
        });
        let p: *const Descriptor = &*desc;
        for (word, step) in [
            (Status::step1(p), Step::Step1),
            (Status::step2(p), Step::Step2),
            (Status::frozen(p), Step::Frozen),
        ] {
            let v = unsafe { Status::decode(word, &guard) }.view();
            assert_eq!(v, StatusView { parent_key: 20, unbalanced_key: 10, sequence: 4, step });
        }
    }
}
