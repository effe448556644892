//! Search, remove and insert.

use crossbeam_epoch::Guard;

use crate::keyspace::{check_key, check_range, KeyError, KeyWord, MAX_KEY};
use crate::node::{node, Leaf, Node, Status};
use crate::shared;
use crate::tree::{AccessPath, Stats, Tree};

/// Operation kind, as recorded in histories and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Search,
    Remove,
    Insert,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Search => "search",
            OpKind::Remove => "remove",
            OpKind::Insert => "insert",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "search" => Ok(OpKind::Search),
            "remove" => Ok(OpKind::Remove),
            "insert" => Ok(OpKind::Insert),
            other => Err(format!("unknown operation kind {other:?}")),
        }
    }
}

/// Outcome of one operation. `value` is the returned key (0 on failure) for
/// search and remove, and 1/0 for a successful/failed insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpResult {
    pub kind: OpKind,
    pub value: u64,
}

impl OpResult {
    pub fn success(&self) -> bool {
        self.value != 0
    }
}

/// One pass over a leaf's slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafScan {
    /// Slot and payload of the smallest key in range (first slot on ties).
    pub matched: Option<(usize, u64)>,
    /// First empty slot that is not read-only.
    pub empty: Option<usize>,
    /// Non-empty slots seen.
    pub live: usize,
    /// Some slot was read-only: the leaf is being rebalanced.
    pub frozen: bool,
}

impl LeafScan {
    /// Every slot read-only.
    pub fn fully_frozen(words: &[u64]) -> bool {
        words.iter().all(|w| KeyWord::from_bits(*w).is_read_only())
    }
}

/// Scans slot words for keys in `[e1; e2]`.
pub fn scan_words(words: impl IntoIterator<Item = u64>, e1: u64, e2: u64) -> LeafScan {
    let mut scan = LeafScan { matched: None, empty: None, live: 0, frozen: false };
    for (i, bits) in words.into_iter().enumerate() {
        let w = KeyWord::from_bits(bits);
        scan.frozen |= w.is_read_only();
        let p = w.payload();
        if p == 0 {
            if !w.is_read_only() && scan.empty.is_none() {
                scan.empty = Some(i);
            }
            continue;
        }
        scan.live += 1;
        if (e1..=e2).contains(&p) && scan.matched.is_none_or(|(_, m)| p < m) {
            scan.matched = Some((i, p));
        }
    }
    scan
}

fn scan_leaf(leaf: &Leaf, e1: u64, e2: u64) -> LeafScan {
    shared::barrier();
    scan_words(leaf.slots.iter().map(|s| s.load()), e1, e2)
}

enum Step {
    Done(u64),
    Restart,
}

impl Tree {
    /// Returns some key in `[e1; e2]`, or 0 if none was found.
    pub fn search(&self, e1: u64, e2: u64) -> Result<u64, KeyError> {
        check_range(e1, e2)?;
        let guard = self.pin();
        let v = self.range_op(e1, e2, false, &guard);
        Stats::bump(&self.stats.ops);
        Ok(v)
    }

    /// Removes and returns the smallest key in `[e1; e2]` it finds, or 0.
    pub fn remove(&self, e1: u64, e2: u64) -> Result<u64, KeyError> {
        check_range(e1, e2)?;
        let guard = self.pin();
        let v = self.range_op(e1, e2, true, &guard);
        Stats::bump(&self.stats.ops);
        Ok(v)
    }

    /// Adds `e`. Returns false if it was already present.
    pub fn insert(&self, e: u64) -> Result<bool, KeyError> {
        check_key(e)?;
        let guard = self.pin();
        let mut restarts = 0;
        let ok = loop {
            match self.insert_once(e, &guard) {
                Step::Done(v) => break v != 0,
                Step::Restart => self.count_restart(&mut restarts),
            }
        };
        Stats::bump(&self.stats.ops);
        Ok(ok)
    }

    /// Runs one operation given as (kind, e1, e2); `e2` is ignored for
    /// inserts.
    pub fn apply(&self, kind: OpKind, e1: u64, e2: u64) -> Result<OpResult, KeyError> {
        let value = match kind {
            OpKind::Search => self.search(e1, e2)?,
            OpKind::Remove => self.remove(e1, e2)?,
            OpKind::Insert => self.insert(e1)? as u64,
        };
        Ok(OpResult { kind, value })
    }

    /// Scans the leaves covering `[e1; e2]` in ascending order.
    fn range_op(&self, e1: u64, e2: u64, remove: bool, guard: &Guard) -> u64 {
        let mut restarts = 0;
        let mut from = e1;
        loop {
            let path = match self.descend_in(from, guard) {
                Ok(p) => p,
                Err(_) => {
                    self.count_restart(&mut restarts);
                    continue;
                }
            };
            // SAFETY: the leaf was reached under `guard`.
            let leaf = unsafe { node(path.leaf() as u64, guard) }.as_leaf().expect("path ends in a leaf");
            let found = if remove {
                match self.remove_in_leaf(&path, leaf, from, e2, guard) {
                    Step::Done(v) => v,
                    Step::Restart => {
                        self.count_restart(&mut restarts);
                        continue;
                    }
                }
            } else {
                scan_leaf(leaf, from, e2).matched.map_or(0, |(_, k)| k)
            };
            if found != 0 {
                return found;
            }
            let (_, upper) = path.bounds();
            if upper >= e2 || upper == MAX_KEY {
                return 0;
            }
            from = upper + 1;
        }
    }

    fn remove_in_leaf(&self, path: &AccessPath, leaf: &Leaf, e1: u64, e2: u64, guard: &Guard) -> Step {
        loop {
            let scan = scan_leaf(leaf, e1, e2);
            if scan.frozen {
                self.help_frozen_leaf(path, guard);
                return Step::Restart;
            }
            let Some((i, key)) = scan.matched else { return Step::Done(0) };
            if leaf.slots[i].compare_exchange(key, 0).is_ok() {
                if scan.live - 1 < self.config.min_size {
                    self.fix_underflow(path, key, guard);
                    self.tidy_path(key, guard);
                }
                return Step::Done(key);
            }
        }
    }

    fn insert_once(&self, e: u64, guard: &Guard) -> Step {
        let path = match self.descend_in(e, guard) {
            Ok(p) => p,
            Err(_) => return Step::Restart,
        };
        // SAFETY: the leaf was reached under `guard`.
        let leaf = unsafe { node(path.leaf() as u64, guard) }.as_leaf().expect("path ends in a leaf");
        loop {
            let scan = scan_leaf(leaf, e, e);
            if scan.matched.is_some() {
                return Step::Done(0);
            }
            if scan.frozen {
                self.help_frozen_leaf(&path, guard);
                return Step::Restart;
            }
            let Some(slot) = scan.empty else {
                self.fix_overflow(&path, e, guard);
                return Step::Restart;
            };
            if leaf.slots[slot].compare_exchange(0, e).is_ok() {
                return Step::Done(settle_duplicate(leaf, slot, e) as u64);
            }
        }
    }

    /// A read-only slot was seen: the leaf's parent is frozen by the
    /// rebalance that is freezing the leaf. Complete it.
    fn help_frozen_leaf(&self, path: &AccessPath, guard: &Guard) {
        // SAFETY: path nodes were read under `guard`.
        let Node::Internal(parent) = (unsafe { node(path.parent() as u64, guard) }) else { unreachable!() };
        // SAFETY: loaded from a protected node.
        if let Status::Frozen(d) = unsafe { Status::decode(parent.status.load(), guard) } {
            Stats::bump(&self.stats.help_calls);
            self.help(d, guard);
        }
    }
}

/// After writing `e` into `slot`, resolves races with concurrent inserts of
/// the same key. While the leaf holds several copies, the copy in the
/// highest slot is cleared; a frozen copy keeps its read-only bit, so the
/// leaf's frozen key set is unchanged. Each insert clears at most one copy
/// and fails if it did, so successful inserts always match the copies kept.
/// An insert whose own copy was already removed succeeds: a remover
/// returned it.
fn settle_duplicate(leaf: &Leaf, slot: usize, e: u64) -> bool {
    let is_copy = |w: u64| KeyWord::from_bits(w).payload() == e;
    loop {
        shared::barrier();
        let mut copies: Vec<(usize, u64)> = leaf
            .slots
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != slot)
            .map(|(i, s)| (i, s.load()))
            .filter(|(_, w)| is_copy(*w))
            .collect();
        // read last: every copy seen above coexisted with our own
        let own = leaf.slots[slot].load();
        if !is_copy(own) {
            return true;
        }
        copies.push((slot, own));
        let Some(&(target, word)) = copies.iter().max_by_key(|(i, _)| *i).filter(|_| copies.len() > 1) else {
            return true;
        };
        let cleared = if KeyWord::from_bits(word).is_read_only() { KeyWord::EMPTY.set_readonly().bits() } else { 0 };
        if leaf.slots[target].compare_exchange(word, cleared).is_ok() {
            return false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TreeConfig;
    use std::collections::BTreeSet;

    fn tree(k: usize, d: usize, s: usize) -> Tree {
        Tree::new(TreeConfig::new(k, d, s).unwrap()).unwrap()
    }

    #[test]
    fn leaf_scan_examples() {
        assert_eq!(
            scan_words([5, 0, 50, 0], 10, 60),
            LeafScan { matched: Some((2, 50)), empty: Some(1), live: 2, frozen: false }
        );
        assert_eq!(
            scan_words([0, 0, 0, 0], 1, 100),
            LeafScan { matched: None, empty: Some(0), live: 0, frozen: false }
        );
        let ro = |p: u64| KeyWord::from_bits(p).set_readonly().bits();
        let frozen = [ro(5), ro(0), ro(9), ro(0)];
        assert!(LeafScan::fully_frozen(&frozen));
        let s = scan_words(frozen, 1, 100);
        assert!(s.frozen);
        assert_eq!(s.empty, None);
        // smallest key wins regardless of slot order
        assert_eq!(scan_words([40, 30, 35], 1, 100).matched, Some((1, 30)));
    }

    #[test]
    fn serial_examples() {
        let t = tree(32, 32, 8);
        assert_eq!(t.search(1, MAX_KEY).unwrap(), 0);
        assert_eq!(t.remove(1, 100).unwrap(), 0);
        assert!(t.insert(5).unwrap());
        assert!(t.insert(50).unwrap());
        assert_eq!(t.search(10, 60).unwrap(), 50);
        assert_eq!(t.search(6, 40).unwrap(), 0);
        assert_eq!(t.remove(1, 100).unwrap(), 5);
        assert_eq!(t.snapshot().unwrap(), vec![50]);
        assert!(!t.insert(50).unwrap());
        assert!(t.insert(7).unwrap());
        assert_eq!(t.remove(7, 7).unwrap(), 7);
        assert_eq!(t.remove(7, 7).unwrap(), 0);
    }

    #[test]
    fn argument_errors() {
        let t = tree(3, 4, 2);
        assert_eq!(t.insert(0), Err(KeyError::Reserved));
        assert!(t.insert(1 << 63).is_err());
        assert!(t.search(5, 4).is_err());
        assert!(t.remove(0, 4).is_err());
    }

    #[test]
    fn full_leaf_splits() {
        let t = Tree::with_options(TreeConfig::new(3, 4, 2).unwrap(), crate::tree::TreeOptions::verification()).unwrap();
        for k in 1..=5 {
            assert!(t.insert(k * 10).unwrap());
        }
        assert_eq!(t.snapshot().unwrap(), vec![10, 20, 30, 40, 50]);
        assert!(t.check_structure().is_empty());
        let records = t.take_records();
        assert!(records.iter().any(|r| r.action == crate::rebalance::Action::Split));
        assert!(records.iter().all(|r| r.preserves_keys()));
    }

    /// Serial runs against a BTreeSet, across configurations small enough
    /// to grow and shrink several levels.
    #[test]
    fn serial_matches_set() {
        use rand::{Rng, SeedableRng};
        for (k, d, s) in [(3, 4, 2), (4, 8, 2), (5, 8, 4), (32, 32, 8)] {
            let t = Tree::with_options(TreeConfig::new(k, d, s).unwrap(), crate::tree::TreeOptions::verification()).unwrap();
            let mut set = BTreeSet::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(k as u64);
            for i in 0..20_000 {
                let a = rng.gen_range(1..=300u64);
                let b = (a + rng.gen_range(0..40)).min(300);
                // grow first, then drain
                let insert_bias = if i < 10_000 { 60 } else { 30 };
                let roll = rng.gen_range(0..100);
                if roll < insert_bias {
                    assert_eq!(t.insert(a).unwrap(), set.insert(a), "insert {a}");
                } else if roll < insert_bias + 20 {
                    let want = set.range(a..=b).next().copied().unwrap_or(0);
                    assert_eq!(t.search(a, b).unwrap(), want, "search {a} {b}");
                } else {
                    let want = set.range(a..=b).next().copied().unwrap_or(0);
                    set.remove(&want);
                    assert_eq!(t.remove(a, b).unwrap(), want, "remove {a} {b}");
                }
            }
            assert_eq!(t.snapshot().unwrap(), set.iter().copied().collect::<Vec<_>>());
            assert_eq!(t.check_structure(), vec![]);
            while t.remove(1, MAX_KEY - 1).unwrap() != 0 {}
            assert_eq!(t.snapshot().unwrap(), Vec::<u64>::new());
            assert_eq!(t.check_structure(), vec![]);
            assert!(t.take_records().iter().all(|r| r.preserves_keys()));
        }
    }
}
