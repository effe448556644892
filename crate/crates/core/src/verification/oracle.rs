use std::collections::BTreeSet;

use crate::ops::OpKind;

/// Applies one operation to a plain set with serial semantics: search and
/// remove act on the smallest member in `[e1; e2]`, insert reports 1 iff
/// `e1` was absent.
pub fn oracle_apply(state: &mut BTreeSet<u64>, kind: OpKind, e1: u64, e2: u64) -> u64 {
    match kind {
        OpKind::Search => state.range(e1..=e2).next().copied().unwrap_or(0),
        OpKind::Remove => {
            let found = state.range(e1..=e2).next().copied().unwrap_or(0);
            state.remove(&found);
            found
        }
        OpKind::Insert => state.insert(e1) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let mut s = BTreeSet::from([5, 50]);
        assert_eq!(oracle_apply(&mut s, OpKind::Remove, 1, 100), 5);
        assert_eq!(s, BTreeSet::from([50]));
        let mut s = BTreeSet::new();
        assert_eq!(oracle_apply(&mut s, OpKind::Search, 1, 9), 0);
        let mut s = BTreeSet::from([7]);
        assert_eq!(oracle_apply(&mut s, OpKind::Insert, 7, 7), 0);
        assert_eq!(s, BTreeSet::from([7]));
    }
}
