//! Exact reference checks for tiny histories, by enumeration.
//!
//! A history is legal if the effects of its successful updates can be
//! placed at instants inside their operations' windows such that every
//! update is valid (inserts add an absent key, removes take a present one)
//! and every operation satisfies its contract against the exact sets of
//! keys present throughout (`O`) and at some point during (`U`) its window.
//! Exponential; meant for a handful of operations.

use std::collections::BTreeSet;

use crate::ops::OpKind;

use super::history::{History, OpRecord};

type Set = BTreeSet<u64>;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // responses sort before invocations at equal times
    Response(usize),
    Invoke(usize),
}

fn has_effect(r: &OpRecord) -> bool {
    match r.kind {
        OpKind::Insert => r.result == 1,
        OpKind::Remove => r.result != 0,
        OpKind::Search => false,
    }
}

fn apply(r: &OpRecord, state: &mut Set) -> bool {
    match r.kind {
        OpKind::Insert => state.insert(r.e1),
        OpKind::Remove => state.remove(&r.result),
        OpKind::Search => true,
    }
}

/// Contract of a finished operation given the exact `O` and `U`.
fn contract_holds(r: &OpRecord, always: &Set, sometime: &Set) -> bool {
    let in_range = |e: u64| r.e1 <= e && e <= r.e2;
    match (r.kind, r.result) {
        (OpKind::Search | OpKind::Remove, 0) => always.range(r.e1..=r.e2).next().is_none(),
        (OpKind::Search, e) => in_range(e) && sometime.contains(&e),
        (OpKind::Remove, e) => {
            in_range(e) && sometime.contains(&e) && always.range(r.e1..=r.e2).next().is_none_or(|m| e <= *m)
        }
        (OpKind::Insert, 1) => true,
        (OpKind::Insert, _) => sometime.contains(&r.e1),
    }
}

struct Search<'h> {
    ops: &'h [OpRecord],
    events: Vec<Event>,
    final_state: Option<&'h Set>,
}

impl Search<'_> {
    fn dfs(&self, at: usize, state: &Set, placed: &mut Vec<bool>, active: &mut Vec<Option<(Set, Set)>>) -> bool {
        // place one more pending effect in the gap before event `at`
        for j in 0..self.ops.len() {
            if placed[j] || active[j].is_none() || !has_effect(&self.ops[j]) {
                continue;
            }
            let mut next = state.clone();
            if !apply(&self.ops[j], &mut next) {
                continue;
            }
            let saved = active.clone();
            for (o, u) in active.iter_mut().flatten() {
                o.retain(|k| next.contains(k));
                u.extend(next.iter().copied());
            }
            placed[j] = true;
            let ok = self.dfs(at, &next, placed, active);
            placed[j] = false;
            *active = saved;
            if ok {
                return true;
            }
        }
        let Some(&event) = self.events.get(at) else {
            return self.final_state.is_none_or(|f| f == state);
        };
        match event {
            Event::Invoke(i) => {
                active[i] = Some((state.clone(), state.clone()));
                let ok = self.dfs(at + 1, state, placed, active);
                active[i] = None;
                ok
            }
            Event::Response(i) => {
                if has_effect(&self.ops[i]) && !placed[i] {
                    return false;
                }
                let (o, u) = active[i].take().expect("invoked before response");
                let ok = contract_holds(&self.ops[i], &o, &u) && self.dfs(at + 1, state, placed, active);
                active[i] = Some((o, u));
                ok
            }
        }
    }
}

/// True if some placement of update effects makes every operation's result
/// legal, starting from an empty set (and ending at `final_state`, if
/// given).
pub fn legal(history: &History, final_state: Option<&Set>) -> bool {
    let ops = &history.records;
    let mut timed: Vec<(u64, Event)> = Vec::with_capacity(2 * ops.len());
    for (i, r) in ops.iter().enumerate() {
        timed.push((r.invoke, Event::Invoke(i)));
        timed.push((r.response, Event::Response(i)));
    }
    timed.sort();
    let search = Search { ops, events: timed.into_iter().map(|(_, e)| e).collect(), final_state };
    search.dfs(0, &Set::new(), &mut vec![false; ops.len()], &mut vec![None; ops.len()])
}

/// True if applying the successful updates in some order, each valid,
/// starting from an empty set, yields `final_state`.
pub fn serially_reachable(history: &History, final_state: &Set) -> bool {
    let updates: Vec<&OpRecord> = history.records.iter().filter(|r| has_effect(r)).collect();
    fn go(updates: &[&OpRecord], used: &mut Vec<bool>, state: &mut Set, target: &Set) -> bool {
        if used.iter().all(|u| *u) {
            return state == target;
        }
        for i in 0..updates.len() {
            if used[i] {
                continue;
            }
            let mut next = state.clone();
            if !apply(updates[i], &mut next) {
                continue;
            }
            used[i] = true;
            let ok = go(updates, used, &mut next, target);
            used[i] = false;
            if ok {
                return true;
            }
        }
        false
    }
    go(&updates, &mut vec![false; updates.len()], &mut Set::new(), final_state)
}
