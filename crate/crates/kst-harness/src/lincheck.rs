//! Linearizability checking for small histories by exhaustive permutation
//! search with memoized failed states.
//!
//! An operation may be placed next in the witness order only if no other
//! unplaced operation responded before it was invoked. Completed operations
//! must reproduce their recorded return value against the sequential oracle;
//! pending operations (halted threads) may be linearized anywhere after
//! their invocation, or dropped entirely.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use kst::ModelSet;

use crate::history::{History, Op, OpRecord, Ret};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinResult {
    /// Indices into `history.records` in linearization order (dropped
    /// pending operations omitted).
    Linearizable(Vec<usize>),
    /// No legal order exists. Carries a small conflicting subset: the
    /// completed operations that remained unplaceable at the search's
    /// deepest frontier.
    NotLinearizable(Vec<usize>),
    /// Search budget exhausted before a verdict.
    Timeout,
}

impl LinResult {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, LinResult::Linearizable(_))
    }
}

/// Applies `op` to the model. For completed records the recorded return must
/// match; pending records accept whatever the model produces.
fn apply(model: &mut ModelSet, rec: &OpRecord) -> Result<Undo, ()> {
    let check_bool = |want: &Option<Ret>, got: bool| match want {
        None => Ok(()),
        Some(Ret::Bool(b)) if *b == got => Ok(()),
        _ => Err(()),
    };
    match rec.op {
        Op::Insert(x) => {
            let got = model.insert(x);
            check_bool(&rec.ret, got).map_err(|()| {
                if got {
                    model.remove(x);
                }
            })?;
            Ok(if got { Undo::Remove(x) } else { Undo::None })
        }
        Op::Remove(x) => {
            let got = model.remove(x);
            check_bool(&rec.ret, got).map_err(|()| {
                if got {
                    model.insert(x);
                }
            })?;
            Ok(if got { Undo::Insert(x) } else { Undo::None })
        }
        Op::Find(x) => {
            check_bool(&rec.ret, model.contains(x))?;
            Ok(Undo::None)
        }
        Op::Range(lo, hi) | Op::RangeNaive(lo, hi, _) => {
            match &rec.ret {
                None => Ok(Undo::None),
                // A bounded naive query that exhausted its attempts took no
                // effect; it can linearize anywhere.
                Some(Ret::Exhausted) => Ok(Undo::None),
                Some(Ret::Keys(keys)) if *keys == model.range(lo, hi) => Ok(Undo::None),
                _ => Err(()),
            }
        }
    }
}

enum Undo {
    None,
    Insert(u64),
    Remove(u64),
}

impl Undo {
    fn run(self, model: &mut ModelSet) {
        match self {
            Undo::None => {}
            Undo::Insert(x) => {
                model.insert(x);
            }
            Undo::Remove(x) => {
                model.remove(x);
            }
        }
    }
}

fn state_hash(model: &ModelSet, mask: u64) -> u64 {
    let mut h = DefaultHasher::new();
    mask.hash(&mut h);
    for k in model.keys() {
        k.hash(&mut h);
    }
    h.finish()
}

/// Checks `history` against a sequential ordered set initialized with
/// `initial_keys`. `budget` bounds the number of search nodes.
pub fn check_linearizable(history: &History, initial_keys: &[u64], budget: u64) -> LinResult {
    let n = history.records.len();
    assert!(n <= 64, "history too large for this checker");
    let mut model = ModelSet::new();
    for &k in initial_keys {
        model.insert(k);
    }

    // Real-time precedence: a -> b iff a responded before b was invoked.
    let precedes = |a: &OpRecord, b: &OpRecord| match a.response {
        Some(resp) => resp < b.invoke,
        None => false,
    };

    struct Search<'a> {
        records: &'a [OpRecord],
        precedes_mask: Vec<u64>,
        completed_mask: u64,
        failed: HashSet<u64>,
        budget: u64,
        nodes: u64,
        deepest_mask: u64,
        witness: Vec<usize>,
    }

    let mut precedes_mask = vec![0u64; n];
    for (i, a) in history.records.iter().enumerate() {
        for (j, b) in history.records.iter().enumerate() {
            if i != j && precedes(a, b) {
                // a must be placed before b: b is blocked while a unplaced.
                precedes_mask[j] |= 1 << i;
            }
        }
    }
    let completed_mask = history
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.completed())
        .fold(0u64, |m, (i, _)| m | 1 << i);

    impl Search<'_> {
        /// True once a witness is found.
        fn dfs(&mut self, placed: u64, model: &mut ModelSet) -> Option<bool> {
            self.nodes += 1;
            if self.nodes > self.budget {
                return None;
            }
            if placed & self.completed_mask == self.completed_mask {
                return Some(true);
            }
            if placed.count_ones() > self.deepest_mask.count_ones() {
                self.deepest_mask = placed;
            }
            let key = state_hash(model, placed);
            if self.failed.contains(&key) {
                return Some(false);
            }
            for i in 0..self.records.len() {
                let bit = 1u64 << i;
                if placed & bit != 0 {
                    continue;
                }
                // Every operation that really finished before this one began
                // must already be placed.
                if self.precedes_mask[i] & !placed != 0 {
                    continue;
                }
                if let Ok(undo) = apply(model, &self.records[i]) {
                    self.witness.push(i);
                    match self.dfs(placed | bit, model) {
                        Some(true) => return Some(true),
                        Some(false) => {
                            self.witness.pop();
                            undo.run(model);
                        }
                        None => return None,
                    }
                }
            }
            self.failed.insert(key);
            Some(false)
        }
    }

    let mut search = Search {
        records: &history.records,
        precedes_mask,
        completed_mask,
        failed: HashSet::new(),
        budget,
        nodes: 0,
        deepest_mask: 0,
        witness: Vec::new(),
    };
    match search.dfs(0, &mut model) {
        Some(true) => LinResult::Linearizable(search.witness),
        None => LinResult::Timeout,
        Some(false) => {
            let blocked: Vec<usize> = (0..n)
                .filter(|&i| {
                    history.records[i].completed() && search.deepest_mask & (1 << i) == 0
                })
                .collect();
            LinResult::NotLinearizable(blocked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(tid: usize, op: Op, invoke: u64, response: u64, ret: Ret) -> OpRecord {
        OpRecord {
            tid,
            op,
            invoke,
            response: Some(response),
            ret: Some(ret),
        }
    }

    #[test]
    fn single_thread_history_is_linearizable() {
        let h = History {
            records: vec![
                rec(0, Op::Insert(5), 1, 2, Ret::Bool(true)),
                rec(0, Op::Insert(5), 3, 4, Ret::Bool(false)),
                rec(0, Op::Range(0, 9), 5, 6, Ret::Keys(vec![5])),
            ],
        };
        assert!(check_linearizable(&h, &[], 1 << 20).is_linearizable());
    }

    #[test]
    fn overlapping_ops_may_commute() {
        // Both inserts overlap; the find sees only one of them — fine,
        // because the other can be ordered after the find.
        let h = History {
            records: vec![
                rec(0, Op::Insert(1), 1, 10, Ret::Bool(true)),
                rec(1, Op::Insert(2), 1, 10, Ret::Bool(true)),
                rec(2, Op::Range(0, 9), 2, 9, Ret::Keys(vec![2])),
            ],
        };
        assert!(check_linearizable(&h, &[], 1 << 20).is_linearizable());
    }

    #[test]
    fn stale_read_is_not_linearizable() {
        // find(5) runs strictly after insert(5) returned true, yet reports
        // absent.
        let h = History {
            records: vec![
                rec(0, Op::Insert(5), 1, 2, Ret::Bool(true)),
                rec(1, Op::Find(5), 3, 4, Ret::Bool(false)),
            ],
        };
        let res = check_linearizable(&h, &[], 1 << 20);
        assert_eq!(res, LinResult::NotLinearizable(vec![1]));
    }

    #[test]
    fn torn_range_is_not_linearizable() {
        // x moves from 1 to 2 via remove+insert; a range query overlapping
        // both sees neither — no single point has {} as [0,9] contents.
        let h = History {
            records: vec![
                rec(0, Op::Remove(1), 2, 3, Ret::Bool(true)),
                rec(0, Op::Insert(2), 4, 5, Ret::Bool(true)),
                rec(1, Op::Range(0, 9), 1, 6, Ret::Keys(vec![])),
            ],
        };
        assert!(!check_linearizable(&h, &[1], 1 << 20).is_linearizable());
    }

    #[test]
    fn pending_ops_may_take_effect_or_not() {
        // A pending insert may be linearized to explain the find...
        let h = History {
            records: vec![
                OpRecord {
                    tid: 0,
                    op: Op::Insert(5),
                    invoke: 1,
                    response: None,
                    ret: None,
                },
                rec(1, Op::Find(5), 2, 3, Ret::Bool(true)),
            ],
        };
        assert!(check_linearizable(&h, &[], 1 << 20).is_linearizable());
        // ...or dropped to explain its absence.
        let h = History {
            records: vec![
                OpRecord {
                    tid: 0,
                    op: Op::Insert(5),
                    invoke: 1,
                    response: None,
                    ret: None,
                },
                rec(1, Op::Find(5), 2, 3, Ret::Bool(false)),
            ],
        };
        assert!(check_linearizable(&h, &[], 1 << 20).is_linearizable());
    }

    #[test]
    fn respects_initial_state() {
        let h = History {
            records: vec![rec(0, Op::Insert(5), 1, 2, Ret::Bool(false))],
        };
        assert!(check_linearizable(&h, &[5], 1 << 20).is_linearizable());
        assert!(!check_linearizable(&h, &[], 1 << 20).is_linearizable());
    }
}
