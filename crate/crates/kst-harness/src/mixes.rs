//! Mix families for the interleaving suites: thread scripts over a tiny key
//! space, designed so every update path (simple/sprouting insert,
//! simple/pruning delete) and range queries collide on the same nodes.

use kst::Shape;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::exec::RunSpec;
use crate::history::Op;

/// Small scripted mixes over keys {0..3}: every pair of single ops, plus
/// curated two- and three-op scripts that force flag/help interactions.
pub fn curated_mixes(k: usize) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    let singles = [
        Op::Insert(1),
        Op::Insert(2),
        Op::Remove(1),
        Op::Remove(2),
        Op::Find(1),
        Op::Range(0, 3),
    ];
    // All unordered pairs of single-op threads, over a couple of initial
    // states.
    for initial in [vec![], vec![1], vec![1, 2], vec![0, 1, 2, 3]] {
        for (i, &a) in singles.iter().enumerate() {
            for &b in &singles[i..] {
                let mut spec = RunSpec::new(k, vec![vec![a], vec![b]]);
                spec.initial_keys = initial.clone();
                specs.push(spec);
            }
        }
    }
    // Same-leaf contention with three threads.
    for initial in [vec![1], vec![1, 2, 3]] {
        let mut spec = RunSpec::new(
            k,
            vec![
                vec![Op::Insert(0), Op::Remove(1)],
                vec![Op::Insert(2), Op::Remove(2)],
                vec![Op::Range(0, 3)],
            ],
        );
        spec.initial_keys = initial.clone();
        specs.push(spec);

        let mut spec = RunSpec::new(
            k,
            vec![
                vec![Op::Remove(1), Op::Insert(1)],
                vec![Op::Find(1), Op::Find(1)],
            ],
        );
        spec.initial_keys = initial;
        specs.push(spec);
    }
    // Pruning pressure: deletes that empty sibling leaves, racing a query.
    let mut spec = RunSpec::new(
        k,
        vec![
            vec![Op::Remove(1), Op::Remove(2)],
            vec![Op::Remove(3), Op::Insert(0)],
            vec![Op::Range(0, 3)],
        ],
    );
    spec.initial_keys = vec![1, 2, 3];
    specs.push(spec);
    specs
}

/// The tagging-fails-validation scenario: a query collecting two leaves
/// while an insert replaces one of them. Built on an explicit two-leaf
/// shape so the insert is a simple (in-leaf) replacement.
pub fn collected_scenario(k: usize) -> RunSpec {
    assert!(k >= 2);
    // Subtree: internal with leaves (1) and (5); insert 6 lands in the
    // second leaf, the query spans both.
    let mut children = vec![Shape::leaf(&[1]), Shape::leaf(&[5])];
    let mut keys = vec![5u64];
    while children.len() < k {
        children.push(Shape::leaf(&[]));
        keys.push(kst::INFINITY);
    }
    keys.truncate(k - 1);
    let mut spec = RunSpec::new(
        k,
        vec![vec![Op::Range(0, 9)], vec![Op::Insert(6)]],
    );
    spec.initial_shape = Some(Shape::internal(&keys, children));
    spec
}

/// Seeded random mixes: `threads` scripts of `ops_per_thread` ops drawn over
/// a 4-key space with update-heavy weights, random small initial sets.
pub fn random_mixes(
    k: usize,
    threads: usize,
    ops_per_thread: usize,
    count: usize,
    seed: u64,
) -> Vec<RunSpec> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scripts = (0..threads)
                .map(|_| {
                    (0..ops_per_thread)
                        .map(|_| {
                            let key = rng.random_range(0..4u64);
                            match rng.random_range(0..10) {
                                0..4 => Op::Insert(key),
                                4..8 => Op::Remove(key),
                                8 => Op::Find(key),
                                _ => {
                                    let hi = rng.random_range(key..4);
                                    Op::Range(key, hi)
                                }
                            }
                        })
                        .collect()
                })
                .collect();
            let mut spec = RunSpec::new(k, scripts);
            let initial = rng.random_range(0..16u32);
            spec.initial_keys = (0..4u64).filter(|&x| initial & (1 << x) != 0).collect();
            spec
        })
        .collect()
}
