//! Multi-threaded stress: real threads, real contention. Correctness is
//! checked at quiescence (the invariant walker plus per-thread oracles on
//! disjoint key ranges); a mixed run additionally keeps range queries and
//! updates in flight together.
//!
//! Durations scale with the `KST_STRESS_SECS` env var (default short, so the
//! suite stays fast; the acceptance suite runs the long version).

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use kst::{KaryTree, ModelSet};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

fn stress_secs() -> f64 {
    std::env::var("KST_STRESS_SECS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0)
}

/// Each thread owns a disjoint key range; at quiescence every thread's slice
/// of the tree must equal its local oracle.
fn partitioned_round(k: usize, threads: usize, secs: f64) {
    let tree = KaryTree::new(k).unwrap();
    let stop = AtomicBool::new(false);
    let span = 1_000u64;
    let models: Vec<ModelSet> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for tid in 0..threads {
            let tree = &tree;
            let stop = &stop;
            handles.push(scope.spawn(move || {
                let base = tid as u64 * span;
                let mut rng = ChaCha12Rng::seed_from_u64(0xC0FFEE + tid as u64);
                let mut model = ModelSet::new();
                while !stop.load(Ordering::Relaxed) {
                    let key = base + rng.random_range(0..span);
                    if rng.random_bool(0.5) {
                        assert_eq!(tree.insert(key), model.insert(key));
                    } else {
                        assert_eq!(tree.remove(key), model.remove(key));
                    }
                }
                model
            }));
        }
        std::thread::sleep(Duration::from_secs_f64(secs));
        stop.store(true, Ordering::Relaxed);
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    tree.check_structure().unwrap();
    let all = tree.snapshot_keys();
    for (tid, model) in models.iter().enumerate() {
        let base = tid as u64 * span;
        let mine: Vec<u64> = all
            .iter()
            .copied()
            .filter(|&x| x >= base && x < base + span)
            .collect();
        assert_eq!(mine, model.keys(), "thread {tid} slice diverged");
    }
    assert_eq!(all.len(), models.iter().map(|m| m.len()).sum::<usize>());
}

#[test]
fn partitioned_keys_match_local_oracles() {
    for k in [2, 4, 16] {
        partitioned_round(k, 4, stress_secs());
    }
}

/// All threads on one key space, every operation kind at once. Checks that
/// range queries always return sorted in-range keys and that the final tree
/// is structurally sound.
fn mixed_round(k: usize, threads: usize, secs: f64) {
    let tree = KaryTree::new(k).unwrap();
    let stop = AtomicBool::new(false);
    let key_space = 2_000u64;
    std::thread::scope(|scope| {
        for tid in 0..threads {
            let tree = &tree;
            let stop = &stop;
            scope.spawn(move || {
                let mut rng = ChaCha12Rng::seed_from_u64(0xBEEF + tid as u64);
                while !stop.load(Ordering::Relaxed) {
                    let key = rng.random_range(0..key_space);
                    match rng.random_range(0..100) {
                        0..40 => {
                            tree.insert(key);
                        }
                        40..80 => {
                            tree.remove(key);
                        }
                        80..90 => {
                            tree.contains(key);
                        }
                        _ => {
                            let hi = (key + 100).min(key_space - 1);
                            let keys = tree.range_query_keys(key, hi);
                            assert!(keys.windows(2).all(|w| w[0] < w[1]), "unsorted range result");
                            assert!(keys.iter().all(|&x| key <= x && x <= hi), "out-of-range key");
                        }
                    }
                }
            });
        }
        std::thread::sleep(Duration::from_secs_f64(secs));
        stop.store(true, Ordering::Relaxed);
    });
    tree.check_structure().unwrap();
    kst::flush();
}

#[test]
fn mixed_workload_stays_sound() {
    for k in [2, 4, 16] {
        mixed_round(k, 8, stress_secs());
    }
}
