//! Single-threaded semantics against the sorted-set oracle, and the four
//! canonical update scenarios with their exact post-states.

use kst::{KaryTree, ModelSet, Shape};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

#[test]
fn empty_tree_basics() {
    let tree = KaryTree::new(4).unwrap();
    assert!(!tree.contains(7));
    assert!(!tree.remove(3));
    assert_eq!(tree.range_query_keys(1, 100), Vec::<u64>::new());
    tree.check_structure().unwrap();
}

#[test]
fn insert_then_find_then_delete() {
    let tree = KaryTree::new(4).unwrap();
    assert!(tree.insert(7));
    assert!(tree.contains(7));
    assert!(!tree.insert(7));
    assert!(tree.remove(7));
    assert!(!tree.contains(7));
    tree.check_structure().unwrap();
}

/// Sprouting insertion: inserting b into the full leaf {a, c, d} replaces it
/// with an internal node keyed (b, c, d) over single-key leaves sorted by
/// key.
#[test]
fn sprouting_insertion_post_state() {
    let (a, b, c, d) = (1, 2, 3, 4);
    let tree = KaryTree::new(4).unwrap();
    for key in [a, c, d] {
        assert!(tree.insert(key));
    }
    assert_eq!(tree.shape_below_root(), Shape::leaf(&[a, c, d]));
    assert!(tree.insert(b));
    assert_eq!(
        tree.shape_below_root(),
        Shape::internal(
            &[b, c, d],
            vec![
                Shape::leaf(&[a]),
                Shape::leaf(&[b]),
                Shape::leaf(&[c]),
                Shape::leaf(&[d]),
            ],
        )
    );
    tree.check_structure().unwrap();
}

/// Simple insertion: inserting b into {a, c} yields the leaf (a, b, c).
#[test]
fn simple_insertion_post_state() {
    let (a, b, c) = (1, 2, 3);
    let tree = KaryTree::new(4).unwrap();
    assert!(tree.insert(a));
    assert!(tree.insert(c));
    assert!(tree.insert(b));
    assert_eq!(tree.shape_below_root(), Shape::leaf(&[a, b, c]));
    tree.check_structure().unwrap();
}

/// Pruning deletion: deleting b from a parent whose only other non-empty
/// child is the leaf (e, f) splices that leaf up into the grandparent.
#[test]
fn pruning_deletion_post_state() {
    let (b, c, d, e, f) = (2, 3, 4, 5, 6);
    let tree = KaryTree::with_subtree(
        4,
        &Shape::internal(
            &[b, c, d],
            vec![
                Shape::leaf(&[]),
                Shape::leaf(&[b]),
                Shape::leaf(&[]),
                Shape::leaf(&[e, f]),
            ],
        ),
    );
    tree.check_structure().unwrap();
    assert!(tree.remove(b));
    assert_eq!(tree.shape_below_root(), Shape::leaf(&[e, f]));
    tree.check_structure().unwrap();
}

/// Simple deletion: deleting b from the leaf (a, b, d) yields (a, d).
#[test]
fn simple_deletion_post_state() {
    let (a, b, d) = (1, 2, 4);
    let tree = KaryTree::with_subtree(4, &Shape::leaf(&[a, b, d]));
    assert!(tree.remove(b));
    assert_eq!(tree.shape_below_root(), Shape::leaf(&[a, d]));
    tree.check_structure().unwrap();
}

/// Deleting the last key of a leaf leaves an empty leaf in place.
#[test]
fn simple_deletion_can_empty_a_leaf() {
    let tree = KaryTree::with_subtree(
        4,
        &Shape::internal(
            &[10, 20, 30],
            vec![
                Shape::leaf(&[5]),
                Shape::leaf(&[10]),
                Shape::leaf(&[20]),
                Shape::leaf(&[30]),
            ],
        ),
    );
    assert!(tree.remove(5));
    assert!(tree
        .shape_below_root()
        .eq(&Shape::internal(
            &[10, 20, 30],
            vec![
                Shape::leaf(&[]),
                Shape::leaf(&[10]),
                Shape::leaf(&[20]),
                Shape::leaf(&[30]),
            ],
        )));
    tree.check_structure().unwrap();
}

#[test]
fn search_finds_every_present_key() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let tree = KaryTree::new(4).unwrap();
    let mut model = ModelSet::new();
    for _ in 0..100 {
        let key = rng.random_range(0..1000);
        tree.insert(key);
        model.insert(key);
    }
    for key in model.keys() {
        assert!(tree.contains(key));
    }
    tree.check_structure().unwrap();
}

fn oracle_replay(k: usize, ops: usize, key_space: u64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tree = KaryTree::new(k).unwrap();
    let mut model = ModelSet::new();
    for i in 0..ops {
        let key = rng.random_range(0..key_space);
        match rng.random_range(0..100) {
            0..45 => assert_eq!(tree.insert(key), model.insert(key), "op {i}: insert {key}"),
            45..90 => assert_eq!(tree.remove(key), model.remove(key), "op {i}: remove {key}"),
            90..95 => assert_eq!(tree.contains(key), model.contains(key), "op {i}: find {key}"),
            _ => {
                let hi = (key + rng.random_range(0..50)).min(key_space - 1);
                assert_eq!(
                    tree.range_query_keys(key, hi),
                    model.range(key, hi),
                    "op {i}: range [{key}, {hi}]"
                );
            }
        }
    }
    assert_eq!(tree.snapshot_keys(), model.keys());
    tree.check_structure().unwrap();
}

#[test]
fn oracle_replay_across_arities() {
    for (k, seed) in [(2, 1), (3, 2), (4, 3), (8, 4), (16, 5)] {
        oracle_replay(k, 10_000, 500, seed);
    }
}

#[test]
fn oracle_replay_dense_key_space() {
    // Heavy collisions: every key gets hit repeatedly, exercising the
    // pruning path often.
    oracle_replay(4, 10_000, 16, 42);
    oracle_replay(2, 10_000, 16, 43);
}

#[test]
fn range_query_spec_examples() {
    // Keys 1..=20, k=4: [3, 7] is exactly 3,4,5,6,7.
    let tree = KaryTree::new(4).unwrap();
    for key in 1..=20 {
        tree.insert(key);
    }
    assert_eq!(tree.range_query_keys(3, 7), vec![3, 4, 5, 6, 7]);
    // Closed-interval boundary.
    assert_eq!(tree.range_query_keys(4, 4), vec![4]);
    // Leaves with keys partly outside the range are clipped.
    let tree = KaryTree::with_subtree(
        4,
        &Shape::internal(
            &[5, 9, 11],
            vec![
                Shape::leaf(&[1, 2]),
                Shape::leaf(&[5]),
                Shape::leaf(&[9, 10]),
                Shape::leaf(&[11]),
            ],
        ),
    );
    assert_eq!(tree.range_query_keys(4, 8), vec![5]);
    let guard = kst::pin();
    let result = tree.range_query(4, 8, &guard);
    assert_eq!(result.leaves().len(), 1);
    assert_eq!(result.leaves()[0].keys(), &[5]);
    assert_eq!(result.attempts(), 1);
}

#[test]
fn range_result_leaves_are_in_dfs_order() {
    let tree = KaryTree::new(4).unwrap();
    for key in (0..60).rev() {
        tree.insert(key);
    }
    let guard = kst::pin();
    let result = tree.range_query(10, 40, &guard);
    let flat: Vec<u64> = result.keys();
    let mut sorted = flat.clone();
    sorted.sort_unstable();
    assert_eq!(flat, sorted);
    assert_eq!(flat, (10..=40).collect::<Vec<u64>>());
}

#[test]
#[should_panic(expected = "range bounds out of order")]
fn range_query_rejects_reversed_bounds() {
    let tree = KaryTree::new(4).unwrap();
    tree.range_query_keys(5, 4);
}

#[test]
#[should_panic(expected = "sentinel")]
fn sentinel_key_is_rejected() {
    let tree = KaryTree::new(4).unwrap();
    tree.insert(u64::MAX);
}
