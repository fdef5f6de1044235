//! Correctness machinery: a sequential ordered-set oracle, a structural
//! invariant walker for quiescent trees, whole-tree snapshots, and a shape
//! DSL for building and comparing exact tree states in tests.

use std::collections::BTreeSet;
use std::sync::atomic::Ordering;

use crate::node::{alloc_node, Internal, KaryTree, Leaf, Node, INFINITY};
use crate::reclaim::{self, Guard};

/// Sequential ordered set with the same operation contract as [`KaryTree`]:
/// ground truth for replay tests.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ModelSet {
    set: BTreeSet<u64>,
}

impl ModelSet {
    pub fn new() -> ModelSet {
        ModelSet::default()
    }

    pub fn insert(&mut self, key: u64) -> bool {
        self.set.insert(key)
    }

    pub fn remove(&mut self, key: u64) -> bool {
        self.set.remove(&key)
    }

    pub fn contains(&self, key: u64) -> bool {
        self.set.contains(&key)
    }

    /// Keys in the closed interval `[lo, hi]`, increasing.
    pub fn range(&self, lo: u64, hi: u64) -> Vec<u64> {
        self.set.range(lo..=hi).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn keys(&self) -> Vec<u64> {
        self.set.iter().copied().collect()
    }
}

/// One structural-invariant violation, with the child path that reaches it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Child indices from the root, e.g. `root.c0.c2`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Exact tree state for tests: build with [`KaryTree::with_subtree`],
/// compare with [`KaryTree::shape`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Internal { keys: Vec<u64>, children: Vec<Shape> },
    Leaf { keys: Vec<u64> },
}

impl Shape {
    pub fn leaf(keys: &[u64]) -> Shape {
        Shape::Leaf { keys: keys.to_vec() }
    }

    pub fn internal(keys: &[u64], children: Vec<Shape>) -> Shape {
        Shape::Internal {
            keys: keys.to_vec(),
            children,
        }
    }

    fn build(&self, k: usize) -> *const Node {
        match self {
            Shape::Leaf { keys } => alloc_node(Node::Leaf(Leaf::new(keys, k))),
            Shape::Internal { keys, children } => {
                assert_eq!(children.len(), k, "internal shape must have k children");
                assert_eq!(keys.len(), k - 1, "internal shape must have k-1 keys");
                let built = children.iter().map(|c| c.build(k)).collect();
                alloc_node(Node::Internal(Internal::new(keys.clone(), built)))
            }
        }
    }
}

fn node_shape(node: *const Node, guard: &Guard) -> Shape {
    match unsafe { &*node } {
        Node::Leaf(l) => Shape::Leaf {
            keys: l.real_keys().to_vec(),
        },
        Node::Internal(n) => Shape::Internal {
            keys: n.keys().to_vec(),
            children: (0..n.degree())
                .map(|i| node_shape(n.child(i).load(Ordering::Acquire, guard).as_raw(), guard))
                .collect(),
        },
    }
}

struct Walker<'a> {
    k: usize,
    root: *const Node,
    violations: &'a mut Vec<Violation>,
}

impl Walker<'_> {
    fn report(&mut self, path: &str, message: String) {
        self.violations.push(Violation {
            path: path.to_string(),
            message,
        });
    }

    /// Every real key in the subtree must lie in `[lo, hi)`, where `hi` may
    /// be the ∞ sentinel.
    fn walk(&mut self, node: *const Node, lo: u64, hi: u64, path: &str, guard: &Guard) {
        if node.is_null() {
            self.report(path, "null child pointer".to_string());
            return;
        }
        match unsafe { &*node } {
            Node::Leaf(l) => self.check_leaf(l, lo, hi, path),
            Node::Internal(n) => {
                let keys = n.keys();
                if n.degree() != self.k {
                    self.report(path, format!("internal has {} children, want {}", n.degree(), self.k));
                    return;
                }
                if keys.len() != self.k - 1 {
                    self.report(path, format!("internal has {} keys, want {}", keys.len(), self.k - 1));
                    return;
                }
                let is_root = node == self.root;
                let mut seen_inf = false;
                for (i, &a) in keys.iter().enumerate() {
                    if a == INFINITY {
                        if !is_root {
                            self.report(path, format!("non-root internal key a{i} is ∞"));
                        }
                        seen_inf = true;
                    } else {
                        if seen_inf {
                            self.report(path, format!("real key a{i} after an ∞ entry"));
                        }
                        if i > 0 && keys[i - 1] != INFINITY && keys[i - 1] >= a {
                            self.report(path, format!("keys a{} and a{i} out of order", i - 1));
                        }
                        if a < lo || a > hi {
                            self.report(path, format!("routing key a{i}={a} outside [{lo}, {hi}]"));
                        }
                    }
                }
                let pending = n.pending.load().ptr();
                if !unsafe { &*pending }.is_clean() {
                    self.report(path, "pending descriptor is not Clean at quiescence".to_string());
                }
                for i in 0..self.k {
                    let child = n.child(i).load(Ordering::Acquire, guard).as_raw();
                    let clo = if i == 0 { lo } else { keys[i - 1] };
                    let chi = if i == self.k - 1 { hi } else { keys[i] };
                    let cpath = format!("{path}.c{i}");
                    self.walk(child, clo, chi, &cpath, guard);
                }
            }
        }
    }

    fn check_leaf(&mut self, l: &Leaf, lo: u64, hi: u64, path: &str) {
        let padded = l.padded_keys();
        if padded.len() != self.k - 1 {
            self.report(path, format!("leaf has {} slots, want {}", padded.len(), self.k - 1));
            return;
        }
        if l.key_count() > self.k - 1 {
            self.report(path, format!("leaf keyCount {} exceeds {}", l.key_count(), self.k - 1));
            return;
        }
        for (i, &x) in padded.iter().enumerate() {
            if i < l.key_count() {
                if x == INFINITY {
                    self.report(path, format!("∞ within the first keyCount slots (slot {i})"));
                }
                if i > 0 && padded[i - 1] >= x {
                    self.report(path, format!("leaf keys slot {} and {i} out of order", i - 1));
                }
                if x < lo || x >= hi {
                    self.report(path, format!("leaf key {x} outside [{lo}, {hi})"));
                }
            } else if x != INFINITY {
                self.report(path, format!("padding slot {i} holds {x}, want ∞"));
            }
        }
    }
}

impl KaryTree {
    /// Verifies the quiescent structural invariants: full k-ary shape, key
    /// ordering and ∞-padding rules, the search-tree property, and that
    /// every `pending` field is Clean. Call only while no operations run.
    pub fn check_structure(&self) -> Result<(), Vec<Violation>> {
        let guard = reclaim::pin();
        let mut violations = Vec::new();
        let mut walker = Walker {
            k: self.arity(),
            root: self.root_ptr(),
            violations: &mut violations,
        };
        walker.walk(self.root_ptr(), 0, INFINITY, "root", &guard);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// All keys currently in the set, in increasing order. Consistent only
    /// at quiescence; concurrent updates may tear the walk.
    pub fn snapshot_keys(&self) -> Vec<u64> {
        let guard = reclaim::pin();
        let mut out = Vec::new();
        fn rec(node: *const Node, out: &mut Vec<u64>, guard: &Guard) {
            match unsafe { &*node } {
                Node::Leaf(l) => out.extend_from_slice(l.real_keys()),
                Node::Internal(n) => {
                    for i in 0..n.degree() {
                        rec(n.child(i).load(Ordering::Acquire, guard).as_raw(), out, guard);
                    }
                }
            }
        }
        rec(self.root_ptr(), &mut out, &guard);
        out
    }

    /// Exact current shape of the whole tree including the root. Quiescent
    /// use only.
    pub fn shape(&self) -> Shape {
        let guard = reclaim::pin();
        node_shape(self.root_ptr(), &guard)
    }

    /// Shape of the subtree under the root's first child — the part the
    /// update figures draw.
    pub fn shape_below_root(&self) -> Shape {
        let guard = reclaim::pin();
        node_shape(
            self.root().child(0).load(Ordering::Acquire, &guard).as_raw(),
            &guard,
        )
    }

    /// Builds a tree whose root's first child is the given subtree. For
    /// scripted test states; the shape must satisfy the structural
    /// invariants for arity `k`.
    pub fn with_subtree(k: usize, subtree: &Shape) -> KaryTree {
        let tree = KaryTree::new(k).expect("valid arity");
        let built = subtree.build(k);
        let guard = reclaim::pin();
        let old = tree.root().child(0).load(Ordering::Acquire, &guard).as_raw();
        tree.root().child(0).store(
            crossbeam_epoch::Owned::from(unsafe { Box::from_raw(built as *mut Node) }),
            Ordering::SeqCst,
        );
        unsafe { crate::node::free_unpublished_subtree(old) };
        tree
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossbeam_epoch::Owned;

    #[test]
    fn model_set_examples() {
        let mut m = ModelSet::new();
        assert!(m.insert(5));
        assert!(!m.insert(5));
        for key in 1..=9 {
            m.insert(key);
        }
        assert_eq!(m.range(3, 7), vec![3, 4, 5, 6, 7]);
        assert!(m.remove(5));
        assert!(!m.remove(5));
        assert_eq!(m.len(), 8);
    }

    #[test]
    fn walker_passes_fresh_and_scripted_trees() {
        KaryTree::new(4).unwrap().check_structure().unwrap();
        let tree = KaryTree::with_subtree(
            3,
            &Shape::internal(
                &[10, 20],
                vec![Shape::leaf(&[1, 5]), Shape::leaf(&[10]), Shape::leaf(&[25])],
            ),
        );
        tree.check_structure().unwrap();
        assert_eq!(tree.snapshot_keys(), vec![1, 5, 10, 25]);
    }

    #[test]
    fn walker_flags_corrupted_child() {
        let tree = KaryTree::with_subtree(
            3,
            &Shape::internal(
                &[10, 20],
                vec![Shape::leaf(&[1, 5]), Shape::leaf(&[10]), Shape::leaf(&[25])],
            ),
        );
        // Plant a leaf whose key violates the subtree bounds of child 1.
        let guard = reclaim::pin();
        let sub = tree.root().child(0).load(Ordering::Acquire, &guard).as_raw();
        let sub = unsafe { &*sub }.as_internal().unwrap();
        let old = sub.child(1).load(Ordering::Acquire, &guard).as_raw();
        sub.child(1)
            .store(Owned::new(Node::Leaf(Leaf::new(&[99], 3))), Ordering::SeqCst);
        unsafe { crate::node::free_unpublished_subtree(old) };
        let violations = tree.check_structure().unwrap_err();
        assert!(
            violations.iter().any(|v| v.path == "root.c0.c1" && v.message.contains("99")),
            "got {violations:?}"
        );
    }

    #[test]
    fn shape_round_trip() {
        let shape = Shape::internal(
            &[10, 20],
            vec![Shape::leaf(&[1, 5]), Shape::leaf(&[10]), Shape::leaf(&[25])],
        );
        let tree = KaryTree::with_subtree(3, &shape);
        assert_eq!(tree.shape_below_root(), shape);
    }
}

/// Addresses of every node and descriptor reachable from the root via
/// current child pointers and `pending` cells. Test instrumentation for the
/// retire-unreachability probe.
#[cfg(feature = "failpoints")]
impl KaryTree {
    pub fn debug_reachable_addrs(&self) -> Vec<usize> {
        let guard = reclaim::pin();
        let mut out = Vec::new();
        fn rec(node: *const Node, out: &mut Vec<usize>, guard: &Guard) {
            out.push(node as usize);
            if let Node::Internal(n) = unsafe { &*node } {
                out.push(n.pending.load().ptr() as usize);
                for i in 0..n.degree() {
                    rec(n.child(i).load(Ordering::Acquire, guard).as_raw(), out, guard);
                }
            }
        }
        rec(self.root_ptr(), &mut out, &guard);
        out
    }
}
