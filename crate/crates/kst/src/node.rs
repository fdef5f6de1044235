//! Node and descriptor object model.
//!
//! The tree is leaf-oriented: every internal node has exactly `k` children
//! and `k-1` routing keys, and every leaf holds up to `k-1` element keys.
//! Key arrays are immutable after a node is published; updates replace whole
//! nodes. Each internal node carries a `pending` word naming the operation
//! currently allowed to modify it, and each leaf carries a write-once `tag`
//! bit set just before the leaf is unlinked.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crossbeam_epoch::Atomic;

/// Sentinel key, strictly greater than every real key. Excluded from the
/// user key space.
pub const INFINITY: u64 = u64::MAX;

/// Arity below 2 is rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArityError(pub usize);

impl std::fmt::Display for ArityError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tree arity must be at least 2, got {}", self.0)
    }
}

impl std::error::Error for ArityError {}

/// A snapshot of a `pending` word: a descriptor pointer packed with a 16-bit
/// install counter.
///
/// The counter closes an ABA hole that a garbage collector would close for
/// free: `HelpPrune` CASes a `pending` cell against a descriptor pointer that
/// was captured by *another* thread's search and embedded in a `PruneFlag`.
/// Without GC, that descriptor may have been reclaimed and its address reused
/// by the time a helper runs the CAS. The counter increments on every
/// successful install, so a stale snapshot can never match a recycled
/// address. 16 bits suffice: a wrap-around false match would require the same
/// address to be reinstalled in the same cell exactly 65536 installs later,
/// while a helper stalls holding a flag that provably blocks 65535 of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pending(u64);

const ADDR_BITS: u32 = 48;
const ADDR_MASK: u64 = (1 << ADDR_BITS) - 1;

impl Pending {
    fn pack(ptr: *const Descriptor, ver: u16) -> Pending {
        let addr = ptr as u64;
        debug_assert_eq!(addr & !ADDR_MASK, 0, "descriptor address exceeds 48 bits");
        Pending((u64::from(ver) << ADDR_BITS) | addr)
    }

    pub(crate) fn ptr(self) -> *const Descriptor {
        (self.0 & ADDR_MASK) as *const Descriptor
    }

    pub(crate) fn ver(self) -> u16 {
        (self.0 >> ADDR_BITS) as u16
    }
}

/// Atomic `pending` cell of an internal node.
pub(crate) struct PendingCell(AtomicU64);

impl PendingCell {
    pub(crate) fn new(initial: *const Descriptor) -> PendingCell {
        PendingCell(AtomicU64::new(Pending::pack(initial, 0).0))
    }

    pub(crate) fn load(&self) -> Pending {
        Pending(self.0.load(Ordering::Acquire))
    }

    /// Installs `new` if the cell still holds `expected` (pointer and
    /// version). The new word carries `expected.ver() + 1`.
    pub(crate) fn cas(&self, expected: Pending, new: *const Descriptor) -> bool {
        let new_word = Pending::pack(new, expected.ver().wrapping_add(1));
        self.0
            .compare_exchange(expected.0, new_word.0, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    /// CAS against a (pointer, version) pair reconstructed from a descriptor
    /// that records the version it was installed under.
    pub(crate) fn cas_from(
        &self,
        expected_ptr: *const Descriptor,
        expected_ver: u16,
        new: *const Descriptor,
    ) -> bool {
        self.cas(Pending::pack(expected_ptr, expected_ver), new)
    }
}

/// Operation record enabling cooperative helping. Immutable once published;
/// every install places a freshly allocated descriptor, never a reused one.
pub(crate) enum Descriptor {
    Clean,
    Replace(ReplaceFlag),
    Prune(PruneFlag),
    Mark(Mark),
}

impl Descriptor {
    pub(crate) fn is_clean(&self) -> bool {
        matches!(self, Descriptor::Clean)
    }
}

/// Intent to swing `p.children[pindex]` from leaf `l` to `new_child`.
pub(crate) struct ReplaceFlag {
    pub l: *const Node,
    pub p: *const Node,
    pub new_child: *const Node,
    pub pindex: usize,
    /// Version this flag was installed under in `p.pending`.
    pub install_ver: u16,
}

/// Intent to prune internal node `p` out of `gp`, promoting `p`'s surviving
/// child. `ppending` is the search's snapshot of `p.pending`, consumed by the
/// Mark CAS.
pub(crate) struct PruneFlag {
    pub l: *const Node,
    pub p: *const Node,
    pub gp: *const Node,
    pub ppending: Pending,
    pub gpindex: usize,
    /// Version this flag was installed under in `gp.pending`.
    pub install_ver: u16,
}

/// Condemns `prune.p`: installed in `p.pending`, never removed.
pub(crate) struct Mark {
    pub prune: *const Descriptor,
}

// Descriptors hold raw pointers into the shared tree. They are immutable
// after publication and their referents are kept alive by epoch guards for
// as long as any thread can still hold them.
unsafe impl Send for Descriptor {}
unsafe impl Sync for Descriptor {}

pub(crate) enum Node {
    Internal(Internal),
    Leaf(Leaf),
}

impl Node {
    pub(crate) fn as_internal(&self) -> Option<&Internal> {
        match self {
            Node::Internal(n) => Some(n),
            Node::Leaf(_) => None,
        }
    }

    pub(crate) fn as_leaf(&self) -> Option<&Leaf> {
        match self {
            Node::Internal(_) => None,
            Node::Leaf(l) => Some(l),
        }
    }

    /// A child is non-empty if it is internal or a leaf holding a key.
    pub(crate) fn is_non_empty(&self) -> bool {
        match self {
            Node::Internal(_) => true,
            Node::Leaf(l) => l.key_count > 0,
        }
    }
}

pub(crate) struct Internal {
    /// `k-1` routing keys, non-decreasing, ∞ entries only in the root.
    keys: Box<[u64]>,
    /// Exactly `k` children, never null.
    children: Box<[Atomic<Node>]>,
    pub(crate) pending: PendingCell,
}

impl Internal {
    pub(crate) fn new(keys: Vec<u64>, children: Vec<*const Node>) -> Internal {
        debug_assert_eq!(keys.len() + 1, children.len());
        let clean = Box::into_raw(Box::new(Descriptor::Clean));
        Internal {
            keys: keys.into_boxed_slice(),
            children: children.into_iter().map(Atomic::from).collect(),
            pending: PendingCell::new(clean),
        }
    }

    pub(crate) fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub(crate) fn degree(&self) -> usize {
        self.children.len()
    }

    pub(crate) fn child(&self, i: usize) -> &Atomic<Node> {
        &self.children[i]
    }

    /// Index of the child subtree that may hold `key`: the first `i` with
    /// `key < keys[i]`, or the last child if `key` is at least every key.
    /// Subtree `i` spans `[keys[i-1], keys[i])` with virtual bounds −∞/∞.
    pub(crate) fn child_index(&self, key: u64) -> usize {
        debug_assert_ne!(key, INFINITY);
        self.keys
            .iter()
            .position(|&a| key < a)
            .unwrap_or(self.keys.len())
    }
}

pub(crate) struct Leaf {
    /// `k-1` slots; the first `key_count` hold real keys in increasing
    /// order, the rest hold ∞.
    keys: Box<[u64]>,
    key_count: usize,
    tag: AtomicBool,
}

impl Leaf {
    /// Builds a leaf from sorted real keys, padding with ∞ up to `k-1` slots.
    pub(crate) fn new(real_keys: &[u64], k: usize) -> Leaf {
        debug_assert!(real_keys.len() <= k - 1);
        debug_assert!(real_keys.windows(2).all(|w| w[0] < w[1]));
        let mut keys = vec![INFINITY; k - 1];
        keys[..real_keys.len()].copy_from_slice(real_keys);
        Leaf {
            keys: keys.into_boxed_slice(),
            key_count: real_keys.len(),
            tag: AtomicBool::new(false),
        }
    }

    pub(crate) fn empty(k: usize) -> Leaf {
        Leaf::new(&[], k)
    }

    pub(crate) fn key_count(&self) -> usize {
        self.key_count
    }

    /// All `k-1` slots including ∞ padding.
    pub(crate) fn padded_keys(&self) -> &[u64] {
        &self.keys
    }

    pub(crate) fn real_keys(&self) -> &[u64] {
        &self.keys[..self.key_count]
    }

    pub(crate) fn contains(&self, key: u64) -> bool {
        self.real_keys().binary_search(&key).is_ok()
    }

    /// Sets the tag. Transitions only false→true; a tagged leaf stays tagged.
    pub(crate) fn set_tag(&self) {
        self.tag.store(true, Ordering::SeqCst);
    }

    pub(crate) fn tag(&self) -> bool {
        self.tag.load(Ordering::Acquire)
    }
}

pub(crate) fn alloc_node(n: Node) -> *const Node {
    Box::into_raw(Box::new(n))
}

pub(crate) fn alloc_descriptor(d: Descriptor) -> *const Descriptor {
    Box::into_raw(Box::new(d))
}

/// Frees a node subtree that was never published. Children of an internal
/// node built for publication are themselves unpublished, so ownership is
/// exclusive here.
pub(crate) unsafe fn free_unpublished_subtree(node: *const Node) {
    let boxed = Box::from_raw(node as *mut Node);
    if let Node::Internal(ref n) = *boxed {
        for c in n.children.iter() {
            let child = c.load(Ordering::Relaxed, crossbeam_epoch::unprotected());
            free_unpublished_subtree(child.as_raw());
        }
        drop(Box::from_raw(n.pending.load().ptr() as *mut Descriptor));
    }
}

/// Panics if `key` is the reserved ∞ sentinel.
pub(crate) fn assert_user_key(key: u64) {
    assert_ne!(key, INFINITY, "the maximum u64 is reserved as the ∞ sentinel");
}

/// Non-blocking ordered set over 64-bit integer keys, backed by a k-ary
/// leaf-oriented search tree with linearizable range queries.
///
/// All operations are safe to call concurrently from any number of threads.
pub struct KaryTree {
    k: usize,
    root: *const Node,
}

impl std::fmt::Debug for KaryTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KaryTree").field("k", &self.k).finish_non_exhaustive()
    }
}

// The tree is a collection of heap nodes linked by atomic cells; shared
// access follows the descriptor protocol and epoch reclamation.
unsafe impl Send for KaryTree {}
unsafe impl Sync for KaryTree {}

impl KaryTree {
    /// Creates an empty set. The root is an internal node whose keys are all
    /// ∞ and whose children are `k` distinct empty leaves, so every real key
    /// routes through the first child.
    pub fn new(k: usize) -> Result<KaryTree, ArityError> {
        if k < 2 {
            return Err(ArityError(k));
        }
        let children = (0..k)
            .map(|_| alloc_node(Node::Leaf(Leaf::empty(k))))
            .collect();
        let root = Internal::new(vec![INFINITY; k - 1], children);
        Ok(KaryTree {
            k,
            root: alloc_node(Node::Internal(root)),
        })
    }

    pub fn arity(&self) -> usize {
        self.k
    }

    pub(crate) fn root_ptr(&self) -> *const Node {
        self.root
    }

    pub(crate) fn root(&self) -> &Internal {
        unsafe { &*self.root }.as_internal().expect("root is internal")
    }
}

impl Drop for KaryTree {
    fn drop(&mut self) {
        // Exclusive access: free everything reachable through child links,
        // plus the descriptor each pending cell currently holds. Nodes that
        // were unlinked earlier were retired through the epoch collector and
        // are not reachable here.
        unsafe fn free_rec(node: *const Node) {
            let boxed = Box::from_raw(node as *mut Node);
            if let Node::Internal(ref n) = *boxed {
                for c in n.children.iter() {
                    let child = c.load(Ordering::Relaxed, crossbeam_epoch::unprotected());
                    free_rec(child.as_raw());
                }
                let pending = n.pending.load().ptr();
                // A ReplaceFlag that never performed its child CAS still owns
                // its unpublished replacement node.
                if let Descriptor::Replace(r) = &*pending {
                    let cur = n.children[r.pindex]
                        .load(Ordering::Relaxed, crossbeam_epoch::unprotected())
                        .as_raw();
                    if cur == r.l {
                        free_unpublished_subtree(r.new_child);
                    }
                }
                // A PruneFlag halted between its Pchild and Punflag steps
                // leaves the pruned-out parent unreachable; that node (and
                // its mark) is abandoned to the allocator. Only deliberately
                // halted test schedules can produce this state.
                drop(Box::from_raw(pending as *mut Descriptor));
            }
        }
        unsafe { free_rec(self.root) };
    }
}
