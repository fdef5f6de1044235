//! Safe memory reclamation for unlinked nodes and superseded descriptors.
//!
//! The original algorithm assumes a garbage collector; here epoch-based
//! reclamation stands in. A guard pinned for the duration of one operation
//! attempt keeps every node and descriptor that was reachable at pin time
//! alive, which in particular covers a range query reading the tags of
//! leaves that concurrent updates have already unlinked. Hazard pointers
//! would not fit: a single range query holds an unbounded set of leaves.
//!
//! Retire responsibilities are fixed so each object is retired exactly once:
//! the thread whose CAS removes the last shared reference to an object
//! retires it. Concretely, a flag CAS retires the descriptor it superseded,
//! and an unflag CAS retires the finished operation's descriptor together
//! with the nodes that operation unlinked (which stay reachable through the
//! descriptor until the unflag).

use crossbeam_epoch as epoch;

use crate::node::{Descriptor, Node};

pub use epoch::Guard;

/// Enters a reclamation epoch. Guards are cheap and re-entrant; while one is
/// held, nothing reachable at acquisition is freed.
pub fn pin() -> Guard {
    epoch::pin()
}

/// Schedules an unlinked node for deallocation once all current guards are
/// released.
///
/// The caller must guarantee the node is no longer reachable from the root
/// via current child pointers and that no other thread will retire it.
pub(crate) unsafe fn retire_node(guard: &Guard, node: *const Node) {
    crate::fail::fail_retire!(node as usize);
    audit::on_retire(node as usize);
    guard.defer_unchecked(move || {
        audit::on_free(node as usize);
        drop(Box::from_raw(node as *mut Node));
    });
}

/// Schedules a superseded descriptor for deallocation, same contract as
/// [`retire_node`].
pub(crate) unsafe fn retire_descriptor(guard: &Guard, desc: *const Descriptor) {
    crate::fail::fail_retire!(desc as usize);
    audit::on_retire(desc as usize);
    guard.defer_unchecked(move || {
        audit::on_free(desc as usize);
        drop(Box::from_raw(desc as *mut Descriptor));
    });
}

/// Drives the collector until deferred destructors have had a chance to run.
/// Useful after quiescence to bound the memory footprint.
pub fn flush() {
    for _ in 0..8 {
        pin().flush();
    }
}

// Double-retire tripwire for debug builds: records live retired addresses
// and clears them when the deferred destructor actually runs, so address
// reuse after a real free never trips it.
#[cfg(debug_assertions)]
mod audit {
    use std::collections::HashSet;
    use std::sync::Mutex;
    use std::sync::OnceLock;

    const SHARDS: usize = 64;

    fn shards() -> &'static [Mutex<HashSet<usize>>; SHARDS] {
        static AUDIT: OnceLock<[Mutex<HashSet<usize>>; SHARDS]> = OnceLock::new();
        AUDIT.get_or_init(|| std::array::from_fn(|_| Mutex::new(HashSet::new())))
    }

    fn shard(addr: usize) -> &'static Mutex<HashSet<usize>> {
        &shards()[(addr >> 4) % SHARDS]
    }

    pub(super) fn on_retire(addr: usize) {
        let fresh = shard(addr).lock().unwrap().insert(addr);
        assert!(fresh, "object at {addr:#x} retired twice");
    }

    pub(super) fn on_free(addr: usize) {
        shard(addr).lock().unwrap().remove(&addr);
    }
}

#[cfg(not(debug_assertions))]
mod audit {
    #[inline(always)]
    pub(super) fn on_retire(_addr: usize) {}
    #[inline(always)]
    pub(super) fn on_free(_addr: usize) {}
}
