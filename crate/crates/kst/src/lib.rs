//! A non-blocking k-ary search tree implementing the ordered-set ADT —
//! `insert`, `remove`, `contains` — plus linearizable closed-interval range
//! queries.
//!
//! The tree is leaf-oriented: internal nodes carry `k-1` immutable routing
//! keys and `k` children; all set elements live in leaves holding up to
//! `k-1` keys each. Updates replace whole nodes with CAS and coordinate
//! through descriptors installed in per-node `pending` fields, so any thread
//! blocked by an in-flight operation finishes that operation itself and the
//! structure stays lock-free. Range queries are read-only: a depth-first
//! collect over the subtrees intersecting the range, validated either by
//! per-leaf tag bits (first attempt) or by comparing two consecutive
//! collects (later attempts).
//!
//! Unlinked nodes are reclaimed through epochs ([`pin`] / [`Guard`]); a
//! guard held across a query keeps every collected leaf readable even if
//! concurrent deletions unlink it.
//!
//! # Example
//!
//! ```
//! let set = kst::KaryTree::new(4).unwrap();
//! assert!(set.insert(3));
//! assert!(set.insert(7));
//! assert!(!set.insert(7));
//! assert_eq!(set.range_query_keys(0, 10), vec![3, 7]);
//! assert!(set.remove(3));
//! assert!(!set.contains(3));
//! ```

pub mod fail;

mod check;
mod node;
mod range;
mod reclaim;
mod update;

pub use check::{ModelSet, Shape, Violation};
pub use node::{ArityError, KaryTree, INFINITY};
pub use range::{LeafRef, RangeResult};
pub use reclaim::{flush, pin, Guard};

#[cfg(feature = "failpoints")]
pub use range::range_query_naive_bounded;
