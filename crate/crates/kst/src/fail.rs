//! Named yield points inside the tree operations.
//!
//! With the `failpoints` feature enabled, every shared-memory CAS/store gets a
//! yield point before it and every shared read of a `pending`/child/`tag` cell
//! gets one after it. A per-thread sink (installed by a test scheduler)
//! observes each event and may block the calling thread to serialize it
//! against other threads. Without the feature every hook is an empty inline
//! function and the tree compiles to the uninstrumented fast path.

/// Identifies a yield point. Names follow the CAS step names of the update
/// protocol (Rflag, Rchild, Runflag, Pflag, Mark, Backtrack, Pchild, Punflag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    SearchReadPending,
    SearchReadChild,
    CcountReadChild,
    HelpReadPending,
    HelpPruneReadPending,
    HelpMarkedReadChild,
    BeforeRflagCas,
    AfterRflagCas,
    BeforePflagCas,
    AfterPflagCas,
    BeforeMarkCas,
    AfterMarkCas,
    BeforeBacktrackCas,
    AfterBacktrackCas,
    BeforeRchildCas,
    AfterRchildCas,
    BeforePchildCas,
    AfterPchildCas,
    BeforeRunflagCas,
    AfterRunflagCas,
    BeforePunflagCas,
    AfterPunflagCas,
    BeforeTagStoreReplace,
    AfterTagStoreReplace,
    BeforeTagStoreMarked,
    AfterTagStoreMarked,
    RqCollectStart,
    RqReadChild,
    RqValidateStart,
    RqReadTag,
}

impl Label {
    /// Labels a scheduler may treat as a context-switch opportunity.
    /// `Retire` events (see [`Event::Retire`]) are observational only.
    pub fn yields(self) -> bool {
        true
    }
}

/// A leaf observed at the instant a child CAS unlinked it.
#[derive(Debug, Clone, Copy)]
pub struct UnlinkedLeaf {
    /// Address of the leaf node, usable as an identity token.
    pub addr: usize,
    /// Value of the leaf's tag at the CAS (read on the same thread before any
    /// other thread could run).
    pub tag: bool,
}

/// What happened at a hook.
#[derive(Debug, Clone)]
pub enum Event {
    /// Plain yield point.
    Point(Label),
    /// Yield point immediately after a CAS, with its outcome. `unlinked` is
    /// non-empty only for successful child CASes and lists every leaf the CAS
    /// removed from the tree. For successful child CASes, `owner_installed`
    /// reports whether the owning descriptor was still installed in the
    /// protected node's `pending` at the CAS.
    Cas {
        label: Label,
        success: bool,
        unlinked: Vec<UnlinkedLeaf>,
        owner_installed: Option<bool>,
    },
    /// A node or descriptor was retired (non-yielding, observational).
    Retire { addr: usize },
}

/// Runtime switches that disable one of the range-query support lines each,
/// for mutation-sensitivity testing. All off in normal operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mutations {
    /// The leaf tag field is absent: stores are skipped and reads yield false.
    pub tag_field_removed: bool,
    /// HelpReplace does not tag the leaf it replaces.
    pub skip_replace_tag_store: bool,
    /// HelpMarked skips its tag loop entirely.
    pub skip_marked_tag_loop: bool,
    /// HelpMarked runs its loop but skips the tag store inside it.
    pub skip_marked_tag_store: bool,
    /// Range-query validation reads every tag as false.
    pub rq_tag_reads_false: bool,
    /// Range-query validation skips the double-collect comparison on
    /// attempts after the first (they accept vacuously).
    pub skip_double_collect: bool,
}

#[cfg(feature = "failpoints")]
pub use enabled::*;

#[cfg(feature = "failpoints")]
mod enabled {
    use super::{Event, Label, Mutations};
    use std::cell::{Cell, RefCell};
    use std::sync::Arc;

    /// Observer for instrumentation events, installed per thread.
    pub trait Sink: Send + Sync {
        /// Called at every hook on the instrumented thread. May block.
        fn on_event(&self, ev: &Event);
    }

    thread_local! {
        static SINK: RefCell<Option<Arc<dyn Sink>>> = const { RefCell::new(None) };
        static MUTATIONS: Cell<Mutations> = const { Cell::new(Mutations {
            tag_field_removed: false,
            skip_replace_tag_store: false,
            skip_marked_tag_loop: false,
            skip_marked_tag_store: false,
            rq_tag_reads_false: false,
            skip_double_collect: false,
        }) };
    }

    /// Installs `sink` for the current thread, returning the previous one.
    pub fn set_sink(sink: Option<Arc<dyn Sink>>) -> Option<Arc<dyn Sink>> {
        SINK.with(|s| std::mem::replace(&mut *s.borrow_mut(), sink))
    }

    /// Sets the mutation switches for the current thread.
    pub fn set_mutations(m: Mutations) {
        MUTATIONS.with(|c| c.set(m));
    }

    pub(crate) fn mutations() -> Mutations {
        MUTATIONS.with(|c| c.get())
    }

    pub(crate) fn emit(ev: Event) {
        SINK.with(|s| {
            // Clone the Arc out so the sink may re-enter (e.g. park the
            // thread) without holding the RefCell borrow.
            let sink = s.borrow().clone();
            if let Some(sink) = sink {
                sink.on_event(&ev);
            }
        });
    }

    #[inline]
    pub(crate) fn point(label: Label) {
        emit(Event::Point(label));
    }
}

#[cfg(not(feature = "failpoints"))]
mod disabled {
    use super::{Label, Mutations};

    #[inline(always)]
    pub(crate) fn point(_label: Label) {}

    #[inline(always)]
    pub(crate) fn mutations() -> Mutations {
        Mutations::default()
    }
}

#[cfg(not(feature = "failpoints"))]
pub(crate) use disabled::*;

/// Yield point after a CAS; the payload expressions are evaluated only when
/// instrumented.
macro_rules! fail_cas {
    ($label:expr, $success:expr, $unlinked:expr) => {
        fail_cas!($label, $success, $unlinked, None)
    };
    ($label:expr, $success:expr, $unlinked:expr, $owner:expr) => {
        #[cfg(feature = "failpoints")]
        {
            $crate::fail::emit($crate::fail::Event::Cas {
                label: $label,
                success: $success,
                unlinked: $unlinked,
                owner_installed: $owner,
            });
        }
    };
}

/// Observational (non-yielding) retire notification.
macro_rules! fail_retire {
    ($addr:expr) => {
        #[cfg(feature = "failpoints")]
        {
            $crate::fail::emit($crate::fail::Event::Retire { addr: $addr });
        }
    };
}

pub(crate) use {fail_cas, fail_retire};
