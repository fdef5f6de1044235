//! Deterministic cooperative executor.
//!
//! Worker threads run real tree operations; every instrumented yield point
//! parks the worker and wakes the controller, which grants steps one thread
//! at a time. Exactly one thread is ever runnable, so each run is a strict
//! interleaving at failpoint granularity: replaying the same choice sequence
//! reproduces the same history, the same final key set, and the same
//! per-step events.
//!
//! While a worker is parked the tree is quiescent, so the controller's
//! probes can walk it: at each range-query attempt boundary the worker
//! records a key-set snapshot used afterwards to check the query's result
//! against its linearization point, and every successful child CAS is
//! checked for the tag-before-unlink and protection rules.

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::Thread;

use kst::fail::{self, Event, Label, Mutations, Sink};
use kst::{KaryTree, Shape};

use crate::history::{History, Op, OpRecord, Ret};

/// Where to halt one thread forever, emulating a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    /// Halt at the thread's n-th yield point (0-based).
    AtStep { tid: usize, index: usize },
    /// Halt at the n-th occurrence (0-based) of a specific label on that
    /// thread.
    AtLabel {
        tid: usize,
        label: Label,
        occurrence: usize,
    },
}

impl Halt {
    fn tid(&self) -> usize {
        match *self {
            Halt::AtStep { tid, .. } => tid,
            Halt::AtLabel { tid, .. } => tid,
        }
    }
}

/// One schedule run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub k: usize,
    /// Initial contents, installed single-threaded before the run.
    pub initial_keys: Vec<u64>,
    /// Exact initial tree shape (under the root's first child) instead of
    /// key-by-key prefill.
    pub initial_shape: Option<Shape>,
    /// One op script per worker thread.
    pub scripts: Vec<Vec<Op>>,
    pub halt: Option<Halt>,
    pub mutations: Mutations,
    /// Abort the run after this many total steps.
    pub step_budget: usize,
}

impl RunSpec {
    pub fn new(k: usize, scripts: Vec<Vec<Op>>) -> RunSpec {
        RunSpec {
            k,
            initial_keys: Vec::new(),
            initial_shape: None,
            scripts,
            halt: None,
            mutations: Mutations::default(),
            step_budget: 200_000,
        }
    }
}

/// A scheduling decision: which runnable thread took the step, out of how
/// many candidates (sorted by thread id).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    /// Index into the sorted runnable set.
    pub chosen: usize,
    /// Size of the runnable set.
    pub runnable: usize,
    /// Thread granted the step.
    pub tid: usize,
    /// Index of the previously running thread in this step's runnable set,
    /// if it was still runnable (a switch away from it is a preemption).
    pub prev_index: Option<usize>,
}

/// Per-step trace entry.
#[derive(Debug, Clone, Copy)]
pub struct StepRec {
    pub tid: usize,
    pub label: Label,
}

/// A property violation detected during a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimViolation {
    pub kind: &'static str,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub history: History,
    pub final_keys: Vec<u64>,
    pub structure_ok: Result<(), String>,
    pub violations: Vec<SimViolation>,
    /// The choice made at every step, for schedule enumeration.
    pub choices: Vec<Choice>,
    pub steps: Vec<StepRec>,
    /// Number of yield points each thread passed.
    pub steps_per_thread: Vec<usize>,
    pub budget_exhausted: bool,
    /// Threads that ended halted (includes panics on violations).
    pub halted: Vec<usize>,
}

/// Scheduling policies decide the next thread among the runnable set.
pub trait Policy {
    /// `runnable` is sorted by thread id. Returns an index into `runnable`.
    fn pick(&mut self, step: usize, last: Option<usize>, runnable: &[usize]) -> usize;
}

/// Fixed prefix of choice indices, then "keep running the last thread while
/// it is runnable, else lowest id".
pub struct PrefixPolicy {
    pub prefix: Vec<usize>,
}

impl Policy for PrefixPolicy {
    fn pick(&mut self, step: usize, last: Option<usize>, runnable: &[usize]) -> usize {
        if let Some(&c) = self.prefix.get(step) {
            return c.min(runnable.len() - 1);
        }
        match last {
            Some(t) => runnable.iter().position(|&r| r == t).unwrap_or(0),
            None => 0,
        }
    }
}

/// Seeded random choice at every step.
pub struct RandomPolicy {
    pub rng: rand_chacha::ChaCha12Rng,
}

impl Policy for RandomPolicy {
    fn pick(&mut self, _step: usize, _last: Option<usize>, runnable: &[usize]) -> usize {
        use rand::Rng;
        self.rng.random_range(0..runnable.len())
    }
}

/// Strict round-robin over runnable threads.
pub struct RoundRobinPolicy;

impl Policy for RoundRobinPolicy {
    fn pick(&mut self, _step: usize, last: Option<usize>, runnable: &[usize]) -> usize {
        match last {
            None => 0,
            Some(t) => runnable
                .iter()
                .position(|&r| r > t)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WorkerState {
    /// Not yet granted its first step, or running right now.
    Running,
    /// Parked at a yield point, waiting for a grant.
    Parked,
    /// Script complete.
    Finished,
    /// Deliberately halted, never to run again.
    Halted,
}

struct WorkerSlot {
    state: Mutex<WorkerState>,
    turn: AtomicBool,
    thread: Mutex<Option<Thread>>,
    /// Completed yield-parks; the controller waits for this to advance past
    /// its pre-grant value, so a stale Parked state can never be mistaken
    /// for the new one.
    yields: AtomicUsize,
    /// Yield points passed so far.
    steps: AtomicUsize,
    /// Key snapshot at the last range-attempt collect start / validate start.
    last_collect_snapshot: Mutex<Option<Vec<u64>>>,
    last_validate_snapshot: Mutex<Option<Vec<u64>>>,
    /// Label occurrence counters, for Halt::AtLabel.
    label_counts: Mutex<Vec<(Label, usize)>>,
}

impl WorkerSlot {
    fn new() -> WorkerSlot {
        WorkerSlot {
            state: Mutex::new(WorkerState::Running),
            turn: AtomicBool::new(false),
            thread: Mutex::new(None),
            yields: AtomicUsize::new(0),
            steps: AtomicUsize::new(0),
            last_collect_snapshot: Mutex::new(None),
            last_validate_snapshot: Mutex::new(None),
            label_counts: Mutex::new(Vec::new()),
        }
    }
}

struct Shared {
    tree: KaryTree,
    slots: Vec<WorkerSlot>,
    controller: Mutex<Option<Thread>>,
    clock: AtomicU64,
    abort: AtomicBool,
    halt: Option<Halt>,
    violations: Mutex<Vec<SimViolation>>,
    steps: Mutex<Vec<StepRec>>,
    records: Mutex<Vec<OpRecord>>,
}

/// Payload for the panic that tears a parked worker down.
struct AbortToken;

fn install_quiet_abort_hook() {
    static HOOK: OnceLock<()> = OnceLock::new();
    HOOK.get_or_init(|| {
        let default = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<AbortToken>().is_none() {
                default(info);
            }
        }));
    });
}

impl Shared {
    fn wake_controller(&self) {
        if let Some(t) = self.controller.lock().unwrap().as_ref() {
            t.unpark();
        }
    }

    fn violation(&self, kind: &'static str, detail: String) {
        self.violations.lock().unwrap().push(SimViolation { kind, detail });
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }
}

struct WorkerSink {
    shared: Arc<Shared>,
    tid: usize,
}

impl WorkerSink {
    /// Parks until granted another step, or unwinds on teardown. A short
    /// spin first skips the futex round trip when the controller responds
    /// quickly.
    fn wait_for_grant(&self) {
        let slot = &self.shared.slots[self.tid];
        let mut spins = 0u32;
        loop {
            if self.shared.abort.load(Ordering::SeqCst) {
                panic::panic_any(AbortToken);
            }
            if slot.turn.swap(false, Ordering::SeqCst) {
                return;
            }
            if spins < 200 {
                spins += 1;
                std::hint::spin_loop();
            } else if spins < 250 {
                spins += 1;
                std::thread::yield_now();
            } else {
                std::thread::park();
            }
        }
    }

    fn yield_now(&self, halt_here: bool) {
        let slot = &self.shared.slots[self.tid];
        let next = if halt_here {
            WorkerState::Halted
        } else {
            WorkerState::Parked
        };
        *slot.state.lock().unwrap() = next;
        slot.yields.fetch_add(1, Ordering::SeqCst);
        self.shared.wake_controller();
        if halt_here {
            // Sleep until teardown.
            loop {
                if self.shared.abort.load(Ordering::SeqCst) {
                    panic::panic_any(AbortToken);
                }
                std::thread::park();
            }
        }
        self.wait_for_grant();
        *slot.state.lock().unwrap() = WorkerState::Running;
    }

    fn check_unlink_event(&self, label: Label, unlinked: &[fail::UnlinkedLeaf], owner: Option<bool>) {
        for u in unlinked {
            if !u.tag {
                self.shared.violation(
                    "tag-before-unlink",
                    format!("{label:?} unlinked leaf {:#x} with tag unset", u.addr),
                );
            }
        }
        if owner == Some(false) {
            self.shared.violation(
                "protection",
                format!("{label:?} succeeded while the owner descriptor was not installed"),
            );
        }
    }

    fn on_yield_point(&self, label: Label) {
        let shared = &self.shared;
        let slot = &shared.slots[self.tid];

        shared.steps.lock().unwrap().push(StepRec { tid: self.tid, label });
        let my_step = slot.steps.fetch_add(1, Ordering::SeqCst);
        shared.tick();

        let halt_here = match shared.halt {
            Some(Halt::AtStep { tid, index }) => tid == self.tid && index == my_step,
            Some(Halt::AtLabel {
                tid,
                label: want,
                occurrence,
            }) if tid == self.tid && want == label => {
                let mut counts = slot.label_counts.lock().unwrap();
                let entry = counts.iter_mut().find(|(l, _)| *l == want);
                let seen = match entry {
                    Some((_, c)) => {
                        *c += 1;
                        *c - 1
                    }
                    None => {
                        counts.push((want, 1));
                        0
                    }
                };
                seen == occurrence
            }
            _ => false,
        };
        self.yield_now(halt_here);
        // Back as the only runnable thread: the phase this label opens runs
        // from exactly this configuration, so snapshot it now.
        match label {
            Label::RqCollectStart => {
                *slot.last_collect_snapshot.lock().unwrap() = Some(shared.tree.snapshot_keys());
            }
            Label::RqValidateStart => {
                *slot.last_validate_snapshot.lock().unwrap() = Some(shared.tree.snapshot_keys());
            }
            _ => {}
        }
    }
}

impl Sink for WorkerSink {
    fn on_event(&self, ev: &Event) {
        match ev {
            Event::Retire { addr } => {
                // Observational, non-yielding: a retired object must not be
                // reachable from the root.
                if self.shared.tree.debug_reachable_addrs().contains(addr) {
                    self.shared.violation(
                        "retire-reachable",
                        format!("retired object {addr:#x} is still reachable"),
                    );
                }
            }
            Event::Point(label) => self.on_yield_point(*label),
            Event::Cas {
                label,
                success: _,
                unlinked,
                owner_installed,
            } => {
                self.check_unlink_event(*label, unlinked, *owner_installed);
                self.on_yield_point(*label);
            }
        }
    }
}

fn run_op(tree: &KaryTree, op: Op) -> Ret {
    match op {
        Op::Insert(x) => Ret::Bool(tree.insert(x)),
        Op::Remove(x) => Ret::Bool(tree.remove(x)),
        Op::Find(x) => Ret::Bool(tree.contains(x)),
        Op::Range(lo, hi) => {
            let (keys, _attempts) = tree.range_query_keys_counted(lo, hi);
            Ret::Keys(keys)
        }
        Op::RangeNaive(lo, hi, cap) => match kst::range_query_naive_bounded(tree, lo, hi, cap) {
            Some((keys, _attempts)) => Ret::Keys(keys),
            None => Ret::Exhausted,
        },
    }
}

fn worker_main(shared: Arc<Shared>, tid: usize, script: Vec<Op>) {
    let sink = Arc::new(WorkerSink {
        shared: Arc::clone(&shared),
        tid,
    });
    fail::set_sink(Some(sink.clone()));
    // Wait for the first grant before touching the tree.
    let result = panic::catch_unwind(AssertUnwindSafe(|| {
        sink.wait_for_grant();
        *shared.slots[tid].state.lock().unwrap() = WorkerState::Running;
        for op in script {
            let invoke = shared.tick();
            let idx = {
                let mut records = shared.records.lock().unwrap();
                records.push(OpRecord {
                    tid,
                    op,
                    invoke,
                    response: None,
                    ret: None,
                });
                records.len() - 1
            };
            let ret = ops_with_range_checks(&shared, tid, op);
            let response = shared.tick();
            let mut records = shared.records.lock().unwrap();
            records[idx].response = Some(response);
            records[idx].ret = Some(ret);
        }
    }));
    fail::set_sink(None);
    let slot = &shared.slots[tid];
    match result {
        Ok(()) => *slot.state.lock().unwrap() = WorkerState::Finished,
        Err(payload) => {
            if payload.downcast_ref::<AbortToken>().is_none() {
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "non-string panic".to_string());
                shared.violation("worker-panic", format!("thread {tid}: {msg}"));
            }
            *slot.state.lock().unwrap() = WorkerState::Halted;
        }
    }
    shared.wake_controller();
}

/// Runs a range query and checks its result against the key-set snapshot
/// taken at its linearization point: the start of the only validation phase
/// for single-attempt queries, the start of the last collect phase
/// otherwise.
fn ops_with_range_checks(shared: &Arc<Shared>, tid: usize, op: Op) -> Ret {
    let (lo, hi) = match op {
        Op::Range(lo, hi) => (lo, hi),
        _ => return run_op(&shared.tree, op),
    };
    let slot = &shared.slots[tid];
    *slot.last_collect_snapshot.lock().unwrap() = None;
    *slot.last_validate_snapshot.lock().unwrap() = None;
    let (keys, attempts) = shared.tree.range_query_keys_counted(lo, hi);
    let snapshot = if attempts == 1 {
        slot.last_validate_snapshot.lock().unwrap().clone()
    } else {
        slot.last_collect_snapshot.lock().unwrap().clone()
    };
    match snapshot {
        None => shared.violation(
            "rq-snapshot-missing",
            format!("thread {tid}: no linearization snapshot recorded"),
        ),
        Some(snap) => {
            let expect: Vec<u64> = snap.into_iter().filter(|&x| lo <= x && x <= hi).collect();
            if keys != expect {
                shared.violation(
                    "rq-snapshot-mismatch",
                    format!(
                        "thread {tid}: range [{lo}, {hi}] returned {keys:?}, \
                         configuration at linearization had {expect:?} (attempts {attempts})"
                    ),
                );
            }
        }
    }
    Ret::Keys(keys)
}

/// Executes one deterministic run.
pub fn run(spec: &RunSpec, policy: &mut dyn Policy) -> RunOutcome {
    install_quiet_abort_hook();
    let tree = match &spec.initial_shape {
        Some(shape) => KaryTree::with_subtree(spec.k, shape),
        None => {
            let tree = KaryTree::new(spec.k).expect("valid arity");
            for &key in &spec.initial_keys {
                tree.insert(key);
            }
            tree
        }
    };
    let n = spec.scripts.len();
    let shared = Arc::new(Shared {
        tree,
        slots: (0..n).map(|_| WorkerSlot::new()).collect(),
        controller: Mutex::new(Some(std::thread::current())),
        clock: AtomicU64::new(0),
        abort: AtomicBool::new(false),
        halt: spec.halt,
        violations: Mutex::new(Vec::new()),
        steps: Mutex::new(Vec::new()),
        records: Mutex::new(Vec::new()),
    });

    let mutations = spec.mutations;
    let handles: Vec<_> = spec
        .scripts
        .iter()
        .enumerate()
        .map(|(tid, script)| {
            let shared = Arc::clone(&shared);
            let script = script.clone();
            std::thread::spawn(move || {
                *shared.slots[tid].thread.lock().unwrap() = Some(std::thread::current());
                fail::set_mutations(mutations);
                shared.wake_controller();
                worker_main(shared, tid, script);
            })
        })
        .collect();

    // Wait until every worker registered its thread handle.
    loop {
        let ready = shared
            .slots
            .iter()
            .all(|s| s.thread.lock().unwrap().is_some());
        if ready {
            break;
        }
        std::thread::park_timeout(std::time::Duration::from_millis(1));
    }

    let mut choices = Vec::new();
    let mut last: Option<usize> = None;
    let mut budget_exhausted = false;
    loop {
        let states: Vec<WorkerState> = shared
            .slots
            .iter()
            .map(|s| *s.state.lock().unwrap())
            .collect();
        let runnable: Vec<usize> = (0..n)
            .filter(|&t| matches!(states[t], WorkerState::Running | WorkerState::Parked))
            .collect();
        if runnable.is_empty() {
            break;
        }
        if choices.len() >= spec.step_budget {
            budget_exhausted = true;
            break;
        }
        let idx = policy
            .pick(choices.len(), last, &runnable)
            .min(runnable.len() - 1);
        let tid = runnable[idx];
        let prev_index = last.and_then(|p| runnable.iter().position(|&r| r == p));
        choices.push(Choice {
            chosen: idx,
            runnable: runnable.len(),
            tid,
            prev_index,
        });
        last = Some(tid);

        // Grant one step and wait for the worker to park again, finish, or
        // halt. Waiting on the yield generation (not the state alone)
        // distinguishes the new park from the stale one.
        let slot = &shared.slots[tid];
        let before = slot.yields.load(Ordering::SeqCst);
        slot.turn.store(true, Ordering::SeqCst);
        if let Some(t) = slot.thread.lock().unwrap().as_ref() {
            t.unpark();
        }
        let mut spins = 0u32;
        loop {
            if slot.yields.load(Ordering::SeqCst) > before {
                break;
            }
            let state = *slot.state.lock().unwrap();
            if matches!(state, WorkerState::Finished | WorkerState::Halted) {
                break;
            }
            if spins < 500 {
                spins += 1;
                std::hint::spin_loop();
            } else if spins < 550 {
                spins += 1;
                std::thread::yield_now();
            } else {
                std::thread::park();
            }
        }
    }

    // Teardown: release every parked or halted worker.
    shared.abort.store(true, Ordering::SeqCst);
    for slot in &shared.slots {
        if let Some(t) = slot.thread.lock().unwrap().as_ref() {
            t.unpark();
        }
    }
    for h in handles {
        let _ = h.join();
    }
    *shared.controller.lock().unwrap() = None;

    let final_keys = shared.tree.snapshot_keys();
    let halted: Vec<usize> = shared
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| *s.state.lock().unwrap() == WorkerState::Halted)
        .map(|(t, _)| t)
        .collect();
    // A halted worker legitimately leaves a non-Clean pending flag behind;
    // every other invariant must still hold.
    let interrupted = !halted.is_empty() || budget_exhausted;
    let structure_ok = match shared.tree.check_structure() {
        Ok(()) => Ok(()),
        Err(violations) => {
            let relevant: Vec<String> = violations
                .iter()
                .filter(|v| !(interrupted && v.message.contains("pending descriptor")))
                .map(|v| v.to_string())
                .collect();
            if relevant.is_empty() {
                Ok(())
            } else {
                Err(relevant.join("; "))
            }
        }
    };
    let steps_per_thread = shared
        .slots
        .iter()
        .map(|s| s.steps.load(Ordering::SeqCst))
        .collect();

    let shared = Arc::try_unwrap(shared).unwrap_or_else(|_| panic!("workers still hold the state"));
    RunOutcome {
        history: History {
            records: shared.records.into_inner().unwrap(),
        },
        final_keys,
        structure_ok,
        violations: shared.violations.into_inner().unwrap(),
        choices,
        steps: shared.steps.into_inner().unwrap(),
        steps_per_thread,
        budget_exhausted,
        halted,
    }
}
