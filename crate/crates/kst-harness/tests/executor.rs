//! Self-tests for the deterministic executor and enumerator.

use kst_harness::exec::Halt;
use kst_harness::*;

fn binomial(n: u64, k: u64) -> u64 {
    let mut result = 1u64;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

#[test]
fn replaying_a_prefix_is_deterministic() {
    let spec = RunSpec::new(
        4,
        vec![
            vec![Op::Insert(1), Op::Remove(1)],
            vec![Op::Insert(1), Op::Range(0, 3)],
        ],
    );
    let prefix = vec![1, 0, 1, 1, 0, 0, 1];
    let a = run(&spec, &mut PrefixPolicy { prefix: prefix.clone() });
    let b = run(&spec, &mut PrefixPolicy { prefix });
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_keys, b.final_keys);
    assert_eq!(a.choices, b.choices);
    assert_eq!(
        a.steps.iter().map(|s| (s.tid, s.label)).collect::<Vec<_>>(),
        b.steps.iter().map(|s| (s.tid, s.label)).collect::<Vec<_>>(),
    );
}

#[test]
fn dfs_enumerates_all_interleavings_of_two_single_ops() {
    // Two read-only threads: the interleaving count equals the binomial
    // shuffle count of their step sequences, and the DFS must drain the
    // whole choice tree.
    let mut spec = RunSpec::new(4, vec![vec![Op::Find(1)], vec![Op::Find(2)]]);
    spec.initial_keys = vec![1, 2];
    let reference = run(&spec, &mut RoundRobinPolicy);
    let total: usize = reference.steps_per_thread.iter().sum();
    let per_thread = reference.steps_per_thread.clone();
    let bound = binomial(total as u64, per_thread[0] as u64);

    let mut runs = 0u64;
    let stats = enumerate_dfs(&spec, 1_000_000, None, |prefix, outcome| {
        runs += 1;
        if let Err(e) = verify_outcome(&spec, outcome, 1 << 22) {
            panic!("schedule {prefix:?} failed: {e}");
        }
    });
    assert!(stats.complete, "budget should not bind here");
    assert_eq!(stats.runs, runs);
    // Reads have no branches, so the bound is exact.
    assert_eq!(
        stats.runs, bound,
        "enumerated {} != C({total},{}) = {bound}",
        stats.runs, per_thread[0]
    );

    // Contended writers do branch; under a preemption bound the space stays
    // small but far from trivial.
    let spec = RunSpec::new(4, vec![vec![Op::Insert(1)], vec![Op::Insert(2)]]);
    let mut runs = 0u64;
    let stats = enumerate_dfs(&spec, 100_000, Some(2), |prefix, outcome| {
        runs += 1;
        if let Err(e) = verify_outcome(&spec, outcome, 1 << 22) {
            panic!("schedule {prefix:?} failed: {e}");
        }
    });
    assert!(stats.complete);
    assert!(runs > 100, "only {runs} schedules at P=2");
}

#[test]
fn dfs_preemption_bound_reduces_schedule_count() {
    let spec = RunSpec::new(4, vec![vec![Op::Insert(1)], vec![Op::Insert(2)]]);
    let mut full = 0u64;
    enumerate_dfs(&spec, 1_000_000, None, |_, _| full += 1);
    let mut bounded = 0u64;
    let stats = enumerate_dfs(&spec, 1_000_000, Some(1), |_, outcome| {
        bounded += 1;
        assert!(outcome.violations.is_empty());
    });
    assert!(stats.complete);
    assert!(bounded < full, "bound {bounded} !< full {full}");
    assert!(bounded >= 2);
}

#[test]
fn every_schedule_of_contended_updates_is_linearizable() {
    // Insert/delete on one key from two threads plus a reader: full
    // exhaustive enumeration, every history checked.
    let mut spec = RunSpec::new(
        2,
        vec![
            vec![Op::Remove(1)],
            vec![Op::Insert(1)],
            vec![Op::Find(1)],
        ],
    );
    spec.initial_keys = vec![1];
    let mut runs = 0u64;
    let stats = enumerate_dfs(&spec, 200_000, Some(2), |prefix, outcome| {
        runs += 1;
        if let Err(e) = verify_outcome(&spec, outcome, 1 << 22) {
            panic!("schedule {prefix:?} failed: {e}");
        }
    });
    assert!(stats.complete, "ran {runs} without draining the tree");
}

#[test]
fn collected_scenario_forces_a_retry_on_some_schedule() {
    // The insert must tag a collected leaf between the query's collect and
    // validation on at least one schedule, forcing a second attempt.
    let spec = mixes::collected_scenario(4);
    let mut saw_retry = false;
    let stats = enumerate_dfs(&spec, 50_000, Some(2), |prefix, outcome| {
        if let Err(e) = verify_outcome(&spec, outcome, 1 << 22) {
            panic!("schedule {prefix:?} failed: {e}");
        }
        let collect_starts = outcome
            .steps
            .iter()
            .filter(|s| s.tid == 0 && s.label == kst::fail::Label::RqCollectStart)
            .count();
        if collect_starts > 1 {
            saw_retry = true;
        }
    });
    assert!(stats.complete);
    assert!(saw_retry, "no schedule made the query retry");
}

#[test]
fn halted_writer_is_survivable_everywhere() {
    let mut spec = RunSpec::new(
        4,
        vec![
            vec![Op::Insert(2), Op::Remove(1)],
            vec![Op::Insert(3), Op::Find(2)],
        ],
    );
    spec.initial_keys = vec![1];
    let failures = kst_harness::schedule::halting_sweep(&spec, |_| {});
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn halted_tagging_writer_stalls_naive_query_but_not_real_one() {
    // Writer halts right after tagging the leaf it is about to replace.
    // The shipped query validates by double collect and succeeds; the
    // tag-only validator spins to its attempt cap.
    let base = mixes::collected_scenario(4);

    let mut real = base.clone();
    real.scripts = vec![vec![Op::Range(0, 9)], vec![Op::Insert(6)]];
    real.halt = Some(Halt::AtLabel {
        tid: 1,
        label: kst::fail::Label::AfterTagStoreReplace,
        occurrence: 0,
    });
    // Run the writer first so it halts post-tag, then let the query run.
    let order = vec![1usize; 64];
    let outcome = run(&real, &mut PrefixPolicy { prefix: order });
    assert_eq!(outcome.halted, vec![1]);
    let rq = &outcome.history.records[0];
    assert!(rq.completed(), "query did not finish: {outcome:?}");
    // The tagged-but-unreplaced leaf still holds 5; 6 never made it in.
    assert_eq!(rq.ret, Some(Ret::Keys(vec![1, 5])));
    assert!(outcome.violations.is_empty(), "{:?}", outcome.violations);

    let mut naive = base.clone();
    naive.scripts = vec![
        vec![Op::RangeNaive(0, 9, 10_000)],
        vec![Op::Insert(6)],
    ];
    naive.halt = Some(Halt::AtLabel {
        tid: 1,
        label: kst::fail::Label::AfterTagStoreReplace,
        occurrence: 0,
    });
    naive.step_budget = 2_000_000;
    let order = vec![1usize; 64];
    let outcome = run(&naive, &mut PrefixPolicy { prefix: order });
    let rq = &outcome.history.records[0];
    assert_eq!(rq.ret, Some(Ret::Exhausted), "naive query should give up");
}

#[test]
fn budget_exhaustion_is_reported() {
    let mut spec = RunSpec::new(4, vec![vec![Op::Insert(1)]]);
    spec.step_budget = 2;
    let outcome = run(&spec, &mut RoundRobinPolicy);
    assert!(outcome.budget_exhausted);
}
