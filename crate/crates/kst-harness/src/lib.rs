//! Deterministic concurrency testing for the `kst` tree: a cooperative
//! scheduler driving real tree operations one yield point at a time,
//! schedule enumeration (exhaustive, preemption-bounded, and seeded random),
//! crash emulation by halting threads at arbitrary yield points, runtime
//! mutation switches, history recording, and a linearizability checker.

pub mod exec;
pub mod history;
pub mod lincheck;
pub mod mixes;
pub mod schedule;

pub use exec::{run, Halt, Policy, PrefixPolicy, RandomPolicy, RoundRobinPolicy, RunOutcome, RunSpec, SimViolation};
pub use history::{History, Op, OpRecord, Ret};
pub use lincheck::{check_linearizable, LinResult};
pub use schedule::{enumerate_dfs, enumerate_random, EnumStats};

/// Checks one finished run end to end: harness probe violations, quiescent
/// structure (when nothing was halted), and linearizability of the recorded
/// history against the initial key set.
///
/// Returns a human-readable failure report, or `Ok(())`.
pub fn verify_outcome(
    spec: &RunSpec,
    outcome: &RunOutcome,
    lincheck_budget: u64,
) -> Result<(), String> {
    let mut problems = Vec::new();
    for v in &outcome.violations {
        problems.push(format!("{}: {}", v.kind, v.detail));
    }
    if let Err(e) = &outcome.structure_ok {
        problems.push(format!("structure: {e}"));
    }
    if outcome.budget_exhausted {
        problems.push("step budget exhausted".to_string());
    }
    let initial = initial_keys_of(spec);
    match check_linearizable(&outcome.history, &initial, lincheck_budget) {
        LinResult::Linearizable(_) => {}
        LinResult::NotLinearizable(conflict) => {
            problems.push(format!(
                "history not linearizable (conflicting records {conflict:?}):\n{}",
                outcome.history.to_lines()
            ));
        }
        LinResult::Timeout => problems.push("linearizability check timed out".to_string()),
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("\n"))
    }
}

/// Initial key set of a spec, whether given as keys or as a shape.
pub fn initial_keys_of(spec: &RunSpec) -> Vec<u64> {
    match &spec.initial_shape {
        None => {
            let mut keys = spec.initial_keys.clone();
            keys.sort_unstable();
            keys.dedup();
            keys
        }
        Some(shape) => {
            fn collect(s: &kst::Shape, out: &mut Vec<u64>) {
                match s {
                    kst::Shape::Leaf { keys } => out.extend_from_slice(keys),
                    kst::Shape::Internal { children, .. } => {
                        for c in children {
                            collect(c, out);
                        }
                    }
                }
            }
            let mut keys = Vec::new();
            collect(shape, &mut keys);
            keys.sort_unstable();
            keys
        }
    }
}
