//! Schedule enumeration over the deterministic executor.
//!
//! A schedule is the sequence of choice indices fed to [`PrefixPolicy`]:
//! beyond the prefix the policy keeps running the current thread, so the
//! suffix adds no preemptions and depth-first search over prefixes
//! enumerates every interleaving (optionally bounded to at most
//! `max_preemptions` forced switches, which is where concurrency bugs live).
//! The choice tree is deterministic, so replaying a prefix reproduces its
//! run exactly.

use crate::exec::{run, Choice, PrefixPolicy, RandomPolicy, RunOutcome, RunSpec};

/// Result of an enumeration pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumStats {
    pub runs: u64,
    /// True when the choice tree was exhausted within budget (the
    /// enumeration is exhaustive for the given preemption bound).
    pub complete: bool,
}

fn preemption_of(c: &Choice, chosen: usize) -> u32 {
    match c.prev_index {
        Some(pi) => (chosen != pi) as u32,
        None => 0,
    }
}

/// Index the policy would pick at this node with an empty prefix.
fn default_index(c: &Choice) -> usize {
    c.prev_index.unwrap_or(0)
}

/// Children of a choice node are visited in the order: default first, then
/// the remaining indices ascending. Returns the child after `chosen`.
fn next_child(c: &Choice, chosen: usize) -> Option<usize> {
    let d = default_index(c);
    let pos = if chosen == d {
        0
    } else if chosen < d {
        chosen + 1
    } else {
        chosen
    };
    let j = pos + 1;
    if j >= c.runnable {
        return None;
    }
    Some(if j - 1 < d { j - 1 } else { j })
}

/// Depth-first enumeration of schedules. Calls `on_run` after every run with
/// the prefix that produced it and its outcome; stops when the tree is
/// exhausted or `budget` runs were executed.
pub fn enumerate_dfs(
    spec: &RunSpec,
    budget: u64,
    max_preemptions: Option<u32>,
    mut on_run: impl FnMut(&[usize], &RunOutcome),
) -> EnumStats {
    let mut prefix: Vec<usize> = Vec::new();
    let mut runs = 0u64;
    loop {
        let outcome = run(spec, &mut PrefixPolicy {
            prefix: prefix.clone(),
        });
        runs += 1;
        on_run(&prefix, &outcome);
        if runs >= budget {
            return EnumStats {
                runs,
                complete: false,
            };
        }
        let choices = &outcome.choices;
        let mut preempts = vec![0u32; choices.len() + 1];
        for (i, c) in choices.iter().enumerate() {
            preempts[i + 1] = preempts[i] + preemption_of(c, c.chosen);
        }
        let mut next: Option<Vec<usize>> = None;
        'positions: for i in (0..choices.len()).rev() {
            let c = &choices[i];
            let mut candidate = next_child(c, c.chosen);
            while let Some(alt) = candidate {
                let fits = match max_preemptions {
                    Some(maxp) => preempts[i] + preemption_of(c, alt) <= maxp,
                    None => true,
                };
                if fits {
                    let mut p: Vec<usize> = choices[..i].iter().map(|x| x.chosen).collect();
                    p.push(alt);
                    next = Some(p);
                    break 'positions;
                }
                candidate = next_child(c, alt);
            }
        }
        match next {
            Some(p) => prefix = p,
            None => {
                return EnumStats {
                    runs,
                    complete: true,
                }
            }
        }
    }
}

/// Seeded random interleavings: `count` independent runs with per-step
/// uniform choices.
pub fn enumerate_random(
    spec: &RunSpec,
    count: u64,
    seed: u64,
    mut on_run: impl FnMut(&RunOutcome),
) -> EnumStats {
    use rand::SeedableRng;
    for i in 0..count {
        let rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ i);
        let outcome = run(spec, &mut RandomPolicy { rng });
        on_run(&outcome);
    }
    EnumStats {
        runs: count,
        complete: false,
    }
}

/// Crash-tolerance sweep: for every thread and every one of its yield
/// points, one run halting it there forever under round-robin scheduling.
/// Reports positions where any *other* thread failed to finish its script
/// within the step budget (helping must unblock them), or where a probe
/// fired.
pub fn halting_sweep(spec: &RunSpec, mut on_run: impl FnMut(&RunOutcome)) -> Vec<String> {
    use crate::exec::{Halt, RoundRobinPolicy};

    let mut failures = Vec::new();
    // Count each thread's yield points with an unhalted reference run.
    let reference = run(spec, &mut RoundRobinPolicy);
    for tid in 0..spec.scripts.len() {
        for index in 0..reference.steps_per_thread[tid] {
            let mut halted_spec = spec.clone();
            halted_spec.halt = Some(Halt::AtStep { tid, index });
            let outcome = run(&halted_spec, &mut RoundRobinPolicy);
            if outcome.budget_exhausted {
                failures.push(format!(
                    "halt tid {tid} at step {index}: residual threads exceeded the step budget"
                ));
            }
            let incomplete: Vec<usize> = (0..spec.scripts.len())
                .filter(|&t| t != tid)
                .filter(|&t| {
                    outcome
                        .history
                        .records
                        .iter()
                        .filter(|r| r.tid == t && r.completed())
                        .count()
                        != spec.scripts[t].len()
                })
                .collect();
            if !incomplete.is_empty() {
                failures.push(format!(
                    "halt tid {tid} at step {index}: threads {incomplete:?} did not finish"
                ));
            }
            for v in &outcome.violations {
                failures.push(format!(
                    "halt tid {tid} at step {index}: {}: {}",
                    v.kind, v.detail
                ));
            }
            on_run(&outcome);
        }
    }
    failures
}
