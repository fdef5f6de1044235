use kst_harness::*;
use std::time::Instant;

fn main() {
    let spec = RunSpec::new(4, vec![vec![Op::Insert(1)], vec![Op::Insert(2)]]);
    let t0 = Instant::now();
    let mut n = 0u64;
    enumerate_dfs(&spec, 2_000, None, |_, _| n += 1);
    let dt = t0.elapsed();
    println!("{} runs in {:?} = {:?}/run", n, dt, dt / n as u32);

    for p in 0..=3 {
        let mut n = 0u64;
        let stats = enumerate_dfs(&spec, 200_000, Some(p), |_, _| n += 1);
        println!("P={p}: {} schedules, complete={}", n, stats.complete);
    }
}
