//! Four threads, one two-entry submission queue. Issuers that poll for
//! their own completions while holding their queue entry deadlock; handing
//! the entry to the completion service does not.
//!
//! cargo run --example deadlock_demo

use agile_sim::bench::deadlock::{run_agile, run_naive, DeadlockParams};
use agile_sim::bench::Outcome;
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = AgileConfig::small();
    base.queue_pairs = 1;
    base.queue_depth = 2;
    let p = DeadlockParams::default();
    let mut out = Outcome::default();
    for r in [run_naive(&base, &p, &mut out)?, run_agile(&base, &p, &mut out)?] {
        println!(
            "{:5}: {}/{} commands completed, {} threads stuck, stop {:?}",
            r.mode, r.completed, r.commands, r.blocked, r.stop
        );
        for c in &r.cycles {
            println!("       {c}");
        }
    }

    // A queue deep enough for every command never fills, so even the
    // naive protocol finishes.
    let deep = DeadlockParams {
        depth: Some(8),
        ..DeadlockParams::default()
    };
    let r = run_naive(&base, &deep, &mut out)?;
    println!("naive at depth 8: deadlocked = {}", r.deadlocked());
    Ok(())
}
