//! Exercises the submission/completion queue protocol and audits the
//! trace: every command enqueued, issued, fetched, completed and released
//! exactly once; head doorbells in whole windows. Also runs the lock-free
//! submission queue under real OS threads.
//!
//! cargo run --release --example queue_protocol

use agile_sim::bench::protocol::run_suite;
use agile_sim::stress::{run_stress, StressConfig};
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let runs = run_suite(&AgileConfig::small(), 7, 20_000, 2_000, false)?;
    for r in &runs {
        let g = r.geometry;
        println!(
            "{} dev x {} SQ depth {:>3}, {:>3} threads: {:>5} cmds, {:>4} doorbells, {:>3} window rings, {:>2} drains, clean {}",
            g.devices,
            g.queue_pairs,
            g.depth,
            g.threads,
            r.queue.enqueues,
            r.queue.doorbells,
            r.window.steady_rings,
            r.window.drain_rings,
            r.is_clean()
        );
    }

    let s = run_stress(StressConfig {
        producers: 8,
        commands_per_producer: 20_000,
        depth: 64,
    })?;
    println!(
        "threaded stress: {} enqueued, {} issued, {} fetched, {} duplicates, {} missing, clean {}",
        s.enqueued,
        s.issued,
        s.fetched,
        s.duplicates,
        s.missing,
        s.is_clean()
    );
    Ok(())
}
