//! Buffer sharing with and without the share table. A writer keeps a
//! modified copy of a block while readers arrive; without the table they
//! read the stale device copy.
//!
//! cargo run --example share_table

use agile_sim::bench::coherence::{run_instance, Instance};
use agile_sim::bench::Outcome;
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = AgileConfig::small();
    let mut out = Outcome::default();
    for share in [false, true] {
        let r = run_instance(&base, &Instance::hazard(), 1, share, 2, &mut out)?;
        println!(
            "share table {:>3}: {} reads, {} stale",
            if share { "on" } else { "off" },
            r.reads,
            r.stale_reads.len()
        );
        for s in &r.stale_reads {
            println!("    {s}");
        }
        if let Some(st) = r.report.share {
            println!("    registers {}, joins {}, propagations {}", st.registers, st.joins, st.propagations);
        }
    }

    // Random small programs against the sequential oracle.
    let bad = (0..100)
        .map(|seed| run_instance(&base, &Instance::random(seed, 4, 4, 8), seed, true, 2, &mut out))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|r| !r.coherent())
        .count();
    println!("100 random instances with the table on: {bad} incoherent");
    Ok(())
}
