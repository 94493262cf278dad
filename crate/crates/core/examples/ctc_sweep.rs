//! Synchronous vs prefetching epochs across computation-to-communication
//! ratios, next to the ideal overlap speedup.
//!
//! cargo run --release --example ctc_sweep

use agile_sim::bench::ctc::{sweep, CtcParams};
use agile_sim::bench::Outcome;
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = AgileConfig::small();
    let p = CtcParams {
        epochs: 16,
        ..CtcParams::default()
    };
    let r = sweep(&base, &p, &mut Outcome::default())?;
    println!("communication per epoch: {} ns", r.comm_per_epoch);
    println!("{:>6} {:>10} {:>12} {:>12} {:>8} {:>6}", "ctc", "compute", "sync", "async", "speedup", "ideal");
    for pt in &r.points {
        println!(
            "{:>6.2} {:>10} {:>12} {:>12} {:>8.3} {:>6.3}",
            pt.ctc,
            pt.compute_ns,
            pt.t_sync,
            pt.t_async,
            pt.speedup(),
            pt.ideal()
        );
    }
    Ok(())
}
