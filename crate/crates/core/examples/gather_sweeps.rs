//! The synthetic gather workload under a queue-pair sweep and a cache-size
//! sweep, synchronous vs prefetching.
//!
//! cargo run --release --example gather_sweeps

use agile_sim::bench::gather::{sweep, GatherParams, Sweep};
use agile_sim::bench::Outcome;
use agile_sim::ssd::DeviceConfig;
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Queue pairs: a wide device, so one 64-entry queue is the bottleneck.
    let mut base = AgileConfig::small();
    base.queue_depth = 64;
    base.cache_lines = 8192;
    base.devices = vec![DeviceConfig {
        parallelism: 1024,
        ..DeviceConfig::calibrated(1 << 20)
    }];
    let p = GatherParams::defaults(Sweep::QueuePairs);
    println!("queue pairs   sync ns    async ns  speedup");
    for pt in sweep(&base, &p, &mut Outcome::default())? {
        println!("{:>11} {:>9} {:>11} {:>8.3}", pt.value, pt.t_sync, pt.t_async, pt.speedup());
    }

    // Cache size: prefetching only pays once the next epoch fits.
    let mut base = AgileConfig::small();
    base.queue_pairs = 16;
    base.queue_depth = 256;
    let p = GatherParams::defaults(Sweep::CacheLines);
    println!("cache lines   sync ns    async ns  speedup  reads(sync/async)");
    for pt in sweep(&base, &p, &mut Outcome::default())? {
        println!(
            "{:>11} {:>9} {:>11} {:>8.3}  {}/{}",
            pt.value,
            pt.t_sync,
            pt.t_async,
            pt.speedup(),
            pt.reads_sync,
            pt.reads_async
        );
    }
    Ok(())
}
