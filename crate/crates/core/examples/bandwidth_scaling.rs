//! Random 4 KiB reads and writes against 1, 2 and 3 calibrated devices,
//! requests interleaved across devices.
//!
//! cargo run --release --example bandwidth_scaling

use agile_sim::bench::rand_rw::{sweep, RandParams};
use agile_sim::bench::Outcome;
use agile_sim::AgileConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = AgileConfig::small();
    base.queue_pairs = 32;
    base.queue_depth = 256;
    for write in [false, true] {
        let p = RandParams {
            inflight: vec![16, 64, 128, 192, 384],
            write,
            ..RandParams::default()
        };
        let pts = sweep(&base, &p, &mut Outcome::default())?;
        println!("{}", if write { "random write" } else { "random read" });
        for d in [1, 2, 3] {
            let row: Vec<String> = pts
                .iter()
                .filter(|x| x.devices == d)
                .map(|x| format!("{:>4}:{:>6.2}", x.inflight, x.gb_per_s()))
                .collect();
            println!("  {d} device(s)  {}  GB/s", row.join("  "));
        }
    }
    Ok(())
}
