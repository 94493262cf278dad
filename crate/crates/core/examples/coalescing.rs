//! Two levels of request coalescing: lanes of a warp agree on one request
//! per distinct block, and the cache merges concurrent misses on a line.
//!
//! cargo run --example coalescing

use std::rc::Rc;

use agile_sim::api::warp_coalesce;
use agile_sim::{AgileBuf, AgileConfig, AgileHost, BlockKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The pure dedup step: 16 lanes on block 3, 16 on block 9.
    let reqs: Vec<_> = (0..32)
        .map(|l| Some(BlockKey::new(0, if l % 2 == 0 { 3 } else { 9 })))
        .collect();
    let co = warp_coalesce(&reqs);
    println!("warp_coalesce: {} unique keys, leaders {:?}", co.uniques.len(), co.leaders);

    // Warp level: every lane reads a word of the same block.
    let host = AgileHost::new(AgileConfig::small())?;
    let r = host.run_kernel(32, |mut t| async move {
        let _: u32 = t.warp_array_get(0, 4 * 1024 + t.lane() as u64).await?;
        t.finish()
    })?;
    println!("32 lanes, one block, warp path:  {} device READ(s)", r.device_reads());

    // Cache level: 32 single-lane warps miss on the same line at once.
    let mut cfg = AgileConfig::small();
    cfg.warp_size = 1;
    let host = AgileHost::new(cfg)?;
    let bufs: Rc<Vec<AgileBuf>> = Rc::new((0..32).map(|_| AgileBuf::new(4096)).collect());
    let b2 = bufs.clone();
    let r = host.run_kernel(32, move |mut t| {
        let bufs = b2.clone();
        async move {
            let b = &bufs[t.index()];
            t.async_read(0, 4, b).await?;
            t.wait(b).await?;
            t.finish()
        }
    })?;
    let ready = bufs.iter().filter(|b| b.is_ready()).count();
    println!(
        "32 threads, one block, cache path: {} device READ(s), {ready} buffers filled",
        r.device_reads()
    );
    Ok(())
}
