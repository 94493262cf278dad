//! The thread API in one kernel: prefetch, asynchronous read and wait,
//! array-style access, and an asynchronous write.
//!
//! cargo run --example quickstart

use agile_sim::{AgileConfig, AgileHost, BlockKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let host = AgileHost::new(AgileConfig::small())?;
    // Seed block 3 with a recognisable pattern.
    let bs = host.ctrl().block_size();
    let seed: Vec<u8> = (0..bs).map(|i| (i % 251) as u8).collect();
    host.preload(BlockKey::new(0, 3), &seed)?;

    let report = host.run_kernel(64, |mut t| async move {
        // Warp-collective: 32 lanes asking for block 3 issue one request.
        t.prefetch(0, 3).await?;

        let buf = t.new_buf();
        t.async_read(0, 3, &buf).await?;
        t.compute(5_000).await; // overlaps with the read
        t.wait(&buf).await?;
        assert_eq!(buf.get::<u8>(t.index()), (t.index() % 251) as u8);

        // The device as a flat array of u32.
        let word: u32 = t.array_get(0, 3 * 1024).await?;
        assert_eq!(word, u32::from_le_bytes([0, 1, 2, 3]));

        // Each thread writes its own block; the buffer is reusable at once.
        buf.set::<u64>(0, t.index() as u64 * 1000);
        t.async_write(0, 100 + t.index() as u64, &buf).await?;
        t.finish()
    })?;

    let last = host.device_block(BlockKey::new(0, 163))?;
    println!("kernel time      {} ns", report.kernel_ns());
    println!("device reads     {}", report.device_reads());
    println!("device writes    {}", report.device_writes());
    println!("cache            {:?}", report.cache);
    println!("block 163 word0  {}", u64::from_le_bytes(last[..8].try_into()?));
    assert!(report.clean());
    Ok(())
}
