//! Randomized queue-protocol suite.
//!
//! Each run draws a random geometry (devices, queue pairs, depth, thread
//! count) and a random mix of cached and uncached reads and writes, runs it
//! with tracing on, and audits the trace.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audit::{audit_lines, audit_queues, audit_windows, deadlock_reports, LineAudit, QueueAudit, WindowAudit};
use crate::bench::{mix64, BenchError};
use crate::config::AgileConfig;
use crate::host::{AgileHost, RunReport};

pub const DEPTHS: [u32; 8] = [2, 4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub devices: usize,
    pub queue_pairs: usize,
    pub depth: u32,
    pub threads: usize,
    pub commands_per_thread: usize,
    pub cache_lines: usize,
}

impl Geometry {
    pub fn random(rng: &mut ChaCha8Rng, commands: usize) -> Self {
        let threads = *[1usize, 3, 16, 32, 64, 100, 256].choose(rng).expect("nonempty");
        Geometry {
            devices: rng.random_range(1..=2),
            queue_pairs: rng.random_range(1..=8),
            depth: *DEPTHS.choose(rng).expect("nonempty"),
            threads,
            commands_per_thread: commands.div_ceil(threads).max(1),
            cache_lines: *[4usize, 16, 64].choose(rng).expect("nonempty"),
        }
    }

    pub fn commands(&self) -> usize {
        self.threads * self.commands_per_thread
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub seed: u64,
    pub geometry: Geometry,
    pub queue: QueueAudit,
    pub window: WindowAudit,
    pub lines: LineAudit,
    pub deadlocks: usize,
    pub report: RunReport,
    /// Rendered trace, if requested.
    pub trace: Option<String>,
}

impl ProtocolRun {
    pub fn is_clean(&self) -> bool {
        self.queue.is_clean()
            && self.window.is_clean()
            && self.lines.illegal == 0
            && self.deadlocks == 0
            && self.report.clean()
    }
}

/// One traced run of `g` with seed `seed`.
pub fn run_geometry(base: &AgileConfig, g: Geometry, seed: u64, keep_trace: bool) -> Result<ProtocolRun, BenchError> {
    let mut cfg = base.clone().with_seed(seed).with_trace(true);
    let blocks = 4096;
    let mut dev = cfg.devices[0].clone();
    dev.blocks = blocks;
    cfg.devices = vec![dev; g.devices];
    cfg.queue_pairs = g.queue_pairs;
    cfg.queue_depth = g.depth;
    cfg.cache_lines = g.cache_lines;
    let host = AgileHost::new(cfg)?;
    let (cmds, ndev) = (g.commands_per_thread, g.devices as u64);
    let report = host.run_kernel(g.threads, move |mut t| async move {
        let buf = t.new_buf();
        for k in 0..cmds {
            let h = mix64(seed ^ ((t.index() * cmds + k) as u64) << 8);
            let dev = (h % ndev) as u16;
            let blk = (h >> 8) % blocks;
            match (h >> 40) % 4 {
                0 => t.raw_read(dev, blk, &buf).await?,
                1 => t.raw_write(dev, blk, &buf).await?,
                2 => t.async_read(dev, blk, &buf).await?,
                _ => {
                    t.async_write(dev, blk, &buf).await?;
                    continue;
                }
            }
            t.wait(&buf).await?;
        }
        t.finish()
    })?;
    let records = host.sim().trace().records();
    Ok(ProtocolRun {
        seed,
        geometry: g,
        queue: audit_queues(&records),
        window: audit_windows(&records),
        lines: audit_lines(&records),
        deadlocks: deadlock_reports(&records),
        report,
        trace: keep_trace.then(|| host.sim().trace().render()),
    })
}

/// Random runs until at least `total` commands have been issued by user
/// threads.
pub fn run_suite(
    base: &AgileConfig,
    seed: u64,
    total: usize,
    per_run: usize,
    keep_trace: bool,
) -> Result<Vec<ProtocolRun>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::new();
    let mut done = 0;
    while done < total {
        let g = Geometry::random(&mut rng, per_run);
        let run = run_geometry(base, g, rng.random(), keep_trace)?;
        done += g.commands();
        runs.push(run);
    }
    Ok(runs)
}
