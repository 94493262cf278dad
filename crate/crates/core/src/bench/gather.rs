//! Synthetic embedding-gather workload for the queue-pair and cache-size
//! sweeps.
//!
//! Each epoch every thread gathers `gathers_per_epoch / threads` random
//! blocks (issue all, then wait all), computes for `compute_ns_per_gather`
//! per gathered block, and meets the other threads at a block barrier
//! (a batch boundary). Asynchronous mode also prefetches the next epoch's
//! blocks before computing.

use crate::bench::{f4, mix64, BenchError, Csv, Outcome};
use crate::config::{AgileConfig, ConfigError, KvDoc};
use crate::host::AgileHost;
use crate::sim::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    QueuePairs,
    CacheLines,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatherParams {
    pub sweep: Sweep,
    /// Queue-pair counts or cache sizes in lines.
    pub values: Vec<usize>,
    pub threads: usize,
    pub gathers_per_epoch: usize,
    pub epochs: usize,
    pub compute_ns_per_gather: Nanos,
    pub blocks: u64,
}

impl GatherParams {
    pub fn defaults(sweep: Sweep) -> Self {
        match sweep {
            Sweep::QueuePairs => GatherParams {
                sweep,
                values: vec![1, 2, 4, 8, 16],
                threads: 256,
                gathers_per_epoch: 1024,
                epochs: 6,
                compute_ns_per_gather: 20_000,
                blocks: 1 << 20,
            },
            Sweep::CacheLines => GatherParams {
                sweep,
                values: vec![128, 256, 512, 1024, 2048, 4096],
                threads: 256,
                gathers_per_epoch: 1024,
                epochs: 6,
                compute_ns_per_gather: 250_000,
                blocks: 1 << 20,
            },
        }
    }

    pub fn from_doc(doc: &KvDoc, sweep: Sweep) -> Result<Self, ConfigError> {
        let d = GatherParams::defaults(sweep);
        let key = match sweep {
            Sweep::QueuePairs => "sweep_queue_pairs",
            Sweep::CacheLines => "sweep_cache_lines",
        };
        let p = GatherParams {
            sweep,
            values: doc.list(key)?.unwrap_or(d.values),
            threads: doc.get_or("threads", d.threads)?,
            gathers_per_epoch: doc.get_or("gathers_per_epoch", d.gathers_per_epoch)?,
            epochs: doc.get_or("epochs", d.epochs)?,
            compute_ns_per_gather: doc.get_or("compute_ns_per_gather", d.compute_ns_per_gather)?,
            blocks: doc.get_or("blocks", d.blocks)?,
        };
        if p.threads == 0 || !p.gathers_per_epoch.is_multiple_of(p.threads) || p.values.contains(&0) {
            return Err(ConfigError::Invalid(
                "threads must be positive and divide gathers_per_epoch; sweep values positive".into(),
            ));
        }
        Ok(p)
    }

    pub fn per_thread(&self) -> usize {
        self.gathers_per_epoch / self.threads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatherPoint {
    pub value: usize,
    pub t_sync: Nanos,
    pub t_async: Nanos,
    pub reads_sync: u64,
    pub reads_async: u64,
}

impl GatherPoint {
    pub fn speedup(&self) -> f64 {
        self.t_sync as f64 / self.t_async as f64
    }
}

fn config_for(base: &AgileConfig, p: &GatherParams, value: usize) -> AgileConfig {
    let mut cfg = base.clone();
    for d in &mut cfg.devices {
        d.blocks = p.blocks;
    }
    match p.sweep {
        Sweep::QueuePairs => cfg.queue_pairs = value,
        Sweep::CacheLines => cfg.cache_lines = value,
    }
    cfg
}

/// Returns (kernel ns, device reads).
pub fn run_once(
    base: &AgileConfig,
    p: &GatherParams,
    value: usize,
    prefetch: bool,
    out: &mut Outcome,
) -> Result<(Nanos, u64), BenchError> {
    let host = AgileHost::new(config_for(base, p, value))?;
    let (g, epochs, blocks, seed) = (p.per_thread(), p.epochs, p.blocks, base.sim.seed);
    let compute = p.compute_ns_per_gather * g as u64;
    let threads = p.threads;
    let report = host.run_kernel(threads, move |mut t| async move {
        let i = t.index();
        let blk = |e: usize, k: usize| mix64(seed ^ (((e * threads + i) * g + k) as u64)) % blocks;
        let bufs: Vec<_> = (0..g).map(|_| t.new_buf()).collect();
        if prefetch {
            for k in 0..g {
                t.prefetch(0, blk(0, k)).await?;
            }
        }
        for e in 0..epochs {
            for (k, b) in bufs.iter().enumerate() {
                t.async_read(0, blk(e, k), b).await?;
            }
            for b in &bufs {
                t.wait(b).await?;
            }
            if prefetch && e + 1 < epochs {
                for k in 0..g {
                    t.prefetch(0, blk(e + 1, k)).await?;
                }
            }
            t.compute(compute).await;
            t.sync_block().await;
        }
        t.finish()
    })?;
    super::check_run(&report)?;
    let label = format!(
        "gather {:?}={value} {}",
        p.sweep,
        if prefetch { "async" } else { "sync" }
    );
    out.absorb(&label, &host, &report);
    Ok((report.kernel_ns(), report.device_reads()))
}

pub fn sweep(base: &AgileConfig, p: &GatherParams, out: &mut Outcome) -> Result<Vec<GatherPoint>, BenchError> {
    let mut pts = Vec::new();
    for &v in &p.values {
        let (t_sync, reads_sync) = run_once(base, p, v, false, out)?;
        let (t_async, reads_async) = run_once(base, p, v, true, out)?;
        pts.push(GatherPoint {
            value: v,
            t_sync,
            t_async,
            reads_sync,
            reads_async,
        });
    }
    Ok(pts)
}

pub fn run(base: &AgileConfig, p: &GatherParams) -> Result<Outcome, BenchError> {
    let mut out = Outcome::default();
    let pts = sweep(base, p, &mut out)?;
    let col = match p.sweep {
        Sweep::QueuePairs => "queue_pairs",
        Sweep::CacheLines => "cache_lines",
    };
    let mut csv = Csv::new(&[col, "t_sync_ns", "t_async_ns", "speedup", "reads_sync", "reads_async"]);
    for pt in &pts {
        csv.push(vec![
            pt.value.to_string(),
            pt.t_sync.to_string(),
            pt.t_async.to_string(),
            f4(pt.speedup()),
            pt.reads_sync.to_string(),
            pt.reads_async.to_string(),
        ]);
    }
    out.summary.push(format!(
        "{} gathers/epoch over {} threads, {} epochs, working set {} lines",
        p.gathers_per_epoch, p.threads, p.epochs, p.gathers_per_epoch
    ));
    out.csv = Some(csv);
    Ok(out)
}
