//! Computation-to-communication sweep.
//!
//! A block of threads runs `epochs` epochs. Each epoch the first `issuers`
//! threads read one fresh block each, the whole block synchronizes, and
//! every thread computes for a fixed time. Synchronous mode reads on demand;
//! asynchronous mode prefetches the next epoch's blocks before computing.
//! The compute time for a target ratio is derived from the measured
//! per-epoch communication time of a zero-compute synchronous run.

use crate::bench::{f4, ideal_speedup, BenchError, Csv, Outcome};
use crate::config::{AgileConfig, ConfigError, KvDoc};
use crate::host::{AgileHost, RunReport};
use crate::sim::Nanos;

#[derive(Debug, Clone, PartialEq)]
pub struct CtcParams {
    pub ctc_values: Vec<f64>,
    pub threads: usize,
    pub issuers: usize,
    pub epochs: usize,
}

impl Default for CtcParams {
    fn default() -> Self {
        CtcParams {
            ctc_values: vec![0.0, 0.25, 0.5, 0.75, 0.9, 1.0, 1.5, 2.0],
            threads: 1024,
            issuers: 64,
            epochs: 32,
        }
    }
}

impl CtcParams {
    pub fn from_doc(doc: &KvDoc) -> Result<Self, ConfigError> {
        let d = CtcParams::default();
        let p = CtcParams {
            ctc_values: doc.list("ctc_values")?.unwrap_or(d.ctc_values),
            threads: doc.get_or("threads", d.threads)?,
            issuers: doc.get_or("issuers", d.issuers)?,
            epochs: doc.get_or("epochs", d.epochs)?,
        };
        if p.issuers == 0 || p.issuers > p.threads || p.epochs == 0 {
            return Err(ConfigError::Invalid(
                "need 0 < issuers <= threads and epochs > 0".into(),
            ));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcPoint {
    pub ctc: f64,
    pub compute_ns: Nanos,
    pub t_sync: Nanos,
    pub t_async: Nanos,
}

impl CtcPoint {
    pub fn speedup(&self) -> f64 {
        self.t_sync as f64 / self.t_async as f64
    }

    pub fn ideal(&self) -> f64 {
        ideal_speedup(self.ctc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcResult {
    /// Communication time per epoch with no compute, synchronous mode.
    pub comm_per_epoch: Nanos,
    pub points: Vec<CtcPoint>,
}

/// One kernel launch; returns the kernel time.
pub fn run_once(
    base: &AgileConfig,
    p: &CtcParams,
    compute_ns: Nanos,
    prefetch: bool,
    out: &mut Outcome,
) -> Result<RunReport, BenchError> {
    let host = AgileHost::new(base.clone())?;
    let words_per_block = (host.ctrl().block_size() / 4) as u64;
    let (issuers, epochs) = (p.issuers, p.epochs);
    let report = host.run_kernel(p.threads, move |mut t| async move {
        let i = t.index();
        let issuer = i < issuers;
        let blk = |e: usize| (e * issuers + i) as u64;
        if prefetch && issuer {
            t.prefetch(0, blk(0)).await?;
        }
        for e in 0..epochs {
            if issuer {
                let _: u32 = t.array_get(0, blk(e) * words_per_block).await?;
            }
            t.sync_block().await;
            if prefetch && issuer && e + 1 < epochs {
                t.prefetch(0, blk(e + 1)).await?;
            }
            if compute_ns > 0 {
                t.compute(compute_ns).await;
            }
            t.sync_block().await;
        }
        t.finish()
    })?;
    super::check_run(&report)?;
    let label = format!(
        "ctc {} compute_ns={compute_ns}",
        if prefetch { "async" } else { "sync" }
    );
    out.absorb(&label, &host, &report);
    Ok(report)
}

pub fn sweep(base: &AgileConfig, p: &CtcParams, out: &mut Outcome) -> Result<CtcResult, BenchError> {
    let needed = (p.issuers * p.epochs) as u64;
    if base.devices[0].blocks < needed {
        return Err(BenchError::Run(format!(
            "device 0 needs at least {needed} blocks"
        )));
    }
    let baseline = run_once(base, p, 0, false, out)?;
    let comm = baseline.kernel_ns() / p.epochs as u64;
    let mut points = Vec::new();
    for &ctc in &p.ctc_values {
        let compute_ns = (ctc * comm as f64).round() as Nanos;
        let t_sync = if compute_ns == 0 {
            baseline.kernel_ns()
        } else {
            run_once(base, p, compute_ns, false, out)?.kernel_ns()
        };
        let t_async = run_once(base, p, compute_ns, true, out)?.kernel_ns();
        points.push(CtcPoint {
            ctc: compute_ns as f64 / comm as f64,
            compute_ns,
            t_sync,
            t_async,
        });
    }
    Ok(CtcResult {
        comm_per_epoch: comm,
        points,
    })
}

pub fn run(base: &AgileConfig, p: &CtcParams) -> Result<Outcome, BenchError> {
    let mut out = Outcome::default();
    let r = sweep(base, p, &mut out)?;
    let mut csv = Csv::new(&["ctc", "compute_ns", "t_sync_ns", "t_async_ns", "speedup", "ideal"]);
    for pt in &r.points {
        csv.push(vec![
            f4(pt.ctc),
            pt.compute_ns.to_string(),
            pt.t_sync.to_string(),
            pt.t_async.to_string(),
            f4(pt.speedup()),
            f4(pt.ideal()),
        ]);
    }
    out.summary.push(format!(
        "communication per epoch: {} ns ({} threads, {} issuers, {} epochs)",
        r.comm_per_epoch, p.threads, p.issuers, p.epochs
    ));
    if let Some(best) = r
        .points
        .iter()
        .max_by(|a, b| a.speedup().total_cmp(&b.speedup()))
    {
        out.summary.push(format!(
            "peak speedup {:.3} at ctc {:.2}",
            best.speedup(),
            best.ctc
        ));
    }
    out.csv = Some(csv);
    Ok(out)
}
