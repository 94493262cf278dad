//! Random 4 KiB read/write bandwidth against 1..n devices.
//!
//! `inflight` threads each issue `requests_per_thread` uncached commands
//! back to back. Request `j` (counting across threads) goes to device
//! `j mod d` at a pseudo-random block.

use crate::bench::{f4, mix64, BenchError, Csv, Outcome};
use crate::config::{AgileConfig, ConfigError, KvDoc};
use crate::host::AgileHost;
use crate::sim::Nanos;
use crate::ssd::DeviceConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RandParams {
    pub inflight: Vec<usize>,
    pub device_counts: Vec<usize>,
    pub requests_per_thread: usize,
    pub blocks_per_device: u64,
    pub write: bool,
}

impl Default for RandParams {
    fn default() -> Self {
        RandParams {
            inflight: vec![1, 2, 4, 8, 16, 32, 64, 96, 128, 192, 256, 384],
            device_counts: vec![1, 2, 3],
            requests_per_thread: 16,
            blocks_per_device: 1 << 20,
            write: false,
        }
    }
}

impl RandParams {
    pub fn from_doc(doc: &KvDoc) -> Result<Self, ConfigError> {
        let d = RandParams::default();
        let p = RandParams {
            inflight: doc.list("inflight")?.unwrap_or(d.inflight),
            device_counts: doc.list("device_counts")?.unwrap_or(d.device_counts),
            requests_per_thread: doc.get_or("requests_per_thread", d.requests_per_thread)?,
            blocks_per_device: doc.get_or("blocks_per_device", d.blocks_per_device)?,
            write: false,
        };
        if p.inflight.contains(&0) || p.device_counts.contains(&0) || p.requests_per_thread == 0 {
            return Err(ConfigError::Invalid(
                "inflight, device_counts and requests_per_thread must be positive".into(),
            ));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandPoint {
    pub inflight: usize,
    pub devices: usize,
    pub bytes: u64,
    pub kernel_ns: Nanos,
}

impl RandPoint {
    /// Bytes per nanosecond, i.e. GB/s.
    pub fn gb_per_s(&self) -> f64 {
        self.bytes as f64 / self.kernel_ns as f64
    }
}

/// Device template for `d`-device runs: the first configured device,
/// resized, repeated.
fn devices(base: &AgileConfig, d: usize, blocks: u64) -> Vec<DeviceConfig> {
    let mut t = base.devices[0].clone();
    t.blocks = blocks;
    vec![t; d]
}

pub fn run_point(
    base: &AgileConfig,
    p: &RandParams,
    inflight: usize,
    d: usize,
    out: &mut Outcome,
) -> Result<RandPoint, BenchError> {
    let mut cfg = base.clone();
    cfg.devices = devices(base, d, p.blocks_per_device);
    let host = AgileHost::new(cfg)?;
    let (reqs, blocks, write, seed) = (p.requests_per_thread, p.blocks_per_device, p.write, base.sim.seed);
    let report = host.run_kernel(inflight, move |mut t| async move {
        let buf = t.new_buf();
        for k in 0..reqs {
            let j = (k * inflight + t.index()) as u64;
            let dev = (j % d as u64) as u16;
            let blk = mix64(seed ^ j.wrapping_mul(0x1000_0001)) % blocks;
            if write {
                t.raw_write(dev, blk, &buf).await?;
            } else {
                t.raw_read(dev, blk, &buf).await?;
            }
            t.wait(&buf).await?;
        }
        t.finish()
    })?;
    super::check_run(&report)?;
    out.absorb(&format!("rand inflight={inflight} devices={d}"), &host, &report);
    Ok(RandPoint {
        inflight,
        devices: d,
        bytes: (inflight * reqs * host.ctrl().block_size()) as u64,
        kernel_ns: report.kernel_ns(),
    })
}

pub fn sweep(base: &AgileConfig, p: &RandParams, out: &mut Outcome) -> Result<Vec<RandPoint>, BenchError> {
    let mut pts = Vec::new();
    for &d in &p.device_counts {
        for &n in &p.inflight {
            pts.push(run_point(base, p, n, d, out)?);
        }
    }
    Ok(pts)
}

pub fn run(base: &AgileConfig, p: &RandParams) -> Result<Outcome, BenchError> {
    let mut out = Outcome::default();
    let pts = sweep(base, p, &mut out)?;
    let op = if p.write { "write" } else { "read" };
    let mut csv = Csv::new(&["concurrent_requests", "num_devices", "op", "gb_per_s", "kernel_ns"]);
    for pt in &pts {
        csv.push(vec![
            pt.inflight.to_string(),
            pt.devices.to_string(),
            op.into(),
            f4(pt.gb_per_s()),
            pt.kernel_ns.to_string(),
        ]);
    }
    for &d in &p.device_counts {
        if let Some(best) = pts
            .iter()
            .filter(|x| x.devices == d)
            .map(|x| x.gb_per_s())
            .max_by(f64::total_cmp)
        {
            out.summary.push(format!("{d} device(s): peak {op} {best:.3} GB/s"));
        }
    }
    out.csv = Some(csv);
    Ok(out)
}
