//! Simulated NVMe SSD.
//!
//! The device engine is a sim task woken by doorbell writes. It fetches
//! newly published submission entries in FIFO order, runs each on one of
//! `parallelism` channels for a sampled service time, executes the transfer
//! against its block store when the channel finishes, and posts the
//! completion. A full completion ring parks completions in an unbounded
//! in-device FIFO until the host frees entries.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::rc::Rc;

use rand_distr::{Distribution, Exp};

use crate::nvme::{NvmeCommand, Published, QueuePair};
use crate::sim::{Nanos, Notify, Sim, TaskHandle, TaskKind, TraceEvent};

/// Status code posted for a block address past the end of the device.
pub const STATUS_LBA_OUT_OF_RANGE: u16 = 0x80;
/// Status code posted when the backing store fails.
pub const STATUS_INTERNAL: u16 = 0x06;

#[derive(Debug, thiserror::Error)]
pub enum SsdError {
    #[error("block {blk} out of range on device {dev} ({blocks} blocks)")]
    OutOfRange { dev: u16, blk: u64, blocks: u64 },
    #[error("payload of {got} bytes does not match block size {want}")]
    BadPayload { got: usize, want: usize },
    #[error("invalid device config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    None,
    /// Adds U[0, max_ns].
    Uniform { max_ns: Nanos },
    /// Adds an exponential sample with the given mean.
    Exponential { mean_ns: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub read_base_ns: Nanos,
    pub write_base_ns: Nanos,
    pub jitter: Jitter,
}

impl LatencyModel {
    pub fn base_ns(&self, write: bool) -> Nanos {
        if write {
            self.write_base_ns
        } else {
            self.read_base_ns
        }
    }

    /// Service time of one command; never below the base latency.
    pub fn sample(&self, write: bool, sim: &Sim) -> Nanos {
        let base = self.base_ns(write);
        let extra = match self.jitter {
            Jitter::None => 0,
            Jitter::Uniform { max_ns } => sim.with_rng(|r| rand::Rng::random_range(r, 0..=max_ns)),
            Jitter::Exponential { mean_ns } => {
                let exp = Exp::new(1.0 / mean_ns).expect("positive jitter mean");
                sim.with_rng(|r| exp.sample(r)).round() as Nanos
            }
        };
        base + extra
    }

    /// Commands per second one channel sustains at the base latency.
    pub fn per_channel_rate(&self, write: bool) -> f64 {
        1e9 / self.base_ns(write) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub blocks: u64,
    pub block_size: u32,
    pub read_latency_ns: Nanos,
    pub write_latency_ns: Nanos,
    pub parallelism: u32,
    pub jitter: Jitter,
    /// Raw little-endian block image; in-memory sparse store when absent.
    pub backing: Option<PathBuf>,
}

/// Read plateau of the calibrated device, bytes per second.
pub const CALIBRATED_READ_BPS: f64 = 3.7e9;
/// Write plateau of the calibrated device, bytes per second.
pub const CALIBRATED_WRITE_BPS: f64 = 2.2e9;

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::calibrated(1 << 20)
    }
}

impl DeviceConfig {
    /// 4 KiB blocks and 64 channels, with base latencies fitted so the
    /// saturated rate is 3.7 GB/s for reads and 2.2 GB/s for writes.
    pub fn calibrated(blocks: u64) -> Self {
        let block_size = 4096u32;
        let parallelism = 64u32;
        let lat = |bps: f64| (parallelism as f64 * block_size as f64 / bps * 1e9).round() as Nanos;
        DeviceConfig {
            blocks,
            block_size,
            read_latency_ns: lat(CALIBRATED_READ_BPS),
            write_latency_ns: lat(CALIBRATED_WRITE_BPS),
            parallelism,
            jitter: Jitter::None,
            backing: None,
        }
    }

    pub fn latency_model(&self) -> LatencyModel {
        LatencyModel {
            read_base_ns: self.read_latency_ns,
            write_base_ns: self.write_latency_ns,
            jitter: self.jitter,
        }
    }

    /// Saturated transfer rate in bytes per second (no jitter).
    pub fn ceiling_bps(&self, write: bool) -> f64 {
        let lat = if write {
            self.write_latency_ns
        } else {
            self.read_latency_ns
        };
        self.parallelism as f64 * self.block_size as f64 * 1e9 / lat as f64
    }

    pub fn validate(&self) -> Result<(), SsdError> {
        if self.blocks == 0 || self.block_size == 0 || self.parallelism == 0 {
            return Err(SsdError::BadConfig(
                "blocks, block_size and parallelism must be positive".into(),
            ));
        }
        if self.read_latency_ns == 0 || self.write_latency_ns == 0 {
            return Err(SsdError::BadConfig("latencies must be positive".into()));
        }
        Ok(())
    }
}

/// Block-granular backing storage.
pub trait BlockStore {
    fn read_block(&mut self, blk: u64, out: &mut [u8]) -> io::Result<()>;
    fn write_block(&mut self, blk: u64, data: &[u8]) -> io::Result<()>;
}

/// Sparse in-memory store; never-written blocks read as zeros.
#[derive(Default)]
pub struct MemStore {
    blocks: HashMap<u64, Box<[u8]>>,
}

impl BlockStore for MemStore {
    fn read_block(&mut self, blk: u64, out: &mut [u8]) -> io::Result<()> {
        match self.blocks.get(&blk) {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0),
        }
        Ok(())
    }

    fn write_block(&mut self, blk: u64, data: &[u8]) -> io::Result<()> {
        self.blocks.insert(blk, data.into());
        Ok(())
    }
}

/// Block image in a file at offset `blk * block_size`. Reads past the end of
/// the file return zeros.
pub struct FileStore {
    file: File,
    block_size: u64,
}

impl FileStore {
    pub fn open(path: &std::path::Path, block_size: u32) -> io::Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        Ok(FileStore {
            file,
            block_size: block_size as u64,
        })
    }
}

impl BlockStore for FileStore {
    fn read_block(&mut self, blk: u64, out: &mut [u8]) -> io::Result<()> {
        out.fill(0);
        let off = blk * self.block_size;
        let mut done = 0;
        while done < out.len() {
            let n = self.file.read_at(&mut out[done..], off + done as u64)?;
            if n == 0 {
                break;
            }
            done += n;
        }
        Ok(())
    }

    fn write_block(&mut self, blk: u64, data: &[u8]) -> io::Result<()> {
        self.file.write_all_at(data, blk * self.block_size)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub fetched: u64,
    pub executed: u64,
    pub posted: u64,
    pub reads: u64,
    pub writes: u64,
    pub stalls: u64,
    pub max_overflow: usize,
    pub max_busy_channels: u32,
    pub errors: u64,
}

struct Fetched {
    sq: u16,
    cmd: NvmeCommand,
    /// Snapshot of the source buffer for writes, taken at fetch.
    payload: Option<Vec<u8>>,
}

#[derive(Default)]
struct DevState {
    /// Next position to fetch per SQ.
    fetched: Vec<u64>,
    /// Latest doorbell value seen per SQ.
    published: Vec<u64>,
    rung: VecDeque<u16>,
    pending: VecDeque<Fetched>,
    overflow: Vec<VecDeque<(u16, u16, u16)>>,
    stop: bool,
}

pub struct SsdDevice {
    dev: u16,
    cfg: DeviceConfig,
    latency: LatencyModel,
    sim: Sim,
    queues: Rc<Vec<QueuePair>>,
    store: RefCell<Box<dyn BlockStore>>,
    st: RefCell<DevState>,
    busy: Cell<u32>,
    wake: Notify,
    stats: RefCell<DeviceStats>,
    violations: RefCell<Vec<String>>,
}

impl SsdDevice {
    pub fn new(
        sim: Sim,
        dev: u16,
        cfg: DeviceConfig,
        queues: Rc<Vec<QueuePair>>,
    ) -> Result<Rc<Self>, SsdError> {
        cfg.validate()?;
        let store: Box<dyn BlockStore> = match &cfg.backing {
            Some(p) => Box::new(FileStore::open(p, cfg.block_size)?),
            None => Box::new(MemStore::default()),
        };
        let n = queues.len();
        Ok(Rc::new(SsdDevice {
            dev,
            latency: cfg.latency_model(),
            cfg,
            sim,
            queues,
            store: RefCell::new(store),
            st: RefCell::new(DevState {
                fetched: vec![0; n],
                published: vec![0; n],
                overflow: vec![VecDeque::new(); n],
                ..DevState::default()
            }),
            busy: Cell::new(0),
            wake: Notify::new(),
            stats: RefCell::new(DeviceStats::default()),
            violations: RefCell::new(Vec::new()),
        }))
    }

    pub fn idx(&self) -> u16 {
        self.dev
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn block_size(&self) -> usize {
        self.cfg.block_size as usize
    }

    pub fn num_blocks(&self) -> u64 {
        self.cfg.blocks
    }

    pub fn queues(&self) -> &Rc<Vec<QueuePair>> {
        &self.queues
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats.borrow().clone()
    }

    pub fn violations(&self) -> Vec<String> {
        self.violations.borrow().clone()
    }

    pub fn busy_channels(&self) -> u32 {
        self.busy.get()
    }

    pub fn overflow_len(&self) -> usize {
        self.st.borrow().overflow.iter().map(|q| q.len()).sum()
    }

    pub fn check_range(&self, blk: u64) -> Result<(), SsdError> {
        if blk >= self.cfg.blocks {
            return Err(SsdError::OutOfRange {
                dev: self.dev,
                blk,
                blocks: self.cfg.blocks,
            });
        }
        Ok(())
    }

    /// Direct store read, bypassing the queues.
    pub fn read_block(&self, blk: u64) -> Result<Vec<u8>, SsdError> {
        self.check_range(blk)?;
        let mut out = vec![0; self.block_size()];
        self.store.borrow_mut().read_block(blk, &mut out)?;
        Ok(out)
    }

    /// Direct store write, bypassing the queues.
    pub fn write_block(&self, blk: u64, data: &[u8]) -> Result<(), SsdError> {
        self.check_range(blk)?;
        if data.len() != self.block_size() {
            return Err(SsdError::BadPayload {
                got: data.len(),
                want: self.block_size(),
            });
        }
        self.store.borrow_mut().write_block(blk, data)?;
        Ok(())
    }

    /// SQ tail doorbell write.
    pub fn ring_sq_doorbell(&self, sq: u16, p: Published) {
        let mut st = self.st.borrow_mut();
        let last = st.published[sq as usize];
        if p.old != last || p.new <= p.old {
            drop(st);
            self.violation(format!(
                "sq {sq} doorbell {}..{} does not follow {last}",
                p.old, p.new
            ));
            return;
        }
        st.published[sq as usize] = p.new;
        st.rung.push_back(sq);
        drop(st);
        self.wake.notify();
    }

    /// CQ head doorbell write; frees ring entries for stalled completions.
    pub fn ring_cq_doorbell(&self, _cq: u16) {
        self.wake.notify();
    }

    pub fn stop(&self) {
        self.st.borrow_mut().stop = true;
        self.wake.notify();
    }

    /// Clear a previous stop so the engine can be started again.
    pub fn resume(&self) {
        self.st.borrow_mut().stop = false;
    }

    pub fn start(self: &Rc<Self>) -> TaskHandle {
        let dev = self.clone();
        self.sim
            .spawn(TaskKind::SsdEngine, format!("ssd{}", self.dev), async move {
                dev.engine().await
            })
    }

    async fn engine(self: Rc<Self>) {
        loop {
            let seen = self.wake.generation();
            self.fetch_published();
            self.dispatch();
            self.flush_overflow();
            let idle = {
                let st = self.st.borrow();
                st.pending.is_empty() && st.rung.is_empty()
            } && self.busy.get() == 0;
            if self.st.borrow().stop && idle {
                return;
            }
            self.wake.changed_since(seen).await;
        }
    }

    fn violation(&self, what: String) {
        self.sim.emit(TraceEvent::Violation {
            module: "ssd",
            what: what.clone(),
        });
        self.violations.borrow_mut().push(what);
    }

    fn fetch_published(&self) {
        loop {
            let mut st = self.st.borrow_mut();
            let Some(sq) = st.rung.pop_front() else {
                return;
            };
            let (from, to) = (st.fetched[sq as usize], st.published[sq as usize]);
            st.fetched[sq as usize] = to;
            drop(st);
            let queue = &self.queues[sq as usize].sq;
            for pos in from..to {
                match queue.fetch(pos) {
                    Ok(cmd) => {
                        let write = cmd.opcode.is_write();
                        self.sim.emit(TraceEvent::Fetch {
                            dev: self.dev,
                            sq,
                            sqe: queue.slot_of(pos),
                            cid: cmd.cid,
                            write,
                            blk: cmd.key.blk,
                        });
                        let payload = write.then(|| cmd.dest.to_vec());
                        self.stats.borrow_mut().fetched += 1;
                        self.st
                            .borrow_mut()
                            .pending
                            .push_back(Fetched { sq, cmd, payload });
                    }
                    Err(e) => self.violation(e.to_string()),
                }
            }
        }
    }

    fn dispatch(self: &Rc<Self>) {
        while self.busy.get() < self.cfg.parallelism {
            let Some(f) = self.st.borrow_mut().pending.pop_front() else {
                return;
            };
            let write = f.cmd.opcode.is_write();
            let lat = self.latency.sample(write, &self.sim);
            self.busy.set(self.busy.get() + 1);
            {
                let mut s = self.stats.borrow_mut();
                s.max_busy_channels = s.max_busy_channels.max(self.busy.get());
            }
            self.sim.emit(TraceEvent::Dispatch {
                dev: self.dev,
                sq: f.sq,
                cid: f.cmd.cid,
                done_at: self.sim.now() + lat,
            });
            let dev = self.clone();
            self.sim.schedule(lat, move || {
                dev.busy.set(dev.busy.get() - 1);
                dev.execute(f);
                dev.wake.notify();
            });
        }
    }

    fn execute(&self, f: Fetched) {
        let blk = f.cmd.key.blk;
        let status = if self.check_range(blk).is_err() {
            STATUS_LBA_OUT_OF_RANGE
        } else {
            let res = match &f.payload {
                Some(data) => self.store.borrow_mut().write_block(blk, data),
                None => {
                    let mut out = vec![0; self.block_size()];
                    let r = self.store.borrow_mut().read_block(blk, &mut out);
                    if r.is_ok() {
                        f.cmd.dest.copy_from(&out);
                    }
                    r
                }
            };
            if res.is_ok() {
                0
            } else {
                STATUS_INTERNAL
            }
        };
        {
            let mut s = self.stats.borrow_mut();
            s.executed += 1;
            if f.payload.is_some() {
                s.writes += 1;
            } else {
                s.reads += 1;
            }
            if status != 0 {
                s.errors += 1;
            }
        }
        // One completion queue per submission queue.
        self.post_completion(f.sq, f.cmd.cid, f.sq, status);
    }

    fn post_completion(&self, cq: u16, cid: u16, sq: u16, status: u16) {
        let mut st = self.st.borrow_mut();
        let q = &mut st.overflow[cq as usize];
        if !q.is_empty() {
            q.push_back((cid, sq, status));
            let len = q.len();
            drop(st);
            self.note_stall(cq, cid, len);
            return;
        }
        drop(st);
        if !self.try_post(cq, cid, sq, status) {
            let mut st = self.st.borrow_mut();
            let q = &mut st.overflow[cq as usize];
            q.push_back((cid, sq, status));
            let len = q.len();
            drop(st);
            self.note_stall(cq, cid, len);
        }
    }

    fn note_stall(&self, cq: u16, cid: u16, len: usize) {
        self.sim.emit(TraceEvent::CqStall {
            dev: self.dev,
            cq,
            cid,
        });
        let mut s = self.stats.borrow_mut();
        s.stalls += 1;
        s.max_overflow = s.max_overflow.max(len);
    }

    fn try_post(&self, cq: u16, cid: u16, sq: u16, status: u16) -> bool {
        match self.queues[cq as usize].cq.try_post(cid, sq, status) {
            Ok((pos, phase)) => {
                self.sim.emit(TraceEvent::CqePost {
                    dev: self.dev,
                    cq,
                    pos,
                    sq,
                    cid,
                    phase,
                });
                self.stats.borrow_mut().posted += 1;
                true
            }
            Err(_) => false,
        }
    }

    fn flush_overflow(&self) {
        for cq in 0..self.queues.len() {
            loop {
                let front = self.st.borrow().overflow[cq].front().copied();
                let Some((cid, sq, status)) = front else {
                    break;
                };
                if !self.try_post(cq as u16, cid, sq, status) {
                    break;
                }
                self.st.borrow_mut().overflow[cq].pop_front();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{DmaBuf, Opcode, SqdbStatus};
    use crate::sim::SimConfig;
    use crate::BlockKey;

    fn device(parallelism: u32, latency: Nanos, depth: u32) -> (Sim, Rc<SsdDevice>) {
        let sim = Sim::new(SimConfig {
            trace: true,
            ..SimConfig::default()
        });
        let qps = Rc::new(vec![QueuePair::new(0, depth).unwrap()]);
        let cfg = DeviceConfig {
            blocks: 64,
            block_size: 16,
            read_latency_ns: latency,
            write_latency_ns: latency,
            parallelism,
            jitter: Jitter::None,
            backing: None,
        };
        let dev = SsdDevice::new(sim.clone(), 0, cfg, qps).unwrap();
        (sim, dev)
    }

    fn submit(dev: &SsdDevice, op: Opcode, blk: u64, buf: &DmaBuf) {
        let sq = &dev.queues()[0].sq;
        let pos = sq.try_reserve().unwrap();
        sq.write_entry(
            pos,
            NvmeCommand {
                opcode: op,
                cid: 0,
                key: BlockKey::new(0, blk),
                dest: buf.clone(),
                len: 16,
            },
        )
        .unwrap();
        let (st, p) = sq.attempt_sqdb(pos);
        assert_eq!(st, SqdbStatus::Success);
        dev.ring_sq_doorbell(0, p.unwrap());
    }

    fn post_times(sim: &Sim) -> Vec<Nanos> {
        sim.trace()
            .records()
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::CqePost { .. }))
            .map(|r| r.time)
            .collect()
    }

    #[test]
    fn serial_channel_completes_back_to_back() {
        let (sim, dev) = device(1, 10_000, 4);
        dev.start();
        let b = DmaBuf::zeroed(16);
        submit(&dev, Opcode::Read, 0, &b);
        submit(&dev, Opcode::Read, 1, &b);
        dev.stop();
        sim.run_until_quiescent(u64::MAX).unwrap();
        assert_eq!(post_times(&sim), vec![10_000, 20_000]);
    }

    #[test]
    fn parallel_channels_complete_together() {
        let (sim, dev) = device(8, 10_000, 16);
        dev.start();
        let b = DmaBuf::zeroed(16);
        for blk in 0..8 {
            submit(&dev, Opcode::Read, blk, &b);
        }
        dev.stop();
        sim.run_until_quiescent(u64::MAX).unwrap();
        assert_eq!(post_times(&sim), vec![10_000; 8]);
        assert_eq!(dev.stats().max_busy_channels, 8);
    }

    #[test]
    fn write_then_read_round_trips() {
        let (sim, dev) = device(4, 100, 8);
        dev.start();
        let src = DmaBuf::from_vec((0..16).collect());
        submit(&dev, Opcode::Write, 5, &src);
        sim.run_until_quiescent(u64::MAX).unwrap();
        let dst = DmaBuf::zeroed(16);
        submit(&dev, Opcode::Read, 5, &dst);
        dev.stop();
        sim.run_until_quiescent(u64::MAX).unwrap();
        assert_eq!(dst.to_vec(), (0..16).collect::<Vec<u8>>());
        assert_eq!(dev.read_block(6).unwrap(), vec![0; 16]);
    }

    #[test]
    fn out_of_range_block() {
        let (_, dev) = device(1, 1, 4);
        assert!(matches!(dev.read_block(64), Err(SsdError::OutOfRange { .. })));
        assert!(dev.read_block(63).is_ok());
    }

    #[test]
    fn stale_doorbell_is_a_violation() {
        let (_, dev) = device(1, 1, 4);
        dev.ring_sq_doorbell(0, Published { old: 3, new: 4 });
        assert_eq!(dev.violations().len(), 1);
    }

    #[test]
    fn full_completion_ring_stalls_until_doorbell() {
        let (sim, dev) = device(64, 10, 128);
        dev.start();
        let b = DmaBuf::zeroed(16);
        for blk in 0..64 {
            submit(&dev, Opcode::Read, blk % 64, &b);
        }
        sim.run_until_quiescent(u64::MAX).unwrap();
        let cq = &dev.queues()[0].cq;
        // 127-entry usable ring holds all 64.
        assert_eq!(cq.device_tail(), 64);
        assert_eq!(dev.stats().stalls, 0);
    }

    #[test]
    fn stall_then_release() {
        let (sim, dev) = device(64, 10, 64);
        dev.start();
        let b = DmaBuf::zeroed(16);
        let sq = &dev.queues()[0].sq;
        let cq = &dev.queues()[0].cq;
        // Push 63 commands, complete them, release the entries without
        // consuming the completions, then push one more.
        for blk in 0..63 {
            submit(&dev, Opcode::Read, blk, &b);
        }
        sim.run_until_quiescent(u64::MAX).unwrap();
        for i in 0..63 {
            sq.release_sqe(i).unwrap();
        }
        submit(&dev, Opcode::Read, 0, &b);
        sim.run_until_quiescent(u64::MAX).unwrap();
        assert_eq!(cq.device_tail(), 63);
        assert_eq!(dev.overflow_len(), 1);
        cq.ring_head(32);
        dev.ring_cq_doorbell(0);
        dev.stop();
        sim.run_until_quiescent(u64::MAX).unwrap();
        assert_eq!(cq.device_tail(), 64);
        assert_eq!(dev.overflow_len(), 0);
    }

    #[test]
    fn file_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        let mut s = FileStore::open(&path, 8).unwrap();
        s.write_block(2, &[7; 8]).unwrap();
        let mut out = [1u8; 8];
        s.read_block(2, &mut out).unwrap();
        assert_eq!(out, [7; 8]);
        s.read_block(9, &mut out).unwrap();
        assert_eq!(out, [0; 8]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
    }

    #[test]
    fn calibration_hits_plateaus() {
        let c = DeviceConfig::calibrated(16);
        assert!((c.ceiling_bps(false) / CALIBRATED_READ_BPS - 1.0).abs() < 1e-4);
        assert!((c.ceiling_bps(true) / CALIBRATED_WRITE_BPS - 1.0).abs() < 1e-4);
    }

    #[test]
    fn jitter_never_undercuts_base() {
        let sim = Sim::new(SimConfig::default());
        for jitter in [Jitter::Uniform { max_ns: 500 }, Jitter::Exponential { mean_ns: 300.0 }] {
            let m = LatencyModel {
                read_base_ns: 1000,
                write_base_ns: 2000,
                jitter,
            };
            for _ in 0..1000 {
                assert!(m.sample(false, &sim) >= 1000);
                assert!(m.sample(true, &sim) >= 2000);
            }
        }
    }
}
