//! Share-table coherence check on small random instances.
//!
//! Tasks run short programs of reads and read-modify-writes over a handful
//! of blocks. An update commits when its new value lands in the task's
//! buffer; with the share table on it is published by `release`, without
//! it by an `async_write` after a hold. Every committed value is appended
//! to a global log in simulator order.
//!
//! Checks:
//! - each read returns a value that was current at some instant between
//!   its issue and its completion (replaying the log);
//! - after the final flush, device and resident cache lines hold the
//!   log's last value per block.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{BenchError, Csv, Outcome};
use crate::config::{AgileConfig, ConfigError, KvDoc};
use crate::host::{AgileHost, RunReport};
use crate::sim::{Nanos, TieBreak};
use crate::BlockKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read { blk: u64, think: Nanos },
    Update { blk: u64, think: Nanos, hold: Nanos },
}

/// One program per task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub blocks: u64,
    pub programs: Vec<Vec<Op>>,
}

impl Instance {
    pub fn random(seed: u64, max_tasks: usize, max_blocks: u64, max_ops: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = rng.random_range(2..=max_tasks.max(2));
        let blocks = rng.random_range(1..=max_blocks.max(1));
        let programs = (0..tasks)
            .map(|_| {
                let n = rng.random_range(1..=max_ops.max(1));
                (0..n)
                    .map(|_| {
                        let blk = rng.random_range(0..blocks);
                        let think = rng.random_range(0..150_000);
                        if rng.random_bool(0.5) {
                            Op::Update {
                                blk,
                                think,
                                hold: rng.random_range(0..300_000),
                            }
                        } else {
                            Op::Read { blk, think }
                        }
                    })
                    .collect()
            })
            .collect();
        Instance { blocks, programs }
    }

    /// A writer holding a modified copy of block 0 while readers arrive.
    pub fn hazard() -> Self {
        let reader = |think| vec![Op::Read { blk: 0, think }];
        Instance {
            blocks: 1,
            programs: vec![
                vec![Op::Update {
                    blk: 0,
                    think: 0,
                    hold: 400_000,
                }],
                reader(200_000),
                reader(250_000),
                reader(300_000),
            ],
        }
    }

    pub fn ops(&self) -> usize {
        self.programs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Default)]
struct Log {
    /// (block, value) in commit order.
    commits: Vec<(u64, u64)>,
    stale: Vec<String>,
    reads: usize,
}

impl Log {
    fn value_at(&self, blk: u64, upto: usize) -> u64 {
        self.commits[..upto]
            .iter()
            .rev()
            .find(|c| c.0 == blk)
            .map_or(0, |c| c.1)
    }

    /// Values of `blk` current at some point in `[from, to]` of the log.
    fn admissible(&self, blk: u64, from: usize, to: usize) -> Vec<u64> {
        let mut v = vec![self.value_at(blk, from)];
        v.extend(self.commits[from..to].iter().filter(|c| c.0 == blk).map(|c| c.1));
        v
    }
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub seed: u64,
    pub share: bool,
    pub tasks: usize,
    pub blocks: u64,
    pub ops: usize,
    pub commits: usize,
    pub reads: usize,
    pub stale_reads: Vec<String>,
    pub mismatches: Vec<String>,
    pub report: RunReport,
}

impl InstanceResult {
    pub fn coherent(&self) -> bool {
        self.stale_reads.is_empty() && self.mismatches.is_empty()
    }
}

fn value_of(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Run `inst` once. The base configuration's device, queue and cache
/// geometry are overridden with a tiny setup that forces evictions.
pub fn run_instance(
    base: &AgileConfig,
    inst: &Instance,
    seed: u64,
    share: bool,
    cache_lines: usize,
    out: &mut Outcome,
) -> Result<InstanceResult, BenchError> {
    let mut cfg = base.clone().with_seed(seed);
    cfg.sim.tie_break = TieBreak::Random;
    cfg.devices.truncate(1);
    cfg.devices[0].blocks = cfg.devices[0].blocks.max(inst.blocks);
    cfg.cache_lines = cache_lines;
    cfg.share_table.enabled = share;
    let host = AgileHost::new(cfg)?;
    let log = Rc::new(RefCell::new(Log::default()));
    let programs = Rc::new(inst.programs.clone());
    let (log2, progs) = (log.clone(), programs.clone());
    let report = host.run_kernel(inst.programs.len(), move |mut t| {
        let (log, progs) = (log2.clone(), progs.clone());
        async move {
            let me = t.index();
            let buf = t.new_buf();
            for (k, op) in progs[me].iter().enumerate() {
                match *op {
                    Op::Read { blk, think } => {
                        t.compute(think).await;
                        let from = log.borrow().commits.len();
                        t.async_read(0, blk, &buf).await?;
                        t.wait(&buf).await?;
                        let got = value_of(&buf.bytes());
                        {
                            let mut l = log.borrow_mut();
                            let to = l.commits.len();
                            let ok = l.admissible(blk, from, to);
                            l.reads += 1;
                            if !ok.contains(&got) {
                                let msg = format!(
                                    "task {me} read blk {blk} = {got:#x}, expected one of {ok:x?} at {} ns",
                                    t.now()
                                );
                                l.stale.push(msg);
                            }
                        }
                        if share {
                            t.release(&buf).await?;
                        }
                    }
                    Op::Update { blk, think, hold } => {
                        t.compute(think).await;
                        t.async_read(0, blk, &buf).await?;
                        t.wait(&buf).await?;
                        let v = ((me as u64 + 1) << 32) | (k as u64 + 1);
                        t.modify(&buf, 0, &v.to_le_bytes())?;
                        log.borrow_mut().commits.push((blk, v));
                        t.compute(hold).await;
                        if share {
                            t.release(&buf).await?;
                        } else {
                            t.async_write(0, blk, &buf).await?;
                        }
                    }
                }
            }
            t.finish()
        }
    })?;
    super::check_run(&report)?;
    out.absorb(&format!("coherence seed={seed} share={share}"), &host, &report);
    let log = log.borrow();
    let mut mismatches = Vec::new();
    let cache = host.ctrl().cache();
    for blk in 0..inst.blocks {
        let want = log.value_at(blk, log.commits.len());
        let key = BlockKey::new(0, blk);
        let dev = value_of(&host.device_block(key)?);
        if dev != want {
            mismatches.push(format!("device blk {blk}: {dev:#x} != {want:#x}"));
        }
        if let Some(line) = cache.line_of(key) {
            let cached = value_of(&cache.line_buf(line).to_vec());
            if cached != want {
                mismatches.push(format!("cache blk {blk}: {cached:#x} != {want:#x}"));
            }
        }
    }
    if let Some(table) = host.ctrl().share() {
        if !table.is_empty() {
            mismatches.push(format!("share table not empty: {:?}", table.keys()));
        }
    }
    Ok(InstanceResult {
        seed,
        share,
        tasks: inst.programs.len(),
        blocks: inst.blocks,
        ops: inst.ops(),
        commits: log.commits.len(),
        reads: log.reads,
        stale_reads: log.stale.clone(),
        mismatches,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceParams {
    pub seeds: u64,
    pub first_seed: u64,
    pub max_tasks: usize,
    pub max_blocks: u64,
    pub max_ops: usize,
    pub cache_lines: usize,
    /// Also run the hazard workload with the table disabled.
    pub hazard: bool,
}

impl Default for CoherenceParams {
    fn default() -> Self {
        CoherenceParams {
            seeds: 200,
            first_seed: 0,
            max_tasks: 4,
            max_blocks: 4,
            max_ops: 8,
            cache_lines: 2,
            hazard: true,
        }
    }
}

impl CoherenceParams {
    pub fn from_doc(doc: &KvDoc) -> Result<Self, ConfigError> {
        let d = CoherenceParams::default();
        let p = CoherenceParams {
            seeds: doc.get_or("seeds", d.seeds)?,
            first_seed: doc.get_or("first_seed", d.first_seed)?,
            max_tasks: doc.get_or("max_tasks", d.max_tasks)?,
            max_blocks: doc.get_or("max_blocks", d.max_blocks)?,
            max_ops: doc.get_or("max_ops", d.max_ops)?,
            cache_lines: doc.get_or("coherence_cache_lines", d.cache_lines)?,
            hazard: doc.get_or("hazard", d.hazard)?,
        };
        if p.max_tasks == 0 || p.max_blocks == 0 || p.max_ops == 0 || p.cache_lines == 0 {
            return Err(ConfigError::Invalid(
                "coherence instance limits must be positive".into(),
            ));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct CoherenceSummary {
    pub checked: Vec<InstanceResult>,
    pub hazard: Vec<InstanceResult>,
}

impl CoherenceSummary {
    pub fn mismatching(&self) -> usize {
        self.checked.iter().filter(|r| !r.coherent()).count()
    }

    pub fn hazard_stale_seeds(&self) -> usize {
        self.hazard.iter().filter(|r| !r.stale_reads.is_empty()).count()
    }
}

pub fn sweep(base: &AgileConfig, p: &CoherenceParams, out: &mut Outcome) -> Result<CoherenceSummary, BenchError> {
    let mut checked = Vec::new();
    let mut hazard = Vec::new();
    for seed in p.first_seed..p.first_seed + p.seeds {
        let inst = Instance::random(seed, p.max_tasks, p.max_blocks, p.max_ops);
        checked.push(run_instance(base, &inst, seed, true, p.cache_lines, out)?);
    }
    if p.hazard {
        let inst = Instance::hazard();
        for seed in p.first_seed..p.first_seed + p.seeds.min(16) {
            hazard.push(run_instance(base, &inst, seed, false, p.cache_lines, out)?);
        }
    }
    Ok(CoherenceSummary { checked, hazard })
}

pub fn run_experiment(base: &AgileConfig, p: &CoherenceParams) -> Result<Outcome, BenchError> {
    let mut out = Outcome::default();
    let s = sweep(base, p, &mut out)?;
    let mut csv = Csv::new(&[
        "workload", "seed", "share_table", "tasks", "blocks", "ops", "commits", "reads", "stale_reads",
        "final_mismatches",
    ]);
    let rows = s
        .checked
        .iter()
        .map(|r| ("random", r))
        .chain(s.hazard.iter().map(|r| ("hazard", r)));
    for (w, r) in rows {
        csv.push(vec![
            w.into(),
            r.seed.to_string(),
            r.share.to_string(),
            r.tasks.to_string(),
            r.blocks.to_string(),
            r.ops.to_string(),
            r.commits.to_string(),
            r.reads.to_string(),
            r.stale_reads.len().to_string(),
            r.mismatches.len().to_string(),
        ]);
    }
    out.summary.push(format!(
        "share table on: {} instances, {} incoherent",
        s.checked.len(),
        s.mismatching()
    ));
    for r in s.checked.iter().filter(|r| !r.coherent()).take(5) {
        for m in r.stale_reads.iter().chain(&r.mismatches) {
            out.summary.push(format!("  seed {}: {m}", r.seed));
        }
    }
    if p.hazard {
        out.summary.push(format!(
            "share table off, hazard workload: stale reads in {}/{} seeds",
            s.hazard_stale_seeds(),
            s.hazard.len()
        ));
    }
    out.csv = Some(csv);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admissible_values_follow_the_log() {
        let l = Log {
            commits: vec![(0, 5), (1, 7), (0, 9)],
            ..Log::default()
        };
        assert_eq!(l.value_at(0, 0), 0);
        assert_eq!(l.value_at(0, 3), 9);
        assert_eq!(l.admissible(0, 1, 3), vec![5, 9]);
        assert_eq!(l.admissible(1, 3, 3), vec![7]);
    }

    #[test]
    fn random_instances_stay_small() {
        for s in 0..50 {
            let i = Instance::random(s, 4, 4, 8);
            assert!((2..=4).contains(&i.programs.len()));
            assert!((1..=4).contains(&i.blocks));
            assert!(i.programs.iter().all(|p| (1..=8).contains(&p.len())));
        }
    }
}
