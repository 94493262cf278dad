//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr
//! (uncaptured) and then asserts.

use std::cell::RefCell;
use std::io::Write as _;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::{Duration, Instant};

use agile_sim::audit::WindowAudit;
use agile_sim::bench::{self, coherence, ctc, deadlock, protocol, rand_rw, Experiment, HygieneTotals, Outcome};
use agile_sim::config::{AgileConfig, KvDoc};
use agile_sim::nvme::WINDOW;
use agile_sim::{AgileBuf, AgileHost, BlockKey};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn load(name: &str) -> KvDoc {
    KvDoc::load(&config_path(name)).expect("config parses")
}

fn base(name: &str) -> AgileConfig {
    bench::base_config(&load(name), None).expect("valid config")
}

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n} [{}] {title}: {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

#[test]
fn criterion_1_deadlock_demo() {
    let t0 = Instant::now();
    let b = base("deadlock_demo.conf");
    let p = deadlock::DeadlockParams::from_doc(&load("deadlock_demo.conf")).unwrap();
    let mut out = Outcome::default();
    let naive = deadlock::run_naive(&b, &p, &mut out).unwrap();
    let agile = deadlock::run_agile(&b, &p, &mut out).unwrap();
    let naive2 = deadlock::run_naive(&b, &p, &mut Outcome::default()).unwrap();
    let elapsed = t0.elapsed();
    let ok = b.queue_depth == 2
        && p.threads == 4
        && naive.blocked > 0
        && !naive.cycles.is_empty()
        && agile.completed == 4
        && agile.blocked == 0
        && agile.cycles.is_empty()
        && naive == naive2
        && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "deadlock demo",
        ok,
        &format!(
            "naive blocked {} cycle {:?}; agile {}/4 done; {}",
            naive.blocked,
            naive.cycles,
            agile.completed,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_2_exactly_once() {
    let t0 = Instant::now();
    let runs = protocol::run_suite(&AgileConfig::small(), 0x5eed, 100_000, 2_500, false).unwrap();
    let elapsed = t0.elapsed();
    let enq: u64 = runs.iter().map(|r| r.queue.enqueues).sum();
    let dirty: Vec<_> = runs.iter().filter(|r| !r.queue.is_clean() || !r.report.clean()).collect();
    let sqs: std::collections::BTreeSet<_> = runs.iter().map(|r| r.geometry.queue_pairs).collect();
    let depths: std::collections::BTreeSet<_> = runs.iter().map(|r| r.geometry.depth).collect();
    let ok = enq >= 100_000 && dirty.is_empty() && elapsed < Duration::from_secs(30);
    verdict(
        2,
        "queue protocol exactly-once",
        ok,
        &format!(
            "{} runs, {enq} commands, SQs {sqs:?}, depths {depths:?}, {} dirty runs{}; {}",
            runs.len(),
            dirty.len(),
            dirty.first().map(|r| format!(" (first: {:?})", r.queue)).unwrap_or_default(),
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_3_window_semantics() {
    let totals = RefCell::new(WindowAudit::default());
    let failures = RefCell::new(Vec::new());
    let mut runner = TestRunner::new(PtConfig {
        cases: 48,
        ..PtConfig::default()
    });
    let strategy = (1usize..=8, 0usize..8, 1usize..=96, 1usize..=24, any::<u64>());
    let result = runner.run(&strategy, |(qps, di, threads, cmds, seed)| {
        let g = protocol::Geometry {
            devices: 1,
            queue_pairs: qps,
            depth: protocol::DEPTHS[di],
            threads,
            commands_per_thread: cmds,
            cache_lines: 16,
        };
        let run = protocol::run_geometry(&AgileConfig::small(), g, seed, false).unwrap();
        let w = run.window.clone();
        {
            let mut t = totals.borrow_mut();
            t.steady_rings += w.steady_rings;
            t.drain_rings += w.drain_rings;
            t.max_drain_residual = t.max_drain_residual.max(w.max_drain_residual);
        }
        if !(w.is_clean() && w.max_drain_residual < WINDOW && run.report.clean()) {
            failures.borrow_mut().push((g, seed, w.clone()));
        }
        prop_assert!(w.is_clean(), "{w:?}");
        prop_assert!(w.max_drain_residual <= 31);
        Ok(())
    });
    let (totals, failures) = (totals.into_inner(), failures.into_inner());
    let ok = result.is_ok() && failures.is_empty() && totals.steady_rings > 0 && totals.drain_rings > 0;
    verdict(
        3,
        "CQ window semantics",
        ok,
        &format!(
            "{} steady rings all one aligned window, {} drain rings, max residual {}, {} failing cases",
            totals.steady_rings,
            totals.drain_rings,
            totals.max_drain_residual,
            failures.len()
        ),
    );
}

#[test]
fn criterion_4_ctc_sweep() {
    let t0 = Instant::now();
    let doc = load("ctc_sweep.conf");
    let p = ctc::CtcParams::from_doc(&doc).unwrap();
    let r = ctc::sweep(&base("ctc_sweep.conf"), &p, &mut Outcome::default()).unwrap();
    let elapsed = t0.elapsed();
    let s: Vec<f64> = r.points.iter().map(|x| x.speedup()).collect();
    let c: Vec<f64> = r.points.iter().map(|x| x.ctc).collect();
    let (pk, &peak) = s
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let grid = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0, 1.5, 2.0];
    let on_grid = c.len() == grid.len() && c.iter().zip(grid).all(|(a, b)| (a - b).abs() < 0.01);
    let rises = s[..=pk].windows(2).all(|w| w[1] >= w[0] * 0.95);
    let falls = s[pk..].windows(2).all(|w| w[1] <= w[0] * 1.05);
    let ok = on_grid
        && (0.95..=1.1).contains(&s[0])
        && peak >= 1.7
        && (0.75..=1.0).contains(&c[pk])
        && *s.last().unwrap() <= peak
        && rises
        && falls
        && elapsed < Duration::from_secs(120);
    let curve: Vec<String> = c.iter().zip(&s).map(|(c, s)| format!("{c:.2}:{s:.3}")).collect();
    verdict(
        4,
        "CTC sweep",
        ok,
        &format!("speedups {}; peak {peak:.3} at {:.2}; {}", curve.join(" "), c[pk], secs(elapsed)),
    );
}

#[test]
fn criterion_5_multi_device_scaling() {
    let t0 = Instant::now();
    let doc = load("rand_read.conf");
    let p = rand_rw::RandParams::from_doc(&doc).unwrap();
    let pts = rand_rw::sweep(&base("rand_read.conf"), &p, &mut Outcome::default()).unwrap();
    let elapsed = t0.elapsed();
    let curve = |d: usize| -> Vec<f64> { pts.iter().filter(|x| x.devices == d).map(|x| x.gb_per_s()).collect() };
    let plateau = |d: usize| curve(d).into_iter().fold(0.0, f64::max);
    let single = plateau(1);
    let mut detail = Vec::new();
    let mut ok = elapsed < Duration::from_secs(120);
    for d in [1usize, 2, 3] {
        let bw = curve(d);
        let top = plateau(d);
        let ratio = top / (d as f64 * single);
        let sat = bw.iter().position(|&b| b >= 0.95 * top).unwrap();
        let monotone = bw[..=sat].windows(2).all(|w| w[1] >= w[0]);
        ok &= (ratio - 1.0).abs() <= 0.05 && monotone;
        detail.push(format!(
            "{d} dev {top:.2} GB/s (x{:.3} of single), monotone to saturation: {monotone}",
            top / single
        ));
    }
    verdict(5, "multi-device scaling", ok, &format!("{}; {}", detail.join("; "), secs(elapsed)));
}

#[test]
fn criterion_6_coherence() {
    let doc = load("coherence.conf");
    let p = coherence::CoherenceParams::from_doc(&doc).unwrap();
    let s = coherence::sweep(&base("coherence.conf"), &p, &mut Outcome::default()).unwrap();
    let bad = s.mismatching();
    let small = s
        .checked
        .iter()
        .all(|r| r.tasks <= 4 && r.blocks <= 4 && r.ops <= 4 * 8 && r.share);
    let ok = p.seeds >= 200 && s.checked.len() as u64 == p.seeds && small && bad == 0 && s.hazard_stale_seeds() >= 1;
    let first = s
        .checked
        .iter()
        .find(|r| !r.coherent())
        .map(|r| format!(" first bad seed {}: {:?} {:?}", r.seed, r.stale_reads, r.mismatches))
        .unwrap_or_default();
    verdict(
        6,
        "share-table coherence",
        ok,
        &format!(
            "{} instances with table on, {bad} mismatching; hazard without table stale in {}/{} seeds{first}",
            s.checked.len(),
            s.hazard_stale_seeds(),
            s.hazard.len()
        ),
    );
}

fn pattern(blk: u64, bs: usize) -> Vec<u8> {
    (0..bs).map(|i| (i as u64 ^ blk.wrapping_mul(131)) as u8).collect()
}

#[test]
fn criterion_7_coalescing() {
    // Warp level: 32 lanes of one warp prefetch the same cold block.
    let host = AgileHost::new(AgileConfig::small()).unwrap();
    let bs = host.ctrl().block_size();
    host.preload(BlockKey::new(0, 7), &pattern(7, bs)).unwrap();
    let r = host
        .run_kernel(32, |mut t| async move {
            let v: u8 = t.warp_array_get(0, 7 * t.block_size() as u64 + t.lane() as u64).await?;
            let _ = v;
            t.finish()
        })
        .unwrap();
    let warp_reads = r.device_reads();
    let warp_ok = warp_reads == 1 && r.clean();

    // Cache level: 32 independent threads, one per warp, async_read the block.
    let mut cfg = AgileConfig::small();
    cfg.warp_size = 1;
    let host = AgileHost::new(cfg).unwrap();
    host.preload(BlockKey::new(0, 9), &pattern(9, bs)).unwrap();
    let bufs: Rc<Vec<AgileBuf>> = Rc::new((0..32).map(|_| AgileBuf::new(bs)).collect());
    let b2 = bufs.clone();
    let r = host
        .run_kernel(32, move |mut t| {
            let bufs = b2.clone();
            async move {
                let buf = &bufs[t.index()];
                t.async_read(0, 9, buf).await?;
                t.wait(buf).await?;
                t.finish()
            }
        })
        .unwrap();
    let want = pattern(9, bs);
    let filled = bufs.iter().filter(|b| b.bytes() == want).count();
    let cache_ok = r.device_reads() == 1 && filled == 32 && r.clean();
    verdict(
        7,
        "request coalescing",
        warp_ok && cache_ok,
        &format!(
            "warp path {warp_reads} READ; cache path {} READ, {filled}/32 buffers filled",
            r.device_reads()
        ),
    );
}

#[test]
fn criterion_8_lock_hygiene() {
    let mut totals = HygieneTotals::default();
    let mut exit2 = 0;
    for (exp, conf) in suites() {
        let out = bench::run(exp, &load(conf), None, false).unwrap();
        if out.agile_deadlock {
            exit2 += 1;
        }
        let h = &out.hygiene;
        totals.runs += h.runs;
        totals.exits_checked += h.exits_checked;
        totals.exits_with_locks += h.exits_with_locks;
        totals.barrier_waits += h.barrier_waits;
        totals.waits_with_locks += h.waits_with_locks;
        totals.deadlock_reports += h.deadlock_reports;
    }
    for run in protocol::run_suite(&AgileConfig::small(), 0x8, 20_000, 2_000, false).unwrap() {
        totals.add(&run.report);
    }
    let ok = totals.is_clean() && exit2 == 0 && totals.exits_checked > 0 && totals.barrier_waits > 0;
    verdict(
        8,
        "lock hygiene",
        ok,
        &format!(
            "{} runs, {} task exits ({} holding locks), {} barrier waits ({} holding locks), {} agile deadlock reports, exit-2 count {exit2}",
            totals.runs,
            totals.exits_checked,
            totals.exits_with_locks,
            totals.barrier_waits,
            totals.waits_with_locks,
            totals.deadlock_reports
        ),
    );
}

fn suites() -> Vec<(Experiment, &'static str)> {
    vec![
        (Experiment::DeadlockDemo, "deadlock_demo.conf"),
        (Experiment::CtcSweep, "ctc_sweep.conf"),
        (Experiment::RandRead, "rand_read.conf"),
        (Experiment::RandWrite, "rand_read.conf"),
        (Experiment::QueueSweep, "queue_sweep.conf"),
        (Experiment::CacheSweep, "cache_sweep.conf"),
        (Experiment::Coherence, "coherence.conf"),
    ]
}

#[test]
fn criterion_9_determinism() {
    let mut differing = Vec::new();
    let mut bytes = 0usize;
    for (exp, conf) in suites() {
        let run = || bench::run(exp, &load(conf), Some(11), true).unwrap();
        let (a, b) = (run(), run());
        let csv = |o: &Outcome| o.csv.as_ref().map(|c| c.render()).unwrap_or_default();
        bytes += a.trace.len() + csv(&a).len();
        if a.trace.is_empty() || a.trace != b.trace || csv(&a) != csv(&b) {
            differing.push(exp.name().to_string());
        }
    }
    let suite = || -> Vec<String> {
        protocol::run_suite(&AgileConfig::small(), 0x9, 10_000, 2_000, true)
            .unwrap()
            .into_iter()
            .filter_map(|r| r.trace)
            .collect()
    };
    if suite() != suite() {
        differing.push("protocol".into());
    }
    let coal = || -> String {
        let host = AgileHost::new(AgileConfig::small().with_trace(true)).unwrap();
        host.run_kernel(32, |mut t| async move {
            let _: u32 = t.warp_array_get(0, 5).await?;
            t.finish()
        })
        .unwrap();
        host.sim().trace().render()
    };
    if coal() != coal() {
        differing.push("coalescing".into());
    }
    verdict(
        9,
        "determinism",
        differing.is_empty(),
        &format!("{} suites re-run, {bytes} trace+csv bytes compared, differing: {differing:?}", suites().len() + 2),
    );
}
