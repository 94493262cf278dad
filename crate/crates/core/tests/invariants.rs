//! Cross-module invariants checked on randomized controller runs.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use agile_sim::audit::{audit_lines, audit_queues};
use agile_sim::sim::{TraceEvent, TraceRecord};
use agile_sim::ssd::DeviceConfig;
use agile_sim::{AgileConfig, AgileHost, BlockKey};
use proptest::prelude::*;

fn traced(cfg: AgileConfig) -> AgileHost {
    AgileHost::new(cfg.with_trace(true)).unwrap()
}

fn records(host: &AgileHost) -> Vec<TraceRecord> {
    host.sim().trace().records().clone()
}

/// Max number of simultaneously outstanding READs per block, counted from
/// enqueue to barrier completion.
fn max_reads_in_flight(recs: &[TraceRecord]) -> usize {
    let mut by_cid = HashMap::new();
    let mut live: HashMap<(u16, u64), usize> = HashMap::new();
    let mut max = 0;
    for r in recs {
        match r.event {
            TraceEvent::Enqueue { dev, sq, cid, write: false, blk, .. } => {
                by_cid.insert((dev, sq, cid), blk);
                let n = live.entry((dev, blk)).or_default();
                *n += 1;
                max = max.max(*n);
            }
            TraceEvent::BarrierDone { dev, sq, cid, .. } => {
                if let Some(blk) = by_cid.remove(&(dev, sq, cid)) {
                    *live.get_mut(&(dev, blk)).unwrap() -= 1;
                }
            }
            _ => {}
        }
    }
    max
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clock_is_monotone_and_runs_replay(seed in any::<u64>(), threads in 1usize..64, lines in 2usize..32) {
        let run = || {
            let mut cfg = AgileConfig::small().with_seed(seed);
            cfg.cache_lines = lines;
            let host = traced(cfg);
            host.run_kernel(threads, move |mut t| async move {
                let buf = t.new_buf();
                for k in 0..4u64 {
                    let blk = (t.index() as u64 * 7 + k * 13) % 40;
                    t.async_read(0, blk, &buf).await?;
                    t.wait(&buf).await?;
                }
                t.finish()
            }).unwrap();
            records(&host)
        };
        let a = run();
        prop_assert!(a.windows(2).all(|w| w[0].time <= w[1].time));
        let b = run();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn one_fill_per_block_and_legal_line_states(
        seed in any::<u64>(),
        threads in 2usize..96,
        blocks in 1u64..12,
        lines in 1usize..8,
    ) {
        let mut cfg = AgileConfig::small().with_seed(seed);
        cfg.cache_lines = lines;
        let host = traced(cfg);
        let r = host.run_kernel(threads, move |mut t| async move {
            let buf = t.new_buf();
            for k in 0..3u64 {
                t.async_read(0, (t.index() as u64 + k) % blocks, &buf).await?;
                t.wait(&buf).await?;
            }
            t.finish()
        }).unwrap();
        prop_assert!(r.clean(), "{:?}", r.first_error);
        let recs = records(&host);
        prop_assert!(max_reads_in_flight(&recs) <= 1);
        let lines = audit_lines(&recs);
        prop_assert_eq!(lines.illegal, 0);
        prop_assert!(audit_queues(&recs).is_clean());
    }

    #[test]
    fn flushed_device_matches_last_writes(
        seed in any::<u64>(),
        threads in 1usize..12,
        lines in 1usize..6,
        writes in 1usize..10,
    ) {
        // Each thread owns blocks `i, i + threads, ...`, so the per-block
        // commit order is the thread's program order.
        let mut cfg = AgileConfig::small().with_seed(seed);
        cfg.cache_lines = lines;
        let host = AgileHost::new(cfg).unwrap();
        let r = host.run_kernel(threads, move |mut t| async move {
            let buf = t.new_buf();
            let i = t.index() as u64;
            for k in 0..writes as u64 {
                let blk = i + threads as u64 * (k % 3);
                buf.set::<u64>(0, (i << 32) | (k + 1));
                t.async_write(0, blk, &buf).await?;
            }
            t.finish()
        }).unwrap();
        prop_assert!(r.clean());
        for i in 0..threads as u64 {
            for slot in 0..3u64 {
                let blk = i + threads as u64 * slot;
                let last = (0..writes as u64).rev().find(|k| k % 3 == slot);
                let want = last.map_or(0, |k| (i << 32) | (k + 1));
                let got = host.device_block(BlockKey::new(0, blk)).unwrap();
                prop_assert_eq!(u64::from_le_bytes(got[..8].try_into().unwrap()), want);
            }
        }
    }

    #[test]
    fn read_your_writes(seed in any::<u64>(), ops in proptest::collection::vec((0u64..6, any::<bool>()), 1..24), lines in 1usize..4) {
        let mut cfg = AgileConfig::small().with_seed(seed);
        cfg.cache_lines = lines;
        let host = AgileHost::new(cfg).unwrap();
        let bad = Rc::new(RefCell::new(Vec::new()));
        let b2 = bad.clone();
        let r = host.run_kernel(1, move |mut t| {
            let (ops, bad) = (ops.clone(), b2.clone());
            async move {
                let mut model = [0u64; 6];
                let buf = t.new_buf();
                for (k, (blk, write)) in ops.into_iter().enumerate() {
                    if write {
                        model[blk as usize] = k as u64 + 1;
                        buf.set::<u64>(0, k as u64 + 1);
                        t.async_write(0, blk, &buf).await?;
                    } else {
                        t.async_read(0, blk, &buf).await?;
                        t.wait(&buf).await?;
                        if buf.get::<u64>(0) != model[blk as usize] {
                            bad.borrow_mut().push((k, blk));
                        }
                    }
                }
                t.finish()
            }
        }).unwrap();
        prop_assert!(r.clean());
        prop_assert!(bad.borrow().is_empty(), "{:?}", bad.borrow());
    }

    #[test]
    fn full_queues_never_deadlock(depth_log in 1u32..4, extra in 1usize..24, qps in 1usize..3, seed in any::<u64>()) {
        let depth = 1u32 << depth_log;
        let mut cfg = AgileConfig::small().with_seed(seed);
        cfg.queue_pairs = qps;
        cfg.queue_depth = depth;
        let n = qps * depth as usize + extra;
        let host = AgileHost::new(cfg).unwrap();
        let r = host.run_kernel(n, |mut t| async move {
            let buf = t.new_buf();
            t.raw_read(0, t.index() as u64, &buf).await?;
            t.wait(&buf).await?;
            t.finish()
        }).unwrap();
        prop_assert!(r.clean());
        prop_assert_eq!(r.device_reads(), n as u64);
        prop_assert!(r.deadlocks.is_empty());
        prop_assert_eq!(r.hygiene.waits_with_locks, 0);
    }

    #[test]
    fn saturated_rate_meets_channel_ceiling(c_log in 0u32..7, latency in 20_000u64..200_000, over in 2usize..4) {
        // Oracle: with c channels of latency L kept busy, rate = c / L.
        let c = 1u32 << c_log;
        let mut cfg = AgileConfig::small();
        cfg.devices = vec![DeviceConfig {
            parallelism: c,
            read_latency_ns: latency,
            write_latency_ns: latency,
            ..DeviceConfig::calibrated(1 << 16)
        }];
        cfg.queue_pairs = 8;
        cfg.queue_depth = 256;
        let inflight = over * c as usize;
        let per = 24usize;
        let host = AgileHost::new(cfg).unwrap();
        let r = host.run_kernel(inflight, move |mut t| async move {
            let buf = t.new_buf();
            for k in 0..per {
                t.raw_read(0, ((k * inflight + t.index()) % 65_536) as u64, &buf).await?;
                t.wait(&buf).await?;
            }
            t.finish()
        }).unwrap();
        prop_assert!(r.clean());
        let rate = (inflight * per) as f64 / r.kernel_ns() as f64;
        let ceiling = c as f64 / latency as f64;
        prop_assert!(rate <= ceiling * 1.0001, "rate {rate} above ceiling {ceiling}");
        prop_assert!(rate >= ceiling * 0.95, "rate {rate} below 95% of {ceiling}");
    }
}
