mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use common::*;
use dlog_core::engine::{Engine, EngineConfig};
use dlog_core::format::Csn;
use dlog_core::logging::{parse_segment_key, segment_key, FlushRecord, LoggingConfig};
use dlog_core::recovery::recover;
use dlog_objstore::{ObjectStore, ReplicatedStore, SimStore};
use parking_lot::Mutex;

fn cfg(workers: usize, group: usize, limit: u32) -> EngineConfig {
    EngineConfig {
        logging: LoggingConfig {
            worker_count: workers,
            group_size: group,
            buffer_bytes: group * (4 << 10),
            per_thread_base_bytes: 4 << 10,
            flush_timeout: Some(Duration::from_millis(1)),
            segment_append_limit: limit,
            ..Default::default()
        },
        record_release_log: true,
        ..Default::default()
    }
}

#[test]
fn segments_roll_over_at_the_part_limit() {
    const LIMIT: u32 = 5;
    let sim = Arc::new(SimStore::instant("wal"));
    let store = Arc::new(ReplicatedStore::single(sim.clone()));
    let flushes: Arc<Mutex<Vec<FlushRecord>>> = Arc::default();
    let hook = flushes.clone();
    let engine = Engine::builder(cfg(1, 1, LIMIT), store.clone())
        .flush_hook(Arc::new(move |r| hook.lock().push(r.clone())))
        .start(catalog(64))
        .unwrap();
    for rid in 0..(LIMIT as u64 * 3 + 2) {
        let mut t = engine.begin(0).unwrap();
        engine.insert(&mut t, TABLE, rid, &row(rid)).unwrap();
        let p = engine.precommit(t).unwrap();
        assert!(engine.wait_released(p.csn, Duration::from_secs(5)));
    }
    engine.shutdown().unwrap();
    let expected = db_state(&engine, 64);
    drop(engine);

    let recs = flushes.lock().clone();
    let mut parts: BTreeMap<String, u32> = BTreeMap::new();
    for r in &recs {
        *parts.entry(r.key.clone()).or_default() += 1;
    }
    let keys: Vec<_> = parts.keys().cloned().collect();
    assert_eq!(keys, (0..4).map(|s| segment_key(0, s)).collect::<Vec<_>>());
    for s in 0..3 {
        assert_eq!(parts[&segment_key(0, s)], LIMIT);
        assert_eq!(sim.part_count(&segment_key(0, s)), Some(LIMIT));
    }
    assert_eq!(recs.iter().filter(|r| r.sealed_segment).count(), 3);

    let r = recover(&*store, catalog(64)).unwrap();
    assert_eq!(images(r.state()), expected);
    assert_eq!(r.next_segment(0), 4);
}

#[test]
fn every_precommit_released_exactly_once() {
    let store = Arc::new(ReplicatedStore::single(Arc::new(SimStore::instant("wal"))));
    let engine = Engine::start(cfg(8, 2, 10_000), catalog(256), store).unwrap();
    populate(&engine, 0..256);
    let csns: Vec<Csn> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..8)
            .map(|w| {
                let e = &engine;
                s.spawn(move || rmw(e, w, 125, 256, w as u64))
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    engine.shutdown().unwrap();
    let log = engine.pipeline().release_log().unwrap();
    let unique: HashSet<_> = log.iter().copied().collect();
    assert_eq!(unique.len(), log.len());
    assert!(csns.iter().all(|c| unique.contains(c)));
    assert_eq!(engine.pipeline().pending_count(), 0);
}

#[test]
fn sharing_a_buffer_halves_append_requests() {
    // One worker per log appends alone; two workers per log share buffers.
    let run = |group: usize| {
        let sim = Arc::new(SimStore::instant("wal"));
        let mut c = cfg(2, group, 10_000);
        c.logging.flush_timeout = None;
        c.logging.buffer_bytes = group * 2048;
        c.logging.per_thread_base_bytes = 2048;
        let engine = Engine::start(c, catalog(512), Arc::new(ReplicatedStore::single(sim.clone()))).unwrap();
        std::thread::scope(|s| {
            for w in 0..2u64 {
                let e = &engine;
                s.spawn(move || {
                    for i in 0..200u64 {
                        let mut t = e.begin(w as usize).unwrap();
                        e.insert(&mut t, TABLE, w * 256 + i, &row(i)).unwrap();
                        e.precommit(t).unwrap();
                    }
                });
            }
        });
        engine.shutdown().unwrap();
        let keys = sim.list("log-").unwrap();
        assert!(keys.iter().all(|k| parse_segment_key(k).is_some()));
        sim.counters().appends
    };
    let alone = run(1) as f64;
    let shared = run(2) as f64;
    let ratio = shared / alone;
    assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
}
