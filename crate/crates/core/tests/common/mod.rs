#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use dlog_core::engine::{Engine, EngineError};
use dlog_core::format::{Csn, Schema};
use dlog_core::mvcc::{Catalog, MvccError};
use dlog_objstore::{CostCounters, ObjectStore, StoreResult, Appended};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TABLE: u32 = 1;
pub const FIELDS: usize = 4;

pub fn catalog(capacity: u64) -> Catalog {
    Catalog::new().with_table(TABLE, Schema::fixed(FIELDS, 8), capacity)
}

pub fn row(v: u64) -> Vec<u8> {
    (0..FIELDS as u64).flat_map(|f| (v * 10 + f).to_le_bytes()).collect()
}

/// Inserts `rids` through the log from worker 0 and waits for release.
pub fn populate(engine: &Engine, rids: Range<u64>) {
    let mut last = Csn(0);
    let rids: Vec<u64> = rids.collect();
    for chunk in rids.chunks(16) {
        let mut t = engine.begin(0).unwrap();
        for &rid in chunk {
            engine.insert(&mut t, TABLE, rid, &row(rid)).unwrap();
        }
        last = engine.precommit(t).unwrap().csn;
    }
    assert!(engine.wait_released(last, Duration::from_secs(10)));
}

/// Random read-modify-write transactions over `records` rids from one
/// worker. Conflicts are retried. Returns the committed CSNs.
pub fn rmw(engine: &Engine, worker: usize, txns: usize, records: u64, seed: u64) -> Vec<Csn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(txns);
    while out.len() < txns {
        let mut t = engine.begin(worker).unwrap();
        let mut ok = true;
        for _ in 0..3 {
            let rid = rng.random_range(0..records);
            let img = match engine.read(&mut t, TABLE, rid) {
                Ok(i) => i,
                Err(EngineError::Mvcc(MvccError::NotFound { .. })) => continue,
                Err(e) => panic!("{e}"),
            };
            if rng.random_bool(0.6) {
                let f = rng.random_range(0..FIELDS);
                let old = u64::from_le_bytes(img[f * 8..f * 8 + 8].try_into().unwrap());
                match engine.update(&mut t, TABLE, rid, 1 << f, &(old + 1).to_le_bytes()) {
                    Ok(()) => {}
                    Err(EngineError::Mvcc(MvccError::WriteConflict { .. })) => {
                        ok = false;
                        break;
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
        if !ok {
            engine.abort(t);
            continue;
        }
        out.push(engine.precommit(t).unwrap().csn);
    }
    out
}

/// Latest committed image of every record.
pub fn db_state(engine: &Engine, capacity: u64) -> BTreeMap<(u32, u64), Vec<u8>> {
    let mut out = BTreeMap::new();
    for rid in 0..capacity {
        if let Some((_, img)) = engine.db().get_at(TABLE, rid, Csn(u64::MAX)).unwrap() {
            out.insert((TABLE, rid), img);
        }
    }
    out
}

pub fn images(state: &BTreeMap<(u32, u64), (Csn, Vec<u8>)>) -> BTreeMap<(u32, u64), Vec<u8>> {
    state.iter().map(|(k, (_, v))| (*k, v.clone())).collect()
}

/// View of a store without keys starting with `hidden`.
pub struct Hiding<'a> {
    pub inner: &'a dyn ObjectStore,
    pub hidden: &'a str,
}

impl ObjectStore for Hiding<'_> {
    fn bucket(&self) -> &str {
        self.inner.bucket()
    }
    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended> {
        self.inner.append(key, expected_offset, payload)
    }
    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        self.inner.get(key, range)
    }
    fn size(&self, key: &str) -> StoreResult<u64> {
        self.inner.size(key)
    }
    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        self.inner.put(key, bytes)
    }
    fn delete(&self, key: &str) -> StoreResult<()> {
        self.inner.delete(key)
    }
    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        Ok(self
            .inner
            .list(prefix)?
            .into_iter()
            .filter(|k| !k.starts_with(self.hidden))
            .collect())
    }
    fn counters(&self) -> CostCounters {
        self.inner.counters()
    }
}

pub fn arc<S: ObjectStore + 'static>(s: S) -> Arc<dyn ObjectStore> {
    Arc::new(s)
}
