//! Multi-versioned in-memory tables under snapshot isolation.
//!
//! Each table is a fixed-capacity indirection array: one slot per RID holding
//! that record's version chain, newest first. Committed versions carry the CSN
//! of their creator. A writer installs a provisional version at update time;
//! the version becomes visible to other snapshots once its owner has drawn a
//! CSN and published.
//!
//! Every read and every overwrite folds the creator's CSN into the
//! transaction's running DSN, so at pre-commit the DSN is the newest
//! transaction this one depends on.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::format::{Csn, DeltaRecord, Dsn, FormatError, RecordKind, Schema, SchemaSource};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MvccError {
    #[error("record {rid} not found in table {table_id}")]
    NotFound { table_id: u32, rid: u64 },
    #[error("write conflict on table {table_id} rid {rid}")]
    WriteConflict { table_id: u32, rid: u64 },
    #[error("record {rid} already exists in table {table_id}")]
    DuplicateRid { table_id: u32, rid: u64 },
    #[error("unknown table {0}")]
    UnknownTable(u32),
    #[error("rid {rid} outside table {table_id} capacity {capacity}")]
    RidOutOfRange { table_id: u32, rid: u64, capacity: u64 },
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type MvccResult<T> = Result<T, MvccError>;

/// A table's schema and the size of its indirection array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDef {
    pub table_id: u32,
    pub schema: Schema,
    pub capacity: u64,
}

/// The set of tables an engine hosts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    tables: BTreeMap<u32, TableDef>,
}

impl Catalog {
    pub fn new() -> Self {
        Catalog::default()
    }

    pub fn with_table(mut self, table_id: u32, schema: Schema, capacity: u64) -> Self {
        self.tables.insert(
            table_id,
            TableDef {
                table_id,
                schema,
                capacity,
            },
        );
        self
    }

    pub fn table(&self, table_id: u32) -> Option<&TableDef> {
        self.tables.get(&table_id)
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableDef> {
        self.tables.values()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

impl SchemaSource for Catalog {
    fn schema(&self, table_id: u32) -> Option<&Schema> {
        self.tables.get(&table_id).map(|t| &t.schema)
    }
}

/// Central CSN counter. Starts at 1; 0 is never handed out.
#[derive(Debug)]
pub struct CsnCounter {
    next: AtomicU64,
}

impl Default for CsnCounter {
    fn default() -> Self {
        CsnCounter::starting_at(Csn(1))
    }
}

impl CsnCounter {
    pub fn starting_at(next: Csn) -> Self {
        CsnCounter {
            next: AtomicU64::new(next.0.max(1)),
        }
    }

    /// The CSN the counter will hand out next.
    pub fn next(&self) -> Csn {
        Csn(self.next.load(Ordering::SeqCst))
    }

    pub fn draw(&self) -> Csn {
        Csn(self.next.fetch_add(1, Ordering::SeqCst))
    }

    /// Moves the counter forward so the next CSN is at least `next`.
    pub fn advance_to(&self, next: Csn) {
        self.next.fetch_max(next.0, Ordering::SeqCst);
    }
}

const ACTIVE: u8 = 0;
const COMMITTING: u8 = 1;
const PUBLISHED: u8 = 2;
const ABORTED: u8 = 3;

const IDLE: u64 = u64::MAX;

#[derive(Debug)]
struct TxnShared {
    state: AtomicU8,
    csn: AtomicU64,
}

#[derive(Debug)]
struct Version {
    /// Creator CSN; meaningful once `owner` is `None`.
    csn: u64,
    /// Set while the creator has not published.
    owner: Option<Arc<TxnShared>>,
    /// `None` marks a deletion.
    image: Option<Box<[u8]>>,
}

type Chain = VecDeque<Version>;

enum Seen {
    Own,
    Visible(u64),
    /// Created by a transaction that has not committed.
    Uncommitted,
    /// Committed after the snapshot.
    Later,
    /// Creator is between drawing its CSN and publishing.
    Wait,
}

/// Classifies `v` for a snapshot at `begin_ts`, normalizing published
/// provisional versions in place.
fn classify(v: &mut Version, begin_ts: u64, me: Option<&Arc<TxnShared>>) -> Seen {
    if let Some(owner) = &v.owner {
        if me.is_some_and(|m| Arc::ptr_eq(m, owner)) {
            return Seen::Own;
        }
        match owner.state.load(Ordering::SeqCst) {
            ACTIVE | ABORTED => return Seen::Uncommitted,
            COMMITTING => {
                let c = owner.csn.load(Ordering::SeqCst);
                return if c != 0 && c > begin_ts {
                    Seen::Later
                } else {
                    Seen::Wait
                };
            }
            _ => {
                v.csn = owner.csn.load(Ordering::SeqCst);
                v.owner = None;
            }
        }
    }
    if v.csn <= begin_ts {
        Seen::Visible(v.csn)
    } else {
        Seen::Later
    }
}

fn backoff(spins: &mut u32) {
    *spins += 1;
    if *spins < 32 {
        std::hint::spin_loop();
    } else {
        std::thread::yield_now();
    }
}

struct Table {
    def: TableDef,
    slots: Box<[Mutex<Chain>]>,
}

#[derive(Debug, Clone)]
struct WriteEntry {
    table: usize,
    rid: u64,
    kind: RecordKind,
    mask: u64,
}

/// A snapshot-isolation transaction. Driven by one worker at a time; must be
/// finished with pre-commit or [`Database::abort`].
#[derive(Debug)]
pub struct Transaction {
    worker: usize,
    begin_ts: Csn,
    dsn: Dsn,
    gc_watermark: u64,
    shared: Arc<TxnShared>,
    writes: Vec<WriteEntry>,
}

impl Transaction {
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn begin_ts(&self) -> Csn {
        self.begin_ts
    }

    pub fn dsn(&self) -> Dsn {
        self.dsn
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }

    pub fn write_count(&self) -> usize {
        self.writes.len()
    }
}

/// All tables plus the central CSN counter.
pub struct Database {
    catalog: Catalog,
    tables: Vec<Table>,
    index: HashMap<u32, usize>,
    counter: Arc<CsnCounter>,
    // begin_ts of each worker's running transaction, for pruning old versions.
    active: Box<[AtomicU64]>,
}

impl Database {
    /// Creates empty tables for `catalog`, with snapshot slots for `workers`
    /// concurrent transactions.
    pub fn new(catalog: Catalog, workers: usize) -> Self {
        let mut tables = Vec::new();
        let mut index = HashMap::new();
        for def in catalog.tables() {
            index.insert(def.table_id, tables.len());
            let slots = (0..def.capacity).map(|_| Mutex::new(Chain::new())).collect();
            tables.push(Table {
                def: def.clone(),
                slots,
            });
        }
        Database {
            catalog,
            tables,
            index,
            counter: Arc::new(CsnCounter::default()),
            // one extra slot for checkpoint snapshots
            active: (0..=workers).map(|_| AtomicU64::new(IDLE)).collect(),
        }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn workers(&self) -> usize {
        self.active.len() - 1
    }

    pub fn counter(&self) -> &Arc<CsnCounter> {
        &self.counter
    }

    /// The CSN the counter will hand out next.
    pub fn next_csn(&self) -> Csn {
        self.counter.next()
    }

    /// Draws a fresh CSN.
    pub fn draw_csn(&self) -> Csn {
        self.counter.draw()
    }

    /// Moves the counter forward so the next CSN is at least `next`.
    pub fn advance_counter(&self, next: Csn) {
        self.counter.advance_to(next);
    }

    fn table(&self, table_id: u32) -> MvccResult<(usize, &Table)> {
        let i = *self
            .index
            .get(&table_id)
            .ok_or(MvccError::UnknownTable(table_id))?;
        Ok((i, &self.tables[i]))
    }

    fn slot(&self, table_id: u32, rid: u64) -> MvccResult<(usize, &Table, &Mutex<Chain>)> {
        let (i, t) = self.table(table_id)?;
        let slot = t.slots.get(rid as usize).ok_or(MvccError::RidOutOfRange {
            table_id,
            rid,
            capacity: t.def.capacity,
        })?;
        Ok((i, t, slot))
    }

    /// Publishes `ts` in `slot` as a running snapshot. Retries until the
    /// counter is stable across the publication, so a concurrent watermark
    /// computation either sees the slot or read a counter no newer than ours.
    fn register_snapshot(&self, slot: usize) -> u64 {
        loop {
            let c = self.counter.next.load(Ordering::SeqCst);
            self.active[slot].store(c - 1, Ordering::SeqCst);
            if self.counter.next.load(Ordering::SeqCst) == c {
                return c - 1;
            }
        }
    }

    /// Oldest snapshot any running or future transaction can hold.
    fn watermark(&self) -> u64 {
        let mut wm = self.counter.next.load(Ordering::SeqCst) - 1;
        for a in self.active.iter() {
            wm = wm.min(a.load(Ordering::SeqCst));
        }
        wm
    }

    /// Starts a transaction for `worker` with `begin_ts` = counter − 1.
    pub fn begin(&self, worker: usize) -> Transaction {
        assert!(worker < self.workers(), "worker {worker} out of range");
        let begin_ts = self.register_snapshot(worker);
        Transaction {
            worker,
            begin_ts: Csn(begin_ts),
            dsn: Dsn::NONE,
            gc_watermark: self.watermark(),
            shared: Arc::new(TxnShared {
                state: AtomicU8::new(ACTIVE),
                csn: AtomicU64::new(0),
            }),
            writes: Vec::new(),
        }
    }

    /// Returns the record visible to `txn`, folding its creator into the DSN.
    pub fn read(&self, txn: &mut Transaction, table_id: u32, rid: u64) -> MvccResult<Vec<u8>> {
        let (_, _, slot) = self.slot(table_id, rid)?;
        let mut spins = 0;
        loop {
            let mut chain = slot.lock();
            let mut wait = false;
            for v in chain.iter_mut() {
                match classify(v, txn.begin_ts.0, Some(&txn.shared)) {
                    Seen::Own => {
                        return v
                            .image
                            .as_deref()
                            .map(<[u8]>::to_vec)
                            .ok_or(MvccError::NotFound { table_id, rid })
                    }
                    Seen::Visible(c) => {
                        txn.dsn.observe(Csn(c));
                        return v
                            .image
                            .as_deref()
                            .map(<[u8]>::to_vec)
                            .ok_or(MvccError::NotFound { table_id, rid });
                    }
                    Seen::Uncommitted | Seen::Later => continue,
                    Seen::Wait => {
                        wait = true;
                        break;
                    }
                }
            }
            if !wait {
                return Err(MvccError::NotFound { table_id, rid });
            }
            drop(chain);
            backoff(&mut spins);
        }
    }

    /// Overwrites the masked fields of a record. `values` holds the new field
    /// values in ascending field order.
    pub fn update(
        &self,
        txn: &mut Transaction,
        table_id: u32,
        rid: u64,
        field_mask: u64,
        values: &[u8],
    ) -> MvccResult<()> {
        let (ti, table, _) = self.slot(table_id, rid)?;
        if table.def.schema.payload_len(field_mask, values)? != values.len() {
            return Err(FormatError::Malformed("values longer than field mask".into()).into());
        }
        self.write(txn, ti, rid, |head| match head {
            Some(Some(image)) => Ok(Some(table.def.schema.apply(image, field_mask, values)?)),
            _ => Err(MvccError::NotFound { table_id, rid }),
        })?;
        txn.note_write(ti, rid, RecordKind::Update, field_mask);
        Ok(())
    }

    /// Creates a record from a full image.
    pub fn insert(&self, txn: &mut Transaction, table_id: u32, rid: u64, image: &[u8]) -> MvccResult<()> {
        let (ti, table, _) = self.slot(table_id, rid)?;
        table.def.schema.field_ranges(image)?;
        self.write(txn, ti, rid, |head| match head {
            Some(Some(_)) => Err(MvccError::DuplicateRid { table_id, rid }),
            _ => Ok(Some(image.to_vec())),
        })?;
        let full = table.def.schema.full_mask();
        txn.note_write(ti, rid, RecordKind::Insert, full);
        Ok(())
    }

    /// Deletes a record by installing a tombstone.
    pub fn delete(&self, txn: &mut Transaction, table_id: u32, rid: u64) -> MvccResult<()> {
        let (ti, _, _) = self.slot(table_id, rid)?;
        self.write(txn, ti, rid, |head| match head {
            Some(Some(_)) => Ok(None),
            _ => Err(MvccError::NotFound { table_id, rid }),
        })?;
        txn.note_write(ti, rid, RecordKind::Delete, 0);
        Ok(())
    }

    /// Installs or modifies `txn`'s provisional head for a record. `make`
    /// receives the current value (`None`: no record, `Some(None)`: deleted)
    /// and returns the new one.
    fn write(
        &self,
        txn: &mut Transaction,
        ti: usize,
        rid: u64,
        make: impl Fn(Option<Option<&[u8]>>) -> MvccResult<Option<Vec<u8>>>,
    ) -> MvccResult<()> {
        let table = &self.tables[ti];
        let table_id = table.def.table_id;
        let slot = &table.slots[rid as usize];
        let mut spins = 0;
        loop {
            let mut chain = slot.lock();
            let Some(head) = chain.front_mut() else {
                let image = make(None)?;
                chain.push_front(Version {
                    csn: 0,
                    owner: Some(txn.shared.clone()),
                    image: image.map(Vec::into_boxed_slice),
                });
                return Ok(());
            };
            match classify(head, txn.begin_ts.0, Some(&txn.shared)) {
                Seen::Own => {
                    let image = make(Some(head.image.as_deref()))?;
                    head.image = image.map(Vec::into_boxed_slice);
                    return Ok(());
                }
                Seen::Visible(c) => {
                    let image = make(Some(head.image.as_deref()))?;
                    txn.dsn.observe(Csn(c));
                    chain.push_front(Version {
                        csn: 0,
                        owner: Some(txn.shared.clone()),
                        image: image.map(Vec::into_boxed_slice),
                    });
                    prune(&mut chain, txn.gc_watermark);
                    return Ok(());
                }
                Seen::Uncommitted | Seen::Later => {
                    return Err(MvccError::WriteConflict { table_id, rid })
                }
                Seen::Wait => {
                    drop(chain);
                    backoff(&mut spins);
                }
            }
        }
    }

    /// Visits every record visible to `txn` in RID order.
    pub fn scan(
        &self,
        txn: &mut Transaction,
        table_id: u32,
        mut f: impl FnMut(u64, &[u8]),
    ) -> MvccResult<()> {
        let (_, table) = self.table(table_id)?;
        let me = txn.shared.clone();
        for (rid, slot) in table.slots.iter().enumerate() {
            if let Some((csn, image)) = visible_at(slot, txn.begin_ts.0, Some(&me)) {
                if let Some(c) = csn {
                    txn.dsn.observe(Csn(c));
                }
                f(rid as u64, &image);
            }
        }
        Ok(())
    }

    /// Builds the delta records for `txn`'s write set.
    pub fn delta_records(&self, txn: &Transaction) -> MvccResult<Vec<DeltaRecord>> {
        let mut out = Vec::with_capacity(txn.writes.len());
        for w in &txn.writes {
            let table = &self.tables[w.table];
            let chain = table.slots[w.rid as usize].lock();
            let head = chain
                .front()
                .filter(|v| v.owner.as_ref().is_some_and(|o| Arc::ptr_eq(o, &txn.shared)))
                .expect("provisional head of own write");
            let payload = match head.image.as_deref() {
                Some(image) => table.def.schema.extract(image, w.mask)?,
                None => Vec::new(),
            };
            out.push(DeltaRecord {
                kind: w.kind,
                table_id: table.def.table_id,
                rid: w.rid,
                field_mask: w.mask,
                payload,
            });
        }
        Ok(out)
    }

    /// First step of pre-commit: from here on, readers that may see this
    /// transaction's versions wait for its CSN instead of skipping them.
    pub fn begin_commit(&self, txn: &Transaction) {
        txn.shared.state.store(COMMITTING, Ordering::SeqCst);
    }

    /// Records the CSN drawn for `txn`. Must follow [`Database::begin_commit`].
    pub fn assign_csn(&self, txn: &Transaction, csn: Csn) {
        debug_assert!(csn.0 > txn.dsn.0);
        txn.shared.csn.store(csn.0, Ordering::SeqCst);
    }

    /// Makes `txn`'s versions visible to snapshots at or after its CSN.
    pub fn publish(&self, txn: Transaction) {
        debug_assert_ne!(txn.shared.csn.load(Ordering::SeqCst), 0);
        txn.shared.state.store(PUBLISHED, Ordering::SeqCst);
        self.active[txn.worker].store(IDLE, Ordering::SeqCst);
    }

    /// Commits without logging: draws a CSN and publishes. Returns the CSN and
    /// the transaction's DSN.
    pub fn commit_unlogged(&self, txn: Transaction) -> (Csn, Dsn) {
        self.begin_commit(&txn);
        let csn = self.draw_csn();
        self.assign_csn(&txn, csn);
        let dsn = txn.dsn;
        self.publish(txn);
        (csn, dsn)
    }

    /// Discards `txn`'s provisional versions.
    pub fn abort(&self, txn: Transaction) {
        txn.shared.state.store(ABORTED, Ordering::SeqCst);
        for w in &txn.writes {
            let mut chain = self.tables[w.table].slots[w.rid as usize].lock();
            if chain
                .front()
                .and_then(|v| v.owner.as_ref())
                .is_some_and(|o| Arc::ptr_eq(o, &txn.shared))
            {
                chain.pop_front();
            }
        }
        self.active[txn.worker].store(IDLE, Ordering::SeqCst);
    }

    /// Installs a committed base record with CSN 0 (no creator to depend on).
    /// Used to bulk-load data outside the log.
    pub fn load(&self, table_id: u32, rid: u64, image: &[u8]) -> MvccResult<()> {
        let (_, table, slot) = self.slot(table_id, rid)?;
        table.def.schema.field_ranges(image)?;
        let mut chain = slot.lock();
        if chain.front().is_some_and(|v| v.image.is_some()) {
            return Err(MvccError::DuplicateRid { table_id, rid });
        }
        chain.clear();
        chain.push_front(Version {
            csn: 0,
            owner: None,
            image: Some(image.into()),
        });
        Ok(())
    }

    /// Replaces a record's chain with a single committed version; `None`
    /// removes the record. Used by recovery.
    pub fn install(&self, table_id: u32, rid: u64, csn: Csn, image: Option<&[u8]>) -> MvccResult<()> {
        let (_, _, slot) = self.slot(table_id, rid)?;
        let mut chain = slot.lock();
        chain.clear();
        if let Some(image) = image {
            chain.push_front(Version {
                csn: csn.0,
                owner: None,
                image: Some(image.into()),
            });
        }
        Ok(())
    }

    /// Newest committed version of a record with CSN ≤ `ts`, without
    /// registering a transaction.
    pub fn get_at(&self, table_id: u32, rid: u64, ts: Csn) -> MvccResult<Option<(Csn, Vec<u8>)>> {
        let (_, _, slot) = self.slot(table_id, rid)?;
        Ok(visible_at(slot, ts.0, None).map(|(c, img)| (Csn(c.unwrap_or(0)), img)))
    }

    /// Holds a snapshot at counter − 1 so that versions it needs are not
    /// pruned, and visits each table's visible records. Returns the snapshot
    /// timestamp.
    pub fn snapshot<F>(&self, f: F) -> MvccResult<Csn>
    where
        F: FnOnce(Csn, &SnapshotReader<'_>) -> MvccResult<()>,
    {
        let slot = self.active.len() - 1;
        let ts = self.register_snapshot(slot);
        let reader = SnapshotReader { db: self, ts };
        let r = f(Csn(ts), &reader);
        self.active[slot].store(IDLE, Ordering::SeqCst);
        r.map(|_| Csn(ts))
    }

    /// Number of versions retained for a record (for tests and diagnostics).
    pub fn chain_len(&self, table_id: u32, rid: u64) -> MvccResult<usize> {
        let (_, _, slot) = self.slot(table_id, rid)?;
        Ok(slot.lock().len())
    }
}

/// Read access to a registered snapshot; see [`Database::snapshot`].
pub struct SnapshotReader<'a> {
    db: &'a Database,
    ts: u64,
}

impl SnapshotReader<'_> {
    /// Visits `(rid, csn, image)` for every record of the table visible at the
    /// snapshot, in RID order.
    pub fn visit(&self, table_id: u32, mut f: impl FnMut(u64, Csn, &[u8])) -> MvccResult<()> {
        let (_, table) = self.db.table(table_id)?;
        for (rid, slot) in table.slots.iter().enumerate() {
            if let Some((csn, image)) = visible_at(slot, self.ts, None) {
                f(rid as u64, Csn(csn.unwrap_or(0)), &image);
            }
        }
        Ok(())
    }
}

/// Newest non-deleted version visible at `ts`. The CSN is `None` for the
/// caller's own write.
fn visible_at(slot: &Mutex<Chain>, ts: u64, me: Option<&Arc<TxnShared>>) -> Option<(Option<u64>, Vec<u8>)> {
    let mut spins = 0;
    'retry: loop {
        let mut chain = slot.lock();
        for v in chain.iter_mut() {
            match classify(v, ts, me) {
                Seen::Own => return v.image.as_deref().map(|i| (None, i.to_vec())),
                Seen::Visible(c) => return v.image.as_deref().map(|i| (Some(c), i.to_vec())),
                Seen::Uncommitted | Seen::Later => {}
                Seen::Wait => {
                    drop(chain);
                    backoff(&mut spins);
                    continue 'retry;
                }
            }
        }
        return None;
    }
}

/// Drops versions no snapshot can reach: everything older than the newest
/// committed version at or below the watermark.
fn prune(chain: &mut Chain, watermark: u64) {
    for i in 1..chain.len() {
        let v = &chain[i];
        if v.owner.is_none() && v.csn <= watermark {
            chain.truncate(i + 1);
            return;
        }
    }
}

impl Transaction {
    fn note_write(&mut self, table: usize, rid: u64, kind: RecordKind, mask: u64) {
        if let Some(w) = self.writes.iter_mut().find(|w| w.table == table && w.rid == rid) {
            match kind {
                RecordKind::Delete => {
                    w.kind = RecordKind::Delete;
                    w.mask = 0;
                }
                RecordKind::Insert => {
                    w.kind = RecordKind::Insert;
                    w.mask = mask;
                }
                // an insert already carries every field
                RecordKind::Update if w.kind == RecordKind::Update => w.mask |= mask,
                RecordKind::Update => {}
            }
            return;
        }
        self.writes.push(WriteEntry {
            table,
            rid,
            kind,
            mask,
        });
    }
}
