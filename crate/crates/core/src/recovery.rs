//! Redo recovery: newest valid checkpoint plus a parallel scan of every log,
//! replaying only entries whose DSN chain is satisfied.

use std::collections::{BTreeMap, BTreeSet};

use dlog_objstore::{ObjectStore, StoreError};
use thiserror::Error;

use crate::checkpoint::{decode_table_object, parse_meta_key, CheckpointMeta};
use crate::format::{scan_segment, Csn, FormatError, Lsn, RecordKind, SegmentFooter, TxnEntry, FOOTER_LEN};
use crate::logging::{parse_segment_key, segment_key};
use crate::mvcc::{Catalog, Database, MvccError};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Mvcc(#[from] MvccError),
    #[error("segment {key} is corrupt at byte {offset}: {detail}")]
    CorruptSegment { key: String, offset: u64, detail: String },
    #[error("log {log_id} is missing segment {segment_index}")]
    MissingSegment { log_id: u16, segment_index: u32 },
    #[error("csn {0} appears twice in the logs")]
    DuplicateCsn(u64),
}

type Key = (u32, u64);

/// Unsealed final segment of a log, sealed by [`Recovered::seal_tails`].
#[derive(Debug, Clone, PartialEq, Eq)]
struct Tail {
    key: String,
    valid_len: u64,
    footer: SegmentFooter,
}

#[derive(Debug, Clone, Default)]
struct LogInfo {
    last_segment: Option<u32>,
    resume_segment: u32,
    tail: Option<Tail>,
}

struct LogScan {
    log_id: u16,
    entries: Vec<TxnEntry>,
    info: LogInfo,
}

/// Reconstructed committed state.
#[derive(Debug)]
pub struct Recovered {
    catalog: Catalog,
    pub checkpoint: Option<CheckpointMeta>,
    state: BTreeMap<Key, (Csn, Vec<u8>)>,
    /// First CSN the restarted engine may hand out.
    pub next_csn: Csn,
    /// Replayed log entries in application order.
    pub replayed: Vec<Csn>,
    /// Log entries dropped because a dependency is missing.
    pub excluded: Vec<Csn>,
    logs: BTreeMap<u16, LogInfo>,
}

impl Recovered {
    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn get(&self, table_id: u32, rid: u64) -> Option<&[u8]> {
        self.state.get(&(table_id, rid)).map(|(_, img)| img.as_slice())
    }

    /// Every record as `(table_id, rid) -> (csn, image)`.
    pub fn state(&self) -> &BTreeMap<(u32, u64), (Csn, Vec<u8>)> {
        &self.state
    }

    pub fn checkpoint_ts(&self) -> Csn {
        self.checkpoint.as_ref().map_or(Csn(0), |m| m.checkpoint_ts)
    }

    /// Index of the first fresh segment for `log_id`.
    pub fn next_segment(&self, log_id: u16) -> u32 {
        self.logs.get(&log_id).map_or(0, |l| {
            l.last_segment.map_or(0, |s| s + 1).max(l.resume_segment)
        })
    }

    /// Rewrites each unsealed final segment as its valid prefix plus a
    /// footer, or deletes it when nothing in it is valid.
    pub fn seal_tails(&self, store: &dyn ObjectStore) -> Result<(), StoreError> {
        for info in self.logs.values() {
            let Some(t) = &info.tail else { continue };
            if t.valid_len == 0 {
                store.delete(&t.key)?;
                continue;
            }
            let mut bytes = store.get(&t.key, Some(0..t.valid_len))?;
            bytes.extend_from_slice(&t.footer.encode());
            store.put(&t.key, &bytes)?;
        }
        Ok(())
    }

    pub fn into_database(self, workers: usize) -> Result<Database, MvccError> {
        let db = Database::new(self.catalog, workers);
        for ((table, rid), (csn, image)) in &self.state {
            db.install(*table, *rid, *csn, Some(image))?;
        }
        db.advance_counter(self.next_csn);
        Ok(db)
    }
}

type TableImages = Vec<(u32, Vec<(u64, Csn, Vec<u8>)>)>;

/// Newest checkpoint whose metadata and table objects are all intact, with
/// its table images. Returns whether it is the newest metadata object.
fn load_checkpoint(
    store: &dyn ObjectStore,
) -> Result<Option<(CheckpointMeta, TableImages, bool)>, StoreError> {
    let mut candidates: Vec<(Csn, String)> = store
        .list("ckpt-")?
        .into_iter()
        .filter_map(|k| parse_meta_key(&k).map(|t| (t, k)))
        .collect();
    candidates.sort_by(|a, b| b.cmp(a));
    'outer: for (i, (t, key)) in candidates.iter().enumerate() {
        let meta = match store.get(key, None) {
            Ok(b) => CheckpointMeta::decode(&b),
            Err(StoreError::NotFound(_)) => None,
            Err(e) => return Err(e),
        };
        let Some(meta) = meta.filter(|m| m.checkpoint_ts == *t) else {
            log::warn!("checkpoint {key} is corrupt, falling back");
            continue;
        };
        let mut tables = Vec::with_capacity(meta.tables.len());
        for obj in &meta.tables {
            let bytes = match store.get(&obj.key, None) {
                Ok(b) => b,
                Err(StoreError::NotFound(_)) => {
                    log::warn!("checkpoint object {} missing, falling back", obj.key);
                    continue 'outer;
                }
                Err(e) => return Err(e),
            };
            match decode_table_object(&bytes, *t, obj.table_id) {
                Some(recs) if recs.len() as u64 == obj.records => tables.push((obj.table_id, recs)),
                _ => {
                    log::warn!("checkpoint object {} corrupt, falling back", obj.key);
                    continue 'outer;
                }
            }
        }
        return Ok(Some((meta, tables, i == 0)));
    }
    Ok(None)
}

fn scan_log(
    store: &dyn ObjectStore,
    catalog: &Catalog,
    log_id: u16,
    segments: &[u32],
    resume: Lsn,
    allow_gap: bool,
) -> Result<LogScan, RecoveryError> {
    let mut info = LogInfo {
        last_segment: segments.last().copied(),
        resume_segment: resume.segment_index,
        tail: None,
    };
    let todo: Vec<u32> = segments.iter().copied().filter(|&s| s >= resume.segment_index).collect();
    if let Some(&first) = todo.first() {
        if first != resume.segment_index && !allow_gap {
            return Err(RecoveryError::MissingSegment {
                log_id,
                segment_index: resume.segment_index,
            });
        }
        for w in todo.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(RecoveryError::MissingSegment {
                    log_id,
                    segment_index: w[0] + 1,
                });
            }
        }
    }
    let mut entries = Vec::new();
    for (i, &seg) in todo.iter().enumerate() {
        let key = segment_key(log_id, seg);
        let bytes = store.get(&key, None)?;
        let scan = scan_segment(&bytes, catalog)?;
        let corrupt = |offset: usize, detail: &str| RecoveryError::CorruptSegment {
            key: key.clone(),
            offset: offset as u64,
            detail: detail.to_string(),
        };
        let sealed = scan.footer.is_some();
        if sealed && scan.valid_len != bytes.len() {
            return Err(corrupt(scan.valid_len, "bytes after footer"));
        }
        if let Some(f) = scan.footer {
            if f.entry_count != scan.entries.len() as u64 {
                return Err(corrupt(scan.valid_len, "footer entry count mismatch"));
            }
        }
        let last = i + 1 == todo.len();
        if !last && !sealed {
            return Err(corrupt(scan.valid_len, "interior segment is not sealed"));
        }
        let data_end = scan.valid_len - if sealed { FOOTER_LEN } else { 0 };
        let start = if seg == resume.segment_index { resume.byte_offset as usize } else { 0 };
        if start > data_end {
            return Err(corrupt(data_end, "resume position past valid data"));
        }
        if last && !sealed {
            let (mut lo, mut hi) = (u64::MAX, 0);
            for (_, e) in &scan.entries {
                lo = lo.min(e.csn.0);
                hi = hi.max(e.csn.0);
            }
            info.tail = Some(Tail {
                key: key.clone(),
                valid_len: scan.valid_len as u64,
                footer: SegmentFooter {
                    min_csn: Csn(if lo == u64::MAX { 0 } else { lo }),
                    max_csn: Csn(hi),
                    entry_count: scan.entries.len() as u64,
                },
            });
            if scan.valid_len < bytes.len() {
                log::info!("log {log_id}: torn tail in {key} at byte {}", scan.valid_len);
            }
        }
        entries.extend(scan.entries.into_iter().filter(|(off, _)| *off >= start).map(|(_, e)| e));
    }
    Ok(LogScan { log_id, entries, info })
}

/// Rebuilds committed state from `store`.
pub fn recover(store: &dyn ObjectStore, catalog: Catalog) -> Result<Recovered, RecoveryError> {
    let ckpt = load_checkpoint(store)?;
    let (meta, tables, newest) = match ckpt {
        Some((m, t, n)) => (Some(m), t, n),
        None => (None, Vec::new(), false),
    };
    let t = meta.as_ref().map_or(Csn(0), |m| m.checkpoint_ts);

    let mut state = BTreeMap::new();
    for (table_id, recs) in tables {
        for (rid, csn, image) in recs {
            state.insert((table_id, rid), (csn, image));
        }
    }

    let mut segments: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for key in store.list("log-")? {
        if let Some((log, seg)) = parse_segment_key(&key) {
            segments.entry(log).or_default().push(seg);
        }
    }
    for s in segments.values_mut() {
        s.sort_unstable();
    }
    let resume_of = |log_id: u16| {
        meta.as_ref()
            .and_then(|m| m.resume.iter().find(|l| l.log_id == log_id).copied())
            .unwrap_or(Lsn {
                log_id,
                segment_index: 0,
                byte_offset: 0,
            })
    };
    let mut log_ids: BTreeSet<u16> = segments.keys().copied().collect();
    if let Some(m) = &meta {
        log_ids.extend(m.resume.iter().map(|l| l.log_id));
    }

    let empty = Vec::new();
    let scans: Vec<Result<LogScan, RecoveryError>> = std::thread::scope(|s| {
        let handles: Vec<_> = log_ids
            .iter()
            .map(|&log_id| {
                let segs = segments.get(&log_id).unwrap_or(&empty);
                let resume = resume_of(log_id);
                let catalog = &catalog;
                s.spawn(move || scan_log(store, catalog, log_id, segs, resume, newest))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("log scan panicked"))
            .collect()
    });

    let mut logs = BTreeMap::new();
    let mut by_csn: BTreeMap<u64, TxnEntry> = BTreeMap::new();
    let mut max_seen = t.0;
    for scan in scans {
        let scan = scan?;
        for e in scan.entries {
            max_seen = max_seen.max(e.csn.0);
            if e.csn <= t {
                continue;
            }
            let csn = e.csn.0;
            if by_csn.insert(csn, e).is_some() {
                return Err(RecoveryError::DuplicateCsn(csn));
            }
        }
        logs.insert(scan.log_id, scan.info);
    }

    let mut replayable = BTreeSet::new();
    let mut replayed = Vec::new();
    let mut excluded = Vec::new();
    for (&csn, e) in &by_csn {
        let dsn = e.dsn.0;
        // an update whose row is absent follows a predecessor the DSN does
        // not name and that was lost
        let bases_match = e.records.iter().all(|r| {
            r.kind != RecordKind::Update || state.contains_key(&(r.table_id, r.rid))
        });
        if bases_match && (dsn == 0 || dsn <= t.0 || replayable.contains(&dsn)) {
            replayable.insert(csn);
        } else {
            excluded.push(Csn(csn));
            continue;
        }
        for r in &e.records {
            let key = (r.table_id, r.rid);
            match r.kind {
                RecordKind::Insert => {
                    state.insert(key, (e.csn, r.payload.clone()));
                }
                RecordKind::Update => {
                    let schema = &catalog
                        .table(r.table_id)
                        .ok_or(MvccError::UnknownTable(r.table_id))?
                        .schema;
                    let (c, img) = state.get_mut(&key).expect("base checked above");
                    *img = schema.apply(img, r.field_mask, &r.payload)?;
                    *c = e.csn;
                }
                RecordKind::Delete => {
                    state.remove(&key);
                }
            }
        }
        replayed.push(Csn(csn));
    }
    if !excluded.is_empty() {
        log::info!("recovery excluded {} entries with missing dependencies", excluded.len());
    }

    Ok(Recovered {
        catalog,
        checkpoint: meta,
        state,
        next_csn: Csn(max_seen + 1),
        replayed,
        excluded,
        logs,
    })
}
