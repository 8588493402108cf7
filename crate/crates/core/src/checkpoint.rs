//! Snapshot checkpoints to object storage and log truncation.

use std::collections::BTreeMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use dlog_objstore::{ObjectStore, StoreError};
use thiserror::Error;

use crate::engine::Engine;
use crate::format::{decode_frame, encode_frame, Csn, Lsn, SegmentFooter, FOOTER_LEN};
use crate::logging::parse_segment_key;
use crate::mvcc::{Database, MvccError};

pub const TABLE_MAGIC: [u8; 4] = *b"MSLC";
pub const META_MAGIC: [u8; 4] = *b"MSLM";
/// Records per table-object frame.
pub const FRAME_RECORDS: usize = 4096;

const DELETE_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mvcc(#[from] MvccError),
    #[error("transactions through csn {0} were not released in time")]
    ReleaseTimeout(u64),
    #[error("corrupt checkpoint object {key}: {detail}")]
    Corrupt { key: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableObject {
    pub table_id: u32,
    pub key: String,
    pub records: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub checkpoint_ts: Csn,
    pub created_unix_ms: u64,
    pub tables: Vec<TableObject>,
    /// Per log, the position replay resumes from.
    pub resume: Vec<Lsn>,
}

pub fn meta_key(t: Csn) -> String {
    format!("ckpt-{}-meta", t.0)
}

pub fn table_key(t: Csn, table_id: u32) -> String {
    format!("ckpt-{}-table-{table_id}", t.0)
}

/// Checkpoint timestamp of a metadata key.
pub fn parse_meta_key(key: &str) -> Option<Csn> {
    key.strip_prefix("ckpt-")?
        .strip_suffix("-meta")?
        .parse()
        .ok()
        .map(Csn)
}

impl CheckpointMeta {
    pub fn key(&self) -> String {
        meta_key(self.checkpoint_ts)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        for t in &self.tables {
            body.extend_from_slice(&t.table_id.to_le_bytes());
            body.extend_from_slice(&t.records.to_le_bytes());
            body.extend_from_slice(&(t.key.len() as u16).to_le_bytes());
            body.extend_from_slice(t.key.as_bytes());
        }
        body.extend_from_slice(&(self.resume.len() as u32).to_le_bytes());
        for l in &self.resume {
            body.extend_from_slice(&l.log_id.to_le_bytes());
            body.extend_from_slice(&l.segment_index.to_le_bytes());
            body.extend_from_slice(&l.byte_offset.to_le_bytes());
        }
        encode_frame(
            META_MAGIC,
            self.checkpoint_ts.0,
            self.created_unix_ms,
            self.tables.len() as u32,
            &body,
        )
    }

    pub fn decode(bytes: &[u8]) -> Option<CheckpointMeta> {
        let f = decode_frame(bytes, 0, META_MAGIC)?;
        if f.next_offset != bytes.len() {
            return None;
        }
        let mut r = Reader(f.body);
        let mut tables = Vec::with_capacity(f.count as usize);
        for _ in 0..f.count {
            let table_id = u32::from_le_bytes(r.take(4)?.try_into().ok()?);
            let records = u64::from_le_bytes(r.take(8)?.try_into().ok()?);
            let len = u16::from_le_bytes(r.take(2)?.try_into().ok()?) as usize;
            let key = String::from_utf8(r.take(len)?.to_vec()).ok()?;
            tables.push(TableObject { table_id, key, records });
        }
        let logs = u32::from_le_bytes(r.take(4)?.try_into().ok()?);
        let mut resume = Vec::new();
        for _ in 0..logs {
            resume.push(Lsn {
                log_id: u16::from_le_bytes(r.take(2)?.try_into().ok()?),
                segment_index: u32::from_le_bytes(r.take(4)?.try_into().ok()?),
                byte_offset: u64::from_le_bytes(r.take(8)?.try_into().ok()?),
            });
        }
        if !r.0.is_empty() {
            return None;
        }
        Some(CheckpointMeta {
            checkpoint_ts: Csn(f.a),
            created_unix_ms: f.b,
            tables,
            resume,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Some(h)
    }
}

/// Encodes `(rid, csn, image)` triples as a table object.
pub fn encode_table_object(t: Csn, table_id: u32, records: &[(u64, Csn, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for chunk in records.chunks(FRAME_RECORDS) {
        let mut body = Vec::new();
        for (rid, csn, image) in chunk {
            body.extend_from_slice(&rid.to_le_bytes());
            body.extend_from_slice(&csn.0.to_le_bytes());
            body.extend_from_slice(&(image.len() as u32).to_le_bytes());
            body.extend_from_slice(image);
        }
        out.extend_from_slice(&encode_frame(TABLE_MAGIC, t.0, table_id as u64, chunk.len() as u32, &body));
    }
    out
}

/// Decodes a table object. Every byte must belong to a valid frame.
pub fn decode_table_object(bytes: &[u8], t: Csn, table_id: u32) -> Option<Vec<(u64, Csn, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut off = 0;
    while off < bytes.len() {
        let f = decode_frame(bytes, off, TABLE_MAGIC)?;
        if f.a != t.0 || f.b != table_id as u64 {
            return None;
        }
        let mut r = Reader(f.body);
        for _ in 0..f.count {
            let rid = u64::from_le_bytes(r.take(8)?.try_into().ok()?);
            let csn = u64::from_le_bytes(r.take(8)?.try_into().ok()?);
            let len = u32::from_le_bytes(r.take(4)?.try_into().ok()?) as usize;
            out.push((rid, Csn(csn), r.take(len)?.to_vec()));
        }
        if !r.0.is_empty() {
            return None;
        }
        off = f.next_offset;
    }
    Some(out)
}

/// Checkpoints a running engine. Resume positions are read before the
/// snapshot timestamp, so every entry above the timestamp lies after them.
pub fn take_checkpoint(engine: &Engine, timeout: Duration) -> Result<CheckpointMeta, CheckpointError> {
    let resume = engine.durable_positions();
    let pipeline = engine.pipeline().clone();
    write_checkpoint(engine.db(), resume, &**engine.store(), |t| {
        pipeline.wait_released_through(t, timeout)
    })
}

/// Writes a checkpoint of `db` at its current snapshot timestamp t once
/// `wait_released(t)` confirms everything through t is released. The
/// metadata object is written last.
pub fn write_checkpoint(
    db: &Database,
    resume: Vec<Lsn>,
    store: &dyn ObjectStore,
    wait_released: impl FnOnce(Csn) -> bool,
) -> Result<CheckpointMeta, CheckpointError> {
    let mut tables = Vec::new();
    let mut failure = None;
    let t = db.snapshot(|t, reader| {
        if !wait_released(t) {
            failure = Some(CheckpointError::ReleaseTimeout(t.0));
            return Ok(());
        }
        for def in db.catalog().tables() {
            let mut records = Vec::new();
            reader.visit(def.table_id, |rid, csn, image| records.push((rid, csn, image.to_vec())))?;
            if records.is_empty() {
                continue;
            }
            let key = table_key(t, def.table_id);
            if let Err(e) = store.put(&key, &encode_table_object(t, def.table_id, &records)) {
                failure = Some(e.into());
                return Ok(());
            }
            tables.push(TableObject {
                table_id: def.table_id,
                key,
                records: records.len() as u64,
            });
        }
        Ok(())
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let meta = CheckpointMeta {
        checkpoint_ts: t,
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        tables,
        resume,
    };
    store.put(&meta.key(), &meta.encode())?;
    log::info!("checkpoint at csn {} with {} table objects", t.0, meta.tables.len());
    Ok(meta)
}

/// Reads the footer of a segment object; `None` if it is not sealed.
pub fn read_footer(store: &dyn ObjectStore, key: &str) -> Result<Option<SegmentFooter>, StoreError> {
    let len = store.size(key)?;
    if len < FOOTER_LEN as u64 {
        return Ok(None);
    }
    let tail = store.get(key, Some(len - FOOTER_LEN as u64..len))?;
    Ok(SegmentFooter::decode(&tail))
}

/// Deletes sealed segments whose entries all have CSN ≤ the checkpoint
/// timestamp. A log's newest segment is always kept. Returns deleted keys.
pub fn truncate(meta: &CheckpointMeta, store: &dyn ObjectStore) -> Result<Vec<String>, CheckpointError> {
    let mut logs: BTreeMap<u16, Vec<(u32, String)>> = BTreeMap::new();
    for key in store.list("log-")? {
        if let Some((log, seg)) = parse_segment_key(&key) {
            logs.entry(log).or_default().push((seg, key));
        }
    }
    let mut deleted = Vec::new();
    for (_, mut segs) in logs {
        segs.sort();
        segs.pop();
        for (_, key) in segs {
            let Some(footer) = read_footer(store, &key)? else {
                continue;
            };
            if footer.max_csn > meta.checkpoint_ts {
                continue;
            }
            let mut attempt = 0;
            loop {
                attempt += 1;
                match store.delete(&key) {
                    Ok(()) | Err(StoreError::NotFound(_)) => {
                        deleted.push(key.clone());
                        break;
                    }
                    Err(e) if attempt < DELETE_ATTEMPTS => log::warn!("delete {key}: {e}, retrying"),
                    Err(e) => {
                        log::error!("delete {key} failed: {e}");
                        break;
                    }
                }
            }
        }
    }
    Ok(deleted)
}
