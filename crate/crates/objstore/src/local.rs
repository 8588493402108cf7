//! Local-directory backend: one file per object under `{root}/{bucket}/{key}`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Read, Seek, SeekFrom};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

use crate::cost::{CostCounters, RequestCounters};
use crate::latency::OpKind;
use crate::{
    check_range, Appended, ObjectStore, StoreError, StoreResult, DEFAULT_MAX_PART_BYTES,
    DEFAULT_PART_LIMIT,
};

pub struct LocalDirStore {
    bucket: String,
    dir: PathBuf,
    sync: bool,
    part_limit: u32,
    // Per-key serialization point and part count. Objects that predate this
    // store instance are counted as a single part.
    objects: Mutex<HashMap<String, Arc<Mutex<Option<u32>>>>>,
    counters: RequestCounters,
}

impl LocalDirStore {
    pub fn open(root: impl AsRef<Path>, bucket: impl Into<String>) -> StoreResult<Self> {
        let bucket = bucket.into();
        let dir = root.as_ref().join(&bucket);
        fs::create_dir_all(&dir)?;
        Ok(LocalDirStore {
            bucket,
            dir,
            sync: true,
            part_limit: DEFAULT_PART_LIMIT,
            objects: Mutex::new(HashMap::new()),
            counters: RequestCounters::default(),
        })
    }

    /// Disables `fsync` on writes. Only for benchmarks that do not test
    /// durability.
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn with_part_limit(mut self, limit: u32) -> Self {
        self.part_limit = limit;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> StoreResult<PathBuf> {
        if key.is_empty() || key.contains('/') || key == "." || key == ".." {
            return Err(StoreError::InvalidKey(key.to_string()));
        }
        Ok(self.dir.join(key))
    }

    fn slot(&self, key: &str) -> Arc<Mutex<Option<u32>>> {
        self.objects
            .lock()
            .entry(key.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(None)))
            .clone()
    }
}

impl ObjectStore for LocalDirStore {
    fn bucket(&self) -> &str {
        &self.bucket
    }

    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended> {
        let start = Instant::now();
        self.counters.record(OpKind::Append);
        let size = payload.len() as u64;
        if size > DEFAULT_MAX_PART_BYTES {
            return Err(StoreError::PayloadTooLarge {
                size,
                max: DEFAULT_MAX_PART_BYTES,
            });
        }
        let path = self.path(key)?;
        let slot = self.slot(key);
        let mut parts = slot.lock();
        let file = match OpenOptions::new().write(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                if expected_offset != 0 {
                    return Err(StoreError::OffsetMismatch { actual: 0 });
                }
                *parts = Some(0);
                OpenOptions::new().write(true).create(true).truncate(true).open(&path)?
            }
            Err(e) => return Err(e.into()),
        };
        let actual = file.metadata()?.len();
        if actual != expected_offset {
            return Err(StoreError::OffsetMismatch { actual });
        }
        let count = parts.unwrap_or(if actual > 0 { 1 } else { 0 });
        if count >= self.part_limit {
            return Err(StoreError::PartLimitExceeded {
                limit: self.part_limit,
            });
        }
        file.write_all_at(payload, expected_offset)?;
        if self.sync {
            file.sync_data()?;
            if expected_offset == 0 {
                File::open(&self.dir)?.sync_all()?;
            }
        }
        *parts = Some(count + 1);
        self.counters.uploaded(size);
        self.counters.stored_delta(size, 0);
        Ok(Appended {
            new_length: expected_offset + size,
            service_time: start.elapsed(),
        })
    }

    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        self.counters.record(OpKind::Get);
        let path = self.path(key)?;
        let mut file = File::open(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => StoreError::NotFound(key.to_string()),
            _ => e.into(),
        })?;
        let len = file.metadata()?.len();
        let r = range.unwrap_or(0..len);
        check_range(&r, len)?;
        let mut buf = vec![0u8; (r.end - r.start) as usize];
        file.seek(SeekFrom::Start(r.start))?;
        file.read_exact(&mut buf)?;
        self.counters.downloaded(buf.len() as u64);
        Ok(buf)
    }

    fn size(&self, key: &str) -> StoreResult<u64> {
        self.counters.record(OpKind::Get);
        let path = self.path(key)?;
        match fs::metadata(&path) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(StoreError::NotFound(key.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        self.counters.record(OpKind::Put);
        let path = self.path(key)?;
        let slot = self.slot(key);
        let mut parts = slot.lock();
        let old = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        // write-then-rename so a crash never leaves a half-written object
        let tmp = self.dir.join(format!(".{key}.tmp"));
        fs::write(&tmp, bytes)?;
        if self.sync {
            File::open(&tmp)?.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if self.sync {
            File::open(&self.dir)?.sync_all()?;
        }
        *parts = Some(1);
        self.counters.uploaded(bytes.len() as u64);
        self.counters.stored_delta(bytes.len() as u64, old);
        Ok(())
    }

    fn delete(&self, key: &str) -> StoreResult<()> {
        self.counters.record(OpKind::Delete);
        let path = self.path(key)?;
        let slot = self.slot(key);
        let mut parts = slot.lock();
        let old = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        *parts = None;
        self.counters.stored_delta(0, old);
        Ok(())
    }

    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        self.counters.record(OpKind::List);
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            if let Some(name) = entry.file_name().to_str() {
                if name.starts_with(prefix) && !name.starts_with('.') {
                    keys.push(name.to_string());
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn counters(&self) -> CostCounters {
        self.counters.snapshot()
    }
}
