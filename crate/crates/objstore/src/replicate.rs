//! Write fan-out to several buckets with all/majority acknowledgment.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::cost::CostCounters;
use crate::retry::{append_with_retry, RetryPolicy};
use crate::{Appended, ObjectStore, StoreError, StoreResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckPolicy {
    All,
    Majority,
}

impl AckPolicy {
    /// Replica acknowledgments needed out of `n`.
    pub fn required(self, n: usize) -> usize {
        match self {
            AckPolicy::All => n,
            AckPolicy::Majority => n / 2 + 1,
        }
    }
}

impl std::str::FromStr for AckPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(AckPolicy::All),
            "majority" => Ok(AckPolicy::Majority),
            other => Err(format!("unknown ack policy '{other}'")),
        }
    }
}

/// Which buckets receive each write and how many must acknowledge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicationPolicy {
    pub buckets: Vec<String>,
    pub ack: AckPolicy,
}

impl ReplicationPolicy {
    pub fn new(buckets: Vec<String>, ack: AckPolicy) -> StoreResult<Self> {
        if buckets.is_empty() {
            return Err(StoreError::InvalidKey("replication needs at least one bucket".into()));
        }
        Ok(ReplicationPolicy { buckets, ack })
    }

    pub fn required_acks(&self) -> usize {
        self.ack.required(self.buckets.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicatedAck {
    pub new_length: u64,
    /// Time until the policy was satisfied.
    pub ack_time: Duration,
    /// Per-replica completion time, `None` for replicas that failed or had not
    /// finished when the policy was met.
    pub replica_times: Vec<Option<Duration>>,
}

type ChainKey = (usize, String);

/// A set of replica buckets behind one [`ObjectStore`] facade.
///
/// Appends go to every replica concurrently and return once the ack policy is
/// met; slower replicas finish in the background. Appends to the same key on
/// the same replica are issued in call order even when an earlier one is still
/// straggling. Each replica retries transient failures on its own.
pub struct ReplicatedStore {
    replicas: Vec<Arc<dyn ObjectStore>>,
    ack: AckPolicy,
    retry: RetryPolicy,
    // done-signal of the last append issued per (replica, key)
    chains: Mutex<HashMap<ChainKey, mpsc::Receiver<()>>>,
    // replicas that exhausted retries and no longer receive writes
    lagging: Arc<Vec<AtomicBool>>,
    divergence: Arc<Mutex<Option<String>>>,
}

impl ReplicatedStore {
    pub fn new(replicas: Vec<Arc<dyn ObjectStore>>, ack: AckPolicy) -> StoreResult<Self> {
        if replicas.is_empty() {
            return Err(StoreError::InvalidKey("replication needs at least one bucket".into()));
        }
        let lagging = Arc::new((0..replicas.len()).map(|_| AtomicBool::new(false)).collect());
        Ok(ReplicatedStore {
            replicas,
            ack,
            retry: RetryPolicy::default(),
            chains: Mutex::new(HashMap::new()),
            lagging,
            divergence: Arc::new(Mutex::new(None)),
        })
    }

    pub fn single(store: Arc<dyn ObjectStore>) -> Self {
        ReplicatedStore::new(vec![store], AckPolicy::All).expect("one replica")
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn replicas(&self) -> &[Arc<dyn ObjectStore>] {
        &self.replicas
    }

    pub fn policy(&self) -> ReplicationPolicy {
        ReplicationPolicy {
            buckets: self.replicas.iter().map(|r| r.bucket().to_string()).collect(),
            ack: self.ack,
        }
    }

    /// Appends to every replica and waits for the ack policy.
    pub fn replicated_append(
        &self,
        key: &str,
        expected_offset: u64,
        payload: &[u8],
    ) -> StoreResult<ReplicatedAck> {
        if let Some(detail) = self.divergence.lock().clone() {
            return Err(StoreError::Divergence {
                key: key.to_string(),
                detail,
            });
        }
        let n = self.replicas.len();
        let required = self.ack.required(n);
        if n == 1 {
            let a = append_with_retry(&*self.replicas[0], key, expected_offset, payload, &self.retry)?;
            return Ok(ReplicatedAck {
                new_length: a.new_length,
                ack_time: a.service_time,
                replica_times: vec![Some(a.service_time)],
            });
        }

        let start = Instant::now();
        let payload: Arc<[u8]> = Arc::from(payload);
        let (tx, rx) = mpsc::channel::<(usize, StoreResult<Appended>)>();
        let mut dispatched = 0;
        for (i, replica) in self.replicas.iter().enumerate() {
            if self.lagging[i].load(Ordering::SeqCst) {
                continue;
            }
            let (done_tx, done_rx) = mpsc::channel::<()>();
            let prev = self.chains.lock().insert((i, key.to_string()), done_rx);
            let replica = replica.clone();
            let tx = tx.clone();
            let payload = payload.clone();
            let key = key.to_string();
            let retry = self.retry;
            let lagging = self.lagging.clone();
            let divergence = self.divergence.clone();
            std::thread::spawn(move || {
                if let Some(prev) = prev {
                    // an Err means the previous job already finished and dropped its sender
                    let _ = prev.recv();
                }
                let res = append_with_retry(&*replica, &key, expected_offset, &payload, &retry);
                match &res {
                    Err(StoreError::Unavailable(_)) => lagging[i].store(true, Ordering::SeqCst),
                    Err(e) => {
                        let mut d = divergence.lock();
                        if d.is_none() {
                            *d = Some(format!("replica {} ({}): {e}", i, replica.bucket()));
                        }
                    }
                    Ok(_) => {}
                }
                let _ = tx.send((i, res));
                let _ = done_tx.send(());
            });
            dispatched += 1;
        }
        drop(tx);

        let mut times = vec![None; n];
        let mut ok_times = Vec::new();
        let mut new_length = None;
        let mut failures = n - dispatched;
        let mut first_err = None;
        while ok_times.len() < required {
            if n - failures < required {
                break;
            }
            let Ok((i, res)) = rx.recv() else { break };
            match res {
                Ok(a) => {
                    if let Some(len) = new_length {
                        if len != a.new_length {
                            return Err(StoreError::Divergence {
                                key: key.to_string(),
                                detail: format!("replica lengths {len} and {}", a.new_length),
                            });
                        }
                    }
                    new_length = Some(a.new_length);
                    times[i] = Some(a.service_time);
                    ok_times.push(a.service_time);
                }
                Err(e @ StoreError::Unavailable(_)) => {
                    failures += 1;
                    first_err.get_or_insert(e);
                }
                Err(e) => {
                    return Err(StoreError::Divergence {
                        key: key.to_string(),
                        detail: format!("replica {i}: {e}"),
                    })
                }
            }
        }
        if ok_times.len() < required {
            return Err(first_err.unwrap_or_else(|| {
                StoreError::Unavailable(format!(
                    "{key}: only {} of {required} replicas acknowledged",
                    ok_times.len()
                ))
            }));
        }
        let modeled = self.healthy().all(|r| r.modeled_time());
        if modeled {
            // arrival order is unrelated to modeled latency, so gather every result
            while let Ok((i, Ok(a))) = rx.recv() {
                if new_length == Some(a.new_length) {
                    times[i] = Some(a.service_time);
                    ok_times.push(a.service_time);
                }
            }
        }
        ok_times.sort();
        let nth = ok_times[required - 1];
        let ack_time = if modeled { nth } else { nth.max(start.elapsed()) };
        Ok(ReplicatedAck {
            new_length: new_length.expect("at least one ack"),
            ack_time,
            replica_times: times,
        })
    }

    fn healthy(&self) -> impl Iterator<Item = &Arc<dyn ObjectStore>> {
        self.replicas
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.lagging[*i].load(Ordering::SeqCst))
            .map(|(_, r)| r)
    }

    fn write_all<F>(&self, op: F) -> StoreResult<()>
    where
        F: Fn(&dyn ObjectStore) -> StoreResult<()>,
    {
        let required = self.ack.required(self.replicas.len());
        let mut ok = 0;
        let mut last_err = None;
        for r in self.healthy() {
            match op(&**r) {
                Ok(()) => ok += 1,
                Err(e) => last_err = Some(e),
            }
        }
        if ok >= required {
            Ok(())
        } else {
            Err(last_err.unwrap_or_else(|| StoreError::Unavailable("no healthy replicas".into())))
        }
    }
}

impl ObjectStore for ReplicatedStore {
    fn bucket(&self) -> &str {
        self.replicas[0].bucket()
    }

    fn append(&self, key: &str, expected_offset: u64, payload: &[u8]) -> StoreResult<Appended> {
        let ack = self.replicated_append(key, expected_offset, payload)?;
        Ok(Appended {
            new_length: ack.new_length,
            service_time: ack.ack_time,
        })
    }

    fn get(&self, key: &str, range: Option<Range<u64>>) -> StoreResult<Vec<u8>> {
        let mut last_err = None;
        for r in self.healthy() {
            match r.get(key, range.clone()) {
                Ok(b) => return Ok(b),
                Err(e @ StoreError::NotFound(_)) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| StoreError::Unavailable("no healthy replicas".into())))
    }

    fn size(&self, key: &str) -> StoreResult<u64> {
        let mut last_err = None;
        for r in self.healthy() {
            match r.size(key) {
                Ok(n) => return Ok(n),
                Err(e @ StoreError::NotFound(_)) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| StoreError::Unavailable("no healthy replicas".into())))
    }

    fn put(&self, key: &str, bytes: &[u8]) -> StoreResult<()> {
        self.write_all(|r| r.put(key, bytes))
    }

    fn delete(&self, key: &str) -> StoreResult<()> {
        self.write_all(|r| r.delete(key))
    }

    fn list(&self, prefix: &str) -> StoreResult<Vec<String>> {
        let mut last_err = None;
        for r in self.healthy() {
            match r.list(prefix) {
                Ok(keys) => return Ok(keys),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| StoreError::Unavailable("no healthy replicas".into())))
    }

    fn counters(&self) -> CostCounters {
        self.replicas
            .iter()
            .fold(CostCounters::default(), |acc, r| acc.merged(&r.counters()))
    }

    fn supports_append(&self) -> bool {
        self.replicas.iter().all(|r| r.supports_append())
    }

    fn base_latency(&self) -> Duration {
        self.replicas[0].base_latency()
    }

    fn pause(&self, d: Duration) {
        self.replicas[0].pause(d)
    }

    fn modeled_time(&self) -> bool {
        self.replicas.iter().all(|r| r.modeled_time())
    }
}
