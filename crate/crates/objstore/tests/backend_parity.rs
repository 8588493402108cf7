use std::collections::HashMap;

use dlog_objstore::{LocalDirStore, ObjectStore, SimStore, StoreError};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Append { key: usize, skew: i8, data: Vec<u8> },
    Put { key: usize, data: Vec<u8> },
    Delete { key: usize },
    Get { key: usize, start: u8, len: u8 },
}

const KEYS: [&str; 3] = ["log-0-seg-0", "log-1-seg-0", "ckpt-1-meta"];

fn op() -> impl Strategy<Value = Op> {
    let data = prop::collection::vec(any::<u8>(), 0..40);
    prop_oneof![
        4 => (0..3usize, prop_oneof![3 => Just(0i8), 1 => -3i8..3], data.clone())
            .prop_map(|(key, skew, data)| Op::Append { key, skew, data }),
        1 => (0..3usize, data).prop_map(|(key, data)| Op::Put { key, data }),
        1 => (0..3usize).prop_map(|key| Op::Delete { key }),
        2 => (0..3usize, any::<u8>(), any::<u8>()).prop_map(|(key, start, len)| Op::Get { key, start, len }),
    ]
}

/// Outcome with error details reduced to their kind.
fn outcome<T: PartialEq + std::fmt::Debug>(r: Result<T, StoreError>) -> Result<T, String> {
    r.map_err(|e| match e {
        StoreError::OffsetMismatch { actual } => format!("offset {actual}"),
        StoreError::NotFound(_) => "not found".into(),
        StoreError::RangeInvalid { .. } => "range".into(),
        other => other.to_string(),
    })
}

fn apply(s: &dyn ObjectStore, model: &HashMap<usize, Vec<u8>>, op: &Op) -> Result<Vec<u8>, String> {
    match op {
        Op::Append { key, skew, data } => {
            let len = model.get(key).map_or(0, |v| v.len()) as i64;
            let off = (len + *skew as i64).max(0) as u64;
            outcome(s.append(KEYS[*key], off, data)).map(|a| a.new_length.to_le_bytes().to_vec())
        }
        Op::Put { key, data } => outcome(s.put(KEYS[*key], data)).map(|_| vec![]),
        Op::Delete { key } => outcome(s.delete(KEYS[*key])).map(|_| vec![]),
        Op::Get { key, start, len } => {
            let (a, b) = (*start as u64 % 48, *start as u64 % 48 + *len as u64 % 16);
            outcome(s.get(KEYS[*key], Some(a..b)))
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    /// Appended parts concatenate, and both backends agree on every result.
    #[test]
    fn local_dir_matches_sim(ops in prop::collection::vec(op(), 1..40)) {
        let tmp = tempfile::tempdir().unwrap();
        let local = LocalDirStore::open(tmp.path(), "b").unwrap().without_sync();
        let sim = SimStore::instant("b");
        let mut model: HashMap<usize, Vec<u8>> = HashMap::new();
        for op in &ops {
            let a = apply(&local, &model, op);
            let b = apply(&sim, &model, op);
            prop_assert_eq!(&a, &b, "{:?}", op);
            match op {
                Op::Append { key, data, .. } if a.is_ok() => model.entry(*key).or_default().extend(data),
                Op::Put { key, data } => {
                    model.insert(*key, data.clone());
                }
                Op::Delete { key } => {
                    model.remove(key);
                }
                _ => {}
            }
        }
        for (i, key) in KEYS.iter().enumerate() {
            let want = model.get(&i).cloned();
            prop_assert_eq!(local.get(key, None).ok(), want.clone());
            prop_assert_eq!(sim.get(key, None).ok(), want.clone());
            prop_assert_eq!(sim.size(key).ok(), want.as_ref().map(|v| v.len() as u64));
            prop_assert_eq!(local.size(key).ok(), want.map(|v| v.len() as u64));
        }
        let mut l = local.list("log-").unwrap();
        let mut s = sim.list("log-").unwrap();
        l.sort();
        s.sort();
        prop_assert_eq!(l, s);
    }
}
