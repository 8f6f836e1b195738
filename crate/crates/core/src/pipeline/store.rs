//! Write-once key/value store shared by the two workers.
//!
//! Both backends make each `put` atomic and refuse to overwrite a key. The
//! only payloads are trajectories, reward records, barriers, sub-policy
//! snapshots and scalar sub statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::Reader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordKind {
    MainReward,
    SubTrajectoryRef,
    Barrier,
    /// Sub-policy checkpoint the main worker samples sub-agents from.
    SubPolicySnapshot,
    /// Mean sub reward and gradient norm, for the metrics file.
    SubStats,
}

impl RecordKind {
    pub const ALL: [RecordKind; 5] = [
        RecordKind::MainReward,
        RecordKind::SubTrajectoryRef,
        RecordKind::Barrier,
        RecordKind::SubPolicySnapshot,
        RecordKind::SubStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::MainReward => "main-reward",
            RecordKind::SubTrajectoryRef => "sub-trajectories",
            RecordKind::Barrier => "barrier",
            RecordKind::SubPolicySnapshot => "sub-snapshot",
            RecordKind::SubStats => "sub-stats",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoreKey {
    pub run_id: String,
    pub step: u64,
    pub query_id: String,
    pub rollout_k: u32,
    pub kind: RecordKind,
}

// keep '-' and '_' readable; '.' separates fields
const FIELD: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_');

impl StoreKey {
    pub fn new(run_id: &str, step: u64, query_id: &str, rollout_k: u32, kind: RecordKind) -> Self {
        StoreKey {
            run_id: run_id.to_string(),
            step,
            query_id: query_id.to_string(),
            rollout_k,
            kind,
        }
    }

    /// Key of a per-step record not tied to any query.
    pub fn step_level(run_id: &str, step: u64, kind: RecordKind) -> Self {
        Self::new(run_id, step, "", 0, kind)
    }

    /// File name: the percent-encoded fields joined by dots.
    pub fn encode(&self) -> String {
        format!(
            "{}.{:010}.{}.{}.{}",
            utf8_percent_encode(&self.run_id, FIELD),
            self.step,
            utf8_percent_encode(&self.query_id, FIELD),
            self.rollout_k,
            self.kind.name()
        )
    }

    pub fn decode(name: &str) -> Result<Self> {
        let bad = || Error::Decode(format!("not a store key: {name:?}"));
        let parts: Vec<&str> = name.split('.').collect();
        let [run, step, query, k, kind] = parts[..] else {
            return Err(bad());
        };
        let text = |s: &str| {
            percent_decode_str(s)
                .decode_utf8()
                .map(|c| c.into_owned())
                .map_err(|_| bad())
        };
        Ok(StoreKey {
            run_id: text(run)?,
            step: step.parse().map_err(|_| bad())?,
            query_id: text(query)?,
            rollout_k: k.parse().map_err(|_| bad())?,
            kind: RecordKind::parse(kind).ok_or_else(bad)?,
        })
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}",
            self.run_id,
            self.step,
            self.query_id,
            self.rollout_k,
            self.kind.name()
        )
    }
}

pub trait Store: Send + Sync {
    /// Writes `payload` under a fresh key.
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<()>;

    fn get(&self, key: &StoreKey) -> Result<Option<Vec<u8>>>;

    /// Blocks until every key is present, or fails naming the missing ones.
    fn wait(&self, keys: &[StoreKey], timeout: Duration) -> Result<BTreeMap<StoreKey, Vec<u8>>>;

    /// Every key written so far, sorted.
    fn keys(&self) -> Result<Vec<StoreKey>>;

    /// Records that `step` finished on both workers.
    fn mark_complete(&self, run_id: &str, step: u64) -> Result<()>;

    fn completed_steps(&self, run_id: &str) -> Result<Vec<u64>>;

    fn wait_one(&self, key: &StoreKey, timeout: Duration) -> Result<Vec<u8>> {
        let mut got = self.wait(std::slice::from_ref(key), timeout)?;
        Ok(got.remove(key).expect("wait returns every key"))
    }
}

fn timeout_error(keys: &[StoreKey], present: impl Fn(&StoreKey) -> bool) -> Error {
    Error::Timeout {
        missing: keys
            .iter()
            .filter(|k| !present(k))
            .map(ToString::to_string)
            .collect(),
    }
}

#[derive(Default)]
struct MemoryInner {
    data: BTreeMap<StoreKey, Arc<[u8]>>,
    manifest: BTreeSet<(String, u64)>,
}

/// In-process store for tests and threaded runs.
#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<MemoryInner>,
    changed: Condvar,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MemoryInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Store for MemoryStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<()> {
        let mut inner = self.lock();
        if inner.data.contains_key(key) {
            return Err(Error::WriteOnce(key.to_string()));
        }
        inner.data.insert(key.clone(), payload.into());
        drop(inner);
        self.changed.notify_all();
        Ok(())
    }

    fn get(&self, key: &StoreKey) -> Result<Option<Vec<u8>>> {
        Ok(self.lock().data.get(key).map(|v| v.to_vec()))
    }

    fn wait(&self, keys: &[StoreKey], timeout: Duration) -> Result<BTreeMap<StoreKey, Vec<u8>>> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            if keys.iter().all(|k| inner.data.contains_key(k)) {
                return Ok(keys
                    .iter()
                    .map(|k| (k.clone(), inner.data[k].to_vec()))
                    .collect());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(timeout_error(keys, |k| inner.data.contains_key(k)));
            }
            inner = self
                .changed
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn keys(&self) -> Result<Vec<StoreKey>> {
        Ok(self.lock().data.keys().cloned().collect())
    }

    fn mark_complete(&self, run_id: &str, step: u64) -> Result<()> {
        self.lock().manifest.insert((run_id.to_string(), step));
        Ok(())
    }

    fn completed_steps(&self, run_id: &str) -> Result<Vec<u64>> {
        Ok(self
            .lock()
            .manifest
            .iter()
            .filter(|(r, _)| r == run_id)
            .map(|&(_, s)| s)
            .collect())
    }
}

pub const MANIFEST: &str = "MANIFEST";

/// Directory store usable from separate processes: one file per key.
/// Writes go to a temporary file that is then hard-linked into place, so
/// readers never see a partial record and a second writer gets an error.
pub struct DirStore {
    root: PathBuf,
    poll: Duration,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(DirStore {
            root,
            poll: Duration::from_millis(2),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &StoreKey) -> PathBuf {
        self.root.join(key.encode())
    }
}

impl Store for DirStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<()> {
        let target = self.path(key);
        let tmp = self.root.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(payload)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        let linked = fs::hard_link(&tmp, &target);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(Error::WriteOnce(key.to_string()))
            }
            Err(e) => Err(Error::io(&target, e)),
        }
    }

    fn get(&self, key: &StoreKey) -> Result<Option<Vec<u8>>> {
        let path = self.path(key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn wait(&self, keys: &[StoreKey], timeout: Duration) -> Result<BTreeMap<StoreKey, Vec<u8>>> {
        let deadline = Instant::now() + timeout;
        let mut found = BTreeMap::new();
        let mut poll = self.poll;
        loop {
            for k in keys {
                if !found.contains_key(k) {
                    if let Some(v) = self.get(k)? {
                        found.insert(k.clone(), v);
                    }
                }
            }
            if found.len() == keys.len() {
                return Ok(found);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(timeout_error(keys, |k| found.contains_key(k)));
            }
            std::thread::sleep(poll.min(deadline - now));
            poll = (poll * 2).min(Duration::from_millis(50));
        }
    }

    fn keys(&self) -> Result<Vec<StoreKey>> {
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut keys = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with('.') || name == MANIFEST {
                continue;
            }
            keys.push(StoreKey::decode(&name)?);
        }
        keys.sort();
        Ok(keys)
    }

    fn mark_complete(&self, run_id: &str, step: u64) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let line = format!("{} {step}\n", utf8_percent_encode(run_id, FIELD));
        // a single short O_APPEND write lands whole
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    }

    fn completed_steps(&self, run_id: &str) -> Result<Vec<u64>> {
        let path = self.root.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let want = utf8_percent_encode(run_id, FIELD).to_string();
        let mut steps = Vec::new();
        for line in text.lines() {
            let Some((run, step)) = line.split_once(' ') else {
                return Err(Error::Decode(format!("bad manifest line {line:?}")));
            };
            if run == want {
                steps.push(
                    step.parse()
                        .map_err(|_| Error::Decode(format!("bad manifest line {line:?}")))?,
                );
            }
        }
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

/// A main-agent reward as replicated to the sub worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MainRewardRecord {
    pub r_correct_main: f64,
    pub main_format_ok: bool,
    pub main_total: f64,
}

impl MainRewardRecord {
    pub const LEN: usize = 17;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.r_correct_main.to_le_bytes());
        out.push(u8::from(self.main_format_ok));
        out.extend_from_slice(&self.main_total.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let r_correct_main = r.f64()?;
        let main_format_ok = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Decode(format!("format flag {b} is not 0 or 1"))),
        };
        let main_total = r.f64()?;
        r.finish()?;
        Ok(MainRewardRecord {
            r_correct_main,
            main_format_ok,
            main_total,
        })
    }
}

/// Barrier payload: the query ids trained at this step, in order.
pub fn encode_query_ids(ids: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

pub fn decode_query_ids(bytes: &[u8]) -> Result<Vec<String>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut ids = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        ids.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Decode("query id is not UTF-8".into()))?,
        );
    }
    r.finish()?;
    Ok(ids)
}

/// Sub-side scalars reported to the main worker's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubStats {
    pub mean_reward: Option<f64>,
    pub grad_norm: Option<f64>,
}

impl SubStats {
    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = |x: Option<f64>| x.unwrap_or(f64::NAN).to_le_bytes();
        [enc(self.mean_reward), enc(self.grad_norm)].concat()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let dec = |x: f64| (!x.is_nan()).then_some(x);
        let stats = SubStats {
            mean_reward: dec(r.f64()?),
            grad_norm: dec(r.f64()?),
        };
        r.finish()?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(step: u64, q: &str, k: u32, kind: RecordKind) -> StoreKey {
        StoreKey::new("r/1 x", step, q, k, kind)
    }

    fn backends() -> Vec<(Box<dyn Store>, tempfile::TempDir)> {
        let dir = tempfile::tempdir().unwrap();
        let d = DirStore::open(dir.path().join("s")).unwrap();
        vec![
            (Box::new(MemoryStore::new()), tempfile::tempdir().unwrap()),
            (Box::new(d), dir),
        ]
    }

    #[test]
    fn key_names_round_trip() {
        for kind in RecordKind::ALL {
            let k = key(7, "s2-123.4/é", 3, kind);
            let name = k.encode();
            assert!(!name.contains('/'));
            assert_eq!(StoreKey::decode(&name).unwrap(), k);
        }
        assert!(StoreKey::decode("a.b").is_err());
        assert!(StoreKey::decode("a.1.q.0.gradient").is_err());
    }

    #[test]
    fn put_get_and_write_once() {
        for (s, _dir) in backends() {
            let k = key(0, "q", 0, RecordKind::MainReward);
            s.put(&k, b"abc").unwrap();
            assert_eq!(s.get(&k).unwrap().unwrap(), b"abc");
            assert!(matches!(s.put(&k, b"xyz"), Err(Error::WriteOnce(_))));
            assert_eq!(s.get(&k).unwrap().unwrap(), b"abc");
            assert_eq!(
                s.get(&key(1, "q", 0, RecordKind::MainReward)).unwrap(),
                None
            );
            assert_eq!(s.keys().unwrap(), vec![k]);
        }
    }

    #[test]
    fn wait_returns_or_names_missing_keys() {
        for (s, _dir) in backends() {
            let a = key(0, "q", 0, RecordKind::Barrier);
            let b = key(0, "q", 1, RecordKind::Barrier);
            s.put(&a, b"1").unwrap();
            let got = s.wait(std::slice::from_ref(&a), Duration::ZERO).unwrap();
            assert_eq!(got[&a], b"1");
            match s.wait(&[a.clone(), b.clone()], Duration::from_millis(20)) {
                Err(e @ Error::Timeout { .. }) => {
                    assert!(e.is_retriable());
                    let Error::Timeout { missing } = e else {
                        unreachable!()
                    };
                    assert_eq!(missing, vec![b.to_string()]);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn manifest_lists_completed_steps() {
        for (s, _dir) in backends() {
            s.mark_complete("r 1", 3).unwrap();
            s.mark_complete("r 1", 1).unwrap();
            s.mark_complete("other", 2).unwrap();
            assert_eq!(s.completed_steps("r 1").unwrap(), vec![1, 3]);
            assert!(s.completed_steps("none").unwrap().is_empty());
        }
    }

    #[test]
    fn record_codecs() {
        let r = MainRewardRecord {
            r_correct_main: 1.0,
            main_format_ok: true,
            main_total: 1.0,
        };
        assert_eq!(MainRewardRecord::from_bytes(&r.to_bytes()).unwrap(), r);
        assert!(MainRewardRecord::from_bytes(&r.to_bytes()[..16]).is_err());
        let mut bad = r.to_bytes();
        bad[8] = 2;
        assert!(MainRewardRecord::from_bytes(&bad).is_err());

        let ids = vec!["s1-5".to_string(), String::new(), "s2-9".into()];
        assert_eq!(decode_query_ids(&encode_query_ids(&ids)).unwrap(), ids);
        assert!(decode_query_ids(&[1, 0, 0]).is_err());

        for st in [
            SubStats {
                mean_reward: Some(0.5),
                grad_norm: None,
            },
            SubStats {
                mean_reward: None,
                grad_norm: Some(2.0),
            },
        ] {
            assert_eq!(SubStats::from_bytes(&st.to_bytes()).unwrap(), st);
        }
    }
}
