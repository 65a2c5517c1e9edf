//! Simulated linearizable key-value store with versioned compare-and-swap,
//! multi-key transactions and delayed watch delivery.
//!
//! Key layout:
//!
//! ```text
//! vehicles/<id>/state          written only by vehicle <id>
//! vehicles/<id>/surrounding    written only by vehicle <id>
//! intersection/<block>/...     leases, registration sequence, lock
//! ```
//!
//! Commits are applied instantly at the authority. Subscribers observe them
//! after a sampled propagation delay, always in commit order.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{sample_delivery_delay, NetParams};

pub type AgentId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("agent {writer} may not write `{key}`")]
    Unauthorized { writer: AgentId, key: String },
    #[error("key `{0}` is outside the store schema")]
    UnknownNamespace(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub key: String,
    pub value: String,
    pub version: u64,
    pub mod_time: f64,
}

pub mod keys {
    use super::AgentId;

    pub fn vehicle_state(id: AgentId) -> String {
        format!("vehicles/{id}/state")
    }

    pub fn vehicle_surrounding(id: AgentId) -> String {
        format!("vehicles/{id}/surrounding")
    }

    pub fn lease_prefix(block: &str) -> String {
        format!("intersection/{block}/leases/")
    }

    pub fn lease(block: &str, lease_id: &str) -> String {
        format!("intersection/{block}/leases/{lease_id}")
    }

    /// Bumped by every lease mutation on the block; CAS target for registration.
    pub fn lease_seq(block: &str) -> String {
        format!("intersection/{block}/seq")
    }

    pub fn lock(block: &str) -> String {
        format!("intersection/{block}/lock")
    }

    pub const VEHICLES: &str = "vehicles/";
    pub const INTERSECTION: &str = "intersection/";
}

/// Schema check: vehicles touch only their own records; intersection
/// records are shared.
pub fn authorize(key: &str, writer: AgentId) -> Result<(), StoreError> {
    if let Some(rest) = key.strip_prefix(keys::VEHICLES) {
        let owner = rest.split('/').next().unwrap_or("");
        return match owner.parse::<AgentId>() {
            Ok(id) if id == writer => Ok(()),
            Ok(_) => Err(StoreError::Unauthorized { writer, key: key.to_string() }),
            Err(_) => Err(StoreError::UnknownNamespace(key.to_string())),
        };
    }
    if key.starts_with(keys::INTERSECTION) {
        return Ok(());
    }
    Err(StoreError::UnknownNamespace(key.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Put,
    Delete,
}

/// One committed mutation, in commit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub revision: u64,
    pub txn: u64,
    pub t: f64,
    pub writer: AgentId,
    pub kind: ChangeKind,
    pub key: String,
    pub version: u64,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchEvent {
    pub key: String,
    pub kind: ChangeKind,
    pub version: u64,
    pub value: Option<String>,
    pub revision: u64,
    pub commit_time: f64,
    pub deliver_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasOutcome {
    Ok(u64),
    Conflict(u64),
}

impl CasOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, CasOutcome::Ok(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnOp {
    Put { key: String, value: String },
    Delete { key: String },
}

impl TxnOp {
    pub fn key(&self) -> &str {
        match self {
            TxnOp::Put { key, .. } | TxnOp::Delete { key } => key,
        }
    }
}

/// Guard for a transaction: the key's current version must equal `expected`
/// (0 means absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Compare {
    pub key: String,
    pub expected: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnOutcome {
    Committed { revision: u64 },
    /// The first failing compare and the version actually found.
    Conflict { key: String, current: u64 },
}

impl TxnOutcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, TxnOutcome::Committed { .. })
    }
}

/// Operation submitted within one tick; committed in `(t, agent)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingOp {
    pub t: f64,
    pub agent: AgentId,
    pub op: StoreOp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoreOp {
    Put { key: String, value: String },
    Cas { key: String, expected: u64, value: String },
    Delete { key: String },
    Range { prefix: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpResult {
    Put(u64),
    Cas(CasOutcome),
    Delete(bool),
    Range(Vec<StoreEntry>),
}

pub type WatchId = usize;

#[derive(Debug, Clone)]
struct Watch {
    prefix: String,
    subscriber: AgentId,
    queue: VecDeque<WatchEvent>,
    last_deliver: f64,
    delivered: u64,
}

#[derive(Debug, Clone)]
pub struct Store {
    entries: BTreeMap<String, StoreEntry>,
    /// Last version ever assigned per key, surviving deletes.
    last_version: HashMap<String, u64>,
    revision: u64,
    txn_counter: u64,
    log: Vec<OpRecord>,
    watches: Vec<Watch>,
    net: NetParams,
    rng: ChaCha8Rng,
}

impl Default for Store {
    fn default() -> Self {
        Self::new(NetParams::default(), 0)
    }
}

impl Store {
    pub fn new(net: NetParams, seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            last_version: HashMap::new(),
            revision: 0,
            txn_counter: 0,
            log: Vec::new(),
            watches: Vec::new(),
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn net(&self) -> &NetParams {
        &self.net
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn log(&self) -> &[OpRecord] {
        &self.log
    }

    pub fn get(&self, key: &str) -> Option<&StoreEntry> {
        self.entries.get(key)
    }

    /// Current version, 0 when absent.
    pub fn version(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| e.version)
    }

    pub fn entries(&self) -> &BTreeMap<String, StoreEntry> {
        &self.entries
    }

    pub fn put(&mut self, key: &str, value: &str, writer: AgentId, now: f64) -> Result<u64, StoreError> {
        authorize(key, writer)?;
        let txn = self.next_txn();
        Ok(self.apply_put(key, value, writer, now, txn))
    }

    pub fn compare_and_swap(&mut self, key: &str, expected: u64, value: &str, writer: AgentId, now: f64) -> Result<CasOutcome, StoreError> {
        authorize(key, writer)?;
        let current = self.version(key);
        if current != expected {
            return Ok(CasOutcome::Conflict(current));
        }
        let txn = self.next_txn();
        Ok(CasOutcome::Ok(self.apply_put(key, value, writer, now, txn)))
    }

    pub fn delete(&mut self, key: &str, writer: AgentId, now: f64) -> Result<bool, StoreError> {
        authorize(key, writer)?;
        if !self.entries.contains_key(key) {
            return Ok(false);
        }
        let txn = self.next_txn();
        self.apply_delete(key, writer, now, txn);
        Ok(true)
    }

    /// Consistent snapshot of every key under `prefix`, in key order.
    pub fn range_read(&self, prefix: &str) -> Vec<StoreEntry> {
        self.entries.range(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)).map(|(_, e)| e.clone()).collect()
    }

    /// All-or-nothing multi-key update guarded by version compares.
    pub fn txn(&mut self, compares: &[Compare], ops: &[TxnOp], writer: AgentId, now: f64) -> Result<TxnOutcome, StoreError> {
        for op in ops {
            authorize(op.key(), writer)?;
        }
        for c in compares {
            let current = self.version(&c.key);
            if current != c.expected {
                return Ok(TxnOutcome::Conflict { key: c.key.clone(), current });
            }
        }
        let txn = self.next_txn();
        for op in ops {
            match op {
                TxnOp::Put { key, value } => {
                    self.apply_put(key, value, writer, now, txn);
                }
                TxnOp::Delete { key } => {
                    if self.entries.contains_key(key.as_str()) {
                        self.apply_delete(key, writer, now, txn);
                    }
                }
            }
        }
        Ok(TxnOutcome::Committed { revision: self.revision })
    }

    /// Commits a tick's worth of operations in `(t, agent)` order. Ties keep
    /// submission order. Results are returned in submission order.
    pub fn commit_batch(&mut self, ops: &[PendingOp]) -> Vec<Result<OpResult, StoreError>> {
        let mut order: Vec<usize> = (0..ops.len()).collect();
        order.sort_by(|&a, &b| ops[a].t.total_cmp(&ops[b].t).then(ops[a].agent.cmp(&ops[b].agent)).then(a.cmp(&b)));
        let mut results: Vec<Option<Result<OpResult, StoreError>>> = vec![None; ops.len()];
        for i in order {
            let p = &ops[i];
            let r = match &p.op {
                StoreOp::Put { key, value } => self.put(key, value, p.agent, p.t).map(OpResult::Put),
                StoreOp::Cas { key, expected, value } => self.compare_and_swap(key, *expected, value, p.agent, p.t).map(OpResult::Cas),
                StoreOp::Delete { key } => self.delete(key, p.agent, p.t).map(OpResult::Delete),
                StoreOp::Range { prefix } => Ok(OpResult::Range(self.range_read(prefix))),
            };
            results[i] = Some(r);
        }
        results.into_iter().map(|r| r.expect("every op visited")).collect()
    }

    /// Subscribes to future changes under `prefix`. No retroactive events.
    pub fn watch(&mut self, prefix: &str, subscriber: AgentId) -> WatchId {
        self.watches.push(Watch { prefix: prefix.to_string(), subscriber, queue: VecDeque::new(), last_deliver: f64::NEG_INFINITY, delivered: 0 });
        self.watches.len() - 1
    }

    pub fn watch_subscriber(&self, id: WatchId) -> AgentId {
        self.watches[id].subscriber
    }

    /// Events whose delivery time has arrived, in commit order.
    pub fn poll_watch(&mut self, id: WatchId, now: f64) -> Vec<WatchEvent> {
        let w = &mut self.watches[id];
        let mut out = Vec::new();
        while w.queue.front().is_some_and(|e| e.deliver_at <= now) {
            out.push(w.queue.pop_front().unwrap());
        }
        w.delivered += out.len() as u64;
        out
    }

    /// Earliest pending delivery across all watches.
    pub fn next_delivery(&self) -> Option<f64> {
        self.watches.iter().filter_map(|w| w.queue.front().map(|e| e.deliver_at)).min_by(f64::total_cmp)
    }

    fn next_txn(&mut self) -> u64 {
        self.txn_counter += 1;
        self.txn_counter
    }

    fn bump_version(&mut self, key: &str) -> u64 {
        let v = self.last_version.entry(key.to_string()).or_insert(0);
        *v += 1;
        *v
    }

    fn apply_put(&mut self, key: &str, value: &str, writer: AgentId, now: f64, txn: u64) -> u64 {
        let version = self.bump_version(key);
        self.revision += 1;
        self.entries.insert(key.to_string(), StoreEntry { key: key.to_string(), value: value.to_string(), version, mod_time: now });
        self.record(OpRecord { revision: self.revision, txn, t: now, writer, kind: ChangeKind::Put, key: key.to_string(), version, value: Some(value.to_string()) });
        version
    }

    fn apply_delete(&mut self, key: &str, writer: AgentId, now: f64, txn: u64) {
        let version = self.bump_version(key);
        self.revision += 1;
        self.entries.remove(key);
        self.record(OpRecord { revision: self.revision, txn, t: now, writer, kind: ChangeKind::Delete, key: key.to_string(), version, value: None });
    }

    fn record(&mut self, rec: OpRecord) {
        for w in self.watches.iter_mut() {
            if !rec.key.starts_with(&w.prefix) {
                continue;
            }
            let delay = sample_delivery_delay(&self.net, &mut self.rng);
            let deliver_at = (rec.t + delay).max(w.last_deliver);
            w.last_deliver = deliver_at;
            w.queue.push_back(WatchEvent {
                key: rec.key.clone(),
                kind: rec.kind,
                version: rec.version,
                value: rec.value.clone(),
                revision: rec.revision,
                commit_time: rec.t,
                deliver_at,
            });
        }
        self.log.push(rec);
    }
}

/// Serial replay of a commit log into the resulting key space.
pub fn replay(log: &[OpRecord]) -> BTreeMap<String, StoreEntry> {
    let mut out = BTreeMap::new();
    for r in log {
        match r.kind {
            ChangeKind::Put => {
                out.insert(r.key.clone(), StoreEntry { key: r.key.clone(), value: r.value.clone().unwrap_or_default(), version: r.version, mod_time: r.t });
            }
            ChangeKind::Delete => {
                out.remove(&r.key);
            }
        }
    }
    out
}

/// A subscriber's eventually-consistent copy of the key space, fed by
/// watch events.
#[derive(Debug, Clone, Default)]
pub struct Replica {
    entries: BTreeMap<String, StoreEntry>,
    /// Commit time of the newest applied event.
    pub last_commit: f64,
}

impl Replica {
    /// Initial sync from a full read of the authority.
    pub fn from_entries(entries: &BTreeMap<String, StoreEntry>, now: f64) -> Self {
        Self { entries: entries.clone(), last_commit: now }
    }

    pub fn apply(&mut self, ev: &WatchEvent) {
        match ev.kind {
            ChangeKind::Put => {
                self.entries.insert(
                    ev.key.clone(),
                    StoreEntry { key: ev.key.clone(), value: ev.value.clone().unwrap_or_default(), version: ev.version, mod_time: ev.commit_time },
                );
            }
            ChangeKind::Delete => {
                self.entries.remove(&ev.key);
            }
        }
        self.last_commit = self.last_commit.max(ev.commit_time);
    }

    pub fn get(&self, key: &str) -> Option<&StoreEntry> {
        self.entries.get(key)
    }

    pub fn version(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| e.version)
    }

    pub fn range_read(&self, prefix: &str) -> Vec<StoreEntry> {
        self.entries.range(prefix.to_string()..).take_while(|(k, _)| k.starts_with(prefix)).map(|(_, e)| e.clone()).collect()
    }
}

/// Read access shared by the authoritative store and replicas.
pub trait KvRead {
    fn range_read(&self, prefix: &str) -> Vec<StoreEntry>;
    fn version(&self, key: &str) -> u64;
    fn get(&self, key: &str) -> Option<&StoreEntry>;
}

impl KvRead for Store {
    fn range_read(&self, prefix: &str) -> Vec<StoreEntry> {
        Store::range_read(self, prefix)
    }
    fn version(&self, key: &str) -> u64 {
        Store::version(self, key)
    }
    fn get(&self, key: &str) -> Option<&StoreEntry> {
        Store::get(self, key)
    }
}

impl KvRead for Replica {
    fn range_read(&self, prefix: &str) -> Vec<StoreEntry> {
        Replica::range_read(self, prefix)
    }
    fn version(&self, key: &str) -> u64 {
        Replica::version(self, key)
    }
    fn get(&self, key: &str) -> Option<&StoreEntry> {
        Replica::get(self, key)
    }
}

/// Canonical text encoding: JSON with object keys sorted.
pub fn encode<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("record serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn decode<T: for<'de> Deserialize<'de>>(text: &str) -> Option<T> {
    serde_json::from_str(text).ok()
}
