//! Independent oracles shared by the integration targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use leasesim::geometry::IntersectionModel;
use leasesim::network::{LatencySpec, NetParams};
use leasesim::dynamics::Phase;
use leasesim::scheduler::{Lease, LeaseKind, LeaseStatus};
use leasesim::sim::{Scenario, TraceRecord};
use leasesim::store::{AgentId, Compare, OpRecord, OpResult, PendingOp, Store, StoreOp, TxnOp};
use proptest::prelude::*;

pub const KEYS: [&str; 6] = [
    "intersection/main/leases/a",
    "intersection/main/leases/b",
    "intersection/main/lock",
    "vehicles/1/state",
    "vehicles/2/state",
    "vehicles/3/surrounding",
];

/// Watches opened by [`run_schedule`] before the first step, ids in order.
pub const WATCHES: [(&str, AgentId); 2] = [("intersection/", 1), ("vehicles/", 2)];

#[derive(Debug, Clone)]
pub enum Step {
    Batch(Vec<(AgentId, StoreOp)>),
    Txn { agent: AgentId, compares: Vec<(usize, u64)>, ops: Vec<(usize, Option<String>)> },
}

fn key(i: usize) -> String {
    KEYS[i % KEYS.len()].to_string()
}

fn store_op() -> impl Strategy<Value = StoreOp> {
    prop_oneof![
        (0..KEYS.len(), "[a-z]{1,4}").prop_map(|(k, v)| StoreOp::Put { key: key(k), value: v }),
        (0..KEYS.len(), 0u64..4, "[a-z]{1,4}").prop_map(|(k, e, v)| StoreOp::Cas { key: key(k), expected: e, value: v }),
        (0..KEYS.len()).prop_map(|k| StoreOp::Delete { key: key(k) }),
        prop_oneof![Just("intersection/"), Just("vehicles/"), Just("vehicles/1/")].prop_map(|p| StoreOp::Range { prefix: p.to_string() }),
    ]
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => prop::collection::vec((1u32..4, store_op()), 1..5).prop_map(Step::Batch),
        1 => (
            1u32..4,
            prop::collection::vec((0..KEYS.len(), 0u64..4), 0..3),
            prop::collection::vec((0..KEYS.len(), prop::option::of("[a-z]{1,3}")), 1..4),
        )
            .prop_map(|(agent, compares, ops)| Step::Txn { agent, compares, ops }),
    ]
}

pub fn schedule() -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec(step(), 1..25)
}

/// Plain map model of the store: versions keep counting across deletes.
#[derive(Debug, Default)]
pub struct ModelStore {
    pub data: BTreeMap<String, (String, u64)>,
    last: BTreeMap<String, u64>,
}

impl ModelStore {
    fn allowed(key: &str, writer: AgentId) -> bool {
        match key.strip_prefix("vehicles/") {
            Some(rest) => rest.split('/').next() == Some(writer.to_string().as_str()),
            None => key.starts_with("intersection/"),
        }
    }

    fn version(&self, key: &str) -> u64 {
        self.data.get(key).map_or(0, |(_, v)| *v)
    }

    fn write(&mut self, key: &str, value: &str) -> u64 {
        let v = self.last.entry(key.to_string()).or_insert(0);
        *v += 1;
        self.data.insert(key.to_string(), (value.to_string(), *v));
        *v
    }

    fn remove(&mut self, key: &str) {
        *self.last.entry(key.to_string()).or_insert(0) += 1;
        self.data.remove(key);
    }

    /// Expected outcome rendered as text, or `None` for a rejected write.
    pub fn apply(&mut self, agent: AgentId, op: &StoreOp) -> Option<String> {
        match op {
            StoreOp::Put { key, value } => Self::allowed(key, agent).then(|| format!("put {}", self.write(key, value))),
            StoreOp::Cas { key, expected, value } => Self::allowed(key, agent).then(|| {
                let cur = self.version(key);
                if cur == *expected {
                    format!("cas ok {}", self.write(key, value))
                } else {
                    format!("cas conflict {cur}")
                }
            }),
            StoreOp::Delete { key } => Self::allowed(key, agent).then(|| {
                let present = self.data.contains_key(key);
                if present {
                    self.remove(key);
                }
                format!("delete {present}")
            }),
            StoreOp::Range { prefix } => Some(format!(
                "range {:?}",
                self.data.iter().filter(|(k, _)| k.starts_with(prefix.as_str())).map(|(k, (v, n))| (k.clone(), v.clone(), *n)).collect::<Vec<_>>()
            )),
        }
    }

    pub fn txn(&mut self, agent: AgentId, compares: &[(String, u64)], ops: &[TxnOp]) -> Option<bool> {
        if !ops.iter().all(|o| Self::allowed(o.key(), agent)) {
            return None;
        }
        if compares.iter().any(|(k, e)| self.version(k) != *e) {
            return Some(false);
        }
        for op in ops {
            match op {
                TxnOp::Put { key, value } => {
                    self.write(key, value);
                }
                TxnOp::Delete { key } => {
                    if self.data.contains_key(key) {
                        self.remove(key);
                    }
                }
            }
        }
        Some(true)
    }
}

pub fn render(r: &OpResult) -> String {
    match r {
        OpResult::Put(v) => format!("put {v}"),
        OpResult::Cas(leasesim::store::CasOutcome::Ok(v)) => format!("cas ok {v}"),
        OpResult::Cas(leasesim::store::CasOutcome::Conflict(v)) => format!("cas conflict {v}"),
        OpResult::Delete(b) => format!("delete {b}"),
        OpResult::Range(es) => format!("range {:?}", es.iter().map(|e| (e.key.clone(), e.value.clone(), e.version)).collect::<Vec<_>>()),
    }
}

/// Runs a schedule against both the store and the model, one step per
/// 10 ms tick. Returns the store and a list of disagreements.
pub fn run_schedule(steps: &[Step]) -> (Store, Vec<String>) {
    let mut store = Store::new(NetParams { sync_latency: LatencySpec::Fixed { seconds: 0.02 }, ..NetParams::default() }, 3);
    for (prefix, subscriber) in WATCHES {
        store.watch(prefix, subscriber);
    }
    let mut model = ModelStore::default();
    let mut errors = Vec::new();
    for (i, st) in steps.iter().enumerate() {
        let t = i as f64 * 0.01;
        match st {
            Step::Batch(ops) => {
                let pending: Vec<PendingOp> = ops.iter().map(|(a, op)| PendingOp { t, agent: *a, op: op.clone() }).collect();
                let got = store.commit_batch(&pending);
                // model commits in agent order, ties in submission order
                let mut order: Vec<usize> = (0..ops.len()).collect();
                order.sort_by_key(|&j| (ops[j].0, j));
                let mut want = vec![None; ops.len()];
                for j in order {
                    want[j] = Some(model.apply(ops[j].0, &ops[j].1));
                }
                for (j, (g, w)) in got.iter().zip(want).enumerate() {
                    let g = g.as_ref().ok().map(render);
                    if g != w.flatten() {
                        errors.push(format!("step {i} op {j}: store {g:?}"));
                    }
                }
            }
            Step::Txn { agent, compares, ops } => {
                let cmp: Vec<(String, u64)> = compares.iter().map(|(k, e)| (key(*k), *e)).collect();
                let tops: Vec<TxnOp> = ops
                    .iter()
                    .map(|(k, v)| match v {
                        Some(v) => TxnOp::Put { key: key(*k), value: v.clone() },
                        None => TxnOp::Delete { key: key(*k) },
                    })
                    .collect();
                let compares: Vec<Compare> = cmp.iter().map(|(k, e)| Compare { key: k.clone(), expected: *e }).collect();
                let got = store.txn(&compares, &tops, *agent, t).ok().map(|o| o.is_committed());
                let want = model.txn(*agent, &cmp, &tops);
                if got != want {
                    errors.push(format!("step {i} txn: store {got:?} model {want:?}"));
                }
            }
        }
    }
    let model_view: BTreeMap<String, (String, u64)> = store.entries().iter().map(|(k, e)| (k.clone(), (e.value.clone(), e.version))).collect();
    if model_view != model.data {
        errors.push("final contents differ from the model".into());
    }
    (store, errors)
}

pub fn lease(holder: AgentId, path: &str, block: &str, t_start: f64, t_end: f64) -> Lease {
    Lease {
        lease_id: format!("v{holder}-{}", (t_start * 1000.0).round()),
        holder_id: holder,
        registrar: holder,
        block_id: block.into(),
        path_id: path.into(),
        t_start,
        t_end,
        kind: LeaseKind::V2v,
        status: LeaseStatus::Active,
    }
}

/// Random lease sets on the single-block four-way model.
pub fn lease_set() -> impl Strategy<Value = Vec<Lease>> {
    let paths: Vec<String> = IntersectionModel::four_way().paths().iter().map(|p| p.id().to_string()).collect();
    prop::collection::vec((0..paths.len(), 0u32..8000, 50u32..2500, prop::bool::weighted(0.85)), 0..8).prop_map(move |raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (p, start_ms, len_ms, active))| {
                let mut l = lease(i as AgentId + 10, &paths[p], "main", start_ms as f64 / 1000.0, (start_ms + len_ms) as f64 / 1000.0);
                if !active {
                    l.status = LeaseStatus::Cancelled;
                }
                l
            })
            .collect()
    })
}

/// Scans candidate starts on a 1 ms grid for the first conflict-free window.
/// Inputs are whole milliseconds, so the integer scan is exact.
pub fn brute_force_slot(duration: f64, not_before: f64, existing: &[Lease], path_id: &str, model: &IntersectionModel) -> f64 {
    let ms = |x: f64| (x * 1000.0).round() as i64;
    let d = ms(duration);
    let busy: Vec<(i64, i64)> = existing
        .iter()
        .filter(|l| l.status == LeaseStatus::Active && l.block_id == "main" && model.paths_conflict(path_id, &l.path_id).unwrap())
        .map(|l| (ms(l.t_start), ms(l.t_end)))
        .collect();
    let mut k = ms(not_before);
    while busy.iter().any(|&(a, b)| a < k + d && k < b) {
        k += 1;
    }
    k as f64 / 1000.0
}

pub const BUNDLED: [&str; 4] = ["experiment1", "experiment2", "experiment3", "experiment4"];

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

pub fn bundled(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("bundled scenario loads")
}

/// Replays the commit log one transaction at a time and checks every pair of
/// live, active leases of different holders on the same block for a shared
/// instant. Same block implies conflict, so paths are only checked to cross it.
pub fn audit_commits(log: &[OpRecord], model: &IntersectionModel) -> Result<usize, String> {
    let mut live: BTreeMap<String, Lease> = BTreeMap::new();
    let mut checked = 0;
    for group in log.chunk_by(|a, b| a.txn == b.txn) {
        for r in group.iter().filter(|r| r.key.starts_with("intersection/") && r.key.contains("/leases/")) {
            match &r.value {
                Some(v) => {
                    let l: Lease = serde_json::from_str(v).map_err(|e| format!("rev {}: bad lease record: {e}", r.revision))?;
                    live.insert(r.key.clone(), l);
                }
                None => {
                    live.remove(&r.key);
                }
            }
        }
        let active: Vec<&Lease> = live.values().filter(|l| l.status == LeaseStatus::Active).collect();
        for (i, a) in active.iter().enumerate() {
            for b in &active[i + 1..] {
                if a.holder_id == b.holder_id || a.block_id != b.block_id {
                    continue;
                }
                let cross = |l: &Lease| model.path(&l.path_id).map(|p| p.crosses(&l.block_id)).unwrap_or(false);
                if cross(a) && cross(b) && a.t_start < b.t_end && b.t_start < a.t_end {
                    return Err(format!("txn {}: {} and {} overlap", group[0].txn, a.lease_id, b.lease_id));
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// Tick-state records as `(t, id, s, phase)` rows in trace order.
pub fn tick_rows(records: &[TraceRecord]) -> Vec<(f64, AgentId, f64, Phase)> {
    records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::TickState { t, vehicles } => Some(vehicles.iter().map(|v| (*t, v.id, v.s, v.phase)).collect::<Vec<_>>()),
            _ => None,
        })
        .flatten()
        .collect()
}

/// Largest per-tick advance and the first backwards phase step, if any.
pub fn motion_audit(records: &[TraceRecord]) -> (f64, Option<String>) {
    let mut last: BTreeMap<AgentId, (f64, f64, Phase)> = BTreeMap::new();
    let mut max_step = 0.0_f64;
    let mut backwards = None;
    for (t, id, s, phase) in tick_rows(records) {
        if let Some(&(t0, s0, p0)) = last.get(&id) {
            if (t - t0) < 0.011 {
                max_step = max_step.max((s - s0).abs());
            }
            if phase < p0 && backwards.is_none() {
                backwards = Some(format!("vehicle {id} went {p0:?} -> {phase:?} at {t}"));
            }
        }
        last.insert(id, (t, s, phase));
    }
    (max_step, backwards)
}
