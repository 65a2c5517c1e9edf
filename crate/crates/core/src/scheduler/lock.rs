//! One-at-a-time FIFO baseline: the whole intersection is a single mutex.

use serde::{Deserialize, Serialize};

use crate::store::{decode, encode, keys, AgentId, CasOutcome, KvRead, Store};

use super::LeaseError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockState {
    pub holder: Option<AgentId>,
    pub fifo_queue: Vec<AgentId>,
}

impl LockState {
    /// Joins the queue unless already holding or queued.
    pub fn request(&mut self, agent: AgentId) {
        if self.holder != Some(agent) && !self.fifo_queue.contains(&agent) {
            self.fifo_queue.push(agent);
        }
    }

    /// Grants iff the lock is free and the agent is at the head of the
    /// queue. An agent not yet queued joins at the tail.
    pub fn acquire(&mut self, agent: AgentId) -> bool {
        if self.holder == Some(agent) {
            return true;
        }
        self.request(agent);
        if self.holder.is_none() && self.fifo_queue.first() == Some(&agent) {
            self.fifo_queue.remove(0);
            self.holder = Some(agent);
            return true;
        }
        false
    }

    pub fn release(&mut self, agent: AgentId) -> Result<(), LeaseError> {
        if self.holder != Some(agent) {
            return Err(LeaseError::Protocol(format!("agent {agent} released a lock held by {:?}", self.holder)));
        }
        self.holder = None;
        Ok(())
    }

    /// Whether `agent` would be granted right now.
    pub fn grantable(&self, agent: AgentId) -> bool {
        self.holder.is_none() && self.fifo_queue.first().is_none_or(|&h| h == agent)
    }
}

/// Reads the lock record from any view.
pub fn read_lock<V: KvRead + ?Sized>(view: &V, block: &str) -> (LockState, u64) {
    let key = keys::lock(block);
    let state = view.get(&key).and_then(|e| decode(&e.value)).unwrap_or_default();
    (state, view.version(&key))
}

/// Read-modify-CAS against `expected_version`; `false` on a lost race.
fn cas_update(
    store: &mut Store,
    block: &str,
    agent: AgentId,
    now: f64,
    state: LockState,
    expected_version: u64,
) -> Result<bool, LeaseError> {
    let out = store.compare_and_swap(&keys::lock(block), expected_version, &encode(&state), agent, now)?;
    Ok(matches!(out, CasOutcome::Ok(_)))
}

/// Enqueues on the authoritative record, retrying lost races.
pub fn lock_request(store: &mut Store, block: &str, agent: AgentId, now: f64) -> Result<(), LeaseError> {
    loop {
        let (mut state, version) = read_lock(&*store, block);
        if state.holder == Some(agent) || state.fifo_queue.contains(&agent) {
            return Ok(());
        }
        state.request(agent);
        if cas_update(store, block, agent, now, state, version)? {
            return Ok(());
        }
    }
}

/// Attempts the grant when the agent's own view says the lock is free and
/// it is next. The CAS is guarded by the view's version, so acting on a
/// stale view fails and is retried on a later tick.
pub fn lock_acquire<V: KvRead + ?Sized>(store: &mut Store, view: &V, block: &str, agent: AgentId, now: f64) -> Result<bool, LeaseError> {
    let (mut state, version) = read_lock(view, block);
    if state.holder == Some(agent) {
        return Ok(true);
    }
    if !state.grantable(agent) {
        return Ok(false);
    }
    if !state.acquire(agent) {
        return Ok(false);
    }
    cas_update(store, block, agent, now, state, version)
}

pub fn lock_release(store: &mut Store, block: &str, agent: AgentId, now: f64) -> Result<(), LeaseError> {
    loop {
        let (mut state, version) = read_lock(&*store, block);
        state.release(agent)?;
        if cas_update(store, block, agent, now, state, version)? {
            return Ok(());
        }
    }
}
