//! Lease lifecycle operations against the coordination store.
//!
//! Every lease mutation on a block bumps `intersection/<block>/seq` inside
//! the same transaction and guards on its version, so a writer acting on a
//! stale view loses the race and re-reads.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::geometry::IntersectionModel;
use crate::store::{decode, encode, keys, AgentId, Compare, KvRead, Store, TxnOp, TxnOutcome};

use super::lease::*;
use super::LeaseError;

/// All lease records visible in one view, with their key versions.
#[derive(Debug, Clone, Default)]
pub struct LeaseTable {
    pub leases: Vec<Lease>,
    versions: BTreeMap<String, u64>,
    seq: BTreeMap<String, u64>,
}

impl LeaseTable {
    pub fn read<V: KvRead + ?Sized>(view: &V, model: &IntersectionModel) -> Self {
        let mut t = LeaseTable::default();
        for b in model.blocks() {
            t.seq.insert(b.id.clone(), view.version(&keys::lease_seq(&b.id)));
            for e in view.range_read(&keys::lease_prefix(&b.id)) {
                if let Some(l) = decode::<Lease>(&e.value) {
                    t.versions.insert(e.key.clone(), e.version);
                    t.leases.push(l);
                }
            }
        }
        t
    }

    pub fn held_by(&self, agent: AgentId) -> Vec<Lease> {
        self.leases.iter().filter(|l| l.holder_id == agent && l.kind == LeaseKind::V2v).cloned().collect()
    }

    pub fn proxy_for(&self, observed: AgentId) -> Vec<Lease> {
        let id = proxy_id(observed);
        self.leases.iter().filter(|l| l.lease_id == id).cloned().collect()
    }

    pub fn version_of(&self, lease: &Lease) -> u64 {
        self.versions.get(&keys::lease(&lease.block_id, &lease.lease_id)).copied().unwrap_or(0)
    }

    pub fn seq(&self, block: &str) -> u64 {
        self.seq.get(block).copied().unwrap_or(0)
    }

    fn without(&self, skip: &[Lease]) -> Vec<Lease> {
        let gone: HashSet<(&str, &str)> = skip.iter().map(|l| (l.block_id.as_str(), l.lease_id.as_str())).collect();
        self.leases.iter().filter(|l| !gone.contains(&(l.block_id.as_str(), l.lease_id.as_str()))).cloned().collect()
    }
}

pub fn proxy_id(observed: AgentId) -> String {
    format!("proxy-{observed}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseEventKind {
    Applied,
    Postponed,
    BroughtForward,
    Extended,
    Cancelled,
    Released,
    ProxyCreated,
    ProxyRefreshed,
    ProxyCancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaseEvent {
    pub t: f64,
    pub kind: LeaseEventKind,
    pub actor: AgentId,
    pub lease: Lease,
}

/// Everything a lease operation touches during one decision step.
pub struct LeaseCtx<'a> {
    pub store: &'a mut Store,
    pub model: &'a IntersectionModel,
    pub params: &'a LeaseParams,
    pub now: f64,
    pub events: &'a mut Vec<LeaseEvent>,
}

impl LeaseCtx<'_> {
    fn emit(&mut self, kind: LeaseEventKind, actor: AgentId, lease: &Lease) {
        self.events.push(LeaseEvent { t: self.now, kind, actor, lease: lease.clone() });
    }

    fn authority(&self) -> LeaseTable {
        LeaseTable::read(&*self.store, self.model)
    }

    /// One guarded write: every touched block's seq must be unchanged and
    /// every `guards` key must still have the version seen in `table`.
    fn commit(&mut self, writer: AgentId, table: &LeaseTable, guards: &[(String, u64)], puts: &[Lease], deletes: &[Lease]) -> Result<bool, LeaseError> {
        let blocks: BTreeSet<&str> = puts.iter().chain(deletes).map(|l| l.block_id.as_str()).collect();
        let mut compares: Vec<Compare> = blocks.iter().map(|b| Compare { key: keys::lease_seq(b), expected: table.seq(b) }).collect();
        compares.extend(guards.iter().map(|(k, v)| Compare { key: k.clone(), expected: *v }));
        let mut ops: Vec<TxnOp> = blocks.iter().map(|b| TxnOp::Put { key: keys::lease_seq(b), value: (table.seq(b) + 1).to_string() }).collect();
        ops.extend(puts.iter().map(|l| TxnOp::Put { key: keys::lease(&l.block_id, &l.lease_id), value: encode(l) }));
        ops.extend(deletes.iter().map(|l| TxnOp::Delete { key: keys::lease(&l.block_id, &l.lease_id) }));
        Ok(matches!(self.store.txn(&compares, &ops, writer, self.now)?, TxnOutcome::Committed { .. }))
    }
}

fn key_of(l: &Lease) -> String {
    keys::lease(&l.block_id, &l.lease_id)
}

fn make_leases(holder: AgentId, registrar: AgentId, lease_id: &str, path_id: &str, occ: &Occupancy, kind: LeaseKind) -> Vec<Lease> {
    occ.blocks
        .iter()
        .map(|w| Lease {
            lease_id: lease_id.to_string(),
            holder_id: holder,
            registrar,
            block_id: w.block_id.clone(),
            path_id: path_id.to_string(),
            t_start: w.start,
            t_end: w.end,
            kind,
            status: LeaseStatus::Active,
        })
        .collect()
}

fn conflicting(model: &IntersectionModel, a: &Lease, b: &Lease) -> bool {
    a.block_id == b.block_id && model.paths_conflict(&a.path_id, &b.path_id).unwrap_or(true)
}

/// Holders whose leases may not move: proxies, and V2V holders already
/// inside any of their windows.
fn pinned_holders(leases: &[Lease], now: f64) -> HashSet<(AgentId, LeaseKind)> {
    leases.iter().filter(|l| l.kind == LeaseKind::NonV2vProxy || l.t_start <= now).map(|l| (l.holder_id, l.kind)).collect()
}

/// Every lease of each V2V holder that has a lease in `hits`.
fn groups_of(leases: &[Lease], hits: &[&Lease]) -> Vec<Lease> {
    let holders: HashSet<AgentId> = hits.iter().map(|l| l.holder_id).collect();
    leases.iter().filter(|l| l.kind == LeaseKind::V2v && holders.contains(&l.holder_id)).cloned().collect()
}

/// Registers a lease at the earliest free slot at or after the requested
/// entry. The first attempt trusts `view`; retries re-read the authority.
pub fn apply_for_lease<V: KvRead + ?Sized>(
    ctx: &mut LeaseCtx,
    agent: AgentId,
    lease_id: &str,
    path_id: &str,
    occ: &Occupancy,
    view: Option<&V>,
) -> Result<Vec<Lease>, LeaseError> {
    let attempts = ctx.params.max_retries.max(1);
    for attempt in 0..attempts {
        let table = match (attempt, view) {
            (0, Some(v)) => LeaseTable::read(v, ctx.model),
            _ => ctx.authority(),
        };
        let others = table.without(&table.held_by(agent));
        let t0 = earliest_joint_slot(occ, occ.t_enter, &others, path_id, ctx.model);
        let leases = make_leases(agent, agent, lease_id, path_id, &occ.moved_to(t0), LeaseKind::V2v);
        if ctx.commit(agent, &table, &[], &leases, &[])? {
            for l in &leases {
                ctx.emit(LeaseEventKind::Applied, agent, l);
                if t0 > occ.t_enter + 1e-9 {
                    ctx.emit(LeaseEventKind::Postponed, agent, l);
                }
            }
            return Ok(leases);
        }
    }
    Err(LeaseError::RetriesExhausted(attempts))
}

/// Moves the agent's lease to an earlier free window if one opened up and
/// the vehicle can still make it. A lost race just skips this tick.
pub fn try_bring_forward(
    ctx: &mut LeaseCtx,
    agent: AgentId,
    own: &[Lease],
    occ_now: &Occupancy,
    table: &LeaseTable,
) -> Result<Option<Vec<Lease>>, LeaseError> {
    let Some(current) = own.iter().map(|l| l.t_start).min_by(f64::total_cmp) else {
        return Ok(None);
    };
    if occ_now.t_enter + ctx.params.min_bring_forward_gain >= current {
        return Ok(None);
    }
    if own.iter().any(|l| table.version_of(l) == 0) {
        // the view has not caught up with our own lease yet
        return Ok(None);
    }
    // never shrink a window relative to what is already granted
    let mut shape = occ_now.clone();
    for w in &mut shape.blocks {
        if let Some(l) = own.iter().find(|l| l.block_id == w.block_id) {
            w.end = w.end.max(w.start + l.duration());
        }
    }
    shape.t_exit = shape.blocks.iter().map(|w| w.end).fold(shape.t_enter, f64::max);
    let path_id = own[0].path_id.as_str();
    let others = table.without(own);
    let t0 = earliest_joint_slot(&shape, shape.t_enter, &others, path_id, ctx.model);
    if t0 + ctx.params.min_bring_forward_gain >= current {
        return Ok(None);
    }
    let moved = make_leases(agent, agent, &own[0].lease_id, path_id, &shape.moved_to(t0), LeaseKind::V2v);
    let guards: Vec<(String, u64)> = own.iter().map(|l| (key_of(l), table.version_of(l))).collect();
    if !ctx.commit(agent, table, &guards, &moved, &[])? {
        return Ok(None);
    }
    for l in &moved {
        ctx.emit(LeaseEventKind::BroughtForward, agent, l);
    }
    Ok(Some(moved))
}

/// Crossing-phase extension. Triggers when the window is about to close or
/// the vehicle is predicted to leave after it. Conflicting V2V leases that
/// fall inside the extension are shifted after it in their original order;
/// leases that cannot move cap the extension instead.
pub fn extend_if_expiring<V: KvRead + ?Sized>(
    ctx: &mut LeaseCtx,
    agent: AgentId,
    lease: &Lease,
    predicted_exit: Option<f64>,
    view: Option<&V>,
) -> Result<Option<Lease>, LeaseError> {
    let late = predicted_exit.is_some_and(|t| t > lease.t_end);
    if lease.t_end - ctx.now >= ctx.params.extension_threshold && !late {
        return Ok(None);
    }
    for attempt in 0..ctx.params.max_retries.max(1) {
        let table = match (attempt, view) {
            (0, Some(v)) => LeaseTable::read(v, ctx.model),
            _ => ctx.authority(),
        };
        let Some(cur) = table.leases.iter().find(|l| l.lease_id == lease.lease_id && l.block_id == lease.block_id).cloned() else {
            if attempt == 0 && view.is_some() {
                continue;
            }
            return Ok(None);
        };
        let pinned = pinned_holders(&table.leases, ctx.now);
        let mut new_end = cur.t_end + ctx.params.extension_quantum;
        for l in table.leases.iter().filter(|l| l.holder_id != agent && conflicting(ctx.model, l, &cur)) {
            if pinned.contains(&(l.holder_id, l.kind)) && l.t_start >= cur.t_end - 1e-9 {
                new_end = new_end.min(l.t_start);
            }
        }
        if new_end <= cur.t_end + 1e-9 {
            return Ok(None);
        }
        let extended = Lease { t_end: new_end, ..cur.clone() };
        let hits: Vec<&Lease> = table
            .leases
            .iter()
            .filter(|l| {
                l.kind == LeaseKind::V2v
                    && l.holder_id != agent
                    && !pinned.contains(&(l.holder_id, l.kind))
                    && conflicting(ctx.model, l, &cur)
                    && l.overlaps(cur.t_start, new_end)
            })
            .collect();
        let movers = groups_of(&table.leases, &hits);
        let mut skip = movers.clone();
        skip.push(cur.clone());
        let mut fixed = table.without(&skip);
        fixed.push(extended.clone());
        let moved = reschedule(&fixed, &movers, ctx.model);
        let mut guards = vec![(key_of(&cur), table.version_of(&cur))];
        guards.extend(movers.iter().map(|l| (key_of(l), table.version_of(l))));
        let mut puts = vec![extended.clone()];
        puts.extend(moved.iter().cloned());
        if ctx.commit(agent, &table, &guards, &puts, &[])? {
            ctx.emit(LeaseEventKind::Extended, agent, &extended);
            for (m, old) in moved.iter().zip(&movers) {
                if m.t_start != old.t_start {
                    ctx.emit(LeaseEventKind::Postponed, agent, m);
                }
            }
            return Ok(Some(extended));
        }
    }
    Err(LeaseError::RetriesExhausted(ctx.params.max_retries.max(1)))
}

fn delete_present(ctx: &mut LeaseCtx, agent: AgentId, leases: &[Lease], kind: LeaseEventKind) -> Result<bool, LeaseError> {
    let present: Vec<Lease> = leases.iter().filter(|l| ctx.store.get(&key_of(l)).is_some()).cloned().collect();
    if present.is_empty() {
        return Ok(false);
    }
    let ops: Vec<TxnOp> = present.iter().map(|l| TxnOp::Delete { key: key_of(l) }).collect();
    ctx.store.txn(&[], &ops, agent, ctx.now)?;
    for l in &present {
        let gone = Lease { status: LeaseStatus::Cancelled, ..l.clone() };
        ctx.emit(kind, agent, &gone);
    }
    Ok(true)
}

/// Drops the agent's leases once it has left the intersection. Returns
/// whether anything was still registered.
pub fn release_after_exit(ctx: &mut LeaseCtx, agent: AgentId, own: &[Lease]) -> Result<bool, LeaseError> {
    delete_present(ctx, agent, own, LeaseEventKind::Released)
}

/// Cancels an unreachable lease and registers a fresh one against the
/// authoritative lease set.
pub fn cancel_and_reapply(
    ctx: &mut LeaseCtx,
    agent: AgentId,
    own: &[Lease],
    new_lease_id: &str,
    path_id: &str,
    occ: &Occupancy,
) -> Result<Vec<Lease>, LeaseError> {
    delete_present(ctx, agent, own, LeaseEventKind::Cancelled)?;
    apply_for_lease::<Store>(ctx, agent, new_lease_id, path_id, occ, None)
}

pub fn cancel_lease(ctx: &mut LeaseCtx, agent: AgentId, own: &[Lease]) -> Result<bool, LeaseError> {
    delete_present(ctx, agent, own, LeaseEventKind::Cancelled)
}

/// Registers a priority lease on behalf of a participant that cannot
/// negotiate itself. Conflicting V2V leases that have not started are
/// shifted after it; windows already in progress and other proxies push
/// the proxy later instead. Returns `None` when another observer already
/// holds the proxy.
pub fn proxy_lease_for_non_v2v<V: KvRead + ?Sized>(
    ctx: &mut LeaseCtx,
    observer: AgentId,
    observed: AgentId,
    path_id: &str,
    occ: &Occupancy,
    view: &V,
) -> Result<Option<Vec<Lease>>, LeaseError> {
    write_proxy(ctx, observer, observed, path_id, occ, view, false)
}

/// Re-times a proxy this observer owns from a newer track estimate.
/// Changes smaller than `min_bring_forward_gain` are ignored.
pub fn refresh_proxy<V: KvRead + ?Sized>(
    ctx: &mut LeaseCtx,
    observer: AgentId,
    observed: AgentId,
    path_id: &str,
    occ: &Occupancy,
    view: &V,
) -> Result<Option<Vec<Lease>>, LeaseError> {
    write_proxy(ctx, observer, observed, path_id, occ, view, true)
}

pub fn cancel_proxy(ctx: &mut LeaseCtx, observer: AgentId, observed: AgentId) -> Result<bool, LeaseError> {
    let existing = ctx.authority().proxy_for(observed);
    delete_present(ctx, observer, &existing, LeaseEventKind::ProxyCancelled)
}

fn write_proxy<V: KvRead + ?Sized>(
    ctx: &mut LeaseCtx,
    observer: AgentId,
    observed: AgentId,
    path_id: &str,
    occ: &Occupancy,
    view: &V,
    refresh: bool,
) -> Result<Option<Vec<Lease>>, LeaseError> {
    let id = proxy_id(observed);
    for attempt in 0..ctx.params.max_retries.max(1) {
        let table = if attempt == 0 { LeaseTable::read(view, ctx.model) } else { ctx.authority() };
        let existing = table.proxy_for(observed);
        if refresh {
            if existing.is_empty() || existing.iter().any(|l| l.registrar != observer) {
                return Ok(None);
            }
            let same = occ.blocks.iter().all(|w| {
                existing.iter().any(|l| {
                    l.block_id == w.block_id
                        && (l.t_start - w.start).abs() < ctx.params.min_bring_forward_gain
                        && (l.t_end - w.end).abs() < ctx.params.min_bring_forward_gain
                })
            });
            if same && existing.len() == occ.blocks.len() {
                return Ok(None);
            }
        } else if !existing.is_empty() {
            return Ok(None);
        }
        let others = table.without(&existing);
        let pinned = pinned_holders(&others, ctx.now);
        let immovable: Vec<Lease> = others.iter().filter(|l| pinned.contains(&(l.holder_id, l.kind))).cloned().collect();
        let t0 = earliest_joint_slot(occ, occ.t_enter, &immovable, path_id, ctx.model);
        let proxy = make_leases(observed, observer, &id, path_id, &occ.moved_to(t0), LeaseKind::NonV2vProxy);
        let hits: Vec<&Lease> = others
            .iter()
            .filter(|l| {
                l.kind == LeaseKind::V2v
                    && !pinned.contains(&(l.holder_id, l.kind))
                    && proxy.iter().any(|p| conflicting(ctx.model, l, p) && l.overlaps(p.t_start, p.t_end))
            })
            .collect();
        let movers = groups_of(&others, &hits);
        let mut fixed: Vec<Lease> = LeaseTable { leases: others.clone(), ..Default::default() }.without(&movers);
        fixed.extend(proxy.iter().cloned());
        let moved = reschedule(&fixed, &movers, ctx.model);
        let mut guards: Vec<(String, u64)> = movers.iter().map(|l| (key_of(l), table.version_of(l))).collect();
        if refresh {
            guards.extend(existing.iter().map(|l| (key_of(l), table.version_of(l))));
        } else {
            guards.extend(proxy.iter().map(|l| (key_of(l), 0)));
        }
        let stale: Vec<Lease> = existing.iter().filter(|e| !proxy.iter().any(|p| p.block_id == e.block_id)).cloned().collect();
        let mut puts = proxy.clone();
        puts.extend(moved.iter().cloned());
        if ctx.commit(observer, &table, &guards, &puts, &stale)? {
            let kind = if refresh { LeaseEventKind::ProxyRefreshed } else { LeaseEventKind::ProxyCreated };
            for p in &proxy {
                ctx.emit(kind, observer, p);
            }
            for (m, old) in moved.iter().zip(&movers) {
                if m.t_start != old.t_start {
                    ctx.emit(LeaseEventKind::Postponed, observer, m);
                }
            }
            return Ok(Some(proxy));
        }
        if !refresh && ctx.store.get(&key_of(&proxy[0])).is_some() {
            // another observer won
            return Ok(None);
        }
    }
    Err(LeaseError::RetriesExhausted(ctx.params.max_retries.max(1)))
}

/// Replays a commit log and reports the first commit after which two
/// conflicting active leases overlap.
pub fn audit_lease_log(log: &[crate::store::OpRecord], model: &IntersectionModel) -> Result<(), String> {
    let mut live: BTreeMap<String, Lease> = BTreeMap::new();
    let mut i = 0;
    while i < log.len() {
        let txn = log[i].txn;
        let mut touched = false;
        while i < log.len() && log[i].txn == txn {
            let r = &log[i];
            if r.key.contains("/leases/") {
                touched = true;
                match r.value.as_deref().and_then(decode::<Lease>) {
                    Some(l) => {
                        live.insert(r.key.clone(), l);
                    }
                    None => {
                        live.remove(&r.key);
                    }
                }
            }
            i += 1;
        }
        if touched {
            let all: Vec<Lease> = live.values().cloned().collect();
            if let Some((a, b)) = find_overlap(&all, model) {
                return Err(format!(
                    "txn {txn}: {} [{:.3},{:.3}) overlaps {} [{:.3},{:.3}) on {}",
                    a.lease_id, a.t_start, a.t_end, b.lease_id, b.t_start, b.t_end, a.block_id
                ));
            }
        }
    }
    Ok(())
}
