mod common;

use std::collections::VecDeque;

use common::{brute_force_slot, lease_set};
use leasesim::geometry::{GeometryConfig, IntersectionModel};
use leasesim::scheduler::{
    apply_for_lease, cancel_lease, earliest_slot, find_overlap, try_bring_forward, BlockWindow, LeaseCtx, LeaseParams, LeaseTable, LockState, Occupancy,
};
use leasesim::store::{AgentId, Store};
use proptest::prelude::*;

fn occupancy(start: f64, len: f64) -> Occupancy {
    Occupancy { t_enter: start, t_exit: start + len, blocks: vec![BlockWindow { block_id: "main".into(), start, end: start + len }] }
}

#[test]
fn conflict_relation_is_symmetric() {
    for m in [IntersectionModel::four_way(), IntersectionModel::build(&GeometryConfig::four_way_grid(2)).unwrap()] {
        for a in m.paths() {
            for b in m.paths() {
                assert_eq!(m.paths_conflict(a.id(), b.id()).unwrap(), m.paths_conflict(b.id(), a.id()).unwrap(), "{} {}", a.id(), b.id());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn earliest_slot_matches_millisecond_scan(
        existing in lease_set(),
        path in 0usize..12,
        duration_ms in 50u32..2500,
        not_before_ms in 0u32..9000,
    ) {
        let m = IntersectionModel::four_way();
        let path_id = m.paths()[path].id().to_string();
        let (d, nb) = (duration_ms as f64 / 1000.0, not_before_ms as f64 / 1000.0);
        let (s, e) = earliest_slot(d, nb, &existing, &path_id, "main", &m);
        let want = brute_force_slot(d, nb, &existing, &path_id, &m);
        prop_assert!((s - want).abs() < 1e-9, "earliest_slot {s}, scan {want}");
        prop_assert!((e - s - d).abs() < 1e-9);
    }

    #[test]
    fn bring_forward_never_moves_later(
        others in prop::collection::vec((0u32..4000, 300u32..1500), 1..5),
        own_len_ms in 300u32..1500,
        cancel_mask in prop::collection::vec(any::<bool>(), 5),
        now_ms in 0u32..2000,
        want_ms in 0u32..4000,
    ) {
        let m = IntersectionModel::four_way();
        let params = LeaseParams::default();
        let mut store = Store::default();
        let mut events = Vec::new();
        let paths = ["west_straight", "east_left", "north_straight", "west_left", "east_straight"];
        let mut held = Vec::new();
        for (i, (start, len)) in others.iter().enumerate() {
            let mut ctx = LeaseCtx { store: &mut store, model: &m, params: &params, now: 0.0, events: &mut events };
            let occ = occupancy(*start as f64 / 1000.0, *len as f64 / 1000.0);
            let id = 10 + i as AgentId;
            let l = apply_for_lease::<Store>(&mut ctx, id, &format!("v{id}-1"), paths[i], &occ, None).unwrap();
            held.push((id, l));
        }
        let mut ctx = LeaseCtx { store: &mut store, model: &m, params: &params, now: 0.0, events: &mut events };
        let own = apply_for_lease::<Store>(&mut ctx, 1, "v1-1", "south_straight", &occupancy(0.0, own_len_ms as f64 / 1000.0), None).unwrap();
        let before = own[0].t_start;
        for ((id, l), cancel) in held.iter().zip(&cancel_mask) {
            if *cancel {
                let mut ctx = LeaseCtx { store: &mut store, model: &m, params: &params, now: 0.0, events: &mut events };
                cancel_lease(&mut ctx, *id, l).unwrap();
            }
        }
        let table = LeaseTable::read(&store, &m);
        let now = now_ms as f64 / 1000.0;
        let mut ctx = LeaseCtx { store: &mut store, model: &m, params: &params, now, events: &mut events };
        let moved = try_bring_forward(&mut ctx, 1, &own, &occupancy(want_ms as f64 / 1000.0, own_len_ms as f64 / 1000.0), &table).unwrap();
        if let Some(moved) = moved {
            prop_assert!(moved[0].t_start <= before, "{} -> {}", before, moved[0].t_start);
        }
        let after = LeaseTable::read(&store, &m);
        prop_assert!(find_overlap(&after.leases, &m).is_none());
    }

    #[test]
    fn lock_grants_follow_arrival_order(script in prop::collection::vec((1u32..6, 0u8..3), 1..60)) {
        let mut lock = LockState::default();
        let mut queue: VecDeque<AgentId> = VecDeque::new();
        let mut holder: Option<AgentId> = None;
        for (agent, action) in script {
            match action {
                0 => {
                    lock.request(agent);
                    if holder != Some(agent) && !queue.contains(&agent) {
                        queue.push_back(agent);
                    }
                }
                1 => {
                    let got = lock.acquire(agent);
                    if holder != Some(agent) && !queue.contains(&agent) {
                        queue.push_back(agent);
                    }
                    let want = holder == Some(agent) || (holder.is_none() && queue.front() == Some(&agent));
                    if want && holder != Some(agent) {
                        queue.pop_front();
                        holder = Some(agent);
                    }
                    prop_assert_eq!(got, want);
                }
                _ => {
                    let r = lock.release(agent);
                    prop_assert_eq!(r.is_ok(), holder == Some(agent));
                    if holder == Some(agent) {
                        holder = None;
                    }
                }
            }
            prop_assert_eq!(lock.holder, holder);
            prop_assert_eq!(&lock.fifo_queue, &queue.iter().copied().collect::<Vec<_>>());
            prop_assert!(lock.holder.is_none_or(|h| !lock.fifo_queue.contains(&h)));
        }
    }
}
