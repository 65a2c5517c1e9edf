//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one verdict line; the process fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{audit_commits, brute_force_slot, bundled, lease_set, run_schedule, schedule, BUNDLED};
use leasesim::dynamics::{controller_step, plant_step, MotorState, VehicleParams};
use leasesim::geometry::{IntersectionModel, Vec2};
use leasesim::network::{aggregate_bandwidth, max_supported_vehicles, LatencySpec, NetParams};
use leasesim::perception::{is_spd, kalman_update, KalmanNoise, KalmanTrack};
use leasesim::scheduler::{earliest_slot, LeaseEventKind, LeaseKind};
use leasesim::sim::{compare_algorithms, parse_trace, run, Algorithm, Scenario, TraceRecord};
use leasesim::store::replay;
use nalgebra::{Matrix4, SymmetricEigen};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

const SEEDS: std::ops::RangeInclusive<u64> = 1..=100;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn efficiency() -> Verdict {
    let started = Instant::now();
    let seeds: Vec<u64> = SEEDS.collect();
    let rep = compare_algorithms(&bundled("experiment1"), &seeds).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let line = format!("lease/lock ratio {:.3} over {} seeds in {elapsed:.1} s", rep.ratio, rep.rows.len());
    if rep.rows.len() == 100 && rep.ratio <= 0.85 && elapsed < 60.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn safety() -> Verdict {
    let model = IntersectionModel::four_way();
    let mut commits = 0;
    for name in ["experiment1", "experiment2", "experiment4"] {
        for seed in SEEDS {
            let out = run(&Scenario { seed, record_trace: false, ..bundled(name) }).map_err(|e| e.to_string())?;
            let m = &out.metrics;
            if !m.collisions.is_empty() {
                return Err(format!("{name} seed {seed}: collision {:?}", m.collisions[0]));
            }
            if let Some(e) = &m.lease_audit_error {
                return Err(format!("{name} seed {seed}: {e}"));
            }
            commits += audit_commits(&out.store_log, &model).map_err(|e| format!("{name} seed {seed}: {e}"))?;
        }
    }
    Ok(format!("300 runs collision-free, {commits} commits audited"))
}

fn non_v2v_protection() -> Verdict {
    let mut protected = 0;
    let mut crashed = 0;
    for seed in SEEDS {
        let base = Scenario { seed, record_trace: false, ..bundled("experiment3") };
        let on = run(&base).map_err(|e| e.to_string())?.metrics;
        if on.collisions.is_empty() && on.clean() {
            protected += 1;
        }
        let off = run(&Scenario { no_v2v: vec![1], ..base }).map_err(|e| e.to_string())?.metrics;
        if !off.collisions.is_empty() {
            crashed += 1;
        }
    }
    let line = format!("coordinated {protected}/100 collision-free, uncoordinated {crashed}/100 crash");
    if protected == 100 && crashed >= 95 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn recovery() -> Verdict {
    let mut cancelled = 0;
    for seed in SEEDS {
        let scn = Scenario { seed, record_trace: false, ..bundled("experiment4") };
        let out = run(&scn).map_err(|e| e.to_string())?;
        let m = &out.metrics;
        let done = m.vehicles.iter().all(|v| v.completed_at.is_some_and(|t| t <= scn.duration));
        if !done || m.total_completion_time.is_none() {
            return Err(format!("seed {seed}: not every vehicle crossed"));
        }
        // last event per V2V lease id, and every event per holder in order
        let mut last: BTreeMap<&str, (LeaseEventKind, u32)> = BTreeMap::new();
        let mut by_holder: BTreeMap<u32, Vec<(f64, LeaseEventKind)>> = BTreeMap::new();
        for e in out.lease_events.iter().filter(|e| e.lease.kind == LeaseKind::V2v) {
            last.insert(&e.lease.lease_id, (e.kind, e.lease.holder_id));
            by_holder.entry(e.lease.holder_id).or_default().push((e.t, e.kind));
        }
        let mut seen = 0;
        for (id, (kind, holder)) in &last {
            match kind {
                LeaseEventKind::Released => {}
                LeaseEventKind::Cancelled => {
                    seen += 1;
                    let events = &by_holder[holder];
                    let at = events.iter().rposition(|&(_, k)| k == LeaseEventKind::Cancelled).unwrap();
                    let reapplied = events[at..].iter().any(|&(_, k)| k == LeaseEventKind::Applied);
                    let finished = events.last().map(|&(_, k)| k) == Some(LeaseEventKind::Released);
                    if !reapplied || !finished {
                        return Err(format!("seed {seed}: {id} cancelled without a completed reapplication"));
                    }
                }
                other => return Err(format!("seed {seed}: {id} left {other:?}, neither released nor cancelled")),
            }
        }
        if seen == 0 {
            return Err(format!("seed {seed}: obstruction expired no lease"));
        }
        cancelled += seen;
    }
    Ok(format!("100/100 complete, {cancelled} stranded leases cancelled and reapplied"))
}

/// Time after which speed stays within 5% of the target.
fn settle(params: &VehicleParams, target: f64) -> Option<f64> {
    let dt = 0.001;
    let mut motor = MotorState::default();
    let mut settled_at = None;
    for k in 1..=20_000 {
        let (m, duty) = controller_step(params, &motor, target, dt).ok()?;
        motor = plant_step(params, &m, duty, dt).ok()?;
        if (motor.v_current - target).abs() <= 0.05 * target {
            settled_at.get_or_insert(k as f64 * dt);
        } else {
            settled_at = None;
        }
    }
    settled_at
}

fn controller() -> Verdict {
    let pi = VehicleParams::default();
    let ff = VehicleParams { k_p: 0.0, k_i: 0.0, ..pi };
    let mut parts = Vec::new();
    for target in [0.3, 0.6, 0.9] {
        let (t_pi, t_ff) = (settle(&pi, target), settle(&ff, target));
        let faster = matches!((t_pi, t_ff), (Some(a), Some(b)) if a < b) || (t_pi.is_some() && t_ff.is_none());
        parts.push(format!("{target}: {t_pi:.3?} vs {t_ff:.3?}"));
        if !faster {
            return Err(format!("PI not faster at {}", parts.join(", ")));
        }
        let (_, duty) = controller_step(&pi, &MotorState { v_current: target, ..MotorState::default() }, target, 0.01).map_err(|e| e.to_string())?;
        if duty != 0.1 * target {
            return Err(format!("duty {duty} at zero error for {target}"));
        }
    }
    Ok(format!("settling PI vs FF {}, zero-error duty exact", parts.join(", ")))
}

fn kalman() -> Verdict {
    let noise = KalmanNoise { sigma_a: 0.5, sigma_z: 0.1 };
    let (dt, steps) = (0.1, 50);
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = Normal::new(0.0, 0.1).unwrap();
        let p0 = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let vel = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let truth = |k: usize| p0 + vel * (k as f64 * dt);
        let mut measure = |k: usize| truth(k) + Vec2::new(gauss.sample(&mut rng), gauss.sample(&mut rng));
        let mut track = KalmanTrack::new(measure(0), 0.0, &noise);
        let (mut raw, mut smooth) = (0.0, 0.0);
        for k in 1..=steps {
            let z = measure(k);
            track = kalman_update(&track, z, dt, &noise).map_err(|e| e.to_string())?;
            raw += (z - truth(k)).norm().powi(2);
            smooth += (track.position() - truth(k)).norm().powi(2);
        }
        let (raw, smooth) = ((raw / steps as f64).sqrt(), (smooth / steps as f64).sqrt());
        if smooth >= raw {
            return Err(format!("seed {seed}: smoothed {smooth:.4} vs raw {raw:.4}"));
        }
        worst = worst.max(smooth / raw);
    }

    let updates = std::cell::Cell::new(0);
    let result = runner(1000).run(
        &(proptest::collection::vec(-1.0f64..1.0, 16), proptest::collection::vec((0.01f64..0.5, -3.0f64..3.0, -3.0f64..3.0), 1..30)),
        |(a, seq)| {
            let a = Matrix4::from_vec(a);
            let p0 = a * a.transpose() + Matrix4::identity() * 1e-3;
            let mut track = KalmanTrack { covariance: p0, ..KalmanTrack::new(Vec2::new(0.0, 0.0), 0.0, &noise) };
            for (dt, x, y) in seq {
                track = kalman_update(&track, Vec2::new(x, y), dt, &noise).expect("update succeeds");
                let p = track.covariance;
                let symmetric = (p - p.transpose()).abs().max() <= 1e-12 * p.abs().max();
                let positive = SymmetricEigen::new(p).eigenvalues.min() > 0.0;
                assert!(symmetric && positive && is_spd(&p), "covariance lost definiteness: {p}");
                updates.set(updates.get() + 1);
            }
            Ok(())
        },
    );
    result.map_err(|e| e.to_string())?;
    Ok(format!("100/100 runs smoothed below raw (worst ratio {worst:.3}), {} covariances SPD over 1000 cases", updates.get()))
}

fn bandwidth() -> Verdict {
    let quoted = NetParams { msg_size: 4000.0, update_period: 0.1, overhead_fraction: 0.1, ..NetParams::default() };
    let total = aggregate_bandwidth(50, &quoted);
    let fleet = max_supported_vehicles(&NetParams { capacity: 2_400_000.0, ..NetParams::default() });
    // 50 vehicles * 4 KB / 0.1 s = 2000 KB/s, plus 10% = 200 KB/s
    let line = format!("50 vehicles need {:.1} KB/s, 2.4 MB/s carries {fleet} vehicles", total / 1000.0);
    if (total - 2_200_000.0).abs() < 1e-6 && fleet == 60 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn staleness() -> Verdict {
    let mut decisions = 0;
    let mut worst: f64 = 0.0;
    for name in BUNDLED {
        for seed in 1..=25 {
            let scn = Scenario { seed, ..bundled(name) };
            let LatencySpec::Fixed { seconds } = scn.net.sync_latency else {
                return Err(format!("{name} is not in fixed-latency mode"));
            };
            let bound = seconds + scn.net.update_period;
            let out = run(&scn).map_err(|e| e.to_string())?;
            let records = parse_trace(&out.trace.join("\n"))?;
            for r in records {
                if let TraceRecord::Directive { t, id, staleness: Some(age), .. } = r {
                    decisions += 1;
                    worst = worst.max(age);
                    if age > bound + 1e-9 {
                        return Err(format!("{name} seed {seed}: vehicle {id} at {t} saw state {age:.4} s old, bound {bound:.4}"));
                    }
                }
            }
        }
    }
    if decisions == 0 {
        return Err("no decision saw a peer".into());
    }
    Ok(format!("{decisions} decisions, worst staleness {:.1} ms <= 108.6 ms", worst * 1000.0))
}

fn determinism() -> Verdict {
    let mut lines = 0;
    for name in BUNDLED {
        for algorithm in [Algorithm::Lease, Algorithm::Lock] {
            let scn = Scenario { seed: 42, algorithm, ..bundled(name) };
            let a = run(&scn).map_err(|e| e.to_string())?.trace.join("\n");
            let b = run(&scn).map_err(|e| e.to_string())?.trace.join("\n");
            if a.as_bytes() != b.as_bytes() {
                return Err(format!("{name} {algorithm:?} traces differ"));
            }
            lines += a.lines().count();
        }
    }
    Ok(format!("4 scenarios x 2 algorithms identical at seed 42 ({lines} trace lines)"))
}

fn oracles() -> Verdict {
    let model = IntersectionModel::four_way();
    let slot = runner(1000).run(&(lease_set(), 0usize..12, 50u32..2500, 0u32..9000), |(existing, path, d_ms, nb_ms)| {
        let path_id = model.paths()[path].id().to_string();
        let (d, nb) = (d_ms as f64 / 1000.0, nb_ms as f64 / 1000.0);
        let (s, _) = earliest_slot(d, nb, &existing, &path_id, "main", &model);
        let want = brute_force_slot(d, nb, &existing, &path_id, &model);
        assert!((s - want).abs() < 1e-9, "earliest_slot {s}, scan {want}");
        Ok(())
    });
    slot.map_err(|e| format!("earliest_slot: {e}"))?;

    let store = runner(1000).run(&schedule(), |steps| {
        let (store, errors) = run_schedule(&steps);
        assert!(errors.is_empty(), "{errors:?}");
        // independent fold of the log: last value and version per key
        let mut folded: BTreeMap<&str, (&str, u64)> = BTreeMap::new();
        for r in store.log() {
            match &r.value {
                Some(v) => {
                    folded.insert(&r.key, (v, r.version));
                }
                None => {
                    folded.remove(r.key.as_str());
                }
            }
        }
        let live: BTreeMap<&str, (&str, u64)> = store.entries().iter().map(|(k, e)| (k.as_str(), (e.value.as_str(), e.version))).collect();
        assert_eq!(folded, live);
        assert_eq!(&replay(store.log()), store.entries());
        Ok(())
    });
    store.map_err(|e| format!("store replay: {e}"))?;
    Ok("earliest_slot matches 1 ms scan on 1000 sets, log replay matches state on 1000 schedules".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("efficiency", efficiency),
        ("safety", safety),
        ("non-v2v protection", non_v2v_protection),
        ("recovery", recovery),
        ("controller", controller),
        ("kalman smoothing", kalman),
        ("bandwidth", bandwidth),
        ("staleness", staleness),
        ("determinism", determinism),
        ("oracle equivalence", oracles),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match verdict {
            Ok(msg) => println!("criterion {:>2} {name}: PASS - {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL - {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {}/10 passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
