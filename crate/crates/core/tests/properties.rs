use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repeater_core::engine::{self, NetworkState, Simulation, SlotReport};
use repeater_core::metrics::{self, MetricsSummary};
use repeater_core::model::{
    sample_attempt, success_probability, AttemptOutcome, NvUnit, Protocol, SimConfig, StopCondition,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn config(
    protocol: Protocol,
    n: usize,
    m: usize,
    p: f64,
    stop: StopCondition,
    seed: u64,
) -> SimConfig {
    SimConfig {
        protocol,
        n_repeaters: n,
        m_per_node: m,
        p_success: p,
        t0_seconds: 1.0,
        l0_meters: None,
        stop,
        seed,
        replications: 1,
    }
}

/// Slot-start occupancy: the pre-step state with this slot's injections
/// loaded into the free sender units in ascending order.
fn snapshot(before: &NetworkState, report: &SlotReport) -> NetworkState {
    let mut snap = before.clone();
    let mut injected = report.injections.iter();
    for unit in snap.stations[0].units.iter_mut() {
        if unit.is_free() {
            let qubit = *injected.next().expect("one injection per free sender unit");
            *unit = NvUnit::Holding {
                qubit,
                arrival_slot: report.slot,
            };
        }
    }
    assert!(injected.next().is_none());
    snap
}

fn check_report(
    protocol: Protocol,
    snap: &NetworkState,
    report: &SlotReport,
) -> Result<(), String> {
    let mut receivers = HashSet::new();
    let mut emitters = HashSet::new();
    let mut served = HashSet::new();
    for a in &report.attempts {
        let here = &snap.stations[a.segment];
        let next = &snap.stations[a.segment + 1];
        match here.units[a.receiver_unit].held() {
            Some((q, _)) if q == a.qubit => {}
            _ => {
                return Err(format!(
                    "slot {}: receiver does not hold {}",
                    report.slot, a.qubit
                ))
            }
        }
        if a.emitters.is_empty() {
            return Err("attempt without emitters".into());
        }
        for &e in &a.emitters {
            if !next.units[e].is_free() {
                return Err(format!(
                    "slot {}: holder emitted at station {}",
                    report.slot,
                    a.segment + 1
                ));
            }
            emitters.insert((a.segment + 1, e));
        }
        receivers.insert((a.segment, a.receiver_unit));
        let key = match protocol {
            Protocol::Multiplexed => (a.segment, 0),
            Protocol::Parallelized => (a.segment, a.receiver_unit),
        };
        if !served.insert(key) {
            return Err(format!(
                "slot {}: segment {} served twice",
                report.slot, a.segment
            ));
        }
        if protocol == Protocol::Parallelized && a.emitters != [a.receiver_unit] {
            return Err("parallelized attempt crossed chains".into());
        }
    }
    if receivers.intersection(&emitters).next().is_some() {
        return Err("a unit both received and emitted".into());
    }
    Ok(())
}

fn run_checked(cfg: &SimConfig) -> Result<(), String> {
    let mut sim = Simulation::new(cfg, 0).map_err(|e| e.to_string())?;
    let mut last_completed = 0;
    while !sim.is_finished() {
        let before = sim.state().clone();
        let report = sim.step_slot().map_err(|e| e.to_string())?;
        check_report(cfg.protocol, &snapshot(&before, &report), &report)?;
        sim.check_invariants()?;
        if sim.completed_count() < last_completed {
            return Err("completions decreased".into());
        }
        last_completed = sim.completed_count();
    }
    sim.check_itineraries()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn success_probability_is_monotone_and_union_bounded(m in 0usize..40, p in 0.0f64..=1.0, dp in 0.0f64..0.1) {
        let q = success_probability(m, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert!(success_probability(m + 1, p).unwrap() >= q);
        prop_assert!(success_probability(m, (p + dp).min(1.0)).unwrap() >= q);
        prop_assert!(q <= m as f64 * p + 1e-15);
    }

    #[test]
    fn engine_invariants_hold(
        protocol in prop::sample::select(Protocol::ALL.to_vec()),
        n in 1usize..=6,
        m in 1usize..=4,
        p in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = config(protocol, n, m, p, StopCondition::MaxSlots(1500), seed);
        prop_assert_eq!(run_checked(&cfg), Ok(()));
    }

    #[test]
    fn runs_are_reproducible(
        protocol in prop::sample::select(Protocol::ALL.to_vec()),
        seed in any::<u64>(),
        rep in 0u64..1000,
    ) {
        let cfg = config(protocol, 3, 3, 0.2, StopCondition::MaxSlots(400), seed);
        let a = serde_json::to_string(&engine::run(&cfg, rep).unwrap()).unwrap();
        let b = serde_json::to_string(&engine::run(&cfg, rep).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn marginal_success_frequency_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (m, p) in [(1usize, 0.3), (3, 0.05), (7, 0.5), (10, 0.001)] {
        let n = 200_000u32;
        let hits = (0..n)
            .filter(|_| sample_attempt(m, p, &mut rng).unwrap() != AttemptOutcome::Failure)
            .count() as f64;
        let q = success_probability(m, p).unwrap();
        let sigma = (f64::from(n) * q * (1.0 - q)).sqrt();
        assert!((hits - f64::from(n) * q).abs() < 3.0 * sigma, "m={m} p={p}");
    }
}

#[test]
fn conditional_emitter_index_is_truncated_geometric() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let (m, p) = (6usize, 0.2);
    let mut counts = vec![0u64; m];
    for _ in 0..200_000 {
        if let AttemptOutcome::Success(k) = sample_attempt(m, p, &mut rng).unwrap() {
            counts[k] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let q = success_probability(m, p).unwrap();
    let stat: f64 = counts
        .iter()
        .enumerate()
        .map(|(k, &obs)| {
            let expected = total as f64 * (1.0 - p).powi(k as i32) * p / q;
            (obs as f64 - expected).powi(2) / expected
        })
        .sum();
    let critical = ChiSquared::new((m - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi2 {stat} >= {critical}");
}

#[test]
fn latency_examples() {
    for protocol in Protocol::ALL {
        let cfg = config(protocol, 10, 4, 1.0, StopCondition::TargetCompletions(1), 1);
        assert_eq!(
            metrics::latency(&engine::run(&cfg, 0).unwrap()).unwrap(),
            11
        );
    }
    let cfg = config(
        Protocol::Multiplexed,
        1,
        1,
        1.0,
        StopCondition::TargetCompletions(1),
        1,
    );
    assert_eq!(metrics::latency(&engine::run(&cfg, 0).unwrap()).unwrap(), 2);
}

#[test]
fn certain_success_parallel_throughput_is_half_per_chain() {
    for m in [1usize, 3, 8] {
        let cfg = config(
            Protocol::Parallelized,
            10,
            m,
            1.0,
            StopCondition::MaxSlots(1000),
            0,
        );
        let run = engine::run(&cfg, 0).unwrap();
        let t = metrics::steady_throughput(&run, 0.3).unwrap();
        assert!(
            (t.per_slot - m as f64 / 2.0).abs() < 1e-3 * m as f64,
            "m={m}: {t:?}"
        );
    }
}

#[test]
fn metrics_bounds_on_random_runs() {
    let cfg = config(
        Protocol::Multiplexed,
        4,
        3,
        0.3,
        StopCondition::MaxSlots(3000),
        5,
    );
    let run = engine::run(&cfg, 0).unwrap();
    let lat = metrics::latency(&run).unwrap();
    assert!(run.completed().all(|q| q.completed_slot.unwrap() >= lat));
    let stats = metrics::transfer_time_stats(&run).unwrap();
    assert!(stats.mean >= (cfg.n_repeaters + 1) as f64);
    assert_eq!(stats.in_flight, run.in_flight_count());
    let hops: u64 = stats.residence_histogram.values().sum();
    assert_eq!(hops, stats.count * (cfg.n_repeaters as u64 + 1));
}

#[test]
fn merged_mean_equals_pooled_recomputation() {
    let cfg = config(
        Protocol::Parallelized,
        3,
        2,
        0.2,
        StopCondition::MaxSlots(2000),
        9,
    );
    let runs: Vec<_> = (0..4).map(|r| engine::run(&cfg, r).unwrap()).collect();
    let summaries: Vec<_> = runs
        .iter()
        .map(|r| MetricsSummary::from_run(r, 0.3))
        .collect();

    let left = summaries[0]
        .merge(&summaries[1])
        .unwrap()
        .merge(&summaries[2].merge(&summaries[3]).unwrap())
        .unwrap();
    let right = summaries
        .iter()
        .rev()
        .fold(MetricsSummary::empty(cfg.clone()), |acc, s| {
            acc.merge(s).unwrap()
        });
    assert_eq!(left, right);
    assert_eq!(left.replications(), 4);

    let all: Vec<u64> = runs
        .iter()
        .flat_map(|r| r.completed().map(|q| q.transfer_slots().unwrap()))
        .collect();
    let pooled = all.iter().sum::<u64>() as f64 / all.len() as f64;
    let merged = left.transfer().unwrap();
    assert!((merged.mean - pooled).abs() < 1e-9);
    assert_eq!(left.max_transfer_slots(), all.iter().max().copied());
    assert_eq!(left.completed_count(), all.len() as u64);
}

#[test]
fn replication_streams_differ() {
    let cfg = config(
        Protocol::Multiplexed,
        2,
        2,
        0.3,
        StopCondition::MaxSlots(1),
        3,
    );
    let mut draws = HashSet::new();
    for rep in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(rep);
        assert!(draws.insert(rng.random::<u64>()));
    }
}
