//! Domain types and the closed-form mathematics of one segment's
//! entanglement attempt.
//!
//! Time is slotted: one slot is one repetition period `t0`, which already
//! includes the photon round trip, routing inside the node, the Bell-state
//! measurement and the heralding signal.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which relay policy drives the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// `M` independent chains; unit `j` only pairs with unit `j` of the
    /// neighbouring station.
    Parallelized,
    /// Every free unit of the next station emits in turn toward a single
    /// designated receiver at the previous station.
    Multiplexed,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::Parallelized, Protocol::Multiplexed];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Parallelized => "parallelized",
            Protocol::Multiplexed => "multiplexed",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parallelized" => Ok(Protocol::Parallelized),
            "multiplexed" => Ok(Protocol::Multiplexed),
            other => Err(format!(
                "unknown protocol `{other}` (expected `parallelized` or `multiplexed`)"
            )),
        }
    }
}

/// When a run ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    /// Execute exactly this many slots.
    MaxSlots(u64),
    /// Stop at the end of the first slot in which the cumulative number of
    /// completed transfers reaches this value.
    TargetCompletions(u64),
}

/// A validated simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub protocol: Protocol,
    /// Repeater stations strictly between sender and receiver.
    pub n_repeaters: usize,
    /// NV units per station; also the channel count in parallelized mode.
    pub m_per_node: usize,
    /// Heralded success probability of a single photon attempt on a segment.
    pub p_success: f64,
    /// Duration of one slot in seconds.
    pub t0_seconds: f64,
    /// Segment length, echoed in outputs only.
    pub l0_meters: Option<f64>,
    pub stop: StopCondition,
    pub seed: u64,
    pub replications: u32,
}

impl SimConfig {
    /// Sender + repeaters + receiver.
    pub fn station_count(&self) -> usize {
        self.n_repeaters + 2
    }

    pub fn segment_count(&self) -> usize {
        self.n_repeaters + 1
    }

    pub fn slots_to_seconds(&self, slots: f64) -> f64 {
        slots * self.t0_seconds
    }
}

/// Unvalidated configuration, as read from a file or flags.
///
/// Integer fields are signed so that negative inputs reach validation and
/// produce a field-specific message instead of a parse failure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub protocol: Option<Protocol>,
    pub n_repeaters: Option<i64>,
    pub m_per_node: Option<i64>,
    pub p_success: Option<f64>,
    pub t0_seconds: Option<f64>,
    pub l0_meters: Option<f64>,
    pub max_slots: Option<i64>,
    pub target_completions: Option<i64>,
    pub seed: Option<u64>,
    pub replications: Option<i64>,
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub const DEFAULT_T0_SECONDS: f64 = 1.0;
pub const DEFAULT_REPLICATIONS: u32 = 1;
pub const DEFAULT_PROTOCOL: Protocol = Protocol::Multiplexed;

/// Enforces every [`SimConfig`] invariant, accumulating all violations.
pub fn validate_config(raw: &RawConfig) -> Result<SimConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();

    let mut positive_int = |field: &str, value: Option<i64>| -> Option<u64> {
        match value {
            None => {
                errors.push(ConfigError::new(field, "is required"));
                None
            }
            Some(v) if v < 1 => {
                errors.push(ConfigError::new(
                    field,
                    format!("{field} must be >= 1 (got {v})"),
                ));
                None
            }
            Some(v) => Some(v as u64),
        }
    };
    let n_repeaters = positive_int("n_repeaters", raw.n_repeaters);
    let m_per_node = positive_int("m_per_node", raw.m_per_node);
    let replications = match raw.replications {
        None => Some(u64::from(DEFAULT_REPLICATIONS)),
        Some(v) => positive_int("replications", Some(v)),
    };

    let p_success = match raw.p_success {
        None => {
            errors.push(ConfigError::new("p_success", "is required"));
            None
        }
        Some(p) if !(p > 0.0 && p <= 1.0) => {
            errors.push(ConfigError::new(
                "p_success",
                format!("p_success must be in (0,1] (got {p})"),
            ));
            None
        }
        Some(p) => Some(p),
    };

    let t0_seconds = match raw.t0_seconds {
        None => Some(DEFAULT_T0_SECONDS),
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            errors.push(ConfigError::new(
                "t0_seconds",
                format!("t0_seconds must be a positive finite number (got {t})"),
            ));
            None
        }
        Some(t) => Some(t),
    };

    if let Some(l) = raw.l0_meters {
        if !(l > 0.0 && l.is_finite()) {
            errors.push(ConfigError::new(
                "l0_meters",
                format!("l0_meters must be a positive finite number (got {l})"),
            ));
        }
    }

    let stop = match (raw.max_slots, raw.target_completions) {
        (Some(_), Some(_)) | (None, None) => {
            errors.push(ConfigError::new(
                "stop",
                "exactly one stop condition (max_slots or target_completions) must be set",
            ));
            None
        }
        (Some(s), None) if s < 1 => {
            errors.push(ConfigError::new(
                "max_slots",
                format!("max_slots must be >= 1 (got {s})"),
            ));
            None
        }
        (None, Some(t)) if t < 1 => {
            errors.push(ConfigError::new(
                "target_completions",
                format!("target_completions must be >= 1 (got {t})"),
            ));
            None
        }
        (Some(s), None) => Some(StopCondition::MaxSlots(s as u64)),
        (None, Some(t)) => Some(StopCondition::TargetCompletions(t as u64)),
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    // All `None`s above pushed an error, so these unwraps cannot fire.
    Ok(SimConfig {
        protocol: raw.protocol.unwrap_or(DEFAULT_PROTOCOL),
        n_repeaters: n_repeaters.unwrap() as usize,
        m_per_node: m_per_node.unwrap() as usize,
        p_success: p_success.unwrap(),
        t0_seconds: t0_seconds.unwrap(),
        l0_meters: raw.l0_meters,
        stop: stop.unwrap(),
        seed: raw.seed.unwrap_or(0),
        replications: replications.unwrap() as u32,
    })
}

/// Identifier of a relayed qubit; assigned in injection order from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QubitId(pub u64);

impl fmt::Display for QubitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Occupancy of one NV unit.
///
/// A unit's two physical memories (stored qubit plus the transient link
/// half) collapse into this single status: link creation and teleportation
/// both finish inside one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum NvUnit {
    #[default]
    Free,
    Holding {
        qubit: QubitId,
        arrival_slot: u64,
    },
}

impl NvUnit {
    pub fn is_free(&self) -> bool {
        matches!(self, NvUnit::Free)
    }

    pub fn held(&self) -> Option<(QubitId, u64)> {
        match *self {
            NvUnit::Free => None,
            NvUnit::Holding {
                qubit,
                arrival_slot,
            } => Some((qubit, arrival_slot)),
        }
    }
}

/// Full itinerary of one qubit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QubitRecord {
    pub qubit_id: QubitId,
    pub injected_slot: u64,
    /// `(station_index, arrival_slot)`, starting with `(0, injected_slot)`;
    /// a completed qubit ends with the receiver station at `completed_slot`.
    pub hops: Vec<(usize, u64)>,
    pub completed_slot: Option<u64>,
}

impl QubitRecord {
    pub fn new(qubit_id: QubitId, injected_slot: u64) -> Self {
        Self {
            qubit_id,
            injected_slot,
            hops: vec![(0, injected_slot)],
            completed_slot: None,
        }
    }

    pub fn transfer_slots(&self) -> Option<u64> {
        self.completed_slot.map(|c| c - self.injected_slot)
    }

    /// Slots spent at each station that the qubit has already left.
    pub fn residences(&self) -> impl Iterator<Item = u64> + '_ {
        self.hops.windows(2).map(|w| w[1].1 - w[0].1)
    }
}

/// Result of one time-multiplexed attempt on a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttemptOutcome {
    Failure,
    /// Index into the ordered list of eligible emitters.
    Success(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ModelError {
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("attempt never succeeds (m_free = {m_free}, p = {p})")]
    NeverSucceeds { m_free: usize, p: f64 },
}

fn check_probability(p: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ModelError::ProbabilityOutOfRange(p))
    }
}

/// Probability that at least one of `m_free` sequential photons is absorbed:
/// `1 - (1 - p)^m_free`.
pub fn success_probability(m_free: usize, p: f64) -> Result<f64, ModelError> {
    check_probability(p)?;
    if m_free == 0 {
        return Ok(0.0);
    }
    // -expm1(m * ln(1 - p)) keeps precision when p is tiny.
    let exponent = m_free as f64 * (-p).ln_1p();
    Ok(-exponent.exp_m1())
}

/// Mean number of slots until a segment attempt first succeeds.
pub fn expected_slots_to_success(m_free: usize, p: f64) -> Result<f64, ModelError> {
    let q = success_probability(m_free, p)?;
    if q == 0.0 {
        return Err(ModelError::NeverSucceeds { m_free, p });
    }
    Ok(1.0 / q)
}

/// Cumulative outcome thresholds for up to `max_emitters` sequential photons.
///
/// `thresholds[k] = 1 - (1-p)^(k+1)`; a uniform `u` lands on emitter `k` when
/// it is the first index with `u < thresholds[k]`. This is the inverse CDF of
/// `P(Success(k)) = (1-p)^k p`, `P(Failure) = (1-p)^m_free`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptTable {
    p: f64,
    thresholds: Vec<f64>,
}

impl AttemptTable {
    pub fn new(max_emitters: usize, p: f64) -> Result<Self, ModelError> {
        check_probability(p)?;
        let thresholds = (1..=max_emitters)
            .map(|m| success_probability(m, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { p, thresholds })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn max_emitters(&self) -> usize {
        self.thresholds.len()
    }

    /// # Panics
    /// If `m_free` exceeds the table size.
    pub fn outcome(&self, m_free: usize, u: f64) -> AttemptOutcome {
        let cum = &self.thresholds[..m_free];
        match cum.last() {
            Some(&total) if u < total => AttemptOutcome::Success(cum.partition_point(|&t| t <= u)),
            _ => AttemptOutcome::Failure,
        }
    }
}

/// Maps one uniform variate `u` in `[0, 1)` to an attempt outcome.
pub fn attempt_from_uniform(m_free: usize, p: f64, u: f64) -> Result<AttemptOutcome, ModelError> {
    Ok(AttemptTable::new(m_free, p)?.outcome(m_free, u))
}

/// Samples one attempt; always consumes exactly one uniform variate.
pub fn sample_attempt<R: Rng + ?Sized>(
    m_free: usize,
    p: f64,
    rng: &mut R,
) -> Result<AttemptOutcome, ModelError> {
    let u: f64 = rng.random();
    attempt_from_uniform(m_free, p, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference_raw() -> RawConfig {
        RawConfig {
            n_repeaters: Some(10),
            m_per_node: Some(10),
            p_success: Some(1e-4),
            max_slots: Some(1_000_000),
            ..Default::default()
        }
    }

    #[test]
    fn success_probability_trivial_cases() {
        assert_eq!(success_probability(0, 0.5).unwrap(), 0.0);
        assert_eq!(success_probability(1, 1.0).unwrap(), 1.0);
        assert_eq!(success_probability(5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn success_probability_reference_value() {
        // Direct product and log-sum routes.
        let direct = 1.0 - (0..10).fold(1.0_f64, |acc, _| acc * 0.9999);
        let log_sum = 1.0 - (10.0 * 0.9999_f64.ln()).exp();
        let got = success_probability(10, 1e-4).unwrap();
        assert!((got - direct).abs() < 1e-15, "{got} vs {direct}");
        assert!((got - log_sum).abs() < 1e-15);
        assert!((got - 0.000_999_550_119_979_002_5).abs() < 1e-15);
    }

    #[test]
    fn success_probability_rejects_bad_p() {
        assert!(matches!(
            success_probability(3, 1.5),
            Err(ModelError::ProbabilityOutOfRange(_))
        ));
        assert!(success_probability(3, -0.1).is_err());
        assert!(success_probability(3, f64::NAN).is_err());
    }

    #[test]
    fn union_bound_is_tight_for_small_p() {
        let q = success_probability(10, 1e-4).unwrap();
        let bound = 10.0 * 1e-4;
        assert!(q <= bound);
        assert!((bound - q) / bound < 1e-3);
    }

    #[test]
    fn expected_slots() {
        assert_eq!(expected_slots_to_success(1, 1.0).unwrap(), 1.0);
        assert!((expected_slots_to_success(1, 1e-4).unwrap() - 10_000.0).abs() < 1e-6);
        let e = expected_slots_to_success(10, 1e-4).unwrap();
        assert!((e - 1.0 / 0.000_999_550_119_979_002_5).abs() < 1e-6);
        assert!((e - 1000.45).abs() < 0.01);
        assert!(matches!(
            expected_slots_to_success(0, 0.5),
            Err(ModelError::NeverSucceeds { .. })
        ));
        assert!(expected_slots_to_success(3, 0.0).is_err());
    }

    #[test]
    fn geometric_waiting_time_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, p, trials) in [(1usize, 1e-2, 100_000u32), (10, 1e-4, 10_000)] {
            let table = AttemptTable::new(m, p).unwrap();
            let mut total = 0.0;
            for _ in 0..trials {
                let mut slots = 1u64;
                while table.outcome(m, rng.random()) == AttemptOutcome::Failure {
                    slots += 1;
                }
                total += slots as f64;
            }
            let mean = total / f64::from(trials);
            let q = success_probability(m, p).unwrap();
            let sd = (1.0 - q).sqrt() / q;
            let expected = expected_slots_to_success(m, p).unwrap();
            assert!(
                (mean - expected).abs() < 3.0 * sd / f64::from(trials).sqrt(),
                "m={m} p={p}: {mean} vs {expected}"
            );
        }
    }

    #[test]
    fn attempt_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                sample_attempt(3, 1.0, &mut rng).unwrap(),
                AttemptOutcome::Success(0)
            );
            assert_eq!(
                sample_attempt(0, 0.7, &mut rng).unwrap(),
                AttemptOutcome::Failure
            );
        }
        assert_eq!(
            attempt_from_uniform(4, 0.5, 0.0).unwrap(),
            AttemptOutcome::Success(0)
        );
        // u just below 1 - (1-p)^m lands on the last emitter; above it fails.
        assert_eq!(
            attempt_from_uniform(2, 0.5, 0.74).unwrap(),
            AttemptOutcome::Success(1)
        );
        assert_eq!(
            attempt_from_uniform(2, 0.5, 0.76).unwrap(),
            AttemptOutcome::Failure
        );
    }

    #[test]
    fn attempt_consumes_one_variate() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        sample_attempt(0, 0.3, &mut a).unwrap();
        sample_attempt(10, 0.3, &mut a).unwrap();
        let _: f64 = b.random();
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn two_emitter_frequencies() {
        // Enumerating the two sequential Bernoulli(1/2) trials gives
        // {S0: 1/2, S1: 1/4, F: 1/4}.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            match sample_attempt(2, 0.5, &mut rng).unwrap() {
                AttemptOutcome::Success(0) => counts[0] += 1,
                AttemptOutcome::Success(1) => counts[1] += 1,
                AttemptOutcome::Failure => counts[2] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        for (count, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*count as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn validate_applies_defaults() {
        let cfg = validate_config(&reference_raw()).unwrap();
        assert_eq!(cfg.n_repeaters, 10);
        assert_eq!(cfg.m_per_node, 10);
        assert_eq!(cfg.p_success, 1e-4);
        assert_eq!(cfg.t0_seconds, 1.0);
        assert_eq!(cfg.replications, 1);
        assert_eq!(cfg.stop, StopCondition::MaxSlots(1_000_000));
        assert_eq!(cfg.station_count(), 12);
        assert_eq!(cfg.segment_count(), 11);
    }

    #[test]
    fn validate_rejects_zero_p() {
        let raw = RawConfig {
            p_success: Some(0.0),
            ..reference_raw()
        };
        let errs = validate_config(&raw).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "p_success");
        assert!(errs[0].message.contains("p_success must be in (0,1]"));
    }

    #[test]
    fn validate_requires_exactly_one_stop() {
        let raw = RawConfig {
            target_completions: Some(5),
            ..reference_raw()
        };
        let errs = validate_config(&raw).unwrap_err();
        assert!(errs[0].message.contains("exactly one stop condition"));
        let raw = RawConfig {
            max_slots: None,
            ..reference_raw()
        };
        assert!(validate_config(&raw).is_err());
    }

    #[test]
    fn validate_accumulates_errors() {
        let raw = RawConfig {
            n_repeaters: Some(0),
            m_per_node: Some(-2),
            p_success: Some(1.5),
            t0_seconds: Some(-1.0),
            ..reference_raw()
        };
        let errs = validate_config(&raw).unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(
            fields,
            ["n_repeaters", "m_per_node", "p_success", "t0_seconds"]
        );
    }

    #[test]
    fn protocol_round_trips_through_str() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("forward".parse::<Protocol>().is_err());
    }

    #[test]
    fn qubit_record_residences() {
        let mut r = QubitRecord::new(QubitId(0), 3);
        r.hops.push((1, 7));
        r.hops.push((2, 8));
        r.completed_slot = Some(8);
        assert_eq!(r.residences().collect::<Vec<_>>(), vec![4, 1]);
        assert_eq!(r.transfer_slots(), Some(5));
    }
}
