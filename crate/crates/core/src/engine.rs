//! Synchronous slotted state machine.
//!
//! Each slot runs in five phases:
//!
//! 1. every free sender unit is loaded with a fresh qubit;
//! 2. the occupancy at this point is the slot's snapshot;
//! 3. every segment, in ascending order, reads only the snapshot to pick its
//!    receiver(s) and emitters and draws one uniform variate per attempt;
//! 4. all successful moves commit together at the slot boundary, arriving at
//!    `slot + 1`; a move into the receiver station completes the transfer and
//!    leaves the unit free;
//! 5. the slot counter advances.
//!
//! Because phase 3 never observes its own moves, a qubit advances at most one
//! segment per slot and a unit that holds a qubit at slot start cannot act as
//! an emitter in that slot.
//!
//! Replication streams: the generator for `(seed, replication_index)` is
//! `ChaCha8Rng::seed_from_u64(seed)` switched to stream `replication_index`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AttemptOutcome, AttemptTable, ModelError, NvUnit, Protocol, QubitId, QubitRecord, SimConfig,
    StopCondition,
};

/// A run with a completion target aborts after this many slots without
/// reaching it.
pub const NO_PROGRESS_SLOT_CAP: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("simulation already reached its stop condition at slot {0}")]
    Stopped(u64),
    #[error("no progress: {completed} of {target} completions after {slots} slots")]
    NoProgress {
        target: u64,
        completed: u64,
        slots: u64,
    },
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One station's NV units.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Station {
    pub units: Vec<NvUnit>,
}

impl Station {
    fn new(m: usize) -> Self {
        Self {
            units: vec![NvUnit::Free; m],
        }
    }

    pub fn held_count(&self) -> usize {
        self.units.iter().filter(|u| !u.is_free()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkState {
    /// Index 0 is the sender, `len - 1` the receiver.
    pub stations: Vec<Station>,
    pub current_slot: u64,
    pub next_qubit_id: u64,
}

impl NetworkState {
    pub fn receiver_index(&self) -> usize {
        self.stations.len() - 1
    }

    pub fn segment_count(&self) -> usize {
        self.stations.len() - 1
    }

    pub fn held_count(&self) -> usize {
        self.stations.iter().map(Station::held_count).sum()
    }
}

/// The holding unit that the multiplexed policy serves next: oldest arrival
/// first, ties broken by the smaller qubit id.
pub fn select_receiver(station: &Station) -> Option<usize> {
    station
        .units
        .iter()
        .enumerate()
        .filter_map(|(i, u)| u.held().map(|(q, arrival)| ((arrival, q), i)))
        .min()
        .map(|(_, i)| i)
}

fn free_units(next: &Station) -> impl Iterator<Item = usize> + '_ {
    next.units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.is_free())
        .map(|(i, _)| i)
}

/// Units of the next station allowed to emit toward the previous station,
/// in emission order.
///
/// For [`Protocol::Parallelized`] only the unit of the same `chain` index is
/// considered; `chain` is ignored in multiplexed mode.
pub fn eligible_emitters(next: &Station, protocol: Protocol, chain: usize) -> Vec<usize> {
    match protocol {
        Protocol::Multiplexed => free_units(next).collect(),
        Protocol::Parallelized => match next.units.get(chain) {
            Some(NvUnit::Free) => vec![chain],
            _ => Vec::new(),
        },
    }
}

/// One attempt on one segment within a slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAttempt {
    /// Segment `i` joins station `i` to station `i + 1`.
    pub segment: usize,
    pub receiver_unit: usize,
    pub qubit: QubitId,
    /// Units at station `segment + 1`, in emission order.
    pub emitters: Vec<usize>,
    pub outcome: AttemptOutcome,
}

impl SegmentAttempt {
    pub fn emitter_unit(&self) -> Option<usize> {
        match self.outcome {
            AttemptOutcome::Success(k) => Some(self.emitters[k]),
            AttemptOutcome::Failure => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: u64,
    pub attempts: Vec<SegmentAttempt>,
    pub injections: Vec<QubitId>,
    pub completions: Vec<QubitId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Move {
    segment: usize,
    from_unit: usize,
    to_unit: usize,
}

/// One replication in progress.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    replication_index: u64,
    state: NetworkState,
    rng: ChaCha8Rng,
    table: AttemptTable,
    records: Vec<QubitRecord>,
    completion_slots: Vec<u64>,
    moves: Vec<Move>,
}

impl Simulation {
    /// All units free, slot 0, generator on the replication's stream.
    ///
    /// The engine accepts `p_success = 0` (nothing ever moves), which
    /// configuration validation rejects.
    pub fn new(config: &SimConfig, replication_index: u64) -> Result<Self, EngineError> {
        if config.n_repeaters == 0 || config.m_per_node == 0 {
            return Err(EngineError::InvalidConfig(
                "n_repeaters and m_per_node must be >= 1".into(),
            ));
        }
        let table = AttemptTable::new(config.m_per_node, config.p_success)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(replication_index);
        Ok(Self {
            config: config.clone(),
            replication_index,
            state: NetworkState {
                stations: (0..config.station_count())
                    .map(|_| Station::new(config.m_per_node))
                    .collect(),
                current_slot: 0,
                next_qubit_id: 0,
            },
            rng,
            table,
            records: Vec::new(),
            completion_slots: Vec::new(),
            moves: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn records(&self) -> &[QubitRecord] {
        &self.records
    }

    pub fn completed_count(&self) -> u64 {
        self.completion_slots.len() as u64
    }

    pub fn is_finished(&self) -> bool {
        match self.config.stop {
            StopCondition::MaxSlots(max) => self.state.current_slot >= max,
            StopCondition::TargetCompletions(target) => self.completed_count() >= target,
        }
    }

    /// Loads every free sender unit with a new qubit.
    pub fn inject_at_sender(&mut self, mut report: Option<&mut SlotReport>) -> usize {
        let slot = self.state.current_slot;
        let mut injected = 0;
        for unit in self.state.stations[0].units.iter_mut() {
            if unit.is_free() {
                let qubit = QubitId(self.state.next_qubit_id);
                self.state.next_qubit_id += 1;
                *unit = NvUnit::Holding {
                    qubit,
                    arrival_slot: slot,
                };
                self.records.push(QubitRecord::new(qubit, slot));
                if let Some(r) = report.as_deref_mut() {
                    r.injections.push(qubit);
                }
                injected += 1;
            }
        }
        injected
    }

    /// Advances one slot and reports every attempt made.
    pub fn step_slot(&mut self) -> Result<SlotReport, EngineError> {
        let mut report = SlotReport {
            slot: self.state.current_slot,
            ..Default::default()
        };
        self.step(Some(&mut report))?;
        Ok(report)
    }

    /// Advances one slot without building a report.
    pub fn advance(&mut self) -> Result<(), EngineError> {
        self.step(None)
    }

    fn step(&mut self, mut report: Option<&mut SlotReport>) -> Result<(), EngineError> {
        if self.is_finished() {
            return Err(EngineError::Stopped(self.state.current_slot));
        }
        self.inject_at_sender(report.as_deref_mut());
        self.collect_moves(report.as_deref_mut());
        let mut moves = std::mem::take(&mut self.moves);
        self.commit_moves(&moves, report);
        moves.clear();
        self.moves = moves;
        self.state.current_slot += 1;
        Ok(())
    }

    fn collect_moves(&mut self, mut report: Option<&mut SlotReport>) {
        let protocol = self.config.protocol;
        let stations = &self.state.stations;
        for segment in 0..stations.len() - 1 {
            let (here, next) = (&stations[segment], &stations[segment + 1]);
            match protocol {
                Protocol::Multiplexed => {
                    let Some(receiver) = select_receiver(here) else {
                        continue;
                    };
                    let m_free = free_units(next).count();
                    if m_free == 0 {
                        continue;
                    }
                    let outcome = self.table.outcome(m_free, self.rng.random());
                    let emitter = match outcome {
                        AttemptOutcome::Success(k) => free_units(next).nth(k),
                        AttemptOutcome::Failure => None,
                    };
                    if let Some(to_unit) = emitter {
                        self.moves.push(Move {
                            segment,
                            from_unit: receiver,
                            to_unit,
                        });
                    }
                    if let Some(r) = report.as_deref_mut() {
                        r.attempts.push(SegmentAttempt {
                            segment,
                            receiver_unit: receiver,
                            qubit: here.units[receiver].held().unwrap().0,
                            emitters: free_units(next).collect(),
                            outcome,
                        });
                    }
                }
                Protocol::Parallelized => {
                    for (chain, (holder, partner)) in here.units.iter().zip(&next.units).enumerate()
                    {
                        let (Some((qubit, _)), NvUnit::Free) = (holder.held(), partner) else {
                            continue;
                        };
                        let outcome = self.table.outcome(1, self.rng.random());
                        if outcome == AttemptOutcome::Success(0) {
                            self.moves.push(Move {
                                segment,
                                from_unit: chain,
                                to_unit: chain,
                            });
                        }
                        if let Some(r) = report.as_deref_mut() {
                            r.attempts.push(SegmentAttempt {
                                segment,
                                receiver_unit: chain,
                                qubit,
                                emitters: vec![chain],
                                outcome,
                            });
                        }
                    }
                }
            }
        }
    }

    fn commit_moves(&mut self, moves: &[Move], mut report: Option<&mut SlotReport>) {
        let arrival = self.state.current_slot + 1;
        let receiver = self.state.receiver_index();
        for mv in moves {
            let (qubit, _) = self.state.stations[mv.segment].units[mv.from_unit]
                .held()
                .expect("move source holds a qubit");
            self.state.stations[mv.segment].units[mv.from_unit] = NvUnit::Free;
            let to = mv.segment + 1;
            let record = &mut self.records[qubit.0 as usize];
            record.hops.push((to, arrival));
            if to == receiver {
                record.completed_slot = Some(arrival);
                self.completion_slots.push(arrival);
                if let Some(r) = report.as_deref_mut() {
                    r.completions.push(qubit);
                }
            } else {
                debug_assert!(self.state.stations[to].units[mv.to_unit].is_free());
                self.state.stations[to].units[mv.to_unit] = NvUnit::Holding {
                    qubit,
                    arrival_slot: arrival,
                };
            }
        }
    }

    /// Checks conservation and exclusion, and that every held qubit sits
    /// where its itinerary says. Cost is `O(stations * units)`.
    pub fn check_invariants(&self) -> Result<(), String> {
        let held = self.state.held_count() as u64;
        let injected = self.state.next_qubit_id;
        if injected != self.completed_count() + held {
            return Err(format!(
                "conservation: injected {injected} != completed {} + held {held}",
                self.completed_count()
            ));
        }
        if self.records.len() as u64 != injected {
            return Err("record count differs from injected count".into());
        }
        let m = self.config.m_per_node;
        let mut held_ids = Vec::with_capacity(held as usize);
        for (s, station) in self.state.stations.iter().enumerate() {
            if station.units.len() != m {
                return Err(format!("station {s} has {} units", station.units.len()));
            }
            if s == self.state.receiver_index() && station.held_count() != 0 {
                return Err("receiver unit holds a qubit".into());
            }
            for (u, unit) in station.units.iter().enumerate() {
                let Some((q, arrival)) = unit.held() else {
                    continue;
                };
                held_ids.push(q);
                let record = &self.records[q.0 as usize];
                if record.completed_slot.is_some() {
                    return Err(format!(
                        "completed qubit {q} still held at station {s} unit {u}"
                    ));
                }
                if record.hops.last() != Some(&(s, arrival)) {
                    return Err(format!("qubit {q} location disagrees with its itinerary"));
                }
            }
        }
        // Distinct holders plus conservation: every in-flight qubit is held
        // by exactly one unit.
        held_ids.sort_unstable();
        if held_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err("a qubit is held by more than one unit".into());
        }
        Ok(())
    }

    /// Checks that every itinerary starts at the sender, advances one
    /// station per hop with strictly increasing slots, and that completed
    /// qubits ended at the receiver.
    pub fn check_itineraries(&self) -> Result<(), String> {
        let receiver = self.state.receiver_index();
        for record in &self.records {
            let (first_station, first_slot) = record.hops[0];
            if first_station != 0 || first_slot != record.injected_slot {
                return Err(format!(
                    "qubit {} itinerary does not start at sender",
                    record.qubit_id
                ));
            }
            for w in record.hops.windows(2) {
                if w[1].0 != w[0].0 + 1 || w[1].1 <= w[0].1 {
                    return Err(format!("qubit {} itinerary not monotone", record.qubit_id));
                }
            }
            let last = *record.hops.last().unwrap();
            if let Some(done) = record.completed_slot {
                if last != (receiver, done) {
                    return Err(format!(
                        "qubit {} completed away from receiver",
                        record.qubit_id
                    ));
                }
            } else if last.0 >= receiver {
                return Err(format!(
                    "qubit {} reached receiver without completing",
                    record.qubit_id
                ));
            }
        }
        Ok(())
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            config: self.config,
            replication_index: self.replication_index,
            total_slots: self.state.current_slot,
            qubits: self.records,
            completion_slots: self.completion_slots,
        }
    }
}

/// Everything a finished replication produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: SimConfig,
    pub replication_index: u64,
    pub total_slots: u64,
    /// Completed and in-flight qubits, indexed by qubit id.
    pub qubits: Vec<QubitRecord>,
    /// Completion slot of every finished transfer, nondecreasing.
    pub completion_slots: Vec<u64>,
}

impl RunResult {
    pub fn completed_count(&self) -> u64 {
        self.completion_slots.len() as u64
    }

    pub fn in_flight_count(&self) -> u64 {
        self.qubits.len() as u64 - self.completed_count()
    }

    /// Transfers completed at or before `slot`.
    pub fn completed_by(&self, slot: u64) -> u64 {
        self.completion_slots.partition_point(|&c| c <= slot) as u64
    }

    /// `(slot, completed_by(slot))` every `sample_every` slots from 0, plus
    /// the final slot.
    pub fn completion_series(&self, sample_every: u64) -> Vec<(u64, u64)> {
        let step = sample_every.max(1);
        let mut out: Vec<_> = (0..=self.total_slots)
            .step_by(step as usize)
            .map(|s| (s, self.completed_by(s)))
            .collect();
        if out.last().map(|&(s, _)| s) != Some(self.total_slots) {
            out.push((self.total_slots, self.completed_by(self.total_slots)));
        }
        out
    }

    pub fn completed(&self) -> impl Iterator<Item = &QubitRecord> {
        self.qubits.iter().filter(|q| q.completed_slot.is_some())
    }
}

/// Runs one replication to its stop condition.
pub fn run(config: &SimConfig, replication_index: u64) -> Result<RunResult, EngineError> {
    run_with_cap(config, replication_index, NO_PROGRESS_SLOT_CAP)
}

/// As [`run`], with an explicit no-progress cap for completion targets.
pub fn run_with_cap(
    config: &SimConfig,
    replication_index: u64,
    slot_cap: u64,
) -> Result<RunResult, EngineError> {
    let mut sim = Simulation::new(config, replication_index)?;
    if let StopCondition::TargetCompletions(target) = config.stop {
        if config.p_success == 0.0 {
            // No segment can ever succeed.
            return Err(EngineError::NoProgress {
                target,
                completed: 0,
                slots: 0,
            });
        }
    }
    while !sim.is_finished() {
        if let StopCondition::TargetCompletions(target) = config.stop {
            if sim.state.current_slot >= slot_cap {
                return Err(EngineError::NoProgress {
                    target,
                    completed: sim.completed_count(),
                    slots: sim.state.current_slot,
                });
            }
        }
        sim.advance()?;
    }
    Ok(sim.into_result())
}
