//! Dense statevector check of heralded link generation by photon emission at
//! the next node and absorption at the previous node, and of the
//! teleportation hop that consumes the resulting link.
//!
//! Conventions (every correctness claim below is relative to these):
//!
//! | item | value |
//! |------|-------|
//! | basis ordering | system 0 is the most significant bit |
//! | level 0 / level 1 | electron and photon `|+1⟩` / `|-1⟩`; nuclear `|↑⟩` / `|↓⟩` |
//! | Bell outcome `ab` | `(|0 b⟩ + (-1)^a |1 b̄⟩)/√2`: 00 = Φ+, 01 = Ψ+, 10 = Φ-, 11 = Ψ- |
//! | emitted spin–photon state | Ψ+ on (electron_next, photon) |
//! | prepared electron–nuclear state | Φ+ on (electron_prev, nuclear_prev) |
//! | link target | Ψ+ on (electron_next, nuclear_prev) |
//! | H | `[[1, 1], [1, -1]]/√2` |
//!
//! Absorption is an ideal complete Bell measurement on
//! (electron_prev, photon); a failed absorption applies nothing. Fidelities
//! are `|⟨a|b⟩|²`, so global phases never matter.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

pub const MAX_SYSTEMS: usize = 5;
pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("state must have between 1 and {MAX_SYSTEMS} systems (got {0})")]
    SystemCount(usize),
    #[error("amplitude count {got} does not match 2^{systems}")]
    DimensionMismatch { systems: usize, got: usize },
    #[error("state is not normalized (squared norm {0})")]
    NotNormalized(f64),
    #[error("gate is not unitary (deviation {0:e})")]
    NotUnitary(f64),
    #[error("gate acts on {expected} systems but {got} targets were given")]
    TargetCount { expected: usize, got: usize },
    #[error("invalid or repeated system index")]
    InvalidTarget,
    #[error("system {0:?} not present in state")]
    MissingSystem(Role),
    #[error("impossible branch: Bell outcome {0} has zero probability")]
    ImpossibleBranch(BellOutcome),
    #[error("correction search failed for Bell outcome {0}")]
    CorrectionSearchFailed(BellOutcome),
}

/// Physical role of one two-level system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Photon,
    ElectronNext,
    ElectronPrev,
    NuclearPrev,
    Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: Vec<C64>,
    labels: Vec<Role>,
}

impl StateVector {
    pub fn new(amps: Vec<C64>, labels: Vec<Role>) -> Result<Self, OracleError> {
        let n = labels.len();
        if n == 0 || n > MAX_SYSTEMS {
            return Err(OracleError::SystemCount(n));
        }
        if amps.len() != 1 << n {
            return Err(OracleError::DimensionMismatch {
                systems: n,
                got: amps.len(),
            });
        }
        let state = Self { amps, labels };
        let norm = state.norm_sqr();
        if (norm - 1.0).abs() > TOLERANCE {
            return Err(OracleError::NotNormalized(norm));
        }
        Ok(state)
    }

    /// `cos(θ/2)|0⟩ + e^{iφ} sin(θ/2)|1⟩`.
    pub fn from_bloch(theta: f64, phi: f64, role: Role) -> Self {
        let amps = vec![
            C64::new((theta / 2.0).cos(), 0.0),
            C64::from_polar((theta / 2.0).sin(), phi),
        ];
        Self {
            amps,
            labels: vec![role],
        }
    }

    pub fn basis(index: usize, labels: Vec<Role>) -> Result<Self, OracleError> {
        let mut amps = vec![C64::new(0.0, 0.0); 1 << labels.len()];
        *amps.get_mut(index).ok_or(OracleError::InvalidTarget)? = C64::new(1.0, 0.0);
        Self::new(amps, labels)
    }

    pub fn systems(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[Role] {
        &self.labels
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    /// Amplitude of the basis state with the given per-system levels.
    pub fn amplitude(&self, levels: &[u8]) -> C64 {
        assert_eq!(levels.len(), self.systems());
        let idx = levels
            .iter()
            .fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1));
        self.amps[idx]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn position(&self, role: Role) -> Result<usize, OracleError> {
        self.labels
            .iter()
            .position(|&r| r == role)
            .ok_or(OracleError::MissingSystem(role))
    }

    pub fn tensor(&self, other: &Self) -> Result<Self, OracleError> {
        let n = self.systems() + other.systems();
        if n > MAX_SYSTEMS {
            return Err(OracleError::SystemCount(n));
        }
        let amps = self
            .amps
            .iter()
            .flat_map(|a| other.amps.iter().map(move |b| a * b))
            .collect();
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Ok(Self { amps, labels })
    }

    /// `|⟨self|other⟩|²`; systems are matched by role, not position.
    pub fn fidelity(&self, other: &Self) -> Result<f64, OracleError> {
        let other = other.reordered(&self.labels)?;
        let overlap: C64 = self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(overlap.norm_sqr())
    }

    /// The same state with systems permuted into `order`.
    pub fn reordered(&self, order: &[Role]) -> Result<Self, OracleError> {
        if order.len() != self.systems() {
            return Err(OracleError::SystemCount(order.len()));
        }
        let src: Vec<usize> = order
            .iter()
            .map(|&r| self.position(r))
            .collect::<Result<_, _>>()?;
        let n = self.systems();
        let mut amps = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (new_idx, amp) in amps.iter_mut().enumerate() {
            let mut old_idx = 0;
            for (new_pos, &old_pos) in src.iter().enumerate() {
                let bit = (new_idx >> (n - 1 - new_pos)) & 1;
                old_idx |= bit << (n - 1 - old_pos);
            }
            *amp = self.amps[old_idx];
        }
        Ok(Self {
            amps,
            labels: order.to_vec(),
        })
    }

    #[cfg(test)]
    fn bit_of(&self, index: usize, system: usize) -> usize {
        (index >> (self.systems() - 1 - system)) & 1
    }
}

/// A 2×2 or 4×4 matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    dim: usize,
    m: Vec<C64>,
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

impl Gate {
    pub fn new(dim: usize, m: Vec<C64>) -> Result<Self, OracleError> {
        if !(dim == 2 || dim == 4) || m.len() != dim * dim {
            return Err(OracleError::TargetCount {
                expected: dim,
                got: m.len(),
            });
        }
        Ok(Self { dim, m })
    }

    pub fn identity() -> Self {
        Pauli::I.gate()
    }

    pub fn hadamard() -> Self {
        let h = FRAC_1_SQRT_2;
        Self {
            dim: 2,
            m: vec![c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)],
        }
    }

    /// Control is the first target.
    pub fn cnot() -> Self {
        let (o, l) = (c(0.0, 0.0), c(1.0, 0.0));
        Self {
            dim: 4,
            m: vec![l, o, o, o, o, l, o, o, o, o, o, l, o, o, l, o],
        }
    }

    pub fn arity(&self) -> usize {
        if self.dim == 2 {
            1
        } else {
            2
        }
    }

    /// Max elementwise deviation of `U†U` from the identity.
    pub fn unitarity_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let v: C64 = (0..d)
                    .map(|k| self.m[k * d + i].conj() * self.m[k * d + j])
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - c(target, 0.0)).norm());
            }
        }
        worst
    }
}

/// Applies `gate` to the designated systems; identity elsewhere.
pub fn apply_gate(
    state: &StateVector,
    gate: &Gate,
    targets: &[usize],
) -> Result<StateVector, OracleError> {
    if targets.len() != gate.arity() {
        return Err(OracleError::TargetCount {
            expected: gate.arity(),
            got: targets.len(),
        });
    }
    if targets.iter().any(|&t| t >= state.systems())
        || (targets.len() == 2 && targets[0] == targets[1])
    {
        return Err(OracleError::InvalidTarget);
    }
    let err = gate.unitarity_error();
    if err > TOLERANCE {
        return Err(OracleError::NotUnitary(err));
    }
    let n = state.systems();
    let masks: Vec<usize> = targets.iter().map(|&t| 1 << (n - 1 - t)).collect();
    let all_mask: usize = masks.iter().sum();
    let sub_index = |idx: usize| {
        masks
            .iter()
            .fold(0usize, |acc, &m| (acc << 1) | usize::from(idx & m != 0))
    };
    let with_sub = |base: usize, sub: usize| {
        masks.iter().enumerate().fold(base, |acc, (k, &m)| {
            let bit = (sub >> (masks.len() - 1 - k)) & 1;
            if bit == 1 {
                acc | m
            } else {
                acc
            }
        })
    };
    let mut out = vec![c(0.0, 0.0); state.amps.len()];
    for (idx, slot) in out.iter_mut().enumerate() {
        let row = sub_index(idx);
        let base = idx & !all_mask;
        *slot = (0..gate.dim)
            .map(|col| gate.m[row * gate.dim + col] * state.amps[with_sub(base, col)])
            .sum();
    }
    Ok(StateVector {
        amps: out,
        labels: state.labels.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

    pub fn gate(self) -> Gate {
        let (o, l) = (c(0.0, 0.0), c(1.0, 0.0));
        let m = match self {
            Pauli::I => vec![l, o, o, l],
            Pauli::X => vec![o, l, l, o],
            Pauli::Y => vec![o, c(0.0, -1.0), c(0.0, 1.0), o],
            Pauli::Z => vec![l, o, o, -l],
        };
        Gate { dim: 2, m }
    }
}

impl fmt::Display for Pauli {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Two classical bits `ab` of a Bell-state measurement, packed as `2a + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BellOutcome(pub u8);

impl BellOutcome {
    pub const ALL: [BellOutcome; 4] = [
        BellOutcome(0),
        BellOutcome(1),
        BellOutcome(2),
        BellOutcome(3),
    ];

    pub fn bits(self) -> (u8, u8) {
        ((self.0 >> 1) & 1, self.0 & 1)
    }

    /// Amplitudes of the Bell vector over `|xy⟩`, `x` most significant.
    pub fn vector(self) -> [C64; 4] {
        let (a, b) = self.bits();
        let h = FRAC_1_SQRT_2;
        let sign = if a == 0 { h } else { -h };
        let mut v = [c(0.0, 0.0); 4];
        v[usize::from(b)] = c(h, 0.0);
        v[2 + usize::from(1 - b)] = c(sign, 0.0);
        v
    }
}

impl fmt::Display for BellOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.bits();
        write!(f, "{a}{b}")
    }
}

fn bell_state(outcome: BellOutcome, labels: [Role; 2]) -> StateVector {
    StateVector {
        amps: outcome.vector().to_vec(),
        labels: labels.to_vec(),
    }
}

/// Ψ+ on (electron_next, photon): `(|+1,-1⟩ + |-1,+1⟩)/√2`.
pub fn emission_state() -> StateVector {
    bell_state(EMISSION_BELL, [Role::ElectronNext, Role::Photon])
}

/// Φ+ on (electron_prev, nuclear_prev): `(|+1,↑⟩ + |-1,↓⟩)/√2`.
pub fn node_prep_state() -> StateVector {
    bell_state(PREP_BELL, [Role::ElectronPrev, Role::NuclearPrev])
}

/// The state a successful, corrected link leaves on
/// (electron_next, nuclear_prev).
pub fn link_target_state() -> StateVector {
    bell_state(LINK_TARGET_BELL, [Role::ElectronNext, Role::NuclearPrev])
}

pub const EMISSION_BELL: BellOutcome = BellOutcome(1);
pub const PREP_BELL: BellOutcome = BellOutcome(0);
pub const LINK_TARGET_BELL: BellOutcome = BellOutcome(1);

/// Projection of `pair` onto one Bell vector without removing the pair.
/// Returns the branch probability and the renormalized state.
pub fn bell_project(
    state: &StateVector,
    pair: (usize, usize),
    outcome: BellOutcome,
) -> Result<(f64, StateVector), OracleError> {
    check_pair(state, pair)?;
    let v = outcome.vector();
    let mut out = vec![c(0.0, 0.0); state.amps.len()];
    // out = |β⟩⟨β| ψ, computed per assignment of the other systems.
    let (m1, m2) = pair_masks(state, pair);
    for base in (0..state.amps.len()).filter(|i| i & (m1 | m2) == 0) {
        let idx =
            |k: usize| base | if k & 2 != 0 { m1 } else { 0 } | if k & 1 != 0 { m2 } else { 0 };
        let overlap: C64 = (0..4).map(|k| v[k].conj() * state.amps[idx(k)]).sum();
        for k in 0..4 {
            out[idx(k)] = v[k] * overlap;
        }
    }
    let prob: f64 = out.iter().map(|a| a.norm_sqr()).sum();
    if prob < TOLERANCE {
        return Err(OracleError::ImpossibleBranch(outcome));
    }
    let scale = 1.0 / prob.sqrt();
    out.iter_mut().for_each(|a| *a *= scale);
    Ok((
        prob,
        StateVector {
            amps: out,
            labels: state.labels.clone(),
        },
    ))
}

fn check_pair(state: &StateVector, pair: (usize, usize)) -> Result<(), OracleError> {
    if pair.0 == pair.1 || pair.0 >= state.systems() || pair.1 >= state.systems() {
        return Err(OracleError::InvalidTarget);
    }
    if state.systems() < 2 {
        return Err(OracleError::SystemCount(state.systems()));
    }
    Ok(())
}

fn pair_masks(state: &StateVector, pair: (usize, usize)) -> (usize, usize) {
    let n = state.systems();
    (1 << (n - 1 - pair.0), 1 << (n - 1 - pair.1))
}

/// Outcome probabilities of a Bell measurement on `pair`, in outcome order.
pub fn bell_probabilities(
    state: &StateVector,
    pair: (usize, usize),
) -> Result<[f64; 4], OracleError> {
    check_pair(state, pair)?;
    let (m1, m2) = pair_masks(state, pair);
    let mut probs = [0.0; 4];
    for base in (0..state.amps.len()).filter(|i| i & (m1 | m2) == 0) {
        let idx =
            |k: usize| base | if k & 2 != 0 { m1 } else { 0 } | if k & 1 != 0 { m2 } else { 0 };
        for (o, p) in BellOutcome::ALL.iter().zip(probs.iter_mut()) {
            let v = o.vector();
            let overlap: C64 = (0..4).map(|k| v[k].conj() * state.amps[idx(k)]).sum();
            *p += overlap.norm_sqr();
        }
    }
    Ok(probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub outcome: BellOutcome,
    pub probability: f64,
    /// State of the systems not measured, in their original order.
    pub post_state: StateVector,
}

pub enum MeasureMode<'a, R: Rng + ?Sized> {
    Forced(BellOutcome),
    Sampled(&'a mut R),
}

/// Complete Bell-state measurement of `pair`; the pair is removed from the
/// post-measurement state.
pub fn bell_measure<R: Rng + ?Sized>(
    state: &StateVector,
    pair: (usize, usize),
    mode: MeasureMode<'_, R>,
) -> Result<MeasurementRecord, OracleError> {
    let outcome = match mode {
        MeasureMode::Forced(o) => o,
        MeasureMode::Sampled(rng) => {
            let probs = bell_probabilities(state, pair)?;
            let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
            let mut acc = 0.0;
            let mut chosen = BellOutcome(3);
            for (o, p) in BellOutcome::ALL.iter().zip(probs) {
                acc += p;
                if u < acc && p > TOLERANCE {
                    chosen = *o;
                    break;
                }
            }
            chosen
        }
    };
    let (probability, projected) = bell_project(state, pair, outcome)?;
    let v = outcome.vector();
    let (m1, m2) = pair_masks(state, pair);
    let n = state.systems();
    let rest: Vec<usize> = (0..n).filter(|&s| s != pair.0 && s != pair.1).collect();
    // ⟨β| applied to the projected state leaves the rest normalized.
    let mut amps = Vec::with_capacity(1 << rest.len());
    for r in 0..(1usize << rest.len()) {
        let mut base = 0;
        for (k, &s) in rest.iter().enumerate() {
            if (r >> (rest.len() - 1 - k)) & 1 == 1 {
                base |= 1 << (n - 1 - s);
            }
        }
        let idx =
            |k: usize| base | if k & 2 != 0 { m1 } else { 0 } | if k & 1 != 0 { m2 } else { 0 };
        amps.push((0..4).map(|k| v[k].conj() * projected.amps[idx(k)]).sum());
    }
    let labels = rest.iter().map(|&s| state.labels[s]).collect();
    Ok(MeasurementRecord {
        outcome,
        probability,
        post_state: StateVector { amps, labels },
    })
}

fn forced(
    state: &StateVector,
    pair: (usize, usize),
    outcome: BellOutcome,
) -> Result<MeasurementRecord, OracleError> {
    bell_measure::<rand_chacha::ChaCha8Rng>(state, pair, MeasureMode::Forced(outcome))
}

fn apply_pauli(state: &StateVector, pauli: Pauli, role: Role) -> Result<StateVector, OracleError> {
    apply_gate(state, &pauli.gate(), &[state.position(role)?])
}

/// Pauli correction for each Bell outcome, indexed by `BellOutcome.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionTable(pub [Pauli; 4]);

impl CorrectionTable {
    pub fn get(&self, outcome: BellOutcome) -> Pauli {
        self.0[usize::from(outcome.0)]
    }
}

impl fmt::Display for CorrectionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let entries: Vec<String> = BellOutcome::ALL
            .iter()
            .map(|o| format!("{o}->{}", self.get(*o)))
            .collect();
        f.write_str(&entries.join(" "))
    }
}

/// Emission ⊗ preparation, systems (electron_next, photon, electron_prev,
/// nuclear_prev).
pub fn link_composite_state() -> StateVector {
    emission_state()
        .tensor(&node_prep_state())
        .expect("four systems fit")
}

fn absorption_pair(state: &StateVector) -> Result<(usize, usize), OracleError> {
    Ok((
        state.position(Role::ElectronPrev)?,
        state.position(Role::Photon)?,
    ))
}

fn search_pauli<F>(outcome: BellOutcome, mut fidelity_of: F) -> Result<Pauli, OracleError>
where
    F: FnMut(Pauli) -> Result<f64, OracleError>,
{
    for p in Pauli::ALL {
        if fidelity_of(p)? >= 1.0 - TOLERANCE {
            return Ok(p);
        }
    }
    Err(OracleError::CorrectionSearchFailed(outcome))
}

/// For every absorption outcome, the Pauli on nuclear_prev that turns the
/// heralded (electron_next, nuclear_prev) state into [`link_target_state`].
/// Found by exhaustive search.
pub fn derive_correction_table() -> Result<CorrectionTable, OracleError> {
    let composite = link_composite_state();
    let pair = absorption_pair(&composite)?;
    let target = link_target_state();
    let mut table = [Pauli::I; 4];
    for outcome in BellOutcome::ALL {
        let post = forced(&composite, pair, outcome)?.post_state;
        table[usize::from(outcome.0)] = search_pauli(outcome, |p| {
            apply_pauli(&post, p, Role::NuclearPrev)?.fidelity(&target)
        })?;
    }
    Ok(CorrectionTable(table))
}

/// Probe states that pin a single-system unitary down to a global phase.
fn probe_payloads() -> [StateVector; 4] {
    use std::f64::consts::{FRAC_PI_2, PI};
    [
        StateVector::from_bloch(0.0, 0.0, Role::Payload),
        StateVector::from_bloch(PI, 0.0, Role::Payload),
        StateVector::from_bloch(FRAC_PI_2, 0.0, Role::Payload),
        StateVector::from_bloch(FRAC_PI_2, FRAC_PI_2, Role::Payload),
    ]
}

fn relabel(state: &StateVector, role: Role) -> StateVector {
    StateVector {
        amps: state.amps.clone(),
        labels: vec![role],
    }
}

/// Pauli on electron_next for each outcome of the teleportation Bell
/// measurement on (payload, nuclear_prev) over the link target state.
pub fn derive_teleport_table() -> Result<CorrectionTable, OracleError> {
    let probes = probe_payloads();
    let mut table = [Pauli::I; 4];
    for outcome in BellOutcome::ALL {
        let posts = probes
            .iter()
            .map(|payload| {
                let joint = payload.tensor(&link_target_state())?;
                let pair = (
                    joint.position(Role::Payload)?,
                    joint.position(Role::NuclearPrev)?,
                );
                Ok((payload, forced(&joint, pair, outcome)?.post_state))
            })
            .collect::<Result<Vec<_>, OracleError>>()?;
        table[usize::from(outcome.0)] = search_pauli(outcome, |p| {
            let mut worst = 1.0f64;
            for (payload, post) in &posts {
                let corrected = apply_pauli(post, p, Role::ElectronNext)?;
                worst = worst.min(relabel(&corrected, Role::Payload).fidelity(payload)?);
            }
            Ok(worst)
        })?;
    }
    Ok(CorrectionTable(table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    pub outcome: String,
    pub probability: f64,
    pub fidelity: f64,
}

impl BranchResult {
    pub fn passed(&self) -> bool {
        self.fidelity >= 1.0 - TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub table: CorrectionTable,
    pub branches: Vec<BranchResult>,
}

impl LinkReport {
    pub fn probability_sum(&self) -> f64 {
        self.branches.iter().map(|b| b.probability).sum()
    }

    pub fn failing_branches(&self) -> Vec<&str> {
        self.branches
            .iter()
            .filter(|b| !b.passed())
            .map(|b| b.outcome.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing_branches().is_empty() && (self.probability_sum() - 1.0).abs() < TOLERANCE
    }
}

/// Runs all four absorption branches with the derived correction table.
pub fn link_generation_check() -> Result<LinkReport, OracleError> {
    link_generation_check_with(derive_correction_table()?)
}

/// As [`link_generation_check`] with a caller-supplied table.
pub fn link_generation_check_with(table: CorrectionTable) -> Result<LinkReport, OracleError> {
    let composite = link_composite_state();
    let pair = absorption_pair(&composite)?;
    let target = link_target_state();
    let branches = BellOutcome::ALL
        .iter()
        .map(|&outcome| {
            let m = forced(&composite, pair, outcome)?;
            let corrected = apply_pauli(&m.post_state, table.get(outcome), Role::NuclearPrev)?;
            Ok(BranchResult {
                outcome: outcome.to_string(),
                probability: m.probability,
                fidelity: corrected.fidelity(&target)?,
            })
        })
        .collect::<Result<_, OracleError>>()?;
    Ok(LinkReport { table, branches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleportReport {
    pub theta: f64,
    pub phi: f64,
    /// One entry per (absorption outcome, teleportation outcome), labelled
    /// `"ab/cd"`.
    pub branches: Vec<BranchResult>,
}

impl TeleportReport {
    pub fn min_fidelity(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| b.fidelity)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Full hop: generate the link by emission/absorption, correct it, then
/// teleport a payload given by Bloch angles from the previous node's side
/// of the link to electron_next. Every one of the 16 branches is forced.
pub fn teleport_check(theta: f64, phi: f64) -> Result<TeleportReport, OracleError> {
    teleport_check_with(
        theta,
        phi,
        derive_correction_table()?,
        derive_teleport_table()?,
    )
}

pub fn teleport_check_with(
    theta: f64,
    phi: f64,
    link_table: CorrectionTable,
    teleport_table: CorrectionTable,
) -> Result<TeleportReport, OracleError> {
    let payload = StateVector::from_bloch(theta, phi, Role::Payload);
    let full = payload.tensor(&link_composite_state())?;
    let mut branches = Vec::with_capacity(16);
    for absorbed in BellOutcome::ALL {
        let m1 = forced(&full, absorption_pair(&full)?, absorbed)?;
        let linked = apply_pauli(&m1.post_state, link_table.get(absorbed), Role::NuclearPrev)?;
        let pair = (
            linked.position(Role::Payload)?,
            linked.position(Role::NuclearPrev)?,
        );
        for sent in BellOutcome::ALL {
            let m2 = forced(&linked, pair, sent)?;
            let remote = apply_pauli(&m2.post_state, teleport_table.get(sent), Role::ElectronNext)?;
            branches.push(BranchResult {
                outcome: format!("{absorbed}/{sent}"),
                probability: m1.probability * m2.probability,
                fidelity: relabel(&remote, Role::Payload).fidelity(&payload)?,
            });
        }
    }
    Ok(TeleportReport {
        theta,
        phi,
        branches,
    })
}

/// Bloch angles of a uniformly random pure state.
pub fn random_bloch<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let cos_theta = 1.0 - 2.0 * rng.random::<f64>();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    (cos_theta.clamp(-1.0, 1.0).acos(), phi)
}
