//! Pass/fail wrapper around the statevector oracle checks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repeater_core::oracle::{
    bell_probabilities, derive_correction_table, derive_teleport_table, link_composite_state,
    link_generation_check_with, random_bloch, teleport_check_with, BellOutcome, BranchResult,
    CorrectionTable, OracleError, Role, TOLERANCE,
};
use repeater_core::VERSION;
use serde::Serialize;

pub const DEFAULT_PAYLOADS: usize = 100;

/// Knobs for the suite. The table overrides exist so tests can inject a
/// wrong correction and watch the suite fail.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub payloads: usize,
    pub seed: u64,
    pub link_table: Option<CorrectionTable>,
    pub teleport_table: Option<CorrectionTable>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            payloads: DEFAULT_PAYLOADS,
            seed: 0,
            link_table: None,
            teleport_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSuiteReport {
    pub version: &'static str,
    pub passed: bool,
    /// Derived absorption-outcome corrections on the nuclear spin.
    pub correction_table: BTreeMap<String, String>,
    /// Derived teleportation-outcome corrections on the next electron.
    pub teleport_table: BTreeMap<String, String>,
    pub link_branches: Vec<BranchResult>,
    pub composite_outcome_probabilities: BTreeMap<String, f64>,
    pub teleport_payloads: usize,
    pub teleport_min_fidelity: f64,
    pub failures: Vec<String>,
}

fn table_map(t: &CorrectionTable) -> BTreeMap<String, String> {
    BellOutcome::ALL
        .iter()
        .map(|&o| (o.to_string(), t.get(o).to_string()))
        .collect()
}

pub fn oracle_suite() -> Result<OracleSuiteReport, OracleError> {
    oracle_suite_with(&OracleOptions::default())
}

pub fn oracle_suite_with(opts: &OracleOptions) -> Result<OracleSuiteReport, OracleError> {
    let derived_link = derive_correction_table()?;
    let derived_tele = derive_teleport_table()?;
    let link_table = opts.link_table.unwrap_or(derived_link);
    let tele_table = opts.teleport_table.unwrap_or(derived_tele);
    let mut failures = Vec::new();

    let link = link_generation_check_with(link_table)?;
    for b in link.branches.iter().filter(|b| !b.passed()) {
        failures.push(format!(
            "link branch {}: fidelity {}",
            b.outcome, b.fidelity
        ));
    }
    if (link.probability_sum() - 1.0).abs() >= TOLERANCE {
        failures.push(format!(
            "link branch probabilities sum to {}",
            link.probability_sum()
        ));
    }

    let composite = link_composite_state();
    let pair = (
        composite.position(Role::ElectronPrev)?,
        composite.position(Role::Photon)?,
    );
    let probs = bell_probabilities(&composite, pair)?;
    for (o, p) in BellOutcome::ALL.iter().zip(probs) {
        if (p - 0.25).abs() >= TOLERANCE {
            failures.push(format!(
                "composite outcome {o}: probability {p}, expected 1/4"
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut min_fidelity = f64::INFINITY;
    for k in 0..opts.payloads {
        let (theta, phi) = random_bloch(&mut rng);
        let report = teleport_check_with(theta, phi, link_table, tele_table)?;
        min_fidelity = min_fidelity.min(report.min_fidelity());
        for b in report.branches.iter().filter(|b| !b.passed()) {
            failures.push(format!(
                "teleport payload {k} (theta={theta}, phi={phi}) branch {}: fidelity {}",
                b.outcome, b.fidelity
            ));
        }
    }

    Ok(OracleSuiteReport {
        version: VERSION,
        passed: failures.is_empty(),
        correction_table: table_map(&link_table),
        teleport_table: table_map(&tele_table),
        link_branches: link.branches,
        composite_outcome_probabilities: BellOutcome::ALL
            .iter()
            .zip(probs)
            .map(|(o, p)| (o.to_string(), p))
            .collect(),
        teleport_payloads: opts.payloads,
        teleport_min_fidelity: min_fidelity,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use repeater_core::oracle::Pauli;

    #[test]
    fn default_suite_passes_and_reports_table() {
        let r = oracle_suite().unwrap();
        assert!(r.passed, "{:?}", r.failures);
        assert_eq!(r.correction_table.len(), 4);
        assert!(r.correction_table.values().any(|p| p == "I"));
        assert!(r.teleport_min_fidelity >= 1.0 - TOLERANCE);
        assert_eq!(r.teleport_payloads, 100);
    }

    #[test]
    fn wrong_link_table_fails_naming_branches() {
        let mut t = derive_correction_table().unwrap();
        t.0.swap(0, 3);
        let r = oracle_suite_with(&OracleOptions {
            link_table: Some(t),
            payloads: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.failures.iter().any(|f| f.starts_with("link branch 00")));
        assert!(r.failures.iter().any(|f| f.starts_with("link branch 11")));
        assert!(!r.failures.iter().any(|f| f.starts_with("link branch 01")));
    }

    #[test]
    fn wrong_teleport_table_fails() {
        let r = oracle_suite_with(&OracleOptions {
            teleport_table: Some(CorrectionTable([Pauli::I; 4])),
            payloads: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.failures.iter().all(|f| f.starts_with("teleport payload")));
    }
}
