//! Figures of merit of a run and their aggregation over replications.
//!
//! Three quantities are reported:
//!
//! - **latency**: slot at which the first transfer completes;
//! - **steady-state throughput**: OLS slope of cumulative completions against
//!   slot after a burn-in prefix;
//! - **transfer time**: `completed_slot - injected_slot` of completed qubits,
//!   together with a histogram of per-station residence times.
//!
//! [`MetricsSummary`] keeps only per-replication sufficient statistics in
//! sorted order, so [`MetricsSummary::merge`] is exactly commutative and
//! associative and every reported number is a function of the multiset of
//! replications.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RunResult;
use crate::model::SimConfig;

pub const DEFAULT_BURN_IN_FRACTION: f64 = 0.3;
/// Minimum completions after burn-in for a slope estimate.
pub const MIN_STEADY_COMPLETIONS: u64 = 10;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no completed transfer in the run")]
    NoCompletion,
    #[error(
        "insufficient data: {found} completions after burn-in (need {MIN_STEADY_COMPLETIONS})"
    )]
    InsufficientData { found: u64 },
    #[error("burn-in fraction {0} must lie in [0, 1)")]
    InvalidBurnIn(f64),
    #[error("cannot merge summaries of different configurations")]
    ConfigMismatch,
    #[error("sweep has no usable baseline point")]
    MissingBaseline,
}

pub fn latency(run: &RunResult) -> Result<u64, MetricsError> {
    run.completed()
        .filter_map(|q| q.completed_slot)
        .min()
        .ok_or(MetricsError::NoCompletion)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the regression residuals.
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares fit of `y` against `x`.
///
/// Returns `None` for fewer than two points or zero spread in `x`.
pub fn ols_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (sxx, sxy) = points.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
        let dx = x - x_mean;
        (sxx + dx * dx, sxy + dx * (y - y_mean))
    });
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let slope_se = if n > 2 {
        let ssr: f64 = points
            .iter()
            .map(|&(x, y)| {
                let r = y - (intercept + slope * x);
                r * r
            })
            .sum();
        (ssr / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LinearFit {
        slope,
        intercept,
        slope_se,
        points: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub per_slot: f64,
    pub se: f64,
}

/// Slope of cumulative completions over slots `floor(f * T)..=T`.
pub fn steady_throughput(
    run: &RunResult,
    burn_in_fraction: f64,
) -> Result<Throughput, MetricsError> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(MetricsError::InvalidBurnIn(burn_in_fraction));
    }
    let total = run.total_slots;
    let start = (burn_in_fraction * total as f64).floor() as u64;
    let after = run.completed_count() - run.completed_by(start);
    if after < MIN_STEADY_COMPLETIONS || total <= start + 1 {
        return Err(MetricsError::InsufficientData { found: after });
    }
    let mut points = Vec::with_capacity((total - start + 1) as usize);
    let mut idx = run.completion_slots.partition_point(|&c| c < start);
    for slot in start..=total {
        while idx < run.completion_slots.len() && run.completion_slots[idx] <= slot {
            idx += 1;
        }
        points.push((slot as f64, idx as f64));
    }
    let fit = ols_fit(&points).ok_or(MetricsError::InsufficientData { found: after })?;
    Ok(Throughput {
        per_slot: fit.slope,
        se: fit.slope_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTimeStats {
    pub count: u64,
    pub mean: f64,
    pub se: f64,
    pub max: u64,
    pub in_flight: u64,
    /// Slots held at one station → number of such hops.
    pub residence_histogram: BTreeMap<u64, u64>,
}

impl TransferTimeStats {
    pub fn max_residence(&self) -> Option<u64> {
        self.residence_histogram.keys().next_back().copied()
    }
}

/// Transfer-time statistics over completed qubits; in-flight ones are only
/// counted.
pub fn transfer_time_stats(run: &RunResult) -> Result<TransferTimeStats, MetricsError> {
    let moments = TransferMoments::from_run(run);
    if moments.count == 0 {
        return Err(MetricsError::NoCompletion);
    }
    Ok(TransferTimeStats {
        count: moments.count,
        mean: moments.mean(),
        se: moments.se(),
        max: moments.max,
        in_flight: run.in_flight_count(),
        residence_histogram: residence_histogram(run),
    })
}

fn residence_histogram(run: &RunResult) -> BTreeMap<u64, u64> {
    let mut hist = BTreeMap::new();
    for q in run.completed() {
        for r in q.residences() {
            *hist.entry(r).or_insert(0) += 1;
        }
    }
    hist
}

/// Integer sufficient statistics of transfer times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransferMoments {
    pub count: u64,
    pub sum: u128,
    pub sum_sq: u128,
    pub max: u64,
}

impl TransferMoments {
    pub fn from_run(run: &RunResult) -> Self {
        let mut m = Self::default();
        for t in run.completed().filter_map(|q| q.transfer_slots()) {
            m.push(t);
        }
        m
    }

    pub fn push(&mut self, t: u64) {
        self.count += 1;
        self.sum += u128::from(t);
        self.sum_sq += u128::from(t) * u128::from(t);
        self.max = self.max.max(t);
    }

    pub fn combine(&self, other: &Self) -> Self {
        Self {
            count: self.count + other.count,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
            max: self.max.max(other.max),
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum as f64 / self.count as f64
    }

    /// Sample standard deviation.
    pub fn sd(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        // Exact integer numerator: n * sum_sq - sum^2.
        let num = self.count as u128 * self.sum_sq - self.sum * self.sum;
        (num as f64 / (n * (n - 1.0))).sqrt()
    }

    pub fn se(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sd() / (self.count as f64).sqrt()
    }
}

/// Per-replication statistics kept inside a [`MetricsSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    pub latency: Option<u64>,
    pub throughput: Option<Throughput>,
    pub transfer: TransferMoments,
    pub in_flight: u64,
}

impl ReplicationStats {
    fn total_cmp(&self, other: &Self) -> Ordering {
        let key = |t: &Option<Throughput>| t.map(|t| (t.per_slot, t.se));
        self.latency
            .cmp(&other.latency)
            .then_with(|| match (key(&self.throughput), key(&other.throughput)) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(a), Some(b)) => a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)),
            })
            .then_with(|| self.transfer.cmp(&other.transfer))
            .then_with(|| self.in_flight.cmp(&other.in_flight))
    }
}

/// Mergeable summary over any number of replications of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub config: SimConfig,
    /// Sorted, so the summary depends only on the multiset of replications.
    pub per_replication: Vec<ReplicationStats>,
    pub residence_histogram: BTreeMap<u64, u64>,
}

/// Mean with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se, n })
    }

    pub fn ci95(&self) -> f64 {
        Z95 * self.se
    }

    pub fn interval95(&self) -> (f64, f64) {
        (self.mean - self.ci95(), self.mean + self.ci95())
    }

    pub fn overlaps95(&self, other: &Estimate) -> bool {
        let (a_lo, a_hi) = self.interval95();
        let (b_lo, b_hi) = other.interval95();
        a_lo <= b_hi && b_lo <= a_hi
    }
}

impl MetricsSummary {
    pub fn empty(config: SimConfig) -> Self {
        Self {
            config,
            per_replication: Vec::new(),
            residence_histogram: BTreeMap::new(),
        }
    }

    /// Summarizes one run. Missing latency or throughput (too few
    /// completions) is recorded as absent rather than failing.
    pub fn from_run(run: &RunResult, burn_in_fraction: f64) -> Self {
        Self {
            config: run.config.clone(),
            per_replication: vec![ReplicationStats {
                latency: latency(run).ok(),
                throughput: steady_throughput(run, burn_in_fraction).ok(),
                transfer: TransferMoments::from_run(run),
                in_flight: run.in_flight_count(),
            }],
            residence_histogram: residence_histogram(run),
        }
    }

    pub fn merge(&self, other: &Self) -> Result<Self, MetricsError> {
        if self.config != other.config {
            return Err(MetricsError::ConfigMismatch);
        }
        let mut per_replication: Vec<_> = self
            .per_replication
            .iter()
            .chain(&other.per_replication)
            .cloned()
            .collect();
        per_replication.sort_by(ReplicationStats::total_cmp);
        let mut residence_histogram = self.residence_histogram.clone();
        for (&k, &v) in &other.residence_histogram {
            *residence_histogram.entry(k).or_insert(0) += v;
        }
        Ok(Self {
            config: self.config.clone(),
            per_replication,
            residence_histogram,
        })
    }

    pub fn replications(&self) -> usize {
        self.per_replication.len()
    }

    /// Over replications that completed at least one transfer.
    pub fn latency(&self) -> Option<Estimate> {
        let xs: Vec<f64> = self
            .per_replication
            .iter()
            .filter_map(|r| r.latency.map(|l| l as f64))
            .collect();
        Estimate::from_samples(&xs)
    }

    /// Mean slope over replications; a single replication reports its
    /// regression standard error instead.
    pub fn throughput(&self) -> Option<Estimate> {
        let fits: Vec<Throughput> = self
            .per_replication
            .iter()
            .filter_map(|r| r.throughput)
            .collect();
        let xs: Vec<f64> = fits.iter().map(|t| t.per_slot).collect();
        let mut est = Estimate::from_samples(&xs)?;
        if est.n == 1 {
            est.se = fits[0].se;
        }
        Some(est)
    }

    pub fn transfer_moments(&self) -> TransferMoments {
        self.per_replication
            .iter()
            .fold(TransferMoments::default(), |acc, r| {
                acc.combine(&r.transfer)
            })
    }

    /// Pooled mean over all completed qubits. The standard error is taken
    /// over per-replication means when two or more replications completed
    /// transfers, otherwise over qubits.
    pub fn transfer(&self) -> Option<Estimate> {
        let pooled = self.transfer_moments();
        if pooled.count == 0 {
            return None;
        }
        let rep_means: Vec<f64> = self
            .per_replication
            .iter()
            .filter(|r| r.transfer.count > 0)
            .map(|r| r.transfer.mean())
            .collect();
        let se = if rep_means.len() > 1 {
            Estimate::from_samples(&rep_means).map_or(0.0, |e| e.se)
        } else {
            pooled.se()
        };
        Some(Estimate {
            mean: pooled.mean(),
            se,
            n: rep_means.len(),
        })
    }

    /// Distribution of per-replication mean transfer times.
    pub fn transfer_over_replications(&self) -> Option<Estimate> {
        let rep_means: Vec<f64> = self
            .per_replication
            .iter()
            .filter(|r| r.transfer.count > 0)
            .map(|r| r.transfer.mean())
            .collect();
        Estimate::from_samples(&rep_means)
    }

    pub fn max_transfer_slots(&self) -> Option<u64> {
        let m = self.transfer_moments();
        (m.count > 0).then_some(m.max)
    }

    pub fn max_residence_slots(&self) -> Option<u64> {
        self.residence_histogram.keys().next_back().copied()
    }

    pub fn completed_count(&self) -> u64 {
        self.transfer_moments().count
    }

    pub fn in_flight_count(&self) -> u64 {
        self.per_replication.iter().map(|r| r.in_flight).sum()
    }
}

/// Divides every value by the value at the smallest `M`.
pub fn normalize_sweep(points: &[(usize, f64)]) -> Result<Vec<(usize, f64)>, MetricsError> {
    let &(_, base) = points
        .iter()
        .min_by_key(|(m, _)| *m)
        .ok_or(MetricsError::MissingBaseline)?;
    if !(base > 0.0 && base.is_finite()) {
        return Err(MetricsError::MissingBaseline);
    }
    Ok(points.iter().map(|&(m, v)| (m, v / base)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Protocol, QubitId, QubitRecord, StopCondition};

    fn config() -> SimConfig {
        SimConfig {
            protocol: Protocol::Multiplexed,
            n_repeaters: 1,
            m_per_node: 1,
            p_success: 0.5,
            t0_seconds: 1.0,
            l0_meters: None,
            stop: StopCondition::MaxSlots(100),
            seed: 0,
            replications: 1,
        }
    }

    /// Single-repeater run whose qubits complete at the given
    /// `(injected, completed)` slots.
    fn synthetic(transfers: &[(u64, u64)], total: u64) -> RunResult {
        let qubits: Vec<QubitRecord> = transfers
            .iter()
            .enumerate()
            .map(|(i, &(inj, done))| {
                let mut q = QubitRecord::new(QubitId(i as u64), inj);
                q.hops.push((1, (inj + done) / 2));
                q.hops.push((2, done));
                q.completed_slot = Some(done);
                q
            })
            .collect();
        let mut completion_slots: Vec<u64> = transfers.iter().map(|t| t.1).collect();
        completion_slots.sort();
        RunResult {
            config: config(),
            replication_index: 0,
            total_slots: total,
            qubits,
            completion_slots,
        }
    }

    #[test]
    fn ols_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..1000).map(|s| (s as f64, 0.5 * s as f64)).collect();
        let fit = ols_fit(&pts).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
        assert!(ols_fit(&pts[..1]).is_none());
    }

    #[test]
    fn transfer_stats_of_synthetic_run() {
        let run = synthetic(&[(0, 10), (5, 25)], 30);
        let stats = transfer_time_stats(&run).unwrap();
        assert_eq!(stats.mean, 15.0);
        assert_eq!(stats.max, 20);
        assert_eq!(stats.count, 2);
        assert!((stats.se - 5.0).abs() < 1e-12);
        assert_eq!(latency(&run).unwrap(), 10);
    }

    #[test]
    fn empty_run_errors() {
        let run = synthetic(&[], 30);
        assert_eq!(latency(&run), Err(MetricsError::NoCompletion));
        assert_eq!(transfer_time_stats(&run), Err(MetricsError::NoCompletion));
        assert!(matches!(
            steady_throughput(&run, 0.3),
            Err(MetricsError::InsufficientData { found: 0 })
        ));
    }

    #[test]
    fn throughput_of_regular_completions() {
        // One completion every other slot.
        let transfers: Vec<(u64, u64)> = (1..=500).map(|k| (0, 2 * k)).collect();
        let run = synthetic(&transfers, 1000);
        let t = steady_throughput(&run, 0.3).unwrap();
        assert!((t.per_slot - 0.5).abs() < 1e-3, "{t:?}");
        assert!(matches!(
            steady_throughput(&run, 1.0),
            Err(MetricsError::InvalidBurnIn(_))
        ));
    }

    #[test]
    fn merge_identity_and_counts() {
        let a = MetricsSummary::from_run(&synthetic(&[(0, 10), (5, 25)], 30), 0.3);
        let b = MetricsSummary::from_run(&synthetic(&[(0, 12)], 30), 0.3);
        let empty = MetricsSummary::empty(config());
        assert_eq!(a.merge(&empty).unwrap(), a);
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab.replications(), 2);
        assert_eq!(ab, b.merge(&a).unwrap());
        let t = ab.transfer().unwrap();
        assert!((t.mean - (10.0 + 20.0 + 12.0) / 3.0).abs() < 1e-12);
        assert_eq!(ab.max_transfer_slots(), Some(20));
        assert_eq!(ab.latency().unwrap().mean, 11.0);

        let mut other = config();
        other.seed = 1;
        let c = MetricsSummary::empty(other);
        assert_eq!(a.merge(&c), Err(MetricsError::ConfigMismatch));
    }

    #[test]
    fn normalize() {
        let out = normalize_sweep(&[(2, 52.0), (1, 100.0)]).unwrap();
        assert_eq!(out, vec![(2, 0.52), (1, 1.0)]);
        let flat = normalize_sweep(&[(1, 7.0), (3, 7.0), (9, 7.0)]).unwrap();
        assert!(flat.iter().all(|&(_, v)| v == 1.0));
        assert_eq!(normalize_sweep(&[]), Err(MetricsError::MissingBaseline));
        assert_eq!(
            normalize_sweep(&[(1, 0.0)]),
            Err(MetricsError::MissingBaseline)
        );
    }

    #[test]
    fn estimate_intervals() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert!((e.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let far = Estimate {
            mean: 10.0,
            se: 0.1,
            n: 3,
        };
        assert!(!e.overlaps95(&far));
        assert!(e.overlaps95(&e));
    }
}
