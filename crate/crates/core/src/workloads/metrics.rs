use std::collections::BTreeMap;

use crate::scar_engine::AbortReason;
use crate::transport::{Counters, SimTime};

/// Validation message rounds of committed transactions, split by whether
/// the transaction needed remote locks and remote read validation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundStats {
    /// (remote lock and remote validation work, rounds) -> transactions.
    pub by_shape: BTreeMap<(bool, u32), u64>,
}

impl RoundStats {
    pub fn record(&mut self, eligible: bool, rounds: u32) {
        *self.by_shape.entry((eligible, rounds)).or_default() += 1;
    }

    pub fn eligible(&self) -> u64 {
        self.by_shape.iter().filter(|((e, _), _)| *e).map(|(_, n)| n).sum()
    }

    /// Eligible transactions that used exactly `rounds` rounds.
    pub fn eligible_with(&self, rounds: u32) -> u64 {
        self.by_shape.get(&(true, rounds)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// Transaction attempts, including retries.
    pub attempted: u64,
    pub committed: u64,
    pub aborts: BTreeMap<AbortReason, u64>,
    /// Commit-request latency (start of first attempt to lock release) of
    /// every committed transaction, in completion order.
    pub latencies: Vec<SimTime>,
    pub messages: Counters,
    /// Simulated time the measured interval covered.
    pub elapsed: SimTime,
    pub si_committed: u64,
    /// SI transactions whose read and commit timestamps coincide.
    pub si_serializable: u64,
    /// Read-set entries served by a backup replica that reached validation.
    pub backup_reads_checked: u64,
    /// ...and of those, the ones validated without contacting the primary.
    pub backup_reads_local: u64,
    /// Committed transactions undone by a failure rollback.
    pub rolled_back: u64,
    pub rounds: RoundStats,
}

impl Metrics {
    pub fn aborted(&self) -> u64 {
        self.aborts.values().sum()
    }

    pub fn record_abort(&mut self, reason: AbortReason) {
        *self.aborts.entry(reason).or_default() += 1;
    }

    /// Committed transactions per simulated second.
    pub fn throughput(&self) -> f64 {
        if self.elapsed == 0 {
            return 0.0;
        }
        self.committed as f64 / (self.elapsed as f64 / 1e9)
    }

    pub fn abort_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.aborted() as f64 / self.attempted as f64
        }
    }

    /// Messages of all kinds per committed transaction.
    pub fn per_commit(&self, count: u64) -> f64 {
        if self.committed == 0 {
            0.0
        } else {
            count as f64 / self.committed as f64
        }
    }

    pub fn si_serializable_fraction(&self) -> f64 {
        if self.si_committed == 0 {
            0.0
        } else {
            self.si_serializable as f64 / self.si_committed as f64
        }
    }

    pub fn backup_local_validation_rate(&self) -> f64 {
        if self.backup_reads_checked == 0 {
            0.0
        } else {
            self.backup_reads_local as f64 / self.backup_reads_checked as f64
        }
    }

    /// Nearest-rank percentile of commit-request latency, `q` in `[0, 1]`.
    pub fn latency_percentile(&self, q: f64) -> SimTime {
        percentile(&self.sorted_latencies(), q)
    }

    pub fn sorted_latencies(&self) -> Vec<SimTime> {
        let mut v = self.latencies.clone();
        v.sort_unstable();
        v
    }

    /// `(latency, cumulative fraction)` at each distinct latency, at most
    /// `points` samples spread evenly over the ranks.
    pub fn latency_cdf(&self, points: usize) -> Vec<(SimTime, f64)> {
        let sorted = self.sorted_latencies();
        let n = sorted.len();
        if n == 0 || points == 0 {
            return Vec::new();
        }
        let step = n.div_ceil(points).max(1);
        let mut out: Vec<(SimTime, f64)> = (step - 1..n).step_by(step).map(|i| (sorted[i], (i + 1) as f64 / n as f64)).collect();
        if out.last().map(|p| p.1) != Some(1.0) {
            out.push((sorted[n - 1], 1.0));
        }
        out
    }
}

pub fn percentile(sorted: &[SimTime], q: f64) -> SimTime {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<SimTime> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.5), 50);
        assert_eq!(percentile(&v, 0.9), 90);
        assert_eq!(percentile(&v, 0.99), 99);
        assert_eq!(percentile(&v, 0.0), 1);
        assert_eq!(percentile(&v, 1.0), 100);
        assert_eq!(percentile(&[], 0.5), 0);
    }

    #[test]
    fn cdf_ends_at_one() {
        let m = Metrics { latencies: vec![5, 1, 3, 2, 4], ..Default::default() };
        let cdf = m.latency_cdf(2);
        assert_eq!(cdf.last(), Some(&(5, 1.0)));
        assert!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
    }

    #[test]
    fn rates() {
        let mut m = Metrics { attempted: 10, committed: 8, elapsed: 2_000_000_000, ..Default::default() };
        m.record_abort(AbortReason::Busy);
        m.record_abort(AbortReason::Stale);
        assert_eq!(m.aborted(), 2);
        assert_eq!(m.throughput(), 4.0);
        assert!((m.abort_rate() - 0.2).abs() < 1e-12);
    }
}
