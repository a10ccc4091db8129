use std::sync::Arc;

use rand::Rng;

/// Zipfian ranks in `[0, n)` with `P(k) ∝ 1 / (k + 1)^theta`.
///
/// Uses the rejection-free generator of Gray et al. ("Quickly generating
/// billion-record synthetic databases"). The two most popular ranks are
/// drawn exactly; the tail uses the closed-form inverse. The inverse is
/// undefined at `theta == 1`, where a cumulative table is used instead.
#[derive(Debug, Clone)]
pub struct Zipf {
    n: u64,
    theta: f64,
    zeta_n: f64,
    alpha: f64,
    eta: f64,
    half_pow_theta: f64,
    cdf: Option<Arc<Vec<f64>>>,
}

/// `sum_{i=1..n} 1 / i^theta`.
pub fn zeta(n: u64, theta: f64) -> f64 {
    (1..=n).map(|i| (i as f64).powf(-theta)).sum()
}

impl Zipf {
    pub fn new(n: u64, theta: f64) -> Zipf {
        assert!(n >= 1, "zipf needs at least one item");
        assert!(theta >= 0.0 && theta.is_finite(), "zipf theta must be non-negative");
        let zeta_n = zeta(n, theta);
        let zeta_2 = zeta(2.min(n), theta);
        let near_one = (theta - 1.0).abs() < 1e-9;
        let (alpha, eta) = if near_one || n < 3 {
            (0.0, 0.0)
        } else {
            (1.0 / (1.0 - theta), (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta_2 / zeta_n))
        };
        let cdf = (near_one && n > 2).then(|| {
            let mut acc = 0.0;
            let table: Vec<f64> = (1..=n)
                .map(|i| {
                    acc += (i as f64).powf(-theta) / zeta_n;
                    acc
                })
                .collect();
            Arc::new(table)
        });
        Zipf { n, theta, zeta_n, alpha, eta, half_pow_theta: 0.5f64.powf(theta), cdf }
    }

    pub fn items(&self) -> u64 {
        self.n
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Analytic probability of rank 0.
    pub fn head_probability(&self) -> f64 {
        1.0 / self.zeta_n
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.n == 1 {
            return 0;
        }
        if self.theta == 0.0 {
            return rng.gen_range(0..self.n);
        }
        let u: f64 = rng.gen();
        let uz = u * self.zeta_n;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + self.half_pow_theta || self.n == 2 {
            return 1;
        }
        if let Some(cdf) = &self.cdf {
            let idx = cdf.partition_point(|&c| c < u) as u64;
            return idx.min(self.n - 1);
        }
        let rank = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        rank.clamp(2, self.n - 1)
    }
}
