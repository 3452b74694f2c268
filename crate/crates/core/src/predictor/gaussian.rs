//! Incremental Gaussian sufficient statistics (Welford's algorithm).

/// Running count, mean, and variance accumulator for one numeric attribute.
///
/// Used per class and per feature inside tree leaves, both for Naive-Bayes
/// likelihoods and for estimating how a candidate threshold would split the
/// class mass.
#[derive(Clone, Debug, Default)]
pub struct GaussianEstimator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl GaussianEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance; zero until two values have been seen.
    pub fn variance(&self) -> f64 {
        if self.count <= 1 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Estimated number of observed values that lie at or below `threshold`,
    /// assuming the values are normally distributed.
    ///
    /// With fewer than two observations the mass is treated as a point at the
    /// mean.
    pub fn mass_at_or_below(&self, threshold: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let sd = self.std_dev();
        if sd > 0.0 {
            self.count as f64 * normal_cdf((threshold - self.mean) / sd)
        } else if self.mean <= threshold {
            self.count as f64
        } else {
            0.0
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_two_pass_statistics() {
        let values = [1.5, 2.0, 4.25, -0.5, 3.125, 2.0];
        let mut est = GaussianEstimator::new();
        for v in values {
            est.add(v);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        assert!((est.mean() - mean).abs() < 1e-12);
        assert!((est.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn variance_is_zero_below_two_samples() {
        let mut est = GaussianEstimator::new();
        assert_eq!(est.variance(), 0.0);
        est.add(5.0);
        assert_eq!(est.variance(), 0.0);
    }

    #[test]
    fn mass_split_is_consistent() {
        let mut est = GaussianEstimator::new();
        for v in [1.0, 2.0, 3.0, 4.0, 5.0] {
            est.add(v);
        }
        let below = est.mass_at_or_below(3.0);
        assert!((below - 2.5).abs() < 1e-9); // 3.0 is the mean
        assert!(est.mass_at_or_below(f64::INFINITY) - 5.0 < 1e-9);
        assert_eq!(est.mass_at_or_below(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn degenerate_distribution_is_a_point_mass() {
        let mut est = GaussianEstimator::new();
        est.add(2.0);
        est.add(2.0);
        assert_eq!(est.mass_at_or_below(1.9), 0.0);
        assert_eq!(est.mass_at_or_below(2.0), 2.0);
    }
}
