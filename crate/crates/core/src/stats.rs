//! Small summary-statistics helpers shared by the checks, the engine and the
//! harness.

use nalgebra::DVector;
use rand::Rng as _;

use crate::rng::Rng;

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-coordinate running sums for vector-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMoments {
    pub n: usize,
    sum: DVector<f64>,
    sum_sq: DVector<f64>,
}

impl VectorMoments {
    pub fn new(len: usize) -> Self {
        VectorMoments {
            n: 0,
            sum: DVector::zeros(len),
            sum_sq: DVector::zeros(len),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x.component_mul(x);
    }

    pub fn merge(&mut self, other: &VectorMoments) {
        self.n += other.n;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.sum / self.n as f64
    }

    /// Standard error of each coordinate's mean.
    pub fn stderr(&self) -> DVector<f64> {
        let n = self.n as f64;
        let mean = self.mean();
        DVector::from_fn(self.sum.len(), |i, _| {
            let var = ((self.sum_sq[i] - n * mean[i] * mean[i]) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
    }

    /// Largest `|mean_i| / (k·SE_i + slack)`; at most 1 means every
    /// coordinate is within `k` standard errors.
    pub fn worst_z_ratio(&self, k: f64, slack: f64) -> f64 {
        let mean = self.mean();
        let se = self.stderr();
        mean.iter()
            .zip(se.iter())
            .map(|(m, s)| m.abs() / (k * s + slack))
            .fold(0.0, f64::max)
    }
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_interval(values: &[f64], level: f64, resamples: usize, rng: &mut Rng) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = ((resamples as f64) * tail).floor() as usize;
    let hi = (((resamples as f64) * (1.0 - tail)).ceil() as usize).min(resamples) - 1;
    (means[lo], means[hi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn mean_stderr_values() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn vector_moments_match_scalar() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let mut vm = VectorMoments::new(1);
        for x in xs {
            vm.push(&DVector::from_element(1, x));
        }
        let (m, s) = mean_stderr(&xs);
        assert!((vm.mean()[0] - m).abs() < 1e-15);
        assert!((vm.stderr()[0] - s).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let v: Vec<f64> = (0..200).map(|i| (i % 10) as f64).collect();
        let (lo, hi) = bootstrap_mean_interval(&v, 0.99, 2000, &mut stream(0, Purpose::Checks, 0));
        assert!(lo < 4.5 && 4.5 < hi && hi - lo < 1.5);
    }
}
