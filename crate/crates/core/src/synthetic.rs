//! Deterministic synthetic datasets.
//!
//! Two are bundled under `data/`: small 2-D Gaussian blobs and an
//! australian-sized stand-in (690 rows, 14 features) drawn from a logistic
//! model with correlated inputs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{self, Dataset};
use crate::rng::{stream, Purpose};

/// Raw rows with 0/1 labels, before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl RawData {
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::from_raw(&self.rows, &self.labels)
    }

    /// CSV with a header row and the label in the last column.
    pub fn to_csv(&self) -> String {
        let p = self.rows.first().map_or(0, Vec::len);
        let mut out = String::new();
        for j in 0..p {
            let _ = write!(out, "x{},", j + 1);
        }
        out.push_str("label\n");
        for (row, label) in self.rows.iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", *label as i64);
        }
        out
    }
}

/// Two overlapping isotropic blobs in the plane, centred at `±(1, 0.5)`.
pub fn raw_gaussian_blobs(n: usize, seed: u64) -> RawData {
    let mut rng = stream(seed, Purpose::Checks, u64::MAX - 1);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let sign = if label > 0.5 { 1.0 } else { -1.0 };
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        rows.push(vec![sign + a, 0.5 * sign + b]);
        labels.push(label);
    }
    RawData { rows, labels }
}

pub fn gaussian_blobs(n: usize, seed: u64) -> Dataset {
    raw_gaussian_blobs(n, seed)
        .to_dataset()
        .expect("blob data is well formed")
}

/// Logistic-model data with `p` correlated features. Labels are drawn from
/// `σ(xᵀβ)` with a fixed sparse-ish coefficient vector, so classes overlap.
pub fn raw_logistic(n: usize, p: usize, seed: u64) -> RawData {
    let mut rng = stream(seed, Purpose::Checks, u64::MAX - 2);
    let beta: Vec<f64> = (0..p)
        .map(|j| {
            let s: f64 = StandardNormal.sample(&mut rng);
            if j % 3 == 2 { 0.1 * s } else { s }
        })
        .collect();
    // AR(1)-style mixing gives neighbouring columns correlation 0.5
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(p);
        let mut prev = 0.0;
        for j in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = if j == 0 { e } else { 0.5 * prev + 0.75f64.sqrt() * e };
            row.push(v);
            prev = v;
        }
        let u: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
        let label = if rng.random::<f64>() < model::sigmoid(u) { 1.0 } else { 0.0 };
        rows.push(row);
        labels.push(label);
    }
    RawData { rows, labels }
}

pub const AUSTRALIAN_ROWS: usize = 690;
pub const AUSTRALIAN_FEATURES: usize = 14;

pub fn raw_australian_like(seed: u64) -> RawData {
    raw_logistic(AUSTRALIAN_ROWS, AUSTRALIAN_FEATURES, seed)
}

pub fn australian_like(seed: u64) -> Dataset {
    raw_australian_like(seed)
        .to_dataset()
        .expect("synthetic data is well formed")
}

/// Random instance with `dim` latent dimensions (including the bias).
pub fn random_instance(n: usize, dim: usize, seed: u64) -> Dataset {
    assert!(dim >= 2, "need at least one feature besides the bias");
    raw_logistic(n, dim - 1, seed)
        .to_dataset()
        .expect("synthetic data is well formed")
}

/// A random lower-triangular factor with diagonal in `[0.5, 1.5]` and a mean
/// with standard normal entries.
pub fn random_params(dim: usize, seed: u64) -> crate::varfam::VariationalParams {
    let mut rng = stream(seed, Purpose::Checks, u64::MAX - 3);
    let mean = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let chol = DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            0.5 + rng.random::<f64>()
        } else if j < i {
            let s: f64 = StandardNormal.sample(&mut rng);
            0.3 * s
        } else {
            0.0
        }
    });
    crate::varfam::VariationalParams::new(mean, chol).expect("positive diagonal")
}
