//! Bayesian logistic regression: dataset ingestion, minibatching and the
//! per-example log-likelihood with its derivatives in the weights `z`.
//!
//! Labels are folded into signed inputs `x̃ₙ = yₙ xₙ`; the likelihood of an
//! example is then `ℓ(zᵀx̃ₙ)` with `ℓ(u) = −log(1 + e^{−u})`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `ℓ(u) = log σ(u)`, overflow-safe.
pub fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `(ℓ, ℓ′, ℓ″, ℓ‴)` at `u`.
pub fn logistic_derivs(u: f64) -> [f64; 4] {
    let s = sigmoid(u);
    let sb = sigmoid(-u);
    [log_sigmoid(u), sb, -s * sb, -s * sb * (sb - s)]
}

/// Anything with an average per-example log-likelihood, for ELBO evaluation.
pub trait Likelihood: Sync {
    fn len(&self) -> usize;
    /// `(1/N) Σₙ log p(xₙ | z)`.
    fn mean_loglik(&self, z: &DVector<f64>) -> f64;
}

#[derive(Debug, Clone)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Vec<f64>,
    /// Column `n` is `yₙ xₙ`.
    signed: DMatrix<f64>,
    mean: DVector<f64>,
    second_moment: DMatrix<f64>,
}

impl Dataset {
    /// Builds a dataset from a ready design matrix (bias already included) and ±1 labels.
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset("<memory>".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some((line, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y != 1.0 && y != -1.0)
        {
            return Err(Error::Label {
                path: "<memory>".into(),
                line: line + 1,
                value,
            });
        }
        let n = features.nrows();
        let mut signed = features.transpose();
        for (j, &y) in labels.iter().enumerate() {
            signed.column_mut(j).scale_mut(y);
        }
        let mean = signed.column_mean();
        let second_moment = (&signed * signed.transpose()) / n as f64;
        Ok(Dataset {
            features,
            labels,
            signed,
            mean,
            second_moment,
        })
    }

    /// Standardizes raw feature rows, appends a bias column and maps labels to ±1.
    pub fn from_raw(rows: &[Vec<f64>], labels: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("<memory>".into()));
        }
        let n = rows.len();
        let p = rows[0].len();
        let mut x = DMatrix::<f64>::zeros(n, p + 1);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "row {} has {} features, expected {p}",
                    i + 1,
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                x[(i, j)] = v;
            }
            x[(i, p)] = 1.0;
        }
        for j in 0..p {
            let col = x.column(j);
            let mu = col.mean();
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mu.abs().max(1.0) {
                x.column_mut(j).apply(|v| *v = (*v - mu) / sd);
            }
        }
        let mut y = Vec::with_capacity(n);
        for (i, &l) in labels.iter().enumerate() {
            y.push(map_label(l).ok_or(Error::Label {
                path: "<memory>".into(),
                line: i + 1,
                value: l,
            })?);
        }
        Dataset::new(x, y)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Latent dimension `D` (features plus bias).
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn signed(&self, n: usize) -> DVectorView<'_, f64> {
        self.signed.column(n)
    }

    /// `m = (1/N) Σ x̃ₙ`.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `S = (1/N) Σ x̃ₙ x̃ₙᵀ`.
    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    pub fn margin(&self, n: usize, z: &DVector<f64>) -> f64 {
        self.signed.column(n).dot(z)
    }
}

impl Likelihood for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn mean_loglik(&self, z: &DVector<f64>) -> f64 {
        let margins = self.signed.tr_mul(z);
        margins.iter().map(|&u| log_sigmoid(u)).sum::<f64>() / self.labels.len() as f64
    }
}

fn map_label(l: f64) -> Option<f64> {
    if l == 1.0 {
        Some(1.0)
    } else if l == 0.0 || l == -1.0 {
        Some(-1.0)
    } else {
        None
    }
}

/// Reads a CSV of numeric features with the label in the last column.
///
/// A first row containing any non-numeric cell is taken as a header.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let line = i + 1;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, &str>> = record
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| c))
            .collect();
        if let Some(bad) = parsed.iter().find_map(|r| r.as_ref().err()) {
            if i == 0 {
                continue;
            }
            return Err(Error::Parse {
                path: path.into(),
                line,
                token: bad.to_string(),
            });
        }
        let mut values: Vec<f64> = parsed.into_iter().map(|r| r.unwrap()).collect();
        let label = values.pop().ok_or(Error::Parse {
            path: path.into(),
            line,
            token: String::new(),
        })?;
        if map_label(label).is_none() {
            return Err(Error::Label {
                path: path.into(),
                line,
                value: label,
            });
        }
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if first != values.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    token: format!("{} columns, expected {}", values.len() + 1, first + 1),
                });
            }
        }
        rows.push(values);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.into()));
    }
    Dataset::from_raw(&rows, &labels)
}

/// Indices into a dataset of `n` examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch(pub Vec<usize>);

impl Minibatch {
    pub fn full(n: usize) -> Self {
        Minibatch((0..n).collect())
    }

    pub fn single(index: usize) -> Self {
        Minibatch(vec![index])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `b` indices drawn uniformly without replacement from `0..n`.
pub fn sample_minibatch(rng: &mut Rng, n: usize, b: usize) -> Result<Minibatch> {
    if b == 0 || b > n {
        return Err(Error::BadBatchSize { batch: b, n });
    }
    Ok(Minibatch(index::sample(rng, n, b).into_vec()))
}

#[derive(Debug, Clone)]
pub struct LogLik {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Batch-averaged log-likelihood with gradient and Hessian in `z`.
pub fn loglik(z: &DVector<f64>, batch: &Minibatch, ds: &Dataset) -> LogLik {
    let d = ds.dim();
    let mut value = 0.0;
    let mut grad = DVector::<f64>::zeros(d);
    let mut hess = DMatrix::<f64>::zeros(d, d);
    for &n in &batch.0 {
        let x = ds.signed(n);
        let [l, l1, l2, _] = logistic_derivs(x.dot(z));
        value += l;
        grad.axpy(l1, &x, 1.0);
        hess.ger(l2, &x, &x, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    LogLik {
        value: value * inv,
        grad: grad * inv,
        hess: hess * inv,
    }
}

/// Gradient of `ℓ(zᵀx̃ₙ)` for one example, without the Hessian.
pub fn example_grad(z: &DVector<f64>, n: usize, ds: &Dataset) -> DVector<f64> {
    let x = ds.signed(n);
    x * sigmoid(-x.dot(z))
}

/// Standard normal log-density and its gradient.
pub fn log_prior(z: &DVector<f64>) -> (f64, DVector<f64>) {
    let d = z.len() as f64;
    let value = -0.5 * z.norm_squared() - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    (value, -z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn toy(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = stream(seed, Purpose::Checks, 0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        Dataset::from_raw(&rows, &labels).unwrap()
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-12);
        assert!(log_sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn two_row_file_is_standardized() {
        let ds = parse_dataset("1,0\n-1,1\n", Path::new("t.csv")).unwrap();
        assert_eq!(ds.features().column(0).as_slice(), &[1.0, -1.0]);
        assert_eq!(ds.features().column(1).as_slice(), &[1.0, 1.0]);
        assert_eq!(ds.labels(), &[-1.0, 1.0]);
    }

    #[test]
    fn header_row_is_skipped_and_labels_all_one_are_accepted() {
        let ds = parse_dataset("a,b,label\n1,2,1\n3,5,1\n0,1,1\n", Path::new("t.csv")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 3);
        assert!(ds.labels().iter().all(|&y| y == 1.0));
    }

    #[test]
    fn parse_errors() {
        let p = Path::new("t.csv");
        assert!(matches!(
            parse_dataset("1,0\nfoo,1\n", p),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_dataset("1,0\n2,3\n", p),
            Err(Error::Label { line: 2, .. })
        ));
        assert!(matches!(parse_dataset("", p), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse_dataset("x,y\n", p), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn constant_column_left_unscaled() {
        let rows = vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]];
        let ds = Dataset::from_raw(&rows, &[1.0, 0.0, 1.0]).unwrap();
        assert!(ds.features().column(0).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn cached_moments_match_recomputation() {
        let ds = toy(1, 40, 3);
        let mut m = DVector::zeros(ds.dim());
        let mut s = DMatrix::zeros(ds.dim(), ds.dim());
        for n in 0..ds.len() {
            let x = ds.features().row(n).transpose() * ds.labels()[n];
            m += &x;
            s += &x * x.transpose();
        }
        m /= ds.len() as f64;
        s /= ds.len() as f64;
        assert!((m - ds.mean()).norm() < 1e-12);
        assert!((s - ds.second_moment()).norm() < 1e-12);
    }

    #[test]
    fn minibatch_sampling() {
        let mut rng = stream(3, Purpose::Pairs, 0);
        let mut full = sample_minibatch(&mut rng, 10, 10).unwrap().0;
        full.sort();
        assert_eq!(full, (0..10).collect::<Vec<_>>());

        let a = sample_minibatch(&mut stream(4, Purpose::Pairs, 0), 100, 10).unwrap();
        let b = sample_minibatch(&mut stream(4, Purpose::Pairs, 0), 100, 10).unwrap();
        assert_eq!(a, b);
        let mut u = a.0.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 10);

        assert!(matches!(
            sample_minibatch(&mut rng, 5, 6),
            Err(Error::BadBatchSize { .. })
        ));
        assert!(matches!(
            sample_minibatch(&mut rng, 5, 0),
            Err(Error::BadBatchSize { .. })
        ));
    }

    #[test]
    fn minibatch_means_are_unbiased() {
        let ds = toy(5, 30, 2);
        let mut rng = stream(6, Purpose::Pairs, 0);
        let draws = 100_000;
        let b = 10;
        let d = ds.dim();
        let mut sum = DVector::<f64>::zeros(d);
        let mut sumsq = DVector::<f64>::zeros(d);
        for _ in 0..draws {
            let mb = sample_minibatch(&mut rng, ds.len(), b).unwrap();
            let mut avg = DVector::<f64>::zeros(d);
            for &n in &mb.0 {
                avg += ds.signed(n);
            }
            avg /= b as f64;
            sumsq += avg.component_mul(&avg);
            sum += avg;
        }
        let mean = &sum / draws as f64;
        for j in 0..d {
            let var = sumsq[j] / draws as f64 - mean[j] * mean[j];
            let se = (var / draws as f64).sqrt();
            assert!((mean[j] - ds.mean()[j]).abs() <= 3.0 * se + 1e-12, "coord {j}");
        }
    }

    #[test]
    fn loglik_at_zero() {
        let ds = toy(7, 12, 3);
        let batch = Minibatch(vec![0, 3, 5, 7]);
        let z = DVector::zeros(ds.dim());
        let ll = loglik(&z, &batch, &ds);
        assert!((ll.value + 2f64.ln()).abs() < 1e-15);
        let mut g = DVector::zeros(ds.dim());
        let mut h = DMatrix::zeros(ds.dim(), ds.dim());
        for &n in &batch.0 {
            g += ds.signed(n) * 0.5;
            h -= ds.signed(n) * ds.signed(n).transpose() * 0.25;
        }
        assert!((ll.grad - g / 4.0).norm() < 1e-15);
        assert!((ll.hess - h / 4.0).norm() < 1e-15);
    }

    #[test]
    fn log_prior_values() {
        let (v, g) = log_prior(&DVector::zeros(2));
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert_eq!(g, DVector::zeros(2));
        let (_, g) = log_prior(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(g.as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn singleton_batches_average_to_full_gradient() {
        let ds = toy(8, 25, 3);
        let z = DVector::from_vec(vec![0.3, -0.7, 1.1, 0.2]);
        let full = loglik(&z, &Minibatch::full(ds.len()), &ds);
        let mut g = DVector::zeros(ds.dim());
        for n in 0..ds.len() {
            g += loglik(&z, &Minibatch::single(n), &ds).grad;
            assert!((example_grad(&z, n, &ds) - loglik(&z, &Minibatch::single(n), &ds).grad).norm() < 1e-15);
        }
        assert!((g / ds.len() as f64 - full.grad).norm() < 1e-14);
        assert!((full.value - ds.mean_loglik(&z)).abs() < 1e-14);
    }
}
