//! Full-covariance Gaussian family `q_w = N(μ, LLᵀ)`.
//!
//! Parameters are the mean and the lower-triangular Cholesky factor. Every
//! gradient with respect to `w` is a [`FlatGradient`]: the `μ` block first,
//! then the lower triangle of `L` row by row (`L₀₀, L₁₀, L₁₁, L₂₀, …`).

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Deref, DerefMut, Mul, Sub};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, LinalgError, Result};
use crate::linalg::{self, MatrixSqrt};
use crate::model::Likelihood;
use crate::rng::Rng;

/// Floor applied to the diagonal of `L`.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Number of free parameters `D + D(D+1)/2`.
pub fn flat_len(dim: usize) -> usize {
    dim + dim * (dim + 1) / 2
}

/// Position of `∂/∂L_ij` (`j ≤ i`) in the flat layout.
pub fn tri_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(j <= i && i < dim);
    dim + i * (i + 1) / 2 + j
}

/// Recovers `D` from the flat length.
pub fn dim_from_flat_len(len: usize) -> Option<usize> {
    (0..=len).find(|&d| flat_len(d) == len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl VariationalParams {
    /// `chol` must be square, lower-triangular and match `mean`; its diagonal
    /// is floored at [`DIAG_FLOOR`].
    pub fn new(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if chol.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {d} but factor is {}x{}",
                chol.nrows(),
                chol.ncols()
            )));
        }
        if !linalg::is_lower_triangular(&chol) {
            return Err(Error::DimensionMismatch(
                "covariance factor must be lower triangular".into(),
            ));
        }
        let mut p = VariationalParams { mean, chol };
        p.floor_diagonal();
        Ok(p)
    }

    /// `μ = 0`, `L = I`.
    pub fn standard(dim: usize) -> Self {
        VariationalParams {
            mean: DVector::zeros(dim),
            chol: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn flat_len(&self) -> usize {
        flat_len(self.dim())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn to_flat(&self) -> DVector<f64> {
        FlatGradient::from_blocks(&self.mean, &self.chol).0
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        dim_from_flat_len(flat.len()).ok_or_else(|| {
            Error::DimensionMismatch(format!("{} is not a valid flat length", flat.len()))
        })?;
        let g = FlatGradient(DVector::from_column_slice(flat));
        VariationalParams::new(g.mu_block(), g.l_block())
    }

    /// `w ← w + scale · dir`, then the diagonal floor.
    pub fn add_scaled(&mut self, dir: &FlatGradient, scale: f64) {
        let d = self.dim();
        for i in 0..d {
            self.mean[i] += scale * dir[i];
        }
        for i in 0..d {
            for j in 0..=i {
                self.chol[(i, j)] += scale * dir[tri_index(d, i, j)];
            }
        }
        self.floor_diagonal();
    }

    /// Like [`VariationalParams::add_scaled`], but a column whose diagonal
    /// entry turned negative is negated first. Negating column `i` of `L`
    /// leaves `LLᵀ`, and hence `q`, unchanged. Returns the negated columns.
    pub fn add_scaled_reflecting(&mut self, dir: &FlatGradient, scale: f64) -> Vec<usize> {
        let d = self.dim();
        for i in 0..d {
            self.mean[i] += scale * dir[i];
        }
        for i in 0..d {
            for j in 0..=i {
                self.chol[(i, j)] += scale * dir[tri_index(d, i, j)];
            }
        }
        let flipped: Vec<usize> = (0..d).filter(|&i| self.chol[(i, i)] < 0.0).collect();
        for &j in &flipped {
            for i in j..d {
                self.chol[(i, j)] = -self.chol[(i, j)];
            }
        }
        self.floor_diagonal();
        flipped
    }

    fn floor_diagonal(&mut self) {
        for i in 0..self.dim() {
            if !(self.chol[(i, i)] >= DIAG_FLOOR) {
                self.chol[(i, i)] = DIAG_FLOOR;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.chol.iter()).all(|v| v.is_finite())
    }
}

/// Gradient with respect to `(μ, lower(L))` in the shared flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(pub DVector<f64>);

impl FlatGradient {
    pub fn zeros(dim: usize) -> Self {
        FlatGradient(DVector::zeros(flat_len(dim)))
    }

    /// Packs `mu` and the lower triangle of `l` (entries above the diagonal are ignored).
    pub fn from_blocks(mu: &DVector<f64>, l: &DMatrix<f64>) -> Self {
        let d = mu.len();
        let mut out = DVector::zeros(flat_len(d));
        out.rows_mut(0, d).copy_from(mu);
        let mut k = d;
        for i in 0..d {
            for j in 0..=i {
                out[k] = l[(i, j)];
                k += 1;
            }
        }
        FlatGradient(out)
    }

    /// `μ` block `g` and L block `lower(g eᵀ)`: the chain rule through `z = Lε + μ`.
    pub fn from_outer(g: &DVector<f64>, e: &DVector<f64>) -> Self {
        let d = g.len();
        let mut out = DVector::zeros(flat_len(d));
        out.rows_mut(0, d).copy_from(g);
        let mut k = d;
        for i in 0..d {
            for j in 0..=i {
                out[k] = g[i] * e[j];
                k += 1;
            }
        }
        FlatGradient(out)
    }

    pub fn dim(&self) -> usize {
        dim_from_flat_len(self.0.len()).expect("flat gradient has a valid length")
    }

    pub fn mu_block(&self) -> DVector<f64> {
        let d = self.dim();
        self.0.rows(0, d).into_owned()
    }

    /// The L block unpacked into a lower-triangular matrix.
    pub fn l_block(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut l = DMatrix::zeros(d, d);
        let mut k = d;
        for i in 0..d {
            for j in 0..=i {
                l[(i, j)] = self.0[k];
                k += 1;
            }
        }
        l
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for FlatGradient {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for FlatGradient {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

impl Add<&FlatGradient> for FlatGradient {
    type Output = FlatGradient;
    fn add(self, rhs: &FlatGradient) -> FlatGradient {
        FlatGradient(self.0 + &rhs.0)
    }
}

impl Sub<&FlatGradient> for FlatGradient {
    type Output = FlatGradient;
    fn sub(self, rhs: &FlatGradient) -> FlatGradient {
        FlatGradient(self.0 - &rhs.0)
    }
}

impl AddAssign<&FlatGradient> for FlatGradient {
    fn add_assign(&mut self, rhs: &FlatGradient) {
        self.0 += &rhs.0;
    }
}

impl Mul<f64> for FlatGradient {
    type Output = FlatGradient;
    fn mul(self, rhs: f64) -> FlatGradient {
        FlatGradient(self.0 * rhs)
    }
}

/// Parameters together with per-iteration factorizations (`L⁻¹` eagerly,
/// `√(LLᵀ)` on first use).
#[derive(Debug)]
pub struct Gaussian {
    params: VariationalParams,
    chol_inv: DMatrix<f64>,
    sqrt: OnceLock<Result<MatrixSqrt, LinalgError>>,
}

impl Gaussian {
    pub fn new(params: VariationalParams) -> Self {
        let d = params.dim();
        let chol_inv = params
            .chol
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("diagonal of L is floored above zero");
        Gaussian {
            params,
            chol_inv,
            sqrt: OnceLock::new(),
        }
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.params.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.params.chol
    }

    pub fn chol_inv(&self) -> &DMatrix<f64> {
        &self.chol_inv
    }

    pub fn sqrt(&self) -> Result<&MatrixSqrt> {
        self.sqrt
            .get_or_init(|| MatrixSqrt::new(&self.params.covariance()))
            .as_ref()
            .map_err(|e| Error::Linalg(e.clone()))
    }

    /// `z = Lε + μ`.
    pub fn transform_rp1(&self, eps: &DVector<f64>) -> DVector<f64> {
        &self.params.chol * eps + &self.params.mean
    }

    /// `z = √(LLᵀ) ε + μ`.
    pub fn transform_rp2(&self, eps: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.sqrt()?.matrix() * eps + &self.params.mean)
    }

    /// `r = L⁻¹(z − μ)`.
    pub fn whiten(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.chol_inv * (z - &self.params.mean)
    }

    pub fn log_q(&self, z: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let r = self.whiten(z);
        let log_det: f64 = self.params.chol.diagonal().iter().map(|v| v.ln()).sum();
        -log_det - 0.5 * r.norm_squared() - 0.5 * d * (2.0 * PI).ln()
    }

    /// `∇_w log q_w(z)`.
    pub fn score_grad(&self, z: &DVector<f64>) -> FlatGradient {
        let r = self.whiten(z);
        let lt_r = self.chol_inv.tr_mul(&r);
        let mut g = FlatGradient::from_outer(&lt_r, &r);
        let d = self.dim();
        for i in 0..d {
            g.0[tri_index(d, i, i)] -= 1.0 / self.params.chol[(i, i)];
        }
        g
    }
}

pub fn sample_noise(rng: &mut Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, StandardNormal.sample_iter(rng).take(dim))
}

pub fn transform_rp1(w: &VariationalParams, eps: &DVector<f64>) -> DVector<f64> {
    &w.chol * eps + &w.mean
}

pub fn transform_rp2(w: &VariationalParams, eps: &DVector<f64>) -> Result<DVector<f64>> {
    Gaussian::new(w.clone()).transform_rp2(eps)
}

pub fn log_q(w: &VariationalParams, z: &DVector<f64>) -> f64 {
    Gaussian::new(w.clone()).log_q(z)
}

pub fn score_grad(w: &VariationalParams, z: &DVector<f64>) -> FlatGradient {
    Gaussian::new(w.clone()).score_grad(z)
}

/// `(1/N) E_q[log p(Z)]` for the standard normal prior.
pub fn prior_expectation(w: &VariationalParams, n: usize) -> f64 {
    let d = w.dim() as f64;
    (-0.5 * (w.mean.norm_squared() + w.chol.norm_squared()) - 0.5 * d * (2.0 * PI).ln()) / n as f64
}

/// `(1/N) E_q[log q(Z)]`, the scaled negative entropy.
pub fn variational_expectation(w: &VariationalParams, n: usize) -> f64 {
    let d = w.dim() as f64;
    let log_det: f64 = w.chol.diagonal().iter().map(|v| v.ln()).sum();
    (-log_det - 0.5 * d * (2.0 * PI * std::f64::consts::E).ln()) / n as f64
}

/// Gradient of [`prior_expectation`]: `μ` block `−μ/N`, L block `−L/N`.
pub fn cf_prior_term_grad(w: &VariationalParams, n: usize) -> FlatGradient {
    let inv = -1.0 / n as f64;
    FlatGradient::from_blocks(&(&w.mean * inv), &(&w.chol * inv))
}

/// Gradient of [`variational_expectation`]: only the diagonal of the L block, `−1/(N L_ii)`.
pub fn cf_variational_term_grad(w: &VariationalParams, n: usize) -> FlatGradient {
    let d = w.dim();
    let mut g = FlatGradient::zeros(d);
    for i in 0..d {
        g.0[tri_index(d, i, i)] = -1.0 / (n as f64 * w.chol[(i, i)]);
    }
    g
}

/// Monte Carlo estimate of the ELBO divided by the number of examples.
///
/// The likelihood part is averaged over `n_mc` fresh draws; prior and entropy
/// parts are exact.
pub fn elbo_estimate<L: Likelihood + ?Sized>(
    w: &VariationalParams,
    lik: &L,
    n_mc: usize,
    rng: &mut Rng,
) -> f64 {
    assert!(n_mc >= 1, "elbo_estimate needs at least one sample");
    let n = lik.len();
    let mut data = 0.0;
    for _ in 0..n_mc {
        let eps = sample_noise(rng, w.dim());
        data += lik.mean_loglik(&transform_rp1(w, &eps));
    }
    data / n_mc as f64 + prior_expectation(w, n) - variational_expectation(w, n)
}
