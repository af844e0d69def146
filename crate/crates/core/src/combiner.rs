//! Choosing weights for a control-variate ensemble and assembling
//! `ĝ = h + C a`.

use nalgebra::{DMatrix, DVector};

use crate::cv::CvMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::varfam::FlatGradient;

/// Largest condition number accepted by the weight solvers.
pub const MAX_CONDITION: f64 = 1e12;

/// Exponentially averaged `E[CᵀC]` and `E[Cᵀh]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAverages {
    pub cc: DMatrix<f64>,
    pub ch: DVector<f64>,
    /// Number of batches folded in so far.
    pub t: usize,
    pub m_eff: f64,
}

impl MomentAverages {
    pub fn empty(num_cvs: usize) -> Self {
        MomentAverages {
            cc: DMatrix::zeros(num_cvs, num_cvs),
            ch: DVector::zeros(num_cvs),
            t: 0,
            m_eff: 0.0,
        }
    }

    /// Plain averages over `m` samples.
    pub fn from_batch(cc: DMatrix<f64>, ch: DVector<f64>, m: f64) -> Self {
        MomentAverages { cc, ch, t: 1, m_eff: m }
    }

    pub fn num_cvs(&self) -> usize {
        self.ch.len()
    }
}

/// `(1/B) Σ CᵦᵀCᵦ` and `(1/B) Σ Cᵦᵀhᵦ`.
pub fn batch_moments(hs: &[FlatGradient], cs: &[CvMatrix]) -> (DMatrix<f64>, DVector<f64>) {
    assert_eq!(hs.len(), cs.len());
    let l = cs.first().map_or(0, CvMatrix::ncols);
    let mut cc = DMatrix::zeros(l, l);
    let mut ch = DVector::zeros(l);
    for (h, c) in hs.iter().zip(cs) {
        cc += c.0.tr_mul(&c.0);
        ch += c.0.tr_mul(&h.0);
    }
    let b = hs.len().max(1) as f64;
    (cc / b, ch / b)
}

/// Solves `A x = b` for symmetric positive definite `A`, refusing
/// ill-conditioned systems.
fn guarded_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let condition = linalg::condition_number(a)?;
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularMoments { condition });
    }
    let sym = (a + a.transpose()) * 0.5;
    let l = linalg::cholesky(&sym).map_err(|_| Error::SingularMoments { condition })?;
    Ok(linalg::cholesky_solve(&l, b))
}

/// `a* = −E[CᵀC]⁻¹ E[Cᵀh]`, the minimizer of `E‖h + Ca‖²`.
pub fn optimal_weights(e_cc: &DMatrix<f64>, e_ch: &DVector<f64>) -> Result<DVector<f64>> {
    check_square(e_cc, e_ch)?;
    Ok(-guarded_solve(e_cc, e_ch)?)
}

/// `a = −((d v₀ / M) I + C̄ᵀC)⁻¹ C̄ᵀh` with `M` the effective sample count.
pub fn bayes_weights(mom: &MomentAverages, v0: f64, dim: usize) -> Result<DVector<f64>> {
    check_square(&mom.cc, &mom.ch)?;
    if v0 < 0.0 || !v0.is_finite() {
        return Err(Error::Config(format!("v0 must be finite and non-negative, got {v0}")));
    }
    if v0 > 0.0 && mom.m_eff <= 0.0 {
        // infinitely strong prior relative to the data
        return Ok(DVector::zeros(mom.num_cvs()));
    }
    let reg = if v0 == 0.0 { 0.0 } else { dim as f64 * v0 / mom.m_eff };
    let l = mom.num_cvs();
    let a = &mom.cc + DMatrix::<f64>::identity(l, l) * reg;
    Ok(-guarded_solve(&a, &mom.ch)?)
}

/// Posterior-expectation rule for a general prior scale matrix, given the
/// traces of its `(h, c_l)` blocks and `(c_l, c_k)` blocks.
///
/// With `κ = n₀/(n₀ + M)`:
/// `E[Cᵀh | data] = (κ/n₀)[tr V_{h c_l}] + (1−κ) C̄ᵀh`,
/// `E[CᵀC | data] = (κ/n₀)[tr V_{c_l c_k}] + (1−κ) C̄ᵀC`.
pub fn bayes_weights_general(
    mom: &MomentAverages,
    trace_hc: &DVector<f64>,
    trace_cc: &DMatrix<f64>,
    n0: f64,
    m: f64,
) -> Result<DVector<f64>> {
    check_square(&mom.cc, &mom.ch)?;
    check_square(trace_cc, trace_hc)?;
    if trace_hc.len() != mom.num_cvs() {
        return Err(Error::DimensionMismatch(format!(
            "{} prior blocks for {} control variates",
            trace_hc.len(),
            mom.num_cvs()
        )));
    }
    if n0 < 0.0 || m < 0.0 || n0 + m <= 0.0 {
        return Err(Error::Config(format!("need n0, M >= 0 with n0 + M > 0, got {n0}, {m}")));
    }
    // κ/n₀ = 1/(n₀+M) stays finite as n₀ → 0
    let prior_w = 1.0 / (n0 + m);
    let data_w = m / (n0 + m);
    let e_ch = trace_hc * prior_w + &mom.ch * data_w;
    let e_cc = trace_cc * prior_w + &mom.cc * data_w;
    Ok(-guarded_solve(&e_cc, &e_ch)?)
}

/// `M_eff = B Σ_{t=1}^T (1−γ)^t = B(1−γ)(1 − (1−γ)^T)/γ`.
pub fn effective_sample_count(batch: usize, gamma: f64, t: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::BadGamma(gamma));
    }
    let keep = 1.0 - gamma;
    Ok(batch as f64 * keep * (1.0 - keep.powi(t as i32)) / gamma)
}

/// Folds one batch of moments into the exponential averages.
///
/// The first batch seeds the averages. The stored effective count is the
/// closed form above floored at `B`, the number of fresh samples in the
/// latest batch; with `γ = 0` the averages stay frozen on the first batch
/// and the count stays at `B`.
pub fn update_moment_averages(
    mom: &MomentAverages,
    batch_cc: &DMatrix<f64>,
    batch_ch: &DVector<f64>,
    gamma: f64,
    batch: usize,
) -> Result<MomentAverages> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::BadGamma(gamma));
    }
    check_square(batch_cc, batch_ch)?;
    if batch_ch.len() != mom.num_cvs() {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} control variates, averages have {}",
            batch_ch.len(),
            mom.num_cvs()
        )));
    }
    let t = mom.t + 1;
    let (cc, ch) = if mom.t == 0 {
        (batch_cc.clone(), batch_ch.clone())
    } else {
        (
            &mom.cc * (1.0 - gamma) + batch_cc * gamma,
            &mom.ch * (1.0 - gamma) + batch_ch * gamma,
        )
    };
    let m_eff = if gamma == 0.0 {
        batch as f64
    } else {
        effective_sample_count(batch, gamma, t)?.max(batch as f64)
    };
    Ok(MomentAverages { cc, ch, t, m_eff })
}

/// `ĝ = h + C a`.
pub fn combine(h: &FlatGradient, c: &CvMatrix, a: &DVector<f64>) -> Result<FlatGradient> {
    if c.0.nrows() != h.len() || c.0.ncols() != a.len() {
        return Err(Error::DimensionMismatch(format!(
            "h has length {}, C is {}x{}, a has length {}",
            h.len(),
            c.0.nrows(),
            c.0.ncols(),
            a.len()
        )));
    }
    if a.is_empty() {
        return Ok(h.clone());
    }
    Ok(FlatGradient(&h.0 + &c.0 * a))
}

fn check_square(m: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix with vector of length {}",
            m.nrows(),
            m.ncols(),
            v.len()
        )));
    }
    Ok(())
}
