//! Term-level gradient estimators and the base gradient.
//!
//! The normalized ELBO gradient splits into a data term, a prior term, a
//! variational term and a score term (identically zero). Each of the first
//! three is the gradient of `E_q[f(Z)]` for some `f` that does not depend on
//! `w`, and can be estimated by the score function, by either
//! reparameterization, or (prior and variational only) in closed form.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{self, Dataset};
use crate::rng::Rng;
use crate::varfam::{self, FlatGradient, Gaussian};

/// A scalar function of the latent `z` with its gradient.
pub trait TermFunction: Sync {
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>);
}

impl<F> TermFunction for F
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>) + Sync,
{
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        self(z)
    }
}

/// `ℓ(zᵀx̃ₙ)` for a single example.
pub struct DataTerm<'a> {
    pub ds: &'a Dataset,
    pub example: usize,
}

impl TermFunction for DataTerm<'_> {
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let x = self.ds.signed(self.example);
        let u = x.dot(z);
        (model::log_sigmoid(u), x * model::sigmoid(-u))
    }
}

/// `scale · log p(z)`.
pub struct PriorTerm {
    pub scale: f64,
}

impl TermFunction for PriorTerm {
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = model::log_prior(z);
        (self.scale * v, g * self.scale)
    }
}

/// `scale · log q_v(z)` with `v` held fixed.
pub struct VariationalTerm<'a> {
    pub fixed: &'a Gaussian,
    pub scale: f64,
}

impl TermFunction for VariationalTerm<'_> {
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = self.fixed.whiten(z);
        let grad = -self.fixed.chol_inv().tr_mul(&r) * self.scale;
        (self.scale * self.fixed.log_q(z), grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Data,
    Prior,
    Variational,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Data => "data",
            Term::Prior => "prior",
            Term::Variational => "variational",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    ScoreFunction,
    Rp1,
    Rp2,
    ClosedForm,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::ScoreFunction => "SF",
            Estimator::Rp1 => "RP1",
            Estimator::Rp2 => "RP2",
            Estimator::ClosedForm => "CF",
        }
    }
}

/// Chain rule through `z = Lε + μ`: `μ` block `∇f(z)`, L block `lower(∇f(z) εᵀ)`.
pub fn rp1_term_grad<F: TermFunction + ?Sized>(
    f: &F,
    g: &Gaussian,
    eps: &DVector<f64>,
) -> FlatGradient {
    let z = g.transform_rp1(eps);
    let (_, gz) = f.value_grad(&z);
    FlatGradient::from_outer(&gz, eps)
}

/// Chain rule through `z = √(LLᵀ) ε + μ`.
///
/// With `G_S = ∇f(z) εᵀ`, the adjoint of `L ↦ √(LLᵀ)` gives
/// `G_Σ = F(sym G_S)` (the Fréchet map `F` is self-adjoint) and an L block of
/// `lower(2 G_Σ L)`.
pub fn rp2_term_grad<F: TermFunction + ?Sized>(
    f: &F,
    g: &Gaussian,
    eps: &DVector<f64>,
) -> Result<FlatGradient> {
    let z = g.transform_rp2(eps)?;
    let (_, gz) = f.value_grad(&z);
    rp2_from_latent_grad(g, &gz, eps)
}

pub(crate) fn rp2_from_latent_grad(
    g: &Gaussian,
    gz: &DVector<f64>,
    eps: &DVector<f64>,
) -> Result<FlatGradient> {
    let g_sigma = g.sqrt()?.frechet_sym_outer(gz, eps)?;
    let l_block = (g_sigma * g.chol()) * 2.0;
    Ok(FlatGradient::from_blocks(gz, &l_block))
}

/// `f(z) ∇_w log q_w(z)`.
pub fn sf_term_grad<F: TermFunction + ?Sized>(
    f: &F,
    g: &Gaussian,
    z: &DVector<f64>,
) -> FlatGradient {
    let (v, _) = f.value_grad(z);
    g.score_grad(z) * v
}

/// One data example and one noise draw; `h` and every control variate of a
/// pair share both.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub example: usize,
    pub noise: DVector<f64>,
}

/// `b` pairs: a minibatch without replacement, then one noise vector per example.
pub fn draw_pairs(rng: &mut Rng, n: usize, b: usize, dim: usize) -> Result<Vec<PairedSample>> {
    let batch = model::sample_minibatch(rng, n, b)?;
    Ok(batch
        .0
        .into_iter()
        .map(|example| PairedSample {
            example,
            noise: varfam::sample_noise(rng, dim),
        })
        .collect())
}

/// Data-term gradient with the local reparameterization.
///
/// The activation `u = x̃ᵀz` is written as `x̃ᵀμ + s η` with `s = ‖Lᵀx̃‖`; the
/// standard normal `η = (Lᵀx̃)ᵀε / s` is taken from the pair's noise, so `u`
/// equals the RP₁ activation and the estimate stays correlated with the
/// control variates.
pub fn local_reparam_data_grad(g: &Gaussian, pair: &PairedSample, ds: &Dataset) -> FlatGradient {
    let x = ds.signed(pair.example).into_owned();
    let a = g.chol().tr_mul(&x);
    let s = a.norm();
    let u = x.dot(g.mean()) + a.dot(&pair.noise);
    let l1 = model::sigmoid(-u);
    let coef = if s > 0.0 { l1 * a.dot(&pair.noise) / (s * s) } else { 0.0 };
    let mu = &x * l1;
    let l_block = (&x * a.transpose()) * coef;
    FlatGradient::from_blocks(&mu, &l_block)
}

/// Base gradient for one pair: RP₁ data term, RP₁ prior term scaled by `1/N`
/// and the closed-form variational term. The score term is omitted.
pub fn base_gradient(
    g: &Gaussian,
    pair: &PairedSample,
    ds: &Dataset,
    local_reparam: bool,
) -> FlatGradient {
    let n = ds.len();
    let mut h = if local_reparam {
        local_reparam_data_grad(g, pair, ds)
    } else {
        rp1_term_grad(&DataTerm { ds, example: pair.example }, g, &pair.noise)
    };
    h += &rp1_term_grad(&PriorTerm { scale: 1.0 / n as f64 }, g, &pair.noise);
    h - &varfam::cf_variational_term_grad(g.params(), n)
}

/// Estimate of one term's gradient for a pair with the chosen estimator.
pub fn term_estimate(
    term: Term,
    estimator: Estimator,
    g: &Gaussian,
    pair: &PairedSample,
    ds: &Dataset,
) -> Result<FlatGradient> {
    let scale = 1.0 / ds.len() as f64;
    let eps = &pair.noise;
    match term {
        Term::Data => {
            let f = DataTerm { ds, example: pair.example };
            estimate_with(&f, estimator, g, eps, || {
                Err(Error::EstimatorUnavailable {
                    term: term.name(),
                    estimator: estimator.name(),
                })
            })
        }
        Term::Prior => estimate_with(&PriorTerm { scale }, estimator, g, eps, || {
            Ok(varfam::cf_prior_term_grad(g.params(), ds.len()))
        }),
        Term::Variational => {
            let f = VariationalTerm { fixed: g, scale };
            estimate_with(&f, estimator, g, eps, || {
                Ok(varfam::cf_variational_term_grad(g.params(), ds.len()))
            })
        }
    }
}

fn estimate_with<F: TermFunction>(
    f: &F,
    estimator: Estimator,
    g: &Gaussian,
    eps: &DVector<f64>,
    closed_form: impl FnOnce() -> Result<FlatGradient>,
) -> Result<FlatGradient> {
    match estimator {
        Estimator::Rp1 => Ok(rp1_term_grad(f, g, eps)),
        Estimator::Rp2 => rp2_term_grad(f, g, eps),
        Estimator::ScoreFunction => Ok(sf_term_grad(f, g, &g.transform_rp1(eps))),
        Estimator::ClosedForm => closed_form(),
    }
}
