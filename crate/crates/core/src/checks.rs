//! The named property suite behind `cvvi checks`.
//!
//! Every property is a deterministic function of fixed seeds. Kernels that
//! the suite certifies can be swapped through [`Kernels`], which is how the
//! mutation fixture shows that a corrupted gradient produces a named failure.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::combiner::{self, MomentAverages};
use crate::cv::{self, CvId, CvSet};
use crate::engine::{self, OptimizerState, RunConfig};
use crate::estimators::{self, DataTerm, PairedSample, PriorTerm, VariationalTerm};
use crate::fd;
use crate::linalg::{self, MatrixSqrt};
use crate::model::{self, Dataset, Minibatch};
use crate::par::Execution;
use crate::rng::{stream, Purpose, Rng};
use crate::stats::VectorMoments;
use crate::synthetic;
use crate::varfam::{self, FlatGradient, Gaussian, VariationalParams};

/// Samples behind every zero-mean and unbiasedness property.
pub const MC_SAMPLES: usize = 100_000;
/// Absolute slack added to `3·SE` for coordinates that are identically zero.
pub const ZERO_SLACK: f64 = 1e-12;
pub const FD_TOL: f64 = 1e-5;

/// Rows and seed of the bundled 2-D dataset.
pub const BLOBS_ROWS: usize = 200;
pub const BLOBS_SEED: u64 = 0;

pub type CfGrad = fn(&VariationalParams, usize) -> FlatGradient;
pub type ScoreGrad = fn(&VariationalParams, &DVector<f64>) -> FlatGradient;

/// Hand-derived kernels under test.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub cf_prior_term_grad: CfGrad,
    pub cf_variational_term_grad: CfGrad,
    pub score_grad: ScoreGrad,
}

impl Default for Kernels {
    fn default() -> Self {
        Kernels {
            cf_prior_term_grad: varfam::cf_prior_term_grad,
            cf_variational_term_grad: varfam::cf_variational_term_grad,
            score_grad: varfam::score_grad,
        }
    }
}

fn flipped_cf_prior(w: &VariationalParams, n: usize) -> FlatGradient {
    varfam::cf_prior_term_grad(w, n) * -1.0
}

impl Kernels {
    /// The mutation fixture: `cf_prior_term_grad` with its sign flipped.
    pub fn with_flipped_prior_sign() -> Self {
        Kernels {
            cf_prior_term_grad: flipped_cf_prior,
            ..Kernels::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type Check = (String, Box<dyn Fn(&Kernels) -> Result<String, String> + Sync + Send>);

fn check<F>(name: impl Into<String>, f: F) -> Check
where
    F: Fn(&Kernels) -> Result<String, String> + Sync + Send + 'static,
{
    (name.into(), Box::new(f))
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn blobs() -> Dataset {
    synthetic::gaussian_blobs(BLOBS_ROWS, BLOBS_SEED)
}

pub fn random_d5() -> Dataset {
    synthetic::random_instance(50, 5, 1)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd(dim: usize, rng: &mut Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    &b * b.transpose() + DMatrix::identity(dim, dim)
}

fn random_sym(dim: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    (&a + a.transpose()) * 0.5
}

fn random_vec(dim: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| normal(rng))
}

fn rng_for(tag: u64) -> Rng {
    stream(0, Purpose::Checks, tag)
}

/// Per-coordinate moments of `f(pair)` over `samples` independent pairs
/// (uniform example, fresh noise), evaluated in fixed-size chunks so the
/// result does not depend on the execution mode.
pub fn pair_moments<F>(
    ds: &Dataset,
    len: usize,
    samples: usize,
    tag: u64,
    exec: Execution,
    f: F,
) -> Result<VectorMoments, String>
where
    F: Fn(&PairedSample) -> Result<DVector<f64>, String> + Sync + Send,
{
    const CHUNK: usize = 5_000;
    let chunks = samples.div_ceil(CHUNK);
    let parts = exec.map(chunks, |c| -> Result<VectorMoments, String> {
        let mut rng = stream(tag, Purpose::Checks, c as u64);
        let mut acc = VectorMoments::new(len);
        let count = CHUNK.min(samples - c * CHUNK);
        for _ in 0..count {
            let example = rng.random_range(0..ds.len());
            let noise = varfam::sample_noise(&mut rng, ds.dim());
            acc.push(&f(&PairedSample { example, noise })?);
        }
        Ok(acc)
    });
    let mut total = VectorMoments::new(len);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

fn zero_mean_detail(m: &VectorMoments) -> Result<String, String> {
    let ratio = m.worst_z_ratio(3.0, ZERO_SLACK);
    ensure(ratio <= 1.0, format!("worst |mean|/(3·SE) = {ratio:.3}"))
}

fn linalg_checks() -> Vec<Check> {
    vec![
        check("linalg.cholesky_reconstruction", |_| {
            let mut rng = rng_for(1);
            let mut worst: f64 = 0.0;
            for dim in [1, 2, 5, 8] {
                let a = random_spd(dim, &mut rng);
                let l = linalg::cholesky(&a).map_err(|e| e.to_string())?;
                worst = worst.max(linalg::rel_frobenius(&(&l * l.transpose()), &a));
            }
            ensure(worst < 1e-10, format!("max relative error {worst:.2e}"))
        }),
        check("linalg.matrix_sqrt_idempotence", |_| {
            let mut rng = rng_for(2);
            let mut worst: f64 = 0.0;
            for dim in [2, 4, 6] {
                let s = linalg::matrix_sqrt(&random_spd(dim, &mut rng)).map_err(|e| e.to_string())?;
                let back = linalg::matrix_sqrt(&(&s * &s)).map_err(|e| e.to_string())?;
                worst = worst.max((back - &s).amax());
            }
            ensure(worst < 1e-8, format!("max abs error {worst:.2e}"))
        }),
        check("linalg.frechet_linearity", |_| {
            let mut rng = rng_for(3);
            let sq = MatrixSqrt::new(&random_spd(5, &mut rng)).map_err(|e| e.to_string())?;
            let (a, b) = (random_sym(5, &mut rng), random_sym(5, &mut rng));
            let lhs = sq.frechet(&(&a * 0.7 - &b * 1.3)).map_err(|e| e.to_string())?;
            let rhs = sq.frechet(&a).map_err(|e| e.to_string())? * 0.7
                - sq.frechet(&b).map_err(|e| e.to_string())? * 1.3;
            let err = (lhs - rhs).amax();
            ensure(err < 1e-12, format!("max abs error {err:.2e}"))
        }),
        check("linalg.frechet_self_adjoint", |_| {
            let mut rng = rng_for(4);
            let sq = MatrixSqrt::new(&random_spd(5, &mut rng)).map_err(|e| e.to_string())?;
            let (a, b) = (random_sym(5, &mut rng), random_sym(5, &mut rng));
            let lhs = (&a * sq.frechet(&b).map_err(|e| e.to_string())?).trace();
            let rhs = (sq.frechet(&a).map_err(|e| e.to_string())? * &b).trace();
            ensure((lhs - rhs).abs() < 1e-10, format!("trace gap {:.2e}", (lhs - rhs).abs()))
        }),
        check("linalg.frechet_finite_difference", |_| {
            let mut rng = rng_for(5);
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let sigma = random_spd(4, &mut rng);
                let dsig = random_sym(4, &mut rng);
                let t = 1e-5;
                let num = (linalg::matrix_sqrt(&(&sigma + &dsig * t)).map_err(|e| e.to_string())?
                    - linalg::matrix_sqrt(&(&sigma - &dsig * t)).map_err(|e| e.to_string())?)
                    / (2.0 * t);
                let ana = linalg::matrix_sqrt_frechet(&sigma, &dsig).map_err(|e| e.to_string())?;
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
    ]
}

fn model_checks() -> Vec<Check> {
    vec![
        check("model.loglik_nonpositive", |_| {
            let ds = random_d5();
            let mut rng = rng_for(10);
            let worst = (0..100)
                .map(|_| model::loglik(&(random_vec(5, &mut rng) * 5.0), &Minibatch::full(ds.len()), &ds).value)
                .fold(f64::NEG_INFINITY, f64::max);
            ensure(worst <= 0.0, format!("largest value {worst:.3e}"))
        }),
        check("model.hessian_negative_semidefinite", |_| {
            let ds = random_d5();
            let mut rng = rng_for(11);
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..20 {
                let ll = model::loglik(&random_vec(5, &mut rng), &Minibatch::full(ds.len()), &ds);
                let e = linalg::SymmetricEigen::new(&ll.hess).map_err(|e| e.to_string())?;
                worst = worst.max(e.max_value());
            }
            ensure(worst <= 1e-10, format!("largest eigenvalue {worst:.2e}"))
        }),
        check("model.singleton_average_is_full_gradient", |_| {
            let ds = random_d5();
            let z = random_vec(5, &mut rng_for(12));
            let full = model::loglik(&z, &Minibatch::full(ds.len()), &ds).grad;
            let avg = (0..ds.len())
                .map(|n| model::loglik(&z, &Minibatch::single(n), &ds).grad)
                .fold(DVector::zeros(5), |a, g| a + g)
                / ds.len() as f64;
            let err = (avg - &full).amax();
            ensure(err < 1e-14, format!("max abs gap {err:.2e}"))
        }),
        check("model.loglik_gradient_fd", |_| {
            let ds = random_d5();
            let mut rng = rng_for(13);
            let batch = Minibatch(vec![0, 3, 7, 11]);
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let z = random_vec(5, &mut rng);
                let ana = model::loglik(&z, &batch, &ds).grad;
                let num = fd::gradient(|z| model::loglik(z, &batch, &ds).value, &z, 1e-5);
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
        check("model.loglik_hessian_fd", |_| {
            let ds = random_d5();
            let mut rng = rng_for(14);
            let batch = Minibatch::full(ds.len());
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let z = random_vec(5, &mut rng);
                let ana = model::loglik(&z, &batch, &ds).hess;
                let num = fd::jacobian(|z| model::loglik(z, &batch, &ds).grad, &z, 1e-5);
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
    ]
}

fn varfam_checks() -> Vec<Check> {
    vec![
        check("varfam.rp1_rp2_sample_moments", |_| {
            let w = synthetic::random_params(4, 20);
            let g = Gaussian::new(w.clone());
            let mut rng = rng_for(20);
            let (mut m1, mut m2) = (VectorMoments::new(4 + 16), VectorMoments::new(4 + 16));
            let pack = |z: DVector<f64>| {
                let outer = &z * z.transpose();
                DVector::from_iterator(20, z.iter().copied().chain(outer.iter().copied()))
            };
            for _ in 0..MC_SAMPLES {
                let e = varfam::sample_noise(&mut rng, 4);
                m1.push(&pack(g.transform_rp1(&e)));
                m2.push(&pack(g.transform_rp2(&e).map_err(|e| e.to_string())?));
            }
            let exact = pack(w.mean().clone()) + {
                let cov = w.covariance();
                DVector::from_iterator(20, std::iter::repeat_n(0.0, 4).chain(cov.iter().copied()))
            };
            let scale = exact.amax();
            let err = (m1.mean() - &exact).amax().max((m2.mean() - &exact).amax()) / scale;
            ensure(err < 0.05, format!("max error {err:.3} of the largest moment"))
        }),
        check("varfam.score_zero_mean", |k| {
            let w = synthetic::random_params(4, 21);
            let g = Gaussian::new(w.clone());
            let mut rng = rng_for(21);
            let mut m = VectorMoments::new(w.flat_len());
            for _ in 0..MC_SAMPLES {
                let z = g.transform_rp1(&varfam::sample_noise(&mut rng, 4));
                m.push(&(k.score_grad)(&w, &z).0);
            }
            zero_mean_detail(&m)
        }),
        check("varfam.score_grad_fd", |k| {
            let mut rng = rng_for(22);
            let mut worst: f64 = 0.0;
            for s in 0..5 {
                let w = synthetic::random_params(4, 220 + s);
                let z = random_vec(4, &mut rng);
                let ana = (k.score_grad)(&w, &z);
                let num = fd::param_gradient(|w| varfam::log_q(w, &z), &w, 1e-6);
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
        check("varfam.cf_prior_term_grad_fd", |k| {
            let mut worst: f64 = 0.0;
            for s in 0..5 {
                let w = synthetic::random_params(4, 230 + s);
                let ana = (k.cf_prior_term_grad)(&w, 7);
                let num = fd::param_gradient(|w| varfam::prior_expectation(w, 7), &w, 1e-5);
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
        check("varfam.cf_variational_term_grad_fd", |k| {
            let mut worst: f64 = 0.0;
            for s in 0..5 {
                let w = synthetic::random_params(4, 240 + s);
                let ana = (k.cf_variational_term_grad)(&w, 7);
                let num = fd::param_gradient(|w| varfam::variational_expectation(w, 7), &w, 1e-5);
                worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
            }
            ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
        }),
    ]
}

/// RP₁ or RP₂ chain rule against finite differences of `f(T_w(ε))`.
fn chain_rule_error(rp2: bool, dims: &[usize], tag: u64) -> Result<f64, String> {
    let mut rng = rng_for(tag);
    let mut worst: f64 = 0.0;
    for (s, &dim) in dims.iter().enumerate() {
        let w = synthetic::random_params(dim, tag * 10 + s as u64);
        let g = Gaussian::new(w.clone());
        let eps = random_vec(dim, &mut rng);
        let b = random_vec(dim, &mut rng);
        // a smooth non-quadratic test function
        let f = move |z: &DVector<f64>| {
            let u = z.dot(&b);
            (u.sin() + 0.1 * z.norm_squared(), &b * u.cos() + z * 0.2)
        };
        let (ana, num) = if rp2 {
            let ana = estimators::rp2_term_grad(&f, &g, &eps).map_err(|e| e.to_string())?;
            let num = fd::param_gradient(
                |w| f(&varfam::transform_rp2(w, &eps).expect("well conditioned")).0,
                &w,
                1e-5,
            );
            (ana, num)
        } else {
            let ana = estimators::rp1_term_grad(&f, &g, &eps);
            let num = fd::param_gradient(|w| f(&varfam::transform_rp1(w, &eps)).0, &w, 1e-5);
            (ana, num)
        };
        worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
    }
    Ok(worst)
}

fn estimator_checks(exec: Execution) -> Vec<Check> {
    vec![
        check("estimators.rp1_chain_rule_fd", |_| {
            let e = chain_rule_error(false, &[2, 3, 4, 5, 5], 30)?;
            ensure(e < FD_TOL, format!("max relative error {e:.2e}"))
        }),
        check("estimators.rp2_chain_rule_fd", |_| {
            let e = chain_rule_error(true, &[2, 2, 5, 5, 5], 31)?;
            ensure(e < FD_TOL, format!("max relative error {e:.2e}"))
        }),
        check("estimators.closed_form_agreement", move |k| {
            use estimators::Estimator::*;
            let ds = random_d5();
            let w = synthetic::random_params(5, 32);
            let g = Gaussian::new(w.clone());
            let d = w.flat_len();
            let n = ds.len();
            let scale = 1.0 / n as f64;
            let mut worst: f64 = 0.0;
            for (term, cf) in [
                ("prior", (k.cf_prior_term_grad)(&w, n)),
                ("variational", (k.cf_variational_term_grad)(&w, n)),
            ] {
                for est in [ScoreFunction, Rp1, Rp2] {
                    let m = pair_moments(&ds, d, MC_SAMPLES, 320, exec, |p| {
                        let prior = PriorTerm { scale };
                        let var = VariationalTerm { fixed: &g, scale };
                        let f: &dyn estimators::TermFunction = if term == "prior" { &prior } else { &var };
                        let v = match est {
                            ScoreFunction => estimators::sf_term_grad(f, &g, &g.transform_rp1(&p.noise)),
                            Rp1 => estimators::rp1_term_grad(f, &g, &p.noise),
                            _ => estimators::rp2_term_grad(f, &g, &p.noise).map_err(|e| e.to_string())?,
                        };
                        Ok(v.0 - &cf.0)
                    })?;
                    let r = m.worst_z_ratio(3.0, ZERO_SLACK);
                    if r > 1.0 {
                        return Err(format!("{term} {}: |mean − CF|/(3·SE) = {r:.3}", est.name()));
                    }
                    worst = worst.max(r);
                }
            }
            Ok(format!("worst |mean − CF|/(3·SE) = {worst:.3}"))
        }),
        check("estimators.base_gradient_unbiased", move |k| {
            // E[h] against a reference built from the full-data RP₁ data term
            // and the closed-form prior and entropy terms
            let ds = random_d5();
            let w = synthetic::random_params(5, 33);
            let g = Gaussian::new(w.clone());
            let d = w.flat_len();
            let n = ds.len();
            let cf = (k.cf_prior_term_grad)(&w, n) - &(k.cf_variational_term_grad)(&w, n);
            let h = pair_moments(&ds, d, MC_SAMPLES, 330, exec, |p| {
                Ok(estimators::base_gradient(&g, p, &ds, false).0)
            })?;
            let full = |z: &DVector<f64>| {
                let ll = model::loglik(z, &Minibatch::full(n), &ds);
                (ll.value, ll.grad)
            };
            let r = pair_moments(&ds, d, MC_SAMPLES / 10, 331, exec, |p| {
                Ok(estimators::rp1_term_grad(&full, &g, &p.noise).0 + &cf.0)
            })?;
            let diff = h.mean() - r.mean();
            let se = h.stderr().zip_map(&r.stderr(), |a, b| (a * a + b * b).sqrt());
            let ratio = diff
                .iter()
                .zip(se.iter())
                .map(|(m, s)| m.abs() / (3.0 * s + ZERO_SLACK))
                .fold(0.0, f64::max);
            ensure(ratio <= 1.0, format!("worst |gap|/(3·SE) = {ratio:.3}"))
        }),
    ]
}

fn cv_checks(exec: Execution) -> Vec<Check> {
    let mut out = Vec::new();
    for (label, tag) in [("blobs2d", 40u64), ("random_d5", 41u64)] {
        for (k, id) in CvId::ALL.iter().copied().enumerate() {
            out.push(check(format!("cv.zero_mean.{}.{label}", id.name()), move |_| {
                let ds = if label == "blobs2d" { blobs() } else { random_d5() };
                let w = synthetic::random_params(ds.dim(), tag);
                let g = Gaussian::new(w.clone());
                let m = pair_moments(&ds, w.flat_len(), MC_SAMPLES, tag * 100 + k as u64, exec, |p| {
                    cv::evaluate_cv(id, &g, p, &ds).map(|c| c.0).map_err(|e| e.to_string())
                })?;
                zero_mean_detail(&m)
            }));
        }
    }
    out.push(check("cv.cancellation_identities", |k| {
        let ds = random_d5();
        let w = synthetic::random_params(5, 42);
        let g = Gaussian::new(w.clone());
        let n = ds.len();
        let mut rng = rng_for(42);
        let mut worst: f64 = 0.0;
        for example in 0..5 {
            let p = PairedSample { example, noise: random_vec(5, &mut rng) };
            let scale = 1.0 / n as f64;
            let c = |id| cv::evaluate_cv(id, &g, &p, &ds).map_err(|e| e.to_string());
            let var = estimators::rp1_term_grad(&VariationalTerm { fixed: &g, scale }, &g, &p.noise);
            let prior = estimators::rp1_term_grad(&PriorTerm { scale }, &g, &p.noise);
            let data = estimators::rp1_term_grad(&DataTerm { ds: &ds, example }, &g, &p.noise);
            let data2 = estimators::rp2_term_grad(&DataTerm { ds: &ds, example }, &g, &p.noise)
                .map_err(|e| e.to_string())?;
            worst = worst
                .max(((var - &c(CvId::C1)?) - &(k.cf_variational_term_grad)(&w, n)).amax())
                .max(((prior - &c(CvId::C2)?) - &(k.cf_prior_term_grad)(&w, n)).amax())
                .max(((data - &c(CvId::C4)?) - &data2).amax());
        }
        ensure(worst < 1e-12, format!("max abs gap {worst:.2e}"))
    }));
    out.push(check("cv.subsampling_single_example", |_| {
        let base = random_d5();
        let ds = Dataset::new(base.features().rows(2, 1).into_owned(), vec![base.labels()[2]])
            .map_err(|e| e.to_string())?;
        let g = Gaussian::new(synthetic::random_params(5, 43));
        let mut rng = rng_for(43);
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let p = PairedSample { example: 0, noise: random_vec(5, &mut rng) };
            for id in [CvId::C5, CvId::C6] {
                worst = worst.max(cv::evaluate_cv(id, &g, &p, &ds).map_err(|e| e.to_string())?.amax());
            }
        }
        ensure(worst < 1e-12, format!("max abs entry {worst:.2e}"))
    }));
    out.push(check("cv.subsampling_correction_grad_fd", |_| {
        let ds = random_d5();
        let mut rng = rng_for(45);
        let mut worst: f64 = 0.0;
        for example in [0, 7, 19, 33, 48] {
            let f = cv::SubsamplingCorrection { ds: &ds, example };
            let z = random_vec(5, &mut rng);
            let (_, ana) = estimators::TermFunction::value_grad(&f, &z);
            let num = fd::gradient(|z| estimators::TermFunction::value_grad(&f, z).0, &z, 1e-5);
            worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
        }
        ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
    }));
    out.push(check("cv.quadratic_model_cv_fd", |_| {
        // exact part: finite differences of E_q[f̃] with the expansion point held fixed
        let ds = random_d5();
        let mut rng = rng_for(46);
        let mut worst: f64 = 0.0;
        for s in 0..5u64 {
            let w = synthetic::random_params(5, 460 + s);
            let g = Gaussian::new(w.clone());
            let z0 = w.mean().clone();
            let ll = model::loglik(&z0, &Minibatch::single(s as usize * 9), &ds);
            let (v0, g0, h0) = (ll.value, ll.grad, ll.hess);
            let expected = |w: &VariationalParams| {
                let dm = w.mean() - &z0;
                v0 + g0.dot(&dm) + 0.5 * (dm.dot(&(&h0 * &dm)) + (&h0 * w.covariance()).trace())
            };
            let f = |z: &DVector<f64>| {
                let dz = z - &z0;
                (v0 + g0.dot(&dz) + 0.5 * dz.dot(&(&h0 * &dz)), &g0 + &h0 * &dz)
            };
            let eps = random_vec(5, &mut rng);
            let num = fd::param_gradient(expected, &w, 1e-5) - &estimators::rp1_term_grad(&f, &g, &eps);
            let ana = cv::quadratic_model_cv(&g0, &h0, &g, &eps);
            worst = worst.max(fd::rel_error(ana.as_slice(), num.as_slice(), 1e-12));
        }
        ensure(worst < FD_TOL, format!("max relative error {worst:.2e}"))
    }));
    out.push(check("cv.quadratic_exactness", |_| {
        // f(z) = −½zᵀAz + bᵀz: RP₁ plus the c7 construction has a constant μ block
        let mut rng = rng_for(44);
        let a = random_spd(4, &mut rng);
        let b = random_vec(4, &mut rng);
        let g = Gaussian::new(synthetic::random_params(4, 44));
        let f = |z: &DVector<f64>| (-0.5 * z.dot(&(&a * z)) + b.dot(z), &b - &a * z);
        let (_, grad0) = f(g.mean());
        let hess0 = -&a;
        let mut mus = Vec::new();
        for _ in 0..20 {
            let eps = random_vec(4, &mut rng);
            let combined = estimators::rp1_term_grad(&f, &g, &eps) + &cv::quadratic_model_cv(&grad0, &hess0, &g, &eps);
            mus.push(combined.mu_block());
        }
        let spread = mus.iter().map(|m| (m - &mus[0]).amax()).fold(0.0, f64::max);
        ensure(spread < 1e-12, format!("μ-block spread {spread:.2e}"))
    }));
    out.push(check("cv.subset_definitions", |_| {
        let get = |s: &str| CvSet::parse(s).map(|c| c.ids().to_vec()).map_err(|e| e.to_string());
        let (s4, s5, s6, s7) = (get("S4")?, get("S5")?, get("S6")?, get("S7")?);
        use CvId::*;
        let ok = s4 == [C2, C1, C3, C4]
            && s5[..4] == s4[..] && s5[4..] == [C6]
            && s6[..5] == s5[..] && s6[5..] == [C5]
            && s7[..6] == s6[..] && s7[6..] == [C7];
        ensure(ok, format!("S7 = {s7:?}"))
    }));
    out
}

/// A synthetic joint Gaussian for `(h, C)` with three control variates.
pub struct JointGaussian {
    /// Rows: `h` coordinates; columns: one loading per latent factor.
    pub h_load: DMatrix<f64>,
    /// One loading matrix per control variate.
    pub c_load: Vec<DMatrix<f64>>,
    pub h_noise: f64,
    pub c_noise: f64,
}

impl JointGaussian {
    pub fn new(dim: usize, factors: usize, seed: u64) -> Self {
        let mut rng = rng_for(1000 + seed);
        let h_load = DMatrix::from_fn(dim, factors, |_, _| normal(&mut rng));
        let c_load = (0..3)
            .map(|_| DMatrix::from_fn(dim, factors, |_, _| normal(&mut rng)))
            .collect();
        JointGaussian { h_load, c_load, h_noise: 0.5, c_noise: 0.3 }
    }

    pub fn sample(&self, rng: &mut Rng) -> (DVector<f64>, DMatrix<f64>) {
        let (dim, k) = self.h_load.shape();
        let u = random_vec(k, rng);
        let h = &self.h_load * &u + random_vec(dim, rng) * self.h_noise;
        let mut c = DMatrix::zeros(dim, self.c_load.len());
        for (j, load) in self.c_load.iter().enumerate() {
            c.set_column(j, &(load * &u + random_vec(dim, rng) * self.c_noise));
        }
        (h, c)
    }

    /// Exact `E[CᵀC]` and `E[Cᵀh]`.
    pub fn moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        let l = self.c_load.len();
        let dim = self.h_load.nrows() as f64;
        let cc = DMatrix::from_fn(l, l, |i, j| {
            let v = (self.c_load[i].transpose() * &self.c_load[j]).trace();
            if i == j { v + dim * self.c_noise * self.c_noise } else { v }
        });
        let ch = DVector::from_fn(l, |i, _| (self.c_load[i].transpose() * &self.h_load).trace());
        (cc, ch)
    }

    /// `E‖h + Ca‖²` in closed form.
    pub fn expected_sq_norm(&self, a: &DVector<f64>) -> f64 {
        let (cc, ch) = self.moments();
        let hh = self.h_load.norm_squared() + self.h_load.nrows() as f64 * self.h_noise * self.h_noise;
        hh + 2.0 * a.dot(&ch) + a.dot(&(&cc * a))
    }
}

fn combiner_checks() -> Vec<Check> {
    vec![
        check("combiner.unbiasedness_preserved", |_| {
            let ds = blobs();
            let w = synthetic::random_params(ds.dim(), 50);
            let g = Gaussian::new(w.clone());
            let set = CvSet::parse("S7").map_err(|e| e.to_string())?;
            let a = random_vec(set.len(), &mut rng_for(50));
            let m = pair_moments(&ds, w.flat_len(), MC_SAMPLES, 500, Execution::Sequential, |p| {
                let c = cv::evaluate_cv_set(&set, &g, p, &ds).map_err(|e| e.to_string())?;
                Ok(&c.0 * &a)
            })?;
            zero_mean_detail(&m)
        }),
        check("combiner.optimal_matches_least_squares", |_| {
            let mut worst: f64 = 0.0;
            for s in 0..5 {
                let jg = JointGaussian::new(4, 3, 510 + s);
                let (cc, ch) = jg.moments();
                let a = combiner::optimal_weights(&cc, &ch).map_err(|e| e.to_string())?;
                let reference = -cc.lu().solve(&ch).ok_or("reference solve failed")?;
                worst = worst.max((a - reference).amax());
            }
            ensure(worst < 1e-10, format!("max gap {worst:.2e}"))
        }),
        check("combiner.optimal_beats_random_weights", |_| {
            let jg = JointGaussian::new(4, 3, 511);
            let (cc, ch) = jg.moments();
            let a = combiner::optimal_weights(&cc, &ch).map_err(|e| e.to_string())?;
            let best = jg.expected_sq_norm(&a);
            let mut rng = rng_for(511);
            let mut margin = f64::INFINITY;
            for _ in 0..10_000 {
                let b = &a + random_vec(3, &mut rng) * 2.0;
                margin = margin.min(jg.expected_sq_norm(&b) - best);
            }
            ensure(margin > 0.0, format!("smallest excess {margin:.3e}"))
        }),
        check("combiner.variance_optimality", |_| {
            let jg = JointGaussian::new(4, 3, 51);
            let (cc, ch) = jg.moments();
            let a = combiner::optimal_weights(&cc, &ch).map_err(|e| e.to_string())?;
            // paired MC estimates of E‖h + Ca‖² at a* and at single-weight perturbations
            let mut rng = rng_for(51);
            let samples = 1_000_000;
            let mut perturbed = Vec::new();
            for j in 0..3 {
                for s in [-0.1, 0.1] {
                    let mut b = a.clone();
                    b[j] += s;
                    perturbed.push(b);
                }
            }
            let mut gaps = vec![0.0; perturbed.len()];
            for _ in 0..samples {
                let (h, c) = jg.sample(&mut rng);
                let base = (&h + &c * &a).norm_squared();
                for (gap, b) in gaps.iter_mut().zip(&perturbed) {
                    *gap += (&h + &c * b).norm_squared() - base;
                }
            }
            let min_gap = gaps.iter().map(|g| g / samples as f64).fold(f64::INFINITY, f64::min);
            ensure(min_gap > 0.0, format!("smallest increase {min_gap:.3e}"))
        }),
        check("combiner.regularization_monotone", |_| {
            let jg = JointGaussian::new(5, 2, 52);
            let (cc, ch) = jg.moments();
            let mom = MomentAverages::from_batch(cc, ch, 50.0);
            let mut prev = f64::INFINITY;
            for v0 in [0.0, 1e-5, 1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
                let n = combiner::bayes_weights(&mom, v0, 20).map_err(|e| e.to_string())?.norm();
                if n > prev * (1.0 + 1e-12) {
                    return Err(format!("norm grew to {n:.3e} at v0 = {v0}"));
                }
                prev = n;
            }
            Ok("non-increasing over 8 values".into())
        }),
        check("combiner.zero_prior_is_optimal", |_| {
            let jg = JointGaussian::new(4, 3, 53);
            let (cc, ch) = jg.moments();
            let opt = combiner::optimal_weights(&cc, &ch).map_err(|e| e.to_string())?;
            let bayes = combiner::bayes_weights(&MomentAverages::from_batch(cc, ch, 10.0), 0.0, 12)
                .map_err(|e| e.to_string())?;
            ensure(opt == bayes, format!("max gap {:.2e}", (opt - bayes).amax()))
        }),
        check("combiner.general_rule_reduction", |_| {
            let mut worst: f64 = 0.0;
            for s in 0..5 {
                let jg = JointGaussian::new(4, 3, 540 + s);
                let (cc, ch) = jg.moments();
                let (m, v0, d) = (37.0, 1e-3 * (s + 1) as f64, 12);
                let mom = MomentAverages::from_batch(cc, ch, m);
                let a = combiner::bayes_weights(&mom, v0, d).map_err(|e| e.to_string())?;
                // V₀ = v₀I: trace blocks are d·v₀ on the CV diagonal and zero elsewhere
                let n0 = 1.0;
                let tr_cc = DMatrix::identity(3, 3) * (d as f64 * v0 * n0);
                let b = combiner::bayes_weights_general(&mom, &DVector::zeros(3), &tr_cc, n0, m)
                    .map_err(|e| e.to_string())?;
                worst = worst.max((a - b).amax());
            }
            ensure(worst < 1e-12, format!("max gap {worst:.2e}"))
        }),
        check("combiner.scalar_example", |_| {
            let mom = MomentAverages::from_batch(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, 1.0), 4.0);
            let a = combiner::bayes_weights(&mom, 1e-3, 2).map_err(|e| e.to_string())?[0];
            let expected = -1.0 / (2.0 + 2.0 * 0.001 / 4.0);
            ensure((a - expected).abs() < 1e-12, format!("a = {a:.15}"))
        }),
        check("combiner.effective_sample_count", |_| {
            let e = |g, t| combiner::effective_sample_count(10, g, t).map_err(|e| e.to_string());
            let (a, b, c) = (e(0.02, 1)?, e(0.02, 100_000)?, e(1.0, 7)?);
            ensure(
                (a - 9.8).abs() < 1e-12 && (b - 490.0).abs() < 1e-9 && c == 0.0,
                format!("{a}, {b}, {c}"),
            )
        }),
    ]
}

fn engine_checks() -> Vec<Check> {
    vec![
        check("engine.momentum_recurrence", |_| {
            let mut s = OptimizerState::new(VariationalParams::standard(2), 0);
            let mut g = FlatGradient::zeros(2);
            g[0] = 1.0;
            engine::sgd_momentum_step(&mut s, &g, 0.1, 0.9).map_err(|e| e.to_string())?;
            let first = s.params.mean()[0];
            engine::sgd_momentum_step(&mut s, &g, 0.1, 0.9).map_err(|e| e.to_string())?;
            let second = s.params.mean()[0] - first;
            ensure((second - 0.19).abs() < 1e-15, format!("second displacement {second}"))
        }),
        check("engine.trace_determinism", |_| {
            let ds = blobs();
            let cfg = RunConfig {
                iterations: 30,
                cvs: CvSet::parse("S7").map_err(|e| e.to_string())?,
                seed: 5,
                ..Default::default()
            };
            let a = engine::run_inference(&ds, &cfg).map_err(|e| e.to_string())?;
            let b = engine::run_inference(&ds, &RunConfig { execution: Execution::Sequential, ..cfg })
                .map_err(|e| e.to_string())?;
            ensure(a == b, "parallel and sequential traces agree".into())
        }),
        check("engine.combined_gradient_unbiased", |_| {
            // 10⁴ first iterations with weights from an independent earlier batch
            let ds = blobs();
            let w = synthetic::random_params(ds.dim(), 60);
            let g = Gaussian::new(w.clone());
            let set = CvSet::parse("S7").map_err(|e| e.to_string())?;
            let d = w.flat_len();
            let warm = engine::draw_pair_sequence(&mut rng_for(60), ds.len(), 50, 10, ds.dim())
                .map_err(|e| e.to_string())?;
            let (hs, cs) = engine::evaluate_pairs(&g, &warm, &ds, &set, false, Execution::Sequential)
                .map_err(|e| e.to_string())?;
            let (cc, ch) = combiner::batch_moments(&hs, &cs);
            let a = combiner::bayes_weights(&MomentAverages::from_batch(cc, ch, 50.0), 1e-3, d)
                .map_err(|e| e.to_string())?;
            let mut ghat = VectorMoments::new(d);
            let mut base = VectorMoments::new(d);
            for it in 0..10_000u64 {
                let pairs = estimators::draw_pairs(&mut stream(61, Purpose::Checks, it), ds.len(), 10, ds.dim())
                    .map_err(|e| e.to_string())?;
                let (hs, cs) = engine::evaluate_pairs(&g, &pairs, &ds, &set, false, Execution::Sequential)
                    .map_err(|e| e.to_string())?;
                ghat.push(&engine::combined_mean(&hs, &cs, &a).map_err(|e| e.to_string())?.0);
            }
            // reference: full-data RP₁ data term with closed-form prior and entropy
            let n = ds.len();
            let cf = varfam::cf_prior_term_grad(&w, n) - &varfam::cf_variational_term_grad(&w, n);
            let full = |z: &DVector<f64>| {
                let ll = model::loglik(z, &Minibatch::full(n), &ds);
                (ll.value, ll.grad)
            };
            let mut rng = rng_for(62);
            for _ in 0..20_000 {
                let eps = varfam::sample_noise(&mut rng, ds.dim());
                base.push(&(estimators::rp1_term_grad(&full, &g, &eps).0 + &cf.0));
            }
            let diff = ghat.mean() - base.mean();
            let se = ghat.stderr().zip_map(&base.stderr(), |x, y| (x * x + y * y).sqrt());
            let ratio = diff
                .iter()
                .zip(se.iter())
                .map(|(m, s)| m.abs() / (3.0 * s + ZERO_SLACK))
                .fold(0.0, f64::max);
            ensure(ratio <= 1.0, format!("worst |gap|/(3·SE) = {ratio:.3}"))
        }),
    ]
}

fn harness_checks() -> Vec<Check> {
    vec![check("cli.config_round_trip", |_| {
        let cfg = crate::harness::ExperimentConfig {
            lr: vec![0.05, 0.4],
            cvs: vec!["none".into(), "S7".into(), "c1,c5".into()],
            seeds: 7,
            ..Default::default()
        };
        let text = cfg.to_json().map_err(|e| e.to_string())?;
        let back = crate::harness::ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
        let again = crate::harness::ExperimentConfig::from_json(&back.to_json().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure(back == cfg && again == back, "parse → serialize → parse is stable".into())
    })]
}

fn all_checks(exec: Execution) -> Vec<Check> {
    let mut v = linalg_checks();
    v.extend(model_checks());
    v.extend(varfam_checks());
    v.extend(estimator_checks(exec));
    v.extend(cv_checks(exec));
    v.extend(combiner_checks());
    v.extend(engine_checks());
    v.extend(harness_checks());
    v
}

pub fn check_names() -> Vec<String> {
    all_checks(Execution::Sequential).into_iter().map(|(n, _)| n).collect()
}

/// Runs every property; results are in a fixed order.
pub fn run_checks(kernels: &Kernels, exec: Execution) -> Vec<CheckResult> {
    let checks = all_checks(exec);
    exec.map_slice(&checks, |(name, f)| {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(kernels)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => CheckResult { name: name.clone(), passed: true, detail: format!("{d} ({secs:.1}s)") },
            Err(d) => CheckResult { name: name.clone(), passed: false, detail: format!("{d} ({secs:.1}s)") },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_distinct_and_plentiful() {
        let names = check_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.len() >= 20);
    }

    #[test]
    fn joint_gaussian_moments_match_sampling() {
        let jg = JointGaussian::new(3, 2, 0);
        let (cc, ch) = jg.moments();
        let mut rng = rng_for(99);
        let mut acc_cc = DMatrix::zeros(3, 3);
        let mut acc_ch = DVector::zeros(3);
        let n = 100_000;
        for _ in 0..n {
            let (h, c) = jg.sample(&mut rng);
            acc_cc += c.tr_mul(&c);
            acc_ch += c.tr_mul(&h);
        }
        assert!((acc_cc / n as f64 - cc).amax() < 0.3);
        assert!((acc_ch / n as f64 - ch).amax() < 0.3);
    }
}
