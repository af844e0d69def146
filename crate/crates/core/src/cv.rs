//! The control-variate library.
//!
//! Every control variate is a zero-mean [`FlatGradient`] evaluated on a
//! [`PairedSample`], sharing the pair's example and noise with the base
//! gradient:
//!
//! | id    | construction                                                        |
//! |-------|---------------------------------------------------------------------|
//! | c1    | RP₁ − CF, variational term                                          |
//! | c2    | RP₁ − CF, prior term                                                |
//! | c3    | RP₁ − RP₂, prior term                                               |
//! | c4    | RP₁ − RP₂, data term                                                |
//! | c5    | RP₁ gradient of the Taylor correction for data subsampling          |
//! | c6    | RP₂ gradient of the Taylor correction for data subsampling          |
//! | c7    | exact − RP₁ gradient of the quadratic Taylor model of the data term |
//! | score | `∇_w log q_w(z)`                                                    |

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{
    rp1_term_grad, rp2_term_grad, term_estimate, Estimator, PairedSample, Term, TermFunction,
};
use crate::linalg;
use crate::model::{self, Dataset, Minibatch};
use crate::varfam::{FlatGradient, Gaussian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CvId {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    Score,
}

impl CvId {
    pub const ALL: [CvId; 8] = [
        CvId::C1,
        CvId::C2,
        CvId::C3,
        CvId::C4,
        CvId::C5,
        CvId::C6,
        CvId::C7,
        CvId::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CvId::C1 => "c1",
            CvId::C2 => "c2",
            CvId::C3 => "c3",
            CvId::C4 => "c4",
            CvId::C5 => "c5",
            CvId::C6 => "c6",
            CvId::C7 => "c7",
            CvId::Score => "score",
        }
    }
}

impl fmt::Display for CvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CvId::ALL
            .iter()
            .copied()
            .find(|id| id.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownCv(s.trim().to_string()))
    }
}

/// Ordered, duplicate-free list of control variates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CvSet {
    name: String,
    ids: Vec<CvId>,
}

const S4: [CvId; 4] = [CvId::C2, CvId::C1, CvId::C3, CvId::C4];

impl CvSet {
    pub fn new(name: impl Into<String>, ids: Vec<CvId>) -> Result<Self> {
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::DuplicateCv(id.to_string()));
            }
        }
        Ok(CvSet {
            name: name.into(),
            ids,
        })
    }

    pub fn empty() -> Self {
        CvSet {
            name: "none".into(),
            ids: Vec::new(),
        }
    }

    /// `none`, `S4`..`S7`, or a comma-separated list such as `c5` or `c1,c3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let named: Option<Vec<CvId>> = match spec.to_ascii_lowercase().as_str() {
            "none" | "" => Some(Vec::new()),
            "s4" => Some(S4.to_vec()),
            "s5" => Some([&S4[..], &[CvId::C6]].concat()),
            "s6" => Some([&S4[..], &[CvId::C6, CvId::C5]].concat()),
            "s7" => Some([&S4[..], &[CvId::C6, CvId::C5, CvId::C7]].concat()),
            _ => None,
        };
        match named {
            Some(ids) => {
                let name = if ids.is_empty() {
                    "none".to_string()
                } else {
                    spec.to_ascii_uppercase()
                };
                CvSet::new(name, ids)
            }
            None => {
                let ids = spec
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<Vec<CvId>>>()?;
                let name = ids.iter().map(|i| i.name()).collect::<Vec<_>>().join("+");
                CvSet::new(name, ids)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ids(&self) -> &[CvId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn needs_sqrt(&self) -> bool {
        self.ids
            .iter()
            .any(|id| matches!(id, CvId::C3 | CvId::C4 | CvId::C6))
    }
}

impl fmt::Display for CvSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Evaluated control variates, one column per entry of the set.
#[derive(Debug, Clone, PartialEq)]
pub struct CvMatrix(pub DMatrix<f64>);

impl CvMatrix {
    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

/// `estimate_a − estimate_b` for one term, both on the pair's noise and example.
pub fn cv_pair_diff(
    term: Term,
    a: Estimator,
    b: Estimator,
    g: &Gaussian,
    pair: &PairedSample,
    ds: &Dataset,
) -> Result<FlatGradient> {
    if a == b {
        return Err(Error::Config(format!(
            "control variate needs two different estimators, got {} twice",
            a.name()
        )));
    }
    let ea = term_estimate(term, a, g, pair, ds)?;
    let eb = term_estimate(term, b, g, pair, ds)?;
    Ok(ea - &eb)
}

/// Difference between the single-example and the full-data second-order
/// expansion (in the signed input, around the data mean `m`) of the
/// log-likelihood.
///
/// With `a = zᵀm`, `Δm = x̃ₙ − m` and `ΔS = x̃ₙx̃ₙᵀ − S`:
/// `δ(z) = ℓ′(a)·zᵀΔm + ½ℓ″(a)·(zᵀΔS z − 2a·zᵀΔm)`, which averages to zero
/// over a uniformly drawn example for every `z`.
pub struct SubsamplingCorrection<'a> {
    pub ds: &'a Dataset,
    pub example: usize,
}

impl TermFunction for SubsamplingCorrection<'_> {
    fn value_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.ds.mean();
        let x = self.ds.signed(self.example);
        let a = z.dot(m);
        let xz = x.dot(z);
        let dm = x - m;
        let p = xz - a;
        // ΔS z
        let ds_z = x * xz - self.ds.second_moment() * z;
        let q = z.dot(&ds_z);
        let [_, l1, l2, l3] = model::logistic_derivs(a);
        let value = l1 * p + 0.5 * l2 * (q - 2.0 * a * p);
        let grad = dm * (l1 - l2 * a) + ds_z * l2 + m * (0.5 * l3 * q - l3 * a * p);
        (value, grad)
    }
}

/// c5 (`Rp1`) or c6 (`Rp2`).
pub fn taylor_subsampling_cv(
    g: &Gaussian,
    pair: &PairedSample,
    ds: &Dataset,
    estimator: Estimator,
) -> Result<FlatGradient> {
    let f = SubsamplingCorrection {
        ds,
        example: pair.example,
    };
    match estimator {
        Estimator::Rp1 => Ok(rp1_term_grad(&f, g, &pair.noise)),
        Estimator::Rp2 => rp2_term_grad(&f, g, &pair.noise),
        other => Err(Error::EstimatorUnavailable {
            term: "subsampling correction",
            estimator: other.name(),
        }),
    }
}

/// Exact minus RP₁ gradient of the quadratic model
/// `f̃(z) = f(z₀) + g₀ᵀ(z − z₀) + ½(z − z₀)ᵀH₀(z − z₀)` expanded at `z₀ = μ`.
///
/// Exact part: `μ` block `g₀`, L block `lower(H₀L)`. RP₁ part: `μ` block
/// `g₀ + H₀Lε`, L block `lower((g₀ + H₀Lε)εᵀ)`.
pub fn quadratic_model_cv(
    grad0: &DVector<f64>,
    hess0: &DMatrix<f64>,
    g: &Gaussian,
    eps: &DVector<f64>,
) -> FlatGradient {
    let hl = hess0 * g.chol();
    let hle = &hl * eps;
    let sampled_dir = grad0 + &hle;
    let l_block = hl - &sampled_dir * eps.transpose();
    FlatGradient::from_blocks(&-hle, &linalg::lower(&l_block))
}

/// c7: [`quadratic_model_cv`] for the pair's single-example data term.
pub fn taylor_distributional_cv(g: &Gaussian, pair: &PairedSample, ds: &Dataset) -> FlatGradient {
    let ll = model::loglik(g.mean(), &Minibatch::single(pair.example), ds);
    quadratic_model_cv(&ll.grad, &ll.hess, g, &pair.noise)
}

/// `∇_w log q_w(z)` at `z = Lε + μ`.
pub fn score_term_cv(g: &Gaussian, pair: &PairedSample) -> FlatGradient {
    g.score_grad(&g.transform_rp1(&pair.noise))
}

pub fn evaluate_cv(id: CvId, g: &Gaussian, pair: &PairedSample, ds: &Dataset) -> Result<FlatGradient> {
    use Estimator::*;
    match id {
        CvId::C1 => cv_pair_diff(Term::Variational, Rp1, ClosedForm, g, pair, ds),
        CvId::C2 => cv_pair_diff(Term::Prior, Rp1, ClosedForm, g, pair, ds),
        CvId::C3 => cv_pair_diff(Term::Prior, Rp1, Rp2, g, pair, ds),
        CvId::C4 => cv_pair_diff(Term::Data, Rp1, Rp2, g, pair, ds),
        CvId::C5 => taylor_subsampling_cv(g, pair, ds, Rp1),
        CvId::C6 => taylor_subsampling_cv(g, pair, ds, Rp2),
        CvId::C7 => Ok(taylor_distributional_cv(g, pair, ds)),
        CvId::Score => Ok(score_term_cv(g, pair)),
    }
}

/// One column per control variate, in set order.
pub fn evaluate_cv_set(
    set: &CvSet,
    g: &Gaussian,
    pair: &PairedSample,
    ds: &Dataset,
) -> Result<CvMatrix> {
    let mut c = DMatrix::zeros(g.params().flat_len(), set.len());
    for (k, &id) in set.ids().iter().enumerate() {
        c.set_column(k, &evaluate_cv(id, g, pair, ds)?.0);
    }
    Ok(CvMatrix(c))
}
