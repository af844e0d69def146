//! Dense symmetric linear algebra: Cholesky factorization, a cyclic Jacobi
//! eigensolver, the principal matrix square root and its Fréchet derivative.
//!
//! Matrices here are small (the latent dimension plus a bias, well under a
//! hundred), so everything is plain O(D³) dense code on top of `nalgebra`
//! storage.

use nalgebra::{DMatrix, DVector};

use crate::error::LinalgError;

const MAX_SWEEPS: usize = 100;
/// Relative threshold below which negative eigenvalues are treated as round-off.
const PSD_TOLERANCE: f64 = 1e-10;
/// Relative threshold below which an eigenvalue makes the square root non-differentiable.
const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Lower-triangular `L` with `L Lᵀ = a` and a positive diagonal.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    square_check(a)?;
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { row: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` given the Cholesky factor `L` of `A`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("cholesky factor has a positive diagonal")
}

/// Eigendecomposition `A = U diag(λ) Uᵀ` of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl SymmetricEigen {
    /// Cyclic Jacobi rotations on the symmetrized input.
    pub fn new(a: &DMatrix<f64>) -> Result<Self, LinalgError> {
        square_check(a)?;
        let n = a.nrows();
        let mut m = (a + a.transpose()) * 0.5;
        let mut v = DMatrix::<f64>::identity(n, n);
        let scale = m.norm();

        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off.sqrt() <= 1e-15 * scale || off == 0.0 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                    let t = if tau >= 0.0 {
                        1.0 / (tau + (1.0 + tau * tau).sqrt())
                    } else {
                        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    rotate_columns(&mut m, p, q, c, s);
                    rotate_rows(&mut m, p, q, c, s);
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
        let mut vectors = DMatrix::<f64>::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &v.column(src));
        }
        Ok(SymmetricEigen { vectors, values })
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `U diag(f(λ)) Uᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        &scaled * self.vectors.transpose()
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
}

fn rotate_rows(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.ncols() {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
}

/// Condition number `λ_max / λ_min` of a symmetric matrix; infinite when `λ_min ≤ 0`.
pub fn condition_number(a: &DMatrix<f64>) -> Result<f64, LinalgError> {
    if a.nrows() == 0 {
        return Ok(1.0);
    }
    let eig = SymmetricEigen::new(a)?;
    let (lo, hi) = (eig.min_value(), eig.max_value());
    Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
}

/// Principal square root of a symmetric PSD matrix, kept together with its
/// eigendecomposition so the Fréchet derivative can reuse it.
#[derive(Debug, Clone)]
pub struct MatrixSqrt {
    eigen: SymmetricEigen,
    roots: DVector<f64>,
    sqrt: DMatrix<f64>,
}

impl MatrixSqrt {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let eigen = SymmetricEigen::new(sigma)?;
        let max = eigen.max_value().max(0.0);
        let min = eigen.min_value();
        if min < -PSD_TOLERANCE * max || (max == 0.0 && min < 0.0) {
            return Err(LinalgError::NotPsd { min, max });
        }
        let roots = eigen.values.map(|l| l.max(0.0).sqrt());
        let sqrt = eigen.reconstruct_with(|l| l.max(0.0).sqrt());
        Ok(MatrixSqrt { eigen, roots, sqrt })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn eigen(&self) -> &SymmetricEigen {
        &self.eigen
    }

    fn check_regular(&self) -> Result<(), LinalgError> {
        let max = self.eigen.max_value();
        let min = self.eigen.min_value();
        if min <= SINGULAR_TOLERANCE * max || max <= 0.0 {
            return Err(LinalgError::Singular { value: min, max });
        }
        Ok(())
    }

    /// Divides the eigenbasis matrix `m` element-wise by `√λ_i + √λ_j`.
    fn apply_phi(&self, m: &mut DMatrix<f64>) {
        let n = self.roots.len();
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] /= self.roots[i] + self.roots[j];
            }
        }
    }

    /// Daleckii–Krein derivative `U[(Uᵀ dΣ U) ∘ Φ]Uᵀ` in direction `d_sigma`.
    pub fn frechet(&self, d_sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        self.check_regular()?;
        let n = self.roots.len();
        if d_sigma.shape() != (n, n) {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", d_sigma.nrows(), d_sigma.ncols()),
            });
        }
        let u = &self.eigen.vectors;
        let mut inner = u.transpose() * d_sigma * u;
        self.apply_phi(&mut inner);
        Ok(u * inner * u.transpose())
    }

    /// Same map applied to the symmetric part of the rank-one matrix `g eᵀ`,
    /// computed in the eigenbasis without forming `g eᵀ`.
    pub fn frechet_sym_outer(
        &self,
        g: &DVector<f64>,
        e: &DVector<f64>,
    ) -> Result<DMatrix<f64>, LinalgError> {
        self.check_regular()?;
        let u = &self.eigen.vectors;
        let gh = u.tr_mul(g);
        let eh = u.tr_mul(e);
        let mut inner = (&gh * eh.transpose() + &eh * gh.transpose()) * 0.5;
        self.apply_phi(&mut inner);
        Ok(u * inner * u.transpose())
    }
}

/// `S` symmetric PSD with `S S = sigma`.
pub fn matrix_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    MatrixSqrt::new(sigma).map(|s| s.sqrt)
}

/// Directional derivative of the matrix square root at `sigma` in direction `d_sigma`.
pub fn matrix_sqrt_frechet(
    sigma: &DMatrix<f64>,
    d_sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    MatrixSqrt::new(sigma)?.frechet(d_sigma)
}

/// Keeps the lower triangle (diagonal included) and zeroes everything above.
pub fn lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

pub fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    (0..m.ncols()).all(|j| (0..j.min(m.nrows())).all(|i| m[(i, j)] == 0.0))
}

fn square_check(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}
