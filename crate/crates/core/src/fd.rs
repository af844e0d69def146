//! Central finite differences, used to certify hand-derived gradients.

use nalgebra::{DMatrix, DVector};

use crate::varfam::{FlatGradient, VariationalParams};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        (up - down) / (2.0 * h)
    })
}

/// Column `i` is the central difference of `f` along `e_i`.
pub fn jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        jac.set_column(i, &((up - down) / (2.0 * h)));
    }
    jac
}

/// Gradient with respect to the flattened `(μ, lower(L))` parameters.
///
/// Perturbations never touch the diagonal floor for the step sizes used here.
pub fn param_gradient(
    f: impl Fn(&VariationalParams) -> f64,
    w: &VariationalParams,
    h: f64,
) -> FlatGradient {
    let flat = w.to_flat();
    FlatGradient(gradient(
        |x| f(&VariationalParams::from_flat(x.as_slice()).expect("perturbed params stay valid")),
        &flat,
        h,
    ))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
