//! Pooled quartic regression closure: one polynomial `P(X_k)` shared by every
//! sector, fit by ordinary least squares over all `(X_k, U_k)` pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Parameterization, Trajectory};
use crate::error::{Error, Result};

/// Designs whose scaled condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// `P(x) = a0 + a1 x + a2 x^2 + a3 x^3 + a4 x^4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilksModel {
    pub coefficients: [f64; 5],
}

impl WilksModel {
    pub fn new(coefficients: [f64; 5]) -> Self {
        Self { coefficients }
    }

    /// Horner evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, a| acc * x + a)
    }
}

pub fn eval_poly(model: &WilksModel, x: f64) -> f64 {
    model.eval(x)
}

impl Parameterization for WilksModel {
    fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = self.eval(v);
        }
    }
}

/// Least-squares quartic through the pairs `(xs[i], us[i])`.
///
/// Columns of the Vandermonde design are divided by their max-abs before a
/// Householder QR solve; the coefficients are unscaled afterwards.
pub fn fit_polynomial(xs: &[f64], us: &[f64]) -> Result<WilksModel> {
    if xs.len() != us.len() {
        return Err(Error::dim(format!(
            "{} inputs vs {} targets",
            xs.len(),
            us.len()
        )));
    }
    if xs.len() < 5 {
        return Err(Error::Degenerate(
            "need at least 5 samples for a quartic".into(),
        ));
    }
    if xs.iter().chain(us).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression data".into()));
    }
    let m = xs.len();
    let mut scale = [1.0f64; 5];
    let xmax = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (p, s) in scale.iter_mut().enumerate().skip(1) {
        *s = xmax.powi(p as i32);
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let design = DMatrix::from_fn(m, 5, |i, p| xs[i].powi(p as i32) / scale[p]);
    let mut qtb = DVector::from_column_slice(us);

    let qr = design.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "polynomial design is rank deficient (condition estimate {:.3e})",
            if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            }
        )));
    }
    qr.q_tr_mul(&mut qtb);
    let sol = r
        .solve_upper_triangular(&qtb.rows(0, 5).into_owned())
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let mut coefficients = [0.0; 5];
    for p in 0..5 {
        coefficients[p] = sol[p] / scale[p];
    }
    Ok(WilksModel { coefficients })
}

/// Fits the shared polynomial on pooled training data (`X` and `U` of equal shape).
pub fn fit_wilks(x_train: &Trajectory, u_train: &Trajectory) -> Result<WilksModel> {
    if x_train.len() != u_train.len() || x_train.width() != u_train.width() {
        return Err(Error::dim(format!(
            "X is {}x{}, U is {}x{}",
            x_train.len(),
            x_train.width(),
            u_train.len(),
            u_train.width()
        )));
    }
    let xs: Vec<f64> = x_train.rows().flatten().copied().collect();
    let us: Vec<f64> = u_train.rows().flatten().copied().collect();
    fit_polynomial(&xs, &us)
}

/// Residuals `U_k - f_k(X)` on the training window, one row per time.
pub fn residuals(
    closure: &dyn Parameterization,
    x: &Trajectory,
    u: &Trajectory,
) -> Result<Trajectory> {
    if x.len() != u.len() || x.width() != u.width() {
        return Err(Error::dim("X and U trajectories differ in shape"));
    }
    let mut out = Trajectory::with_capacity(x.width(), x.len());
    let mut f = vec![0.0; x.width()];
    for i in 0..x.len() {
        closure.evaluate(x.state(i), &mut f);
        for (fk, uk) in f.iter_mut().zip(u.state(i)) {
            *fk = uk - *fk;
        }
        out.push(x.times()[i], &f);
    }
    Ok(out)
}
