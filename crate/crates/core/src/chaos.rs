//! Lyapunov spectrum of the uncoupled slow system and the quantities derived
//! from it.
//!
//! The state and a full set of tangent vectors are integrated together with
//! the same RK4 scheme (the Jacobian is re-evaluated at every stage state).
//! Every renormalisation interval the tangent basis is re-orthonormalised by
//! modified Gram-Schmidt and the logarithms of the diagonal of `R` are
//! accumulated.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate_with, resolved_tendency, FullState, ModelParams, Rk4, DEFAULT_GUARD,
};
use crate::error::{Error, Result};

/// Exponents with `|lambda| <= NEUTRAL_BAND` are reported as neutral.
pub const NEUTRAL_BAND: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovConfig {
    /// Time integrated before tangent vectors are started.
    pub spinup: f64,
    /// Time between re-orthonormalisations.
    pub renorm_interval: f64,
    /// End time of the run (measured from `t = 0`, so it includes the spin-up).
    pub total_time: f64,
    pub dt: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            spinup: 500.0,
            renorm_interval: 0.2,
            total_time: 1500.0,
            dt: 0.01,
        }
    }
}

impl LyapunovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(self.spinup >= 0.0) {
            return Err(Error::config("spinup", "must be non-negative"));
        }
        if !(self.total_time > self.spinup) {
            return Err(Error::config("total_time", "must exceed the spin-up time"));
        }
        let ratio = self.renorm_interval / self.dt;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(Error::config(
                "renorm_interval",
                "must be a positive integer multiple of dt",
            ));
        }
        Ok(())
    }

    fn steps_per_renorm(&self) -> usize {
        (self.renorm_interval / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResult {
    /// Exponents sorted in descending order.
    pub exponents: Vec<f64>,
    /// Times of the running estimates in `history`.
    pub history_times: Vec<f64>,
    /// Running estimates after each renormalisation.
    pub history: Vec<Vec<f64>>,
}

impl LyapunovResult {
    pub fn dim(&self) -> usize {
        self.exponents.len()
    }
}

/// A flow together with its Jacobian-vector product.
pub trait TangentSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, x: &[f64], out: &mut [f64]);
    /// Writes `J(x) v` into `out`.
    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]);
}

/// The slow Lorenz-96 flow `dX = G(X)` (no fast coupling).
#[derive(Debug, Clone, Copy)]
pub struct SlowLorenz96 {
    pub k: usize,
    pub forcing: f64,
}

impl TangentSystem for SlowLorenz96 {
    fn dim(&self) -> usize {
        self.k
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        resolved_tendency(x, self.forcing, out);
    }

    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.k;
        for k in 0..n {
            let km1 = (k + n - 1) % n;
            let km2 = (k + n - 2) % n;
            let kp1 = (k + 1) % n;
            out[k] = -v[km1] * (x[km2] - x[kp1]) - x[km1] * (v[km2] - v[kp1]) - v[k];
        }
    }
}

/// `dx = diag(rates) x`, whose exponents are the rates themselves.
#[derive(Debug, Clone)]
pub struct LinearDiagonal {
    pub rates: Vec<f64>,
}

impl TangentSystem for LinearDiagonal {
    fn dim(&self) -> usize {
        self.rates.len()
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), xi) in out.iter_mut().zip(&self.rates).zip(x) {
            *o = a * xi;
        }
    }

    fn jvp(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        self.rhs(v, out)
    }
}

/// Jacobian of the slow tendency `G`.
pub fn slow_jacobian(x: &[f64], p: &ModelParams) -> Result<DMatrix<f64>> {
    let n = p.k;
    if x.len() != n {
        return Err(Error::dim(format!("X has {} entries, K = {n}", x.len())));
    }
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n {
        let km1 = (k + n - 1) % n;
        let km2 = (k + n - 2) % n;
        let kp1 = (k + 1) % n;
        jac[(k, km1)] += -(x[km2] - x[kp1]);
        jac[(k, km2)] += -x[km1];
        jac[(k, kp1)] += x[km1];
        jac[(k, k)] += -1.0;
    }
    Ok(jac)
}

/// In-place modified Gram-Schmidt on the columns of a column-major `d x d`
/// block. Returns the diagonal of `R`, which is positive by construction.
pub fn modified_gram_schmidt(v: &mut [f64], d: usize) -> Result<Vec<f64>> {
    let mut diag = vec![0.0; d];
    for j in 0..d {
        for i in 0..j {
            let (head, tail) = v.split_at_mut(j * d);
            let qi = &head[i * d..(i + 1) * d];
            let vj = &mut tail[..d];
            let r: f64 = qi.iter().zip(vj.iter()).map(|(a, b)| a * b).sum();
            for (x, q) in vj.iter_mut().zip(qi) {
                *x -= r * q;
            }
        }
        let vj = &mut v[j * d..(j + 1) * d];
        let norm = vj.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "tangent vector {j} has norm {norm} during re-orthonormalisation"
            )));
        }
        for x in vj.iter_mut() {
            *x /= norm;
        }
        diag[j] = norm;
    }
    Ok(diag)
}

/// Spectrum of a generic flow from `x0`, starting the clock at `t = 0`.
pub fn spectrum_of<S: TangentSystem>(
    system: &S,
    x0: &[f64],
    cfg: &LyapunovConfig,
) -> Result<LyapunovResult> {
    cfg.validate()?;
    let d = system.dim();
    if x0.len() != d {
        return Err(Error::dim(format!(
            "initial state has {} entries, system has {d}",
            x0.len()
        )));
    }

    let mut x = x0.to_vec();
    let spin_steps = (cfg.spinup / cfg.dt).round() as usize;
    integrate_with(
        |s, o| system.rhs(s, o),
        &mut x,
        0.0,
        cfg.dt,
        spin_steps,
        usize::MAX,
        DEFAULT_GUARD,
        |_, _| {},
    )?;

    // Combined layout: state, then d tangent columns.
    let mut y = vec![0.0; d + d * d];
    y[..d].copy_from_slice(&x);
    for c in 0..d {
        y[d + c * d + c] = 1.0;
    }
    let rhs = |s: &[f64], o: &mut [f64]| {
        let (xs, vs) = s.split_at(d);
        let (dx, dv) = o.split_at_mut(d);
        system.rhs(xs, dx);
        for (vc, oc) in vs.chunks_exact(d).zip(dv.chunks_exact_mut(d)) {
            system.jvp(xs, vc, oc);
        }
    };

    let per = cfg.steps_per_renorm();
    let n_renorm = ((cfg.total_time - cfg.spinup) / cfg.renorm_interval).round() as usize;
    let mut stepper = Rk4::new(y.len());
    let mut sums = vec![0.0; d];
    let mut history_times = Vec::with_capacity(n_renorm);
    let mut history = Vec::with_capacity(n_renorm);
    let mut step = spin_steps;
    for r in 1..=n_renorm {
        for _ in 0..per {
            stepper
                .step(&rhs, &mut y, cfg.dt)
                .map_err(|e| Error::BlowUp {
                    time: step as f64 * cfg.dt,
                    detail: e.to_string(),
                })?;
            step += 1;
        }
        if let Some(v) = y[..d].iter().find(|v| v.abs() > DEFAULT_GUARD) {
            return Err(Error::BlowUp {
                time: step as f64 * cfg.dt,
                detail: format!("state reached {v}"),
            });
        }
        let diag = modified_gram_schmidt(&mut y[d..], d)?;
        for (s, r) in sums.iter_mut().zip(&diag) {
            *s += r.ln();
        }
        let elapsed = r as f64 * cfg.renorm_interval;
        history_times.push(cfg.spinup + elapsed);
        history.push(sums.iter().map(|s| s / elapsed).collect());
    }

    let mut exponents = history.last().cloned().unwrap_or_else(|| vec![0.0; d]);
    exponents.sort_by(|a, b| b.total_cmp(a));
    Ok(LyapunovResult {
        exponents,
        history_times,
        history,
    })
}

/// Lyapunov spectrum of the slow Lorenz-96 system from a random start.
pub fn lyapunov_spectrum<R: Rng + ?Sized>(
    p: &ModelParams,
    cfg: &LyapunovConfig,
    rng: &mut R,
) -> Result<LyapunovResult> {
    if p.h != 0.0 {
        return Err(Error::config(
            "h",
            "the spectrum is computed for the uncoupled slow system; set h = 0",
        ));
    }
    if p.k < 4 {
        return Err(Error::config("K", "need at least 4 sectors"));
    }
    let x0 = FullState::random(p, rng).x;
    let sys = SlowLorenz96 {
        k: p.k,
        forcing: p.forcing,
    };
    spectrum_of(&sys, &x0, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KaplanYorke {
    pub dimension: f64,
    /// Number of leading exponents with a positive partial sum.
    pub r: usize,
    /// Every partial sum was positive, so the value is the full dimension.
    pub saturated: bool,
}

/// Kaplan-Yorke dimension of a descending spectrum.
pub fn kaplan_yorke(exponents: &[f64]) -> Result<KaplanYorke> {
    if exponents.is_empty() {
        return Err(Error::Degenerate("empty spectrum".into()));
    }
    let mut partial = 0.0;
    let mut r = 0;
    for &l in exponents {
        if partial + l > 0.0 {
            partial += l;
            r += 1;
        } else {
            break;
        }
    }
    if r == exponents.len() {
        return Ok(KaplanYorke {
            dimension: r as f64,
            r,
            saturated: true,
        });
    }
    let dimension = if r == 0 {
        0.0
    } else {
        r as f64 + partial / exponents[r].abs()
    };
    Ok(KaplanYorke {
        dimension,
        r,
        saturated: false,
    })
}

/// Pesin sum of the positive exponents.
pub fn ks_entropy(exponents: &[f64]) -> f64 {
    exponents.iter().filter(|&&l| l > 0.0).sum()
}

/// `ln 2 / lambda_1`.
pub fn error_doubling_time(lambda1: f64) -> Result<f64> {
    if !(lambda1 > 0.0) {
        return Err(Error::Degenerate(format!(
            "doubling time undefined for leading exponent {lambda1}"
        )));
    }
    Ok(std::f64::consts::LN_2 / lambda1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub exponents: Vec<f64>,
    pub d_ky: f64,
    pub h_ks: f64,
    pub doubling_time: Option<f64>,
    pub n_positive: usize,
    pub n_neutral: usize,
    pub n_negative: usize,
}

impl SpectrumSummary {
    pub fn from_exponents(exponents: &[f64]) -> Result<Self> {
        let ky = kaplan_yorke(exponents)?;
        if ky.saturated {
            log::warn!("all partial sums of the spectrum are positive; D_KY set to the dimension");
        }
        Ok(Self {
            exponents: exponents.to_vec(),
            d_ky: ky.dimension,
            h_ks: ks_entropy(exponents),
            doubling_time: error_doubling_time(exponents[0]).ok(),
            n_positive: exponents.iter().filter(|&&l| l > NEUTRAL_BAND).count(),
            n_neutral: exponents
                .iter()
                .filter(|&&l| l.abs() <= NEUTRAL_BAND)
                .count(),
            n_negative: exponents.iter().filter(|&&l| l < -NEUTRAL_BAND).count(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn slow(k: usize) -> ModelParams {
        ModelParams {
            k,
            h: 0.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn jacobian_at_rest_is_minus_identity() {
        let jac = slow_jacobian(&[0.0; 6], &slow(6)).unwrap();
        assert_eq!(jac, -DMatrix::<f64>::identity(6, 6));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = slow(5);
        let x = [1.3, -0.7, 2.9, 0.4, -2.2];
        let jac = slow_jacobian(&x, &p).unwrap();
        let eps = 1e-6;
        for m in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[m] += eps;
            xm[m] -= eps;
            let mut gp = [0.0; 5];
            let mut gm = [0.0; 5];
            resolved_tendency(&xp, p.forcing, &mut gp);
            resolved_tendency(&xm, p.forcing, &mut gm);
            for k in 0..5 {
                let fd = (gp[k] - gm[k]) / (2.0 * eps);
                let scale = jac[(k, m)].abs().max(1.0);
                assert!((fd - jac[(k, m)]).abs() <= 1e-6 * scale, "({k},{m})");
            }
        }
    }

    #[test]
    fn jacobian_rows_have_four_entries() {
        let x: Vec<f64> = (0..7).map(|i| 0.37 * i as f64 + 0.11).collect();
        let jac = slow_jacobian(&x, &slow(7)).unwrap();
        for k in 0..7 {
            assert_eq!(jac.row(k).iter().filter(|v| **v != 0.0).count(), 4);
        }
    }

    #[test]
    fn jvp_agrees_with_dense_jacobian() {
        let p = slow(9);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 1.1).cos() * 4.0).collect();
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 0.3).sin()).collect();
        let jac = slow_jacobian(&x, &p).unwrap();
        let dense = &jac * nalgebra::DVector::from_column_slice(&v);
        let mut out = vec![0.0; 9];
        SlowLorenz96 {
            k: 9,
            forcing: 10.0,
        }
        .jvp(&x, &v, &mut out);
        for k in 0..9 {
            assert_abs_diff_eq!(out[k], dense[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_system_exponents_are_the_rates() {
        let sys = LinearDiagonal {
            rates: vec![0.5, -0.2, -1.3],
        };
        let cfg = LyapunovConfig {
            spinup: 0.0,
            renorm_interval: 0.1,
            total_time: 20.0,
            dt: 0.01,
        };
        let res = spectrum_of(&sys, &[1.0, 1.0, 1.0], &cfg).unwrap();
        for (l, a) in res.exponents.iter().zip([0.5, -0.2, -1.3]) {
            assert_abs_diff_eq!(*l, a, epsilon = 1e-6);
        }
        assert_eq!(res.history.len(), 200);
        assert!(res.history_times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn gram_schmidt_orthonormalises() {
        let d = 6;
        let mut v: Vec<f64> = (0..d * d)
            .map(|i| ((i * 7919) % 101) as f64 / 17.0 - 3.0)
            .collect();
        modified_gram_schmidt(&mut v, d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|r| v[i * d + r] * v[j * d + r]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_schmidt_rejects_dependent_columns() {
        let mut v = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(
            modified_gram_schmidt(&mut v, 2),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn coupled_parameters_rejected() {
        let p = ModelParams::default();
        let r = lyapunov_spectrum(&p, &LyapunovConfig::default(), &mut seeded(0));
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn bad_renorm_interval_rejected() {
        let cfg = LyapunovConfig {
            renorm_interval: 0.015,
            ..LyapunovConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_run_sum_matches_divergence() {
        // The slow flow has constant divergence -K, so the exponents sum to -K.
        let p = slow(12);
        let cfg = LyapunovConfig {
            spinup: 20.0,
            renorm_interval: 0.2,
            total_time: 120.0,
            dt: 0.01,
        };
        let res = lyapunov_spectrum(&p, &cfg, &mut seeded(5)).unwrap();
        let sum: f64 = res.exponents.iter().sum();
        assert!((sum + 12.0).abs() < 0.02 * 12.0, "sum {sum}");
        assert!(res.exponents[0] > 0.0);
    }

    #[test]
    fn kaplan_yorke_examples() {
        let ky = kaplan_yorke(&[1.0, -2.0]).unwrap();
        assert_eq!(ky.r, 1);
        assert_abs_diff_eq!(ky.dimension, 1.5);
        assert_eq!(kaplan_yorke(&[-0.1, -2.0]).unwrap().dimension, 0.0);
        let sat = kaplan_yorke(&[2.0, 1.0]).unwrap();
        assert!(sat.saturated);
        assert_eq!(sat.dimension, 2.0);
        assert!(kaplan_yorke(&[]).is_err());
    }

    #[test]
    fn entropy_and_doubling_time() {
        assert_abs_diff_eq!(ks_entropy(&[2.0, 0.5, -1.0]), 2.5);
        assert_eq!(ks_entropy(&[-0.5, -1.0]), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(error_doubling_time(ln2).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            error_doubling_time(2.0 * ln2).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(error_doubling_time(2.3098).unwrap(), 0.3001, epsilon = 1e-4);
        assert!(error_doubling_time(0.0).is_err());
        assert!(error_doubling_time(-1.0).is_err());
    }

    #[test]
    fn summary_counts() {
        let s = SpectrumSummary::from_exponents(&[1.0, 0.3, 0.005, -0.2, -3.0]).unwrap();
        assert_eq!((s.n_positive, s.n_neutral, s.n_negative), (2, 1, 2));
        assert_abs_diff_eq!(s.h_ks, 1.305);
    }
}
