//! First-order autoregressive residual model `e(t_i) = φ e(t_{i-1}) + σ z_i`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ResidualProcess, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{self, indexed_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArModel {
    pub phi: f64,
    /// Innovation standard deviation.
    pub sigma: f64,
    /// Stationary standard deviation `σ / sqrt(1 - φ²)`; absent when `|φ| >= 1`.
    pub sigma_e: Option<f64>,
}

impl ArModel {
    pub fn new(phi: f64, sigma: f64) -> Result<Self> {
        if !phi.is_finite() || !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(
                "ar",
                "phi must be finite and sigma non-negative",
            ));
        }
        let sigma_e = (phi.abs() < 1.0).then(|| sigma / (1.0 - phi * phi).sqrt());
        Ok(Self {
            phi,
            sigma,
            sigma_e,
        })
    }

    pub fn is_stationary(&self) -> bool {
        self.sigma_e.is_some()
    }
}

/// Pooled least-squares cost `Σ_k Σ_i (e_k(t_i) - φ e_k(t_{i-1}))²`.
pub fn ar_cost(residuals: &Trajectory, phi: f64) -> f64 {
    (0..residuals.width())
        .map(|k| {
            let c = residuals.component(k);
            c.windows(2)
                .map(|w| (w[1] - phi * w[0]).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn fit_series(series: &[Vec<f64>]) -> Result<ArModel> {
    let i_len = series.first().map_or(0, |s| s.len());
    if i_len < 2 {
        return Err(Error::Degenerate("AR fit needs at least two times".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for c in series {
        for w in c.windows(2) {
            num += w[1] * w[0];
            den += w[0] * w[0];
        }
    }
    if den == 0.0 {
        return Err(Error::Degenerate("all lagged residuals are zero".into()));
    }
    let phi = num / den;
    let dof = (series.len() * (i_len - 1)) as f64 - 1.0;
    if dof <= 0.0 {
        return Err(Error::Degenerate(
            "no degrees of freedom left for sigma".into(),
        ));
    }
    let cost: f64 = series
        .iter()
        .map(|c| {
            c.windows(2)
                .map(|w| (w[1] - phi * w[0]).powi(2))
                .sum::<f64>()
        })
        .sum();
    if !phi.is_finite() || !cost.is_finite() {
        return Err(Error::NonFinite("AR fit".into()));
    }
    let model = ArModel::new(phi, (cost / dof).sqrt())?;
    if !model.is_stationary() {
        log::warn!("fitted AR coefficient {phi} is not stationary");
    }
    Ok(model)
}

/// One `(φ, σ)` shared by all components (rows of `residuals` are times).
pub fn fit_ar1(residuals: &Trajectory) -> Result<ArModel> {
    let series: Vec<Vec<f64>> = (0..residuals.width())
        .map(|k| residuals.component(k))
        .collect();
    fit_series(&series)
}

/// Separate `(φ, σ)` for every component.
pub fn fit_ar1_per_component(residuals: &Trajectory) -> Result<Vec<ArModel>> {
    (0..residuals.width())
        .map(|k| fit_series(&[residuals.component(k)]))
        .collect()
}

/// `n_steps` values of the recursion started from `e0` (which is not returned).
pub fn simulate_ar1<R: Rng + ?Sized>(
    model: &ArModel,
    n_steps: usize,
    rng: &mut R,
    e0: f64,
) -> Result<Vec<f64>> {
    if !model.is_stationary() {
        return Err(Error::config("phi", "AR model is not stationary"));
    }
    let mut e = e0;
    Ok((0..n_steps)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            e = model.phi * e + model.sigma * z;
            e
        })
        .collect())
}

/// Independent AR(1) residual per component, each with its own seeded stream.
#[derive(Debug, Clone)]
pub struct ArResidual {
    phi: Vec<f64>,
    sigma: Vec<f64>,
    e: Vec<f64>,
    streams: Vec<rng::Rng>,
}

impl ArResidual {
    /// Shared model for `k` components, starting at `e0`.
    pub fn new(model: &ArModel, e0: Vec<f64>, seed: u64) -> Result<Self> {
        let k = e0.len();
        Self::per_component(&vec![*model; k], e0, seed)
    }

    pub fn per_component(models: &[ArModel], e0: Vec<f64>, seed: u64) -> Result<Self> {
        if models.len() != e0.len() {
            return Err(Error::dim(format!(
                "{} AR models for {} components",
                models.len(),
                e0.len()
            )));
        }
        if models.iter().any(|m| !m.is_stationary()) {
            return Err(Error::config("phi", "AR model is not stationary"));
        }
        Ok(Self {
            phi: models.iter().map(|m| m.phi).collect(),
            sigma: models.iter().map(|m| m.sigma).collect(),
            streams: (0..e0.len())
                .map(|k| rng::seeded(indexed_seed(seed, k)))
                .collect(),
            e: e0,
        })
    }

    pub fn set_state(&mut self, e: &[f64]) {
        self.e.copy_from_slice(e);
    }
}

impl ResidualProcess for ArResidual {
    fn current(&self) -> &[f64] {
        &self.e
    }

    fn advance(&mut self) {
        for k in 0..self.e.len() {
            let z: f64 = StandardNormal.sample(&mut self.streams[k]);
            self.e[k] = self.phi[k] * self.e[k] + self.sigma[k] * z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn column(v: &[f64]) -> Trajectory {
        let rows: Vec<Vec<f64>> = v.iter().map(|x| vec![*x]).collect();
        Trajectory::from_rows((0..v.len()).map(|i| i as f64).collect(), &rows).unwrap()
    }

    #[test]
    fn geometric_decay() {
        let s: Vec<f64> = (0..=10).map(|i| 0.5f64.powi(i)).collect();
        let m = fit_ar1(&column(&s)).unwrap();
        assert_eq!(m.phi, 0.5);
        assert_eq!(m.sigma, 0.0);
        assert_eq!(m.sigma_e, Some(0.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_ar1(&column(&[1.0])).is_err());
        assert!(fit_ar1(&column(&[0.0; 8])).is_err());
        let m = ArModel::new(1.2, 0.1).unwrap();
        assert!(!m.is_stationary());
        assert!(simulate_ar1(&m, 3, &mut seeded(0), 0.0).is_err());
    }

    #[test]
    fn simulation_examples() {
        let m = ArModel::new(0.5, 0.0).unwrap();
        assert_eq!(
            simulate_ar1(&m, 3, &mut seeded(0), 1.0).unwrap(),
            vec![0.5, 0.25, 0.125]
        );
        let n = 40_000;
        let w = simulate_ar1(&ArModel::new(0.0, 0.3).unwrap(), n, &mut seeded(2), 0.0).unwrap();
        let mean = w.iter().sum::<f64>() / n as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((sd - 0.3).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn sigma_e_identity() {
        let m = ArModel::new(0.9, 0.2).unwrap();
        assert_abs_diff_eq!(m.sigma_e.unwrap(), 0.2 / 0.19f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.sigma_e.unwrap(), 0.4588, epsilon = 1e-4);
    }

    #[test]
    fn residual_process_with_zero_sigma_is_deterministic() {
        let m = ArModel::new(0.5, 0.0).unwrap();
        let mut r = ArResidual::new(&m, vec![1.0, -2.0], 3).unwrap();
        r.advance();
        assert_eq!(r.current(), &[0.5, -1.0]);
    }

    proptest! {
        #[test]
        fn closed_form_minimizes_cost(v in prop::collection::vec(-3.0f64..3.0, 5..60)) {
            let t = column(&v);
            if let Ok(m) = fit_ar1(&t) {
                let c = ar_cost(&t, m.phi);
                prop_assert!(ar_cost(&t, m.phi + 1e-4) >= c);
                prop_assert!(ar_cost(&t, m.phi - 1e-4) >= c);
            }
        }

        #[test]
        fn sign_flip_invariant(v in prop::collection::vec(-3.0f64..3.0, 5..60)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            if let (Ok(a), Ok(b)) = (fit_ar1(&column(&v)), fit_ar1(&column(&neg))) {
                prop_assert_eq!(a.phi, b.phi);
                prop_assert_eq!(a.sigma, b.sigma);
            }
        }
    }
}
