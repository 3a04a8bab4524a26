//! Perturbed-observation ensemble Kalman filter.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ar::{ArModel, ArResidual};
use crate::dynamics::{
    ModelParams, Parameterization, ReducedStepper, ResidualProcess, Trajectory, DEFAULT_GUARD,
};
use crate::error::{Error, Result};
use crate::rng::{indexed_seed, seeded, sub_seed};
use crate::stats;

/// Linear observation operator, noise covariance and schedule.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub h: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    gamma_chol: Cholesky<f64, Dyn>,
    /// Observe every this many integration steps.
    pub every: usize,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, gamma: DMatrix<f64>, every: usize) -> Result<Self> {
        if gamma.nrows() != h.nrows() || !gamma.is_square() {
            return Err(Error::dim(format!(
                "H has {} rows, Gamma is {}x{}",
                h.nrows(),
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        if every == 0 {
            return Err(Error::config("obs_every", "must be positive"));
        }
        let asym = (&gamma - gamma.transpose()).amax();
        if asym > 1e-12 * gamma.amax().max(1.0) {
            return Err(Error::config("gamma", "must be symmetric"));
        }
        let gamma_chol = Cholesky::new(gamma.clone())
            .ok_or_else(|| Error::config("gamma", "must be positive definite"))?;
        Ok(Self {
            h,
            gamma,
            gamma_chol,
            every,
        })
    }

    /// Every component observed with independent noise of the given variance.
    pub fn identity(k: usize, variance: f64, every: usize) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::config("obs_variance", "must be positive and finite"));
        }
        Self::new(
            DMatrix::identity(k, k),
            DMatrix::from_diagonal_element(k, k, variance),
            every,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// A draw from `N(0, Γ)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.obs_dim(), |_, _| StandardNormal.sample(rng));
        self.gamma_chol.l() * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Row of the truth trajectory that was observed.
    pub step: usize,
    pub time: f64,
    pub y: Vec<f64>,
}

/// `y_j = H x(t_j) + v_j` at steps `s, 2s, ...` of `truth` (one row per step).
pub fn generate_observations<R: Rng + ?Sized>(
    truth: &Trajectory,
    obs: &ObservationModel,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    if truth.width() != obs.state_dim() {
        return Err(Error::dim(format!(
            "truth has {} components, H expects {}",
            truth.width(),
            obs.state_dim()
        )));
    }
    let steps = truth.len().saturating_sub(1);
    if steps == 0 || steps % obs.every != 0 {
        return Err(Error::config(
            "obs_every",
            format!(
                "{} does not divide the {steps} steps of the truth run",
                obs.every
            ),
        ));
    }
    Ok((1..=steps / obs.every)
        .map(|j| {
            let i = j * obs.every;
            let x = DVector::from_column_slice(truth.state(i));
            let y = &obs.h * x + obs.sample_noise(rng);
            Observation {
                step: i,
                time: truth.times()[i],
                y: y.as_slice().to_vec(),
            }
        })
        .collect())
}

/// Additive model noise for the forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    /// `N(0, σ² I)` added once per forecast.
    Gaussian {
        sigma: f64,
    },
    /// AR(1) residual carried by each member inside the propagator.
    Ar {
        model: ArModel,
    },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Gaussian { sigma } if *sigma >= 0.0 && sigma.is_finite() => Ok(()),
            NoiseSpec::Gaussian { .. } => Err(Error::config("noise.sigma", "must be >= 0")),
            NoiseSpec::Ar { model } if model.is_stationary() => Ok(()),
            NoiseSpec::Ar { .. } => Err(Error::config("noise.model", "AR model is not stationary")),
        }
    }
}

/// Ensemble members with stable identities and optional AR residual streams.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub members: Vec<Vec<f64>>,
    /// Identity used to bind per-member random streams.
    pub ids: Vec<usize>,
    pub residuals: Vec<ArResidual>,
}

impl EnsembleState {
    pub fn new(members: Vec<Vec<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config(
                "members",
                "ensemble needs at least 2 members",
            ));
        }
        let k = members[0].len();
        if members.iter().any(|m| m.len() != k) {
            return Err(Error::dim("ensemble members differ in length"));
        }
        if members.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble member".into()));
        }
        Ok(Self {
            ids: (0..members.len()).collect(),
            members,
            residuals: Vec::new(),
        })
    }

    /// `center + N(0, spread² I)` per member.
    pub fn perturbed<R: Rng + ?Sized>(
        center: &[f64],
        n: usize,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, spread)
            .map_err(|_| Error::config("init_spread", "must be finite and non-negative"))?;
        Self::new(
            (0..n)
                .map(|_| center.iter().map(|c| c + normal.sample(rng)).collect())
                .collect(),
        )
    }

    pub fn with_ar(mut self, model: &ArModel, seed: u64) -> Result<Self> {
        let k = self.dim();
        self.residuals = self
            .ids
            .iter()
            .map(|&id| ArResidual::new(model, vec![0.0; k], indexed_seed(seed, id)))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.len())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for v in &self.members {
            m.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Sample mean and `1/(N-1)` covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, k) = (self.len(), self.dim());
        let mean = DVector::from_vec(self.mean());
        let anomalies = DMatrix::from_fn(k, n, |i, j| self.members[j][i] - mean[i]);
        let mut cov = &anomalies * anomalies.transpose() / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        (mean, cov)
    }
}

/// Propagates every member, adds Gaussian noise if requested and returns the
/// forecast moments. `psi(n, state, residual)` advances member `n` in place.
pub fn forecast<F, R>(
    ens: &mut EnsembleState,
    mut psi: F,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: FnMut(usize, &mut [f64], Option<&mut ArResidual>) -> Result<()>,
    R: Rng + ?Sized,
{
    noise.validate()?;
    for n in 0..ens.len() {
        let res = ens.residuals.get_mut(n);
        psi(n, &mut ens.members[n], res)?;
        if ens.members[n]
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DEFAULT_GUARD)
        {
            return Err(Error::BlowUp {
                time: f64::NAN,
                detail: format!("ensemble member {} diverged", ens.ids[n]),
            });
        }
    }
    if let NoiseSpec::Gaussian { sigma } = noise {
        if *sigma > 0.0 {
            for m in &mut ens.members {
                for v in m.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
            }
        }
    }
    Ok(ens.moments())
}

/// `K = Ĉ Hᵀ S⁻¹` with `S = H Ĉ Hᵀ + Γ`, computed by a Cholesky solve.
pub fn kalman_gain(cov: &DMatrix<f64>, obs: &ObservationModel) -> Result<DMatrix<f64>> {
    let hc = &obs.h * cov;
    let s = &hc * obs.h.transpose() + &obs.gamma;
    let chol = Cholesky::new(s).ok_or_else(|| Error::Singular("innovation covariance".into()))?;
    Ok(chol.solve(&hc).transpose())
}

/// Perturbed-observation update; member `n` draws its perturbation from a
/// stream seeded by `(seed, ids[n])`.
pub fn analysis(
    ens: &mut EnsembleState,
    y: &[f64],
    obs: &ObservationModel,
    seed: u64,
) -> Result<()> {
    if y.len() != obs.obs_dim() || ens.dim() != obs.state_dim() {
        return Err(Error::dim("observation does not match the ensemble or H"));
    }
    let (_, cov) = ens.moments();
    let gain = kalman_gain(&cov, obs)?;
    let yv = DVector::from_column_slice(y);
    for (m, &id) in ens.members.iter_mut().zip(&ens.ids) {
        let mut rng = seeded(indexed_seed(seed, id));
        let v = DVector::from_column_slice(m);
        let innovation = &yv + obs.sample_noise(&mut rng) - &obs.h * &v;
        let updated = v + &gain * innovation;
        if updated.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("analysis update".into()));
        }
        m.copy_from_slice(updated.as_slice());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkfConfig {
    pub members: usize,
    pub obs_every: usize,
    /// Γ = obs_variance · I.
    pub obs_variance: f64,
    /// Standard deviation of the initial ensemble around the truth.
    pub init_spread: f64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            members: 40,
            obs_every: 20,
            obs_variance: 0.0225,
            init_spread: 0.1,
        }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::config("enkf.members", "need at least 2"));
        }
        if self.obs_every == 0 {
            return Err(Error::config("enkf.obs_every", "must be positive"));
        }
        if !(self.obs_variance > 0.0 && self.obs_variance.is_finite()) {
            return Err(Error::config("enkf.obs_variance", "must be positive"));
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return Err(Error::config("enkf.init_spread", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AssimilationResult {
    /// Ensemble mean at every step (analysis mean at observation times).
    pub mean: Trajectory,
    pub observations: Vec<Observation>,
    pub mspe: f64,
    pub l1_error: Vec<f64>,
}

/// Filters the reduced model against `truth` (slow variables at every step).
/// With `assimilate = false` the same ensemble runs freely, as a baseline.
pub fn run_assimilation(
    truth: &Trajectory,
    params: &ModelParams,
    closure: &dyn Parameterization,
    noise: &NoiseSpec,
    cfg: &EnkfConfig,
    seed: u64,
    assimilate: bool,
) -> Result<AssimilationResult> {
    cfg.validate()?;
    noise.validate()?;
    let k = params.k;
    if truth.width() != k || truth.is_empty() {
        return Err(Error::dim("truth does not match the model"));
    }
    let obs = ObservationModel::identity(k, cfg.obs_variance, cfg.obs_every)?;
    let observations =
        generate_observations(truth, &obs, &mut seeded(sub_seed(seed, "observations")))?;
    let mut ens = EnsembleState::perturbed(
        truth.state(0),
        cfg.members,
        cfg.init_spread,
        &mut seeded(sub_seed(seed, "initial-ensemble")),
    )?;
    if let NoiseSpec::Ar { model } = noise {
        ens = ens.with_ar(model, sub_seed(seed, "ar"))?;
    }
    let mut noise_rng = seeded(sub_seed(seed, "model-noise"));
    let analysis_seed = sub_seed(seed, "perturbed-obs");
    let s = cfg.obs_every;
    let zeros = vec![0.0; k];
    let mut stepper = ReducedStepper::new(*params, closure);
    let mut mean = Trajectory::with_capacity(k, truth.len());
    mean.push(truth.times()[0], &ens.mean());
    for (cycle, ob) in observations.iter().enumerate() {
        let mut path = vec![0.0; s * k];
        forecast(
            &mut ens,
            |_, x, mut res| {
                for step in 0..s {
                    match res.as_deref_mut() {
                        Some(r) => {
                            stepper.step(x, r.current())?;
                            r.advance();
                        }
                        None => stepper.step(x, &zeros)?,
                    }
                    path[step * k..(step + 1) * k]
                        .iter_mut()
                        .zip(x.iter())
                        .for_each(|(a, b)| *a += b);
                }
                Ok(())
            },
            noise,
            &mut noise_rng,
        )
        .map_err(|e| match e {
            Error::BlowUp { detail, .. } => Error::BlowUp {
                time: ob.time,
                detail,
            },
            other => other,
        })?;
        if assimilate {
            analysis(&mut ens, &ob.y, &obs, indexed_seed(analysis_seed, cycle))?;
        }
        let n = ens.len() as f64;
        let base = ob.step - s;
        for step in 0..s - 1 {
            let row: Vec<f64> = path[step * k..(step + 1) * k]
                .iter()
                .map(|v| v / n)
                .collect();
            mean.push(truth.times()[base + step + 1], &row);
        }
        mean.push(ob.time, &ens.mean());
    }
    let mspe = stats::mspe(truth, &mean)?;
    let l1_error = stats::l1_error_per_time(truth, &mean)?;
    Ok(AssimilationResult {
        mean,
        observations,
        mspe,
        l1_error,
    })
}
