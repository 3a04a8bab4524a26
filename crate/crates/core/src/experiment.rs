//! Seeded end-to-end experiments: truth generation, closure fits, the
//! evaluation tables and plot-ready figure data.
//!
//! One master seed fans out into named streams (`truth`, `fits`,
//! `bias-noise`, `ar-forecast`, `ar-climate`, `enkf`, `lyapunov`,
//! `degree3`) so each stage can be re-run on its own.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ar::{fit_ar1, ArModel, ArResidual};
use crate::chaos::{lyapunov_spectrum, LyapunovConfig, LyapunovResult, SpectrumSummary};
use crate::dictionary::{
    enumerate_monomials, monomials_of_degree, own_powers, random_column_subset, DegreeMode,
    MultiIndex,
};
use crate::dynamics::{
    column_names, simulate_reduced, simulate_slow_record, FullState, ModelParams, Parameterization,
    ResidualProcess, Trajectory, ZeroResidual,
};
use crate::enkf::{run_assimilation, AssimilationResult, EnkfConfig, NoiseSpec};
use crate::error::{Error, Result};
use crate::regression::{fit_wilks, residuals, WilksModel};
use crate::rng::{indexed_seed, stream, sub_seed};
use crate::sparse::{
    apply_bias_mode, average_coefficients, fit_cs_parameterization, locality, AveragedPolynomial,
    BiasMode, CsDictionary, CsOptions, LocalityReport, SparseModel,
};
use crate::stats::{
    acf_normalized, kde, kl_from_samples, l1_error_per_time, mspe, silverman_bandwidth,
    uniform_grid, KL_GRID_PAD, KL_GRID_POINTS,
};

const EXPECTATIONS_TOML: &str = include_str!("../expectations.toml");

/// Time windows of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Windows {
    /// End of the discarded spin-up and start of training.
    pub spinup: f64,
    pub train_end: f64,
    pub test_end: f64,
    /// Forecast length for the trajectory error.
    pub horizon: f64,
}

impl Default for Windows {
    fn default() -> Self {
        Self {
            spinup: 500.0,
            train_end: 1000.0,
            test_end: 2000.0,
            horizon: 0.9,
        }
    }
}

impl Windows {
    pub fn validate(&self) -> Result<()> {
        if !(self.spinup >= 0.0 && self.spinup.is_finite()) {
            return Err(Error::config(
                "windows.spinup",
                "must be finite and non-negative",
            ));
        }
        if !(self.train_end > self.spinup) {
            return Err(Error::config(
                "windows.train_end",
                "must follow the spin-up",
            ));
        }
        if !(self.test_end > self.train_end && self.test_end.is_finite()) {
            return Err(Error::config(
                "windows.test_end",
                "must follow the training window",
            ));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("windows.horizon", "must be positive"));
        }
        if self.train_end + self.horizon > self.test_end {
            return Err(Error::config(
                "windows.horizon",
                "must fit inside the test window",
            ));
        }
        Ok(())
    }
}

/// Deterministic closures compared in the trajectory and density tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wilks,
    CsRaw,
    CsZeroBias,
    CsAvgBias,
    CsNoisyBias,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wilks,
        Method::CsRaw,
        Method::CsZeroBias,
        Method::CsAvgBias,
        Method::CsNoisyBias,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Wilks => "wilks",
            Method::CsRaw => "cs-raw",
            Method::CsZeroBias => "cs-zero-bias",
            Method::CsAvgBias => "cs-avg-bias",
            Method::CsNoisyBias => "cs-noisy-bias",
        }
    }

    pub fn bias_mode(&self, sigma_bias: f64) -> Option<BiasMode> {
        match self {
            Method::Wilks => None,
            Method::CsRaw => Some(BiasMode::Raw),
            Method::CsZeroBias => Some(BiasMode::Zero),
            Method::CsAvgBias => Some(BiasMode::Average),
            Method::CsNoisyBias => Some(BiasMode::AveragePlusNoise { sigma: sigma_bias }),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown(format!("method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsSettings {
    /// Degree of the own-power basis of the final model.
    pub degree: u32,
    /// Spread of the noisy biases.
    pub sigma_bias: f64,
    pub options: CsOptions,
    /// Snapshot stride of the degree-2 and degree-3 dictionary stages.
    pub ladder_stride: usize,
    pub degree3_repetitions: usize,
    pub degree3_random_columns: usize,
    /// Relative size below which a coefficient is treated as irrelevant.
    pub relevance: f64,
}

impl Default for CsSettings {
    fn default() -> Self {
        Self {
            degree: 4,
            sigma_bias: 0.07,
            options: CsOptions::default(),
            ladder_stride: 10,
            degree3_repetitions: 100,
            degree3_random_columns: 100,
            relevance: 1e-3,
        }
    }
}

impl CsSettings {
    pub fn validate(&self) -> Result<()> {
        self.options.validate()?;
        if self.degree == 0 {
            return Err(Error::config("cs.degree", "must be positive"));
        }
        if !(self.sigma_bias >= 0.0 && self.sigma_bias.is_finite()) {
            return Err(Error::config(
                "cs.sigma_bias",
                "must be finite and non-negative",
            ));
        }
        if self.ladder_stride == 0 {
            return Err(Error::config("cs.ladder_stride", "must be positive"));
        }
        if self.degree3_repetitions == 0 {
            return Err(Error::config("cs.degree3_repetitions", "must be positive"));
        }
        if !(self.relevance >= 0.0 && self.relevance < 1.0) {
            return Err(Error::config("cs.relevance", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    /// Snapshot stride of the samples entering the density estimates.
    pub kl_stride: usize,
    /// Stochastic forecasts averaged for the AR trajectory error.
    pub ar_realizations: usize,
    /// Largest autocorrelation lag, in steps.
    pub acf_max_lag: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            kl_stride: 10,
            ar_realizations: 20,
            acf_max_lag: 1000,
        }
    }
}

impl EvaluationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.kl_stride == 0 {
            return Err(Error::config("evaluation.kl_stride", "must be positive"));
        }
        if self.ar_realizations == 0 {
            return Err(Error::config(
                "evaluation.ar_realizations",
                "must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkfSettings {
    pub members: usize,
    pub obs_every: usize,
    pub obs_variance: f64,
    pub init_spread: f64,
    /// Length of the assimilation run, starting at the end of training.
    pub window: f64,
}

impl Default for EnkfSettings {
    fn default() -> Self {
        let f = EnkfConfig::default();
        Self {
            members: f.members,
            obs_every: f.obs_every,
            obs_variance: f.obs_variance,
            init_spread: f.init_spread,
            window: 20.0,
        }
    }
}

impl EnkfSettings {
    pub fn filter(&self) -> EnkfConfig {
        EnkfConfig {
            members: self.members,
            obs_every: self.obs_every,
            obs_variance: self.obs_variance,
            init_spread: self.init_spread,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        self.filter().validate()?;
        if !(self.window > 0.0) {
            return Err(Error::config("enkf.window", "must be positive"));
        }
        let steps = (self.window / dt).round() as usize;
        if steps == 0 || steps % self.obs_every != 0 {
            return Err(Error::config(
                "enkf.window",
                format!(
                    "{steps} steps is not a multiple of obs_every = {}",
                    self.obs_every
                ),
            ));
        }
        Ok(())
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelParams,
    pub windows: Windows,
    pub methods: Vec<Method>,
    /// Add AR(1) residuals to the reduced models in `evaluate`.
    pub ar: bool,
    pub cs: CsSettings,
    pub evaluation: EvaluationSettings,
    pub enkf: EnkfSettings,
    pub lyapunov: LyapunovConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            model: ModelParams::default(),
            windows: Windows::default(),
            methods: Method::ALL.to_vec(),
            ar: false,
            cs: CsSettings::default(),
            evaluation: EvaluationSettings::default(),
            enkf: EnkfSettings::default(),
            lyapunov: LyapunovConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.windows.validate()?;
        self.cs.validate()?;
        self.evaluation.validate()?;
        self.enkf.validate(self.model.dt)?;
        self.lyapunov.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must name at least one method"));
        }
        let w = &self.windows;
        let window_steps = (w.test_end - w.spinup) / self.model.dt;
        if (window_steps - window_steps.round()).abs() > 1e-6 {
            return Err(Error::config(
                "windows",
                "boundaries must be multiples of dt",
            ));
        }
        if w.train_end + self.enkf.window > w.test_end + 1e-9 {
            return Err(Error::config(
                "enkf.window",
                "must fit inside the test window",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Stable identifier derived from the full configuration.
    pub fn experiment_id(&self, kind: &str) -> Result<String> {
        let key = format!("{kind}:{}", serde_json::to_string(self)?);
        Ok(format!("{kind}-{:016x}", sub_seed(self.seed, &key)))
    }
}

/// Reference values and tolerances shipped with the crate.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Expectations {
    pub version: u32,
    pub lyapunov: LyapunovExpectations,
    pub wilks: CoefficientExpectations,
    pub cs: CsExpectations,
    pub table2: Table2Expectations,
    pub table3: Table3Expectations,
    pub table4: Table4Expectations,
    pub properties: PropertyExpectations,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct Tolerance {
    pub value: f64,
    pub tol: f64,
}

impl Tolerance {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.tol
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LyapunovExpectations {
    pub lambda1: Tolerance,
    pub n_positive: Tolerance,
    pub d_ky: Tolerance,
    pub h_ks: Tolerance,
    pub max_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CoefficientExpectations {
    pub coefficients: Vec<f64>,
    pub relative_tol: f64,
    pub exact_recovery_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsExpectations {
    pub coefficients: Vec<f64>,
    pub relative_tol: f64,
    pub degree2_coefficients: Vec<f64>,
    pub locality_fraction: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub mspe: Option<f64>,
    pub avg_kl: Option<f64>,
    pub phi: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma_e: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Table2Expectations {
    pub raw_ratio: f64,
    pub mspe_band: [f64; 2],
    pub reference: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Table3Expectations {
    pub phi_wilks: Tolerance,
    pub phi_cs: Tolerance,
    pub sigma_e_identity_tol: f64,
    pub reference: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Table4Expectations {
    pub mspe_band: [f64; 2],
    pub max_seconds: f64,
    pub reference: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PropertyExpectations {
    pub rk4_ratio: Tolerance,
    pub energy_tol: f64,
    pub kde_integral_tol: f64,
    pub kkt_relative_tol: f64,
    pub kkt_instances: usize,
    pub kalman_relative_tol: f64,
    pub kalman_members: usize,
    pub kalman_cycles: usize,
    pub ar_tol: f64,
    pub ar_samples: usize,
    pub monomials_degree3_exact: u128,
    pub monomials_degree4_up_to: u128,
}

pub fn expectations() -> Result<Expectations> {
    toml::from_str(EXPECTATIONS_TOML).map_err(|e| Error::Toml(e.to_string()))
}

/// `|x - reference| <= tol * |reference|` and the signs agree.
pub fn within_relative(x: f64, reference: f64, tol: f64) -> bool {
    (x - reference).abs() <= tol * reference.abs() && x.signum() == reference.signum()
}

/// Slow variables and fast-scale forcing of the coupled model at every step
/// from the end of the spin-up to the end of the test window.
#[derive(Debug, Clone)]
pub struct Truth {
    pub x: Trajectory,
    pub u: Trajectory,
    pub windows: Windows,
}

impl Truth {
    pub fn train(&self) -> (Trajectory, Trajectory) {
        let w = &self.windows;
        (
            self.x.window(w.spinup, w.train_end),
            self.u.window(w.spinup, w.train_end),
        )
    }

    /// Row index of time `t`.
    pub fn index(&self, t: f64) -> Result<usize> {
        let t0 = self.x.times()[0];
        let dt = self.x.spacing().unwrap_or(1.0);
        let i = ((t - t0) / dt).round();
        if i < 0.0 || i as usize >= self.x.len() {
            return Err(Error::config(
                "time",
                format!("{t} is outside the truth run"),
            ));
        }
        Ok(i as usize)
    }
}

pub fn generate_truth(cfg: &ExperimentConfig) -> Result<Truth> {
    let p = &cfg.model;
    let w = &cfg.windows;
    let mut rng = stream(cfg.seed, "truth");
    let start = FullState::random(p, &mut rng);
    let spin_steps = ((w.spinup / p.dt).round() as usize).max(1);
    let spun = simulate_slow_record(&start, p, 0.0, w.spinup, spin_steps)?;
    let rec = simulate_slow_record(&spun.final_state, p, w.spinup, w.test_end, 1)?;
    Ok(Truth {
        x: rec.x,
        u: rec.u,
        windows: *w,
    })
}

/// A fitted deterministic closure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Closure {
    Wilks(WilksModel),
    Sparse(SparseModel),
}

impl Parameterization for Closure {
    fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Closure::Wilks(m) => m.evaluate(x, out),
            Closure::Sparse(m) => m.evaluate(x, out),
        }
    }
}

impl Closure {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Coefficients of the component-averaged polynomial, constant term first.
    pub fn averaged(&self) -> Vec<f64> {
        match self {
            Closure::Wilks(m) => m.coefficients.to_vec(),
            Closure::Sparse(m) => average_coefficients(m).coefficients,
        }
    }
}

pub fn fit_wilks_closure(truth: &Truth) -> Result<WilksModel> {
    let (x, u) = truth.train();
    fit_wilks(&x, &u)
}

/// Raw-bias sparse fit over each component's own powers.
pub fn fit_cs_raw(cfg: &ExperimentConfig, truth: &Truth) -> Result<SparseModel> {
    let (x, u) = truth.train();
    fit_cs_parameterization(
        &x,
        &u,
        &CsDictionary::OwnPowers {
            degree: cfg.cs.degree,
        },
        BiasMode::Raw,
        &cfg.cs.options,
        sub_seed(cfg.seed, "fits"),
    )
}

/// Fits every requested method, sharing one raw sparse fit.
pub fn fit_methods(
    cfg: &ExperimentConfig,
    truth: &Truth,
    methods: &[Method],
) -> Result<Vec<(Method, Closure)>> {
    let mut raw: Option<SparseModel> = None;
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let closure = match m.bias_mode(cfg.cs.sigma_bias) {
            None => Closure::Wilks(fit_wilks_closure(truth)?),
            Some(mode) => {
                if raw.is_none() {
                    raw = Some(fit_cs_raw(cfg, truth)?);
                }
                let base = raw.as_ref().expect("raw fit present");
                Closure::Sparse(apply_bias_mode(
                    base,
                    mode,
                    sub_seed(cfg.seed, "bias-noise"),
                )?)
            }
        };
        out.push((m, closure));
    }
    Ok(out)
}

/// Closure residuals `U - f(X)` over the training window.
pub fn training_residuals(closure: &dyn Parameterization, truth: &Truth) -> Result<Trajectory> {
    let (x, u) = truth.train();
    residuals(closure, &x, &u)
}

pub fn fit_residual_ar(closure: &dyn Parameterization, truth: &Truth) -> Result<ArModel> {
    fit_ar1(&training_residuals(closure, truth)?)
}

/// Reduced-model forecast from the truth at the end of training.
pub fn forecast(
    cfg: &ExperimentConfig,
    truth: &Truth,
    closure: &dyn Parameterization,
    residual: &mut dyn ResidualProcess,
) -> Result<(Trajectory, f64)> {
    let w = &cfg.windows;
    let i0 = truth.index(w.train_end)?;
    let pred = simulate_reduced(
        truth.x.state(i0),
        &cfg.model,
        closure,
        residual,
        w.train_end,
        w.train_end + w.horizon,
        1,
    )?;
    let reference = truth.x.window(w.train_end, w.train_end + w.horizon);
    let err = mspe(&reference, &pred)?;
    Ok((pred, err))
}

/// Mean over components of the divergence between the marginal densities of
/// the truth and a free run of the reduced model from the end of the spin-up.
///
/// A blown-up run has no climate and yields `None`.
pub fn average_kl(
    cfg: &ExperimentConfig,
    truth: &Truth,
    closure: &dyn Parameterization,
    residual: &mut dyn ResidualProcess,
) -> Result<Option<f64>> {
    let w = &cfg.windows;
    let stride = cfg.evaluation.kl_stride;
    let run = simulate_reduced(
        truth.x.state(0),
        &cfg.model,
        closure,
        residual,
        w.spinup,
        w.test_end,
        stride,
    );
    let model = match run {
        Ok(t) => t,
        Err(Error::BlowUp { time, detail }) => {
            log::warn!("reduced model blew up at t = {time}: {detail}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let reference = truth.x.thin(stride);
    let k = cfg.model.k;
    let mut total = 0.0;
    for c in 0..k {
        total += kl_from_samples(&reference.component(c), &model.component(c), None)?.divergence;
    }
    Ok(Some(total / k as f64))
}

/// One row of a results table; absent metrics are `null` in JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mspe: Option<f64>,
    pub avg_kl: Option<f64>,
    pub deterministic_mspe: Option<f64>,
    pub phi: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma_e: Option<f64>,
    pub enkf_mspe: Option<f64>,
    pub free_run_mspe: Option<f64>,
}

impl MethodRow {
    fn named(method: &str) -> Self {
        Self {
            method: method.to_string(),
            ..Self::default()
        }
    }
}

/// Comparison of a result against the shipped expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Machine-readable outcome of an experiment. Wall-clock time is kept out of
/// it so that reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment_id: String,
    pub kind: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub rows: Vec<MethodRow>,
    pub spectrum: Option<SpectrumSummary>,
    pub checks: Vec<Check>,
    pub expectations_version: u32,
}

impl MetricsReport {
    pub fn new(cfg: &ExperimentConfig, kind: &str, stages: &[&str]) -> Result<Self> {
        Ok(Self {
            experiment_id: cfg.experiment_id(kind)?,
            kind: kind.to_string(),
            seed: cfg.seed,
            seeds: stages
                .iter()
                .map(|s| (s.to_string(), sub_seed(cfg.seed, s)))
                .collect(),
            rows: Vec::new(),
            spectrum: None,
            checks: Vec::new(),
            expectations_version: expectations()?.version,
        })
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lyapunov spectrum of the uncoupled slow system.
pub struct Table1 {
    pub report: MetricsReport,
    pub result: LyapunovResult,
}

pub fn run_table1(cfg: &ExperimentConfig) -> Result<Table1> {
    let exp = expectations()?;
    let mut rng = stream(cfg.seed, "lyapunov");
    let result = lyapunov_spectrum(&cfg.model.slow_only(), &cfg.lyapunov, &mut rng)?;
    let summary = SpectrumSummary::from_exponents(&result.exponents)?;
    let mut report = MetricsReport::new(cfg, "table1", &["lyapunov"])?;
    let e = &exp.lyapunov;
    let l1 = summary.exponents[0];
    report.checks = vec![
        Check::new("lambda1", e.lambda1.contains(l1), format!("{l1:.4}")),
        Check::new(
            "n_positive",
            e.n_positive.contains(summary.n_positive as f64),
            summary.n_positive.to_string(),
        ),
        Check::new(
            "d_ky",
            e.d_ky.contains(summary.d_ky),
            format!("{:.3}", summary.d_ky),
        ),
        Check::new(
            "h_ks",
            e.h_ks.contains(summary.h_ks),
            format!("{:.3}", summary.h_ks),
        ),
    ];
    report.spectrum = Some(summary);
    Ok(Table1 { report, result })
}

/// Deterministic closures scored by forecast error and climate divergence.
pub struct Table2 {
    pub report: MetricsReport,
    pub models: Vec<(Method, Closure)>,
    pub forecasts: Vec<(Method, Trajectory)>,
}

pub fn run_table2(cfg: &ExperimentConfig, truth: &Truth) -> Result<Table2> {
    let exp = expectations()?;
    let models = fit_methods(cfg, truth, &cfg.methods)?;
    let mut report = MetricsReport::new(cfg, "table2", &["truth", "fits", "bias-noise"])?;
    let mut forecasts = Vec::new();
    let k = cfg.model.k;
    for (m, closure) in &models {
        log::info!("scoring {}", m.name());
        let mut row = MethodRow::named(m.name());
        match forecast(cfg, truth, closure, &mut ZeroResidual::new(k)) {
            Ok((pred, err)) => {
                row.mspe = Some(err);
                forecasts.push((*m, pred));
            }
            Err(Error::BlowUp { time, detail }) => {
                log::warn!("{} forecast blew up at t = {time}: {detail}", m.name());
            }
            Err(e) => return Err(e),
        }
        row.avg_kl = average_kl(cfg, truth, closure, &mut ZeroResidual::new(k))?;
        report.rows.push(row);
    }
    report.checks = table2_checks(&report, &exp.table2);
    Ok(Table2 {
        report,
        models,
        forecasts,
    })
}

fn table2_checks(report: &MetricsReport, e: &Table2Expectations) -> Vec<Check> {
    let mut checks = Vec::new();
    let get = |m: Method| report.row(m.name()).and_then(|r| r.mspe);
    let corrected = [Method::CsZeroBias, Method::CsAvgBias, Method::CsNoisyBias];
    // A blown-up forecast counts as an unbounded error.
    let raw = report
        .row(Method::CsRaw.name())
        .map(|r| r.mspe.unwrap_or(f64::INFINITY));
    if let Some(raw) = raw {
        let worst = corrected
            .iter()
            .filter_map(|m| get(*m))
            .fold(f64::NAN, f64::max);
        if worst.is_finite() {
            checks.push(Check::new(
                "cs_raw_ratio",
                raw >= e.raw_ratio * worst,
                format!("cs-raw {raw:.5} vs worst corrected {worst:.5}"),
            ));
        }
    }
    for m in [
        Method::Wilks,
        Method::CsZeroBias,
        Method::CsAvgBias,
        Method::CsNoisyBias,
    ] {
        if report.row(m.name()).is_none() {
            continue;
        }
        let v = get(m);
        checks.push(Check::new(
            &format!("mspe_band_{}", m.name()),
            v.is_some_and(|v| v >= e.mspe_band[0] && v <= e.mspe_band[1]),
            format!("{v:?}"),
        ));
    }
    let kl = |m: Method| report.row(m.name()).and_then(|r| r.avg_kl);
    if let (Some(a), Some(b)) = (kl(Method::CsNoisyBias), kl(Method::Wilks)) {
        checks.push(Check::new(
            "soft_kl_noisy_below_wilks",
            a < b,
            format!("{a:.5} vs {b:.5} (reported, not required)"),
        ));
    }
    checks
}

/// The two closures carried into the stochastic and filtering stages.
#[derive(Debug, Clone)]
pub struct CoreModels {
    pub wilks: Closure,
    pub cs: Closure,
    pub ar_wilks: ArModel,
    pub ar_cs: ArModel,
}

pub fn fit_core_models(cfg: &ExperimentConfig, truth: &Truth) -> Result<CoreModels> {
    let fitted = fit_methods(cfg, truth, &[Method::Wilks, Method::CsNoisyBias])?;
    let mut it = fitted.into_iter().map(|(_, c)| c);
    let wilks = it.next().expect("two fits");
    let cs = it.next().expect("two fits");
    let ar_wilks = fit_residual_ar(&wilks, truth)?;
    let ar_cs = fit_residual_ar(&cs, truth)?;
    Ok(CoreModels {
        wilks,
        cs,
        ar_wilks,
        ar_cs,
    })
}

/// Mean forecast error over independent AR realizations started from `e = 0`.
pub fn ar_forecast_mspe(
    cfg: &ExperimentConfig,
    truth: &Truth,
    closure: &dyn Parameterization,
    ar: &ArModel,
    seed: u64,
) -> Result<f64> {
    let k = cfg.model.k;
    let n = cfg.evaluation.ar_realizations;
    let mut total = 0.0;
    for r in 0..n {
        let mut res = ArResidual::new(ar, vec![0.0; k], indexed_seed(seed, r))?;
        total += forecast(cfg, truth, closure, &mut res)?.1;
    }
    Ok(total / n as f64)
}

/// AR(1) residual models and the stochastic reduced models they induce.
pub struct Table3 {
    pub report: MetricsReport,
    pub models: CoreModels,
}

pub fn run_table3(cfg: &ExperimentConfig, truth: &Truth) -> Result<Table3> {
    let exp = expectations()?;
    let models = fit_core_models(cfg, truth)?;
    let mut report = MetricsReport::new(
        cfg,
        "table3",
        &["truth", "fits", "bias-noise", "ar-forecast", "ar-climate"],
    )?;
    let k = cfg.model.k;
    let rows = [
        (Method::Wilks, &models.wilks, &models.ar_wilks),
        (Method::CsNoisyBias, &models.cs, &models.ar_cs),
    ];
    for (m, closure, ar) in rows {
        log::info!("stochastic scoring of {}", m.name());
        let mut row = MethodRow::named(m.name());
        row.phi = Some(ar.phi);
        row.sigma = Some(ar.sigma);
        row.sigma_e = ar.sigma_e;
        row.deterministic_mspe = Some(forecast(cfg, truth, closure, &mut ZeroResidual::new(k))?.1);
        if ar.is_stationary() {
            let fseed = indexed_seed(sub_seed(cfg.seed, "ar-forecast"), m as usize);
            row.mspe = Some(ar_forecast_mspe(cfg, truth, closure, ar, fseed)?);
            let cseed = indexed_seed(sub_seed(cfg.seed, "ar-climate"), m as usize);
            let mut res = ArResidual::new(ar, vec![0.0; k], cseed)?;
            row.avg_kl = average_kl(cfg, truth, closure, &mut res)?;
        }
        report.rows.push(row);
    }
    let e = &exp.table3;
    let mut checks = Vec::new();
    for (name, tol) in [("wilks", &e.phi_wilks), ("cs-noisy-bias", &e.phi_cs)] {
        let r = report.row(name).expect("row present");
        let phi = r.phi.unwrap_or(f64::NAN);
        checks.push(Check::new(
            &format!("phi_{name}"),
            tol.contains(phi),
            format!("{phi:.5}"),
        ));
        let better = matches!((r.mspe, r.deterministic_mspe), (Some(a), Some(d)) if a < d);
        checks.push(Check::new(
            &format!("ar_improves_{name}"),
            better,
            format!(
                "AR {:?} vs deterministic {:?}",
                r.mspe, r.deterministic_mspe
            ),
        ));
        let identity = match (r.phi, r.sigma, r.sigma_e) {
            (Some(p), Some(s), Some(se)) => {
                (se * se - s * s / (1.0 - p * p)).abs() <= e.sigma_e_identity_tol * se * se
            }
            _ => false,
        };
        checks.push(Check::new(
            &format!("sigma_e_identity_{name}"),
            identity,
            "",
        ));
    }
    report.checks = checks;
    Ok(Table3 { report, models })
}

/// One filtering configuration of the assimilation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    Wilks,
    Cs,
    ArWilks,
    ArCs,
}

impl FilterVariant {
    pub const ALL: [FilterVariant; 4] = [
        FilterVariant::Wilks,
        FilterVariant::Cs,
        FilterVariant::ArWilks,
        FilterVariant::ArCs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterVariant::Wilks => "wilks",
            FilterVariant::Cs => "cs",
            FilterVariant::ArWilks => "ar-wilks",
            FilterVariant::ArCs => "ar-cs",
        }
    }

    /// Closure and model noise: fitted innovation spread as Gaussian noise
    /// for the plain variants, the AR process itself for the others.
    pub fn setup<'a>(&self, m: &'a CoreModels) -> (&'a Closure, NoiseSpec) {
        match self {
            FilterVariant::Wilks => (
                &m.wilks,
                NoiseSpec::Gaussian {
                    sigma: m.ar_wilks.sigma,
                },
            ),
            FilterVariant::Cs => (
                &m.cs,
                NoiseSpec::Gaussian {
                    sigma: m.ar_cs.sigma,
                },
            ),
            FilterVariant::ArWilks => (&m.wilks, NoiseSpec::Ar { model: m.ar_wilks }),
            FilterVariant::ArCs => (&m.cs, NoiseSpec::Ar { model: m.ar_cs }),
        }
    }
}

impl std::str::FromStr for FilterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown(format!("filter variant `{s}`")))
    }
}

/// Truth over the assimilation window.
pub fn enkf_truth(cfg: &ExperimentConfig, truth: &Truth) -> Trajectory {
    let w = &cfg.windows;
    truth.x.window(w.train_end, w.train_end + cfg.enkf.window)
}

/// Filtered and free runs of one variant on the shared seed.
pub fn run_filter(
    cfg: &ExperimentConfig,
    window: &Trajectory,
    closure: &dyn Parameterization,
    noise: &NoiseSpec,
) -> Result<(AssimilationResult, AssimilationResult)> {
    let seed = sub_seed(cfg.seed, "enkf");
    let filter = cfg.enkf.filter();
    let filtered = run_assimilation(window, &cfg.model, closure, noise, &filter, seed, true)?;
    let free = run_assimilation(window, &cfg.model, closure, noise, &filter, seed, false)?;
    Ok((filtered, free))
}

pub struct Table4 {
    pub report: MetricsReport,
    pub models: CoreModels,
    pub runs: Vec<(FilterVariant, AssimilationResult)>,
    pub truth: Trajectory,
}

pub fn run_table4(cfg: &ExperimentConfig, truth: &Truth) -> Result<Table4> {
    let exp = expectations()?;
    let models = fit_core_models(cfg, truth)?;
    let window = enkf_truth(cfg, truth);
    let mut report = MetricsReport::new(cfg, "table4", &["truth", "fits", "bias-noise", "enkf"])?;
    let mut runs = Vec::new();
    for v in FilterVariant::ALL {
        log::info!("filtering with {}", v.name());
        let (closure, noise) = v.setup(&models);
        let (filtered, free) = run_filter(cfg, &window, closure, &noise)?;
        let mut row = MethodRow::named(v.name());
        row.enkf_mspe = Some(filtered.mspe);
        row.free_run_mspe = Some(free.mspe);
        if let NoiseSpec::Ar { model } = noise {
            row.phi = Some(model.phi);
            row.sigma = Some(model.sigma);
            row.sigma_e = model.sigma_e;
        } else if let NoiseSpec::Gaussian { sigma } = noise {
            row.sigma = Some(sigma);
        }
        report.rows.push(row);
        runs.push((v, filtered));
    }
    let e = &exp.table4;
    let get = |n: &str| report.row(n).and_then(|r| r.enkf_mspe).unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    for v in FilterVariant::ALL {
        let r = report.row(v.name()).expect("row present");
        let m = get(v.name());
        checks.push(Check::new(
            &format!("band_{}", v.name()),
            m >= e.mspe_band[0] && m <= e.mspe_band[1],
            format!("{m:.5}"),
        ));
        let free = r.free_run_mspe.unwrap_or(f64::NAN);
        checks.push(Check::new(
            &format!("beats_free_run_{}", v.name()),
            m < free,
            format!("{m:.5} vs free {free:.5}"),
        ));
    }
    for (ar, plain) in [("ar-wilks", "wilks"), ("ar-cs", "cs")] {
        checks.push(Check::new(
            &format!("{ar}_not_worse"),
            get(ar) <= get(plain),
            format!("{:.5} vs {:.5}", get(ar), get(plain)),
        ));
    }
    report.checks = checks;
    Ok(Table4 {
        report,
        models,
        runs,
        truth: window,
    })
}

/// Degree-2 stage: shared dictionary of all monomials up to degree two.
pub struct Degree2Stage {
    pub model: SparseModel,
    pub averaged: AveragedPolynomial,
    pub locality: LocalityReport,
}

pub fn run_degree2_stage(cfg: &ExperimentConfig, truth: &Truth) -> Result<Degree2Stage> {
    let (x, u) = truth.train();
    let opts = CsOptions {
        stride: cfg.cs.ladder_stride,
        ..cfg.cs.options
    };
    let dict = CsDictionary::Shared {
        descriptors: enumerate_monomials(cfg.model.k, 2, DegreeMode::UpTo),
    };
    let model = fit_cs_parameterization(
        &x,
        &u,
        &dict,
        BiasMode::Raw,
        &opts,
        sub_seed(cfg.seed, "fits"),
    )?;
    Ok(Degree2Stage {
        averaged: average_coefficients(&model),
        locality: locality(&model, cfg.cs.relevance),
        model,
    })
}

/// Rewrites a monomial of component `k` relative to `X_k`, so that terms with
/// the same stencil in different components coincide.
pub fn relative_monomial(m: &MultiIndex, k: usize, n: usize) -> MultiIndex {
    let factors: Vec<usize> = m.factors().into_iter().map(|c| (c + n - k) % n).collect();
    MultiIndex::from_factors(&factors)
}

/// Degree-3 stage: repeated fits over the own powers up to degree three plus
/// a random selection of other cubic monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degree3Stage {
    /// Mean own-power coefficients, constant term first.
    pub averaged: Vec<f64>,
    /// Mean coefficient of every relative stencil seen, keyed by its label in `X1` terms.
    pub stencil_means: BTreeMap<String, f64>,
    /// Stencils other than own powers whose mean magnitude exceeds the relevance threshold.
    pub relevant_other: Vec<String>,
    pub repetitions: usize,
}

pub fn run_degree3_stage(cfg: &ExperimentConfig, truth: &Truth) -> Result<Degree3Stage> {
    let (x, u) = truth.train();
    let n = cfg.model.k;
    let opts = CsOptions {
        stride: cfg.cs.ladder_stride,
        ..cfg.cs.options
    };
    let forced = own_powers(n, 3);
    let pool = monomials_of_degree(n, 3);
    let mut rng = stream(cfg.seed, "degree3");
    let reps = cfg.cs.degree3_repetitions;
    let mut sums: BTreeMap<MultiIndex, f64> = BTreeMap::new();
    let mut bias = 0.0;
    for r in 0..reps {
        log::info!("degree-3 repetition {}/{reps}", r + 1);
        let descriptors =
            random_column_subset(&pool, &forced, cfg.cs.degree3_random_columns, &mut rng)?;
        let model = fit_cs_parameterization(
            &x,
            &u,
            &CsDictionary::Shared { descriptors },
            BiasMode::Raw,
            &opts,
            sub_seed(cfg.seed, "fits"),
        )?;
        for (k, terms) in model.components.iter().enumerate() {
            for t in terms {
                *sums
                    .entry(relative_monomial(&t.monomial, k, n))
                    .or_default() += t.coefficient;
            }
        }
        bias += model.bias.iter().sum::<f64>();
    }
    let denom = (reps * n) as f64;
    let means: BTreeMap<MultiIndex, f64> = sums.into_iter().map(|(m, s)| (m, s / denom)).collect();
    let mut averaged = vec![bias / denom, 0.0, 0.0, 0.0];
    for (m, v) in &means {
        if let Some((0, p)) = m.as_single_power() {
            averaged[p as usize] = *v;
        }
    }
    let biggest = means.values().fold(0.0f64, |a, v| a.max(v.abs()));
    let relevant_other = means
        .iter()
        .filter(|(m, v)| {
            m.as_single_power().is_none_or(|(c, _)| c != 0) && v.abs() > cfg.cs.relevance * biggest
        })
        .map(|(m, _)| m.label())
        .collect();
    Ok(Degree3Stage {
        averaged,
        stencil_means: means.iter().map(|(m, v)| (m.label(), *v)).collect(),
        relevant_other,
        repetitions: reps,
    })
}

/// Experiment directory with a config echo.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig, kind: &str) -> Result<Self> {
        let path = root.join(cfg.experiment_id(kind)?);
        fs::create_dir_all(&path)?;
        let dir = Self { path };
        dir.write_text("config.json", &cfg.to_json()?)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<fs::File>> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(fs::File::create(path)?))
    }

    pub fn write_metrics(&self, report: &MetricsReport) -> Result<()> {
        self.write_text("metrics.json", &report.to_json()?)
    }

    pub fn write_timing(&self, seconds: f64) -> Result<()> {
        self.write_text(
            "timing.json",
            &serde_json::json!({ "seconds": seconds }).to_string(),
        )
    }

    pub fn write_trajectory(&self, name: &str, traj: &Trajectory) -> Result<()> {
        let mut w = self.writer(name)?;
        traj.write_csv(&mut w, &column_names(traj.width(), 0))?;
        w.flush()?;
        Ok(())
    }

    pub fn write_model(&self, name: &str, closure: &Closure) -> Result<()> {
        self.write_text(&format!("models/{name}.json"), &closure.to_json()?)
    }
}

/// Columns `t, truth_1..K, mean_1..K, l1_error`.
pub fn write_assimilation_csv<W: Write>(
    mut w: W,
    truth: &Trajectory,
    run: &AssimilationResult,
    components: usize,
) -> Result<()> {
    let k = components.min(truth.width());
    write!(w, "t")?;
    for i in 1..=k {
        write!(w, ",truth_{i}")?;
    }
    for i in 1..=k {
        write!(w, ",mean_{i}")?;
    }
    writeln!(w, ",l1_error")?;
    let l1 = l1_error_per_time(truth, &run.mean)?;
    for i in 0..truth.len() {
        write!(w, "{:.16e}", truth.times()[i])?;
        for v in &truth.state(i)[..k] {
            write!(w, ",{v:.16e}")?;
        }
        for v in &run.mean.state(i)[..k] {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w, ",{:.16e}", l1[i])?;
    }
    Ok(())
}

/// Columns `t, y_1..K`.
pub fn write_observations_csv<W: Write>(
    mut w: W,
    run: &AssimilationResult,
    components: usize,
) -> Result<()> {
    let k = run
        .observations
        .first()
        .map_or(0, |o| o.y.len())
        .min(components);
    write!(w, "t")?;
    for i in 1..=k {
        write!(w, ",y_{i}")?;
    }
    writeln!(w)?;
    for o in &run.observations {
        write!(w, "{:.16e}", o.time)?;
        for v in &o.y[..k] {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Writes a table's metrics, models and per-table CSVs.
pub fn write_table2(dir: &RunDir, t: &Table2) -> Result<()> {
    dir.write_metrics(&t.report)?;
    for (m, c) in &t.models {
        dir.write_model(m.name(), c)?;
    }
    for (m, pred) in &t.forecasts {
        dir.write_trajectory(&format!("forecast_{}.csv", m.name()), pred)?;
    }
    let mut w = dir.writer("averaged_coefficients.csv")?;
    writeln!(w, "method,a0,a1,a2,a3,a4")?;
    for (m, c) in &t.models {
        let a = c.averaged();
        write!(w, "{}", m.name())?;
        for p in 0..5 {
            write!(w, ",{:.16e}", a.get(p).copied().unwrap_or(0.0))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table3(dir: &RunDir, t: &Table3) -> Result<()> {
    dir.write_metrics(&t.report)?;
    dir.write_model("wilks", &t.models.wilks)?;
    dir.write_model("cs-noisy-bias", &t.models.cs)?;
    dir.write_text(
        "models/ar-wilks.json",
        &serde_json::to_string_pretty(&t.models.ar_wilks)?,
    )?;
    dir.write_text(
        "models/ar-cs.json",
        &serde_json::to_string_pretty(&t.models.ar_cs)?,
    )?;
    Ok(())
}

pub fn write_table4(dir: &RunDir, t: &Table4) -> Result<()> {
    dir.write_metrics(&t.report)?;
    for (v, run) in &t.runs {
        let mut w = dir.writer(&format!("enkf_{}.csv", v.name()))?;
        write_assimilation_csv(&mut w, &t.truth, run, t.truth.width())?;
        w.flush()?;
        let mut w = dir.writer(&format!("observations_{}.csv", v.name()))?;
        write_observations_csv(&mut w, run, t.truth.width())?;
        w.flush()?;
    }
    Ok(())
}

pub fn write_table1(dir: &RunDir, t: &Table1) -> Result<()> {
    dir.write_metrics(&t.report)?;
    write_lyapunov_history(dir, "lyapunov_history.csv", &t.result)
}

fn write_lyapunov_history(dir: &RunDir, name: &str, r: &LyapunovResult) -> Result<()> {
    let mut w = dir.writer(name)?;
    write!(w, "t")?;
    for i in 1..=r.dim() {
        write!(w, ",lambda_{i}")?;
    }
    writeln!(w)?;
    for (t, row) in r.history_times.iter().zip(&r.history) {
        write!(w, "{t:.16e}")?;
        for v in row {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Sectors shown in the marginal-density figure (one based).
pub const PDF_COMPONENTS: [usize; 4] = [1, 8, 19, 31];

/// Components shown in the three-trajectory figures.
pub const FIGURE_COMPONENTS: usize = 3;

/// Figure numbers with data behind them.
pub const FIGURES: [u32; 7] = [2, 3, 4, 5, 6, 7, 8];

pub fn parse_figure(id: &str) -> Result<u32> {
    id.strip_prefix("fig")
        .and_then(|n| n.parse::<u32>().ok())
        .filter(|n| FIGURES.contains(n))
        .ok_or_else(|| Error::Unknown(format!("figure `{id}` (known: fig2..fig8)")))
}

/// Writes the plot-ready CSVs of one figure and returns their paths.
pub fn emit_figure(cfg: &ExperimentConfig, figure: u32, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match figure {
        2 => {
            let t = run_table1(cfg)?;
            dir.write_metrics(&t.report)?;
            write_lyapunov_history(dir, "fig2_lyapunov_history.csv", &t.result)?;
            written.push(dir.file("fig2_lyapunov_history.csv"));
        }
        3 => {
            let truth = generate_truth(cfg)?;
            let samples = truth.x.thin(cfg.evaluation.kl_stride);
            for c in PDF_COMPONENTS {
                if c > cfg.model.k {
                    continue;
                }
                let s = samples.component(c - 1);
                let bw = silverman_bandwidth(&s)?;
                let lo = s.iter().copied().fold(f64::INFINITY, f64::min) - KL_GRID_PAD * bw;
                let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max) + KL_GRID_PAD * bw;
                let d = kde(&s, &uniform_grid(lo, hi, KL_GRID_POINTS), bw)?;
                let name = format!("fig3_pdf_X{c}.csv");
                let mut w = dir.writer(&name)?;
                writeln!(w, "x,density")?;
                for (g, p) in d.grid.iter().zip(&d.density) {
                    writeln!(w, "{g:.16e},{p:.16e}")?;
                }
                w.flush()?;
                written.push(dir.file(&name));
            }
        }
        4 => {
            let truth = generate_truth(cfg)?;
            let a = acf_normalized(&truth.x.component(0), cfg.evaluation.acf_max_lag)?;
            let mut w = dir.writer("fig4_acf_X1.csv")?;
            writeln!(w, "lag,time,acf")?;
            for (lag, v) in a.iter().enumerate() {
                writeln!(w, "{lag},{:.16e},{v:.16e}", lag as f64 * cfg.model.dt)?;
            }
            w.flush()?;
            written.push(dir.file("fig4_acf_X1.csv"));
        }
        5..=8 => {
            let truth = generate_truth(cfg)?;
            let models = fit_core_models(cfg, &truth)?;
            let variant = if figure % 2 == 1 {
                FilterVariant::ArWilks
            } else {
                FilterVariant::ArCs
            };
            let window = enkf_truth(cfg, &truth);
            let (closure, noise) = variant.setup(&models);
            let (run, _) = run_filter(cfg, &window, closure, &noise)?;
            let components = if figure <= 6 {
                FIGURE_COMPONENTS
            } else {
                cfg.model.k
            };
            let name = format!("fig{figure}_{}.csv", variant.name());
            let mut w = dir.writer(&name)?;
            write_assimilation_csv(&mut w, &window, &run, components)?;
            w.flush()?;
            written.push(dir.file(&name));
            let obs = format!("fig{figure}_observations.csv");
            let mut w = dir.writer(&obs)?;
            write_observations_csv(&mut w, &run, components)?;
            w.flush()?;
            written.push(dir.file(&obs));
        }
        other => return Err(Error::Unknown(format!("figure {other}"))),
    }
    Ok(written)
}
