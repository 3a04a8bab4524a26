//! Lasso by cyclic coordinate descent and the sparse-regression closure built on it.
//!
//! The objective is `||y - Θs||² + λ||s||₁` with no factor of one half, so the
//! coordinate update soft-thresholds at `λ/2`. Between full sweeps the nonzero
//! coordinates are solved exactly for their current signs, which keeps strongly
//! correlated columns (powers of one variable) from stalling the descent.
//! Solves work on the Gram form `ΘᵀΘ`, `Θᵀy`, which is shared across all
//! targets that use the same dictionary and across cross-validation folds.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_dictionary, own_powers, MultiIndex};
use crate::dynamics::{Parameterization, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{indexed_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoOptions {
    /// Stop when no coefficient moves more than this in a full sweep.
    pub tol: f64,
    /// Upper bound on coordinate sweeps.
    pub max_iter: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSolution {
    pub coefficients: Vec<f64>,
    /// Unpenalized offset; zero when the problem has no intercept.
    pub intercept: f64,
    pub lambda: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest violation of the optimality conditions.
    pub max_kkt_violation: f64,
    /// Objective after every sweep.
    pub history: Vec<f64>,
}

impl LassoSolution {
    pub fn support(&self) -> Vec<usize> {
        (0..self.coefficients.len())
            .filter(|&j| self.coefficients[j] != 0.0)
            .collect()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActiveStep {
    Exact,
    Clipped,
    Failed,
}

/// Gram matrix of a design, centred when an intercept is fit.
#[derive(Debug, Clone)]
pub struct GramDesign {
    gram: DMatrix<f64>,
    means: Vec<f64>,
    rows: usize,
    intercept: bool,
}

/// Sufficient statistics of one target against a [`GramDesign`].
#[derive(Debug, Clone)]
pub struct GramTarget {
    c: Vec<f64>,
    yty: f64,
    y_mean: f64,
}

impl GramDesign {
    pub fn new(theta: &DMatrix<f64>, intercept: bool) -> Self {
        let raw = theta.tr_mul(theta);
        let sums: Vec<f64> = theta.column_iter().map(|c| c.sum()).collect();
        Self::from_raw(raw, &sums, theta.nrows(), intercept)
    }

    fn from_raw(mut gram: DMatrix<f64>, sums: &[f64], rows: usize, intercept: bool) -> Self {
        let p = gram.ncols();
        let means = if intercept && rows > 0 {
            sums.iter().map(|s| s / rows as f64).collect()
        } else {
            vec![0.0; p]
        };
        if intercept {
            let n = rows as f64;
            for i in 0..p {
                for j in 0..p {
                    gram[(i, j)] -= n * means[i] * means[j];
                }
            }
        }
        Self {
            gram,
            means,
            rows,
            intercept,
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.ncols()
    }

    /// Builds target statistics from raw sums `Θᵀy`, `Σy`, `Σy²`.
    fn target_from_sums(&self, theta_t_y: &[f64], y_sum: f64, y_sq: f64) -> GramTarget {
        let n = self.rows as f64;
        if self.intercept {
            let y_mean = y_sum / n;
            GramTarget {
                c: theta_t_y
                    .iter()
                    .zip(&self.means)
                    .map(|(c, m)| c - n * m * y_mean)
                    .collect(),
                yty: (y_sq - n * y_mean * y_mean).max(0.0),
                y_mean,
            }
        } else {
            GramTarget {
                c: theta_t_y.to_vec(),
                yty: y_sq,
                y_mean: 0.0,
            }
        }
    }

    pub fn target(&self, theta: &DMatrix<f64>, y: &[f64]) -> Result<GramTarget> {
        if theta.nrows() != y.len() || theta.ncols() != self.dim() {
            return Err(Error::dim(format!(
                "design is {}x{}, target has {} rows",
                theta.nrows(),
                theta.ncols(),
                y.len()
            )));
        }
        let yv = nalgebra::DVectorView::from_slice(y, y.len());
        let c = theta.tr_mul(&yv);
        Ok(self.target_from_sums(c.as_slice(), y.iter().sum(), y.iter().map(|v| v * v).sum()))
    }

    /// Smallest penalty with an all-zero solution, `2 max_j |Θ_jᵀy|`.
    pub fn lambda_max(&self, t: &GramTarget) -> f64 {
        2.0 * t.c.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    fn objective(&self, t: &GramTarget, s: &[f64], r: &[f64], lambda: f64) -> f64 {
        // sᵀGs = sᵀc - sᵀr with r = c - Gs
        let sc: f64 = s.iter().zip(&t.c).map(|(a, b)| a * b).sum();
        let sr: f64 = s.iter().zip(r).map(|(a, b)| a * b).sum();
        let l1: f64 = s.iter().map(|v| v.abs()).sum();
        t.yty - sc - sr + lambda * l1
    }

    fn gradient(&self, t: &GramTarget, s: &[f64]) -> Vec<f64> {
        let mut r = t.c.clone();
        for (j, &sj) in s.iter().enumerate() {
            if sj != 0.0 {
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri -= self.gram[(i, j)] * sj;
                }
            }
        }
        r
    }

    /// One cyclic pass of exact coordinate minimization; returns the largest move.
    fn sweep(&self, s: &mut [f64], r: &mut [f64], half: f64) -> f64 {
        let mut delta = 0.0f64;
        for j in 0..s.len() {
            let gjj = self.gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = s[j];
            let new = soft_threshold(r[j] + gjj * old, half) / gjj;
            let d = new - old;
            if d != 0.0 {
                s[j] = new;
                self.shift(r, j, d);
                delta = delta.max(d.abs());
            }
        }
        delta
    }

    fn shift(&self, r: &mut [f64], j: usize, d: f64) {
        for (ri, gij) in r.iter_mut().zip(self.gram.column(j).iter()) {
            *ri -= gij * d;
        }
    }

    /// Moves the nonzero coordinates toward the minimizer for their current
    /// signs, stopping where the first one would cross zero.
    fn active_step(&self, t: &GramTarget, s: &mut [f64], r: &mut [f64], half: f64) -> ActiveStep {
        let act: Vec<usize> = (0..s.len()).filter(|&j| s[j] != 0.0).collect();
        if act.is_empty() {
            return ActiveStep::Exact;
        }
        let na = act.len();
        let ga = DMatrix::from_fn(na, na, |a, b| self.gram[(act[a], act[b])]);
        let rhs = nalgebra::DVector::from_fn(na, |a, _| t.c[act[a]] - half * s[act[a]].signum());
        let Some(chol) = nalgebra::Cholesky::new(ga) else {
            return ActiveStep::Failed;
        };
        let target = chol.solve(&rhs);
        if target.iter().any(|v| !v.is_finite()) {
            return ActiveStep::Failed;
        }
        let mut step = 1.0;
        let mut hit = None;
        for (a, &j) in act.iter().enumerate() {
            if target[a].signum() != s[j].signum() || target[a] == 0.0 {
                let tj = s[j] / (s[j] - target[a]);
                if tj < step {
                    step = tj;
                    hit = Some(j);
                }
            }
        }
        for (a, &j) in act.iter().enumerate() {
            let new = if hit == Some(j) {
                0.0
            } else {
                s[j] + step * (target[a] - s[j])
            };
            let d = new - s[j];
            if d != 0.0 {
                s[j] = new;
                self.shift(r, j, d);
            }
        }
        if hit.is_some() {
            ActiveStep::Clipped
        } else {
            ActiveStep::Exact
        }
    }

    /// Coordinate descent from `warm` (or zero).
    pub fn solve(
        &self,
        t: &GramTarget,
        lambda: f64,
        warm: Option<&[f64]>,
        opts: &LassoOptions,
    ) -> Result<LassoSolution> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        let p = self.dim();
        let mut s = match warm {
            Some(w) if w.len() == p => w.to_vec(),
            Some(w) => {
                return Err(Error::dim(format!(
                    "warm start has {} entries, want {p}",
                    w.len()
                )))
            }
            None => vec![0.0; p],
        };
        let mut r = self.gradient(t, &s);
        let half = 0.5 * lambda;
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        let support = |s: &[f64]| -> Vec<bool> { s.iter().map(|v| *v != 0.0).collect() };
        while iterations < opts.max_iter {
            let before = support(&s);
            let delta = self.sweep(&mut s, &mut r, half);
            iterations += 1;
            history.push(self.objective(t, &s, &r, lambda));
            if delta < opts.tol {
                converged = true;
                break;
            }
            if support(&s) != before {
                continue;
            }
            // settle the active coordinates before the next full sweep
            while iterations < opts.max_iter {
                let step = self.active_step(t, &mut s, &mut r, half);
                iterations += 1;
                history.push(self.objective(t, &s, &r, lambda));
                if step != ActiveStep::Clipped {
                    break;
                }
            }
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lasso coefficients".into()));
        }
        let r = self.gradient(t, &s);
        let max_kkt_violation = (0..p)
            .map(|j| {
                let g = 2.0 * r[j];
                if s[j] != 0.0 {
                    (g - lambda * s[j].signum()).abs()
                } else {
                    (g.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0f64, f64::max);
        let intercept = if self.intercept {
            t.y_mean - s.iter().zip(&self.means).map(|(a, b)| a * b).sum::<f64>()
        } else {
            0.0
        };
        if !converged {
            log::warn!("lasso stopped after {iterations} sweeps without converging");
        }
        Ok(LassoSolution {
            objective: self.objective(t, &s, &r, lambda),
            coefficients: s,
            intercept,
            lambda,
            iterations,
            converged,
            max_kkt_violation,
            history,
        })
    }
}

/// Minimizes `||y - Θs||² + λ||s||₁` (no intercept).
pub fn lasso(
    theta: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let d = GramDesign::new(theta, false);
    let t = d.target(theta, y)?;
    d.solve(&t, lambda, None, opts)
}

/// Same objective with an unpenalized intercept.
pub fn lasso_with_intercept(
    theta: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let d = GramDesign::new(theta, true);
    let t = d.target(theta, y)?;
    d.solve(&t, lambda, None, opts)
}

/// `n` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n <= 1 || lambda_max <= 0.0 {
        return vec![lambda_max.max(0.0)];
    }
    let lo = ratio.ln();
    (0..n)
        .map(|i| lambda_max * (lo * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub index: usize,
    pub grid: Vec<f64>,
    pub mean_errors: Vec<f64>,
    pub folds_used: usize,
}

/// A design split into contiguous row blocks with per-fold training Grams.
#[derive(Debug, Clone)]
pub struct FoldedDesign {
    full: GramDesign,
    blocks: Vec<std::ops::Range<usize>>,
    train: Vec<GramDesign>,
}

impl FoldedDesign {
    pub fn new(theta: &DMatrix<f64>, folds: usize, intercept: bool) -> Result<Self> {
        let m = theta.nrows();
        if folds < 2 {
            return Err(Error::config("folds", "need at least 2"));
        }
        if m < 2 * folds {
            return Err(Error::Degenerate(format!(
                "{m} rows is too few for {folds} folds"
            )));
        }
        let blocks: Vec<std::ops::Range<usize>> = (0..folds)
            .map(|f| (f * m / folds)..((f + 1) * m / folds))
            .collect();
        let p = theta.ncols();
        let mut total = DMatrix::zeros(p, p);
        let mut total_sums = vec![0.0; p];
        let mut parts = Vec::with_capacity(folds);
        for b in &blocks {
            let tb = theta.rows(b.start, b.len());
            let g = tb.tr_mul(&tb);
            let sums: Vec<f64> = tb.column_iter().map(|c| c.sum()).collect();
            total += &g;
            total_sums.iter_mut().zip(&sums).for_each(|(t, s)| *t += s);
            parts.push((g, sums));
        }
        let train = blocks
            .iter()
            .zip(&parts)
            .map(|(b, (g, sums))| {
                let tg = &total - g;
                let ts: Vec<f64> = total_sums.iter().zip(sums).map(|(t, s)| t - s).collect();
                GramDesign::from_raw(tg, &ts, m - b.len(), intercept)
            })
            .collect();
        Ok(Self {
            full: GramDesign::from_raw(total, &total_sums, m, intercept),
            blocks,
            train,
        })
    }

    pub fn full(&self) -> &GramDesign {
        &self.full
    }

    /// Mean held-out squared error over the grid; the minimizer is selected,
    /// with ties going to the larger penalty.
    ///
    /// The path runs from the largest penalty down. With `patience = Some(n)`
    /// it stops once `n` consecutive penalties fail to improve on the best
    /// error so far; skipped penalties report `NaN`.
    pub fn cross_validate(
        &self,
        theta: &DMatrix<f64>,
        y: &[f64],
        grid: &[f64],
        patience: Option<usize>,
        opts: &LassoOptions,
    ) -> Result<CvResult> {
        if grid.is_empty() {
            return Err(Error::config("lambda_grid", "must not be empty"));
        }
        if theta.nrows() != y.len() {
            return Err(Error::dim("design and target rows differ"));
        }
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
        let p = self.full.dim();
        let block_stats: Vec<(Vec<f64>, f64, f64)> = self
            .blocks
            .iter()
            .map(|b| {
                let tb = theta.rows(b.start, b.len());
                let yb = nalgebra::DVectorView::from_slice(&y[b.clone()], b.len());
                let c = tb.tr_mul(&yb);
                let ys = &y[b.clone()];
                (
                    c.as_slice().to_vec(),
                    ys.iter().sum(),
                    ys.iter().map(|v| v * v).sum(),
                )
            })
            .collect();
        let mut tot_c = vec![0.0; p];
        let (mut tot_s, mut tot_q) = (0.0, 0.0);
        for (c, s, q) in &block_stats {
            tot_c.iter_mut().zip(c).for_each(|(t, v)| *t += v);
            tot_s += s;
            tot_q += q;
        }
        let mut folds = Vec::new();
        for (f, b) in self.blocks.iter().enumerate() {
            let (c, s, q) = &block_stats[f];
            let held = &y[b.clone()];
            let train_c: Vec<f64> = tot_c.iter().zip(c).map(|(t, v)| t - v).collect();
            let t = self.train[f].target_from_sums(&train_c, tot_s - s, tot_q - q);
            let held_const = held.iter().all(|v| *v == held[0]);
            if t.yty <= 0.0 || held_const {
                log::warn!("skipping cross-validation fold {f}: constant target");
                continue;
            }
            folds.push((f, t, None::<Vec<f64>>));
        }
        let used = folds.len();
        if used == 0 {
            log::warn!("every fold was degenerate; using the largest penalty");
            let index = order[0];
            return Ok(CvResult {
                lambda: grid[index],
                index,
                grid: grid.to_vec(),
                mean_errors: vec![f64::NAN; grid.len()],
                folds_used: 0,
            });
        }
        let mut sum_err = vec![f64::NAN; grid.len()];
        let mut best = f64::INFINITY;
        let mut worse = 0;
        for &g in &order {
            let mut total = 0.0;
            for (f, t, warm) in folds.iter_mut() {
                let b = &self.blocks[*f];
                let sol = self.train[*f].solve(t, grid[g], warm.as_deref(), opts)?;
                let support = sol.support();
                let mut err = 0.0;
                for row in b.clone() {
                    let pred = sol.intercept
                        + support
                            .iter()
                            .map(|&j| theta[(row, j)] * sol.coefficients[j])
                            .sum::<f64>();
                    err += (y[row] - pred).powi(2);
                }
                total += err / b.len() as f64;
                *warm = Some(sol.coefficients);
            }
            sum_err[g] = total;
            if total < best * (1.0 - 1e-12) {
                best = total;
                worse = 0;
            } else {
                worse += 1;
                if patience.is_some_and(|n| worse >= n) {
                    break;
                }
            }
        }
        let mean_errors: Vec<f64> = sum_err.iter().map(|e| e / used as f64).collect();
        let mut index = order[0];
        for &g in &order[1..] {
            if mean_errors[g] < mean_errors[index] * (1.0 - 1e-12) {
                index = g;
            }
        }
        Ok(CvResult {
            lambda: grid[index],
            index,
            grid: grid.to_vec(),
            mean_errors,
            folds_used: used,
        })
    }
}

/// Penalty minimizing held-out error over contiguous row blocks.
pub fn cross_validate_lambda(
    theta: &DMatrix<f64>,
    y: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    intercept: bool,
    opts: &LassoOptions,
) -> Result<CvResult> {
    FoldedDesign::new(theta, folds, intercept)?.cross_validate(theta, y, lambda_grid, None, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BiasMode {
    Raw,
    Zero,
    Average,
    AveragePlusNoise { sigma: f64 },
}

impl BiasMode {
    pub fn name(&self) -> &'static str {
        match self {
            BiasMode::Raw => "raw",
            BiasMode::Zero => "zero",
            BiasMode::Average => "average",
            BiasMode::AveragePlusNoise { .. } => "average_plus_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseTerm {
    pub monomial: MultiIndex,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub train_start: f64,
    pub train_end: f64,
    pub seed: u64,
    pub dictionary: String,
}

/// Per-component sparse polynomials `f_k(X) = Σ s_q θ_q(X) + b_k` on raw data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseModel {
    pub components: Vec<Vec<SparseTerm>>,
    /// Intercepts as fit, kept so any bias mode can be re-applied.
    pub raw_bias: Vec<f64>,
    pub bias: Vec<f64>,
    pub bias_mode: BiasMode,
    /// Penalty used per component, in normalized units.
    pub lambda: Vec<f64>,
    pub provenance: Option<Provenance>,
}

impl SparseModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SparseModel = serde_json::from_str(s)?;
        let k = m.components.len();
        if m.raw_bias.len() != k || m.bias.len() != k || m.lambda.len() != k {
            return Err(Error::dim("model vectors disagree on component count"));
        }
        Ok(m)
    }

    /// Coefficient of `monomial` in component `k` (zero if absent).
    pub fn coefficient(&self, k: usize, monomial: &MultiIndex) -> f64 {
        self.components[k]
            .iter()
            .find(|t| &t.monomial == monomial)
            .map_or(0.0, |t| t.coefficient)
    }

    /// One line per component, e.g. `U1 = -0.47*X1 + 0.0034*X1^2 - 0.025`.
    pub fn equations(&self) -> Vec<String> {
        self.components
            .iter()
            .enumerate()
            .map(|(k, terms)| {
                let mut s = format!("U{} =", k + 1);
                for t in terms {
                    s.push_str(&format!(" {:+.6}*{}", t.coefficient, t.monomial.label()));
                }
                s.push_str(&format!(" {:+.6}", self.bias[k]));
                s
            })
            .collect()
    }
}

impl Parameterization for SparseModel {
    fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        for ((o, terms), b) in out.iter_mut().zip(&self.components).zip(&self.bias) {
            *o = b + terms
                .iter()
                .map(|t| t.coefficient * t.monomial.eval(x))
                .sum::<f64>();
        }
    }
}

/// Replaces the biases according to `mode`; noise draws for component `k`
/// come from a stream seeded by `(seed, k)`.
pub fn apply_bias_mode(model: &SparseModel, mode: BiasMode, seed: u64) -> Result<SparseModel> {
    let k = model.k();
    let mu = if k == 0 {
        0.0
    } else {
        model.raw_bias.iter().sum::<f64>() / k as f64
    };
    let bias = match mode {
        BiasMode::Raw => model.raw_bias.clone(),
        BiasMode::Zero => vec![0.0; k],
        BiasMode::Average => vec![mu; k],
        BiasMode::AveragePlusNoise { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::config(
                    "sigma_bias",
                    "must be finite and non-negative",
                ));
            }
            (0..k)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut seeded(indexed_seed(seed, i)));
                    mu + sigma * z
                })
                .collect()
        }
    };
    Ok(SparseModel {
        bias,
        bias_mode: mode,
        ..model.clone()
    })
}

/// Component-averaged polynomial in the generic variable `X_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPolynomial {
    /// `coefficients[p]` multiplies `X_k^p`; entry 0 is the mean bias.
    pub coefficients: Vec<f64>,
    /// Nonzero terms that are not powers of the component's own variable.
    pub non_local_terms: usize,
}

impl AveragedPolynomial {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |a, c| a * x + c)
    }
}

/// Mean of each own-component power coefficient across components.
pub fn average_coefficients(model: &SparseModel) -> AveragedPolynomial {
    let k = model.k();
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    let mut non_local = 0;
    for (c, terms) in model.components.iter().enumerate() {
        for t in terms {
            match t.monomial.as_single_power() {
                Some((comp, p)) if comp == c => *sums.entry(p).or_default() += t.coefficient,
                _ if t.monomial.is_constant() => *sums.entry(0).or_default() += t.coefficient,
                _ => non_local += 1,
            }
        }
    }
    let max_p = sums.keys().copied().max().unwrap_or(0) as usize;
    let mut coefficients = vec![0.0; max_p + 1];
    if k > 0 {
        for (p, s) in sums {
            coefficients[p as usize] = s / k as f64;
        }
        coefficients[0] += model.bias.iter().sum::<f64>() / k as f64;
    }
    AveragedPolynomial {
        coefficients,
        non_local_terms: non_local,
    }
}

/// Which candidate functions each component may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CsDictionary {
    /// One shared list of monomials for every component.
    Shared { descriptors: Vec<MultiIndex> },
    /// Component `k` sees only `X_k, ..., X_k^degree`.
    OwnPowers { degree: u32 },
}

impl CsDictionary {
    pub fn label(&self) -> String {
        match self {
            CsDictionary::Shared { descriptors } => {
                format!("shared({} columns)", descriptors.len())
            }
            CsDictionary::OwnPowers { degree } => format!("own-powers(degree {degree})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsOptions {
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub folds: usize,
    /// Use every `stride`-th training snapshot.
    pub stride: usize,
    /// Early stop for the cross-validation path (see [`FoldedDesign::cross_validate`]).
    pub cv_patience: Option<usize>,
    pub lasso: LassoOptions,
}

impl Default for CsOptions {
    fn default() -> Self {
        Self {
            n_lambda: 50,
            lambda_ratio: 1e-4,
            folds: 5,
            stride: 1,
            cv_patience: Some(10),
            lasso: LassoOptions::default(),
        }
    }
}

impl CsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambda == 0 {
            return Err(Error::config("n_lambda", "must be positive"));
        }
        if !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return Err(Error::config("lambda_ratio", "must lie in (0, 1)"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", "need at least 2"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        if self.cv_patience == Some(0) {
            return Err(Error::config("cv_patience", "must be positive when set"));
        }
        Ok(())
    }
}

struct ComponentFit {
    terms: Vec<SparseTerm>,
    bias: f64,
    lambda: f64,
}

/// CV-selected Lasso on normalized columns, mapped back to raw scale.
fn fit_target(
    folded: &FoldedDesign,
    theta: &DMatrix<f64>,
    col_norms: &[f64],
    descriptors: &[MultiIndex],
    u: &[f64],
    opts: &CsOptions,
) -> Result<ComponentFit> {
    let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if u_norm == 0.0 {
        return Ok(ComponentFit {
            terms: Vec::new(),
            bias: 0.0,
            lambda: 0.0,
        });
    }
    let y: Vec<f64> = u.iter().map(|v| v / u_norm).collect();
    let full = folded.full();
    let t = full.target(theta, &y)?;
    let grid = lambda_grid(full.lambda_max(&t), opts.n_lambda, opts.lambda_ratio);
    let cv = folded.cross_validate(theta, &y, &grid, opts.cv_patience, &opts.lasso)?;
    let sol = full.solve(&t, cv.lambda, None, &opts.lasso)?;
    let terms = sol
        .coefficients
        .iter()
        .enumerate()
        .filter(|(_, s)| **s != 0.0)
        .map(|(j, s)| SparseTerm {
            monomial: descriptors[j].clone(),
            coefficient: s * u_norm / col_norms[j],
        })
        .collect();
    Ok(ComponentFit {
        terms,
        bias: sol.intercept * u_norm,
        lambda: cv.lambda,
    })
}

/// Fits one sparse polynomial per column of `u_train` and applies `bias_mode`.
pub fn fit_cs_parameterization(
    x_train: &Trajectory,
    u_train: &Trajectory,
    dictionary: &CsDictionary,
    bias_mode: BiasMode,
    opts: &CsOptions,
    seed: u64,
) -> Result<SparseModel> {
    opts.validate()?;
    if x_train.len() != u_train.len() || x_train.width() != u_train.width() {
        return Err(Error::dim(format!(
            "X is {}x{}, U is {}x{}",
            x_train.len(),
            x_train.width(),
            u_train.len(),
            u_train.width()
        )));
    }
    let x = x_train.thin(opts.stride);
    let u = u_train.thin(opts.stride);
    let k = x.width();
    let mut fits = Vec::with_capacity(k);
    match dictionary {
        CsDictionary::Shared { descriptors } => {
            let dict = build_dictionary(&x, descriptors, true)?;
            let folded = FoldedDesign::new(&dict.matrix, opts.folds, true)?;
            for c in 0..k {
                log::debug!("sparse fit of component {}", c + 1);
                fits.push(fit_target(
                    &folded,
                    &dict.matrix,
                    &dict.norms,
                    &dict.descriptors,
                    &u.component(c),
                    opts,
                )?);
            }
        }
        CsDictionary::OwnPowers { degree } => {
            let all = own_powers(k, *degree);
            for c in 0..k {
                let mine: Vec<MultiIndex> = all
                    .iter()
                    .filter(|d| d.as_single_power().is_some_and(|(i, _)| i == c))
                    .cloned()
                    .collect();
                let dict = build_dictionary(&x, &mine, true)?;
                let folded = FoldedDesign::new(&dict.matrix, opts.folds, true)?;
                fits.push(fit_target(
                    &folded,
                    &dict.matrix,
                    &dict.norms,
                    &dict.descriptors,
                    &u.component(c),
                    opts,
                )?);
            }
        }
    }
    let times = x_train.times();
    let raw = SparseModel {
        raw_bias: fits.iter().map(|f| f.bias).collect(),
        bias: fits.iter().map(|f| f.bias).collect(),
        lambda: fits.iter().map(|f| f.lambda).collect(),
        components: fits.into_iter().map(|f| f.terms).collect(),
        bias_mode: BiasMode::Raw,
        provenance: Some(Provenance {
            train_start: times.first().copied().unwrap_or(0.0),
            train_end: times.last().copied().unwrap_or(0.0),
            seed,
            dictionary: dictionary.label(),
        }),
    };
    apply_bias_mode(&raw, bias_mode, seed)
}

/// Locality of a fit: how often monomials mixing two different variables matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    /// Per component: no relevant `X_i X_j` (`i != j`) term.
    pub cross_term_free: Vec<bool>,
    pub fraction_cross_term_free: f64,
    /// Per component: `|coef(X_k)|` exceeds every cross-term coefficient.
    pub own_linear_dominates: Vec<bool>,
    pub relevance: f64,
}

/// A term is relevant when `|coef| > relevance * max |coef|` within its component.
pub fn locality(model: &SparseModel, relevance: f64) -> LocalityReport {
    let mut free = Vec::new();
    let mut dominates = Vec::new();
    for (k, terms) in model.components.iter().enumerate() {
        let biggest = terms.iter().fold(0.0f64, |a, t| a.max(t.coefficient.abs()));
        let cross: Vec<f64> = terms
            .iter()
            .filter(|t| t.monomial.pairs().len() >= 2)
            .map(|t| t.coefficient.abs())
            .collect();
        free.push(cross.iter().all(|c| *c <= relevance * biggest));
        let own = model.coefficient(k, &MultiIndex::power(k, 1)).abs();
        dominates.push(cross.iter().all(|c| *c < own));
    }
    let n = free.len().max(1) as f64;
    LocalityReport {
        fraction_cross_term_free: free.iter().filter(|b| **b).count() as f64 / n,
        cross_term_free: free,
        own_linear_dominates: dominates,
        relevance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn col_major(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, f)
    }

    #[test]
    fn identity_soft_threshold() {
        let theta = DMatrix::identity(2, 2);
        let sol = lasso(&theta, &[3.0, 0.5], 1.0, &LassoOptions::default()).unwrap();
        assert_eq!(sol.coefficients, vec![2.5, 0.0]);
        assert!(sol.converged);
    }

    #[test]
    fn zero_penalty_orthonormal_is_least_squares() {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let theta = DMatrix::from_row_slice(3, 2, &[c, c, c, -c, 0.0, 0.0]);
        let y = [1.0, 2.0, 3.0];
        let sol = lasso(&theta, &y, 0.0, &LassoOptions::default()).unwrap();
        let ls = theta.tr_mul(&nalgebra::DVector::from_column_slice(&y));
        for j in 0..2 {
            assert_abs_diff_eq!(sol.coefficients[j], ls[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn lambda_max_gives_zero() {
        let mut rng = seeded(4);
        let theta = col_major(30, 6, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let d = GramDesign::new(&theta, false);
        let t = d.target(&theta, &y).unwrap();
        let lm = d.lambda_max(&t);
        let sol = d.solve(&t, lm, None, &LassoOptions::default()).unwrap();
        assert!(sol.coefficients.iter().all(|v| *v == 0.0));
        let sol = d
            .solve(&t, 0.99 * lm, None, &LassoOptions::default())
            .unwrap();
        assert_eq!(sol.support().len(), 1);
    }

    #[test]
    fn intercept_is_unpenalized() {
        let theta = col_major(40, 2, |i, j| ((i * (j + 3)) as f64 * 0.7).cos());
        let y = vec![5.0; 40];
        let sol = lasso_with_intercept(&theta, &y, 0.1, &LassoOptions::default()).unwrap();
        assert!(sol.coefficients.iter().all(|v| *v == 0.0));
        assert_abs_diff_eq!(sol.intercept, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn cv_prefers_small_penalty_for_noiseless_linear() {
        let mut rng = seeded(8);
        let theta = col_major(100, 5, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..100).map(|i| 2.0 * theta[(i, 2)]).collect();
        let t = GramDesign::new(&theta, true);
        let lm = t.lambda_max(&t.target(&theta, &y).unwrap());
        let grid = lambda_grid(lm, 20, 1e-4);
        let a =
            cross_validate_lambda(&theta, &y, &grid, 5, true, &LassoOptions::default()).unwrap();
        assert_eq!(a.index, grid.len() - 1);
        let b =
            cross_validate_lambda(&theta, &y, &grid, 5, true, &LassoOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cv_patience_truncates_the_path() {
        let mut rng = seeded(9);
        let theta = col_major(120, 8, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..120)
            .map(|i| 2.0 * theta[(i, 2)] + rng.random_range(-3.0..3.0))
            .collect();
        let folded = FoldedDesign::new(&theta, 5, true).unwrap();
        let lm = folded
            .full()
            .lambda_max(&folded.full().target(&theta, &y).unwrap());
        let grid = lambda_grid(lm, 40, 1e-4);
        let opts = LassoOptions::default();
        let full = folded
            .cross_validate(&theta, &y, &grid, None, &opts)
            .unwrap();
        let short = folded
            .cross_validate(&theta, &y, &grid, Some(3), &opts)
            .unwrap();
        let visited = short.mean_errors.iter().take_while(|e| !e.is_nan()).count();
        assert!(visited < grid.len());
        assert!(short.mean_errors[visited..].iter().all(|e| e.is_nan()));
        assert_eq!(&short.mean_errors[..visited], &full.mean_errors[..visited]);
        assert_eq!(visited, short.index + 4);
        let best = short.mean_errors[short.index];
        assert!(short.mean_errors[..visited]
            .iter()
            .all(|e| *e >= best * (1.0 - 1e-12)));
        assert!(short.index <= full.index);
        let zero = CsOptions {
            cv_patience: Some(0),
            ..CsOptions::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn cv_skips_constant_folds() {
        let theta = col_major(20, 2, |i, j| (i + j) as f64);
        let grid = [1.0, 0.1];
        let r = cross_validate_lambda(&theta, &[0.0; 20], &grid, 4, true, &LassoOptions::default())
            .unwrap();
        assert_eq!(r.folds_used, 0);
        assert_eq!(r.lambda, 1.0);
    }

    fn quartic_model() -> SparseModel {
        // four per-component quartics
        let rows = [
            [-0.467216, 0.003429, 0.004481, -0.000262, -0.024885],
            [-0.47689, 0.0002, 0.005351, -0.000299, -0.021728],
            [-0.478369, 0.002902, 0.005584, -0.000358, -0.021464],
            [-0.472069, 0.002041, 0.005191, -0.000307, -0.021703],
        ];
        let components = rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                (1..=4)
                    .map(|p| SparseTerm {
                        monomial: MultiIndex::power(k, p as u32),
                        coefficient: r[p - 1],
                    })
                    .collect()
            })
            .collect();
        let bias: Vec<f64> = rows.iter().map(|r| r[4]).collect();
        SparseModel {
            components,
            raw_bias: bias.clone(),
            bias,
            bias_mode: BiasMode::Raw,
            lambda: vec![0.0; 4],
            provenance: None,
        }
    }

    #[test]
    fn averaging() {
        let m = quartic_model();
        let avg = average_coefficients(&m);
        assert_eq!(avg.non_local_terms, 0);
        assert_abs_diff_eq!(
            avg.coefficients[1],
            (-0.467216 - 0.47689 - 0.478369 - 0.472069) / 4.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            avg.coefficients[0],
            (-0.024885 - 0.021728 - 0.021464 - 0.021703) / 4.0,
            epsilon = 1e-15
        );
        let mut two = m.clone();
        two.components.truncate(2);
        two.components[0] = vec![SparseTerm {
            monomial: MultiIndex::power(0, 1),
            coefficient: -0.4,
        }];
        two.components[1] = vec![SparseTerm {
            monomial: MultiIndex::power(1, 1),
            coefficient: -0.5,
        }];
        two.bias = vec![0.0; 2];
        assert_abs_diff_eq!(
            average_coefficients(&two).coefficients[1],
            -0.45,
            epsilon = 1e-15
        );
    }

    #[test]
    fn bias_modes() {
        let m = quartic_model();
        let z = apply_bias_mode(&m, BiasMode::Zero, 1).unwrap();
        assert!(z.bias.iter().all(|b| *b == 0.0));
        let a = apply_bias_mode(&m, BiasMode::Average, 1).unwrap();
        let mu = m.raw_bias.iter().sum::<f64>() / 4.0;
        assert!(a.bias.iter().all(|b| *b == mu));
        let n0 = apply_bias_mode(&m, BiasMode::AveragePlusNoise { sigma: 0.0 }, 9).unwrap();
        assert_eq!(n0.bias, a.bias);
        let n1 = apply_bias_mode(&m, BiasMode::AveragePlusNoise { sigma: 0.07 }, 9).unwrap();
        let n2 = apply_bias_mode(&n0, BiasMode::AveragePlusNoise { sigma: 0.07 }, 9).unwrap();
        assert_eq!(n1.bias, n2.bias);
        assert!(n1.bias.iter().any(|b| *b != mu));
        let back = apply_bias_mode(&n1, BiasMode::Raw, 0).unwrap();
        assert_eq!(back.bias, m.raw_bias);
    }

    #[test]
    fn model_json_roundtrip_is_exact() {
        let m = apply_bias_mode(
            &quartic_model(),
            BiasMode::AveragePlusNoise { sigma: 0.07 },
            3,
        )
        .unwrap();
        let back = SparseModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.equations()[0].starts_with("U1 = -0.467216*X1"));
    }

    #[test]
    fn evaluate_matches_terms() {
        let m = quartic_model();
        let x = [1.0, 2.0, -1.0, 0.5];
        let mut out = [0.0; 4];
        m.evaluate(&x, &mut out);
        assert_abs_diff_eq!(
            out[0],
            -0.467216 + 0.003429 + 0.004481 - 0.000262 - 0.024885,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_target_gives_zero_model() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![(i as f64 * 0.3).sin() * 4.0, (i as f64 * 0.2).cos()])
            .collect();
        let t: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let x = Trajectory::from_rows(t.clone(), &rows).unwrap();
        let u = Trajectory::from_rows(t, &vec![vec![0.0, 0.0]; 60]).unwrap();
        for dict in [
            CsDictionary::OwnPowers { degree: 4 },
            CsDictionary::Shared {
                descriptors: crate::dictionary::enumerate_monomials(
                    2,
                    2,
                    crate::dictionary::DegreeMode::UpTo,
                ),
            },
        ] {
            let m = fit_cs_parameterization(&x, &u, &dict, BiasMode::Raw, &CsOptions::default(), 0)
                .unwrap();
            assert!(m.components.iter().all(|c| c.is_empty()));
            assert!(m.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn recovers_own_power_law() {
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                vec![
                    (i as f64 * 0.031).sin() * 6.0 + 2.0,
                    (i as f64 * 0.017).cos() * 5.0,
                ]
            })
            .collect();
        let t: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let law =
            |x: f64| -0.05 - 0.47 * x + 0.003 * x * x + 0.005 * x.powi(3) - 0.0003 * x.powi(4);
        let urows: Vec<Vec<f64>> = rows.iter().map(|r| vec![law(r[0]), law(r[1])]).collect();
        let x = Trajectory::from_rows(t.clone(), &rows).unwrap();
        let u = Trajectory::from_rows(t, &urows).unwrap();
        let m = fit_cs_parameterization(
            &x,
            &u,
            &CsDictionary::OwnPowers { degree: 4 },
            BiasMode::Raw,
            &CsOptions::default(),
            0,
        )
        .unwrap();
        // the penalty shrinks correlated powers, so compare the fitted curves
        let avg = average_coefficients(&m);
        assert_eq!(avg.non_local_terms, 0);
        let mut out = [0.0; 2];
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for r in &rows {
            m.evaluate(r, &mut out);
            err = err
                .max((out[0] - law(r[0])).abs())
                .max((out[1] - law(r[1])).abs());
            scale = scale.max(law(r[0]).abs());
        }
        assert!(err < 1e-2 * scale, "{err} vs {scale}");
    }
}
