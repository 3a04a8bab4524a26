//! Two-scale Lorenz-96 vector fields, the reduced (closed) slow model and a
//! fixed-step RK4 integrator.
//!
//! Indexing is zero based and cyclic. The fast variables are stored as one
//! flat ring `z[k * J + j]`, which makes the boundary rule
//! `Z_{j+J,k} = Z_{j,k+1}` a plain wrap-around of the flat index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any component exceeding this magnitude is treated as a blow-up.
pub const DEFAULT_GUARD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Number of sectors (slow variables).
    #[serde(rename = "K")]
    pub k: usize,
    /// Sub-sectors per sector.
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "F")]
    pub forcing: f64,
    /// Coupling strength.
    pub h: f64,
    /// Time-scale ratio of fast to slow variables.
    pub c: f64,
    /// Amplitude ratio of slow to fast variables.
    pub b: f64,
    pub dt: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            k: 40,
            j: 10,
            forcing: 10.0,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            dt: 0.01,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::config(
                "K",
                "need at least 4 sectors for the advection stencil",
            ));
        }
        if self.j < 1 {
            return Err(Error::config("J", "need at least one sub-sector"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive and finite"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("c", "must be positive and finite"));
        }
        if self.b == 0.0 || !self.b.is_finite() {
            return Err(Error::config("b", "must be finite and non-zero"));
        }
        if !self.forcing.is_finite() {
            return Err(Error::config("F", "must be finite"));
        }
        if !self.h.is_finite() {
            return Err(Error::config("h", "must be finite"));
        }
        Ok(())
    }

    /// The coupling coefficient `h c / b`.
    pub fn coupling(&self) -> f64 {
        self.h * self.c / self.b
    }

    pub fn n_fast(&self) -> usize {
        self.j * self.k
    }

    pub fn full_dim(&self) -> usize {
        self.k + self.n_fast()
    }

    /// Same parameters with the fast scale switched off.
    pub fn slow_only(&self) -> Self {
        Self { h: 0.0, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl FullState {
    pub fn zeros(p: &ModelParams) -> Self {
        Self {
            x: vec![0.0; p.k],
            z: vec![0.0; p.n_fast()],
        }
    }

    pub fn check(&self, p: &ModelParams) -> Result<()> {
        if self.x.len() != p.k {
            return Err(Error::dim(format!(
                "X has {} entries, K = {}",
                self.x.len(),
                p.k
            )));
        }
        if self.z.len() != p.n_fast() {
            return Err(Error::dim(format!(
                "Z has {} entries, J*K = {}",
                self.z.len(),
                p.n_fast()
            )));
        }
        if self.x.iter().chain(&self.z).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state contains non-finite entries".into()));
        }
        Ok(())
    }

    /// `[X, Z]` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + self.z.len());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn from_flat(p: &ModelParams, flat: &[f64]) -> Result<Self> {
        if flat.len() != p.full_dim() {
            return Err(Error::dim(format!(
                "flat state has {} entries, expected {}",
                flat.len(),
                p.full_dim()
            )));
        }
        Ok(Self {
            x: flat[..p.k].to_vec(),
            z: flat[p.k..].to_vec(),
        })
    }

    /// Random start: `X ~ U(-1, 1)`, `Z ~ U(-0.1, 0.1)`.
    pub fn random<R: Rng + ?Sized>(p: &ModelParams, rng: &mut R) -> Self {
        let mut x: Vec<f64> = (0..p.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = (0..p.n_fast())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        // An all-equal X is a fixed point of the uncoupled slow flow.
        if x.iter().all(|&v| v == x[0]) {
            x[0] += p.forcing / 10.0;
        }
        Self { x, z }
    }
}

/// Slow state of the reduced model plus the residual forcing currently applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
}

impl ReducedState {
    pub fn deterministic(x: Vec<f64>) -> Self {
        let e = vec![0.0; x.len()];
        Self { x, e }
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Resolved tendency `G_k(X) = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F`.
pub fn resolved_tendency(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(out.len(), n);
    for k in 0..n {
        let ki = k as isize;
        let km1 = x[wrap(ki - 1, n)];
        let km2 = x[wrap(ki - 2, n)];
        let kp1 = x[wrap(ki + 1, n)];
        out[k] = -km1 * (km2 - kp1) - x[k] + forcing;
    }
}

/// Advective part of the slow tendency, `-X_{k-1}(X_{k-2} - X_{k+1})`.
pub fn advection(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    resolved_tendency(x, 0.0, &mut out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o += xi;
    }
    out
}

/// Fast-scale forcing on each sector, `U_k = -(h c / b) sum_j Z_{j,k}`.
pub fn coupling_forcing(z: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    if z.len() != p.n_fast() {
        return Err(Error::dim(format!(
            "Z has {} entries, J*K = {}",
            z.len(),
            p.n_fast()
        )));
    }
    let mut u = vec![0.0; p.k];
    coupling_forcing_into(z, p, &mut u);
    Ok(u)
}

fn coupling_forcing_into(z: &[f64], p: &ModelParams, out: &mut [f64]) {
    let scale = -p.coupling();
    for (k, chunk) in z.chunks_exact(p.j).enumerate() {
        out[k] = scale * chunk.iter().sum::<f64>();
    }
}

/// Coupled right-hand side on the flat `[X, Z]` layout.
pub fn full_rhs_flat(p: &ModelParams, state: &[f64], out: &mut [f64]) {
    let kk = p.k;
    let (x, z) = state.split_at(kk);
    let (dx, dz) = out.split_at_mut(kk);
    resolved_tendency(x, p.forcing, dx);
    let scale = -p.coupling();
    for (k, chunk) in z.chunks_exact(p.j).enumerate() {
        dx[k] += scale * chunk.iter().sum::<f64>();
    }

    let n = z.len();
    let cb = p.c * p.b;
    let hcb = p.coupling();
    for i in 0..n {
        let ip1 = if i + 1 == n { 0 } else { i + 1 };
        let ip2 = (i + 2) % n;
        let im1 = if i == 0 { n - 1 } else { i - 1 };
        dz[i] = -cb * z[ip1] * (z[ip2] - z[im1]) - p.c * z[i] + hcb * x[i / p.j];
    }
}

/// Time derivative of the coupled system.
pub fn full_rhs(s: &FullState, p: &ModelParams) -> Result<FullState> {
    s.check(p)?;
    let flat = s.to_flat();
    let mut out = vec![0.0; flat.len()];
    full_rhs_flat(p, &flat, &mut out);
    FullState::from_flat(p, &out)
}

/// A closure `f_k(X)` for the unresolved forcing.
pub trait Parameterization {
    /// Writes `f_k(X)` for every component `k`.
    fn evaluate(&self, x: &[f64], out: &mut [f64]);
}

/// The zero closure, i.e. the truncated slow model.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClosure;

impl Parameterization for NoClosure {
    fn evaluate(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

impl<F: Fn(&[f64], &mut [f64])> Parameterization for F {
    fn evaluate(&self, x: &[f64], out: &mut [f64]) {
        self(x, out)
    }
}

/// `dX_k = G_k(X) + f_k(X) + e_k` written into `out`.
pub fn reduced_rhs_into(
    p: &ModelParams,
    closure: &dyn Parameterization,
    x: &[f64],
    e: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    resolved_tendency(x, p.forcing, out);
    closure.evaluate(x, scratch);
    for k in 0..out.len() {
        out[k] += scratch[k] + e[k];
    }
}

/// Slow tendency of the reduced model.
pub fn reduced_rhs(
    s: &ReducedState,
    p: &ModelParams,
    closure: &dyn Parameterization,
) -> Result<Vec<f64>> {
    if s.x.len() != p.k || s.e.len() != p.k {
        return Err(Error::dim(format!(
            "reduced state has {}/{} entries, K = {}",
            s.x.len(),
            s.e.len(),
            p.k
        )));
    }
    let mut f = vec![0.0; p.k];
    closure.evaluate(&s.x, &mut f);
    if let Some(k) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "parameterization returned {} for component {k}",
            f[k]
        )));
    }
    let mut out = vec![0.0; p.k];
    resolved_tendency(&s.x, p.forcing, &mut out);
    for k in 0..p.k {
        out[k] += f[k] + s.e[k];
    }
    Ok(out)
}

/// Classical four-stage Runge-Kutta stepper with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.k1.len()
    }

    /// Advances `state` in place by one step of size `dt`.
    pub fn step<F>(&mut self, mut rhs: F, state: &mut [f64], dt: f64) -> Result<()>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = state.len();
        if n != self.dim() {
            return Err(Error::dim(format!(
                "stepper sized for {}, state has {n}",
                self.dim()
            )));
        }
        let half = 0.5 * dt;

        rhs(state, &mut self.k1);
        check_stage(&self.k1, 1)?;
        for i in 0..n {
            self.tmp[i] = state[i] + half * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        check_stage(&self.k2, 2)?;
        for i in 0..n {
            self.tmp[i] = state[i] + half * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        check_stage(&self.k3, 3)?;
        for i in 0..n {
            self.tmp[i] = state[i] + dt * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        check_stage(&self.k4, 4)?;

        let sixth = dt / 6.0;
        for i in 0..n {
            state[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_stage(k: &[f64], stage: usize) -> Result<()> {
    match k.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "RK4 stage {stage} produced {} in component {i}",
            k[i]
        ))),
        None => Ok(()),
    }
}

/// One RK4 step returning the new state.
pub fn rk4_step<F>(rhs: F, state: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    let mut out = state.to_vec();
    Rk4::new(state.len()).step(rhs, &mut out, dt)?;
    Ok(out)
}

/// Recorded states on a uniform time grid, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    width: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(width: usize) -> Self {
        Self {
            times: Vec::new(),
            width,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(width: usize, rows: usize) -> Self {
        Self {
            times: Vec::with_capacity(rows),
            width,
            data: Vec::with_capacity(rows * width),
        }
    }

    /// Builds a trajectory from explicit rows.
    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        if times.len() != rows.len() {
            return Err(Error::dim("one time per row is required"));
        }
        let width = rows.first().map_or(0, Vec::len);
        let mut t = Self::with_capacity(width, rows.len());
        for (time, row) in times.into_iter().zip(rows) {
            if row.len() != width {
                return Err(Error::dim("ragged rows"));
            }
            t.push(time, row);
        }
        Ok(t)
    }

    pub fn push(&mut self, t: f64, state: &[f64]) {
        debug_assert_eq!(state.len(), self.width);
        self.times.push(t);
        self.data.extend_from_slice(state);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width.max(1)).take(self.len())
    }

    /// Time series of one column.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    /// Keeps the columns in `range`.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Trajectory {
        let mut out = Trajectory::with_capacity(range.len(), self.len());
        for (t, row) in self.times.iter().zip(self.rows()) {
            out.push(*t, &row[range.clone()]);
        }
        out
    }

    /// Rows with `from <= t <= to`, allowing half a step of rounding slack.
    pub fn window(&self, from: f64, to: f64) -> Trajectory {
        let slack = self.spacing().map_or(1e-9, |d| 0.5 * d);
        let mut out = Trajectory::new(self.width);
        for (t, row) in self.times.iter().zip(self.rows()) {
            if *t >= from - slack && *t <= to + slack {
                out.push(*t, row);
            }
        }
        out
    }

    /// Every `stride`-th row.
    pub fn thin(&self, stride: usize) -> Trajectory {
        let stride = stride.max(1);
        let mut out = Trajectory::new(self.width);
        for (i, (t, row)) in self.times.iter().zip(self.rows()).enumerate() {
            if i % stride == 0 {
                out.push(*t, row);
            }
        }
        out
    }

    pub fn spacing(&self) -> Option<f64> {
        (self.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    /// CSV with the given column names after `t`, 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, names: &[String]) -> Result<()> {
        if names.len() != self.width {
            return Err(Error::dim(
                "one column name per state component is required",
            ));
        }
        write!(w, "t")?;
        for n in names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (t, row) in self.times.iter().zip(self.rows()) {
            write!(w, "{t:.16e}")?;
            for v in row {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Column names `X1..XK[,Z1..ZJK]`.
pub fn column_names(k: usize, n_fast: usize) -> Vec<String> {
    (1..=k)
        .map(|i| format!("X{i}"))
        .chain((1..=n_fast).map(|i| format!("Z{i}")))
        .collect()
}

/// Number of fixed steps between `t0` and `t1`.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(t1 >= t0) {
        return Err(Error::config(
            "t1",
            format!("end time {t1} precedes start time {t0}"),
        ));
    }
    Ok(((t1 - t0) / dt).round() as usize)
}

fn guard_check(state: &[f64], guard: f64, t_valid: f64) -> Result<()> {
    if let Some((i, v)) = state
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || v.abs() > guard)
    {
        return Err(Error::BlowUp {
            time: t_valid,
            detail: format!("component {i} reached {v}"),
        });
    }
    Ok(())
}

/// Integrates `rhs` for `n_steps` from `state`, calling `record` at `t0` and
/// after every `record_every`-th step.
pub fn integrate_with<F, R>(
    mut rhs: F,
    state: &mut [f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
    record_every: usize,
    guard: f64,
    mut record: R,
) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]),
    R: FnMut(f64, &[f64]),
{
    let record_every = record_every.max(1);
    let mut stepper = Rk4::new(state.len());
    record(t0, state);
    for step in 1..=n_steps {
        let t_prev = t0 + (step - 1) as f64 * dt;
        stepper
            .step(&mut rhs, state, dt)
            .map_err(|e| Error::BlowUp {
                time: t_prev,
                detail: e.to_string(),
            })?;
        guard_check(state, guard, t_prev)?;
        if step % record_every == 0 {
            record(t0 + step as f64 * dt, state);
        }
    }
    Ok(())
}

/// Integrates the coupled model and records full states every `record_every` steps.
pub fn simulate(
    initial: &FullState,
    p: &ModelParams,
    t0: f64,
    t1: f64,
    record_every: usize,
) -> Result<Trajectory> {
    p.validate()?;
    initial.check(p)?;
    let n = step_count(t0, t1, p.dt)?;
    let mut state = initial.to_flat();
    let mut traj = Trajectory::with_capacity(p.full_dim(), n / record_every.max(1) + 1);
    integrate_with(
        |s, o| full_rhs_flat(p, s, o),
        &mut state,
        t0,
        p.dt,
        n,
        record_every,
        DEFAULT_GUARD,
        |t, s| traj.push(t, s),
    )?;
    Ok(traj)
}

/// Slow variables and fast-scale forcing recorded along a coupled run.
#[derive(Debug, Clone)]
pub struct SlowRecord {
    pub x: Trajectory,
    pub u: Trajectory,
    pub final_state: FullState,
}

/// Integrates the coupled model but stores only `X` and `U`, which is all the
/// closure-learning pipeline needs and keeps long runs small.
pub fn simulate_slow_record(
    initial: &FullState,
    p: &ModelParams,
    t0: f64,
    t1: f64,
    record_every: usize,
) -> Result<SlowRecord> {
    p.validate()?;
    initial.check(p)?;
    let n = step_count(t0, t1, p.dt)?;
    let rows = n / record_every.max(1) + 1;
    let mut state = initial.to_flat();
    let mut x = Trajectory::with_capacity(p.k, rows);
    let mut u = Trajectory::with_capacity(p.k, rows);
    let mut ubuf = vec![0.0; p.k];
    integrate_with(
        |s, o| full_rhs_flat(p, s, o),
        &mut state,
        t0,
        p.dt,
        n,
        record_every,
        DEFAULT_GUARD,
        |t, s| {
            x.push(t, &s[..p.k]);
            coupling_forcing_into(&s[p.k..], p, &mut ubuf);
            u.push(t, &ubuf);
        },
    )?;
    Ok(SlowRecord {
        x,
        u,
        final_state: FullState::from_flat(p, &state)?,
    })
}

/// Source of the additive residual forcing `e_k` in the reduced model.
///
/// The residual is held fixed over each integration step and advanced once
/// per step.
pub trait ResidualProcess {
    fn current(&self) -> &[f64];
    fn advance(&mut self);
}

/// Zero residual, i.e. the deterministic reduced model.
#[derive(Debug, Clone)]
pub struct ZeroResidual(Vec<f64>);

impl ZeroResidual {
    pub fn new(k: usize) -> Self {
        Self(vec![0.0; k])
    }
}

impl ResidualProcess for ZeroResidual {
    fn current(&self) -> &[f64] {
        &self.0
    }

    fn advance(&mut self) {}
}

/// Stepper for the reduced model that owns its scratch buffers.
pub struct ReducedStepper<'a> {
    params: ModelParams,
    closure: &'a dyn Parameterization,
    rk: Rk4,
    scratch: Vec<f64>,
}

impl<'a> ReducedStepper<'a> {
    pub fn new(params: ModelParams, closure: &'a dyn Parameterization) -> Self {
        Self {
            params,
            closure,
            rk: Rk4::new(params.k),
            scratch: vec![0.0; params.k],
        }
    }

    /// One step with the residual `e` held fixed.
    pub fn step(&mut self, x: &mut [f64], e: &[f64]) -> Result<()> {
        let Self {
            params,
            closure,
            rk,
            scratch,
        } = self;
        rk.step(
            |s, o| reduced_rhs_into(params, *closure, s, e, o, scratch),
            x,
            params.dt,
        )
    }

    /// Advances `x` by `n_steps`, pulling the residual from `residual`.
    pub fn run(
        &mut self,
        x: &mut [f64],
        residual: &mut dyn ResidualProcess,
        t0: f64,
        n_steps: usize,
        record_every: usize,
        mut record: impl FnMut(f64, &[f64]),
    ) -> Result<()> {
        let record_every = record_every.max(1);
        let dt = self.params.dt;
        record(t0, x);
        for step in 1..=n_steps {
            let t_prev = t0 + (step - 1) as f64 * dt;
            self.step(x, residual.current())
                .map_err(|e| Error::BlowUp {
                    time: t_prev,
                    detail: e.to_string(),
                })?;
            guard_check(x, DEFAULT_GUARD, t_prev)?;
            residual.advance();
            if step % record_every == 0 {
                record(t0 + step as f64 * dt, x);
            }
        }
        Ok(())
    }
}

/// Integrates the reduced model `dX = G(X) + f(X) + e` from `x0`.
pub fn simulate_reduced(
    x0: &[f64],
    p: &ModelParams,
    closure: &dyn Parameterization,
    residual: &mut dyn ResidualProcess,
    t0: f64,
    t1: f64,
    record_every: usize,
) -> Result<Trajectory> {
    p.validate()?;
    if x0.len() != p.k || residual.current().len() != p.k {
        return Err(Error::dim(format!(
            "reduced model expects {} components",
            p.k
        )));
    }
    let n = step_count(t0, t1, p.dt)?;
    let mut x = x0.to_vec();
    let mut traj = Trajectory::with_capacity(p.k, n / record_every.max(1) + 1);
    ReducedStepper::new(*p, closure).run(&mut x, residual, t0, n, record_every, |t, s| {
        traj.push(t, s)
    })?;
    Ok(traj)
}
