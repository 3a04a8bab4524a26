//! Distributional and trajectory diagnostics.

use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Floor applied to the model density before taking logarithms.
pub const KL_FLOOR: f64 = 1e-12;
/// Grid size used when comparing two sample sets.
pub const KL_GRID_POINTS: usize = 512;
/// Grid padding beyond the joint sample range, in bandwidths.
pub const KL_GRID_PAD: f64 = 3.0;
/// Kernels are truncated this many bandwidths from their centre.
const KERNEL_CUTOFF: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoid integral of the density over its grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Silverman's rule `0.9 min(std, IQR / 1.34) N^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(
            "bandwidth needs at least two samples".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = std_dev(samples);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::Degenerate("samples are constant".into()));
    }
    Ok(0.9 * spread * (samples.len() as f64).powf(-0.2))
}

/// Gaussian kernel density estimate of `samples` evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: f64) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::Degenerate(
            "kernel density estimate of no samples".into(),
        ));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::config("bandwidth", "must be positive and finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * sorted.len() as f64);
    let inv2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let reach = KERNEL_CUTOFF * bandwidth;
    let density = grid
        .iter()
        .map(|&x| {
            let lo = sorted.partition_point(|&s| s < x - reach);
            let hi = sorted.partition_point(|&s| s <= x + reach);
            let sum: f64 = sorted[lo..hi]
                .iter()
                .map(|&s| (-(s - x) * (s - x) * inv2).exp())
                .sum();
            sum * norm
        })
        .collect();
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        density,
        bandwidth,
    })
}

/// Autocovariance `C(m) = 1/(M-m) sum_h (x_h - mean)(x_{h+m} - mean)` for `m = 0..=max_lag`.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if max_lag >= n {
        return Err(Error::config(
            "max_lag",
            format!("lag {max_lag} needs a series longer than {n}"),
        ));
    }
    let m = mean(series);
    Ok((0..=max_lag)
        .map(|lag| {
            let s: f64 = (0..n - lag)
                .map(|h| (series[h] - m) * (series[h + lag] - m))
                .sum();
            s / (n - lag) as f64
        })
        .collect())
}

/// Autocorrelation `C(m) / C(0)`.
pub fn acf_normalized(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let c = acf(series, max_lag)?;
    if !(c[0] > 0.0) {
        return Err(Error::Degenerate(
            "constant series has no autocorrelation".into(),
        ));
    }
    let c0 = c[0];
    Ok(c.into_iter().map(|v| v / c0).collect())
}

/// Discrete divergence `sum P log(P / Q)` after renormalising both to unit sum.
pub fn kl_divergence_weights(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!(
            "P has {} cells, Q has {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Degenerate(
            "densities must be finite and non-negative".into(),
        ));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if !(sp > 0.0) {
        return Err(Error::Degenerate("P has no mass".into()));
    }
    let sq = if sq > 0.0 { sq } else { 1.0 };
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| {
            let pn = pi / sp;
            let qn = (qi / sq).max(KL_FLOOR);
            pn * (pn / qn).ln()
        })
        .sum())
}

/// Divergence between two densities evaluated on the same grid.
pub fn kl_divergence(p: &DensityEstimate, q: &DensityEstimate) -> Result<f64> {
    let same = p.grid.len() == q.grid.len()
        && p.grid
            .iter()
            .zip(&q.grid)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
    if !same {
        return Err(Error::dim("densities are on different grids"));
    }
    kl_divergence_weights(&p.density, &q.density)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlComparison {
    pub divergence: f64,
    pub reference: DensityEstimate,
    pub model: DensityEstimate,
}

/// KDE of both sample sets on a shared grid and the divergence of the model
/// density from the reference density.
pub fn kl_from_samples(
    reference: &[f64],
    model: &[f64],
    bandwidth: Option<f64>,
) -> Result<KlComparison> {
    let bw_ref = match bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(reference)?,
    };
    let bw_model = match bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(model)?,
    };
    let lo = reference
        .iter()
        .chain(model)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = reference
        .iter()
        .chain(model)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let pad = KL_GRID_PAD * bw_ref.max(bw_model);
    let grid = uniform_grid(lo - pad, hi + pad, KL_GRID_POINTS);
    let p = kde(reference, &grid, bw_ref)?;
    let q = kde(model, &grid, bw_model)?;
    Ok(KlComparison {
        divergence: kl_divergence(&p, &q)?,
        reference: p,
        model: q,
    })
}

fn check_aligned(truth: &Trajectory, pred: &Trajectory) -> Result<()> {
    if truth.len() != pred.len() || truth.width() != pred.width() {
        return Err(Error::dim(format!(
            "truth is {}x{}, prediction is {}x{}",
            truth.len(),
            truth.width(),
            pred.len(),
            pred.width()
        )));
    }
    if truth.is_empty() || truth.width() == 0 {
        return Err(Error::Degenerate("empty trajectories".into()));
    }
    Ok(())
}

/// Mean squared prediction error averaged over components and times.
pub fn mspe(truth: &Trajectory, pred: &Trajectory) -> Result<f64> {
    check_aligned(truth, pred)?;
    let n = (truth.len() * truth.width()) as f64;
    let s: f64 = truth
        .rows()
        .zip(pred.rows())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(s / n)
}

/// L1 norm of the error at each recorded time.
pub fn l1_error_per_time(truth: &Trajectory, pred: &Trajectory) -> Result<Vec<f64>> {
    check_aligned(truth, pred)?;
    Ok(truth
        .rows()
        .zip(pred.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

    #[test]
    fn kde_single_and_pair() {
        let d = kde(&[0.0], &[0.0], 1.0).unwrap();
        assert_abs_diff_eq!(d.density[0], 0.398942, epsilon = 1e-6);
        let d = kde(&[-1.0, 1.0], &[0.0], 1.0).unwrap();
        assert_abs_diff_eq!(
            d.density[0],
            INV_SQRT_2PI * (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(d.density[0], 0.241971, epsilon = 1e-6);
        let far = kde(&[-1.0, 1.0], &[1e6], 1.0).unwrap();
        assert_eq!(far.density[0], 0.0);
    }

    #[test]
    fn kde_rejects_bad_input() {
        assert!(kde(&[], &[0.0], 1.0).is_err());
        assert!(kde(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn kde_integrates_to_one() {
        let samples: Vec<f64> = (0..500)
            .map(|i| ((i * 37) % 101) as f64 / 10.0 - 5.0)
            .collect();
        let bw = silverman_bandwidth(&samples).unwrap();
        let grid = uniform_grid(-5.0 - 6.0 * bw, 5.1 + 6.0 * bw, 2000);
        let d = kde(&samples, &grid, bw).unwrap();
        assert!((d.integral() - 1.0).abs() < 1e-3, "{}", d.integral());
    }

    #[test]
    fn kde_reflection_symmetry() {
        let s = [0.3, 1.7, -0.4, 2.2];
        let r: Vec<f64> = s.iter().map(|v| -v).collect();
        let grid = uniform_grid(-4.0, 4.0, 41);
        let a = kde(&s, &grid, 0.5).unwrap();
        let b = kde(&r, &grid, 0.5).unwrap();
        for i in 0..41 {
            assert_abs_diff_eq!(a.density[i], b.density[40 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn acf_examples() {
        let s = [1.0, -1.0, 1.0, -1.0];
        let c = acf(&s, 1).unwrap();
        assert_abs_diff_eq!(c[0], 1.0);
        assert_abs_diff_eq!(c[1], -1.0);
        assert!(acf(&s, 4).is_err());
        assert!(acf_normalized(&[2.0; 10], 3).is_err());
    }

    #[test]
    fn kl_examples() {
        let v = kl_divergence_weights(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(
            v,
            0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(v, 0.143841, epsilon = 1e-6);
        assert_eq!(
            kl_divergence_weights(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(),
            0.0
        );
        assert!(kl_divergence_weights(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kl_rejects_mismatched_grids() {
        let a = kde(&[0.0], &uniform_grid(-1.0, 1.0, 5), 1.0).unwrap();
        let b = kde(&[0.0], &uniform_grid(-2.0, 2.0, 5), 1.0).unwrap();
        assert!(kl_divergence(&a, &b).is_err());
    }

    #[test]
    fn mspe_examples() {
        let t = Trajectory::from_rows(vec![0.0, 1.0], &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Trajectory::from_rows(vec![0.0, 1.0], &[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(mspe(&t, &t).unwrap(), 0.0);
        assert_abs_diff_eq!(mspe(&t, &p).unwrap(), 1.0);
        let shifted =
            Trajectory::from_rows(vec![0.0, 1.0], &[vec![1.5, 2.5], vec![3.5, 4.5]]).unwrap();
        assert_abs_diff_eq!(mspe(&t, &shifted).unwrap(), 0.25);
        let short = Trajectory::from_rows(vec![0.0], &[vec![1.0, 2.0]]).unwrap();
        assert!(mspe(&t, &short).is_err());
        assert_eq!(l1_error_per_time(&t, &p).unwrap(), vec![0.0, 2.0]);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(p in prop::collection::vec(0.0f64..1.0, 8), q in prop::collection::vec(0.001f64..1.0, 8)) {
            prop_assume!(p.iter().sum::<f64>() > 1e-6);
            let v = kl_divergence_weights(&p, &q).unwrap();
            prop_assert!(v >= -1e-12);
            prop_assert!(kl_divergence_weights(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn mspe_permutation_invariant(vals in prop::collection::vec(-5.0f64..5.0, 24), shift in 0usize..4) {
            let rows_a: Vec<Vec<f64>> = vals[..12].chunks(4).map(|c| c.to_vec()).collect();
            let rows_b: Vec<Vec<f64>> = vals[12..].chunks(4).map(|c| c.to_vec()).collect();
            let rot = |r: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                r.iter().map(|row| { let mut v = row.clone(); v.rotate_left(shift); v }).collect()
            };
            let t = vec![0.0, 1.0, 2.0];
            let a = Trajectory::from_rows(t.clone(), &rows_a).unwrap();
            let b = Trajectory::from_rows(t.clone(), &rows_b).unwrap();
            let ar = Trajectory::from_rows(t.clone(), &rot(&rows_a)).unwrap();
            let br = Trajectory::from_rows(t, &rot(&rows_b)).unwrap();
            prop_assert!((mspe(&a, &b).unwrap() - mspe(&ar, &br).unwrap()).abs() < 1e-12);
        }
    }
}
