//! Monomial dictionaries `Θ(X)` over snapshot matrices.
//!
//! Columns are ordered graded-lexicographically: all degree-0 terms, then
//! degree 1, and so on; within a degree, monomials are compared by their
//! sorted component-index tuples, so for two variables the quadratic block
//! reads `x1^2, x1 x2, x2^2`.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// A monomial `prod_c x_c^{p_c}` stored as `(component, power)` pairs sorted
/// by component with every power positive. The empty index is the constant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, u32)>", into = "Vec<(usize, u32)>")]
pub struct MultiIndex(Vec<(usize, u32)>);

impl MultiIndex {
    pub fn constant() -> Self {
        MultiIndex(Vec::new())
    }

    /// `x_c^p`; `p = 0` gives the constant.
    pub fn power(c: usize, p: u32) -> Self {
        if p == 0 {
            Self::constant()
        } else {
            MultiIndex(vec![(c, p)])
        }
    }

    pub fn from_pairs(pairs: &[(usize, u32)]) -> Result<Self> {
        let mut v: Vec<(usize, u32)> = Vec::with_capacity(pairs.len());
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|&(c, _)| c);
        for (c, p) in sorted {
            match v.last_mut() {
                Some((lc, lp)) if *lc == c => *lp += p,
                _ => v.push((c, p)),
            }
        }
        v.retain(|&(_, p)| p > 0);
        Ok(MultiIndex(v))
    }

    /// Monomial with one factor per entry of `factors` (repeats allowed).
    pub fn from_factors(factors: &[usize]) -> Self {
        let pairs: Vec<(usize, u32)> = factors.iter().map(|&c| (c, 1)).collect();
        Self::from_pairs(&pairs).expect("factor list is always valid")
    }

    pub fn pairs(&self) -> &[(usize, u32)] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&(_, p)| p).sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest component index referenced, if any.
    pub fn max_component(&self) -> Option<usize> {
        self.0.last().map(|&(c, _)| c)
    }

    /// `Some((c, p))` when the monomial is a pure power of one component.
    pub fn as_single_power(&self) -> Option<(usize, u32)> {
        match self.0.as_slice() {
            [single] => Some(*single),
            _ => None,
        }
    }

    /// Sorted factor tuple, e.g. `x0^2 x3` gives `[0, 0, 3]`.
    pub fn factors(&self) -> Vec<usize> {
        self.0
            .iter()
            .flat_map(|&(c, p)| std::iter::repeat_n(c, p as usize))
            .collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|&(c, p)| x[c].powi(p as i32)).product()
    }

    /// Human-readable form with one-based component labels, e.g. `X1^2*X4`.
    pub fn label(&self) -> String {
        if self.is_constant() {
            return "1".into();
        }
        self.0
            .iter()
            .map(|&(c, p)| {
                if p == 1 {
                    format!("X{}", c + 1)
                } else {
                    format!("X{}^{}", c + 1, p)
                }
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

impl TryFrom<Vec<(usize, u32)>> for MultiIndex {
    type Error = Error;

    fn try_from(v: Vec<(usize, u32)>) -> Result<Self> {
        Self::from_pairs(&v)
    }
}

impl From<MultiIndex> for Vec<(usize, u32)> {
    fn from(m: MultiIndex) -> Self {
        m.0
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.factors().cmp(&other.factors()))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegreeMode {
    /// Monomials of exactly the given degree.
    Exact,
    /// Monomials of degree 1 through the given degree (no constant).
    UpTo,
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of monomials in `n` variables for the given degree and mode.
pub fn count_monomials(n: usize, degree: usize, mode: DegreeMode) -> Result<u128> {
    if n == 0 {
        return Err(Error::config("n", "need at least one variable"));
    }
    let (n, d) = (n as u64, degree as u64);
    Ok(match mode {
        DegreeMode::Exact => binomial(n + d - 1, d),
        DegreeMode::UpTo => binomial(n + d, d) - 1,
    })
}

/// All monomials of exactly `degree` in `n` variables, graded-lex order.
pub fn monomials_of_degree(n: usize, degree: usize) -> Vec<MultiIndex> {
    if degree == 0 {
        return vec![MultiIndex::constant()];
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; degree];
    loop {
        out.push(MultiIndex::from_factors(&idx));
        // advance the non-decreasing tuple
        let mut pos = degree;
        while pos > 0 && idx[pos - 1] == n - 1 {
            pos -= 1;
        }
        if pos == 0 {
            return out;
        }
        idx[pos - 1] += 1;
        let v = idx[pos - 1];
        for slot in idx.iter_mut().skip(pos) {
            *slot = v;
        }
    }
}

/// Graded-lex monomials of degree `1..=degree` (or exactly `degree`).
pub fn enumerate_monomials(n: usize, degree: usize, mode: DegreeMode) -> Vec<MultiIndex> {
    match mode {
        DegreeMode::Exact => monomials_of_degree(n, degree),
        DegreeMode::UpTo => (1..=degree)
            .flat_map(|d| monomials_of_degree(n, d))
            .collect(),
    }
}

/// Own-component powers `x_c, x_c^2, ..., x_c^degree` for every `c < n`.
pub fn own_powers(n: usize, degree: u32) -> Vec<MultiIndex> {
    let mut v: Vec<MultiIndex> = (0..n)
        .flat_map(|c| (1..=degree).map(move |p| MultiIndex::power(c, p)))
        .collect();
    v.sort();
    v
}

/// Forced descriptors plus `k_random` distinct draws from the rest of `pool`.
pub fn random_column_subset<R: Rng + ?Sized>(
    pool: &[MultiIndex],
    forced: &[MultiIndex],
    k_random: usize,
    rng: &mut R,
) -> Result<Vec<MultiIndex>> {
    let forced_set: BTreeSet<&MultiIndex> = forced.iter().collect();
    let mut seen = BTreeSet::new();
    let available: Vec<&MultiIndex> = pool
        .iter()
        .filter(|m| !forced_set.contains(m) && seen.insert(*m))
        .collect();
    if k_random > available.len() {
        return Err(Error::config(
            "k_random",
            format!(
                "{k_random} requested but only {} columns available",
                available.len()
            ),
        ));
    }
    let mut out: BTreeSet<MultiIndex> = forced.iter().cloned().collect();
    for i in rand::seq::index::sample(rng, available.len(), k_random) {
        out.insert(available[i].clone());
    }
    Ok(out.into_iter().collect())
}

/// Evaluated dictionary: one column per retained descriptor.
#[derive(Debug, Clone)]
pub struct Dictionary {
    /// `m x p`, column `q` holds descriptor `q` at every snapshot.
    pub matrix: DMatrix<f64>,
    pub descriptors: Vec<MultiIndex>,
    /// L2 norm of each column before scaling (all ones when not normalized).
    pub norms: Vec<f64>,
    /// Descriptors whose columns were identically zero and got dropped.
    pub dropped: Vec<MultiIndex>,
}

impl Dictionary {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Maps coefficients on the stored columns back to raw monomial scale.
    pub fn unscale(&self, coefficients: &[f64]) -> Vec<f64> {
        coefficients
            .iter()
            .zip(&self.norms)
            .map(|(s, n)| s / n)
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.descriptors.iter().map(|d| d.label()).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.rows() {
            let row: Vec<String> = (0..self.cols())
                .map(|j| format!("{:.16e}", self.matrix[(i, j)]))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Evaluates `descriptors` at every row of `x`.
pub fn build_dictionary(
    x: &Trajectory,
    descriptors: &[MultiIndex],
    normalize: bool,
) -> Result<Dictionary> {
    if x.is_empty() {
        return Err(Error::Degenerate(
            "dictionary needs at least one snapshot".into(),
        ));
    }
    let n = x.width();
    let mut uniq = BTreeSet::new();
    for d in descriptors {
        if d.max_component().is_some_and(|c| c >= n) {
            return Err(Error::config(
                "descriptors",
                format!("{} references a component beyond {n}", d.label()),
            ));
        }
        if !uniq.insert(d) {
            return Err(Error::config(
                "descriptors",
                format!("duplicate {}", d.label()),
            ));
        }
    }
    let m = x.len();
    let mut kept = Vec::with_capacity(descriptors.len());
    let mut norms = Vec::with_capacity(descriptors.len());
    let mut dropped = Vec::new();
    let mut data = Vec::with_capacity(m * descriptors.len());
    for d in descriptors {
        let start = data.len();
        data.extend(x.rows().map(|row| d.eval(row)));
        let col = &mut data[start..];
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dictionary column {}", d.label())));
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if normalize {
            if norm == 0.0 {
                log::warn!("dropping all-zero dictionary column {}", d.label());
                data.truncate(start);
                dropped.push(d.clone());
                continue;
            }
            col.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        } else {
            norms.push(1.0);
        }
        kept.push(d.clone());
    }
    Ok(Dictionary {
        matrix: DMatrix::from_vec(m, kept.len(), data),
        descriptors: kept,
        norms,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn traj(rows: &[Vec<f64>]) -> Trajectory {
        Trajectory::from_rows((0..rows.len()).map(|i| i as f64).collect(), rows).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(count_monomials(40, 3, DegreeMode::Exact).unwrap(), 11480);
        assert_eq!(count_monomials(40, 4, DegreeMode::UpTo).unwrap(), 135750);
        assert_eq!(count_monomials(2, 2, DegreeMode::UpTo).unwrap(), 5);
        assert_eq!(count_monomials(7, 0, DegreeMode::Exact).unwrap(), 1);
        for (n, d) in [(40, 2), (40, 3), (5, 4), (3, 6)] {
            assert_eq!(
                monomials_of_degree(n, d).len() as u128,
                count_monomials(n, d, DegreeMode::Exact).unwrap()
            );
        }
        assert_eq!(enumerate_monomials(40, 2, DegreeMode::UpTo).len(), 860);
    }

    #[test]
    fn quadratic_order_and_values() {
        let ds = monomials_of_degree(2, 2);
        let labels: Vec<String> = ds.iter().map(|d| d.label()).collect();
        assert_eq!(labels, ["X1^2", "X1*X2", "X2^2"]);
        let dict = build_dictionary(&traj(&[vec![2.0, 3.0]]), &ds, false).unwrap();
        assert_eq!(dict.matrix.as_slice(), &[4.0, 6.0, 9.0]);
    }

    #[test]
    fn graded_lex_is_sorted_and_unique() {
        let all = enumerate_monomials(4, 4, DegreeMode::UpTo);
        for w in all.windows(2) {
            assert_eq!(
                w[0].cmp(&w[1]),
                Ordering::Less,
                "{} {}",
                w[0].label(),
                w[1].label()
            );
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = seeded(11);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ds = enumerate_monomials(3, 4, DegreeMode::UpTo);
        let dict = build_dictionary(&traj(&rows), &ds, false).unwrap();
        let mut oracle: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        for d in 1..=4u32 {
            for a in 0..=d {
                for b in 0..=d - a {
                    let c = d - a - b;
                    let vals = rows
                        .iter()
                        .map(|r| r[0].powi(a as i32) * r[1].powi(b as i32) * r[2].powi(c as i32))
                        .collect();
                    let mut f = vec![0; a as usize];
                    f.extend(std::iter::repeat_n(1, b as usize));
                    f.extend(std::iter::repeat_n(2, c as usize));
                    oracle.push((f, vals));
                }
            }
        }
        assert_eq!(oracle.len(), dict.cols());
        for (q, d) in dict.descriptors.iter().enumerate() {
            let (_, vals) = oracle.iter().find(|(f, _)| *f == d.factors()).unwrap();
            for i in 0..50 {
                assert_eq!(dict.matrix[(i, q)], vals[i]);
            }
        }
    }

    #[test]
    fn normalization_and_dropped_columns() {
        let rows = vec![vec![1.0, 0.0], vec![-3.0, 0.0], vec![0.5, 0.0]];
        let ds = enumerate_monomials(2, 2, DegreeMode::UpTo);
        let dict = build_dictionary(&traj(&rows), &ds, true).unwrap();
        let labels: Vec<String> = dict.descriptors.iter().map(|d| d.label()).collect();
        assert_eq!(labels, ["X1", "X1^2"]);
        assert_eq!(dict.dropped.len(), 3);
        for j in 0..dict.cols() {
            assert!((dict.matrix.column(j).norm() - 1.0).abs() < 1e-12);
        }
        assert!((dict.norms[0] - (1.0f64 + 9.0 + 0.25).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_descriptors() {
        let t = traj(&[vec![1.0, 2.0]]);
        assert!(build_dictionary(&t, &[MultiIndex::power(2, 1)], false).is_err());
        let d = MultiIndex::power(0, 1);
        assert!(build_dictionary(&t, &[d.clone(), d], false).is_err());
    }

    #[test]
    fn subsets() {
        let pool = monomials_of_degree(40, 3);
        let forced: Vec<MultiIndex> = (0..40).map(|c| MultiIndex::power(c, 3)).collect();
        let s0 = random_column_subset(&pool, &forced, 0, &mut seeded(1)).unwrap();
        let mut f = forced.clone();
        f.sort();
        assert_eq!(s0, f);
        let a = random_column_subset(&pool, &forced, 100, &mut seeded(5)).unwrap();
        let b = random_column_subset(&pool, &forced, 100, &mut seeded(5)).unwrap();
        assert_eq!(a.len(), 140);
        assert_eq!(a, b);
        assert!(random_column_subset(&pool, &forced, 20000, &mut seeded(5)).is_err());
    }

    #[test]
    fn descriptor_json_roundtrip() {
        let d = MultiIndex::from_pairs(&[(3, 1), (0, 2), (3, 1)]).unwrap();
        assert_eq!(d.pairs(), &[(0, 2), (3, 2)]);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, "[[0,2],[3,2]]");
        assert_eq!(serde_json::from_str::<MultiIndex>(&s).unwrap(), d);
        assert_eq!(
            serde_json::to_string(&MultiIndex::constant()).unwrap(),
            "[]"
        );
    }

    proptest! {
        #[test]
        fn unscaled_fit_predicts_like_raw(
            rows in prop::collection::vec(prop::collection::vec(0.5f64..3.0, 2), 6..20),
            s in prop::collection::vec(-2.0f64..2.0, 5),
        ) {
            let t = traj(&rows);
            let ds = enumerate_monomials(2, 2, DegreeMode::UpTo);
            let raw = build_dictionary(&t, &ds, false).unwrap();
            let norm = build_dictionary(&t, &ds, true).unwrap();
            let back = norm.unscale(&s);
            for i in 0..rows.len() {
                let a: f64 = (0..5).map(|j| norm.matrix[(i, j)] * s[j]).sum();
                let b: f64 = (0..5).map(|j| raw.matrix[(i, j)] * back[j]).sum();
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }

        #[test]
        fn descriptors_reproduce_entries(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..8)) {
            let t = traj(&rows);
            let ds = enumerate_monomials(3, 3, DegreeMode::UpTo);
            let dict = build_dictionary(&t, &ds, false).unwrap();
            for (q, d) in dict.descriptors.iter().enumerate() {
                for (i, r) in rows.iter().enumerate() {
                    prop_assert_eq!(dict.matrix[(i, q)], d.eval(r));
                }
            }
        }
    }
}
