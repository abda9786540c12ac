// SPDX-License-Identifier: Apache-2.0

//! Rank correlations, Pearson correlation and the Mann-Whitney U test.

use crate::error::{Error, Result};
use crate::metrics::rank_by;

pub const ALPHA: f64 = 0.05;
/// Largest `n₁ + n₂` for which the U test enumerates its exact null distribution.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResult {
    /// In `[-1, 1]`.
    pub coefficient: f64,
    pub p_value: Option<f64>,
}

impl CorrelationResult {
    fn of(coefficient: f64) -> Self {
        Self {
            coefficient: coefficient.clamp(-1.0, 1.0),
            p_value: None,
        }
    }

    /// Coefficient in the ×100 reporting convention.
    pub fn percent(&self) -> f64 {
        100.0 * self.coefficient
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("correlation needs at least two points".into()));
    }
    Ok(())
}

/// Product-moment correlation, two-pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("zero variance".into()));
    }
    Ok(CorrelationResult::of(sxy / (sxx.sqrt() * syy.sqrt())))
}

/// Pearson correlation of average ranks; `1 − 6Σd²/(n(n²−1))` when tie-free.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    let rx = rank_by(x, false);
    let ry = rank_by(y, false);
    let tie_free = |r: &[f64]| r.iter().all(|v| v.fract() == 0.0);
    if tie_free(&rx) && tie_free(&ry) {
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        return Ok(CorrelationResult::of(1.0 - 6.0 * d2 / (n * (n * n - 1.0))));
    }
    pearson(&rx, &ry)
}

/// Kendall tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let sy = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            match (sx, sy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if sx == sy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + tie_x) * (concordant + discordant + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Numeric("kendall undefined for constant input".into()));
    }
    Ok(CorrelationResult::of((concordant - discordant) as f64 / denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UTestResult {
    /// U of the first group: pairs `(a, b)` with `a > b`, ties counting one half.
    pub u: f64,
    pub z: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: PMethod,
}

impl UTestResult {
    pub fn verdict(&self) -> &'static str {
        significance_verdict(self.p_value)
    }
}

pub fn significance_verdict(p: f64) -> &'static str {
    if p > ALPHA {
        "no significant difference"
    } else {
        "significant difference"
    }
}

fn u_from_ranks(ranks: &[f64], n1: usize) -> f64 {
    let r1: f64 = ranks[..n1].iter().sum();
    r1 - (n1 * (n1 + 1)) as f64 / 2.0
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("Mann-Whitney needs two non-empty groups".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite observation".into()));
    }
    Ok(rank_by(&pooled, false))
}

/// Tie-corrected normal approximation with a 0.5 continuity correction: `(z, p)`.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let ranks = check_groups(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let u = u_from_ranks(&ranks, a.len());
    let mean = n1 * n2 / 2.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let z = if u < mean { -z } else { z };
    Ok((z, libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)))
}

/// Two-sided exact p by enumerating every assignment of the pooled ranks to
/// the first group: `min(1, 2 · min(P(U ≤ u), P(U ≥ u)))`.
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    let ranks = check_groups(a, b)?;
    let n = ranks.len();
    if n > 20 {
        return Err(Error::Config(format!("exact enumeration over {n} observations is too large")));
    }
    let n1 = a.len();
    let u_obs = u_from_ranks(&ranks, n1);
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let r1: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        let u = r1 - offset;
        total += 1;
        if u <= u_obs + 1e-9 {
            le += 1;
        }
        if u >= u_obs - 1e-9 {
            ge += 1;
        }
    }
    Ok((2.0 * le.min(ge) as f64 / total as f64).min(1.0))
}

/// U test; exact p when `n₁ + n₂ ≤ 12`, normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTestResult> {
    let ranks = check_groups(a, b)?;
    let u = u_from_ranks(&ranks, a.len());
    let (z, p_normal) = mann_whitney_normal(a, b)?;
    let (p_value, method) = if a.len() + b.len() <= EXACT_LIMIT {
        (mann_whitney_exact(a, b)?, PMethod::Exact)
    } else {
        (p_normal, PMethod::Normal)
    };
    Ok(UTestResult {
        u,
        z,
        p_value,
        n1: a.len(),
        n2: b.len(),
        method,
    })
}

/// Population variance (divisor n).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_extremes() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &x).unwrap().percent(), 100.0);
        assert_eq!(spearman(&x, &rev).unwrap().percent(), -100.0);
        assert_eq!(kendall(&x, &x).unwrap().percent(), 100.0);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().coefficient - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().coefficient + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 9]).is_err());
        assert!(spearman(&x, &x[..3]).is_err());
    }

    #[test]
    fn one_adjacent_swap_of_nine() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut y = x.clone();
        y.swap(3, 4);
        let tau = kendall(&x, &y).unwrap().coefficient;
        assert!((tau - (1.0 - 2.0 / 36.0)).abs() < 1e-12);
        let rho = spearman(&x, &y).unwrap().coefficient;
        assert!((rho - (1.0 - 12.0 / 720.0)).abs() < 1e-12);
    }

    #[test]
    fn tied_spearman_uses_average_ranks() {
        let x = [1.0, 2.0, 2.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let expect = pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().coefficient;
        assert_eq!(spearman(&x, &y).unwrap().coefficient, expect);
    }

    #[test]
    fn u_test_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        let a = [1.0, 2.0, 3.0, 4.0];
        let same = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(same.u, 8.0);
        assert_eq!(same.p_value, 1.0);
        assert_eq!(same.verdict(), "no significant difference");
        assert!(mann_whitney_u(&[], &a).is_err());
    }

    #[test]
    fn u_statistics_sum_to_product() {
        let a = [0.3, 1.2, 1.2, 5.0, 2.2];
        let b = [1.2, 0.1, 7.0];
        let ua = mann_whitney_u(&a, &b).unwrap().u;
        let ub = mann_whitney_u(&b, &a).unwrap().u;
        assert_eq!(ua + ub, 15.0);
    }

    #[test]
    fn large_groups_use_normal_approximation() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = (5..15).map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, PMethod::Normal);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }
}
