// SPDX-License-Identifier: Apache-2.0

//! MUI, PUR, the logarithmic utility law and optimization directions.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use crate::error::{Error, FormatError, Result};
use crate::selection::KeySet;
use crate::trace::UnitId;

/// Percentage of units in the union of `keysets`, out of `Σ layer_widths`.
pub fn mui(keysets: &[KeySet], layer_widths: &[usize]) -> Result<f64> {
    let total: usize = layer_widths.iter().sum();
    if total == 0 {
        return Err(Error::Dimension("unit space is empty".into()));
    }
    let mut union: BTreeSet<UnitId> = BTreeSet::new();
    for ks in keysets {
        for u in &ks.units {
            let width = layer_widths.get(u.layer as usize).copied().unwrap_or(0);
            if u.index as usize >= width {
                return Err(Error::Dimension(format!("unit {u} outside the unit space")));
            }
            union.insert(*u);
        }
    }
    Ok(100.0 * union.len() as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurConfig {
    pub alpha: f64,
}

impl Default for PurConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// `P / MUI^α`.
pub fn pur(performance: f64, mui: f64, cfg: PurConfig) -> Result<f64> {
    if cfg.alpha < 0.0 || !cfg.alpha.is_finite() {
        return Err(Error::Config(format!("PUR exponent {} must be a finite non-negative number", cfg.alpha)));
    }
    if mui <= 0.0 || !mui.is_finite() {
        return Err(Error::InsufficientData(format!("PUR undefined for MUI {mui}")));
    }
    Ok(performance / mui.powf(cfg.alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub label: String,
    pub dataset: String,
    /// Accuracy in percent.
    pub performance: f64,
    /// MUI in percent.
    pub mui: f64,
}

impl EvalPoint {
    pub fn new(label: impl Into<String>, dataset: impl Into<String>, performance: f64, mui: f64) -> Self {
        Self {
            label: label.into(),
            dataset: dataset.into(),
            performance,
            mui,
        }
    }
}

/// `MUI = A ln P + B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

impl UtilityFit {
    pub fn extrapolate(&self, performance: f64) -> f64 {
        extrapolate(self, performance)
    }
}

/// Ordinary least squares of MUI on `ln P`.
pub fn fit_utility(points: &[EvalPoint]) -> Result<UtilityFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!("utility fit needs two points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.performance > 0.0) || !p.mui.is_finite()) {
        return Err(Error::InsufficientData(format!("point {} has P = {} and MUI = {}", p.label, p.performance, p.mui)));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.performance.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mui).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= f64::EPSILON * n * mx.abs().max(1.0) {
        return Err(Error::Numeric("singular utility fit: all P equal".into()));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - (a * x + b)).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(UtilityFit {
        a,
        b,
        r_squared,
        n_points: points.len(),
    })
}

pub fn extrapolate(fit: &UtilityFit, performance: f64) -> f64 {
    fit.a * performance.ln() + fit.b
}

/// One point per label holding its mean P and mean MUI, in order of first
/// appearance, with dataset `pooled`.
pub fn pool_by_model(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let mut order: Vec<&str> = Vec::new();
    for p in points {
        if !order.contains(&p.label.as_str()) {
            order.push(&p.label);
        }
    }
    order
        .into_iter()
        .map(|label| {
            let group: Vec<&EvalPoint> = points.iter().filter(|p| p.label == label).collect();
            let n = group.len() as f64;
            EvalPoint::new(
                label,
                "pooled",
                group.iter().map(|p| p.performance).sum::<f64>() / n,
                group.iter().map(|p| p.mui).sum::<f64>() / n,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DirectionKind {
    /// P up, MUI down.
    Evolving,
    /// P up, MUI up.
    Accumulating,
    /// P down, MUI up.
    Coarsening,
    /// P down, MUI down.
    Collapsing,
    Stationary,
}

impl fmt::Display for DirectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Evolving => "Evolving",
            Self::Accumulating => "Accumulating",
            Self::Coarsening => "Coarsening",
            Self::Collapsing => "Collapsing",
            Self::Stationary => "Stationary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub kind: DirectionKind,
    pub delta_p: f64,
    pub delta_mui: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionEps {
    pub performance: f64,
    pub mui: f64,
}

impl Default for DirectionEps {
    fn default() -> Self {
        Self { performance: 0.5, mui: 0.05 }
    }
}

/// Quadrant of `(ΔP, ΔMUI)`. Any delta within its epsilon yields `Stationary`.
pub fn classify_direction(before: &EvalPoint, after: &EvalPoint, eps: DirectionEps) -> Result<Direction> {
    if before.dataset != after.dataset {
        return Err(Error::Config(format!("dataset mismatch: {} vs {}", before.dataset, after.dataset)));
    }
    let delta_p = after.performance - before.performance;
    let delta_mui = after.mui - before.mui;
    let kind = if delta_p.abs() <= eps.performance || delta_mui.abs() <= eps.mui {
        DirectionKind::Stationary
    } else {
        match (delta_p > 0.0, delta_mui > 0.0) {
            (true, false) => DirectionKind::Evolving,
            (true, true) => DirectionKind::Accumulating,
            (false, true) => DirectionKind::Coarsening,
            (false, false) => DirectionKind::Collapsing,
        }
    };
    Ok(Direction { kind, delta_p, delta_mui })
}

/// Rank 1 is the best score; tied scores share the mean of their ranks.
pub fn rank_by(scores: &[f64], descending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        let c = scores[i].total_cmp(&scores[j]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(FormatError::Malformed(format!("CSV: {other:?}"))),
    }
}

/// `label,dataset,P,MUI,PUR` rows; PUR is empty where MUI is zero.
pub fn write_points_csv<W: Write>(w: W, points: &[EvalPoint], cfg: PurConfig) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["label", "dataset", "P", "MUI", "PUR"]).map_err(csv_err)?;
    for p in points {
        let pur = pur(p.performance, p.mui, cfg).map(|v| format!("{v:.6}")).unwrap_or_default();
        out.write_record([
            p.label.clone(),
            p.dataset.clone(),
            format!("{:.6}", p.performance),
            format!("{:.6}", p.mui),
            pur,
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `A,B,R2,n,MUI@100`.
pub fn write_fit_csv<W: Write>(w: W, fit: &UtilityFit) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["A", "B", "R2", "n", "MUI@100"]).map_err(csv_err)?;
    out.write_record([
        format!("{:.6}", fit.a),
        format!("{:.6}", fit.b),
        format!("{:.6}", fit.r_squared),
        fit.n_points.to_string(),
        format!("{:.6}", fit.extrapolate(100.0)),
    ])
    .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

/// `dataset,A,B,R2,n,MUI@100`, one row per fit.
pub fn write_dataset_fits_csv<W: Write>(w: W, fits: &[(String, UtilityFit)]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["dataset", "A", "B", "R2", "n", "MUI@100"]).map_err(csv_err)?;
    for (dataset, fit) in fits {
        out.write_record([
            dataset.clone(),
            format!("{:.6}", fit.a),
            format!("{:.6}", fit.b),
            format!("{:.6}", fit.r_squared),
            fit.n_points.to_string(),
            format!("{:.6}", fit.extrapolate(100.0)),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `before,after,dataset,dP,dMUI,direction`.
pub fn write_directions_csv<W: Write>(w: W, rows: &[(EvalPoint, EvalPoint, Direction)]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["before", "after", "dataset", "dP", "dMUI", "direction"]).map_err(csv_err)?;
    for (a, b, d) in rows {
        out.write_record([
            a.label.clone(),
            b.label.clone(),
            a.dataset.clone(),
            format!("{:.6}", d.delta_p),
            format!("{:.6}", d.delta_mui),
            d.kind.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `label,dataset,P,MUI` rows (extra columns ignored) from a CSV with a header.
pub fn read_points_csv<R: std::io::Read>(r: R) -> Result<Vec<EvalPoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(FormatError::Malformed(format!("points CSV lacks a {name} column"))))
    };
    let (cl, cd, cp, cm) = (col("label")?, col("dataset")?, col("P")?, col("MUI")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(FormatError::Malformed(format!("points CSV row {}: bad number in column {c}", line + 2))))
        };
        out.push(EvalPoint::new(rec.get(cl).unwrap_or(""), rec.get(cd).unwrap_or(""), num(cp)?, num(cm)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{Scope, SelectionPolicy};

    fn ks(units: &[(u32, u32)]) -> KeySet {
        KeySet {
            sample_id: "s".into(),
            units: units.iter().map(|&(l, i)| UnitId::new(l, i)).collect(),
            policy: SelectionPolicy::default(),
            scope: Scope::PerTokenUnion,
        }
    }

    #[test]
    fn mui_examples() {
        assert_eq!(mui(&[], &[4, 4]).unwrap(), 0.0);
        let v = mui(&[ks(&[(0, 1), (1, 2)]), ks(&[(0, 1), (1, 3)])], &[4, 4]).unwrap();
        assert_eq!(v, 37.5);
        assert!(mui(&[ks(&[(2, 0)])], &[4, 4]).is_err());
    }

    #[test]
    fn pur_examples() {
        let cfg = PurConfig::default();
        assert!((pur(11.9, 6.0, cfg).unwrap() - 4.858).abs() < 1e-3);
        assert!((pur(84.5, 2.3, cfg).unwrap() - 55.72).abs() < 1e-2);
        assert_eq!(pur(42.0, 7.0, PurConfig { alpha: 0.0 }).unwrap(), 42.0);
        assert!(pur(1.0, 0.0, cfg).is_err());
    }

    #[test]
    fn two_point_fit_is_exact() {
        let pts = [
            EvalPoint::new("a", "d", 1.0, 26.049),
            EvalPoint::new("b", "d", std::f64::consts::E, 22.515),
        ];
        let fit = fit_utility(&pts).unwrap();
        assert!((fit.a + 3.534).abs() < 1e-12);
        assert!((fit.b - 26.049).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(extrapolate(&fit, 1.0), fit.b);
        assert!((extrapolate(&fit, std::f64::consts::E) - (fit.a + fit.b)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fit_is_rejected() {
        let pts = [EvalPoint::new("a", "d", 5.0, 1.0), EvalPoint::new("b", "d", 5.0, 2.0)];
        assert!(matches!(fit_utility(&pts), Err(Error::Numeric(_))));
        assert!(fit_utility(&pts[..1]).is_err());
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by(&[3.0, 1.0, 2.0], true), vec![1.0, 3.0, 2.0]);
        assert_eq!(rank_by(&[2.0, 2.0], true), vec![1.5, 1.5]);
        assert_eq!(rank_by(&[3.0, 1.0, 2.0], false), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn direction_quadrants_and_stationary() {
        let p = |perf, m| EvalPoint::new("x", "d", perf, m);
        let eps = DirectionEps::default();
        let k = |a: EvalPoint, b: EvalPoint| classify_direction(&a, &b, eps).unwrap().kind;
        assert_eq!(k(p(10.0, 5.0), p(20.0, 4.0)), DirectionKind::Evolving);
        assert_eq!(k(p(10.0, 5.0), p(20.0, 6.0)), DirectionKind::Accumulating);
        assert_eq!(k(p(20.0, 5.0), p(10.0, 6.0)), DirectionKind::Coarsening);
        assert_eq!(k(p(20.0, 5.0), p(10.0, 4.0)), DirectionKind::Collapsing);
        assert_eq!(k(p(10.0, 5.0), p(10.2, 5.01)), DirectionKind::Stationary);
        assert_eq!(k(p(10.0, 5.0), p(10.2, 9.0)), DirectionKind::Stationary);
        assert!(classify_direction(&p(1.0, 1.0), &EvalPoint::new("y", "other", 1.0, 1.0), eps).is_err());
    }

    #[test]
    fn csv_quoting() {
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &[EvalPoint::new("a,b", "q\"x", 50.0, 25.0)], PurConfig::default()).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "label,dataset,P,MUI,PUR\r\n\"a,b\",\"q\"\"x\",50.000000,25.000000,10.000000\r\n");
        let back = read_points_csv(s.as_bytes()).unwrap();
        assert_eq!(back, vec![EvalPoint::new("a,b", "q\"x", 50.0, 25.0)]);
    }
}
