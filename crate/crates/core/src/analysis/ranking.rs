// SPDX-License-Identifier: Apache-2.0

//! Per-dataset rankings of evaluation points by performance and by PUR.

use std::collections::BTreeMap;

use crate::error::{Error, FormatError, Result};
use crate::metrics::{csv_err, csv_writer, pur, rank_by, EvalPoint, PurConfig};
use crate::stats::{kendall, spearman};

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub point: EvalPoint,
    pub pur: f64,
    /// Rank 1 is best; ties share the average rank.
    pub rank_p: f64,
    pub rank_pur: f64,
}

/// Ranks within each dataset, in dataset order then input order.
pub fn rank_points(points: &[EvalPoint], cfg: PurConfig) -> Result<Vec<RankRow>> {
    let mut by_ds: BTreeMap<&str, Vec<&EvalPoint>> = BTreeMap::new();
    for p in points {
        by_ds.entry(p.dataset.as_str()).or_default().push(p);
    }
    let mut rows = Vec::with_capacity(points.len());
    for group in by_ds.values() {
        let purs = group.iter().map(|p| pur(p.performance, p.mui, cfg)).collect::<Result<Vec<_>>>()?;
        let rp = rank_by(&group.iter().map(|p| p.performance).collect::<Vec<_>>(), true);
        let rq = rank_by(&purs, true);
        for (i, p) in group.iter().enumerate() {
            rows.push(RankRow {
                point: (*p).clone(),
                pur: purs[i],
                rank_p: rp[i],
                rank_pur: rq[i],
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAgreement {
    pub dataset: String,
    pub n: usize,
    pub spearman_p: f64,
    pub spearman_pur: f64,
    pub kendall_p: f64,
    pub kendall_pur: f64,
}

/// Reads `label,dataset,ref_rank` rows.
pub fn read_reference_csv<R: std::io::Read>(r: R) -> Result<BTreeMap<(String, String), f64>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format(FormatError::Malformed(format!("reference CSV lacks a {name} column"))))
    };
    let (cl, cd, cr) = (col("label")?, col("dataset")?, col("ref_rank")?);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let rank: f64 = rec
            .get(cr)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format(FormatError::Malformed(format!("bad ref_rank in {rec:?}"))))?;
        out.insert((rec.get(cl).unwrap_or("").to_string(), rec.get(cd).unwrap_or("").to_string()), rank);
    }
    Ok(out)
}

/// Correlation of both rankings with the reference, per dataset with at least two referenced models.
pub fn agreement(rows: &[RankRow], reference: &BTreeMap<(String, String), f64>) -> Result<Vec<ReferenceAgreement>> {
    let mut by_ds: BTreeMap<&str, Vec<(&RankRow, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(&rank) = reference.get(&(r.point.label.clone(), r.point.dataset.clone())) {
            by_ds.entry(r.point.dataset.as_str()).or_default().push((r, rank));
        }
    }
    let mut out = Vec::new();
    for (ds, group) in by_ds.into_iter().filter(|(_, g)| g.len() >= 2) {
        // Re-rank within the referenced subset so both sides share one scale.
        let rp = rank_by(&group.iter().map(|(r, _)| r.point.performance).collect::<Vec<_>>(), true);
        let rq = rank_by(&group.iter().map(|(r, _)| r.pur).collect::<Vec<_>>(), true);
        let rr: Vec<f64> = group.iter().map(|g| g.1).collect();
        out.push(ReferenceAgreement {
            dataset: ds.to_string(),
            n: group.len(),
            spearman_p: spearman(&rp, &rr)?.coefficient,
            spearman_pur: spearman(&rq, &rr)?.coefficient,
            kendall_p: kendall(&rp, &rr)?.coefficient,
            kendall_pur: kendall(&rq, &rr)?.coefficient,
        });
    }
    Ok(out)
}

pub fn write_ranks_csv<W: std::io::Write>(w: W, rows: &[RankRow]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["label", "dataset", "P", "MUI", "PUR", "rank_P", "rank_PUR"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.point.label.clone(),
            r.point.dataset.clone(),
            format!("{:.6}", r.point.performance),
            format!("{:.6}", r.point.mui),
            format!("{:.6}", r.pur),
            format!("{}", r.rank_p),
            format!("{}", r.rank_pur),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_agreement_csv<W: std::io::Write>(w: W, rows: &[ReferenceAgreement]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["dataset", "n", "spearman_P", "spearman_PUR", "kendall_P", "kendall_PUR"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.dataset.clone(),
            r.n.to_string(),
            format!("{:.6}", r.spearman_p),
            format!("{:.6}", r.spearman_pur),
            format!("{:.6}", r.kendall_p),
            format!("{:.6}", r.kendall_pur),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
