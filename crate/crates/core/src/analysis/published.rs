// SPDX-License-Identifier: Apache-2.0

//! Published benchmark tables shipped as data, and their recomputation.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{pur, rank_by, EvalPoint, PurConfig};
use crate::stats::{kendall, population_variance, spearman};

const RANKING: &str = include_str!("../../data/published/ranking.csv");
const RANKING_CORRELATIONS: &str = include_str!("../../data/published/ranking_correlations.csv");
const NEURON_MUI: &str = include_str!("../../data/published/neuron_mui.csv");
const SPECIALIZATION: &str = include_str!("../../data/published/specialization.csv");
const CONTAMINATION: &str = include_str!("../../data/published/contamination.csv");
const CHECKPOINTS: &str = include_str!("../../data/published/checkpoints.csv");

/// Datasets of the ranking table, in column order.
pub const RANKING_DATASETS: [&str; 6] = ["GSM8K", "MATH", "ARC", "HumanEval", "MBPP", "BBH"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RankingCell {
    pub model: String,
    /// Name of the same model in the accuracy/MUI table; empty when it has no MUI there.
    pub mui_model: String,
    pub ref_rank: u32,
    pub dataset: String,
    pub accuracy: f64,
    pub pur: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedCorrelation {
    pub statistic: String,
    pub dataset: String,
    pub accuracy: f64,
    pub pur: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct Row {
    model: String,
    dataset: String,
    accuracy: f64,
    mui: f64,
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Config(format!("bundled table: {e}")))
}

fn points(text: &str) -> Result<Vec<EvalPoint>> {
    Ok(parse::<Row>(text)?
        .into_iter()
        .map(|r| EvalPoint::new(r.model, r.dataset, r.accuracy, r.mui))
        .collect())
}

/// Accuracy/PUR cells and reference ranks of the nine ranked models.
pub fn ranking_table() -> Result<Vec<RankingCell>> {
    parse(RANKING)
}

pub fn ranking_correlations() -> Result<Vec<PublishedCorrelation>> {
    parse(RANKING_CORRELATIONS)
}

/// Neuron-MUI table: accuracy and MUI per model and dataset.
pub fn mui_table() -> Result<Vec<EvalPoint>> {
    points(NEURON_MUI)
}

/// Base models next to their code- and math-specialized variants.
pub fn specialization_table() -> Result<Vec<EvalPoint>> {
    points(SPECIALIZATION)
}

/// Base models next to their contaminated fine-tunes.
pub fn contamination_table() -> Result<Vec<EvalPoint>> {
    points(CONTAMINATION)
}

/// Pre-training checkpoints of one model family.
pub fn checkpoint_table() -> Result<Vec<EvalPoint>> {
    points(CHECKPOINTS)
}

pub fn find_point<'a>(table: &'a [EvalPoint], model: &str, dataset: &str) -> Result<&'a EvalPoint> {
    table
        .iter()
        .find(|p| p.label == model && p.dataset == dataset)
        .ok_or_else(|| Error::InsufficientData(format!("no published point for {model} on {dataset}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurCheck {
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
    /// `None` when the model has no published MUI.
    pub mui: Option<f64>,
    pub published: f64,
    pub recomputed: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Statistic {
    Spearman,
    Kendall,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spearman => "spearman",
            Self::Kendall => "kendall",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCheck {
    pub statistic: Statistic,
    /// A dataset name or `Average`.
    pub dataset: String,
    /// Coefficients ×100.
    pub accuracy: f64,
    pub pur: f64,
    pub published_accuracy: f64,
    pub published_pur: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub pur: Vec<PurCheck>,
    pub correlations: Vec<CorrelationCheck>,
    /// Population variance of the per-dataset coefficients (as fractions, ×100): `(statistic, accuracy, pur)`.
    pub variance: Vec<(Statistic, f64, f64)>,
}

impl Reproduction {
    pub fn max_pur_error(&self) -> f64 {
        self.pur
            .iter()
            .filter_map(|c| c.recomputed.map(|r| (r - c.published).abs()))
            .fold(0.0, f64::max)
    }

    pub fn correlation(&self, statistic: Statistic, dataset: &str) -> Option<&CorrelationCheck> {
        self.correlations.iter().find(|c| c.statistic == statistic && c.dataset == dataset)
    }
}

/// Recomputes PUR from accuracy and MUI, ranks models by accuracy and by PUR,
/// and correlates both rankings with the reference ranking.
///
/// Recomputed PUR is rounded to one decimal before ranking, matching the
/// published precision; models without a published MUI rank by their
/// published PUR.
pub fn reproduce_tables(cfg: PurConfig) -> Result<Reproduction> {
    let cells = ranking_table()?;
    let muis = mui_table()?;
    let published = ranking_correlations()?;
    let mut pur_checks = Vec::with_capacity(cells.len());
    for c in &cells {
        let mui = (!c.mui_model.is_empty())
            .then(|| find_point(&muis, &c.mui_model, &c.dataset).map(|p| p.mui))
            .transpose()?;
        let recomputed = mui.map(|m| pur(c.accuracy, m, cfg)).transpose()?;
        pur_checks.push(PurCheck {
            model: c.model.clone(),
            dataset: c.dataset.clone(),
            accuracy: c.accuracy,
            mui,
            published: c.pur,
            recomputed,
        });
    }

    let lookup = |stat: &str, ds: &str| {
        published
            .iter()
            .find(|p| p.statistic == stat && p.dataset == ds)
            .ok_or_else(|| Error::Config(format!("bundled correlations lack {stat}/{ds}")))
    };
    let mut correlations = Vec::new();
    let mut per_stat: Vec<(Statistic, Vec<f64>, Vec<f64>)> = vec![
        (Statistic::Spearman, Vec::new(), Vec::new()),
        (Statistic::Kendall, Vec::new(), Vec::new()),
    ];
    for ds in RANKING_DATASETS {
        let rows: Vec<(&RankingCell, &PurCheck)> = cells.iter().zip(&pur_checks).filter(|(c, _)| c.dataset == ds).collect();
        let reference: Vec<f64> = rows.iter().map(|(c, _)| f64::from(c.ref_rank)).collect();
        let acc_rank = rank_by(&rows.iter().map(|(c, _)| c.accuracy).collect::<Vec<_>>(), true);
        let pur_values: Vec<f64> = rows
            .iter()
            .map(|(_, p)| p.recomputed.map_or(p.published, |v| (v * 10.0).round() / 10.0))
            .collect();
        let pur_rank = rank_by(&pur_values, true);
        for (stat, accs, purs) in &mut per_stat {
            let f = match stat {
                Statistic::Spearman => spearman,
                Statistic::Kendall => kendall,
            };
            let a = f(&acc_rank, &reference)?.coefficient;
            let p = f(&pur_rank, &reference)?.coefficient;
            accs.push(a);
            purs.push(p);
            let publ = lookup(stat.name(), ds)?;
            correlations.push(CorrelationCheck {
                statistic: *stat,
                dataset: ds.to_string(),
                accuracy: 100.0 * a,
                pur: 100.0 * p,
                published_accuracy: publ.accuracy,
                published_pur: publ.pur,
            });
        }
    }
    let mut variance = Vec::new();
    for (stat, accs, purs) in &per_stat {
        let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
        let publ = lookup(stat.name(), "Average")?;
        correlations.push(CorrelationCheck {
            statistic: *stat,
            dataset: "Average".into(),
            accuracy: mean(accs),
            pur: mean(purs),
            published_accuracy: publ.accuracy,
            published_pur: publ.pur,
        });
        variance.push((*stat, 100.0 * population_variance(accs), 100.0 * population_variance(purs)));
    }
    Ok(Reproduction {
        pur: pur_checks,
        correlations,
        variance,
    })
}

/// Writes `pur.csv` and `correlations.csv` into `dir`.
pub fn write_reproduction(dir: &std::path::Path, rep: &Reproduction) -> Result<()> {
    use crate::metrics::{csv_err, csv_writer};
    use std::fs::File;
    std::fs::create_dir_all(dir)?;
    let opt = |v: Option<f64>, prec: usize| v.map_or_else(String::new, |v| format!("{v:.prec$}"));
    let mut out = csv_writer(File::create(dir.join("pur.csv"))?);
    out.write_record(["model", "dataset", "accuracy", "mui", "published_pur", "recomputed_pur"])
        .map_err(csv_err)?;
    for c in &rep.pur {
        out.write_record([
            c.model.clone(),
            c.dataset.clone(),
            format!("{:.1}", c.accuracy),
            opt(c.mui, 1),
            format!("{:.1}", c.published),
            opt(c.recomputed, 2),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    let mut out = csv_writer(File::create(dir.join("correlations.csv"))?);
    out.write_record(["statistic", "dataset", "accuracy", "pur", "published_accuracy", "published_pur"])
        .map_err(csv_err)?;
    for c in &rep.correlations {
        out.write_record([
            c.statistic.name().to_string(),
            c.dataset.clone(),
            format!("{:.2}", c.accuracy),
            format!("{:.2}", c.pur),
            format!("{:.1}", c.published_accuracy),
            format!("{:.1}", c.published_pur),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
