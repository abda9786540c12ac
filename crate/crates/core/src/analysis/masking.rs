// SPDX-License-Identifier: Apache-2.0

//! Masking interventions: zero selected FFN units and measure accuracy.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pipeline::{keysets_for, union_units, SelectionConfig};
use crate::attribution::{Scorer, ScoreMode};
use crate::error::{Error, Result};
use crate::metrics::{csv_err, csv_writer};
use crate::selection::SelectionPolicy;
use crate::stats::population_variance;
use crate::toy::{evaluate, trace_capture, CaptureOptions, MaskSpec, TaskSuite, ToyModel};
use crate::trace::UnitId;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSweepSpec {
    /// Per-layer, per-token key counts, ascending; 0 means no mask.
    pub k_grid: Vec<usize>,
    pub selection_suite: TaskSuite,
    pub eval_suites: Vec<TaskSuite>,
    pub random_reps: usize,
    pub seed: u64,
    /// Scoring, scope and aggregation; the policy is replaced by `LayerTopK(k)`.
    pub selection: SelectionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSweepRow {
    pub k: usize,
    pub eval_suite: String,
    pub n_masked: usize,
    pub baseline: f64,
    pub selected: f64,
    pub random_mean: f64,
    pub random_variance: f64,
}

impl MaskSweepRow {
    pub fn selected_degradation(&self) -> f64 {
        self.baseline - self.selected
    }

    pub fn random_degradation(&self) -> f64 {
        self.baseline - self.random_mean
    }
}

/// Union over the suite's samples of the units `policy` selects.
pub fn select_mask(model: &ToyModel<f64>, suite: &TaskSuite, policy: SelectionPolicy, sel: &SelectionConfig) -> Result<MaskSpec> {
    let capture = trace_capture(model, &suite.items, &CaptureOptions::default())?;
    let snapshot = model.snapshot_export()?;
    let scorer = match sel.score_mode {
        ScoreMode::VocabProjection => Scorer::VocabProjection(&snapshot),
        ScoreMode::Activation => Scorer::Activation,
        ScoreMode::IntegratedGradient => Scorer::IntegratedGradient(model, sel.ig),
        ScoreMode::SaeFeature => return Err(Error::Config("masking acts on neurons, not SAE features".into())),
    };
    let sel = SelectionConfig { policy, ..sel.clone() };
    let (keysets, _, _) = keysets_for(&capture.traces, &scorer, &sel)?;
    Ok(MaskSpec::new(union_units(&keysets)))
}

/// `count` distinct units drawn uniformly from all `n_layers × width` units.
pub fn random_mask(n_layers: usize, width: usize, count: usize, rng: &mut ChaCha8Rng) -> MaskSpec {
    let total = n_layers * width;
    MaskSpec::new(
        sample(rng, total, count.min(total))
            .into_iter()
            .map(|i| UnitId::new((i / width) as u32, (i % width) as u32)),
    )
}

pub fn mask_sweep(spec: &MaskSweepSpec, model: &ToyModel<f64>) -> Result<Vec<MaskSweepRow>> {
    if spec.k_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("k grid must be ascending".into()));
    }
    let (n_layers, width) = (model.config.n_layers, model.config.ffn_width);
    let baselines = spec
        .eval_suites
        .iter()
        .map(|s| evaluate(model, s).map(|r| r.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &k in &spec.k_grid {
        let k = if k > width {
            warn!("k = {k} exceeds the layer width {width}; clipped");
            width
        } else {
            k
        };
        let mask = if k == 0 {
            MaskSpec::default()
        } else {
            select_mask(model, &spec.selection_suite, SelectionPolicy::LayerTopK { k }, &spec.selection)?
        };
        let masked = model.apply_mask(&mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let random_models = (0..spec.random_reps)
            .map(|_| model.apply_mask(&random_mask(n_layers, width, mask.len(), &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        for (suite, &baseline) in spec.eval_suites.iter().zip(&baselines) {
            let selected = evaluate(&masked, suite)?.accuracy;
            let random: Vec<f64> = random_models
                .iter()
                .map(|m| evaluate(m, suite).map(|r| r.accuracy))
                .collect::<Result<_>>()?;
            let random_mean = if random.is_empty() {
                baseline
            } else {
                random.iter().sum::<f64>() / random.len() as f64
            };
            rows.push(MaskSweepRow {
                k,
                eval_suite: suite.name.clone(),
                n_masked: mask.len(),
                baseline,
                selected,
                random_mean,
                random_variance: population_variance(&random),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[MaskSweepRow]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["k", "eval_suite", "n_masked", "baseline", "selected", "random_mean", "random_variance"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.k.to_string(),
            r.eval_suite.clone(),
            r.n_masked.to_string(),
            format!("{:.4}", r.baseline),
            format!("{:.4}", r.selected),
            format!("{:.4}", r.random_mean),
            format!("{:.4}", r.random_variance),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
