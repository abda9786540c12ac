// SPDX-License-Identifier: Apache-2.0

//! Trace → score → select → MUI.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;

use crate::attribution::{score_trace, Aggregation, IgConfig, ScoreMatrix, ScoreMode, Scorer};
use crate::error::{Error, Result};
use crate::metrics::{mui, write_points_csv, EvalPoint, PurConfig};
use crate::sae::SaeSnapshot;
use crate::selection::{select_sample, write_keysets_jsonl, KeySet, Scope, SelectionPolicy};
use crate::toy::{evaluate, trace_capture, train_on_suite, CaptureOptions, Decoding, SuiteKind, TaskSuite, ToyConfig, ToyModel, TrainConfig};
use crate::trace::{write_trace, TraceMode, TraceSet, UnitKind};

/// Configuration of the small toy model used by the built-in experiments.
pub fn desk_config(seed: u64) -> ToyConfig {
    ToyConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        ffn_width: 128,
        context: 32,
        seed,
        ..ToyConfig::default()
    }
}

/// Training schedule that brings [`desk_config`] models to high suite accuracy.
pub fn desk_training(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 2000,
        lr: 0.3,
        batch_size: 16,
        seed,
        clip: Some(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSpec {
    pub kind: SuiteKind,
    pub size: usize,
    pub seed: u64,
}

impl SuiteSpec {
    pub fn generate(&self) -> TaskSuite {
        TaskSuite::generate(self.kind, self.size, self.seed)
    }
}

/// How traces are turned into key sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub score_mode: ScoreMode,
    pub aggregation: Aggregation,
    pub policy: SelectionPolicy,
    pub scope: Scope,
    pub ig: IgConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::VocabProjection,
            aggregation: Aggregation::TokenLevel,
            policy: SelectionPolicy::default(),
            scope: Scope::PerTokenUnion,
            ig: IgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ToyConfig,
    /// Suites the model is trained on before tracing; empty leaves it untrained.
    pub train_suites: Vec<SuiteSpec>,
    pub train: TrainConfig,
    /// Suites traced and scored, one EvalPoint each per seed.
    pub eval_suites: Vec<SuiteSpec>,
    pub selection: SelectionConfig,
    pub decoding: Decoding,
    /// Model seeds; each yields its own model.
    pub seeds: Vec<u64>,
    pub sae: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: desk_config(0),
            train_suites: Vec::new(),
            train: desk_training(0),
            eval_suites: vec![SuiteSpec {
                kind: SuiteKind::Copy,
                size: 32,
                seed: 1,
            }],
            selection: SelectionConfig::default(),
            decoding: Decoding::FreeRunning,
            seeds: vec![0],
            sae: None,
            out_dir: None,
        }
    }
}

/// Builds the toy model for `seed`, trained on the merged training suites.
pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<ToyModel<f64>> {
    let model = ToyModel::init(cfg.model.clone().with_seed(seed))?;
    if cfg.train_suites.is_empty() {
        return Ok(model);
    }
    let suites: Vec<TaskSuite> = cfg.train_suites.iter().map(SuiteSpec::generate).collect();
    let merged = TaskSuite::merged("train", &suites);
    let train = TrainConfig {
        seed: cfg.train.seed ^ seed,
        ..cfg.train.clone()
    };
    let (model, report) = train_on_suite(&model, &merged, &train)?;
    info!(
        "seed {seed}: trained {} steps, final loss {:.4}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

/// Per-layer widths indexed by layer id, zero for layers the matrices do not cover.
pub fn layer_widths(matrices: &[ScoreMatrix], traces: &TraceSet) -> Vec<usize> {
    let (layers, width) = match matrices.first() {
        Some(m) => (m.layers.clone(), m.width),
        None => (traces.layers.clone(), traces.width as usize),
    };
    let mut widths = vec![0; layers.iter().max().map_or(0, |&l| l as usize + 1)];
    for l in layers {
        widths[l as usize] = width;
    }
    widths
}

/// Key sets of every sample, plus the unit space they live in.
pub fn keysets_for(traces: &TraceSet, scorer: &Scorer<'_, f64>, sel: &SelectionConfig) -> Result<(Vec<KeySet>, Vec<usize>, UnitKind)> {
    let matrices = score_trace(traces, scorer)?;
    let widths = layer_widths(&matrices, traces);
    let kind = matrices.first().map_or(traces.unit_kind, |m| m.unit_kind);
    let keysets = matrices
        .iter()
        .map(|m| select_sample(m, &sel.policy, sel.scope, sel.aggregation))
        .collect::<Result<Vec<_>>>()?;
    Ok((keysets, widths, kind))
}

/// Scorer for a RAW trace of `model`.
pub fn scorer_for<'a>(
    mode: ScoreMode,
    model: &'a ToyModel<f64>,
    snapshot: &'a crate::ModelSnapshot<f64>,
    sae: Option<&'a SaeSnapshot<f64>>,
    ig: IgConfig,
) -> Result<Scorer<'a, f64>> {
    Ok(match mode {
        ScoreMode::VocabProjection => Scorer::VocabProjection(snapshot),
        ScoreMode::Activation => Scorer::Activation,
        ScoreMode::IntegratedGradient => Scorer::IntegratedGradient(model, ig),
        ScoreMode::SaeFeature => Scorer::SaeFeature(sae.ok_or_else(|| Error::Config("SAE scoring needs an SAE file".into()))?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    pub point: EvalPoint,
    pub traces: TraceSet,
    pub keysets: Vec<KeySet>,
    pub widths: Vec<usize>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub runs: Vec<DatasetRun>,
}

impl PipelineOutput {
    pub fn points(&self) -> Vec<EvalPoint> {
        self.runs.iter().map(|r| r.point.clone()).collect()
    }
}

/// Runs every (seed, evaluation suite) pair; writes traces, key sets and a
/// points CSV when an output directory is configured.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let sae = cfg.sae.as_ref().map(crate::sae::read_sae::<f64>).transpose()?;
    let mut out = PipelineOutput::default();
    for &seed in &cfg.seeds {
        let model = build_model(cfg, seed)?;
        let snapshot = model.snapshot_export()?;
        let scorer = scorer_for(cfg.selection.score_mode, &model, &snapshot, sae.as_ref(), cfg.selection.ig)?;
        for spec in &cfg.eval_suites {
            let suite = spec.generate();
            let opts = CaptureOptions {
                decoding: cfg.decoding,
                mode: TraceMode::Raw,
                residuals: cfg.selection.score_mode == ScoreMode::SaeFeature,
                ..CaptureOptions::default()
            };
            let capture = trace_capture(&model, &suite.items, &opts)?;
            let (keysets, widths, _) = keysets_for(&capture.traces, &scorer, &cfg.selection)?;
            let accuracy = evaluate(&model, &suite)?.accuracy;
            let point = EvalPoint::new(format!("toy-seed{seed}"), suite.name.clone(), accuracy, mui(&keysets, &widths)?);
            out.runs.push(DatasetRun {
                point,
                traces: capture.traces,
                keysets,
                widths,
                skipped: capture.skipped,
            });
        }
    }
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

pub fn write_outputs(dir: &Path, out: &PipelineOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in &out.runs {
        let stem = format!("{}-{}", r.point.label, r.point.dataset);
        write_trace(dir.join(format!("{stem}.muit")), &r.traces)?;
        write_keysets_jsonl(BufWriter::new(File::create(dir.join(format!("{stem}.keysets.jsonl")))?), &r.keysets)?;
    }
    write_points_csv(BufWriter::new(File::create(dir.join("points.csv"))?), &out.points(), PurConfig::default())?;
    Ok(())
}

/// Union of the units of `keysets`.
pub fn union_units(keysets: &[KeySet]) -> BTreeSet<crate::trace::UnitId> {
    keysets.iter().flat_map(|k| k.units.iter().copied()).collect()
}
