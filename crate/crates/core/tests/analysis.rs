// SPDX-License-Identifier: Apache-2.0

use mui_core::analysis::diversity::sample_keys;
use mui_core::analysis::masking::{mask_sweep, MaskSweepSpec};
use mui_core::analysis::pipeline::{run_pipeline, union_units, ExperimentConfig, SelectionConfig, SuiteSpec};
use mui_core::analysis::report::report;
use mui_core::metrics::mui;
use mui_core::toy::{SuiteKind, TaskSuite, ToyModel};

fn short_copy_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train_suites = vec![SuiteSpec {
        kind: SuiteKind::Copy,
        size: 300,
        seed: 5,
    }];
    cfg.train.steps = 300;
    cfg
}

#[test]
fn pipeline_mui_is_a_proper_fraction_and_outputs_are_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let mut cfg = short_copy_experiment();
        cfg.out_dir = Some(dir.path().to_path_buf());
        outputs.push(run_pipeline(&cfg).unwrap());
    }
    let point = &outputs[0].runs[0].point;
    assert!(point.mui > 0.0 && point.mui < 100.0, "MUI {}", point.mui);
    assert_eq!(outputs[0], outputs[1]);
    for name in ["points.csv", "toy-seed0-copy.muit", "toy-seed0-copy.keysets.jsonl"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let out = report(dirs[0].path()).unwrap();
    let svg = std::fs::read_to_string(out.svg).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let points = doc.descendants().find(|n| n.attribute("id") == Some("points")).unwrap();
    assert_eq!(points.children().filter(|n| n.is_element()).count(), 1);
    assert!(out.fit.is_none(), "a single point cannot be fitted");
}

#[test]
fn pooled_suites_use_at_least_as_much_as_either() {
    let mut cfg = ExperimentConfig::default();
    cfg.eval_suites = [SuiteKind::Copy, SuiteKind::ModAdd]
        .into_iter()
        .map(|kind| SuiteSpec { kind, size: 16, seed: 3 })
        .collect();
    let out = run_pipeline(&cfg).unwrap();
    let widths = &out.runs[0].widths;
    let pooled: Vec<_> = out.runs.iter().flat_map(|r| r.keysets.clone()).collect();
    let pooled_mui = mui(&pooled, widths).unwrap();
    let max = out.runs.iter().map(|r| r.point.mui).fold(0.0, f64::max);
    let sum: f64 = out.runs.iter().map(|r| r.point.mui).sum();
    assert!(pooled_mui >= max && pooled_mui <= sum + 1e-12, "{pooled_mui} vs {max} / {sum}");
    let total: usize = widths.iter().sum();
    assert_eq!(pooled_mui, 100.0 * union_units(&pooled).len() as f64 / total as f64);
}

#[test]
fn empty_mask_leaves_accuracy_unchanged() {
    let model = ToyModel::<f64>::init(mui_core::analysis::pipeline::desk_config(1)).unwrap();
    let spec = MaskSweepSpec {
        k_grid: vec![0, 2],
        selection_suite: TaskSuite::generate(SuiteKind::Copy, 4, 1),
        eval_suites: vec![TaskSuite::generate(SuiteKind::Copy, 8, 2)],
        random_reps: 2,
        seed: 0,
        selection: SelectionConfig::default(),
    };
    let rows = mask_sweep(&spec, &model).unwrap();
    assert_eq!(rows[0].k, 0);
    assert_eq!(rows[0].n_masked, 0);
    assert_eq!(rows[0].selected, rows[0].baseline);
    assert_eq!(rows[0].random_mean, rows[0].baseline);
    assert!(rows[1].n_masked >= 2 && rows[1].n_masked <= 2 * 2 * 4 * 8);

    let descending = MaskSweepSpec { k_grid: vec![2, 1], ..spec };
    assert!(mask_sweep(&descending, &model).is_err());
}

#[test]
fn sample_keys_rejects_mismatched_lengths() {
    let out = run_pipeline(&ExperimentConfig::default()).unwrap();
    let run = &out.runs[0];
    assert_eq!(sample_keys(&run.traces, &run.keysets).unwrap().len(), run.keysets.len());
    assert!(sample_keys(&run.traces, &run.keysets[1..]).is_err());
}
