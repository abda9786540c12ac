// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mui_core::analysis::diversity::{
    correctness_ablation, diversity_curves, sample_keys, write_comparisons_csv, write_curves_csv, DiversitySpec, SampleKeys,
    Stratum, TagGroup,
};
use mui_core::analysis::masking::{mask_sweep, write_sweep_csv, MaskSweepSpec};
use mui_core::analysis::published::{reproduce_tables, write_reproduction, Statistic};
use mui_core::analysis::pipeline::{
    build_model, desk_config, desk_training, keysets_for, run_pipeline, scorer_for, write_outputs, ExperimentConfig,
    SelectionConfig, SuiteSpec,
};
use mui_core::analysis::ranking::{agreement, rank_points, read_reference_csv, write_agreement_csv, write_ranks_csv};
use mui_core::analysis::report::report;
use mui_core::attribution::{Aggregation, IgConfig, ScoreMode, Scorer};
use mui_core::metrics::{
    classify_direction, fit_utility, mui, pool_by_model, pur, read_points_csv, write_dataset_fits_csv, write_directions_csv,
    write_fit_csv, write_points_csv, DirectionEps, EvalPoint, PurConfig, UtilityFit,
};
use mui_core::sae::read_sae;
use mui_core::selection::{write_keysets_jsonl, KeySet, Scope, SelectionPolicy};
use mui_core::snapshot::{read_snapshot, write_snapshot, Activation};
use mui_core::toy::{trace_capture, write_suite_jsonl, CaptureOptions, Decoding, SuiteKind, TaskSuite, ToyConfig};
use mui_core::trace::{read_trace, write_trace, TraceMode, TraceSet};
use mui_core::{Error, Result, SaeF64, SnapshotF64, ToyModelF64};

use crate::settings::Settings;
use crate::{Cli, Command, DirectionArgs, FitArgs, Global, ModelArg, MuiArgs, PurArgs, RankArgs, TraceArgs, TraceInput};

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.global.config.as_deref())?;
    let ctx = Context {
        exp: experiment(&settings, &cli.global)?,
        settings,
        global: cli.global,
    };
    match cli.command {
        Command::Trace(a) => trace(&ctx, &a),
        Command::Score(a) => score(&ctx, &a),
        Command::Mui(a) => mui_cmd(&ctx, &a),
        Command::Pur(a) => pur_cmd(&ctx, &a),
        Command::Fit(a) => fit_cmd(&ctx, &a),
        Command::Rank(a) => rank_cmd(&ctx, &a),
        Command::Direction(a) => direction_cmd(&ctx, &a),
        Command::Mask(a) => mask_cmd(&ctx, &a),
        Command::Diversity(a) => diversity_cmd(&ctx, &a),
        Command::Ablation(a) => ablation_cmd(&ctx, &a),
        Command::Reproduce => reproduce_cmd(&ctx),
        Command::Report(a) => {
            let dir = a.dir.unwrap_or_else(|| ctx.global.out.clone());
            let out = report(&dir)?;
            println!("{}", out.svg.display());
            Ok(())
        }
    }
}

struct Context {
    settings: Settings,
    global: Global,
    exp: ExperimentConfig,
}

impl Context {
    fn out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.global.out)?;
        Ok(&self.global.out)
    }

    fn out_file(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out()?.join(name))?))
    }

    fn first_seed(&self) -> u64 {
        self.exp.seeds[0]
    }

    /// The `--model` snapshot, or a model built from the configuration.
    fn model(&self, arg: &ModelArg) -> Result<ToyModelF64> {
        match &arg.model {
            Some(path) => ToyModelF64::from_snapshot(&read_snapshot::<f64>(path)?),
            None => build_model(&self.exp, self.first_seed()),
        }
    }
}

fn suites_of(settings: &Settings, section: &str, default: &[&str], size: usize, seed: u64) -> Result<Vec<SuiteSpec>> {
    let default: Vec<String> = default.iter().map(|s| s.to_string()).collect();
    settings
        .list::<String>(section, "suites", &default)?
        .iter()
        .enumerate()
        .map(|(i, name)| {
            Ok(SuiteSpec {
                kind: SuiteKind::parse(name)?,
                size,
                seed: seed + i as u64,
            })
        })
        .collect()
}

fn parse_suite_list(list: &str, size: usize, seed: u64) -> Result<Vec<SuiteSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, n)| {
            Ok(SuiteSpec {
                kind: SuiteKind::parse(n)?,
                size,
                seed: seed + i as u64,
            })
        })
        .collect()
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "silu" => Ok(Activation::Silu),
        "gelu" => Ok(Activation::Gelu),
        _ => Err(Error::Config(format!("unknown activation {s:?}"))),
    }
}

fn parse_decoding(s: &str) -> Result<Decoding> {
    match s {
        "free" => Ok(Decoding::FreeRunning),
        "forced" => Ok(Decoding::ForcedReference),
        _ => Err(Error::Config(format!("unknown decoding {s:?} (free | forced)"))),
    }
}

/// Defaults, then INI/env settings, then global flags.
fn experiment(s: &Settings, g: &Global) -> Result<ExperimentConfig> {
    let base = desk_config(0);
    let model = ToyConfig {
        n_layers: s.get("model", "n_layers", base.n_layers)?,
        d_model: s.get("model", "d_model", base.d_model)?,
        n_heads: s.get("model", "n_heads", base.n_heads)?,
        ffn_width: s.get("model", "ffn_width", base.ffn_width)?,
        context: s.get("model", "context", base.context)?,
        activation: match s.raw("model", "activation") {
            Some(a) => parse_activation(a)?,
            None => base.activation,
        },
        tied_embeddings: s.get("model", "tied_embeddings", base.tied_embeddings)?,
        ..base
    };
    model.validate()?;
    let t = desk_training(0);
    let train = mui_core::toy::TrainConfig {
        steps: s.get("train", "steps", t.steps)?,
        lr: s.get("train", "lr", t.lr)?,
        batch_size: s.get("train", "batch_size", t.batch_size)?,
        seed: s.get("train", "seed", t.seed)?,
        clip: match s.get("train", "clip", t.clip.unwrap_or(0.0))? {
            c if c > 0.0 => Some(c),
            _ => None,
        },
    };
    let train_size = s.get("train", "size", 1000usize)?;
    let eval_size = s.get("eval", "size", 32usize)?;
    let eval_seed = s.get("eval", "seed", 1000u64)?;
    let mut sel = SelectionConfig {
        ig: IgConfig {
            m: s.get("selection", "ig_steps", IgConfig::default().m)?,
            ..IgConfig::default()
        },
        ..SelectionConfig::default()
    };
    let pick = |flag: &Option<String>, key: &str| flag.clone().or_else(|| s.raw("selection", key).map(str::to_string));
    if let Some(v) = pick(&g.score_mode, "score_mode") {
        sel.score_mode = ScoreMode::parse(&v)?;
    }
    if let Some(v) = pick(&g.aggregate, "aggregate") {
        sel.aggregation = Aggregation::parse(&v)?;
    }
    if let Some(v) = pick(&g.policy, "policy") {
        sel.policy = SelectionPolicy::parse(&v)?;
    }
    if let Some(v) = pick(&g.scope, "scope") {
        sel.scope = Scope::parse(&v)?;
    }
    let seeds = match g.seed {
        Some(seed) => vec![seed],
        None => s.list("experiment", "seeds", &[0u64])?,
    };
    if seeds.is_empty() {
        return Err(Error::Config("[experiment] seeds is empty".into()));
    }
    let sae = g.sae.clone().or_else(|| s.raw("selection", "sae").map(PathBuf::from));
    if let Some(p) = &sae {
        if !p.exists() {
            return Err(Error::Config(format!("SAE file {} does not exist", p.display())));
        }
    }
    Ok(ExperimentConfig {
        model,
        train_suites: suites_of(s, "train", &[], train_size, 10)?,
        train,
        eval_suites: suites_of(s, "eval", &["copy"], eval_size, eval_seed)?,
        selection: sel,
        decoding: match s.raw("eval", "decoding") {
            Some(d) => parse_decoding(d)?,
            None => Decoding::FreeRunning,
        },
        seeds,
        sae,
        out_dir: None,
    })
}

fn trace(ctx: &Context, a: &TraceArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let out = ctx.out()?;
    let specs = match &a.suites {
        Some(list) => parse_suite_list(list, a.size.unwrap_or(ctx.exp.eval_suites[0].size), ctx.exp.eval_suites[0].seed)?,
        None => ctx
            .exp
            .eval_suites
            .iter()
            .map(|s| SuiteSpec {
                size: a.size.unwrap_or(s.size),
                ..*s
            })
            .collect(),
    };
    let opts = CaptureOptions {
        decoding: match &a.decoding {
            Some(d) => parse_decoding(d)?,
            None => ctx.exp.decoding,
        },
        mode: match a.mode.as_str() {
            "raw" => TraceMode::Raw,
            "scored" => TraceMode::Scored,
            m => return Err(Error::Config(format!("unknown trace mode {m:?} (raw | scored)"))),
        },
        residuals: a.residuals,
        ..CaptureOptions::default()
    };
    write_snapshot(out.join("model.musm"), &model.snapshot_export()?)?;
    for spec in specs {
        let suite = spec.generate();
        write_suite_jsonl(out.join(format!("{}.jsonl", suite.name)), &suite)?;
        let capture = trace_capture(&model, &suite.items, &opts)?;
        if !capture.skipped.is_empty() {
            warn!("{}: {} sample(s) skipped", suite.name, capture.skipped.len());
        }
        let path = out.join(format!("{}.muit", suite.name));
        write_trace(&path, &capture.traces)?;
        println!("{}\t{} samples\t{} skipped", path.display(), capture.traces.samples.len(), capture.skipped.len());
    }
    Ok(())
}

struct Loaded {
    snapshot: Option<SnapshotF64>,
    model: Option<ToyModelF64>,
    sae: Option<SaeF64>,
}

impl Loaded {
    fn new(ctx: &Context, snapshot: Option<&Path>) -> Result<Self> {
        let snapshot = snapshot.map(read_snapshot::<f64>).transpose()?;
        let model = match &snapshot {
            Some(s) if s.extension(b"TOYW").is_some() => Some(ToyModelF64::from_snapshot(s)?),
            _ => None,
        };
        let sae = ctx.exp.sae.as_ref().map(read_sae::<f64>).transpose()?;
        Ok(Self { snapshot, model, sae })
    }

    fn scorer(&self, traces: &TraceSet, mode: ScoreMode, ig: IgConfig) -> Result<Scorer<'_, f64>> {
        if traces.mode == TraceMode::Scored {
            return Ok(Scorer::Stored);
        }
        let need = |what: &str| Error::Config(format!("{what} scoring of a RAW trace needs --snapshot"));
        Ok(match mode {
            ScoreMode::Activation => Scorer::Activation,
            ScoreMode::VocabProjection => Scorer::VocabProjection(self.snapshot.as_ref().ok_or_else(|| need("projection"))?),
            ScoreMode::IntegratedGradient => Scorer::IntegratedGradient(self.model.as_ref().ok_or_else(|| need("gradient"))?, ig),
            ScoreMode::SaeFeature => Scorer::SaeFeature(
                self.sae
                    .as_ref()
                    .ok_or_else(|| Error::Config("SAE scoring needs --sae".into()))?,
            ),
        })
    }
}

fn keysets_of(ctx: &Context, loaded: &Loaded, traces: &TraceSet) -> Result<(Vec<KeySet>, Vec<usize>)> {
    let sel = &ctx.exp.selection;
    let scorer = loaded.scorer(traces, sel.score_mode, sel.ig)?;
    let (keysets, widths, _) = keysets_for(traces, &scorer, sel)?;
    Ok((keysets, widths))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "traces".into(), |s| s.to_string_lossy().into_owned())
}

fn score(ctx: &Context, a: &TraceInput) -> Result<()> {
    let loaded = Loaded::new(ctx, a.snapshot.as_deref())?;
    for path in &a.traces {
        let traces = read_trace(path)?;
        let (keysets, widths) = keysets_of(ctx, &loaded, &traces)?;
        let name = format!("{}.keysets.jsonl", stem(path));
        write_keysets_jsonl(ctx.out_file(&name)?, &keysets)?;
        println!("{name}\t{} key sets\tMUI {:.4}", keysets.len(), mui(&keysets, &widths)?);
    }
    Ok(())
}

/// Percentage of samples flagged correct among flagged samples.
fn trace_accuracy(traces: &TraceSet) -> f64 {
    let flags: Vec<bool> = traces.samples.iter().filter_map(|s| s.sample.correct).collect();
    if flags.is_empty() {
        warn!("trace has no correctness flags; performance reported as 0");
        return 0.0;
    }
    100.0 * flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64
}

fn mui_cmd(ctx: &Context, a: &MuiArgs) -> Result<()> {
    let points = if a.traces.is_empty() {
        let out = run_pipeline(&ctx.exp)?;
        write_outputs(ctx.out()?, &out)?;
        for r in &out.runs {
            if !r.skipped.is_empty() {
                warn!("{} / {}: {} sample(s) skipped", r.point.label, r.point.dataset, r.skipped.len());
            }
        }
        out.points()
    } else {
        let loaded = Loaded::new(ctx, a.snapshot.as_deref())?;
        let mut points = Vec::new();
        for path in &a.traces {
            let traces = read_trace(path)?;
            let (keysets, widths) = keysets_of(ctx, &loaded, &traces)?;
            points.push(EvalPoint::new(traces.model_id.clone(), stem(path), trace_accuracy(&traces), mui(&keysets, &widths)?));
        }
        write_points_csv(ctx.out_file("points.csv")?, &points, PurConfig::default())?;
        points
    };
    for p in &points {
        println!("{}\t{}\tP {:.2}\tMUI {:.4}", p.label, p.dataset, p.performance, p.mui);
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<EvalPoint>> {
    read_points_csv(File::open(path)?)
}

fn pur_cmd(ctx: &Context, a: &PurArgs) -> Result<()> {
    let cfg = PurConfig { alpha: a.alpha };
    match (&a.points, a.p, a.mui) {
        (None, Some(p), Some(m)) => println!("{:.4}", pur(p, m, cfg)?),
        (Some(path), _, _) => {
            let points = read_points(path)?;
            write_points_csv(ctx.out_file("pur.csv")?, &points, cfg)?;
            for p in &points {
                println!("{}\t{}\t{:.4}", p.label, p.dataset, pur(p.performance, p.mui, cfg)?);
            }
        }
        _ => return Err(Error::Config("pur needs --points or both --p and --mui".into())),
    }
    Ok(())
}

fn fit_cmd(ctx: &Context, a: &FitArgs) -> Result<()> {
    let fit = match (&a.points, a.a, a.b) {
        (Some(path), _, _) if a.per_dataset => {
            let points = read_points(path)?;
            let mut datasets: Vec<&str> = points.iter().map(|p| p.dataset.as_str()).collect();
            datasets.sort_unstable();
            datasets.dedup();
            let mut fits = Vec::new();
            for ds in datasets {
                let group: Vec<EvalPoint> = points.iter().filter(|p| p.dataset == ds).cloned().collect();
                let fit = fit_utility(&group)?;
                println!("{ds}\tA {:.6}\tB {:.6}\tR2 {:.6}\tMUI({}) {:.4}", fit.a, fit.b, fit.r_squared, a.at, fit.extrapolate(a.at));
                fits.push((ds.to_string(), fit));
            }
            return write_dataset_fits_csv(ctx.out_file("fit_per_dataset.csv")?, &fits);
        }
        (Some(path), _, _) => {
            let fit = fit_utility(&pool_by_model(&read_points(path)?))?;
            write_fit_csv(ctx.out_file("fit.csv")?, &fit)?;
            fit
        }
        (None, Some(a_), Some(b)) => UtilityFit {
            a: a_,
            b,
            r_squared: f64::NAN,
            n_points: 0,
        },
        _ => return Err(Error::Config("fit needs --points or both --a and --b".into())),
    };
    let r2 = if fit.r_squared.is_nan() { "-".to_string() } else { format!("{:.6}", fit.r_squared) };
    println!("A {:.6}\tB {:.6}\tR2 {r2}\tMUI({}) {:.4}", fit.a, fit.b, a.at, fit.extrapolate(a.at));
    Ok(())
}

fn rank_cmd(ctx: &Context, a: &RankArgs) -> Result<()> {
    let rows = rank_points(&read_points(&a.points)?, PurConfig { alpha: a.alpha })?;
    write_ranks_csv(ctx.out_file("ranks.csv")?, &rows)?;
    if let Some(path) = &a.reference {
        let agr = agreement(&rows, &read_reference_csv(File::open(path)?)?)?;
        write_agreement_csv(ctx.out_file("rank_agreement.csv")?, &agr)?;
        for r in &agr {
            println!(
                "{}\tspearman P {:.2} PUR {:.2}\tkendall P {:.2} PUR {:.2}",
                r.dataset,
                100.0 * r.spearman_p,
                100.0 * r.spearman_pur,
                100.0 * r.kendall_p,
                100.0 * r.kendall_pur
            );
        }
    } else {
        for r in &rows {
            println!("{}\t{}\t{}\t{}", r.point.dataset, r.point.label, r.rank_p, r.rank_pur);
        }
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("expected \"P,MUI\", got {s:?}"));
    let (p, m) = s.split_once(',').ok_or_else(bad)?;
    Ok((p.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?))
}

fn direction_cmd(ctx: &Context, a: &DirectionArgs) -> Result<()> {
    let eps = DirectionEps {
        performance: a.eps_p,
        mui: a.eps_mui,
    };
    let pairs: Vec<(EvalPoint, EvalPoint)> = match (&a.points, &a.from, &a.to) {
        (Some(path), _, _) => {
            let (before, after) = (a.before.as_deref().unwrap_or(""), a.after.as_deref().unwrap_or(""));
            let points = read_points(path)?;
            let pairs: Vec<_> = points
                .iter()
                .filter(|p| p.label == before)
                .filter_map(|b| points.iter().find(|q| q.label == after && q.dataset == b.dataset).map(|q| (b.clone(), q.clone())))
                .collect();
            if pairs.is_empty() {
                return Err(Error::InsufficientData(format!("no dataset has both {before} and {after}")));
            }
            pairs
        }
        (None, Some(from), Some(to)) => {
            let ((p0, m0), (p1, m1)) = (parse_pair(from)?, parse_pair(to)?);
            vec![(EvalPoint::new("before", "pair", p0, m0), EvalPoint::new("after", "pair", p1, m1))]
        }
        _ => return Err(Error::Config("direction needs --points with --before/--after, or --from and --to".into())),
    };
    let rows = pairs
        .into_iter()
        .map(|(b, a)| classify_direction(&b, &a, eps).map(|d| (b, a, d)))
        .collect::<Result<Vec<_>>>()?;
    write_directions_csv(ctx.out_file("directions.csv")?, &rows)?;
    for (b, _, d) in &rows {
        println!("{}\t{}\tdP {:+.2}\tdMUI {:+.3}", b.dataset, d.kind, d.delta_p, d.delta_mui);
    }
    Ok(())
}

fn mask_cmd(ctx: &Context, a: &ModelArg) -> Result<()> {
    let s = &ctx.settings;
    let kinds: Vec<SuiteKind> = if a.model.is_some() {
        let default = vec!["copy".to_string(), "reverse".to_string()];
        s.list::<String>("mask", "suites", &default)?
            .iter()
            .map(|n| SuiteKind::parse(n))
            .collect::<Result<_>>()?
    } else {
        ctx.exp.train_suites.iter().map(|t| t.kind).collect()
    };
    if kinds.len() < 2 {
        return Err(Error::Config(
            "masking needs a model trained on at least two suites: set [train] suites or pass --model".into(),
        ));
    }
    let model = ctx.model(a)?;
    let seed = ctx.first_seed();
    let sel_size = s.get("mask", "selection_size", 20usize)?;
    let eval_size = s.get("mask", "eval_size", 50usize)?;
    let selection: Vec<TaskSuite> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| TaskSuite::generate(k, sel_size, 100 + seed + i as u64))
        .collect();
    let spec = MaskSweepSpec {
        k_grid: s.list("mask", "k_grid", &[0usize, 1, 2, 4, 8])?,
        selection_suite: TaskSuite::merged("selection", &selection),
        eval_suites: kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| TaskSuite::generate(k, eval_size, 300 + seed + i as u64))
            .collect(),
        random_reps: s.get("mask", "reps", 5usize)?,
        seed,
        selection: ctx.exp.selection.clone(),
    };
    let rows = mask_sweep(&spec, &model)?;
    write_sweep_csv(ctx.out_file("mask_sweep.csv")?, &rows)?;
    for r in &rows {
        println!(
            "k {}\t{}\tmasked {}\tbaseline {:.1}\tselected {:.1}\trandom {:.1}",
            r.k, r.eval_suite, r.n_masked, r.baseline, r.selected, r.random_mean
        );
    }
    Ok(())
}

/// Traces `kinds` with `size` samples each and pairs every sample with its key set.
fn keyed_samples(ctx: &Context, model: &ToyModelF64, kinds: &[SuiteKind], size: usize) -> Result<(Vec<SampleKeys>, Vec<usize>)> {
    let snapshot = model.snapshot_export()?;
    let sae = ctx.exp.sae.as_ref().map(read_sae::<f64>).transpose()?;
    let sel = &ctx.exp.selection;
    let scorer = scorer_for(sel.score_mode, model, &snapshot, sae.as_ref(), sel.ig)?;
    let opts = CaptureOptions {
        decoding: ctx.exp.decoding,
        residuals: sel.score_mode == ScoreMode::SaeFeature,
        ..CaptureOptions::default()
    };
    let mut samples = Vec::new();
    let mut widths = Vec::new();
    for (i, &kind) in kinds.iter().enumerate() {
        let suite = TaskSuite::generate(kind, size, 500 + ctx.first_seed() + i as u64);
        let capture = trace_capture(model, &suite.items, &opts)?;
        if !capture.skipped.is_empty() {
            warn!("{}: {} sample(s) skipped", suite.name, capture.skipped.len());
        }
        let (keysets, w, _) = keysets_for(&capture.traces, &scorer, sel)?;
        widths = w;
        samples.extend(sample_keys(&capture.traces, &keysets)?);
    }
    info!("{} keyed samples", samples.len());
    Ok((samples, widths))
}

fn diversity_cmd(ctx: &Context, a: &ModelArg) -> Result<()> {
    let s = &ctx.settings;
    let default = vec!["copy".to_string(), "modadd".to_string(), "majority".to_string()];
    let kinds: Vec<SuiteKind> = s
        .list::<String>("diversity", "suites", &default)?
        .iter()
        .map(|n| SuiteKind::parse(n))
        .collect::<Result<_>>()?;
    let mut tags: Vec<&str> = kinds.iter().map(|k| k.capability_tag()).collect();
    tags.dedup();
    let mut groups: Vec<TagGroup> = tags.iter().map(|t| TagGroup::new(*t, &[t])).collect();
    if tags.len() > 1 {
        groups.push(TagGroup::new("mixed", &tags));
    }
    let mut spec = DiversitySpec::new(groups);
    spec.sizes = s.list("diversity", "sizes", &spec.sizes)?;
    spec.trials = s.get("diversity", "trials", spec.trials)?;
    spec.stratum_size = s.get("diversity", "stratum_size", spec.stratum_size)?;
    spec.seed = ctx.first_seed();
    spec.strata = vec![Stratum::Length];
    let pool = s.get("diversity", "pool", spec.sizes.iter().copied().max().unwrap_or(0))?;
    let model = ctx.model(a)?;
    let (samples, widths) = keyed_samples(ctx, &model, &kinds, pool)?;
    let rep = diversity_curves(&spec, &samples, &widths)?;
    write_curves_csv(ctx.out_file("diversity.csv")?, &rep)?;
    write_comparisons_csv(ctx.out_file("diversity_strata.csv")?, &rep.strata)?;
    for c in &rep.curves {
        println!("{}\tn {}\tMUI {:.4}", c.group, c.size, c.mean());
    }
    for c in &rep.strata {
        println!("{}\tp {:.4}\t{}", c.label, c.test.p_value, c.verdict());
    }
    Ok(())
}

fn ablation_cmd(ctx: &Context, a: &ModelArg) -> Result<()> {
    let s = &ctx.settings;
    let model = ctx.model(a)?;
    let kinds: Vec<SuiteKind> = ctx.exp.eval_suites.iter().map(|e| e.kind).collect();
    let (samples, widths) = keyed_samples(ctx, &model, &kinds, s.get("ablation", "pool", 200usize)?)?;
    let res = correctness_ablation(
        &samples,
        s.get("ablation", "n", 10usize)?,
        s.get("ablation", "trials", 20usize)?,
        ctx.first_seed(),
        &widths,
    )?;
    write_comparisons_csv(ctx.out_file("ablation.csv")?, std::slice::from_ref(&res.comparison))?;
    println!(
        "correct MUI {:.4}\tincorrect MUI {:.4}\tp {:.4}\t{}",
        res.correct_mui(),
        res.incorrect_mui(),
        res.comparison.test.p_value,
        res.comparison.verdict()
    );
    Ok(())
}

fn reproduce_cmd(ctx: &Context) -> Result<()> {
    let rep = reproduce_tables(PurConfig::default())?;
    write_reproduction(ctx.out()?, &rep)?;
    println!("max |PUR - published| {:.3}", rep.max_pur_error());
    for stat in [Statistic::Spearman, Statistic::Kendall] {
        if let Some(c) = rep.correlation(stat, "Average") {
            println!(
                "{} average: accuracy {:.2} (published {:.1}), PUR {:.2} (published {:.1})",
                stat.name(),
                c.accuracy,
                c.published_accuracy,
                c.pur,
                c.published_pur
            );
        }
    }
    Ok(())
}
