// SPDX-License-Identifier: Apache-2.0

//! MUI growth with sample count and tag diversity, and class-vs-class U tests.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{csv_err, csv_writer, mui};
use crate::selection::KeySet;
use crate::stats::{mann_whitney_u, significance_verdict, UTestResult};
use crate::trace::{LengthClass, TaskSample, TraceSet};

/// A sample's metadata next to its key set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleKeys {
    pub sample: TaskSample,
    pub keys: KeySet,
}

/// Pairs each traced sample with its key set; both must be in trace order.
pub fn sample_keys(traces: &TraceSet, keysets: &[KeySet]) -> Result<Vec<SampleKeys>> {
    if traces.samples.len() != keysets.len() {
        return Err(Error::Dimension(format!("{} samples vs {} key sets", traces.samples.len(), keysets.len())));
    }
    traces
        .samples
        .iter()
        .zip(keysets)
        .map(|(s, k)| {
            if s.sample.sample_id != k.sample_id {
                return Err(Error::Dimension(format!("key set {} paired with sample {}", k.sample_id, s.sample.sample_id)));
            }
            Ok(SampleKeys {
                sample: s.sample.clone(),
                keys: k.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagGroup {
    pub name: String,
    pub tags: Vec<String>,
}

impl TagGroup {
    pub fn new(name: impl Into<String>, tags: &[&str]) -> Self {
        Self {
            name: name.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn matches(&self, s: &TaskSample) -> bool {
        self.tags.iter().any(|t| *t == s.capability_tag || s.domain_tag.as_deref() == Some(t.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    /// Long responses exceed half of the longest response.
    Length,
    Correctness,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::Length => "length",
            Stratum::Correctness => "correctness",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySpec {
    pub groups: Vec<TagGroup>,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub strata: Vec<Stratum>,
    /// Samples drawn per class and trial for strata tests.
    pub stratum_size: usize,
}

impl DiversitySpec {
    pub const DEFAULT_SIZES: [usize; 6] = [200, 400, 600, 800, 1000, 1200];

    pub fn new(groups: Vec<TagGroup>) -> Self {
        Self {
            groups,
            sizes: Self::DEFAULT_SIZES.to_vec(),
            trials: 10,
            seed: 0,
            strata: Vec::new(),
            stratum_size: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub group: String,
    pub size: usize,
    pub per_trial: Vec<f64>,
}

impl CurvePoint {
    pub fn mean(&self) -> f64 {
        self.per_trial.iter().sum::<f64>() / self.per_trial.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassComparison {
    pub label: String,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub test: UTestResult,
}

impl ClassComparison {
    pub fn verdict(&self) -> &'static str {
        significance_verdict(self.test.p_value)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiversityReport {
    pub curves: Vec<CurvePoint>,
    pub strata: Vec<ClassComparison>,
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Draws `n` samples spread evenly over the group's tags, remainder to the first tags.
fn draw_balanced<'a>(by_tag: &[Vec<&'a SampleKeys>], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a SampleKeys> {
    let t = by_tag.len();
    let mut out = Vec::with_capacity(n);
    for (i, pool) in by_tag.iter().enumerate() {
        let want = n / t + usize::from(i < n % t);
        out.extend(sample(rng, pool.len(), want).into_iter().map(|j| pool[j]));
    }
    out
}

fn mui_of(samples: &[&SampleKeys], widths: &[usize]) -> Result<f64> {
    let keys: Vec<KeySet> = samples.iter().map(|s| s.keys.clone()).collect();
    mui(&keys, widths)
}

pub fn diversity_curves(spec: &DiversitySpec, samples: &[SampleKeys], widths: &[usize]) -> Result<DiversityReport> {
    if spec.trials == 0 {
        return Err(Error::Config("diversity needs at least one trial".into()));
    }
    let mut report = DiversityReport::default();
    for group in &spec.groups {
        let by_tag: Vec<Vec<&SampleKeys>> = group
            .tags
            .iter()
            .map(|t| TagGroup::new("", &[t]))
            .map(|g| samples.iter().filter(|s| g.matches(&s.sample)).collect())
            .collect();
        if by_tag.is_empty() {
            return Err(Error::Config(format!("group {} has no tags", group.name)));
        }
        for &size in &spec.sizes {
            for (tag, pool) in group.tags.iter().zip(&by_tag) {
                let want = size / by_tag.len() + 1;
                if pool.len() < want.min(size) {
                    return Err(Error::InsufficientData(format!(
                        "group {} size {size}: tag {tag} has {} samples",
                        group.name,
                        pool.len()
                    )));
                }
            }
            let mut rng = stream(spec.seed ^ size as u64, &group.name);
            let per_trial = (0..spec.trials)
                .map(|_| mui_of(&draw_balanced(&by_tag, size, &mut rng), widths))
                .collect::<Result<Vec<_>>>()?;
            report.curves.push(CurvePoint {
                group: group.name.clone(),
                size,
                per_trial,
            });
        }
    }
    let max_len = samples.iter().map(|s| s.sample.response_tokens.len()).max().unwrap_or(0);
    for &stratum in &spec.strata {
        let (first, second): (Vec<&SampleKeys>, Vec<&SampleKeys>) = match stratum {
            Stratum::Length => samples.iter().partition(|s| s.sample.length_class(max_len) == LengthClass::Short),
            Stratum::Correctness => {
                let flagged = samples.iter().filter(|s| s.sample.correct.is_some());
                flagged.partition(|s| s.sample.correct == Some(true))
            }
        };
        report.strata.push(compare_classes(stratum.name(), &first, &second, spec.stratum_size, spec.trials, spec.seed, widths)?);
    }
    Ok(report)
}

/// Per-trial MUI of `n` samples drawn from each class, and a U test between them.
/// Both classes consume identically seeded streams, so equal pools give equal MUIs.
pub fn compare_classes(
    label: &str,
    first: &[&SampleKeys],
    second: &[&SampleKeys],
    n: usize,
    trials: usize,
    seed: u64,
    widths: &[usize],
) -> Result<ClassComparison> {
    if n == 0 || trials == 0 {
        return Err(Error::Config("class comparison needs n ≥ 1 and trials ≥ 1".into()));
    }
    if first.len() < n || second.len() < n {
        return Err(Error::InsufficientData(format!(
            "{label}: need {n} samples per class, have {} and {}",
            first.len(),
            second.len()
        )));
    }
    let run = |pool: &[&SampleKeys]| -> Result<Vec<f64>> {
        let mut rng = stream(seed, label);
        (0..trials)
            .map(|_| {
                let drawn: Vec<&SampleKeys> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
                mui_of(&drawn, widths)
            })
            .collect()
    };
    let (a, b) = (run(first)?, run(second)?);
    let test = mann_whitney_u(&a, &b)?;
    Ok(ClassComparison {
        label: label.to_string(),
        first: a,
        second: b,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub comparison: ClassComparison,
}

impl AblationResult {
    pub fn correct_mui(&self) -> f64 {
        mean(&self.comparison.first)
    }

    pub fn incorrect_mui(&self) -> f64 {
        mean(&self.comparison.second)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// MUI of correct vs incorrect samples at equal size `n`.
pub fn correctness_ablation(samples: &[SampleKeys], n: usize, trials: usize, seed: u64, widths: &[usize]) -> Result<AblationResult> {
    let correct: Vec<&SampleKeys> = samples.iter().filter(|s| s.sample.correct == Some(true)).collect();
    let incorrect: Vec<&SampleKeys> = samples.iter().filter(|s| s.sample.correct == Some(false)).collect();
    Ok(AblationResult {
        comparison: compare_classes("correctness", &correct, &incorrect, n, trials, seed, widths)?,
    })
}

pub fn write_curves_csv<W: std::io::Write>(w: W, report: &DiversityReport) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["group", "size", "trials", "mean_mui"]).map_err(csv_err)?;
    for c in &report.curves {
        out.write_record([c.group.clone(), c.size.to_string(), c.per_trial.len().to_string(), format!("{:.4}", c.mean())])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per class comparison: means, U, p and verdict.
pub fn write_comparisons_csv<W: std::io::Write>(w: W, rows: &[ClassComparison]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["comparison", "mean_first", "mean_second", "u", "p_value", "method", "verdict"])
        .map_err(csv_err)?;
    for c in rows {
        out.write_record([
            c.label.clone(),
            format!("{:.4}", mean(&c.first)),
            format!("{:.4}", mean(&c.second)),
            format!("{}", c.test.u),
            format!("{:.6}", c.test.p_value),
            format!("{:?}", c.test.method).to_lowercase(),
            c.verdict().to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
