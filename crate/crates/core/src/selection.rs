// SPDX-License-Identifier: Apache-2.0

//! Key-unit selection from score matrices.
//!
//! Only scored units are candidates: every unit of a dense layer, or the
//! stored entries of a sparse one. Ranking is by signed score, ties going to
//! the lower `(layer, index)`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::attribution::{aggregate_response, Aggregation, ScoreMatrix};
use crate::error::{Error, Result};
use crate::trace::UnitId;

pub const DEFAULT_PERMILLE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    LayerTopK { k: usize },
    /// `k = max(1, floor(N · ratio))` per layer.
    LayerTopPermille { ratio: f64 },
    /// Top `k` per token across all layers.
    GlobalTopK { k: usize },
    /// Units scoring at least `fraction · max`.
    TopScore { fraction: f64 },
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self::LayerTopPermille { ratio: DEFAULT_PERMILLE }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::LayerTopK { k } | Self::GlobalTopK { k } if k == 0 => Err(Error::Config("selection k must be at least 1".into())),
            Self::LayerTopPermille { ratio } if !(ratio > 0.0 && ratio <= 1.0) => {
                Err(Error::Config(format!("selection ratio {ratio} outside (0, 1]")))
            }
            Self::TopScore { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::Config(format!("top-score fraction {fraction} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `topk:K`, `permille:RATIO`, `global:K` or `score:F`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse selection policy {s:?}"));
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let policy = match name {
            "topk" => Self::LayerTopK { k: arg.parse().map_err(|_| bad())? },
            "permille" => Self::LayerTopPermille { ratio: arg.parse().map_err(|_| bad())? },
            "global" => Self::GlobalTopK { k: arg.parse().map_err(|_| bad())? },
            "score" => Self::TopScore { fraction: arg.parse().map_err(|_| bad())? },
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LayerTopK { k } => write!(f, "topk:{k}"),
            Self::LayerTopPermille { ratio } => write!(f, "permille:{ratio}"),
            Self::GlobalTopK { k } => write!(f, "global:{k}"),
            Self::TopScore { fraction } => write!(f, "score:{fraction}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    /// Union over tokens of per-token selections.
    #[default]
    PerTokenUnion,
    /// One threshold per layer from all tokens' scores pooled together.
    PooledQuantile,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token" | "union" => Ok(Self::PerTokenUnion),
            "pooled" => Ok(Self::PooledQuantile),
            other => Err(Error::Config(format!("unknown selection scope {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PerTokenUnion => "union",
            Self::PooledQuantile => "pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySet {
    pub sample_id: String,
    pub units: BTreeSet<UnitId>,
    pub policy: SelectionPolicy,
    pub scope: Scope,
}

/// Units kept per layer for a layer-level policy; other policies pass `k` through
/// (`TopScore` has none and yields `None`).
pub fn effective_k(policy: &SelectionPolicy, width: usize) -> Option<usize> {
    match *policy {
        SelectionPolicy::LayerTopK { k } | SelectionPolicy::GlobalTopK { k } => Some(k),
        SelectionPolicy::LayerTopPermille { ratio } => Some(((width as f64 * ratio).floor() as usize).max(1)),
        SelectionPolicy::TopScore { .. } => None,
    }
}

/// Candidates sorted by score descending, then `(layer, index)` ascending.
fn ranked(mut c: Vec<(UnitId, f64)>) -> Vec<(UnitId, f64)> {
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c
}

fn above_fraction(c: &[(UnitId, f64)], fraction: f64) -> Vec<UnitId> {
    let max = c.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let threshold = fraction * max;
    c.iter().filter(|x| x.1 >= threshold).map(|x| x.0).collect()
}

/// Selection for one (token, layer); `GlobalTopK` over a single layer is `LayerTopK`.
pub fn select_token(scores: &[(u32, f64)], layer: u32, policy: &SelectionPolicy, width: usize) -> Vec<UnitId> {
    let cands: Vec<(UnitId, f64)> = scores.iter().map(|&(i, s)| (UnitId::new(layer, i), s)).collect();
    let mut out: Vec<UnitId> = match policy {
        SelectionPolicy::TopScore { fraction } => above_fraction(&cands, *fraction),
        _ => {
            let k = effective_k(policy, width).expect("count policy");
            ranked(cands).into_iter().take(k).map(|x| x.0).collect()
        }
    };
    out.sort();
    out
}

/// Per-token selection over every layer of one row of a score matrix.
fn select_row(m: &ScoreMatrix, row: usize, policy: &SelectionPolicy, out: &mut BTreeSet<UnitId>) {
    match policy {
        SelectionPolicy::GlobalTopK { k } => {
            let cands: Vec<(UnitId, f64)> = m.layers.iter().enumerate().flat_map(|(slot, &l)| {
                m.tokens[row][slot].entries().into_iter().map(move |(i, s)| (UnitId::new(l, i), s))
            }).collect();
            out.extend(ranked(cands).into_iter().take(*k).map(|x| x.0));
        }
        _ => {
            for (slot, &l) in m.layers.iter().enumerate() {
                out.extend(select_token(&m.tokens[row][slot].entries(), l, policy, m.width));
            }
        }
    }
}

/// Units with any pooled score at or above the `(count)`-th largest pooled value.
fn pooled_quantile(cands: Vec<(UnitId, f64)>, count: usize) -> Vec<UnitId> {
    if cands.is_empty() {
        return Vec::new();
    }
    let ranked = ranked(cands);
    let threshold = ranked[count.min(ranked.len()) - 1].1;
    ranked.into_iter().take_while(|x| x.1 >= threshold).map(|x| x.0).collect()
}

fn select_pooled(m: &ScoreMatrix, policy: &SelectionPolicy, out: &mut BTreeSet<UnitId>) {
    let n_tok = m.n_tokens();
    let layer_cands = |slot: usize, l: u32| -> Vec<(UnitId, f64)> {
        (0..n_tok)
            .flat_map(|t| m.tokens[t][slot].entries().into_iter().map(move |(i, s)| (UnitId::new(l, i), s)))
            .collect()
    };
    match policy {
        SelectionPolicy::GlobalTopK { k } => {
            let cands = m.layers.iter().enumerate().flat_map(|(slot, &l)| layer_cands(slot, l)).collect();
            out.extend(pooled_quantile(cands, k * n_tok));
        }
        SelectionPolicy::TopScore { fraction } => {
            for (slot, &l) in m.layers.iter().enumerate() {
                out.extend(above_fraction(&layer_cands(slot, l), *fraction));
            }
        }
        _ => {
            let k = effective_k(policy, m.width).expect("count policy");
            for (slot, &l) in m.layers.iter().enumerate() {
                out.extend(pooled_quantile(layer_cands(slot, l), k * n_tok));
            }
        }
    }
}

/// Key set of one sample.
pub fn select_sample(m: &ScoreMatrix, policy: &SelectionPolicy, scope: Scope, aggregation: Aggregation) -> Result<KeySet> {
    policy.validate()?;
    let m = aggregate_response(m, aggregation);
    let mut units = BTreeSet::new();
    match scope {
        Scope::PerTokenUnion => {
            for row in 0..m.n_tokens() {
                select_row(&m, row, policy, &mut units);
            }
        }
        Scope::PooledQuantile => select_pooled(&m, policy, &mut units),
    }
    Ok(KeySet {
        sample_id: m.sample_id.clone(),
        units,
        policy: *policy,
        scope,
    })
}

#[derive(Serialize)]
struct KeySetLine<'a> {
    sample_id: &'a str,
    units: Vec<[u32; 2]>,
    policy: String,
    scope: &'static str,
}

/// One JSON object per line: `{sample_id, units: [[layer, index], ...], policy, scope}`.
pub fn write_keysets_jsonl<W: Write>(mut w: W, keysets: &[KeySet]) -> Result<()> {
    for ks in keysets {
        let line = KeySetLine {
            sample_id: &ks.sample_id,
            units: ks.units.iter().map(|u| [u.layer, u.index]).collect(),
            policy: ks.policy.to_string(),
            scope: ks.scope.name(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::LayerScores;
    use crate::trace::UnitKind;

    fn matrix(tokens: Vec<Vec<Vec<f64>>>) -> ScoreMatrix {
        ScoreMatrix {
            sample_id: "s".into(),
            unit_kind: UnitKind::Neuron,
            width: tokens[0][0].len(),
            layers: (0..tokens[0].len() as u32).collect(),
            tokens: tokens
                .into_iter()
                .map(|row| row.into_iter().map(LayerScores::Dense).collect())
                .collect(),
        }
    }

    fn ids(units: &[(u32, u32)]) -> BTreeSet<UnitId> {
        units.iter().map(|&(l, i)| UnitId::new(l, i)).collect()
    }

    fn dense(v: &[f64]) -> Vec<(u32, f64)> {
        v.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect()
    }

    #[test]
    fn effective_k_examples() {
        let p = SelectionPolicy::default();
        assert_eq!(effective_k(&p, 11008), Some(11));
        assert_eq!(effective_k(&p, 256), Some(1));
        assert_eq!(effective_k(&SelectionPolicy::LayerTopPermille { ratio: 0.01 }, 500), Some(5));
        assert_eq!(effective_k(&SelectionPolicy::LayerTopK { k: 3 }, 500), Some(3));
    }

    #[test]
    fn token_level_examples() {
        let top1 = SelectionPolicy::LayerTopK { k: 1 };
        assert_eq!(select_token(&dense(&[0.1, 0.9, 0.5]), 0, &top1, 3), vec![UnitId::new(0, 1)]);
        let all = select_token(&dense(&[0.1, 0.9, 0.5]), 2, &SelectionPolicy::LayerTopK { k: 7 }, 3);
        assert_eq!(all.len(), 3);
        let ts = select_token(&dense(&[4.0, 2.0, 3.9]), 0, &SelectionPolicy::TopScore { fraction: 0.95 }, 3);
        assert_eq!(ts, vec![UnitId::new(0, 0), UnitId::new(0, 2)]);
        let none = select_token(&dense(&[-1.0, 0.0]), 0, &SelectionPolicy::TopScore { fraction: 0.5 }, 2);
        assert!(none.is_empty());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let p = SelectionPolicy::LayerTopK { k: 2 };
        assert_eq!(select_token(&dense(&[1.0; 5]), 0, &p, 5), vec![UnitId::new(0, 0), UnitId::new(0, 1)]);
    }

    #[test]
    fn union_of_tokens() {
        let m = matrix(vec![vec![vec![0.0, 1.0, 0.0, 0.5]], vec![vec![0.0, 0.5, 0.0, 1.0]]]);
        let ks = select_sample(&m, &SelectionPolicy::LayerTopK { k: 1 }, Scope::PerTokenUnion, Aggregation::TokenLevel).unwrap();
        assert_eq!(ks.units, ids(&[(0, 1), (0, 3)]));
    }

    #[test]
    fn single_token_scopes_agree() {
        let m = matrix(vec![vec![vec![0.3, 1.0, -2.0, 0.5], vec![2.0, 2.0, 0.1, 0.0]]]);
        let p = SelectionPolicy::LayerTopK { k: 2 };
        let a = select_sample(&m, &p, Scope::PerTokenUnion, Aggregation::TokenLevel).unwrap();
        let b = select_sample(&m, &p, Scope::PooledQuantile, Aggregation::TokenLevel).unwrap();
        assert_eq!(a.units, b.units);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let m = matrix(vec![vec![vec![1.0]]]);
        for p in [
            SelectionPolicy::LayerTopK { k: 0 },
            SelectionPolicy::LayerTopPermille { ratio: 0.0 },
            SelectionPolicy::TopScore { fraction: 1.5 },
        ] {
            assert!(select_sample(&m, &p, Scope::PerTokenUnion, Aggregation::TokenLevel).is_err());
        }
        assert_eq!(SelectionPolicy::parse("permille:0.001").unwrap(), SelectionPolicy::default());
        assert!(SelectionPolicy::parse("topk:x").is_err());
    }

    #[test]
    fn jsonl_shape() {
        let ks = KeySet {
            sample_id: "a".into(),
            units: ids(&[(0, 1), (1, 3)]),
            policy: SelectionPolicy::LayerTopK { k: 2 },
            scope: Scope::PerTokenUnion,
        };
        let mut buf = Vec::new();
        write_keysets_jsonl(&mut buf, &[ks]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"sample_id\":\"a\",\"units\":[[0,1],[1,3]],\"policy\":\"topk:2\",\"scope\":\"union\"}\n"
        );
    }
}
