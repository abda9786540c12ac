// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

//! Shared test oracles. These re-derive results by enumeration and never call
//! the selection or scoring code they are compared against.

use std::collections::{BTreeMap, BTreeSet};

use mui_core::attribution::{Aggregation, LayerScores, ScoreMatrix};
use mui_core::selection::{Scope, SelectionPolicy};
use mui_core::trace::{UnitId, UnitKind};
use rand::Rng;

/// Scores of one sample as `(token, layer id, unit index, score)` facts.
#[derive(Debug, Clone)]
pub struct Instance {
    pub width: usize,
    pub layers: Vec<u32>,
    /// `rows[token][slot]`: `None` for dense, `Some(indices)` for the sparse subset.
    pub rows: Vec<Vec<(Option<Vec<u32>>, Vec<f64>)>>,
}

impl Instance {
    pub fn matrix(&self) -> ScoreMatrix {
        ScoreMatrix {
            sample_id: "oracle".into(),
            unit_kind: UnitKind::Neuron,
            width: self.width,
            layers: self.layers.clone(),
            tokens: self
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|(idx, vals)| match idx {
                            None => LayerScores::Dense(vals.clone()),
                            Some(idx) => LayerScores::Sparse(idx.iter().copied().zip(vals.iter().copied()).collect()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Every scored `(unit, score)` of one token.
    fn facts(&self, token: usize) -> Vec<(UnitId, f64)> {
        let mut out = Vec::new();
        for (slot, (idx, vals)) in self.rows[token].iter().enumerate() {
            let layer = self.layers[slot];
            for (j, &v) in vals.iter().enumerate() {
                let i = idx.as_ref().map_or(j as u32, |idx| idx[j]);
                out.push((UnitId::new(layer, i), v));
            }
        }
        out
    }
}

/// Scores are quarter-integers in `[-2, 2]` so sums are exact and ties common.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let width = rng.random_range(1..=16usize);
    let n_layers = rng.random_range(1..=3usize);
    let mut layers: Vec<u32> = (0..4).collect();
    while layers.len() > n_layers {
        let i = rng.random_range(0..layers.len());
        layers.remove(i);
    }
    let tokens = rng.random_range(1..=5usize);
    let rows = (0..tokens)
        .map(|_| {
            layers
                .iter()
                .map(|_| {
                    let idx = if rng.random_bool(0.5) {
                        None
                    } else {
                        Some((0..width as u32).filter(|_| rng.random_bool(0.6)).collect::<Vec<_>>())
                    };
                    let n = idx.as_ref().map_or(width, Vec::len);
                    let vals = (0..n).map(|_| rng.random_range(-8i32..=8) as f64 / 4.0).collect();
                    (idx, vals)
                })
                .collect()
        })
        .collect();
    Instance { width, layers, rows }
}

pub fn random_policy<R: Rng>(rng: &mut R) -> SelectionPolicy {
    match rng.random_range(0..4) {
        0 => SelectionPolicy::LayerTopK { k: rng.random_range(1..=6) },
        1 => SelectionPolicy::LayerTopPermille {
            ratio: [0.001, 0.1, 0.25, 0.5, 1.0][rng.random_range(0..5)],
        },
        2 => SelectionPolicy::GlobalTopK { k: rng.random_range(1..=8) },
        _ => SelectionPolicy::TopScore {
            fraction: [0.1, 0.5, 0.75, 0.9, 1.0][rng.random_range(0..5)],
        },
    }
}

pub const SCOPES: [Scope; 2] = [Scope::PerTokenUnion, Scope::PooledQuantile];
pub const AGGREGATIONS: [Aggregation; 2] = [Aggregation::TokenLevel, Aggregation::ResponseSum];

/// `a` outranks `b`: higher score, or equal score and lower `(layer, index)`.
fn beats(a: &(UnitId, f64), b: &(UnitId, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Units kept by a count rule: fewer than `k` distinct candidates outrank them.
fn count_rule(group: &[(UnitId, f64)], k: usize) -> Vec<UnitId> {
    group
        .iter()
        .filter(|u| group.iter().filter(|v| beats(v, u)).count() < k)
        .map(|u| u.0)
        .collect()
}

/// Units with some entry that fewer than `count` entries strictly exceed.
fn pooled_count_rule(pool: &[(UnitId, f64)], count: usize) -> Vec<UnitId> {
    pool.iter()
        .filter(|e| pool.iter().filter(|f| f.1 > e.1).count() < count)
        .map(|e| e.0)
        .collect()
}

fn fraction_rule(group: &[(UnitId, f64)], fraction: f64) -> Vec<UnitId> {
    let Some(max) = group.iter().map(|e| e.1).reduce(f64::max) else {
        return Vec::new();
    };
    if max <= 0.0 {
        return Vec::new();
    }
    group.iter().filter(|e| e.1 >= fraction * max).map(|e| e.0).collect()
}

fn per_layer_k(policy: &SelectionPolicy, width: usize) -> usize {
    match *policy {
        SelectionPolicy::LayerTopK { k } | SelectionPolicy::GlobalTopK { k } => k,
        SelectionPolicy::LayerTopPermille { ratio } => std::cmp::max(1, (ratio * width as f64) as usize),
        SelectionPolicy::TopScore { .. } => unreachable!(),
    }
}

/// Brute-force key set.
pub fn oracle_select(inst: &Instance, policy: &SelectionPolicy, scope: Scope, aggregation: Aggregation) -> BTreeSet<UnitId> {
    let mut rows: Vec<Vec<(UnitId, f64)>> = (0..inst.rows.len()).map(|t| inst.facts(t)).collect();
    if aggregation == Aggregation::ResponseSum {
        let mut sum: BTreeMap<UnitId, f64> = BTreeMap::new();
        for row in &rows {
            for &(u, v) in row {
                *sum.entry(u).or_insert(0.0) += v;
            }
        }
        rows = vec![sum.into_iter().collect()];
    }
    let by_layer = |facts: &[(UnitId, f64)], l: u32| -> Vec<(UnitId, f64)> { facts.iter().copied().filter(|f| f.0.layer == l).collect() };
    let mut out = BTreeSet::new();
    match scope {
        Scope::PerTokenUnion => {
            for row in &rows {
                match policy {
                    SelectionPolicy::GlobalTopK { k } => out.extend(count_rule(row, *k)),
                    SelectionPolicy::TopScore { fraction } => {
                        for &l in &inst.layers {
                            out.extend(fraction_rule(&by_layer(row, l), *fraction));
                        }
                    }
                    _ => {
                        let k = per_layer_k(policy, inst.width);
                        for &l in &inst.layers {
                            out.extend(count_rule(&by_layer(row, l), k));
                        }
                    }
                }
            }
        }
        Scope::PooledQuantile => {
            let pool: Vec<(UnitId, f64)> = rows.concat();
            let n_tok = rows.len();
            match policy {
                SelectionPolicy::GlobalTopK { k } => out.extend(pooled_count_rule(&pool, k * n_tok)),
                SelectionPolicy::TopScore { fraction } => {
                    for &l in &inst.layers {
                        out.extend(fraction_rule(&by_layer(&pool, l), *fraction));
                    }
                }
                _ => {
                    let k = per_layer_k(policy, inst.width);
                    for &l in &inst.layers {
                        out.extend(pooled_count_rule(&by_layer(&pool, l), k * n_tok));
                    }
                }
            }
        }
    }
    out
}

/// Number of arrangements of `n1` and `n2` tie-free values with U = `u`, by the
/// recurrence on which group holds the largest value.
pub fn u_counts(n1: usize, n2: usize) -> Vec<u128> {
    let max_u = n1 * n2;
    let mut table = vec![vec![Vec::<u128>::new(); n2 + 1]; n1 + 1];
    for i in 0..=n1 {
        for j in 0..=n2 {
            let mut c = vec![0u128; i * j + 1];
            if i == 0 || j == 0 {
                c[0] = 1;
            } else {
                // Largest value in the first group beats all j of the second.
                for (u, &v) in table[i - 1][j].iter().enumerate() {
                    c[u + j] += v;
                }
                for (u, &v) in table[i][j - 1].iter().enumerate() {
                    c[u] += v;
                }
            }
            table[i][j] = c;
        }
    }
    let out = table[n1][n2].clone();
    debug_assert_eq!(out.len(), max_u + 1);
    out
}

/// Two-sided exact p: twice the smaller tail at the observed U, capped at 1.
pub fn oracle_exact_p(n1: usize, n2: usize, u: usize) -> f64 {
    let counts = u_counts(n1, n2);
    let total: u128 = counts.iter().sum();
    let lower: u128 = counts[..=u].iter().sum();
    let upper: u128 = counts[u..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total as f64).min(1.0)
}

/// Pairs `(a, b)` with `a > b`, ties counting one half.
pub fn oracle_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
        .sum()
}

pub fn random_keysets<R: Rng>(rng: &mut R, widths: &[usize], n: usize) -> Vec<mui_core::selection::KeySet> {
    (0..n)
        .map(|s| {
            let units = widths
                .iter()
                .enumerate()
                .flat_map(|(l, &w)| (0..w as u32).map(move |i| UnitId::new(l as u32, i)))
                .filter(|_| rng.random_bool(0.1))
                .collect();
            mui_core::selection::KeySet {
                sample_id: format!("s{s}"),
                units,
                policy: SelectionPolicy::default(),
                scope: Scope::PerTokenUnion,
            }
        })
        .collect()
}
