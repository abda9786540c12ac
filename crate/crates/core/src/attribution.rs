// SPDX-License-Identifier: Apache-2.0

//! Per-unit contribution scores for each response token and layer.
//!
//! Vocabulary-projection scores use the snapshot unembedding, which for toy
//! models already carries the final norm gain; the final norm's per-token
//! `1/rms` is a positive factor shared by every unit and is not applied.
//! Integrated gradients target the same direct logit `W_u[ŷ] · h_final`, so
//! the two scorers coincide on the last layer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::num::{dot, Real};
use crate::sae::SaeSnapshot;
use crate::toy::{ForwardPass, ToyModel};
use crate::trace::{top_entries, RecordPayload, TaskSample, TraceMode, TraceSet, UnitKind};
use crate::ModelSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    VocabProjection,
    Activation,
    IntegratedGradient,
    SaeFeature,
}

impl ScoreMode {
    /// Parses the CLI spelling: `proj`, `act`, `ig` or `sae`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proj" => Ok(Self::VocabProjection),
            "act" => Ok(Self::Activation),
            "ig" => Ok(Self::IntegratedGradient),
            "sae" => Ok(Self::SaeFeature),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    #[default]
    TokenLevel,
    ResponseSum,
}

impl Aggregation {
    /// Parses the CLI spelling: `token` or `sum`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::TokenLevel),
            "sum" => Ok(Self::ResponseSum),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgConfig {
    /// Riemann steps; at least one.
    pub m: usize,
    /// Finite-difference step relative to the coordinate's magnitude.
    pub fd_step: f64,
    /// Absolute lower bound on the finite-difference step.
    pub fd_floor: f64,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            m: 10,
            fd_step: 1e-3,
            fd_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerScores {
    /// One score per unit.
    Dense(Vec<f64>),
    /// `(unit index, score)`; units not listed carry no score.
    Sparse(Vec<(u32, f64)>),
}

impl LayerScores {
    /// `(index, score)` pairs of every scored unit, ascending by index for dense data.
    pub fn entries(&self) -> Vec<(u32, f64)> {
        match self {
            LayerScores::Dense(v) => v.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect(),
            LayerScores::Sparse(e) => e.clone(),
        }
    }

    pub fn get(&self, index: u32) -> Option<f64> {
        match self {
            LayerScores::Dense(v) => v.get(index as usize).copied(),
            LayerScores::Sparse(e) => e.iter().find(|(i, _)| *i == index).map(|&(_, s)| s),
        }
    }
}

/// Scores of one sample: `tokens[j][slot]` for response token `j` and the
/// layer at `layers[slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub sample_id: String,
    pub unit_kind: UnitKind,
    /// Units per layer.
    pub width: usize,
    pub layers: Vec<u32>,
    pub tokens: Vec<Vec<LayerScores>>,
}

impl ScoreMatrix {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_units(&self) -> usize {
        self.width * self.layers.len()
    }
}

/// Where scores come from.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a, T> {
    VocabProjection(&'a ModelSnapshot<T>),
    Activation,
    IntegratedGradient(&'a ToyModel<T>, IgConfig),
    SaeFeature(&'a SaeSnapshot<T>),
    /// Entries already stored in a SCORED trace.
    Stored,
}

/// `c_i = (W_u[ŷ] · W_out[:, i]) · a_i`.
pub fn score_vocab_projection<T: Real>(snap: &ModelSnapshot<T>, layer: usize, activations: &[T], target: u32) -> Result<Vec<T>> {
    if layer >= snap.n_layers() {
        return Err(Error::Dimension(format!("layer {layer} outside {}-layer snapshot", snap.n_layers())));
    }
    if activations.len() != snap.ffn_width {
        return Err(Error::Dimension(format!("activation length {} vs FFN width {}", activations.len(), snap.ffn_width)));
    }
    if target as usize >= snap.vocab_size {
        return Err(Error::Dimension(format!("target token {target} outside vocabulary {}", snap.vocab_size)));
    }
    let u = snap.w_out[layer].matvec_t(snap.w_u.row(target as usize));
    Ok(u.iter().zip(activations).map(|(&u, &a)| u * a).collect())
}

/// The activation itself.
pub fn score_activation<T: Real>(activations: &[T]) -> Vec<T> {
    activations.to_vec()
}

/// Direct logit of `target` read from a final residual: `(W_u[ŷ] ⊙ g) · h`.
pub fn direct_logit<T: Real>(model: &ToyModel<T>, residual: &[T], target: u32) -> T {
    let row = model.weights.unembedding().row(target as usize);
    row.iter()
        .zip(&model.weights.norm_f)
        .zip(residual)
        .fold(T::zero(), |acc, ((&w, &g), &h)| acc + w * g * h)
}

/// Integrated gradients of the direct target logit with respect to the FFN
/// activation vector of `layer` at `pos`, along the straight path from zero.
pub fn ig_scores<T: Real>(model: &ToyModel<T>, pass: &ForwardPass<T>, layer: usize, pos: usize, target: u32, cfg: &IgConfig) -> Result<Vec<T>> {
    if cfg.m == 0 {
        return Err(Error::Config("IG needs at least one Riemann step".into()));
    }
    if layer >= model.config.n_layers || pos >= pass.tokens.len() {
        return Err(Error::Dimension(format!("IG site ({layer}, {pos}) outside the pass")));
    }
    let a = &pass.layers[layer].a[pos];
    let f = |x: &[T]| direct_logit(model, &model.residual_with_activation(pass, layer, pos, x), target);
    let mut out = vec![T::zero(); a.len()];
    for (i, o) in out.iter_mut().enumerate() {
        if a[i] == T::zero() {
            continue;
        }
        let mut grad_sum = T::zero();
        for k in 1..=cfg.m {
            let mut x: Vec<T> = a.iter().map(|&v| v * T::of_usize(k) / T::of_usize(cfg.m)).collect();
            let xi = x[i];
            let h = T::of((cfg.fd_step * xi.f64().abs()).max(cfg.fd_floor));
            x[i] = xi + h;
            let up = f(&x);
            x[i] = xi - h;
            let down = f(&x);
            let g = (up - down) / (h + h);
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite IG gradient for unit {i} of layer {layer}")));
            }
            grad_sum = grad_sum + g;
        }
        *o = a[i] * grad_sum / T::of_usize(cfg.m);
    }
    Ok(out)
}

/// Traced sequence for a sample: prompt followed by every response token but the last.
fn traced_sequence(sample: &TaskSample) -> Vec<u32> {
    let mut seq = sample.prompt_tokens.clone();
    seq.extend_from_slice(&sample.response_tokens[..sample.response_tokens.len().saturating_sub(1)]);
    seq
}

/// IG scores of one (response token, layer) of `sample`, re-executing the model.
pub fn score_integrated_gradient<T: Real>(model: &ToyModel<T>, sample: &TaskSample, token_pos: usize, layer: usize, cfg: &IgConfig) -> Result<Vec<T>> {
    let target = *sample
        .response_tokens
        .get(token_pos)
        .ok_or_else(|| Error::Dimension(format!("token {token_pos} outside the response")))?;
    let pass = model.forward(&traced_sequence(sample))?;
    ig_scores(model, &pass, layer, sample.prompt_tokens.len() + token_pos - 1, target, cfg)
}

/// Post-sparsity SAE feature values of a residual.
pub fn score_sae_features<T: Real>(sae: &SaeSnapshot<T>, residual: &[T], layer: u32) -> Result<Vec<(u32, T)>> {
    Ok(sae.encode(layer, residual)?.entries)
}

fn widen<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

fn raw_parts(payload: &RecordPayload) -> Result<(&[f32], Option<&[f32]>)> {
    match payload {
        RecordPayload::Raw { activations, residual } => Ok((activations, residual.as_deref())),
        RecordPayload::Scored { .. } => Err(Error::Config("scorer needs a RAW trace".into())),
    }
}

/// Scores every record of every sample in `set`.
pub fn score_trace<T: Real>(set: &TraceSet, scorer: &Scorer<'_, T>) -> Result<Vec<ScoreMatrix>> {
    let n_layers = set.layers.len();
    let check_model = |id: &str| {
        if id != set.model_id {
            Err(Error::Config(format!("trace model {} does not match snapshot {id}", set.model_id)))
        } else {
            Ok(())
        }
    };
    let (unit_kind, width) = match scorer {
        Scorer::VocabProjection(snap) => {
            check_model(&snap.model_id)?;
            (UnitKind::Neuron, set.width as usize)
        }
        Scorer::IntegratedGradient(model, _) => {
            check_model(&model.model_id()?)?;
            (UnitKind::Neuron, set.width as usize)
        }
        Scorer::SaeFeature(sae) => {
            if set.residual_dim != Some(sae.d_model as u32) {
                return Err(Error::Config("SAE scoring needs residuals of the SAE's width".into()));
            }
            for &l in &set.layers {
                sae.layer(l)?;
            }
            (UnitKind::Feature, sae.width)
        }
        Scorer::Activation | Scorer::Stored => (set.unit_kind, set.width as usize),
    };
    if matches!(scorer, Scorer::Stored) != (set.mode == TraceMode::Scored) {
        return Err(Error::Config(format!("{:?} trace cannot be scored this way", set.mode)));
    }
    let mut out = Vec::with_capacity(set.samples.len());
    for s in &set.samples {
        let pass = match scorer {
            Scorer::IntegratedGradient(model, _) => Some(model.forward(&traced_sequence(&s.sample))?),
            _ => None,
        };
        let mut tokens = Vec::with_capacity(s.sample.response_tokens.len());
        for (j, &target) in s.sample.response_tokens.iter().enumerate() {
            let mut row = Vec::with_capacity(n_layers);
            for (slot, &layer) in set.layers.iter().enumerate() {
                let rec = s.record(j, slot, n_layers);
                let scores = match scorer {
                    Scorer::VocabProjection(snap) => {
                        let (a, _) = raw_parts(&rec.payload)?;
                        let a: Vec<T> = a.iter().map(|&x| T::of_f32(x)).collect();
                        LayerScores::Dense(widen(&score_vocab_projection(snap, layer as usize, &a, target)?))
                    }
                    Scorer::Activation => LayerScores::Dense(raw_parts(&rec.payload)?.0.iter().map(|&x| f64::from(x)).collect()),
                    Scorer::IntegratedGradient(model, cfg) => {
                        let pos = s.sample.prompt_tokens.len() + j - 1;
                        let pass = pass.as_ref().expect("forward pass computed above");
                        LayerScores::Dense(widen(&ig_scores(model, pass, layer as usize, pos, target, cfg)?))
                    }
                    Scorer::SaeFeature(sae) => {
                        let res = raw_parts(&rec.payload)?
                            .1
                            .ok_or_else(|| Error::Config("record lacks a residual".into()))?;
                        let res: Vec<T> = res.iter().map(|&x| T::of_f32(x)).collect();
                        LayerScores::Sparse(score_sae_features(sae, &res, layer)?.into_iter().map(|(i, v)| (i, v.f64())).collect())
                    }
                    Scorer::Stored => match &rec.payload {
                        RecordPayload::Scored { entries } => LayerScores::Sparse(entries.iter().map(|&(i, v)| (i, f64::from(v))).collect()),
                        RecordPayload::Raw { .. } => return Err(Error::Config("RAW record in a SCORED trace".into())),
                    },
                };
                row.push(scores);
            }
            tokens.push(row);
        }
        out.push(ScoreMatrix {
            sample_id: s.sample.sample_id.clone(),
            unit_kind,
            width,
            layers: set.layers.clone(),
            tokens,
        });
    }
    Ok(out)
}

/// Converts a RAW trace into a SCORED one holding the top `m_store`
/// vocabulary-projection scores of every record.
pub fn scored_from_raw<T: Real>(snap: &ModelSnapshot<T>, raw: &TraceSet, m_store: u32) -> Result<TraceSet> {
    let matrices = score_trace(raw, &Scorer::VocabProjection(snap))?;
    let mut out = raw.clone();
    out.mode = TraceMode::Scored;
    out.m_store = m_store;
    out.residual_dim = None;
    for (s, m) in out.samples.iter_mut().zip(&matrices) {
        let n_layers = m.layers.len();
        for (r, rec) in s.records.iter_mut().enumerate() {
            let LayerScores::Dense(scores) = &m.tokens[r / n_layers][r % n_layers] else {
                unreachable!("vocabulary projection is dense")
            };
            rec.payload = RecordPayload::Scored {
                entries: top_entries(scores, m_store as usize),
            };
        }
    }
    Ok(out)
}

/// `ResponseSum` sums each layer's scores over tokens into a single row;
/// `TokenLevel` is the identity.
pub fn aggregate_response(matrix: &ScoreMatrix, aggregation: Aggregation) -> ScoreMatrix {
    if aggregation == Aggregation::TokenLevel || matrix.tokens.is_empty() {
        return matrix.clone();
    }
    let row = (0..matrix.layers.len())
        .map(|slot| {
            let dense = matrix.tokens.iter().all(|t| matches!(t[slot], LayerScores::Dense(_)));
            if dense {
                let mut acc = vec![0.0; matrix.width];
                for t in &matrix.tokens {
                    if let LayerScores::Dense(v) = &t[slot] {
                        for (a, &x) in acc.iter_mut().zip(v) {
                            *a += x;
                        }
                    }
                }
                LayerScores::Dense(acc)
            } else {
                let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
                for t in &matrix.tokens {
                    for (i, x) in t[slot].entries() {
                        *acc.entry(i).or_insert(0.0) += x;
                    }
                }
                LayerScores::Sparse(acc.into_iter().collect())
            }
        })
        .collect();
    ScoreMatrix {
        tokens: vec![row],
        ..matrix.clone()
    }
}

/// Sum of vocabulary-projection scores: the FFN output's direct logit contribution.
pub fn ffn_direct_logit<T: Real>(snap: &ModelSnapshot<T>, layer: usize, activations: &[T], target: u32) -> T {
    dot(snap.w_u.row(target as usize), &snap.w_out[layer].matvec(activations))
}
