// SPDX-License-Identifier: Apache-2.0

//! Shared data model for activation traces and the `.muit` container.
//!
//! A [`TraceSet`] holds one record per (response token, instrumented layer)
//! for every traced sample. Records are either RAW (post-activation FFN
//! values, optionally with the residual stream) or SCORED (the top
//! `m_store` contribution entries, precomputed).

pub mod codec;
mod file;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use file::{decode_trace, encode_trace, read_trace, write_trace};

/// Default stored-entry cap for SCORED traces.
pub const DEFAULT_M_STORE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Neuron,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceMode {
    Raw,
    Scored,
}

/// A neuron or SAE feature, identified by 0-based `(layer, index)`.
///
/// Ordering is lexicographic on `(layer, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: u32,
    pub index: u32,
}

impl UnitId {
    pub const fn new(layer: u32, index: u32) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LengthClass {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub sample_id: String,
    pub capability_tag: String,
    pub domain_tag: Option<String>,
    pub prompt_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
    pub correct: Option<bool>,
}

impl TaskSample {
    /// Long when the response is strictly longer than half of `max_len`.
    pub fn length_class(&self, max_len: usize) -> LengthClass {
        if 2 * self.response_tokens.len() > max_len {
            LengthClass::Long
        } else {
            LengthClass::Short
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordPayload {
    Raw {
        /// σ(W_in x) at the last position before the predicted token; length N.
        activations: Vec<f32>,
        /// Residual stream at the output of the layer; length d_model.
        residual: Option<Vec<f32>>,
    },
    Scored {
        /// `(unit index, score)`, score descending, ties by ascending index.
        entries: Vec<(u32, f32)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayerRecord {
    pub token_pos: u32,
    pub layer: u32,
    pub payload: RecordPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub sample: TaskSample,
    /// Token-major, then in the order of [`TraceSet::layers`].
    pub records: Vec<TokenLayerRecord>,
}

impl SampleTrace {
    pub fn record(&self, token_pos: usize, layer_slot: usize, n_layers: usize) -> &TokenLayerRecord {
        &self.records[token_pos * n_layers + layer_slot]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub model_id: String,
    pub mode: TraceMode,
    pub unit_kind: UnitKind,
    /// Units per layer (FFN width N for neurons, dictionary size D for features).
    pub width: u32,
    pub vocab_size: u32,
    /// Instrumented layers, ascending.
    pub layers: Vec<u32>,
    pub m_store: u32,
    /// Residual width when records carry residual vectors.
    pub residual_dim: Option<u32>,
    pub samples: Vec<SampleTrace>,
}

impl TraceSet {
    pub fn empty(model_id: impl Into<String>, mode: TraceMode, unit_kind: UnitKind, width: u32, vocab_size: u32, layers: Vec<u32>) -> Self {
        Self {
            model_id: model_id.into(),
            mode,
            unit_kind,
            width,
            vocab_size,
            layers,
            m_store: DEFAULT_M_STORE,
            residual_dim: None,
            samples: Vec::new(),
        }
    }

    pub fn total_units(&self) -> usize {
        self.width as usize * self.layers.len()
    }

    pub fn max_response_len(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.sample.response_tokens.len())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    Ordering,
    Coverage,
    Mode,
    Range,
    NonFinite,
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub sample: Option<usize>,
    pub record: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(s) = self.sample {
            write!(f, " sample {s}")?;
        }
        if let Some(r) = self.record {
            write!(f, " record {r}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Sorts scored entries into canonical order: score descending, index ascending.
pub fn canonical_order(entries: &mut [(u32, f32)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Narrows dense scores to f32 and keeps the top `m_store` in canonical order.
pub fn top_entries<S: crate::Real>(scores: &[S], m_store: usize) -> Vec<(u32, f32)> {
    let mut entries: Vec<(u32, f32)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u32, s.f32()))
        .collect();
    canonical_order(&mut entries);
    entries.truncate(m_store);
    entries
}

/// Reports every invariant violation; an empty list means the set is well formed.
pub fn validate_trace(set: &TraceSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, sample, record, detail: String| {
        out.push(Violation {
            kind,
            sample,
            record,
            detail,
        })
    };

    if set.width == 0 {
        push(ViolationKind::Shape, None, None, "width is zero".into());
    }
    if set.layers.windows(2).any(|w| w[0] >= w[1]) {
        push(ViolationKind::Ordering, None, None, "layers not strictly ascending".into());
    }
    if set.mode == TraceMode::Scored && set.residual_dim.is_some() {
        push(ViolationKind::Mode, None, None, "SCORED traces cannot carry residuals".into());
    }
    let n_layers = set.layers.len();
    let mut seen_ids = HashSet::new();

    for (si, st) in set.samples.iter().enumerate() {
        let s = &st.sample;
        let sample = Some(si);
        if !seen_ids.insert(s.sample_id.as_str()) {
            push(ViolationKind::Coverage, sample, None, format!("duplicate sample id {:?}", s.sample_id));
        }
        if s.response_tokens.is_empty() {
            push(ViolationKind::Empty, sample, None, "empty response".into());
        }
        if let Some(t) = s
            .prompt_tokens
            .iter()
            .chain(&s.response_tokens)
            .find(|&&t| t >= set.vocab_size)
        {
            push(ViolationKind::Range, sample, None, format!("token {t} >= vocab {}", set.vocab_size));
        }
        let expected = s.response_tokens.len() * n_layers;
        if st.records.len() != expected {
            push(
                ViolationKind::Coverage,
                sample,
                None,
                format!("{} records, expected {expected}", st.records.len()),
            );
        }
        for (ri, rec) in st.records.iter().enumerate() {
            let record = Some(ri);
            if n_layers > 0 {
                let (pos, slot) = (ri / n_layers, ri % n_layers);
                if rec.token_pos as usize != pos || set.layers.get(slot) != Some(&rec.layer) {
                    push(
                        ViolationKind::Coverage,
                        sample,
                        record,
                        format!(
                            "record (pos {}, layer {}) out of canonical order",
                            rec.token_pos, rec.layer
                        ),
                    );
                }
            }
            match (&rec.payload, set.mode) {
                (RecordPayload::Raw { activations, residual }, TraceMode::Raw) => {
                    if activations.len() != set.width as usize {
                        push(
                            ViolationKind::Shape,
                            sample,
                            record,
                            format!("activation length {} != width {}", activations.len(), set.width),
                        );
                    }
                    if activations.iter().any(|x| !x.is_finite()) {
                        push(ViolationKind::NonFinite, sample, record, "non-finite activation".into());
                    }
                    match (residual, set.residual_dim) {
                        (Some(r), Some(d)) => {
                            if r.len() != d as usize {
                                push(
                                    ViolationKind::Shape,
                                    sample,
                                    record,
                                    format!("residual length {} != {d}", r.len()),
                                );
                            } else if r.iter().any(|x| !x.is_finite()) {
                                push(ViolationKind::NonFinite, sample, record, "non-finite residual".into());
                            }
                        }
                        (None, None) => {}
                        (Some(_), None) => push(
                            ViolationKind::Shape,
                            sample,
                            record,
                            "residual present but trace declares none".into(),
                        ),
                        (None, Some(_)) => {
                            push(ViolationKind::Shape, sample, record, "residual missing".into())
                        }
                    }
                }
                (RecordPayload::Scored { entries }, TraceMode::Scored) => {
                    if entries.len() > set.m_store as usize {
                        push(
                            ViolationKind::Shape,
                            sample,
                            record,
                            format!("{} entries exceed m_store {}", entries.len(), set.m_store),
                        );
                    }
                    let mut idx = HashSet::with_capacity(entries.len());
                    for &(i, v) in entries {
                        if i >= set.width {
                            push(ViolationKind::Range, sample, record, format!("unit {i} >= width"));
                        }
                        if !idx.insert(i) {
                            push(ViolationKind::Ordering, sample, record, format!("duplicate unit {i}"));
                        }
                        if !v.is_finite() {
                            push(ViolationKind::NonFinite, sample, record, "non-finite score".into());
                        }
                    }
                    let sorted = entries.windows(2).all(|w| {
                        w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)
                    });
                    if !sorted {
                        push(ViolationKind::Ordering, sample, record, "entries not in canonical order".into());
                    }
                }
                _ => push(
                    ViolationKind::Mode,
                    sample,
                    record,
                    format!("payload kind does not match {:?} trace", set.mode),
                ),
            }
        }
    }
    out
}
