// SPDX-License-Identifier: Apache-2.0

//! Evaluation and trace capture on suites.

use log::warn;

use super::{SuiteItem, TaskSuite, ToyModel};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::trace::{RecordPayload, SampleTrace, TaskSample, TokenLayerRecord, TraceMode, TraceSet, UnitKind};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub suite: String,
    /// `100 · correct / size`; zero for an empty suite.
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

impl EvalResult {
    pub fn from_flags(suite: impl Into<String>, correct: Vec<bool>) -> Self {
        let hits = correct.iter().filter(|&&c| c).count();
        let accuracy = if correct.is_empty() {
            0.0
        } else {
            100.0 * hits as f64 / correct.len() as f64
        };
        Self {
            suite: suite.into(),
            accuracy,
            correct,
        }
    }
}

/// Exact-match accuracy of greedy generation against the references.
pub fn evaluate<T: Real>(model: &ToyModel<T>, suite: &TaskSuite) -> Result<EvalResult> {
    let flags = suite
        .items
        .iter()
        .map(|item| {
            let reference = item.reference_tokens();
            Ok(model.generate(&item.prompt_tokens(), reference.len())? == reference)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_flags(&suite.name, flags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    /// The traced response is the model's own greedy output.
    #[default]
    FreeRunning,
    /// The traced response is the reference, teacher-forced.
    ForcedReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureOptions {
    pub decoding: Decoding,
    pub mode: TraceMode,
    /// Store the block-output residual alongside each RAW record.
    pub residuals: bool,
    /// Generation cap in FreeRunning mode; `None` uses the reference length.
    pub max_new: Option<usize>,
    pub m_store: u32,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self {
            decoding: Decoding::FreeRunning,
            mode: TraceMode::Raw,
            residuals: false,
            max_new: None,
            m_store: crate::trace::DEFAULT_M_STORE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub traces: TraceSet,
    /// Sample ids skipped because they do not fit the context.
    pub skipped: Vec<String>,
}

impl<T: Real> ToyModel<T> {
    /// Content hash of the exported snapshot.
    pub fn model_id(&self) -> Result<String> {
        Ok(self.snapshot_export()?.model_id)
    }

    /// Response tokens for `item` under `decoding`.
    fn response(&self, item: &SuiteItem, decoding: Decoding, max_new: Option<usize>) -> Result<Vec<u32>> {
        let reference = item.reference_tokens();
        match decoding {
            Decoding::ForcedReference => Ok(reference),
            Decoding::FreeRunning => self.generate(&item.prompt_tokens(), max_new.unwrap_or(reference.len())),
        }
    }
}

/// Records every (response token, layer) of every item. Samples that do not
/// fit the context, or whose free-running response is empty, are skipped and
/// tallied.
pub fn trace_capture<T: Real>(model: &ToyModel<T>, items: &[SuiteItem], opts: &CaptureOptions) -> Result<Capture> {
    let cfg = &model.config;
    let mut traces = TraceSet::empty(
        model.model_id()?,
        TraceMode::Raw,
        UnitKind::Neuron,
        cfg.ffn_width as u32,
        cfg.vocab_size as u32,
        (0..cfg.n_layers as u32).collect(),
    );
    traces.m_store = opts.m_store;
    traces.residual_dim = opts.residuals.then_some(cfg.d_model as u32);
    let mut skipped = Vec::new();
    for item in items {
        let prompt = item.prompt_tokens();
        let response = match model.response(item, opts.decoding, opts.max_new) {
            Ok(r) if !r.is_empty() => r,
            Ok(_) | Err(Error::ContextOverflow { .. }) => {
                skipped.push(item.id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut seq = prompt.clone();
        seq.extend_from_slice(&response[..response.len() - 1]);
        if seq.len() > cfg.context {
            skipped.push(item.id.clone());
            continue;
        }
        let pass = model.forward(&seq)?;
        let mut records = Vec::with_capacity(response.len() * cfg.n_layers);
        for j in 0..response.len() {
            let pos = prompt.len() + j - 1;
            for (l, st) in pass.layers.iter().enumerate() {
                records.push(TokenLayerRecord {
                    token_pos: j as u32,
                    layer: l as u32,
                    payload: RecordPayload::Raw {
                        activations: st.a[pos].iter().map(|x| x.f32()).collect(),
                        residual: opts.residuals.then(|| st.h_out[pos].iter().map(|x| x.f32()).collect()),
                    },
                });
            }
        }
        let correct = response == item.reference_tokens();
        traces.samples.push(SampleTrace {
            sample: TaskSample {
                sample_id: item.id.clone(),
                capability_tag: item.capability_tag.clone(),
                domain_tag: item.domain_tag.clone(),
                prompt_tokens: prompt,
                response_tokens: response,
                correct: Some(correct),
            },
            records,
        });
    }
    if !skipped.is_empty() {
        warn!("trace capture skipped {} sample(s) that overflow the context", skipped.len());
    }
    if opts.mode == TraceMode::Scored {
        let snap = model.snapshot_export()?;
        traces = crate::attribution::scored_from_raw(&snap, &traces, opts.m_store)?;
    }
    Ok(Capture { traces, skipped })
}
