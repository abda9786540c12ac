// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;

use super::codec::{Reader, Writer};
use super::{
    validate_trace, RecordPayload, SampleTrace, TaskSample, TokenLayerRecord, TraceMode, TraceSet,
    UnitKind,
};
use crate::error::{Error, FormatError, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"MUIT";
pub const TRACE_VERSION: u32 = 1;

const PAYLOAD_RAW: u8 = 0;
const PAYLOAD_SCORED: u8 = 1;

/// Serializes a validated trace set. Identical input always yields identical bytes.
pub fn encode_trace(set: &TraceSet) -> Result<Vec<u8>> {
    let violations = validate_trace(set);
    if !violations.is_empty() {
        return Err(Error::InvalidTrace(violations));
    }
    let mut w = Writer::new(TRACE_MAGIC, TRACE_VERSION);
    w.str(&set.model_id);
    w.u8(match set.mode {
        TraceMode::Raw => 0,
        TraceMode::Scored => 1,
    });
    w.u8(match set.unit_kind {
        UnitKind::Neuron => 0,
        UnitKind::Feature => 1,
    });
    w.u32(set.width);
    w.u32(set.vocab_size);
    w.u32s(&set.layers);
    w.u32(set.m_store);
    match set.residual_dim {
        Some(d) => {
            w.u8(1);
            w.u32(d);
        }
        None => w.u8(0),
    }
    w.len_prefix(set.samples.len());
    for st in &set.samples {
        encode_sample(&mut w, &st.sample);
        w.len_prefix(st.records.len());
        for rec in &st.records {
            w.u32(rec.token_pos);
            w.u32(rec.layer);
            match &rec.payload {
                RecordPayload::Raw {
                    activations,
                    residual,
                } => {
                    w.u8(PAYLOAD_RAW);
                    w.f32s(activations);
                    match residual {
                        Some(r) => {
                            w.u8(1);
                            w.f32s(r);
                        }
                        None => w.u8(0),
                    }
                }
                RecordPayload::Scored { entries } => {
                    w.u8(PAYLOAD_SCORED);
                    w.len_prefix(entries.len());
                    for &(i, s) in entries {
                        w.u32(i);
                        w.f32(s);
                    }
                }
            }
        }
    }
    Ok(w.finish())
}

fn encode_sample(w: &mut Writer, s: &TaskSample) {
    w.str(&s.sample_id);
    w.str(&s.capability_tag);
    match &s.domain_tag {
        Some(d) => {
            w.u8(1);
            w.str(d);
        }
        None => w.u8(0),
    }
    w.u8(match s.correct {
        None => 0,
        Some(false) => 1,
        Some(true) => 2,
    });
    w.u32s(&s.prompt_tokens);
    w.u32s(&s.response_tokens);
}

pub fn decode_trace(bytes: &[u8]) -> Result<TraceSet> {
    let mut r = Reader::open(bytes, TRACE_MAGIC, TRACE_VERSION)?;
    let model_id = r.str("model_id")?;
    let mode = match r.u8("mode")? {
        0 => TraceMode::Raw,
        1 => TraceMode::Scored,
        m => return Err(FormatError::Malformed(format!("unknown mode {m}")).into()),
    };
    let unit_kind = match r.u8("unit kind")? {
        0 => UnitKind::Neuron,
        1 => UnitKind::Feature,
        k => return Err(FormatError::Malformed(format!("unknown unit kind {k}")).into()),
    };
    let width = r.u32("width")?;
    let vocab_size = r.u32("vocab size")?;
    let layers = r.u32s("layers")?;
    let m_store = r.u32("m_store")?;
    let residual_dim = match r.u8("residual flag")? {
        0 => None,
        1 => Some(r.u32("residual dim")?),
        f => return Err(FormatError::Malformed(format!("bad residual flag {f}")).into()),
    };
    // Each sample needs at least its fixed-size header; this bounds the allocation.
    let n_samples = r.len_prefix(27, "sample count")?;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let sample = decode_sample(&mut r)?;
        let n_records = r.len_prefix(9, "record count")?;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let token_pos = r.u32("record")?;
            let layer = r.u32("record")?;
            let payload = match r.u8("record payload kind")? {
                PAYLOAD_RAW => {
                    let activations = r.f32s("activations")?;
                    let residual = match r.u8("residual flag")? {
                        0 => None,
                        1 => Some(r.f32s("residual")?),
                        f => {
                            return Err(FormatError::Malformed(format!("bad residual flag {f}")).into())
                        }
                    };
                    RecordPayload::Raw {
                        activations,
                        residual,
                    }
                }
                PAYLOAD_SCORED => {
                    let n = r.len_prefix(8, "scored entries")?;
                    let mut entries = Vec::with_capacity(n);
                    for _ in 0..n {
                        entries.push((r.u32("entry")?, r.f32("entry")?));
                    }
                    RecordPayload::Scored { entries }
                }
                k => return Err(FormatError::Malformed(format!("unknown payload kind {k}")).into()),
            };
            records.push(TokenLayerRecord {
                token_pos,
                layer,
                payload,
            });
        }
        samples.push(SampleTrace { sample, records });
    }
    r.finish()?;
    Ok(TraceSet {
        model_id,
        mode,
        unit_kind,
        width,
        vocab_size,
        layers,
        m_store,
        residual_dim,
        samples,
    })
}

fn decode_sample(r: &mut Reader<'_>) -> Result<TaskSample, FormatError> {
    let sample_id = r.str("sample id")?;
    let capability_tag = r.str("capability tag")?;
    let domain_tag = match r.u8("domain flag")? {
        0 => None,
        1 => Some(r.str("domain tag")?),
        f => return Err(FormatError::Malformed(format!("bad domain flag {f}"))),
    };
    let correct = match r.u8("correct flag")? {
        0 => None,
        1 => Some(false),
        2 => Some(true),
        f => return Err(FormatError::Malformed(format!("bad correctness flag {f}"))),
    };
    let prompt_tokens = r.u32s("prompt tokens")?;
    let response_tokens = r.u32s("response tokens")?;
    Ok(TaskSample {
        sample_id,
        capability_tag,
        domain_tag,
        prompt_tokens,
        response_tokens,
        correct,
    })
}

/// Writes `set` to `path`, returning the byte count. Nothing is written if
/// the set fails validation.
pub fn write_trace(path: impl AsRef<Path>, set: &TraceSet) -> Result<u64> {
    let bytes = encode_trace(set)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceSet> {
    let bytes = fs::read(path)?;
    decode_trace(&bytes)
}
