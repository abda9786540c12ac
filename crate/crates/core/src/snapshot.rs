// SPDX-License-Identifier: Apache-2.0

//! Attribution-relevant weights of an instrumented model and the `.musm` container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::num::{Matrix, Real};
use crate::trace::codec::{fnv1a64, Reader, Writer};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MUSM";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Silu => z / (T::one() + (-z).exp()),
            Activation::Gelu => {
                // tanh approximation
                let c = T::of(0.797_884_560_802_865_4);
                let half = T::of(0.5);
                half * z * (T::one() + (c * (z + T::of(0.044_715) * z * z * z)).tanh())
            }
        }
    }

    pub fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-z).exp());
                s * (T::one() + z * (T::one() - s))
            }
            Activation::Gelu => {
                let c = T::of(0.797_884_560_802_865_4);
                let k = T::of(0.044_715);
                let half = T::of(0.5);
                let inner = c * (z + k * z * z * z);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * k * z * z);
                half * (T::one() + t) + half * z * (T::one() - t * t) * dinner
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Silu => 1,
            Activation::Gelu => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, FormatError> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Silu),
            2 => Ok(Activation::Gelu),
            _ => Err(FormatError::Malformed(format!("unknown activation {c}"))),
        }
    }
}

/// Weights needed for vocabulary-projection attribution.
///
/// `w_in[l]` is `N × d_model`, `w_out[l]` is `d_model × N`, `w_u` is `V × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot<T> {
    pub model_id: String,
    pub d_model: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub w_in: Vec<Matrix<T>>,
    pub w_out: Vec<Matrix<T>>,
    pub w_u: Matrix<T>,
    /// Opaque extension sections, `(tag, bytes)`, e.g. `TOYW` for full toy weights.
    pub extensions: Vec<([u8; 4], Vec<u8>)>,
}

impl<T: Real> ModelSnapshot<T> {
    /// Builds a snapshot and stamps its content hash.
    pub fn new(
        activation: Activation,
        w_in: Vec<Matrix<T>>,
        w_out: Vec<Matrix<T>>,
        w_u: Matrix<T>,
    ) -> Result<Self> {
        let (ffn_width, d_model) = w_in
            .first()
            .map(|m| m.shape())
            .ok_or_else(|| Error::Dimension("snapshot needs at least one layer".into()))?;
        let mut snap = Self {
            model_id: String::new(),
            d_model,
            ffn_width,
            vocab_size: w_u.rows(),
            activation,
            w_in,
            w_out,
            w_u,
            extensions: Vec::new(),
        };
        snap.check_shapes()?;
        snap.model_id = snap.content_hash();
        Ok(snap)
    }

    pub fn n_layers(&self) -> usize {
        self.w_in.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.w_in.len() != self.w_out.len() {
            return Err(Error::Dimension(format!(
                "{} W_in layers vs {} W_out layers",
                self.w_in.len(),
                self.w_out.len()
            )));
        }
        for (l, (wi, wo)) in self.w_in.iter().zip(&self.w_out).enumerate() {
            if wi.shape() != (self.ffn_width, self.d_model) || wo.shape() != (self.d_model, self.ffn_width) {
                return Err(Error::Dimension(format!("layer {l} FFN shapes {:?}/{:?}", wi.shape(), wo.shape())));
            }
            if !wi.is_finite() || !wo.is_finite() {
                return Err(Error::Numeric(format!("layer {l} has non-finite weights")));
            }
        }
        if self.w_u.shape() != (self.vocab_size, self.d_model) {
            return Err(Error::Dimension(format!("unembedding shape {:?}", self.w_u.shape())));
        }
        if !self.w_u.is_finite() {
            return Err(Error::Numeric("unembedding has non-finite weights".into()));
        }
        Ok(())
    }

    fn weight_bytes(&self) -> Writer {
        let mut w = Writer::new(b"HASH", 0);
        w.u32(self.n_layers() as u32);
        w.u32(self.d_model as u32);
        w.u32(self.ffn_width as u32);
        w.u32(self.vocab_size as u32);
        w.u8(self.activation.code());
        for m in self.w_in.iter().chain(&self.w_out).chain(std::iter::once(&self.w_u)) {
            for &x in m.as_slice() {
                w.f32(x.f32());
            }
        }
        w
    }

    /// `fnv1a64:<hex>` over the serialized (f32) weights.
    pub fn content_hash(&self) -> String {
        format!("fnv1a64:{:016x}", fnv1a64(self.weight_bytes().payload()))
    }

    pub fn extension(&self, tag: &[u8; 4]) -> Option<&[u8]> {
        self.extensions
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, b)| b.as_slice())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let mut w = Writer::new(SNAPSHOT_MAGIC, SNAPSHOT_VERSION);
        w.str(&self.model_id);
        w.bytes(self.weight_bytes().payload());
        w.len_prefix(self.extensions.len());
        for (tag, body) in &self.extensions {
            w.bytes(tag);
            w.len_prefix(body.len());
            w.bytes(body);
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        let model_id = r.str("model_id")?;
        let n_layers = r.u32("dims")? as usize;
        let d_model = r.u32("dims")? as usize;
        let ffn_width = r.u32("dims")? as usize;
        let vocab_size = r.u32("dims")? as usize;
        let activation = Activation::from_code(r.u8("activation")?)?;
        let read_matrix = |r: &mut Reader<'_>, rows: usize, cols: usize| -> Result<Matrix<T>, FormatError> {
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n.saturating_mul(4) <= bytes.len())
                .ok_or(FormatError::Truncated { context: "weights" })?;
            let data = (0..n)
                .map(|_| r.f32("weights").map(T::of_f32))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Matrix::from_vec(rows, cols, data))
        };
        let w_in = (0..n_layers)
            .map(|_| read_matrix(&mut r, ffn_width, d_model))
            .collect::<Result<Vec<_>, _>>()?;
        let w_out = (0..n_layers)
            .map(|_| read_matrix(&mut r, d_model, ffn_width))
            .collect::<Result<Vec<_>, _>>()?;
        let w_u = read_matrix(&mut r, vocab_size, d_model)?;
        let n_ext = r.len_prefix(12, "extensions")?;
        let mut extensions = Vec::with_capacity(n_ext);
        for _ in 0..n_ext {
            let tag: [u8; 4] = r.raw(4, "extension tag")?.try_into().expect("4 bytes");
            let len = r.len_prefix(1, "extension body")?;
            extensions.push((tag, r.raw(len, "extension body")?.to_vec()));
        }
        r.finish()?;
        let snap = Self {
            model_id,
            d_model,
            ffn_width,
            vocab_size,
            activation,
            w_in,
            w_out,
            w_u,
            extensions,
        };
        let computed = snap.content_hash();
        if computed != snap.model_id {
            return Err(FormatError::HashMismatch {
                stored: snap.model_id,
                computed,
            }
            .into());
        }
        Ok(snap)
    }
}

pub fn write_snapshot<T: Real>(path: impl AsRef<Path>, snap: &ModelSnapshot<T>) -> Result<u64> {
    let bytes = snap.encode()?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_snapshot<T: Real>(path: impl AsRef<Path>) -> Result<ModelSnapshot<T>> {
    ModelSnapshot::decode(&fs::read(path)?)
}
