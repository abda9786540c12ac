// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ToyConfig;
use crate::error::{Error, FormatError, Result};
use crate::num::{Matrix, Real};
use crate::trace::codec::{Reader, Writer};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub norm2: Vec<T>,
    /// `N × d_model`
    pub w_in: Matrix<T>,
    /// `d_model × N`
    pub w_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights<T> {
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_f: Vec<T>,
    /// `None` when the unembedding is tied to `tok_emb`.
    pub w_u: Option<Matrix<T>>,
}

impl<T: Real> ToyWeights<T> {
    pub fn init<R: Rng>(cfg: &ToyConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        Self::build(cfg, |scale| T::of(normal.sample(rng) * scale))
    }

    /// Norm gains start at one; every other entry comes from `sample(scale)`.
    fn build(cfg: &ToyConfig, mut sample: impl FnMut(f64) -> T) -> Self {
        let out_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| sample(scale))
        };
        let (d, n, v) = (cfg.d_model, cfg.ffn_width, cfg.vocab_size);
        let tok_emb = draw(v, d, 1.0);
        let pos_emb = draw(cfg.context, d, 1.0);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                norm1: vec![T::one(); d],
                wq: draw(d, d, 1.0),
                wk: draw(d, d, 1.0),
                wv: draw(d, d, 1.0),
                wo: draw(d, d, out_scale),
                norm2: vec![T::one(); d],
                w_in: draw(n, d, 1.0),
                w_out: draw(d, n, out_scale),
            })
            .collect();
        let w_u = (!cfg.tied_embeddings).then(|| draw(v, d, 1.0));
        Self {
            tok_emb,
            pos_emb,
            blocks,
            norm_f: vec![T::one(); d],
            w_u,
        }
    }

    pub fn unembedding(&self) -> &Matrix<T> {
        self.w_u.as_ref().unwrap_or(&self.tok_emb)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: vec![T::zero(); b.norm1.len()],
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                    norm2: vec![T::zero(); b.norm2.len()],
                    w_in: z(&b.w_in),
                    w_out: z(&b.w_out),
                })
                .collect(),
            norm_f: vec![T::zero(); self.norm_f.len()],
            w_u: self.w_u.as_ref().map(z),
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![
            ("tok_emb", self.tok_emb.as_slice()),
            ("pos_emb", self.pos_emb.as_slice()),
        ];
        for b in &self.blocks {
            out.extend([
                ("norm1", b.norm1.as_slice()),
                ("wq", b.wq.as_slice()),
                ("wk", b.wk.as_slice()),
                ("wv", b.wv.as_slice()),
                ("wo", b.wo.as_slice()),
                ("norm2", b.norm2.as_slice()),
                ("w_in", b.w_in.as_slice()),
                ("w_out", b.w_out.as_slice()),
            ]);
        }
        out.push(("norm_f", self.norm_f.as_slice()));
        if let Some(w) = &self.w_u {
            out.push(("w_u", w.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.tok_emb.as_mut_slice(), self.pos_emb.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(b.norm1.as_mut_slice());
            out.push(b.wq.as_mut_slice());
            out.push(b.wk.as_mut_slice());
            out.push(b.wv.as_mut_slice());
            out.push(b.wo.as_mut_slice());
            out.push(b.norm2.as_mut_slice());
            out.push(b.w_in.as_mut_slice());
            out.push(b.w_out.as_mut_slice());
        }
        out.push(self.norm_f.as_mut_slice());
        if let Some(w) = &mut self.w_u {
            out.push(w.as_mut_slice());
        }
        out
    }

    /// `TOYW` body: JSON config (u32-length string) then every tensor as a
    /// length-prefixed f32 vector in canonical order.
    pub(crate) fn encode_toyw(&self, cfg: &ToyConfig) -> Result<Vec<u8>> {
        let mut w = Writer::new(b"TOYW", 1);
        w.str(&serde_json::to_string(cfg)?);
        let tensors = self.tensors();
        w.len_prefix(tensors.len());
        for (_, t) in tensors {
            let narrowed: Vec<f32> = t.iter().map(|x| x.f32()).collect();
            w.f32s(&narrowed);
        }
        Ok(w.payload().to_vec())
    }

    pub(crate) fn decode_toyw(body: &[u8]) -> Result<(ToyConfig, Self)> {
        // Re-wrap the body so the shared reader can be used; the section itself
        // is already covered by the container checksum.
        let mut framed = Writer::new(b"TOYW", 1);
        framed.bytes(body);
        let framed = framed.finish();
        let mut r = Reader::open(&framed, b"TOYW", 1)?;
        let cfg: ToyConfig = serde_json::from_str(&r.str("toy config")?)?;
        cfg.validate()?;
        let mut weights = Self::build(&cfg, |_| T::zero());
        let n = r.len_prefix(8, "toy tensors")?;
        let mut slots = weights.tensors_mut();
        if n != slots.len() {
            return Err(Error::Format(FormatError::Malformed(format!(
                "TOYW holds {n} tensors, config implies {}",
                slots.len()
            ))));
        }
        for slot in slots.iter_mut() {
            let values = r.f32s("toy tensor")?;
            if values.len() != slot.len() {
                return Err(Error::Format(FormatError::Malformed("TOYW tensor length".into())));
            }
            for (dst, v) in slot.iter_mut().zip(values) {
                *dst = T::of_f32(v);
            }
        }
        r.finish()?;
        Ok((cfg, weights))
    }
}
