// SPDX-License-Identifier: Apache-2.0

//! Residual-stream sparse autoencoders with TopK or JumpReLU sparsity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};
use crate::num::{Matrix, Real};
use crate::trace::codec::{Reader, Writer};
use crate::trace::{RecordPayload, TraceSet};

pub const SAE_MAGIC: &[u8; 4] = b"MUSA";
pub const SAE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sparsity {
    /// ReLU, then keep the `k` largest positive pre-activations.
    TopK { k: usize },
    /// Keep pre-activations above the per-feature threshold of each layer.
    JumpRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeLayer<T> {
    pub layer: u32,
    /// `D × d_model`
    pub w_e: Matrix<T>,
    pub b_e: Vec<T>,
    /// `d_model × D`
    pub w_d: Matrix<T>,
    pub b_d: Vec<T>,
    /// Per-feature thresholds; non-empty only under JumpReLU.
    pub theta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeSnapshot<T> {
    pub d_model: usize,
    /// Dictionary size D.
    pub width: usize,
    pub sparsity: Sparsity,
    /// Ascending by layer.
    pub layers: Vec<SaeLayer<T>>,
}

/// Sparse feature activations: indices unique and ascending, values positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector<T> {
    pub entries: Vec<(u32, T)>,
}

impl<T: Real> FeatureVector<T> {
    pub fn l0(&self) -> usize {
        self.entries.len()
    }
}

impl<T: Real> SaeSnapshot<T> {
    pub fn validate(&self) -> Result<()> {
        if self.width < self.d_model {
            return Err(Error::Dimension(format!("SAE width {} below d_model {}", self.width, self.d_model)));
        }
        if let Sparsity::TopK { k } = self.sparsity {
            if k == 0 || k > self.width {
                return Err(Error::Config(format!("TopK k = {k} outside 1..={}", self.width)));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && self.layers[i - 1].layer >= l.layer {
                return Err(Error::Dimension("SAE layers must be strictly ascending".into()));
            }
            let theta_len = match self.sparsity {
                Sparsity::TopK { .. } => 0,
                Sparsity::JumpRelu => self.width,
            };
            if l.w_e.shape() != (self.width, self.d_model)
                || l.w_d.shape() != (self.d_model, self.width)
                || l.b_e.len() != self.width
                || l.b_d.len() != self.d_model
                || l.theta.len() != theta_len
            {
                return Err(Error::Dimension(format!("SAE layer {} has inconsistent shapes", l.layer)));
            }
            let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
            if !(l.w_e.is_finite() && l.w_d.is_finite() && finite(&l.b_e) && finite(&l.b_d) && finite(&l.theta)) {
                return Err(Error::Numeric(format!("SAE layer {} has non-finite weights", l.layer)));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: u32) -> Result<&SaeLayer<T>> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .ok_or_else(|| Error::Dimension(format!("SAE does not cover layer {layer}")))
    }

    pub fn covered_layers(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn pre_activations(&self, layer: u32, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d_model {
            return Err(Error::Dimension(format!("residual length {} vs d_model {}", x.len(), self.d_model)));
        }
        let l = self.layer(layer)?;
        let mut pre = l.w_e.matvec(x);
        for (p, &b) in pre.iter_mut().zip(&l.b_e) {
            *p = *p + b;
        }
        Ok(pre)
    }

    pub fn encode(&self, layer: u32, x: &[T]) -> Result<FeatureVector<T>> {
        let pre = self.pre_activations(layer, x)?;
        Ok(match self.sparsity {
            Sparsity::TopK { k } => sparsify_top_k(&pre, k),
            Sparsity::JumpRelu => {
                let theta = &self.layer(layer)?.theta;
                FeatureVector {
                    entries: pre
                        .iter()
                        .enumerate()
                        .filter(|&(i, &p)| p > theta[i] && p > T::zero())
                        .map(|(i, &p)| (i as u32, p))
                        .collect(),
                }
            }
        })
    }

    pub fn decode(&self, layer: u32, f: &FeatureVector<T>) -> Result<Vec<T>> {
        let l = self.layer(layer)?;
        let mut out = l.b_d.clone();
        for &(i, v) in &f.entries {
            for (r, o) in out.iter_mut().enumerate() {
                *o = *o + l.w_d.get(r, i as usize) * v;
            }
        }
        Ok(out)
    }

    /// `‖x − decode(encode(x))‖² / d_model`.
    pub fn squared_error(&self, layer: u32, x: &[T]) -> Result<f64> {
        let rec = self.decode(layer, &self.encode(layer, x)?)?;
        Ok(x.iter().zip(&rec).map(|(&a, &b)| (a - b).f64().powi(2)).sum::<f64>() / self.d_model as f64)
    }

    pub fn encode_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new(SAE_MAGIC, SAE_VERSION);
        w.u32(self.d_model as u32);
        w.u32(self.width as u32);
        match self.sparsity {
            Sparsity::TopK { k } => {
                w.u8(0);
                w.u32(k as u32);
            }
            Sparsity::JumpRelu => {
                w.u8(1);
                w.u32(0);
            }
        }
        w.len_prefix(self.layers.len());
        let narrow = |v: &[T]| v.iter().map(|x| x.f32()).collect::<Vec<f32>>();
        for l in &self.layers {
            w.u32(l.layer);
            w.f32s(&narrow(l.w_e.as_slice()));
            w.f32s(&narrow(&l.b_e));
            w.f32s(&narrow(l.w_d.as_slice()));
            w.f32s(&narrow(&l.b_d));
            w.f32s(&narrow(&l.theta));
        }
        Ok(w.finish())
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, SAE_MAGIC, SAE_VERSION)?;
        let d_model = r.u32("dims")? as usize;
        let width = r.u32("dims")? as usize;
        let kind = r.u8("sparsity")?;
        let k = r.u32("sparsity")? as usize;
        let sparsity = match kind {
            0 => Sparsity::TopK { k },
            1 => Sparsity::JumpRelu,
            other => return Err(FormatError::Malformed(format!("sparsity code {other}")).into()),
        };
        let n = r.len_prefix(4, "layers")?;
        let widen = |v: Vec<f32>| v.into_iter().map(T::of_f32).collect::<Vec<T>>();
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = r.u32("layer")?;
            let w_e = widen(r.f32s("w_e")?);
            let b_e = widen(r.f32s("b_e")?);
            let w_d = widen(r.f32s("w_d")?);
            let b_d = widen(r.f32s("b_d")?);
            let theta = widen(r.f32s("theta")?);
            if w_e.len() != width * d_model || w_d.len() != width * d_model {
                return Err(FormatError::Malformed(format!("layer {layer} matrix sizes")).into());
            }
            layers.push(SaeLayer {
                layer,
                w_e: Matrix::from_vec(width, d_model, w_e),
                b_e,
                w_d: Matrix::from_vec(d_model, width, w_d),
                b_d,
                theta,
            });
        }
        r.finish()?;
        let sae = Self {
            d_model,
            width,
            sparsity,
            layers,
        };
        sae.validate()?;
        Ok(sae)
    }
}

/// ReLU then top-`k` by value, ties to the lower index; result ascending by index.
pub fn sparsify_top_k<T: Real>(pre: &[T], k: usize) -> FeatureVector<T> {
    let mut pos: Vec<(u32, T)> = pre
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > T::zero())
        .map(|(i, &p)| (i as u32, p))
        .collect();
    pos.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    pos.truncate(k);
    pos.sort_by_key(|e| e.0);
    FeatureVector { entries: pos }
}

pub fn write_sae<T: Real>(path: impl AsRef<Path>, sae: &SaeSnapshot<T>) -> Result<u64> {
    let bytes = sae.encode_bytes()?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_sae<T: Real>(path: impl AsRef<Path>) -> Result<SaeSnapshot<T>> {
    SaeSnapshot::decode_bytes(&fs::read(path)?)
}

/// Residual vectors of `layer`, in sample/token order.
pub fn residuals_of(traces: &TraceSet, layer: u32) -> Result<Vec<Vec<f64>>> {
    if traces.residual_dim.is_none() {
        return Err(Error::Config("trace carries no residual vectors".into()));
    }
    let mut out = Vec::new();
    for s in &traces.samples {
        for rec in s.records.iter().filter(|r| r.layer == layer) {
            match &rec.payload {
                RecordPayload::Raw {
                    residual: Some(res), ..
                } => out.push(res.iter().map(|&x| f64::from(x)).collect()),
                _ => return Err(Error::Config(format!("record of sample {} lacks a residual", s.sample.sample_id))),
            }
        }
    }
    Ok(out)
}

/// Mean per-layer reconstruction error over every residual in the trace.
pub fn reconstruction_loss(sae: &SaeSnapshot<f64>, traces: &TraceSet) -> Result<Vec<(u32, f64)>> {
    sae.layers
        .iter()
        .map(|l| {
            let xs = residuals_of(traces, l.layer)?;
            let total = xs.iter().map(|x| sae.squared_error(l.layer, x)).sum::<Result<f64>>()?;
            Ok((l.layer, if xs.is_empty() { 0.0 } else { total / xs.len() as f64 }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainConfig {
    pub width: usize,
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between full-data loss checkpoints.
    pub eval_every: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            width: 128,
            k: 8,
            steps: 2000,
            lr: 0.5,
            batch_size: 32,
            seed: 0,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaeTrainReport {
    /// Per layer: accepted checkpoint losses, non-increasing.
    pub checkpoints: Vec<(u32, Vec<f64>)>,
}

impl SaeTrainReport {
    /// Final accepted training loss of each layer.
    pub fn final_losses(&self) -> Vec<(u32, f64)> {
        self.checkpoints
            .iter()
            .map(|(l, c)| (*l, *c.last().expect("initial checkpoint")))
            .collect()
    }
}

/// Seeded TopK SAE initialization for every residual-bearing layer of `traces`.
pub fn init_toy_sae(traces: &TraceSet, cfg: &SaeTrainConfig) -> Result<SaeSnapshot<f64>> {
    let d = traces
        .residual_dim
        .ok_or_else(|| Error::Config("trace carries no residual vectors".into()))? as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut layers = Vec::with_capacity(traces.layers.len());
    for &layer in &traces.layers {
        let xs = residuals_of(traces, layer)?;
        let mut mean = vec![0.0; d];
        for x in &xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / xs.len().max(1) as f64;
            }
        }
        let w_e = Matrix::from_fn(cfg.width, d, |_, _| normal.sample(&mut rng));
        let w_d = Matrix::from_fn(d, cfg.width, |r, c| w_e.get(c, r));
        layers.push(SaeLayer {
            layer,
            w_e,
            b_e: vec![0.0; cfg.width],
            w_d,
            b_d: mean,
            theta: Vec::new(),
        });
    }
    let sae = SaeSnapshot {
        d_model: d,
        width: cfg.width,
        sparsity: Sparsity::TopK { k: cfg.k },
        layers,
    };
    sae.validate()?;
    Ok(sae)
}

/// Trains a TopK SAE on the trace residuals with plain minibatch SGD.
///
/// Every `eval_every` steps the full-data loss is checked; a checkpoint whose
/// loss rose is rolled back and the learning rate halved, so accepted
/// checkpoint losses never increase.
pub fn train_toy_sae(traces: &TraceSet, cfg: &SaeTrainConfig) -> Result<(SaeSnapshot<f64>, SaeTrainReport)> {
    let mut sae = init_toy_sae(traces, cfg)?;
    let mut report = SaeTrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for li in 0..sae.layers.len() {
        let layer = sae.layers[li].layer;
        let xs = residuals_of(traces, layer)?;
        let full_loss = |s: &SaeSnapshot<f64>| -> Result<f64> {
            Ok(xs.iter().map(|x| s.squared_error(layer, x)).sum::<Result<f64>>()? / xs.len().max(1) as f64)
        };
        let mut accepted = vec![full_loss(&sae)?];
        if xs.is_empty() {
            report.checkpoints.push((layer, accepted));
            continue;
        }
        let mut lr = cfg.lr;
        let mut saved = sae.layers[li].clone();
        let d = sae.d_model;
        for step in 1..=cfg.steps {
            let mut g = SaeLayer {
                layer,
                w_e: Matrix::zeros(cfg.width, d),
                b_e: vec![0.0; cfg.width],
                w_d: Matrix::zeros(d, cfg.width),
                b_d: vec![0.0; d],
                theta: Vec::new(),
            };
            for _ in 0..cfg.batch_size {
                let x = &xs[rng.random_range(0..xs.len())];
                let f = sae.encode(layer, x)?;
                let rec = sae.decode(layer, &f)?;
                // d/d rec of ‖x − rec‖² / d, averaged over the batch.
                let scale = 2.0 / (d * cfg.batch_size) as f64;
                let dr: Vec<f64> = rec.iter().zip(x).map(|(r, x)| scale * (r - x)).collect();
                let l = &sae.layers[li];
                for (r, &v) in dr.iter().enumerate() {
                    g.b_d[r] += v;
                }
                for &(i, fi) in &f.entries {
                    let i = i as usize;
                    let mut df = 0.0;
                    for (r, &v) in dr.iter().enumerate() {
                        g.w_d.set(r, i, g.w_d.get(r, i) + v * fi);
                        df += l.w_d.get(r, i) * v;
                    }
                    g.b_e[i] += df;
                    for (c, &xc) in x.iter().enumerate() {
                        g.w_e.set(i, c, g.w_e.get(i, c) + df * xc);
                    }
                }
            }
            let l = &mut sae.layers[li];
            let upd = |w: &mut [f64], g: &[f64]| w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
            upd(l.w_e.as_mut_slice(), g.w_e.as_slice());
            upd(&mut l.b_e, &g.b_e);
            upd(l.w_d.as_mut_slice(), g.w_d.as_slice());
            upd(&mut l.b_d, &g.b_d);
            if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
                let loss = full_loss(&sae)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("SAE training diverged on layer {layer} at step {step}")));
                }
                let best = *accepted.last().expect("initial checkpoint");
                if loss <= best {
                    accepted.push(loss);
                    saved = sae.layers[li].clone();
                } else {
                    sae.layers[li] = saved.clone();
                    lr *= 0.5;
                }
            }
        }
        report.checkpoints.push((layer, accepted));
    }
    Ok((sae, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sae(sparsity: Sparsity, seed: u64) -> SaeSnapshot<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, w) = (4, 8);
        let theta = match sparsity {
            Sparsity::TopK { .. } => Vec::new(),
            Sparsity::JumpRelu => (0..w).map(|_| rng.random_range(0.0..0.5)).collect(),
        };
        SaeSnapshot {
            d_model: d,
            width: w,
            sparsity,
            layers: vec![SaeLayer {
                layer: 1,
                w_e: Matrix::from_fn(w, d, |_, _| rng.random_range(-1.0..1.0)),
                b_e: (0..w).map(|_| rng.random_range(-0.2..0.2)).collect(),
                w_d: Matrix::from_fn(d, w, |_, _| rng.random_range(-1.0..1.0)),
                b_d: vec![0.0; d],
                theta,
            }],
        }
    }

    /// SAE whose pre-activations equal the input vector.
    fn identity_sae(pre_len: usize, sparsity: Sparsity, theta: Vec<f64>) -> SaeSnapshot<f64> {
        SaeSnapshot {
            d_model: pre_len,
            width: pre_len,
            sparsity,
            layers: vec![SaeLayer {
                layer: 0,
                w_e: Matrix::from_fn(pre_len, pre_len, |r, c| if r == c { 1.0 } else { 0.0 }),
                b_e: vec![0.0; pre_len],
                w_d: Matrix::from_fn(pre_len, pre_len, |r, c| if r == c { 1.0 } else { 0.0 }),
                b_d: vec![0.0; pre_len],
                theta,
            }],
        }
    }

    #[test]
    fn top_k_enumeration() {
        let sae = identity_sae(4, Sparsity::TopK { k: 2 }, Vec::new());
        let f = sae.encode(0, &[3.0, 1.0, 2.0, -5.0]).unwrap();
        assert_eq!(f.entries, vec![(0, 3.0), (2, 2.0)]);
    }

    #[test]
    fn jump_relu_thresholds() {
        let sae = identity_sae(4, Sparsity::JumpRelu, vec![2.5, 0.0, 1.5, 0.0]);
        let f = sae.encode(0, &[3.0, 1.0, 2.0, -5.0]).unwrap();
        assert_eq!(f.entries, vec![(0, 3.0), (1, 1.0), (2, 2.0)]);
    }

    #[test]
    fn zero_input_gives_empty_features() {
        let mut sae = small_sae(Sparsity::TopK { k: 3 }, 1);
        sae.layers[0].b_e = vec![0.0; 8];
        assert!(sae.encode(1, &[0.0; 4]).unwrap().entries.is_empty());
        assert!(sae.encode(0, &[0.0; 4]).is_err());
    }

    #[test]
    fn decode_basics() {
        let sae = small_sae(Sparsity::TopK { k: 3 }, 2);
        assert_eq!(sae.decode(1, &FeatureVector::default()).unwrap(), vec![0.0; 4]);
        let col = sae.decode(1, &FeatureVector { entries: vec![(5, 1.0)] }).unwrap();
        assert_eq!(col, sae.layers[0].w_d.col(5));
    }

    #[test]
    fn exact_autoencoder_has_zero_loss() {
        let sae = identity_sae(3, Sparsity::TopK { k: 3 }, Vec::new());
        assert_eq!(sae.squared_error(0, &[0.5, 1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn musa_roundtrip_and_corruption() {
        for sparsity in [Sparsity::TopK { k: 3 }, Sparsity::JumpRelu] {
            let mut sae = small_sae(sparsity, 3);
            for l in &mut sae.layers {
                for x in l.w_e.as_mut_slice().iter_mut().chain(l.w_d.as_mut_slice()).chain(&mut l.b_e).chain(&mut l.theta) {
                    *x = f64::from(*x as f32);
                }
            }
            let bytes = sae.encode_bytes().unwrap();
            assert_eq!(&bytes[..4], b"MUSA");
            assert_eq!(SaeSnapshot::<f64>::decode_bytes(&bytes).unwrap(), sae);
            let mut bad = bytes.clone();
            bad[20] ^= 1;
            assert!(SaeSnapshot::<f64>::decode_bytes(&bad).is_err());
            assert!(SaeSnapshot::<f64>::decode_bytes(&bytes[..bytes.len() - 9]).is_err());
        }
    }
}
