// SPDX-License-Identifier: Apache-2.0

use super::ToyModel;
use crate::error::{Error, Result};
use crate::num::{dot, Real};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Intermediate values of one block, per position.
#[derive(Debug, Clone)]
pub struct LayerState<T> {
    /// Residual entering the block.
    pub h_in: Vec<Vec<T>>,
    pub rms1: Vec<T>,
    pub x1: Vec<Vec<T>>,
    pub q: Vec<Vec<T>>,
    pub k: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// `probs[head][t]` holds softmax weights over positions `0..=t`.
    pub probs: Vec<Vec<Vec<T>>>,
    /// Concatenated head outputs before `W_o`.
    pub attn: Vec<Vec<T>>,
    /// Residual after the attention sub-layer (the FFN input before norm).
    pub h_mid: Vec<Vec<T>>,
    pub rms2: Vec<T>,
    pub x2: Vec<Vec<T>>,
    /// FFN pre-activation `W_in x2`.
    pub z: Vec<Vec<T>>,
    /// FFN post-activation σ(z), with masked units zeroed.
    pub a: Vec<Vec<T>>,
    /// Residual leaving the block.
    pub h_out: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerState<T>>,
    pub rms_f: Vec<T>,
    pub xf: Vec<Vec<T>>,
    pub logits: Vec<Vec<T>>,
}

pub(crate) fn rms_norm<T: Real>(x: &[T], gain: &[T]) -> (Vec<T>, T) {
    let ms = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::of_usize(x.len());
    let r = (ms + T::of(RMS_EPS)).sqrt();
    (x.iter().zip(gain).map(|(&v, &g)| g * v / r).collect(), r)
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

impl<T: Real> ToyModel<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Config("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                needed: tokens.len(),
                limit: self.config.context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Dimension(format!("token {t} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Runs the whole sequence and keeps every intermediate needed by
    /// training, tracing and attribution.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardPass<T>> {
        self.check_tokens(tokens)?;
        let w = &self.weights;
        let cfg = &self.config;
        let n_pos = tokens.len();
        let (n_heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let scale = T::one() / T::of_usize(dh).sqrt();

        let mut h: Vec<Vec<T>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                w.tok_emb
                    .row(t as usize)
                    .iter()
                    .zip(w.pos_emb.row(p))
                    .map(|(&a, &b)| a + b)
                    .collect()
            })
            .collect();

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, b) in w.blocks.iter().enumerate() {
            let h_in = h.clone();
            let (x1, rms1): (Vec<_>, Vec<_>) = h.iter().map(|x| rms_norm(x, &b.norm1)).unzip();
            let q: Vec<_> = x1.iter().map(|x| b.wq.matvec(x)).collect();
            let k: Vec<_> = x1.iter().map(|x| b.wk.matvec(x)).collect();
            let v: Vec<_> = x1.iter().map(|x| b.wv.matvec(x)).collect();
            let mut probs = vec![Vec::with_capacity(n_pos); n_heads];
            let mut attn = vec![vec![T::zero(); cfg.d_model]; n_pos];
            for hd in 0..n_heads {
                let span = hd * dh..(hd + 1) * dh;
                for t in 0..n_pos {
                    let mut p: Vec<T> = (0..=t)
                        .map(|u| dot(&q[t][span.clone()], &k[u][span.clone()]) * scale)
                        .collect();
                    softmax_in_place(&mut p);
                    let out = &mut attn[t][span.clone()];
                    for (u, &pu) in p.iter().enumerate() {
                        for (o, &vv) in out.iter_mut().zip(&v[u][span.clone()]) {
                            *o = *o + pu * vv;
                        }
                    }
                    probs[hd].push(p);
                }
            }
            for (ht, at) in h.iter_mut().zip(&attn) {
                add_into(ht, &b.wo.matvec(at));
            }
            let h_mid = h.clone();
            let (x2, rms2): (Vec<_>, Vec<_>) = h.iter().map(|x| rms_norm(x, &b.norm2)).unzip();
            let z: Vec<_> = x2.iter().map(|x| b.w_in.matvec(x)).collect();
            let keep = &self.keep_mask(l);
            let a: Vec<Vec<T>> = z
                .iter()
                .map(|zt| {
                    zt.iter()
                        .zip(keep.iter())
                        .map(|(&zi, &k)| if k { cfg.activation.apply(zi) } else { T::zero() })
                        .collect()
                })
                .collect();
            for (ht, at) in h.iter_mut().zip(&a) {
                add_into(ht, &b.w_out.matvec(at));
            }
            layers.push(LayerState {
                h_in,
                rms1,
                x1,
                q,
                k,
                v,
                probs,
                attn,
                h_mid,
                rms2,
                x2,
                z,
                a,
                h_out: h.clone(),
            });
        }

        let (xf, rms_f): (Vec<_>, Vec<_>) = h.iter().map(|x| rms_norm(x, &w.norm_f)).unzip();
        let w_u = w.unembedding();
        let logits = xf.iter().map(|x| w_u.matvec(x)).collect();
        Ok(ForwardPass {
            tokens: tokens.to_vec(),
            layers,
            rms_f,
            xf,
            logits,
        })
    }

    /// Final residual at `pos` when layer `layer`'s FFN activation vector at
    /// `pos` is replaced by `activation`; every other position and every
    /// earlier computation is taken from `pass`.
    pub fn residual_with_activation(&self, pass: &ForwardPass<T>, layer: usize, pos: usize, activation: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let w = &self.weights;
        let (n_heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let scale = T::one() / T::of_usize(dh).sqrt();

        let mut h = pass.layers[layer].h_mid[pos].clone();
        add_into(&mut h, &w.blocks[layer].w_out.matvec(activation));
        for l in layer + 1..cfg.n_layers {
            let b = &w.blocks[l];
            let cache = &pass.layers[l];
            let (x1, _) = rms_norm(&h, &b.norm1);
            let q = b.wq.matvec(&x1);
            let k = b.wk.matvec(&x1);
            let v = b.wv.matvec(&x1);
            let mut attn = vec![T::zero(); cfg.d_model];
            for hd in 0..n_heads {
                let span = hd * dh..(hd + 1) * dh;
                let key = |u: usize| if u == pos { &k[span.clone()] } else { &cache.k[u][span.clone()] };
                let val = |u: usize| if u == pos { &v[span.clone()] } else { &cache.v[u][span.clone()] };
                let mut p: Vec<T> = (0..=pos).map(|u| dot(&q[span.clone()], key(u)) * scale).collect();
                softmax_in_place(&mut p);
                for (u, &pu) in p.iter().enumerate() {
                    for (o, &vv) in attn[span.clone()].iter_mut().zip(val(u)) {
                        *o = *o + pu * vv;
                    }
                }
            }
            add_into(&mut h, &b.wo.matvec(&attn));
            let (x2, _) = rms_norm(&h, &b.norm2);
            let keep = self.keep_mask(l);
            let a: Vec<T> = b
                .w_in
                .matvec(&x2)
                .into_iter()
                .zip(keep)
                .map(|(zi, &k)| if k { cfg.activation.apply(zi) } else { T::zero() })
                .collect();
            add_into(&mut h, &b.w_out.matvec(&a));
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::super::{encode_prompt, ToyConfig};
    use super::*;

    #[test]
    fn partial_rerun_with_clean_activation_matches_full_pass() {
        let cfg = ToyConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            ffn_width: 24,
            context: 32,
            ..ToyConfig::default()
        };
        let m = ToyModel::<f64>::init(cfg.with_seed(3)).unwrap();
        let toks = encode_prompt("sort: dcba=");
        let pass = m.forward(&toks).unwrap();
        for layer in 0..3 {
            for pos in [0, 4, toks.len() - 1] {
                let h = m.residual_with_activation(&pass, layer, pos, &pass.layers[layer].a[pos]);
                for (x, y) in h.iter().zip(&pass.layers[2].h_out[pos]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prefix_logits_are_causal() {
        let m = ToyModel::<f64>::init(ToyConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_width: 16,
            context: 32,
            ..ToyConfig::default()
        })
        .unwrap();
        let toks = encode_prompt("copy: hello=");
        let full = m.forward(&toks).unwrap();
        let prefix = m.forward(&toks[..5]).unwrap();
        for (a, b) in full.logits[4].iter().zip(&prefix.logits[4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
