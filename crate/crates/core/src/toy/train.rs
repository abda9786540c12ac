// SPDX-License-Identifier: Apache-2.0

//! Manual backpropagation and plain SGD for the toy transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::ForwardPass;
use super::{Block, TaskSuite, ToyModel, ToyWeights};
use crate::error::{Error, Result};
use crate::num::{dot, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            batch_size: 16,
            seed: 0,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean reference-token cross-entropy of each step's batch, before the update.
    pub losses: Vec<f64>,
}

/// One training sequence: `prompt ++ reference`, with loss on the reference tokens.
fn sequence(item: &super::SuiteItem) -> (Vec<u32>, usize) {
    let mut toks = item.prompt_tokens();
    let p = toks.len();
    toks.extend(item.reference_tokens());
    (toks, p)
}

/// Trains a copy of `model` on `suite` and returns it with the loss history.
pub fn train_on_suite<T: Real>(model: &ToyModel<T>, suite: &TaskSuite, cfg: &TrainConfig) -> Result<(ToyModel<T>, TrainReport)> {
    let mut model = model.clone();
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok((model, report));
    }
    if suite.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("training needs a non-empty suite and batch".into()));
    }
    let seqs: Vec<_> = suite.items.iter().map(sequence).collect();
    if let Some((s, _)) = seqs.iter().find(|(s, _)| s.len() > model.config.context) {
        return Err(Error::ContextOverflow {
            needed: s.len(),
            limit: model.config.context,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = T::of(cfg.lr);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..seqs.len())).collect();
        let n_targets: usize = batch.iter().map(|&i| seqs[i].0.len() - seqs[i].1).sum();
        let mut grads = model.weights.zeros_like();
        let mut loss = 0.0;
        for &i in &batch {
            let (toks, p) = &seqs[i];
            loss += accumulate_gradients(&model, toks, *p, T::one() / T::of_usize(n_targets), &mut grads)?;
        }
        let loss = loss / n_targets as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}: loss {loss}")));
        }
        report.losses.push(loss);
        let mut factor = T::one();
        if let Some(clip) = cfg.clip {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|(_, t)| t.iter())
                .fold(0.0, |acc, g| acc + g.f64() * g.f64())
                .sqrt();
            if norm > clip {
                factor = T::of(clip / norm);
            }
        }
        for (w, (_, g)) in model.weights.tensors_mut().into_iter().zip(grads.tensors()) {
            for (wi, &gi) in w.iter_mut().zip(g) {
                *wi = *wi - lr * factor * gi;
            }
        }
    }
    Ok((model, report))
}

#[cfg(test)]
/// Cross-entropy (natural log) summed over the reference positions of one sequence.
pub(crate) fn sequence_loss<T: Real>(model: &ToyModel<T>, toks: &[u32], prompt_len: usize) -> Result<f64> {
    let pass = model.forward(toks)?;
    Ok((prompt_len..toks.len())
        .map(|j| {
            let logits = &pass.logits[j - 1];
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
            let lse = max + logits.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            lse - logits[toks[j] as usize].f64()
        })
        .sum())
}

/// Adds `scale · ∂loss/∂θ` for one sequence into `grads`; returns the summed loss.
fn accumulate_gradients<T: Real>(
    model: &ToyModel<T>,
    toks: &[u32],
    prompt_len: usize,
    scale: T,
    grads: &mut ToyWeights<T>,
) -> Result<f64> {
    let cfg = &model.config;
    let w = &model.weights;
    let pass = model.forward(toks)?;
    let n_pos = toks.len();
    let d = cfg.d_model;

    // Gradient w.r.t. the final normalized residual, per position.
    let mut dxf = vec![vec![T::zero(); d]; n_pos];
    let mut loss = 0.0;
    let w_u = w.unembedding();
    for j in prompt_len..n_pos {
        let t = j - 1;
        let logits = &pass.logits[t];
        let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let target = toks[j] as usize;
        loss += (sum.ln() + max - logits[target]).f64();
        let mut dlogits: Vec<T> = exps.iter().map(|&e| scale * e / sum).collect();
        dlogits[target] = dlogits[target] - scale;
        let gu = match &mut grads.w_u {
            Some(g) => g,
            None => &mut grads.tok_emb,
        };
        gu.add_outer(&dlogits, &pass.xf[t], T::one());
        dxf[t] = w_u.matvec_t(&dlogits);
    }

    let last = pass.layers.last().expect("validated config has layers");
    let mut dh: Vec<Vec<T>> = (0..n_pos)
        .map(|t| rms_backward(&last.h_out[t], &w.norm_f, pass.rms_f[t], &dxf[t], &mut grads.norm_f))
        .collect();

    for l in (0..cfg.n_layers).rev() {
        dh = block_backward(model, &pass, l, dh, &mut grads.blocks[l]);
    }
    for (t, g) in dh.iter().enumerate() {
        add_row(grads.tok_emb.row_mut(toks[t] as usize), g);
        add_row(grads.pos_emb.row_mut(t), g);
    }
    Ok(loss)
}

fn add_row<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

/// Backward through `y = g ⊙ x / r`; accumulates the gain gradient and returns `∂/∂x`.
fn rms_backward<T: Real>(x: &[T], gain: &[T], r: T, dy: &[T], dgain: &mut [T]) -> Vec<T> {
    let n = T::of_usize(x.len());
    let mut du = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        dgain[i] = dgain[i] + dy[i] * x[i] / r;
        du.push(dy[i] * gain[i]);
    }
    let u_dot: T = du.iter().zip(x).map(|(&a, &b)| a * b / r).sum();
    du.iter().zip(x).map(|(&g, &xi)| (g - xi / r * u_dot / n) / r).collect()
}

/// Takes `∂/∂h_out` for every position of layer `l`; returns `∂/∂h_in`.
fn block_backward<T: Real>(model: &ToyModel<T>, pass: &ForwardPass<T>, l: usize, dh_out: Vec<Vec<T>>, g: &mut Block<T>) -> Vec<Vec<T>> {
    let cfg = &model.config;
    let b = &model.weights.blocks[l];
    let st = &pass.layers[l];
    let keep = model.keep_mask(l);
    let n_pos = dh_out.len();
    let (n_heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
    let scale = T::one() / T::of_usize(dh).sqrt();

    // FFN sub-layer.
    let mut dh_mid = dh_out;
    for t in 0..n_pos {
        g.w_out.add_outer(&dh_mid[t], &st.a[t], T::one());
        let da = b.w_out.matvec_t(&dh_mid[t]);
        let dz: Vec<T> = da
            .iter()
            .zip(&st.z[t])
            .zip(keep)
            .map(|((&a, &z), &k)| if k { a * cfg.activation.derivative(z) } else { T::zero() })
            .collect();
        g.w_in.add_outer(&dz, &st.x2[t], T::one());
        let dx2 = b.w_in.matvec_t(&dz);
        let back = rms_backward(&st.h_mid[t], &b.norm2, st.rms2[t], &dx2, &mut g.norm2);
        add_row(&mut dh_mid[t], &back);
    }

    // Attention sub-layer.
    let mut dq = vec![vec![T::zero(); cfg.d_model]; n_pos];
    let mut dk = vec![vec![T::zero(); cfg.d_model]; n_pos];
    let mut dv = vec![vec![T::zero(); cfg.d_model]; n_pos];
    let dattn: Vec<Vec<T>> = (0..n_pos)
        .map(|t| {
            g.wo.add_outer(&dh_mid[t], &st.attn[t], T::one());
            b.wo.matvec_t(&dh_mid[t])
        })
        .collect();
    for hd in 0..n_heads {
        let span = hd * dh..(hd + 1) * dh;
        for t in 0..n_pos {
            let p = &st.probs[hd][t];
            let da = &dattn[t][span.clone()];
            let dp: Vec<T> = (0..=t).map(|u| dot(da, &st.v[u][span.clone()])).collect();
            let mean: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for u in 0..=t {
                for (o, &x) in dv[u][span.clone()].iter_mut().zip(da) {
                    *o = *o + p[u] * x;
                }
                let ds = p[u] * (dp[u] - mean) * scale;
                for c in span.clone() {
                    dq[t][c] = dq[t][c] + ds * st.k[u][c];
                    dk[u][c] = dk[u][c] + ds * st.q[t][c];
                }
            }
        }
    }
    let mut dh_in = dh_mid;
    for t in 0..n_pos {
        g.wq.add_outer(&dq[t], &st.x1[t], T::one());
        g.wk.add_outer(&dk[t], &st.x1[t], T::one());
        g.wv.add_outer(&dv[t], &st.x1[t], T::one());
        let mut dx1 = b.wq.matvec_t(&dq[t]);
        add_row(&mut dx1, &b.wk.matvec_t(&dk[t]));
        add_row(&mut dx1, &b.wv.matvec_t(&dv[t]));
        let back = rms_backward(&st.h_in[t], &b.norm1, st.rms1[t], &dx1, &mut g.norm1);
        add_row(&mut dh_in[t], &back);
    }
    dh_in
}
