// SPDX-License-Identifier: Apache-2.0

//! A small, seeded, decoder-only transformer.
//!
//! Pre-norm blocks (RMSNorm → causal multi-head attention → RMSNorm → FFN),
//! learned absolute positions, byte-level vocabulary plus BOS/EOS/PAD. The
//! FFN has exactly the `W_out σ(W_in x)` form, with no biases, so every inner
//! activation maps onto one column of `W_out`.

mod forward;
mod runtime;
mod suite;
mod train;
mod weights;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{Matrix, Real};
use crate::snapshot::{Activation, ModelSnapshot};
use crate::trace::UnitId;

pub use forward::{ForwardPass, LayerState};
pub use runtime::{evaluate, trace_capture, Capture, CaptureOptions, Decoding, EvalResult};
pub use suite::{decode_text, encode_prompt, encode_reference, read_suite_jsonl, write_suite_jsonl, SuiteItem, SuiteKind, TaskSuite};
pub use train::{train_on_suite, TrainConfig, TrainReport};
pub use weights::{Block, ToyWeights};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub activation: Activation,
    pub tied_embeddings: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            ffn_width: 256,
            vocab_size: BYTE_VOCAB,
            context: 256,
            activation: Activation::Silu,
            tied_embeddings: false,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("layers, d_model and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.ffn_width < self.d_model {
            return bad(format!("FFN width {} below d_model {}", self.ffn_width, self.d_model));
        }
        if self.vocab_size < BYTE_VOCAB {
            return bad(format!("vocabulary {} cannot hold byte tokens", self.vocab_size));
        }
        if self.context < 2 {
            return bad("context must hold at least two positions".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, d, n, l) = (self.vocab_size, self.d_model, self.ffn_width, self.n_layers);
        let per_block = 2 * d + 4 * d * d + 2 * n * d;
        let unembed = if self.tied_embeddings { 0 } else { v * d };
        v * d + self.context * d + l * per_block + d + unembed
    }
}

/// Set of FFN units whose post-activation value is forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSpec {
    pub units: BTreeSet<UnitId>,
}

impl MaskSpec {
    pub fn new(units: impl IntoIterator<Item = UnitId>) -> Self {
        Self {
            units: units.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyConfig,
    pub weights: ToyWeights<T>,
    /// `keep[l][i] == false` zeroes unit `i` of layer `l`.
    keep: Vec<Vec<bool>>,
}

impl<T: Real> ToyModel<T> {
    /// Draws weights from N(0, 0.02) with output projections scaled by 1/√(2L).
    pub fn init(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let weights = ToyWeights::init(&config, &mut rng);
        Ok(Self::from_weights(config, weights))
    }

    pub fn from_weights(config: ToyConfig, weights: ToyWeights<T>) -> Self {
        let keep = vec![vec![true; config.ffn_width]; config.n_layers];
        Self {
            config,
            weights,
            keep,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn weights_checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.parameter_count() * 8);
        for (_, t) in self.weights.tensors() {
            for x in t {
                bytes.extend_from_slice(&x.f64().to_bits().to_le_bytes());
            }
        }
        crate::trace::codec::fnv1a64(&bytes)
    }

    pub fn keep_mask(&self, layer: usize) -> &[bool] {
        &self.keep[layer]
    }

    pub fn masked_units(&self) -> MaskSpec {
        MaskSpec::new(self.keep.iter().enumerate().flat_map(|(l, k)| {
            k.iter()
                .enumerate()
                .filter(|(_, &keep)| !keep)
                .map(move |(i, _)| UnitId::new(l as u32, i as u32))
        }))
    }

    /// Returns a copy that additionally zeroes every unit in `mask`.
    pub fn apply_mask(&self, mask: &MaskSpec) -> Result<Self> {
        let mut out = self.clone();
        for u in &mask.units {
            let (l, i) = (u.layer as usize, u.index as usize);
            if l >= self.config.n_layers || i >= self.config.ffn_width {
                return Err(Error::Dimension(format!("mask unit {u} outside {}x{}", self.config.n_layers, self.config.ffn_width)));
            }
            out.keep[l][i] = false;
        }
        Ok(out)
    }

    pub fn clear_mask(&self) -> Self {
        Self::from_weights(self.config.clone(), self.weights.clone())
    }

    /// Unembedding with the final norm gain folded in: `W_u[v, j] · g_j`.
    ///
    /// The final norm's per-token `1/rms` factor is a positive scalar and is
    /// left out, so scores built on this matrix are the direct,
    /// pre-normalization logit contributions.
    pub fn effective_unembedding(&self) -> Matrix<T> {
        let w_u = self.weights.unembedding();
        let g = &self.weights.norm_f;
        Matrix::from_fn(w_u.rows(), w_u.cols(), |v, j| w_u.get(v, j) * g[j])
    }

    /// Exports the attribution weights, with the full toy weights in a `TOYW` section.
    pub fn snapshot_export(&self) -> Result<ModelSnapshot<T>> {
        let w_in = self.weights.blocks.iter().map(|b| b.w_in.clone()).collect();
        let w_out = self.weights.blocks.iter().map(|b| b.w_out.clone()).collect();
        let mut snap = ModelSnapshot::new(self.config.activation, w_in, w_out, self.effective_unembedding())?;
        snap.extensions.push((*b"TOYW", self.weights.encode_toyw(&self.config)?));
        Ok(snap)
    }

    /// Rebuilds a toy model from a snapshot carrying a `TOYW` section.
    pub fn from_snapshot(snap: &ModelSnapshot<T>) -> Result<Self> {
        let body = snap
            .extension(b"TOYW")
            .ok_or_else(|| Error::Config("snapshot has no TOYW section".into()))?;
        let (config, weights) = ToyWeights::decode_toyw(body)?;
        Ok(Self::from_weights(config, weights))
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after emitting
    /// EOS (which is included) or after `max_new` tokens.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must contain at least one token".into()));
        }
        let needed = prompt.len() + max_new.saturating_sub(1);
        if needed > self.config.context {
            return Err(Error::ContextOverflow {
                needed,
                limit: self.config.context,
            });
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.last_logits(&seq)?;
            let next = argmax_lowest(&logits) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }

    pub fn last_logits(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let pass = self.forward(tokens)?;
        Ok(pass.logits.last().cloned().unwrap_or_default())
    }
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax_lowest<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyConfig {
        ToyConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_width: 32,
            context: 32,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ToyModel::<f64>::init(tiny().with_seed(7)).unwrap();
        let b = ToyModel::<f64>::init(tiny().with_seed(7)).unwrap();
        let c = ToyModel::<f64>::init(tiny().with_seed(8)).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        assert_ne!(a.weights_checksum(), c.weights_checksum());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ToyConfig::default();
        let m = ToyModel::<f32>::init(cfg.clone()).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
        let tied = ToyConfig {
            tied_embeddings: true,
            ..tiny()
        };
        let m = ToyModel::<f32>::init(tied.clone()).unwrap();
        assert_eq!(m.parameter_count(), tied.parameter_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ToyConfig {
            d_model: 30,
            n_heads: 4,
            ..tiny()
        };
        assert!(matches!(ToyModel::<f64>::init(bad), Err(Error::Config(_))));
        let bad = ToyConfig {
            ffn_width: 8,
            ..tiny()
        };
        assert!(ToyModel::<f64>::init(bad).is_err());
    }

    #[test]
    fn generate_basics() {
        let m = ToyModel::<f64>::init(tiny().with_seed(1)).unwrap();
        let prompt = encode_prompt("copy: ab=");
        assert!(m.generate(&prompt, 0).unwrap().is_empty());
        let a = m.generate(&prompt, 5).unwrap();
        assert_eq!(a, m.generate(&prompt, 5).unwrap());
        assert!(!a.is_empty() && a.len() <= 5);
        assert!(matches!(
            m.generate(&prompt, 40),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0f32; 4]), 0);
    }

    #[test]
    fn mask_leaves_original_untouched_and_checks_range() {
        let m = ToyModel::<f64>::init(tiny()).unwrap();
        let masked = m.apply_mask(&MaskSpec::new([UnitId::new(1, 3)])).unwrap();
        assert!(m.masked_units().is_empty());
        assert_eq!(masked.masked_units().len(), 1);
        assert!(m.apply_mask(&MaskSpec::new([UnitId::new(2, 0)])).is_err());
        assert!(m.apply_mask(&MaskSpec::new([UnitId::new(0, 32)])).is_err());
    }

    #[test]
    fn snapshot_reloads_into_toy_model() {
        let m = ToyModel::<f64>::init(tiny().with_seed(5)).unwrap();
        let snap = m.snapshot_export().unwrap();
        assert_eq!(snap.n_layers(), 2);
        assert_eq!((snap.d_model, snap.ffn_width, snap.vocab_size), (16, 32, BYTE_VOCAB));
        assert_eq!(snap.model_id, m.snapshot_export().unwrap().model_id);
        let back = ToyModel::from_snapshot(&ModelSnapshot::<f64>::decode(&snap.encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        let prompt = encode_prompt("rev: abc=");
        assert_eq!(back.generate(&prompt, 4).unwrap(), m.generate(&prompt, 4).unwrap());
    }
}
