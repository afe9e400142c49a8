//! Frozen stand-in encoders per modality.
//!
//! Each modality gets a tokenizer (a frozen affine projection from raw
//! features to token embeddings) and a stack of frozen transformer-style
//! layers: single-head self-attention plus a two-layer feed-forward, both
//! wrapped in residual connections. Layers are grouped into `B` shared
//! blocks, where `B` is the smallest layer count across modalities, and
//! layers are spread over blocks as evenly as possible.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::{ParameterRegistry, TapeBinding};
use crate::tensor::{Tape, TensorId};

/// Static description of one modality's encoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModalityConfig {
    /// Number of frozen encoder layers, `L^k`.
    pub num_layers: usize,
    /// Tokens per sample.
    pub seq_len: usize,
    /// Width of the raw per-position feature vectors.
    pub raw_dim: usize,
    /// Embedding width after tokenization.
    pub token_dim: usize,
}

/// Layers assigned to each of the `B` blocks for one modality.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockPlan {
    pub layers_per_block: Vec<usize>,
}

/// Spread `num_layers` over `num_blocks` blocks as evenly as possible:
/// the first `L - B·⌊L/B⌋` blocks hold one extra layer.
pub fn partition_layers(num_layers: usize, num_blocks: usize) -> Result<Vec<usize>> {
    if num_blocks == 0 || num_layers < num_blocks {
        return Err(Error::Contract(format!(
            "partition_layers requires L >= B >= 1, got L={num_layers}, B={num_blocks}"
        )));
    }
    let base = num_layers / num_blocks;
    let extra = num_layers - num_blocks * base;
    Ok((0..num_blocks).map(|b| if b < extra { base + 1 } else { base }).collect())
}

/// The frozen encoder stack for all modalities.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Backbone {
    pub modalities: Vec<ModalityConfig>,
    pub num_blocks: usize,
    pub plans: Vec<BlockPlan>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

impl Backbone {
    pub fn new(modalities: Vec<ModalityConfig>) -> Result<Self> {
        if modalities.len() < 2 {
            return Err(Error::Contract("cross-modality requires K >= 2".into()));
        }
        for (k, m) in modalities.iter().enumerate() {
            if m.num_layers == 0 || m.seq_len == 0 || m.raw_dim == 0 || m.token_dim == 0 {
                return Err(Error::Contract(format!(
                    "modality {k} has a zero dimension: {m:?}"
                )));
            }
        }
        let num_blocks = modalities.iter().map(|m| m.num_layers).min().unwrap();
        let plans = modalities
            .iter()
            .map(|m| {
                Ok(BlockPlan { layers_per_block: partition_layers(m.num_layers, num_blocks)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone { modalities, num_blocks, plans })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Feed-forward hidden width for a layer; fixed 2x ratio.
    fn ffn_dim(token_dim: usize) -> usize {
        2 * token_dim
    }

    /// Register every frozen weight. Weight scales follow 1/sqrt(fan_in) so
    /// activations stay well-ranged through residual stacks.
    pub fn register_params(&self, registry: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<()> {
        for (k, m) in self.modalities.iter().enumerate() {
            let d = m.token_dim;
            let scale = 1.0 / (d as f64).sqrt();
            let tok_scale = 1.0 / (m.raw_dim as f64).sqrt();
            registry.insert(
                &format!("backbone.{k}.tokenizer.weight"),
                normal_matrix(rng, m.raw_dim, d, tok_scale),
                vec![m.raw_dim, d],
                false,
            )?;
            registry.insert(
                &format!("backbone.{k}.tokenizer.bias"),
                vec![0.0; d],
                vec![d],
                false,
            )?;
            for l in 0..m.num_layers {
                let p = format!("backbone.{k}.layer.{l}");
                for w in ["wq", "wk", "wv", "wo"] {
                    registry.insert(
                        &format!("{p}.attn.{w}"),
                        normal_matrix(rng, d, d, scale),
                        vec![d, d],
                        false,
                    )?;
                }
                let ff = Self::ffn_dim(d);
                registry.insert(
                    &format!("{p}.ffn.w1"),
                    normal_matrix(rng, d, ff, scale),
                    vec![d, ff],
                    false,
                )?;
                registry.insert(&format!("{p}.ffn.b1"), vec![0.0; ff], vec![ff], false)?;
                registry.insert(
                    &format!("{p}.ffn.w2"),
                    normal_matrix(rng, ff, d, 1.0 / (ff as f64).sqrt()),
                    vec![ff, d],
                    false,
                )?;
                registry.insert(&format!("{p}.ffn.b2"), vec![0.0; d], vec![d], false)?;
            }
        }
        Ok(())
    }

    /// All parameter names owned by the backbone, for immutability hashing.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, m) in self.modalities.iter().enumerate() {
            names.push(format!("backbone.{k}.tokenizer.weight"));
            names.push(format!("backbone.{k}.tokenizer.bias"));
            for l in 0..m.num_layers {
                let p = format!("backbone.{k}.layer.{l}");
                for w in ["wq", "wk", "wv", "wo"] {
                    names.push(format!("{p}.attn.{w}"));
                }
                for w in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("{p}.ffn.{w}"));
                }
            }
        }
        names
    }

    /// Project raw per-position features to token embeddings.
    pub fn tokenize(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        modality: usize,
        raw: &[f64],
    ) -> Result<TensorId> {
        let m = &self.modalities[modality];
        if raw.len() != m.seq_len * m.raw_dim {
            return Err(Error::Input(format!(
                "modality {modality} expects {}x{} raw features, got {} values",
                m.seq_len,
                m.raw_dim,
                raw.len()
            )));
        }
        let x = tape.constant(raw.to_vec(), vec![m.seq_len, m.raw_dim])?;
        let w = binding.bind(tape, registry, &format!("backbone.{modality}.tokenizer.weight"))?;
        let b = binding.bind(tape, registry, &format!("backbone.{modality}.tokenizer.bias"))?;
        let proj = tape.matmul(x, w)?;
        tape.add_row(proj, b)
    }

    /// Run the planned layers of one block over `input` (seq_len x token_dim).
    pub fn run_block(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        modality: usize,
        block: usize,
        input: TensorId,
    ) -> Result<TensorId> {
        let m = &self.modalities[modality];
        if block >= self.num_blocks {
            return Err(Error::Input(format!(
                "block {block} out of range, backbone has {} blocks",
                self.num_blocks
            )));
        }
        if tape.shape(input) != [m.seq_len, m.token_dim] {
            return Err(Error::Input(format!(
                "modality {modality} block input must be {}x{}, got {:?}",
                m.seq_len,
                m.token_dim,
                tape.shape(input)
            )));
        }
        let plan = &self.plans[modality].layers_per_block;
        let first: usize = plan[..block].iter().sum();
        let mut x = input;
        for l in first..first + plan[block] {
            x = self.run_layer(tape, binding, registry, modality, l, x)?;
        }
        Ok(x)
    }

    fn run_layer(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        modality: usize,
        layer: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let d = self.modalities[modality].token_dim;
        let p = format!("backbone.{modality}.layer.{layer}");
        let wq = binding.bind(tape, registry, &format!("{p}.attn.wq"))?;
        let wk = binding.bind(tape, registry, &format!("{p}.attn.wk"))?;
        let wv = binding.bind(tape, registry, &format!("{p}.attn.wv"))?;
        let wo = binding.bind(tape, registry, &format!("{p}.attn.wo"))?;

        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale_const(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(scaled, 1)?;
        let ctx = tape.matmul(attn, v)?;
        let proj = tape.matmul(ctx, wo)?;
        let h = tape.add(x, proj)?;

        let w1 = binding.bind(tape, registry, &format!("{p}.ffn.w1"))?;
        let b1 = binding.bind(tape, registry, &format!("{p}.ffn.b1"))?;
        let w2 = binding.bind(tape, registry, &format!("{p}.ffn.w2"))?;
        let b2 = binding.bind(tape, registry, &format!("{p}.ffn.b2"))?;
        let pre = tape.matmul(h, w1)?;
        let pre = tape.add_row(pre, b1)?;
        let act = tape.relu(pre)?;
        let out = tape.matmul(act, w2)?;
        let out = tape.add_row(out, b2)?;
        tape.add(h, out)
    }
}
