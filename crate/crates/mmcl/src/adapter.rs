//! Cross-modality mixture-of-experts adapter.
//!
//! One adapter sits in every encoder block. A gate scores E experts from the
//! concatenated sequence-averaged block inputs of all modalities and the
//! top-k experts by softmax weight are activated. Each expert down-projects
//! every modality, builds a cross-modal attention map from the other
//! modalities' pooled features, up-projects, and modulates the block output.
//! Experts that fire often on a task get frozen afterwards and keep their
//! weights for the rest of the run.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::{ParameterRegistry, TapeBinding};
use crate::tensor::{Tape, TensorId};

/// Hyperparameters shared by all adapters of a model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    /// Number of experts, E.
    pub num_experts: usize,
    /// Experts activated per sample.
    pub top_k: usize,
    /// Bottleneck width r of the expert projections.
    pub bottleneck: usize,
}

/// Whether experts mix information across modalities or stay per-modality.
/// `ModalitySpecific` zeroes the cross-modal term in the attention map and is
/// used by the ablation runs; everything else is held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    Cross,
    ModalitySpecific,
}

/// One block's adapter: expert/gate parameter naming plus the mutable
/// freeze flags and activation counters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossModalityAdapter {
    pub block: usize,
    pub token_dims: Vec<usize>,
    pub config: AdapterConfig,
    pub frozen: Vec<bool>,
    pub activation_count: Vec<u64>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

impl CrossModalityAdapter {
    pub fn new(block: usize, token_dims: Vec<usize>, config: AdapterConfig) -> Result<Self> {
        if token_dims.len() < 2 {
            return Err(Error::Contract("cross-modality requires K >= 2".into()));
        }
        if config.num_experts == 0 || config.top_k == 0 || config.top_k > config.num_experts {
            return Err(Error::Contract(format!(
                "need 1 <= top_k <= num_experts, got top_k={} experts={}",
                config.top_k, config.num_experts
            )));
        }
        if config.bottleneck == 0 {
            return Err(Error::Contract("bottleneck width must be >= 1".into()));
        }
        Ok(CrossModalityAdapter {
            block,
            token_dims,
            config,
            frozen: vec![false; config.num_experts],
            activation_count: vec![0; config.num_experts],
        })
    }

    fn gate_prefix(&self) -> String {
        format!("adapter.{}.gate", self.block)
    }

    fn expert_prefix(&self, expert: usize, modality: usize) -> String {
        format!("adapter.{}.expert.{}.{}", self.block, expert, modality)
    }

    /// Names of all three weight groups of one expert, across modalities.
    pub fn expert_param_names(&self, expert: usize) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.token_dims.len() {
            let p = self.expert_prefix(expert, k);
            names.push(format!("{p}.down"));
            names.push(format!("{p}.att"));
            names.push(format!("{p}.up"));
        }
        names
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            format!("{}.weight", self.gate_prefix()),
            format!("{}.bias", self.gate_prefix()),
        ];
        for e in 0..self.config.num_experts {
            names.extend(self.expert_param_names(e));
        }
        names
    }

    /// Register gate and expert weights. Up-projections start at zero so a
    /// fresh adapter is exactly the identity; down/attention projections get
    /// small seeded values.
    pub fn register_params(&self, registry: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<()> {
        let gate_in: usize = self.token_dims.iter().sum();
        let e = self.config.num_experts;
        registry.insert(
            &format!("{}.weight", self.gate_prefix()),
            normal_matrix(rng, gate_in, e, 1.0 / (gate_in as f64).sqrt()),
            vec![gate_in, e],
            true,
        )?;
        registry.insert(&format!("{}.bias", self.gate_prefix()), vec![0.0; e], vec![e], true)?;
        let r = self.config.bottleneck;
        for ex in 0..e {
            for (k, &d) in self.token_dims.iter().enumerate() {
                let p = self.expert_prefix(ex, k);
                registry.insert(
                    &format!("{p}.down"),
                    normal_matrix(rng, d, r, 1.0 / (d as f64).sqrt()),
                    vec![d, r],
                    true,
                )?;
                registry.insert(
                    &format!("{p}.att"),
                    normal_matrix(rng, r, d, 1.0 / (r as f64).sqrt()),
                    vec![r, d],
                    true,
                )?;
                registry.insert(&format!("{p}.up"), vec![0.0; r * d], vec![r, d], true)?;
            }
        }
        Ok(())
    }

    /// Gate the block inputs: softmax weights over experts plus the active
    /// set (top-k by weight, ties to the lowest index, sorted ascending).
    pub fn gate_weights(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        block_inputs: &[TensorId],
    ) -> Result<(TensorId, Vec<usize>)> {
        if block_inputs.len() != self.token_dims.len() {
            return Err(Error::Input(format!(
                "gate expects {} modalities, got {}",
                self.token_dims.len(),
                block_inputs.len()
            )));
        }
        let mut pooled = Vec::with_capacity(block_inputs.len());
        for (k, &a) in block_inputs.iter().enumerate() {
            let shape = tape.shape(a);
            if shape.len() != 2 || shape[1] != self.token_dims[k] {
                return Err(Error::Input(format!(
                    "modality {k} block input must be seq x {}, got {shape:?}",
                    self.token_dims[k]
                )));
            }
            pooled.push(tape.mean_axis(a, 0)?);
        }
        let cat = tape.concat1d(&pooled)?;
        let gate_in: usize = self.token_dims.iter().sum();
        let cat2 = tape.reshape(cat, vec![1, gate_in])?;
        let w = binding.bind(tape, registry, &format!("{}.weight", self.gate_prefix()))?;
        let b = binding.bind(tape, registry, &format!("{}.bias", self.gate_prefix()))?;
        let logits = tape.matmul(cat2, w)?;
        let logits = tape.reshape(logits, vec![self.config.num_experts])?;
        let logits = tape.add(logits, b)?;
        let weights = tape.softmax(logits, 0)?;

        let wv = tape.value(weights);
        let mut order: Vec<usize> = (0..self.config.num_experts).collect();
        order.sort_by(|&i, &j| wv[j].partial_cmp(&wv[i]).unwrap().then(i.cmp(&j)));
        let mut active: Vec<usize> = order[..self.config.top_k].to_vec();
        active.sort_unstable();
        Ok((weights, active))
    }

    /// Run one expert over all modalities, returning g_e^k per modality.
    pub fn expert_forward(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        expert: usize,
        block_inputs: &[TensorId],
        mode: CrossMode,
    ) -> Result<Vec<TensorId>> {
        let num_mods = self.token_dims.len();
        if block_inputs.len() != num_mods {
            return Err(Error::Input(format!(
                "expert expects {} modalities, got {}",
                num_mods,
                block_inputs.len()
            )));
        }
        // h_e^k = relu(a^k W_down) and its sequence average.
        let mut bottleneck = Vec::with_capacity(num_mods);
        let mut pooled = Vec::with_capacity(num_mods);
        for (k, &a) in block_inputs.iter().enumerate() {
            let down = binding.bind(tape, registry, &format!("{}.down", self.expert_prefix(expert, k)))?;
            let pre = tape.matmul(a, down)?;
            let h = tape.relu(pre)?;
            pooled.push(tape.mean_axis(h, 0)?);
            bottleneck.push(h);
        }
        let mut outputs = Vec::with_capacity(num_mods);
        for k in 0..num_mods {
            let mut mixed = bottleneck[k];
            if mode == CrossMode::Cross {
                // Add the pooled bottleneck features of every other modality.
                let mut cross: Option<TensorId> = None;
                for j in 0..num_mods {
                    if j == k {
                        continue;
                    }
                    cross = Some(match cross {
                        None => pooled[j],
                        Some(c) => tape.add(c, pooled[j])?,
                    });
                }
                if let Some(c) = cross {
                    mixed = tape.add_row(bottleneck[k], c)?;
                }
            }
            let att = binding.bind(tape, registry, &format!("{}.att", self.expert_prefix(expert, k)))?;
            let pre = tape.matmul(mixed, att)?;
            let map = tape.tanh(pre)?;
            let up = binding.bind(tape, registry, &format!("{}.up", self.expert_prefix(expert, k)))?;
            let lifted = tape.matmul(bottleneck[k], up)?;
            outputs.push(tape.mul(lifted, map)?);
        }
        Ok(outputs)
    }

    /// Adapt the block outputs: f̂^k = f^k + Σ_{e active} w_e · g_e^k.
    /// Returns the adapted features and the active expert set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        block_inputs: &[TensorId],
        block_outputs: &[TensorId],
        mode: CrossMode,
    ) -> Result<(Vec<TensorId>, Vec<usize>)> {
        if block_outputs.len() != self.token_dims.len() {
            return Err(Error::Input(format!(
                "adapter expects {} block outputs, got {}",
                self.token_dims.len(),
                block_outputs.len()
            )));
        }
        let (weights, active) = self.gate_weights(tape, binding, registry, block_inputs)?;
        let mut adapted: Vec<TensorId> = block_outputs.to_vec();
        for &e in &active {
            let gains = self.expert_forward(tape, binding, registry, e, block_inputs, mode)?;
            let w_e = tape.index1d(weights, e)?;
            for (k, g) in gains.into_iter().enumerate() {
                let scaled = tape.scale_by_scalar(g, w_e)?;
                adapted[k] = tape.add(adapted[k], scaled)?;
            }
        }
        Ok((adapted, active))
    }

    /// Record one sample's active experts during a counting pass.
    pub fn note_activations(&mut self, active: &[usize]) {
        for &e in active {
            self.activation_count[e] += 1;
        }
    }

    pub fn reset_counts(&mut self) {
        self.activation_count.iter_mut().for_each(|c| *c = 0);
    }

    /// Freeze experts whose activation count exceeds
    /// `threshold_frac · dataset_size` (strictly). Already-frozen experts
    /// stay frozen; the gate always stays trainable.
    pub fn apply_freeze_threshold(
        &mut self,
        registry: &mut ParameterRegistry,
        dataset_size: usize,
        threshold_frac: f64,
    ) -> Result<Vec<usize>> {
        if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
            return Err(Error::Contract(format!(
                "threshold_frac must be in (0, 1], got {threshold_frac}"
            )));
        }
        if dataset_size == 0 {
            return Err(Error::Contract("freeze threshold over an empty dataset".into()));
        }
        let threshold = threshold_frac * dataset_size as f64;
        let mut newly_frozen = Vec::new();
        for e in 0..self.config.num_experts {
            if !self.frozen[e] && (self.activation_count[e] as f64) > threshold {
                self.freeze_expert(registry, e)?;
                newly_frozen.push(e);
            }
        }
        Ok(newly_frozen)
    }

    /// Freeze all weight groups of one expert atomically.
    pub fn freeze_expert(&mut self, registry: &mut ParameterRegistry, expert: usize) -> Result<()> {
        for name in self.expert_param_names(expert) {
            registry.freeze(&name)?;
        }
        self.frozen[expert] = true;
        Ok(())
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|f| **f).count()
    }
}
