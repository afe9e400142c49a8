//! Full model assembly: frozen backbones, per-block cross-modality adapters,
//! and the projection/fusion/classifier heads, all over one parameter
//! registry. Also the immutable snapshot used for distillation and
//! preservation targets.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

use crate::adapter::{AdapterConfig, CrossMode, CrossModalityAdapter};
use crate::backbone::{Backbone, ModalityConfig};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::heads::Heads;
use crate::optim::{ParameterRegistry, TapeBinding};
use crate::tensor::{Tape, TensorId};

/// How adapters participate in a forward pass. `None` bypasses them
/// entirely (the no-adapter ablation); `ModalitySpecific` keeps the experts
/// but silences the cross-modal mixing term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterUse {
    Cross,
    ModalitySpecific,
    None,
}

/// Everything produced by one sample's forward pass.
pub struct SampleForward {
    /// Final per-modality encoder features (seq_len x token_dim).
    pub features: Vec<TensorId>,
    /// Sequence-pooled encoder features per modality.
    pub pooled: Vec<TensorId>,
    /// Modality representations z^k.
    pub z_mods: Vec<TensorId>,
    /// Joint representation z.
    pub z_joint: TensorId,
    /// Classifier logits p.
    pub logits: TensorId,
    /// Active expert indices per block.
    pub active_experts: Vec<Vec<usize>>,
}

/// The trainable model: structure plus the parameter registry.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelState {
    pub backbone: Backbone,
    pub adapters: Vec<CrossModalityAdapter>,
    pub heads: Heads,
    pub registry: ParameterRegistry,
}

impl ModelState {
    /// Build and seed a fresh model. The classifier starts empty; call
    /// [`Heads::expand_classifier`] (or let the engine do it) before
    /// classifying.
    pub fn new(
        modalities: Vec<ModalityConfig>,
        adapter: AdapterConfig,
        proj_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::new(modalities)?;
        let token_dims: Vec<usize> =
            backbone.modalities.iter().map(|m| m.token_dim).collect();
        let adapters = (0..backbone.num_blocks)
            .map(|b| CrossModalityAdapter::new(b, token_dims.clone(), adapter))
            .collect::<Result<Vec<_>>>()?;
        let heads = Heads::new(token_dims, proj_dim, hidden_dim)?;

        let mut registry = ParameterRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(crate::util::derive_seed(seed, "init", 0));
        backbone.register_params(&mut registry, &mut rng)?;
        for a in &adapters {
            a.register_params(&mut registry, &mut rng)?;
        }
        heads.register_params(&mut registry, &mut rng)?;
        Ok(ModelState { backbone, adapters, heads, registry })
    }

    pub fn num_modalities(&self) -> usize {
        self.backbone.num_modalities()
    }

    fn check_sample(&self, sample: &MultiModalSample) -> Result<()> {
        if sample.modalities.len() != self.num_modalities() {
            return Err(Error::Input(format!(
                "sample has {} modalities, model expects {}",
                sample.modalities.len(),
                self.num_modalities()
            )));
        }
        for (k, (m, cfg)) in sample.modalities.iter().zip(&self.backbone.modalities).enumerate() {
            if m.rows != cfg.seq_len || m.cols != cfg.raw_dim {
                return Err(Error::Input(format!(
                    "modality {k} raw features are {}x{}, model expects {}x{}",
                    m.rows, m.cols, cfg.seq_len, cfg.raw_dim
                )));
            }
        }
        Ok(())
    }

    /// Run one sample through tokenizers, blocks, adapters, and heads.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        sample: &MultiModalSample,
        adapter_use: AdapterUse,
    ) -> Result<SampleForward> {
        self.check_sample(sample)?;
        let k = self.num_modalities();
        let mut feats = Vec::with_capacity(k);
        for (i, m) in sample.modalities.iter().enumerate() {
            feats.push(self.backbone.tokenize(tape, binding, &self.registry, i, &m.data)?);
        }
        let mut active_experts = Vec::new();
        for b in 0..self.backbone.num_blocks {
            let inputs = feats.clone();
            let mut outputs = Vec::with_capacity(k);
            for i in 0..k {
                outputs.push(self.backbone.run_block(tape, binding, &self.registry, i, b, inputs[i])?);
            }
            feats = match adapter_use {
                AdapterUse::None => outputs,
                AdapterUse::Cross | AdapterUse::ModalitySpecific => {
                    let mode = if adapter_use == AdapterUse::Cross {
                        CrossMode::Cross
                    } else {
                        CrossMode::ModalitySpecific
                    };
                    let (adapted, active) = self.adapters[b].forward(
                        tape,
                        binding,
                        &self.registry,
                        &inputs,
                        &outputs,
                        mode,
                    )?;
                    active_experts.push(active);
                    adapted
                }
            };
        }
        let mut pooled = Vec::with_capacity(k);
        let mut z_mods = Vec::with_capacity(k);
        for i in 0..k {
            let p = tape.mean_axis(feats[i], 0)?;
            pooled.push(p);
            z_mods.push(self.heads.project(tape, binding, &self.registry, i, p)?);
        }
        let z_joint = self.heads.fuse(tape, binding, &self.registry, &z_mods)?;
        let logits = self.heads.classify(tape, binding, &self.registry, z_joint)?;
        Ok(SampleForward { features: feats, pooled, z_mods, z_joint, logits, active_experts })
    }

    /// Count expert activations over a dataset and freeze the experts whose
    /// count exceeds `threshold_frac · |dataset|`. Returns the newly frozen
    /// (block, expert) pairs.
    pub fn freeze_pass(
        &mut self,
        dataset: &[MultiModalSample],
        threshold_frac: f64,
        adapter_use: AdapterUse,
    ) -> Result<Vec<(usize, usize)>> {
        if dataset.is_empty() {
            return Err(Error::Contract("freeze_pass over an empty dataset".into()));
        }
        if adapter_use == AdapterUse::None {
            return Ok(Vec::new());
        }
        for a in &mut self.adapters {
            a.reset_counts();
        }
        for sample in dataset {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let fwd = self.forward_sample(&mut tape, &mut binding, sample, adapter_use)?;
            for (b, active) in fwd.active_experts.iter().enumerate() {
                self.adapters[b].note_activations(active);
            }
        }
        let mut newly = Vec::new();
        for b in 0..self.adapters.len() {
            let adapter = &mut self.adapters[b];
            for e in adapter.apply_freeze_threshold(&mut self.registry, dataset.len(), threshold_frac)? {
                newly.push((b, e));
            }
        }
        Ok(newly)
    }

    /// Total frozen experts across all adapters.
    pub fn frozen_expert_count(&self) -> usize {
        self.adapters.iter().map(|a| a.frozen_count()).sum()
    }

    /// Hash of all backbone weights, for frozen-immutability checks.
    pub fn backbone_hash(&self) -> u64 {
        let names = self.backbone.param_names();
        self.registry.hash_of(names.iter().map(|s| s.as_str()))
    }

    /// Hash of every frozen expert's weights across adapters.
    pub fn frozen_experts_hash(&self) -> u64 {
        let mut names = Vec::new();
        for a in &self.adapters {
            for e in 0..a.config.num_experts {
                if a.frozen[e] {
                    names.extend(a.expert_param_names(e));
                }
            }
        }
        self.registry.hash_of(names.iter().map(|s| s.as_str()))
    }

    /// Deep immutable copy for distillation/preservation targets.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { model: self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Schema(format!("checkpoint serialization failed: {e}")))?;
        crate::util::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: 1, message: format!("bad checkpoint: {e}") })
    }
}

/// Outputs of the previous-step model for one sample, captured as plain
/// values (no gradient flows into a snapshot).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotOutputs {
    pub z_mods: Vec<Vec<f64>>,
    pub z_joint: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Immutable deep copy of a trained model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSnapshot {
    model: ModelState,
}

impl ModelSnapshot {
    pub fn classifier_width(&self) -> usize {
        self.model.heads.num_classes
    }

    /// Forward a sample through the frozen copy, returning plain values.
    pub fn forward_values(
        &self,
        sample: &MultiModalSample,
        adapter_use: AdapterUse,
    ) -> Result<SnapshotOutputs> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let fwd = self.model.forward_sample(&mut tape, &mut binding, sample, adapter_use)?;
        Ok(SnapshotOutputs {
            z_mods: fwd.z_mods.iter().map(|&id| tape.value(id).to_vec()).collect(),
            z_joint: tape.value(fwd.z_joint).to_vec(),
            logits: tape.value(fwd.logits).to_vec(),
        })
    }

    /// Hash of every parameter value, for immutability assertions.
    pub fn params_hash(&self) -> u64 {
        let names: Vec<String> = self.model.registry.names().cloned().collect();
        self.model.registry.hash_of(names.iter().map(|s| s.as_str()))
    }

    /// Snapshots are already frozen; snapshotting again is the identity.
    pub fn resnapshot(&self) -> ModelSnapshot {
        self.clone()
    }
}
