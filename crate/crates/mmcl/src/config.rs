//! Run configuration: one TOML file holding every tunable, validated up
//! front, echoed into every artifact. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::adapter::AdapterConfig;
use crate::backbone::ModalityConfig;
use crate::data::{LabelMode, Scenario, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::AlignVariant;
use crate::model::AdapterUse;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_modalities: usize,
    pub seq_lens: Vec<usize>,
    pub raw_dims: Vec<usize>,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub signal_strength: f64,
    pub cross_modal_correlation: f64,
    pub noise_scale: f64,
    pub domain_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_modalities: 2,
            seq_lens: vec![6, 4],
            raw_dims: vec![8, 6],
            tasks: 4,
            classes_per_task: 2,
            train_per_class: 100,
            test_per_class: 50,
            signal_strength: 1.0,
            cross_modal_correlation: 1.0,
            noise_scale: 1.0,
            domain_shift: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Frozen encoder layers per modality.
    pub layers: Vec<usize>,
    /// Token embedding width per modality.
    pub token_dims: Vec<usize>,
    pub num_experts: usize,
    pub top_k: usize,
    pub bottleneck: usize,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    /// Fraction of the task's samples above which an expert freezes.
    pub freeze_threshold: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: vec![4, 2],
            token_dims: vec![16, 12],
            num_experts: 10,
            top_k: 2,
            bottleneck: 8,
            proj_dim: 32,
            hidden_dim: 64,
            freeze_threshold: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub memory_capacity: usize,
    pub lambda_distill: f64,
    pub lambda_align: f64,
    pub lambda_preserve: f64,
    pub temperature: f64,
    pub align_variant: AlignVariant,
    pub adapter_mode: AdapterUse,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            batch_size: 12,
            base_lr: 1e-4,
            memory_capacity: 200,
            lambda_distill: 1.0,
            lambda_align: 1.0,
            lambda_preserve: 10.0,
            temperature: 0.1,
            align_variant: AlignVariant::Align,
            adapter_mode: AdapterUse::Cross,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { dataset: PathBuf::from("data/stream.jsonl"), out_dir: PathBuf::from("runs/out") }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub label_mode: LabelMode,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenario: Scenario::ClassIncremental,
            label_mode: LabelMode::Single,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Parse { line: 1, message: format!("bad config: {e}") })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.data.num_modalities;
        if k < 2 {
            return Err(Error::Contract("cross-modality requires K >= 2".into()));
        }
        for (what, len) in [
            ("data.seq_lens", self.data.seq_lens.len()),
            ("data.raw_dims", self.data.raw_dims.len()),
            ("model.layers", self.model.layers.len()),
            ("model.token_dims", self.model.token_dims.len()),
        ] {
            if len != k {
                return Err(Error::Contract(format!(
                    "{what} must list {k} modalities, found {len}"
                )));
            }
        }
        if self.model.layers.iter().any(|&l| l == 0) {
            return Err(Error::Contract("every modality needs at least one layer".into()));
        }
        if self.model.num_experts == 0
            || self.model.top_k == 0
            || self.model.top_k > self.model.num_experts
        {
            return Err(Error::Contract(format!(
                "need 1 <= top_k <= num_experts, got top_k={} experts={}",
                self.model.top_k, self.model.num_experts
            )));
        }
        if !(self.model.freeze_threshold > 0.0 && self.model.freeze_threshold <= 1.0) {
            return Err(Error::Contract("freeze_threshold must be in (0, 1]".into()));
        }
        if self.model.bottleneck == 0 || self.model.proj_dim == 0 || self.model.hidden_dim == 0 {
            return Err(Error::Contract("model dims must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        if self.train.memory_capacity == 0 {
            return Err(Error::Contract("memory_capacity must be >= 1".into()));
        }
        if !(self.train.temperature > 0.0) {
            return Err(Error::Contract("temperature must be positive".into()));
        }
        if !(self.train.base_lr > 0.0) {
            return Err(Error::Contract("base_lr must be positive".into()));
        }
        if self.data.tasks == 0 || self.data.classes_per_task == 0 {
            return Err(Error::Contract("need at least one task and one class".into()));
        }
        Ok(())
    }

    /// Modality configs for the backbone, combining data and model sections.
    pub fn modalities(&self) -> Vec<ModalityConfig> {
        (0..self.data.num_modalities)
            .map(|k| ModalityConfig {
                num_layers: self.model.layers[k],
                seq_len: self.data.seq_lens[k],
                raw_dim: self.data.raw_dims[k],
                token_dim: self.model.token_dims[k],
            })
            .collect()
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            num_experts: self.model.num_experts,
            top_k: self.model.top_k,
            bottleneck: self.model.bottleneck,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_modalities: self.data.num_modalities,
            seq_lens: self.data.seq_lens.clone(),
            raw_dims: self.data.raw_dims.clone(),
            num_tasks: self.data.tasks,
            classes_per_task: self.data.classes_per_task,
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            signal_strength: self.data.signal_strength,
            cross_modal_correlation: self.data.cross_modal_correlation,
            noise_scale: self.data.noise_scale,
            domain_shift: self.data.domain_shift,
            seed: self.seed,
        }
    }

    /// JSON echo embedded in reports and checkpoints.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_follow_reference_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.num_experts, 10);
        assert_eq!(cfg.model.top_k, 2);
        assert!((cfg.model.freeze_threshold - 0.10).abs() < 1e-15);
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.train.epochs, 20);
        assert!((cfg.train.base_lr - 1e-4).abs() < 1e-20);
        assert_eq!(cfg.train.memory_capacity, 200);
        assert!((cfg.train.lambda_distill - 1.0).abs() < 1e-15);
        assert!((cfg.train.lambda_align - 1.0).abs() < 1e-15);
        assert!((cfg.train.lambda_preserve - 10.0).abs() < 1e-15);
        assert!((cfg.train.temperature - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "seed = 1\nnot_a_key = 2\n";
        let parsed: std::result::Result<RunConfig, _> = toml::from_str(text);
        assert!(parsed.is_err());
        let nested = "[train]\nepochs = 3\nmystery = true\n";
        let parsed: std::result::Result<RunConfig, _> = toml::from_str(nested);
        assert!(parsed.is_err());
    }

    #[test]
    fn k1_is_rejected_with_the_documented_message() {
        let mut cfg = RunConfig::default();
        cfg.data.num_modalities = 1;
        cfg.data.seq_lens = vec![4];
        cfg.data.raw_dims = vec![4];
        cfg.model.layers = vec![2];
        cfg.model.token_dims = vec![8];
        match cfg.validate() {
            Err(Error::Contract(msg)) => assert!(msg.contains("cross-modality requires K >= 2")),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = "seed = 9\n[train]\nepochs = 2\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.model.num_experts, 10);
    }
}
