//! Projection, fusion, and classification heads.
//!
//! Every modality's pooled encoder output is projected to a shared width,
//! the projections are concatenated and fused by a two-layer perceptron into
//! a joint representation of the same width, and an affine classifier maps
//! the joint representation to logits. The classifier widens as new classes
//! arrive, keeping old-class weights bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::{ParameterRegistry, TapeBinding};
use crate::tensor::{Tape, TensorId};

/// Head dimensions and the current classifier width.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Heads {
    pub token_dims: Vec<usize>,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

impl Heads {
    pub fn new(token_dims: Vec<usize>, proj_dim: usize, hidden_dim: usize) -> Result<Self> {
        if token_dims.len() < 2 {
            return Err(Error::Contract("cross-modality requires K >= 2".into()));
        }
        if proj_dim == 0 || hidden_dim == 0 {
            return Err(Error::Contract("proj_dim and hidden_dim must be >= 1".into()));
        }
        Ok(Heads { token_dims, proj_dim, hidden_dim, num_classes: 0 })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..self.token_dims.len() {
            names.push(format!("heads.project.{k}.weight"));
            names.push(format!("heads.project.{k}.bias"));
        }
        names.extend(
            ["hidden_weight", "hidden_bias", "out_weight", "out_bias"]
                .iter()
                .map(|w| format!("heads.fusion.{w}")),
        );
        if self.num_classes > 0 {
            names.push("heads.classifier.weight".into());
            names.push("heads.classifier.bias".into());
        }
        names
    }

    /// Register projection and fusion weights. The classifier starts empty
    /// and is created by the first [`Heads::expand_classifier`] call.
    pub fn register_params(&self, registry: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<()> {
        let p = self.proj_dim;
        for (k, &d) in self.token_dims.iter().enumerate() {
            registry.insert(
                &format!("heads.project.{k}.weight"),
                normal_matrix(rng, d, p, 1.0 / (d as f64).sqrt()),
                vec![d, p],
                true,
            )?;
            registry.insert(&format!("heads.project.{k}.bias"), vec![0.0; p], vec![p], true)?;
        }
        let cat = self.token_dims.len() * p;
        let h = self.hidden_dim;
        registry.insert(
            "heads.fusion.hidden_weight",
            normal_matrix(rng, cat, h, 1.0 / (cat as f64).sqrt()),
            vec![cat, h],
            true,
        )?;
        registry.insert("heads.fusion.hidden_bias", vec![0.0; h], vec![h], true)?;
        registry.insert(
            "heads.fusion.out_weight",
            normal_matrix(rng, h, p, 1.0 / (h as f64).sqrt()),
            vec![h, p],
            true,
        )?;
        registry.insert("heads.fusion.out_bias", vec![0.0; p], vec![p], true)?;
        Ok(())
    }

    /// Affine projection of one modality's pooled representation to proj_dim.
    pub fn project(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        modality: usize,
        pooled: TensorId,
    ) -> Result<TensorId> {
        let d = self.token_dims[modality];
        if tape.shape(pooled) != [d] {
            return Err(Error::Input(format!(
                "modality {modality} projection expects a length-{d} vector, got {:?}",
                tape.shape(pooled)
            )));
        }
        let w = binding.bind(tape, registry, &format!("heads.project.{modality}.weight"))?;
        let b = binding.bind(tape, registry, &format!("heads.project.{modality}.bias"))?;
        let x = tape.reshape(pooled, vec![1, d])?;
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, vec![self.proj_dim])?;
        tape.add(y, b)
    }

    /// Fuse per-modality representations into the joint representation.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        reps: &[TensorId],
    ) -> Result<TensorId> {
        if reps.len() != self.token_dims.len() {
            return Err(Error::Contract(format!(
                "fuse expects {} modality representations, got {}",
                self.token_dims.len(),
                reps.len()
            )));
        }
        for &r in reps {
            if tape.shape(r) != [self.proj_dim] {
                return Err(Error::Input(format!(
                    "fuse inputs must be length-{} vectors, got {:?}",
                    self.proj_dim,
                    tape.shape(r)
                )));
            }
        }
        let cat = tape.concat1d(reps)?;
        let cat_len = reps.len() * self.proj_dim;
        let x = tape.reshape(cat, vec![1, cat_len])?;
        let w1 = binding.bind(tape, registry, "heads.fusion.hidden_weight")?;
        let b1 = binding.bind(tape, registry, "heads.fusion.hidden_bias")?;
        let h = tape.matmul(x, w1)?;
        let h = tape.reshape(h, vec![self.hidden_dim])?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let w2 = binding.bind(tape, registry, "heads.fusion.out_weight")?;
        let b2 = binding.bind(tape, registry, "heads.fusion.out_bias")?;
        let h2 = tape.reshape(h, vec![1, self.hidden_dim])?;
        let out = tape.matmul(h2, w2)?;
        let out = tape.reshape(out, vec![self.proj_dim])?;
        tape.add(out, b2)
    }

    /// Logits over all classes seen so far.
    pub fn classify(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        registry: &ParameterRegistry,
        joint: TensorId,
    ) -> Result<TensorId> {
        if self.num_classes == 0 {
            return Err(Error::Contract("classifier has no classes yet".into()));
        }
        if tape.shape(joint) != [self.proj_dim] {
            return Err(Error::Contract(format!(
                "classify expects a length-{} vector, got {:?}",
                self.proj_dim,
                tape.shape(joint)
            )));
        }
        let w = binding.bind(tape, registry, "heads.classifier.weight")?;
        let b = binding.bind(tape, registry, "heads.classifier.bias")?;
        let x = tape.reshape(joint, vec![1, self.proj_dim])?;
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, vec![self.num_classes])?;
        tape.add(y, b)
    }

    /// Widen the classifier by `new_classes` columns. Existing class weights
    /// are preserved bit-for-bit; new ones start at zero.
    pub fn expand_classifier(
        &mut self,
        registry: &mut ParameterRegistry,
        new_classes: usize,
    ) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Contract("expand_classifier requires new_classes >= 1".into()));
        }
        let p = self.proj_dim;
        let old = self.num_classes;
        let wide = old + new_classes;
        if old == 0 {
            registry.insert("heads.classifier.weight", vec![0.0; p * wide], vec![p, wide], true)?;
            registry.insert("heads.classifier.bias", vec![0.0; wide], vec![wide], true)?;
        } else {
            let old_w = registry.get("heads.classifier.weight")?.tensor.data.clone();
            let old_b = registry.get("heads.classifier.bias")?.tensor.data.clone();
            let mut w = vec![0.0; p * wide];
            for r in 0..p {
                w[r * wide..r * wide + old].copy_from_slice(&old_w[r * old..(r + 1) * old]);
            }
            let mut b = vec![0.0; wide];
            b[..old].copy_from_slice(&old_b);
            let entry = registry.get_mut("heads.classifier.weight")?;
            entry.tensor = crate::tensor::Tensor::new(w, vec![p, wide], true)?;
            let entry = registry.get_mut("heads.classifier.bias")?;
            entry.tensor = crate::tensor::Tensor::new(b, vec![wide], true)?;
        }
        self.num_classes = wide;
        Ok(())
    }
}
