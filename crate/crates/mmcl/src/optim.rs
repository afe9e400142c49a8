//! Parameter registry, Adam optimizer, and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// One named parameter: its value buffer and whether the optimizer may touch it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Map from hierarchical parameter name to value. Iteration order is the
/// name order (BTreeMap), which keeps every downstream computation
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, Param>,
}

/// Gradients keyed by parameter name, as pulled off a tape after backward.
pub type GradientMap = BTreeMap<String, Vec<f64>>;

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Trainable entries get `requires_grad == true`.
    pub fn insert(
        &mut self,
        name: &str,
        data: Vec<f64>,
        shape: Vec<usize>,
        trainable: bool,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let tensor = Tensor::new(data, shape, trainable)?;
        self.entries.insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Mark a parameter frozen: the optimizer skips it and no gradient is
    /// computed for it. Freezing is one-way here; nothing unfreezes.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let p = self.get_mut(name)?;
        p.trainable = false;
        p.tensor.requires_grad = false;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace a parameter's value buffer, keeping shape and flags.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if data.len() != p.tensor.data.len() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has {} elements, got {}",
                p.tensor.data.len(),
                data.len()
            )));
        }
        p.tensor.data = data;
        Ok(())
    }

    /// Add small seeded noise to every trainable parameter. Used by the
    /// gradient checker to move off degenerate points such as exactly-zero
    /// up-projections, where several gradients vanish identically.
    pub fn jitter(&mut self, rng: &mut impl rand::Rng, scale: f64) {
        for (_, p) in self.entries.iter_mut() {
            if p.trainable {
                for v in &mut p.tensor.data {
                    *v += (rng.random::<f64>() * 2.0 - 1.0) * scale;
                }
            }
        }
    }

    /// FNV-1a hash of the value bits of the selected parameters, for
    /// immutability checks.
    pub fn hash_of<'a>(&self, names: impl Iterator<Item = &'a str>) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for name in names {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            if let Some(p) = self.entries.get(name) {
                for v in &p.tensor.data {
                    for b in v.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        h
    }
}

/// Insert registry entries onto a tape as leaves, remembering the binding so
/// gradients can be pulled back out by name after `backward`.
pub struct TapeBinding {
    bound: BTreeMap<String, TensorId>,
}

impl TapeBinding {
    pub fn new() -> Self {
        TapeBinding { bound: BTreeMap::new() }
    }

    /// Leaf for `name`, inserted once per tape and reused afterwards.
    pub fn bind(
        &mut self,
        tape: &mut Tape,
        registry: &ParameterRegistry,
        name: &str,
    ) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = registry.get(name)?;
        let id = tape.leaf(
            p.tensor.data.clone(),
            p.tensor.shape.clone(),
            p.tensor.requires_grad,
        )?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradient for every trainable registry entry after a backward pass.
    /// Parameters that never made it onto the tape get zeros (they cannot
    /// have influenced the loss).
    pub fn collect_grads(&self, tape: &Tape, registry: &ParameterRegistry) -> GradientMap {
        let mut out = GradientMap::new();
        for name in registry.trainable_names() {
            let grad = match self.bound.get(&name) {
                Some(&id) => tape
                    .grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; registry.get(&name).unwrap().tensor.data.len()]),
                None => vec![0.0; registry.get(&name).unwrap().tensor.data.len()],
            };
            out.insert(name, grad);
        }
        out
    }
}

impl Default for TapeBinding {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam state: per-parameter moments plus the shared step counter.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(base_lr: f64) -> Self {
        AdamState {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

/// One Adam update over all trainable registry entries.
///
/// Non-trainable entries are untouched. Every trainable entry must have a
/// gradient in `grads` (zeros are fine).
pub fn adam_step(
    registry: &mut ParameterRegistry,
    state: &mut AdamState,
    grads: &GradientMap,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for name in registry.trainable_names() {
        let grad = grads.get(&name).ok_or_else(|| {
            Error::Contract(format!("missing gradient for trainable parameter `{name}`"))
        })?;
        let param = registry.get_mut(&name)?;
        let n = param.tensor.data.len();
        if grad.len() != n {
            return Err(Error::Dimension(format!(
                "gradient for `{name}` has {} elements, parameter has {n}",
                grad.len()
            )));
        }
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "Adam moment buffers for `{name}` do not match the parameter shape"
            )));
        }
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate: `base_lr/2 · (1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("cosine_lr requires total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr step {step} exceeds total_steps {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_registry(value: f64, trainable: bool) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        reg.insert("p", vec![value], vec![1], trainable).unwrap();
        reg
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut reg = ParameterRegistry::new();
        reg.insert("a", vec![0.0], vec![1], true).unwrap();
        assert!(matches!(reg.insert("a", vec![0.0], vec![1], true), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut reg = single_param_registry(1.5, true);
        let mut state = AdamState::new(0.1);
        let mut grads = GradientMap::new();
        grads.insert("p".into(), vec![0.0]);
        adam_step(&mut reg, &mut state, &grads, 0.1).unwrap();
        assert_eq!(reg.get("p").unwrap().tensor.data, vec![1.5]);
    }

    #[test]
    fn adam_skips_frozen_parameter() {
        let mut reg = single_param_registry(2.0, false);
        let mut state = AdamState::new(0.1);
        // Even a nonzero gradient must not move a frozen parameter.
        let mut grads = GradientMap::new();
        grads.insert("p".into(), vec![5.0]);
        adam_step(&mut reg, &mut state, &grads, 0.1).unwrap();
        assert_eq!(reg.get("p").unwrap().tensor.data[0].to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn adam_hand_evaluated_first_step() {
        // p=1, g=1, lr=0.1, defaults: m̂=1, v̂=1 after bias correction,
        // so p' = 1 - 0.1·1/(1+ε) ≈ 0.9.
        let mut reg = single_param_registry(1.0, true);
        let mut state = AdamState::new(0.1);
        let mut grads = GradientMap::new();
        grads.insert("p".into(), vec![1.0]);
        adam_step(&mut reg, &mut state, &grads, 0.1).unwrap();
        let p = reg.get("p").unwrap().tensor.data[0];
        assert!((p - 0.9).abs() < 1e-8, "got {p}");
    }

    #[test]
    fn adam_missing_gradient_is_contract_error() {
        let mut reg = single_param_registry(1.0, true);
        let mut state = AdamState::new(0.1);
        let grads = GradientMap::new();
        assert!(matches!(
            adam_step(&mut reg, &mut state, &grads, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(matches!(cosine_lr(101, 100, 1e-4), Err(Error::Contract(_))));
        assert!(matches!(cosine_lr(0, 0, 1e-4), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_schedule_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_lr(s, 200, 3e-3).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn binding_reuses_leaves_and_collects_zero_for_unused() {
        let mut reg = ParameterRegistry::new();
        reg.insert("used", vec![1.0, 2.0], vec![2], true).unwrap();
        reg.insert("unused", vec![3.0], vec![1], true).unwrap();
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let a = binding.bind(&mut tape, &reg, "used").unwrap();
        let b = binding.bind(&mut tape, &reg, "used").unwrap();
        assert_eq!(a, b);
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        let grads = binding.collect_grads(&tape, &reg);
        assert_eq!(grads["used"], vec![1.0, 1.0]);
        assert_eq!(grads["unused"], vec![0.0]);
    }

    #[test]
    fn freeze_clears_requires_grad() {
        let mut reg = single_param_registry(1.0, true);
        reg.freeze("p").unwrap();
        let p = reg.get("p").unwrap();
        assert!(!p.trainable);
        assert!(!p.tensor.requires_grad);
    }
}
