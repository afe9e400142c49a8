//! Finite-difference gradient verification.
//!
//! Compares analytic gradients of the full training objective against
//! central finite differences for every trainable parameter group. This is
//! the independent oracle behind the `gradcheck` CLI subcommand and the
//! gradient acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::RunConfig;
use crate::data::{generate_class_incremental, MultiModalSample, TaskStream};
use crate::engine::forward_entry;
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchContext};
use crate::model::{ModelSnapshot, ModelState};
use crate::optim::{ParameterRegistry, TapeBinding};
use crate::tensor::Tape;
use crate::util::derive_seed;

/// Central finite differences of a scalar function of a flat input vector.
pub fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let fp = f(&buf);
        buf[i] = x[i] - h;
        let fm = f(&buf);
        buf[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst elementwise relative error between two gradient vectors.
///
/// Denominator is guarded at 1.0 so near-zero entries are compared
/// absolutely instead of blowing up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Outcome of checking one parameter group (one registry entry).
#[derive(Debug, Clone, serde::Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Full gradient-check report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients against central finite differences of `loss_fn`.
///
/// `loss_fn` must evaluate the objective from the registry values alone;
/// `analytic` maps each trainable entry to its gradient from one backward
/// pass at the current point. Vacuously passes when nothing is trainable.
pub fn compare_against_finite_differences(
    registry: &mut ParameterRegistry,
    analytic: &std::collections::BTreeMap<String, Vec<f64>>,
    loss_fn: &mut dyn FnMut(&ParameterRegistry) -> Result<f64>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names = registry.trainable_names();
    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for `{name}`")))?
            .clone();
        let len = registry.get(&name)?.tensor.data.len();
        if grad.len() != len {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match parameter `{name}` length {len}",
                grad.len()
            )));
        }
        let mut fd = vec![0.0; len];
        for i in 0..len {
            let orig = registry.get(&name)?.tensor.data[i];
            registry.get_mut(&name)?.tensor.data[i] = orig + h;
            let fp = loss_fn(registry)?;
            registry.get_mut(&name)?.tensor.data[i] = orig - h;
            let fm = loss_fn(registry)?;
            registry.get_mut(&name)?.tensor.data[i] = orig;
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let err = max_rel_err(&grad, &fd);
        groups.push(GroupCheck { group: name, max_rel_err: err, passed: err < tolerance });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport { tolerance, step: h, groups, passed })
}

fn batch_loss(
    model: &ModelState,
    batch: &[(MultiModalSample, bool)],
    snapshot: &ModelSnapshot,
    cfg: &RunConfig,
) -> Result<(Tape, TapeBinding, crate::tensor::TensorId)> {
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let mut entries = Vec::with_capacity(batch.len());
    for (sample, from_memory) in batch {
        entries.push(forward_entry(
            model,
            &mut tape,
            &mut binding,
            sample,
            Some(snapshot),
            *from_memory,
            cfg.train.adapter_mode,
        )?);
    }
    let ctx = BatchContext {
        entries,
        task_index: 2,
        temperature: cfg.train.temperature,
        lambda_distill: cfg.train.lambda_distill,
        lambda_align: cfg.train.lambda_align,
        lambda_preserve: cfg.train.lambda_preserve,
        label_mode: cfg.label_mode,
    };
    let loss = total_loss(&mut tape, &ctx, cfg.train.align_variant)?;
    Ok((tape, binding, loss))
}

/// Check every trainable parameter group of the full model against central
/// finite differences of the combined objective, on a t=2 batch that
/// exercises all four loss components.
///
/// Trainable parameters are jittered off their initialization first: exact
/// zero up-projections sit at a stationary point where several gradients
/// vanish identically and the check would be vacuous.
pub fn run_model_gradcheck(cfg: &RunConfig, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let spec = {
        let mut s = cfg.synth_spec();
        s.num_tasks = s.num_tasks.max(2);
        s
    };
    let stream = generate_class_incremental(&spec)?;
    let batch = gradcheck_batch(&stream, cfg.train.batch_size.max(4).min(6));

    let mut model = ModelState::new(
        cfg.modalities(),
        cfg.adapter_config(),
        cfg.model.proj_dim,
        cfg.model.hidden_dim,
        cfg.seed,
    )?;
    let through_t2 = stream.classes_through(1).len();
    model.heads.expand_classifier(&mut model.registry, through_t2)?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-jitter", 0));
    model.registry.jitter(&mut rng, 0.05);

    // The snapshot is a differently seeded model with the task-1 classifier
    // width, so distillation and preservation targets are nontrivial and
    // the logits-width slicing path is exercised.
    let mut snap_model = ModelState::new(
        cfg.modalities(),
        cfg.adapter_config(),
        cfg.model.proj_dim,
        cfg.model.hidden_dim,
        derive_seed(cfg.seed, "gradcheck-snapshot", 0),
    )?;
    let t1_classes = stream.classes_through(0).len();
    snap_model.heads.expand_classifier(&mut snap_model.registry, t1_classes)?;
    let mut rng2 = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck-jitter", 1));
    snap_model.registry.jitter(&mut rng2, 0.05);
    let snapshot = snap_model.snapshot();

    // One analytic backward pass; inactive experts correctly report zeros.
    let (mut tape, binding, loss) = batch_loss(&model, &batch, &snapshot, cfg)?;
    tape.backward(loss)?;
    let grads = binding.collect_grads(&tape, &model.registry);

    let structure = model.clone();
    let mut loss_fn = |reg: &ParameterRegistry| -> Result<f64> {
        let mut m = structure.clone();
        m.registry = reg.clone();
        let (tape, _, loss) = batch_loss(&m, &batch, &snapshot, cfg)?;
        Ok(tape.scalar_value(loss))
    };
    compare_against_finite_differences(&mut model.registry, &grads, &mut loss_fn, h, tolerance)
}

/// A t=2 batch: two memory rows from task 1, the rest current rows from
/// task 2.
fn gradcheck_batch(stream: &TaskStream, size: usize) -> Vec<(MultiModalSample, bool)> {
    let mut batch = Vec::with_capacity(size);
    batch.push((stream.tasks[0].train[0].clone(), true));
    batch.push((stream.tasks[0].train[1].clone(), true));
    for i in 0..size.saturating_sub(2) {
        batch.push((stream.tasks[1].train[i].clone(), false));
    }
    batch
}

/// Tiny reference configuration for gradient checks: K=2, seq 4, token
/// width 8, bottleneck 4, 3 experts top-2, proj 8, batch 4 with 2 memory
/// rows at t=2. Small enough that full finite differences finish in
/// seconds.
pub fn reference_tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 12;
    cfg.data.num_modalities = 2;
    cfg.data.seq_lens = vec![4, 4];
    cfg.data.raw_dims = vec![5, 4];
    cfg.data.tasks = 2;
    cfg.data.classes_per_task = 2;
    cfg.data.train_per_class = 3;
    cfg.data.test_per_class = 1;
    cfg.data.noise_scale = 0.5;
    cfg.model.layers = vec![2, 2];
    cfg.model.token_dims = vec![8, 8];
    cfg.model.num_experts = 3;
    cfg.model.top_k = 2;
    cfg.model.bottleneck = 4;
    cfg.model.proj_dim = 8;
    cfg.model.hidden_dim = 8;
    cfg.train.batch_size = 4;
    cfg
}
