//! The four training losses and their combination.
//!
//! Classification is plain cross-entropy (softmax single-label or sigmoid
//! multi-label). Alignment pulls each modality representation of a
//! current-task anchor toward same-class representations from the same
//! modality and toward all joint representations, under a temperature-scaled
//! cosine softmax. Preservation matches pairwise similarity structure of
//! memory samples between the previous and current model via KL divergence,
//! and distillation pins memory logits to the previous model's. The last two
//! are weighted by sqrt(t-1) and vanish at the first task.

use crate::data::{Label, LabelMode};
use crate::error::{Error, Result};
use crate::model::SnapshotOutputs;
use crate::tensor::{Tape, TensorId};

/// Which alignment objective to optimize. `SupCon` is the conventional
/// multi-modal supervised contrastive loss, kept as a comparison switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignVariant {
    Align,
    SupCon,
}

/// One sample's tensors and metadata inside a batch.
pub struct BatchEntry {
    pub label: Label,
    pub from_memory: bool,
    pub z_mods: Vec<TensorId>,
    pub z_joint: TensorId,
    pub logits: TensorId,
    /// Previous-model outputs; present on memory rows when task_index >= 2.
    pub snapshot: Option<SnapshotOutputs>,
}

/// Everything the losses need about one batch.
pub struct BatchContext {
    pub entries: Vec<BatchEntry>,
    /// 1-based task index t.
    pub task_index: usize,
    pub temperature: f64,
    pub lambda_distill: f64,
    pub lambda_align: f64,
    pub lambda_preserve: f64,
    pub label_mode: LabelMode,
}

impl BatchContext {
    fn current_rows(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| !self.entries[i].from_memory).collect()
    }

    fn memory_rows(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].from_memory).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract("temperature must be positive".into()));
        }
        if self.task_index == 0 {
            return Err(Error::Contract("task_index is 1-based".into()));
        }
        let k = self.entries[0].z_mods.len();
        for (i, e) in self.entries.iter().enumerate() {
            if e.z_mods.len() != k {
                return Err(Error::Contract(format!(
                    "batch row {i} has {} modalities, row 0 has {k}",
                    e.z_mods.len()
                )));
            }
            if self.task_index >= 2 && e.from_memory && e.snapshot.is_none() {
                return Err(Error::Contract(format!(
                    "memory row {i} is missing snapshot outputs at t={}",
                    self.task_index
                )));
            }
        }
        Ok(())
    }
}

/// Number of anchor terms the alignment loss averages over: K · |I_D|.
pub(crate) fn align_anchor_count(ctx: &BatchContext) -> usize {
    let k = ctx.entries.first().map(|e| e.z_mods.len()).unwrap_or(0);
    k * ctx.current_rows().len()
}

/// Representation alignment loss over current-task anchors.
pub fn align_loss(tape: &mut Tape, ctx: &BatchContext) -> Result<TensorId> {
    ctx.validate()?;
    let anchors = ctx.current_rows();
    if anchors.is_empty() {
        return Err(Error::Contract("alignment needs at least one current-task anchor".into()));
    }
    let n = ctx.entries.len();
    let num_mods = ctx.entries[0].z_mods.len();
    let inv_tau = 1.0 / ctx.temperature;

    let mut total: Option<TensorId> = None;
    for k in 0..num_mods {
        for &i in &anchors {
            let anchor = ctx.entries[i].z_mods[k];
            // U = same-modality representations of other samples, plus all joints.
            let mut sims = Vec::new();
            let mut positive = Vec::new();
            for j in 0..n {
                if j != i {
                    let s = tape.cosine_sim(anchor, ctx.entries[j].z_mods[k])?;
                    let s = tape.scale_const(s, inv_tau)?;
                    if ctx.entries[i].label.shares_class(&ctx.entries[j].label) {
                        positive.push(s);
                    }
                    sims.push(s);
                }
            }
            for j in 0..n {
                let s = tape.cosine_sim(anchor, ctx.entries[j].z_joint)?;
                let s = tape.scale_const(s, inv_tau)?;
                if ctx.entries[i].label.shares_class(&ctx.entries[j].label) {
                    positive.push(s);
                }
                sims.push(s);
            }
            if positive.is_empty() {
                // No same-class entries for this anchor: contributes zero.
                continue;
            }
            let all = tape.stack_scalars(&sims)?;
            let lse = tape.log_sum_exp(all)?;
            let pos = tape.stack_scalars(&positive)?;
            let pos_sum = tape.sum_all(pos)?;
            let pos_mean = tape.scale_const(pos_sum, -1.0 / positive.len() as f64)?;
            let term = tape.add(lse, pos_mean)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let denom = align_anchor_count(ctx) as f64;
    match total {
        Some(acc) => tape.scale_const(acc, 1.0 / denom),
        None => Ok(tape.scalar_const(0.0)),
    }
}

/// Conventional multi-modal supervised contrastive loss: anchors against all
/// other (sample, modality) representations, no joints. Comparison switch
/// only; not part of the default objective.
pub fn supcon_loss(tape: &mut Tape, ctx: &BatchContext) -> Result<TensorId> {
    ctx.validate()?;
    let anchors = ctx.current_rows();
    if anchors.is_empty() {
        return Err(Error::Contract("contrastive loss needs a current-task anchor".into()));
    }
    let n = ctx.entries.len();
    let num_mods = ctx.entries[0].z_mods.len();
    let inv_tau = 1.0 / ctx.temperature;

    let mut total: Option<TensorId> = None;
    for k in 0..num_mods {
        for &i in &anchors {
            let anchor = ctx.entries[i].z_mods[k];
            let mut sims = Vec::new();
            let mut positive = Vec::new();
            for j in 0..n {
                for m in 0..num_mods {
                    if j == i && m == k {
                        continue;
                    }
                    let s = tape.cosine_sim(anchor, ctx.entries[j].z_mods[m])?;
                    let s = tape.scale_const(s, inv_tau)?;
                    if ctx.entries[i].label.shares_class(&ctx.entries[j].label) {
                        positive.push(s);
                    }
                    sims.push(s);
                }
            }
            if positive.is_empty() {
                continue;
            }
            let all = tape.stack_scalars(&sims)?;
            let lse = tape.log_sum_exp(all)?;
            let pos = tape.stack_scalars(&positive)?;
            let pos_sum = tape.sum_all(pos)?;
            let pos_mean = tape.scale_const(pos_sum, -1.0 / positive.len() as f64)?;
            let term = tape.add(lse, pos_mean)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let denom = (num_mods * anchors.len()) as f64;
    match total {
        Some(acc) => tape.scale_const(acc, 1.0 / denom),
        None => Ok(tape.scalar_const(0.0)),
    }
}

fn stable_row_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn cosine_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine of a zero snapshot representation".into()));
    }
    Ok(dot / (na * nb))
}

/// Knowledge-preservation loss: KL between snapshot and current pairwise
/// similarity rows of memory joint representations, weighted by sqrt(t-1).
/// Returns exactly zero at t=1 or with fewer than two memory rows.
pub fn preserve_loss(tape: &mut Tape, ctx: &BatchContext) -> Result<TensorId> {
    ctx.validate()?;
    let mem = ctx.memory_rows();
    if ctx.task_index < 2 || mem.len() < 2 {
        return Ok(tape.scalar_const(0.0));
    }
    let inv_tau = 1.0 / ctx.temperature;

    // Snapshot similarity rows in plain f64 (no gradient into the snapshot).
    let mut target_rows = Vec::with_capacity(mem.len());
    for (a, &i) in mem.iter().enumerate() {
        let zi = &ctx.entries[i].snapshot.as_ref().expect("validated").z_joint;
        let mut row = Vec::with_capacity(mem.len() - 1);
        for (b, &j) in mem.iter().enumerate() {
            if a == b {
                continue;
            }
            let zj = &ctx.entries[j].snapshot.as_ref().expect("validated").z_joint;
            row.push(cosine_f64(zi, zj)? * inv_tau);
        }
        target_rows.push(stable_row_softmax(&row));
    }

    // Current rows stay on the tape: ln s_ij = sim_ij/τ − lse_i.
    let mut constant = 0.0;
    let mut varying: Option<TensorId> = None;
    for (a, &i) in mem.iter().enumerate() {
        let mut sims = Vec::with_capacity(mem.len() - 1);
        for (b, &j) in mem.iter().enumerate() {
            if a == b {
                continue;
            }
            let s = tape.cosine_sim(ctx.entries[i].z_joint, ctx.entries[j].z_joint)?;
            sims.push(tape.scale_const(s, inv_tau)?);
        }
        let stacked = tape.stack_scalars(&sims)?;
        let lse = tape.log_sum_exp(stacked)?;
        for (&sim, &s_ij) in sims.iter().zip(&target_rows[a]) {
            // s̃·ln s̃ is constant; −s̃·ln s = −s̃·(sim − lse).
            constant += s_ij * s_ij.ln();
            let ln_s = tape.sub(sim, lse)?;
            let neg = tape.scale_const(ln_s, -s_ij)?;
            varying = Some(match varying {
                None => neg,
                Some(acc) => tape.add(acc, neg)?,
            });
        }
    }
    let scale = (ctx.task_index as f64 - 1.0).sqrt() / mem.len() as f64;
    let const_term = tape.scalar_const(constant);
    let sum = match varying {
        None => const_term,
        Some(v) => tape.add(v, const_term)?,
    };
    tape.scale_const(sum, scale)
}

/// Logits-distillation loss over memory rows, weighted by sqrt(t-1).
/// When the classifier has grown since the snapshot, only the coordinates
/// that existed then are compared.
pub fn distill_loss(tape: &mut Tape, ctx: &BatchContext) -> Result<TensorId> {
    ctx.validate()?;
    let mem = ctx.memory_rows();
    if ctx.task_index < 2 || mem.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let mut total: Option<TensorId> = None;
    for &i in &mem {
        let snap = ctx.entries[i].snapshot.as_ref().expect("validated");
        let old_width = snap.logits.len();
        let width = tape.shape(ctx.entries[i].logits)[0];
        if old_width > width {
            return Err(Error::Contract(format!(
                "snapshot logits wider than current ({old_width} > {width})"
            )));
        }
        let current = if old_width < width {
            tape.slice1d(ctx.entries[i].logits, 0, old_width)?
        } else {
            ctx.entries[i].logits
        };
        let target = tape.constant(snap.logits.clone(), vec![old_width])?;
        let diff = tape.sub(current, target)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let scale = (ctx.task_index as f64 - 1.0).sqrt() / mem.len() as f64;
    tape.scale_const(total.expect("memory rows present"), scale)
}

/// Classification loss: softmax cross-entropy for single-label batches,
/// sigmoid binary cross-entropy averaged over batch and classes for
/// multi-label ones.
pub fn class_loss(tape: &mut Tape, ctx: &BatchContext) -> Result<TensorId> {
    ctx.validate()?;
    let n = ctx.entries.len();
    let mut total: Option<TensorId> = None;
    let mut denominator = n as f64;
    for e in &ctx.entries {
        let width = tape.shape(e.logits)[0];
        let term = match (ctx.label_mode, &e.label) {
            (LabelMode::Single, Label::Single(y)) => {
                if *y >= width {
                    return Err(Error::Contract(format!(
                        "label {y} outside classifier width {width}"
                    )));
                }
                let lse = tape.log_sum_exp(e.logits)?;
                let picked = tape.index1d(e.logits, *y)?;
                let neg = tape.scale_const(picked, -1.0)?;
                tape.add(lse, neg)?
            }
            (LabelMode::Multi, Label::Multi(ys)) => {
                if ys.iter().any(|&y| y >= width) {
                    return Err(Error::Contract(format!(
                        "multi-label index outside classifier width {width}"
                    )));
                }
                let mut hot = vec![0.0; width];
                for &y in ys {
                    hot[y] = 1.0;
                }
                let target = tape.constant(hot, vec![width])?;
                // BCE with logits: softplus(p) − p·y, summed over classes.
                let sp = tape.softplus(e.logits)?;
                let py = tape.mul(e.logits, target)?;
                let diff = tape.sub(sp, py)?;
                tape.sum_all(diff)?
            }
            _ => {
                return Err(Error::Contract(
                    "label kind does not match the configured label mode".into(),
                ))
            }
        };
        if ctx.label_mode == LabelMode::Multi {
            denominator = (n * width) as f64;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.scale_const(total.expect("nonempty batch"), 1.0 / denominator)
}

/// The combined objective:
/// class + λ1·distill + λ2·align + λ3·preserve.
///
/// Components the batch cannot define (no anchors, t=1, empty memory) and
/// components with a zero weight contribute exactly nothing.
pub fn total_loss(tape: &mut Tape, ctx: &BatchContext, variant: AlignVariant) -> Result<TensorId> {
    ctx.validate()?;
    let mut loss = class_loss(tape, ctx)?;
    if ctx.lambda_distill != 0.0 && ctx.task_index >= 2 && !ctx.memory_rows().is_empty() {
        let d = distill_loss(tape, ctx)?;
        let d = tape.scale_const(d, ctx.lambda_distill)?;
        loss = tape.add(loss, d)?;
    }
    if ctx.lambda_align != 0.0 && !ctx.current_rows().is_empty() {
        let a = match variant {
            AlignVariant::Align => align_loss(tape, ctx)?,
            AlignVariant::SupCon => supcon_loss(tape, ctx)?,
        };
        let a = tape.scale_const(a, ctx.lambda_align)?;
        loss = tape.add(loss, a)?;
    }
    if ctx.lambda_preserve != 0.0 && ctx.task_index >= 2 && ctx.memory_rows().len() >= 2 {
        let p = preserve_loss(tape, ctx)?;
        let p = tape.scale_const(p, ctx.lambda_preserve)?;
        loss = tape.add(loss, p)?;
    }
    Ok(loss)
}
