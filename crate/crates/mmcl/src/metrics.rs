//! Weighted-F1 scoring, the accuracy/forgetting aggregates, and report
//! serialization.
//!
//! Scores live in a lower-triangular matrix: `per_task[t][i]` is the
//! weighted F1 on task `i`'s test split under the model trained through
//! task `t` (0-based), and `joint[t]` is the score over the union of all
//! test splits seen by step `t`. Forgetting follows the max-over-history
//! definition and is implemented verbatim: per-task terms can be negative
//! when later models improve on earlier tasks, and the average divides by
//! the full task count T with the first task contributing zero.

use std::path::Path;

use crate::data::Label;
use crate::error::{Error, Result};

/// Lower-triangular score matrix plus joint scores per step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreMatrix {
    pub per_task: Vec<Vec<f64>>,
    pub joint: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new() -> Self {
        ScoreMatrix { per_task: Vec::new(), joint: Vec::new() }
    }

    pub fn num_steps(&self) -> usize {
        self.per_task.len()
    }

    fn validate(&self) -> Result<()> {
        if self.joint.len() != self.per_task.len() {
            return Err(Error::Contract(format!(
                "joint scores cover {} steps, per-task rows cover {}",
                self.joint.len(),
                self.per_task.len()
            )));
        }
        for (t, row) in self.per_task.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Contract(format!(
                    "step {t} must score tasks 0..={t}, found {} entries",
                    row.len()
                )));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("score {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

impl Default for ScoreMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-class F1 averaged with weights proportional to true-class support.
/// Classes with zero support are excluded from the weighting. Single- and
/// multi-label predictions share the same per-class binary machinery.
pub fn weighted_f1(preds: &[Label], labels: &[Label], num_classes: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "need equal-length nonempty prediction/label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let has = |l: &Label, c: usize| -> bool {
        match l {
            Label::Single(y) => *y == c,
            Label::Multi(ys) => ys.contains(&c),
        }
    };
    let mut weighted = 0.0;
    let mut total_support = 0usize;
    for c in 0..num_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, l) in preds.iter().zip(labels) {
            match (has(p, c), has(l, c)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let support = tp + fn_;
        if support == 0 {
            continue;
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        weighted += support as f64 * f1;
        total_support += support;
    }
    if total_support == 0 {
        return Err(Error::Contract("no class has any support".into()));
    }
    Ok(weighted / total_support as f64)
}

/// Overall accuracy: the mean of the joint scores across steps.
pub fn acc_metric(matrix: &ScoreMatrix) -> Result<f64> {
    matrix.validate()?;
    if matrix.joint.is_empty() {
        return Err(Error::Contract("empty score matrix".into()));
    }
    Ok(matrix.joint.iter().sum::<f64>() / matrix.joint.len() as f64)
}

/// Forgetting: for each step t, the mean over earlier tasks of the gap
/// between the best historical score and the current score, averaged over
/// all T steps with the first step contributing zero.
pub fn fgt_metric(matrix: &ScoreMatrix) -> Result<f64> {
    matrix.validate()?;
    let steps = matrix.per_task.len();
    if steps == 0 {
        return Err(Error::Contract("empty score matrix".into()));
    }
    let mut total = 0.0;
    for t in 1..steps {
        let mut inner = 0.0;
        for i in 0..t {
            let best = (i..t)
                .map(|k| matrix.per_task[k][i])
                .fold(f64::NEG_INFINITY, f64::max);
            inner += best - matrix.per_task[t][i];
        }
        total += inner / t as f64;
    }
    Ok(total / steps as f64)
}

/// Everything one run produces, with the config echoed for reproducibility.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub matrix: ScoreMatrix,
    pub acc: f64,
    pub fgt: f64,
    /// Total frozen experts across all adapters after each task.
    pub frozen_experts_per_task: Vec<usize>,
    pub seed: u64,
    pub config_echo: serde_json::Value,
}

impl RunReport {
    pub fn from_matrix(
        matrix: ScoreMatrix,
        frozen_experts_per_task: Vec<usize>,
        seed: u64,
        config_echo: serde_json::Value,
    ) -> Result<Self> {
        let acc = acc_metric(&matrix)?;
        let fgt = fgt_metric(&matrix)?;
        Ok(RunReport { matrix, acc, fgt, frozen_experts_per_task, seed, config_echo })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    Tabular,
}

/// Serialize a report deterministically. Structured form is JSON and
/// round-trips through [`parse_report`]; tabular form is a flat CSV with one
/// row per score plus summary rows.
pub fn emit_report(report: &RunReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| Error::Schema(format!("report serialization failed: {e}")))?;
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Tabular => {
            let mut s = String::from("kind,task,step,value\n");
            for (t, row) in report.matrix.per_task.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    s.push_str(&format!("score,{i},{t},{v}\n"));
                }
            }
            for (t, v) in report.matrix.joint.iter().enumerate() {
                s.push_str(&format!("joint,,{t},{v}\n"));
            }
            for (t, v) in report.frozen_experts_per_task.iter().enumerate() {
                s.push_str(&format!("frozen_experts,,{t},{v}\n"));
            }
            s.push_str(&format!("acc,,,{}\n", report.acc));
            s.push_str(&format!("fgt,,,{}\n", report.fgt));
            s.push_str(&format!("seed,,,{}\n", report.seed));
            s.into_bytes()
        }
    };
    crate::util::write_atomic(path, &bytes)
}

/// Parse a structured report back.
pub fn parse_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: 1, message: format!("bad report: {e}") })
}
