//! Synthetic multi-modal task streams and the dataset file format.
//!
//! Class-incremental streams give every class its own per-modality prototype
//! and mix a per-sample shared latent factor into all modalities, so cross-
//! modality interaction carries real signal. Domain-incremental streams keep
//! one fixed class set and push each task's raw features through a seeded
//! rotation-plus-shift transform.
//!
//! Datasets serialize as line-delimited JSON: a manifest line fixing the
//! schema, then one record per sample. Round-trips are byte-exact.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Dimension of the per-sample latent factor shared across modalities.
const SHARED_LATENT_DIM: usize = 4;

/// Upper bound on distinct class prototypes a stream may use.
pub const MAX_CLASSES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIncremental,
    DomainIncremental,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::ClassIncremental => write!(f, "class_incremental"),
            Scenario::DomainIncremental => write!(f, "domain_incremental"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Single,
    Multi,
}

/// Class assignment of one sample: a single index or a sorted set of
/// positive class indices.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Single(usize),
    Multi(Vec<usize>),
}

impl Label {
    /// Two samples count as same-class when they share any positive label.
    pub fn shares_class(&self, other: &Label) -> bool {
        match (self, other) {
            (Label::Single(a), Label::Single(b)) => a == b,
            (Label::Single(a), Label::Multi(b)) | (Label::Multi(b), Label::Single(a)) => {
                b.contains(a)
            }
            (Label::Multi(a), Label::Multi(b)) => a.iter().any(|x| b.contains(x)),
        }
    }

    /// Class bucket used by the balanced memory policy: the single label or
    /// the lowest positive index.
    pub fn primary_class(&self) -> usize {
        match self {
            Label::Single(c) => *c,
            Label::Multi(cs) => cs.first().copied().unwrap_or(0),
        }
    }

    pub fn max_index(&self) -> usize {
        match self {
            Label::Single(c) => *c,
            Label::Multi(cs) => cs.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Row-major feature matrix with explicit shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }
}

/// One training or test instance: all K modalities plus its label.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiModalSample {
    pub task: usize,
    pub label: Label,
    pub modalities: Vec<FeatureMatrix>,
}

/// One task of the stream with its class set and splits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
}

/// An ordered sequence of tasks sharing one schema.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub label_mode: LabelMode,
    pub num_classes: usize,
    /// Per modality: (seq_len, raw_dim).
    pub modality_shapes: Vec<(usize, usize)>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_modalities(&self) -> usize {
        self.modality_shapes.len()
    }

    /// Classes introduced up to and including task index `t` (0-based), in
    /// order of first appearance.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        let mut seen = Vec::new();
        for task in self.tasks.iter().take(t + 1) {
            for &c in &task.classes {
                if !seen.contains(&c) {
                    seen.push(c);
                }
            }
        }
        seen
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_modalities: usize,
    pub seq_lens: Vec<usize>,
    pub raw_dims: Vec<usize>,
    pub num_tasks: usize,
    /// Classes introduced per task (class-incremental) or the size of the
    /// fixed class set (domain-incremental).
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class prototype in each sample.
    pub signal_strength: f64,
    /// Scale of the per-sample latent factor shared across modalities.
    pub cross_modal_correlation: f64,
    /// Scale of the i.i.d. per-position noise.
    pub noise_scale: f64,
    /// Magnitude of the per-task rotation/shift (domain-incremental only).
    pub domain_shift: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_modalities < 2 {
            return Err(Error::Contract("cross-modality requires K >= 2".into()));
        }
        if self.seq_lens.len() != self.num_modalities || self.raw_dims.len() != self.num_modalities
        {
            return Err(Error::Contract(format!(
                "seq_lens/raw_dims must list {} modalities",
                self.num_modalities
            )));
        }
        if self.seq_lens.iter().any(|&s| s == 0) || self.raw_dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract("all modality dims must be >= 1".into()));
        }
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Contract("need at least one task and one class per task".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Contract("need at least one training sample per class".into()));
        }
        if !(self.signal_strength > 0.0) {
            return Err(Error::Contract("signal strength must be positive".into()));
        }
        Ok(())
    }

    fn check_class_budget(&self, total_classes: usize) -> Result<()> {
        if total_classes > MAX_CLASSES {
            return Err(Error::Contract(format!(
                "{total_classes} classes exceed the prototype budget of {MAX_CLASSES}"
            )));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Per-class, per-modality prototype matrices.
struct Prototypes {
    by_class: Vec<Vec<FeatureMatrix>>,
}

fn make_prototypes(spec: &SynthSpec, total_classes: usize) -> Prototypes {
    let mut by_class = Vec::with_capacity(total_classes);
    for c in 0..total_classes {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, "prototype", c as u64));
        let mut mods = Vec::with_capacity(spec.num_modalities);
        for k in 0..spec.num_modalities {
            let (s, d) = (spec.seq_lens[k], spec.raw_dims[k]);
            mods.push(FeatureMatrix { rows: s, cols: d, data: normal_vec(&mut rng, s * d, 1.0) });
        }
        by_class.push(mods);
    }
    Prototypes { by_class }
}

/// Fixed mixing matrix per modality that spreads the shared latent factor
/// into raw feature space.
fn make_mixing(spec: &SynthSpec) -> Vec<Vec<f64>> {
    (0..spec.num_modalities)
        .map(|k| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, "mixing", k as u64));
            normal_vec(&mut rng, SHARED_LATENT_DIM * spec.raw_dims[k], 1.0 / (SHARED_LATENT_DIM as f64).sqrt())
        })
        .collect()
}

/// Draw one sample of class `class` for every modality.
fn draw_sample(
    spec: &SynthSpec,
    protos: &Prototypes,
    mixing: &[Vec<f64>],
    class: usize,
    task: usize,
    rng: &mut ChaCha12Rng,
) -> MultiModalSample {
    let latent = normal_vec(rng, SHARED_LATENT_DIM, 1.0);
    let mut modalities = Vec::with_capacity(spec.num_modalities);
    for k in 0..spec.num_modalities {
        let (s, d) = (spec.seq_lens[k], spec.raw_dims[k]);
        let proto = &protos.by_class[class][k];
        let mut projected = vec![0.0; d];
        for l in 0..SHARED_LATENT_DIM {
            for j in 0..d {
                projected[j] += latent[l] * mixing[k][l * d + j];
            }
        }
        let noise = normal_vec(rng, s * d, 1.0);
        let mut data = vec![0.0; s * d];
        for p in 0..s {
            for j in 0..d {
                let i = p * d + j;
                data[i] = spec.signal_strength * proto.data[i]
                    + spec.cross_modal_correlation * projected[j]
                    + spec.noise_scale * noise[i];
            }
        }
        modalities.push(FeatureMatrix { rows: s, cols: d, data });
    }
    MultiModalSample { task, label: Label::Single(class), modalities }
}

/// Per-task affine transform: a product of Givens rotations plus a shift,
/// both scaled by the domain-shift magnitude.
struct DomainTransform {
    rotations: Vec<Vec<(usize, usize, f64)>>,
    shifts: Vec<Vec<f64>>,
}

fn make_domain_transform(spec: &SynthSpec, task: usize) -> DomainTransform {
    let mut rotations = Vec::with_capacity(spec.num_modalities);
    let mut shifts = Vec::with_capacity(spec.num_modalities);
    for k in 0..spec.num_modalities {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            spec.seed,
            "domain",
            (task * spec.num_modalities + k) as u64,
        ));
        let d = spec.raw_dims[k];
        let mut givens = Vec::new();
        for i in (0..d.saturating_sub(1)).step_by(2) {
            let angle: f64 = spec.domain_shift * normal_vec(&mut rng, 1, 1.0)[0];
            givens.push((i, i + 1, angle));
        }
        rotations.push(givens);
        shifts.push(normal_vec(&mut rng, d, 1.0).iter().map(|v| v * spec.domain_shift).collect());
    }
    DomainTransform { rotations, shifts }
}

fn apply_domain_transform(sample: &mut MultiModalSample, transform: &DomainTransform) {
    for (k, m) in sample.modalities.iter_mut().enumerate() {
        let d = m.cols;
        for row in 0..m.rows {
            let v = &mut m.data[row * d..(row + 1) * d];
            for &(i, j, angle) in &transform.rotations[k] {
                let (c, s) = (angle.cos(), angle.sin());
                let (xi, xj) = (v[i], v[j]);
                v[i] = c * xi - s * xj;
                v[j] = s * xi + c * xj;
            }
            for j in 0..d {
                v[j] += transform.shifts[k][j];
            }
        }
    }
}

/// Build a class-incremental stream: tasks introduce disjoint class sets.
pub fn generate_class_incremental(spec: &SynthSpec) -> Result<TaskStream> {
    spec.validate()?;
    let total_classes = spec.num_tasks * spec.classes_per_task;
    spec.check_class_budget(total_classes)?;
    let protos = make_prototypes(spec, total_classes);
    let mixing = make_mixing(spec);

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, "task", t as u64));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            for _ in 0..spec.train_per_class {
                train.push(draw_sample(spec, &protos, &mixing, c, t, &mut rng));
            }
            for _ in 0..spec.test_per_class {
                test.push(draw_sample(spec, &protos, &mixing, c, t, &mut rng));
            }
        }
        tasks.push(Task { id: t, classes, train, test });
    }
    Ok(TaskStream {
        scenario: Scenario::ClassIncremental,
        label_mode: LabelMode::Single,
        num_classes: total_classes,
        modality_shapes: spec.seq_lens.iter().copied().zip(spec.raw_dims.iter().copied()).collect(),
        tasks,
    })
}

/// Build a domain-incremental stream: one fixed class set, each task seen
/// through its own rotation-plus-shift of raw feature space.
pub fn generate_domain_incremental(spec: &SynthSpec) -> Result<TaskStream> {
    spec.validate()?;
    let total_classes = spec.classes_per_task;
    spec.check_class_budget(total_classes)?;
    let protos = make_prototypes(spec, total_classes);
    let mixing = make_mixing(spec);

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let classes: Vec<usize> = (0..total_classes).collect();
        let transform = make_domain_transform(spec, t);
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, "task", t as u64));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            for _ in 0..spec.train_per_class {
                let mut s = draw_sample(spec, &protos, &mixing, c, t, &mut rng);
                apply_domain_transform(&mut s, &transform);
                train.push(s);
            }
            for _ in 0..spec.test_per_class {
                let mut s = draw_sample(spec, &protos, &mixing, c, t, &mut rng);
                apply_domain_transform(&mut s, &transform);
                test.push(s);
            }
        }
        tasks.push(Task { id: t, classes, train, test });
    }
    Ok(TaskStream {
        scenario: Scenario::DomainIncremental,
        label_mode: LabelMode::Single,
        num_classes: total_classes,
        modality_shapes: spec.seq_lens.iter().copied().zip(spec.raw_dims.iter().copied()).collect(),
        tasks,
    })
}

// ── Dataset file format ─────────────────────────────────────────────

#[derive(Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    format: String,
    scenario: Scenario,
    label_mode: LabelMode,
    num_modalities: usize,
    seq_lens: Vec<usize>,
    raw_dims: Vec<usize>,
    num_classes: usize,
    num_tasks: usize,
    num_records: usize,
}

const FORMAT_TAG: &str = "mmcl.dataset.v1";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    task: usize,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<usize>>,
    modalities: Vec<FeatureMatrix>,
}

/// Serialize a stream to line-delimited records; byte-deterministic.
pub fn save_dataset(stream: &TaskStream, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let num_records: usize = stream.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();
    let manifest = ManifestRecord {
        format: FORMAT_TAG.to_string(),
        scenario: stream.scenario,
        label_mode: stream.label_mode,
        num_modalities: stream.num_modalities(),
        seq_lens: stream.modality_shapes.iter().map(|&(s, _)| s).collect(),
        raw_dims: stream.modality_shapes.iter().map(|&(_, d)| d).collect(),
        num_classes: stream.num_classes,
        num_tasks: stream.tasks.len(),
        num_records,
    };
    writeln!(out, "{}", serde_json::to_string(&manifest).expect("manifest serializes"))?;
    for task in &stream.tasks {
        for (split, samples) in [("train", &task.train), ("test", &task.test)] {
            for (i, s) in samples.iter().enumerate() {
                let (label, labels) = match &s.label {
                    Label::Single(c) => (Some(*c), None),
                    Label::Multi(cs) => (None, Some(cs.clone())),
                };
                // The task's class set rides on the first train record.
                let classes =
                    (split == "train" && i == 0).then(|| task.classes.clone());
                let record = SampleRecord {
                    task: task.id,
                    split: split.to_string(),
                    label,
                    labels,
                    classes,
                    modalities: s.modalities.clone(),
                };
                writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
            }
        }
    }
    crate::util::write_atomic(path, &out)
}

/// Parse a dataset file back into a stream. Fails with the offending line
/// number on malformed records and refuses schema-inconsistent records and
/// truncated files; no partial stream is ever returned.
pub fn load_dataset(path: &Path) -> Result<TaskStream> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file, manifest missing".into() })?;
    let manifest: ManifestRecord = serde_json::from_str(&first?)
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Schema(format!(
            "unknown format tag `{}`, expected `{FORMAT_TAG}`",
            manifest.format
        )));
    }
    if manifest.seq_lens.len() != manifest.num_modalities
        || manifest.raw_dims.len() != manifest.num_modalities
    {
        return Err(Error::Schema("manifest dims do not match num_modalities".into()));
    }

    let mut tasks: Vec<Task> = (0..manifest.num_tasks)
        .map(|id| Task { id, classes: Vec::new(), train: Vec::new(), test: Vec::new() })
        .collect();
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            return Err(Error::Parse { line: line_no, message: "blank line inside dataset".into() });
        }
        let record: SampleRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if record.task >= manifest.num_tasks {
            return Err(Error::Schema(format!(
                "line {line_no}: task {} out of range ({} tasks)",
                record.task, manifest.num_tasks
            )));
        }
        if record.modalities.len() != manifest.num_modalities {
            return Err(Error::Schema(format!(
                "line {line_no}: {} modalities, manifest says {}",
                record.modalities.len(),
                manifest.num_modalities
            )));
        }
        for (k, m) in record.modalities.iter().enumerate() {
            if m.rows != manifest.seq_lens[k] || m.cols != manifest.raw_dims[k] {
                return Err(Error::Schema(format!(
                    "line {line_no}: modality {k} is {}x{}, manifest says {}x{}",
                    m.rows, m.cols, manifest.seq_lens[k], manifest.raw_dims[k]
                )));
            }
            if m.data.len() != m.rows * m.cols {
                return Err(Error::Schema(format!(
                    "line {line_no}: modality {k} data length {} does not match {}x{}",
                    m.data.len(),
                    m.rows,
                    m.cols
                )));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "line {line_no}: modality {k} contains non-finite values"
                )));
            }
        }
        let label = match (manifest.label_mode, record.label, record.labels) {
            (LabelMode::Single, Some(c), None) => Label::Single(c),
            (LabelMode::Multi, None, Some(cs)) => Label::Multi(cs),
            _ => {
                return Err(Error::Schema(format!(
                    "line {line_no}: label fields do not match manifest label_mode"
                )))
            }
        };
        if label.max_index() >= manifest.num_classes {
            return Err(Error::Schema(format!(
                "line {line_no}: class index beyond num_classes {}",
                manifest.num_classes
            )));
        }
        let task = &mut tasks[record.task];
        if let Some(classes) = record.classes {
            task.classes = classes;
        }
        let sample =
            MultiModalSample { task: record.task, label, modalities: record.modalities };
        match record.split.as_str() {
            "train" => task.train.push(sample),
            "test" => task.test.push(sample),
            other => {
                return Err(Error::Schema(format!("line {line_no}: unknown split `{other}`")))
            }
        }
        seen += 1;
    }
    if seen != manifest.num_records {
        return Err(Error::Parse {
            line: seen + 1,
            message: format!(
                "truncated dataset: manifest promises {} records, found {seen}",
                manifest.num_records
            ),
        });
    }
    // Tasks that never stated a class set derive it from their labels.
    for task in &mut tasks {
        if task.classes.is_empty() {
            let mut cs: Vec<usize> = Vec::new();
            for s in task.train.iter().chain(&task.test) {
                match &s.label {
                    Label::Single(c) => {
                        if !cs.contains(c) {
                            cs.push(*c);
                        }
                    }
                    Label::Multi(m) => {
                        for c in m {
                            if !cs.contains(c) {
                                cs.push(*c);
                            }
                        }
                    }
                }
            }
            cs.sort_unstable();
            task.classes = cs;
        }
    }
    Ok(TaskStream {
        scenario: manifest.scenario,
        label_mode: manifest.label_mode,
        num_classes: manifest.num_classes,
        modality_shapes: manifest
            .seq_lens
            .iter()
            .copied()
            .zip(manifest.raw_dims.iter().copied())
            .collect(),
        tasks,
    })
}
