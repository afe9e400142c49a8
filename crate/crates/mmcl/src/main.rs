//! Batch front-end: dataset generation, training runs, evaluation,
//! ablations, gradient checks, and representation dumps.
//!
//! Exit codes: 0 success, 1 usage/config problems, 2 data errors,
//! 3 numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmcl::config::RunConfig;
use mmcl::data::{
    generate_class_incremental, generate_domain_incremental, load_dataset, save_dataset, Label,
    Scenario, TaskStream,
};
use mmcl::engine::{evaluate, run_sequence};
use mmcl::error::Error;
use mmcl::gradcheck::{reference_tiny_config, run_model_gradcheck};
use mmcl::metrics::{emit_report, ReportFormat};
use mmcl::model::{AdapterUse, ModelState};
use mmcl::optim::TapeBinding;
use mmcl::tensor::Tape;
use mmcl::util::write_atomic;

#[derive(Parser)]
#[command(name = "mmcl", version, about = "Multi-modal continual learning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// class_incremental or domain_incremental.
    #[arg(long)]
    scenario: Option<String>,
    /// cross, modality_specific, or none.
    #[arg(long)]
    adapter_mode: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal task stream.
    Generate(Overrides),
    /// Train over the task stream; write checkpoints and reports.
    Train(Overrides),
    /// Score a checkpoint on every task of a dataset.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run ablation variants with a shared seed.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated subset of {align,preserve,distil,adapter}.
        #[arg(long, default_value = "align,preserve,distil")]
        switches: String,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Write z^k and joint z for every test sample of a checkpoint.
    DumpRepresentations {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn usage_err(msg: String) -> Error {
    Error::Contract(msg)
}

fn load_config(ov: &Overrides, default: Option<RunConfig>) -> Result<RunConfig, Error> {
    let mut cfg = match (&ov.config, default) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(d)) => d,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = ov.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = ov.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(s) = &ov.scenario {
        cfg.scenario = match s.as_str() {
            "class_incremental" => Scenario::ClassIncremental,
            "domain_incremental" => Scenario::DomainIncremental,
            other => return Err(usage_err(format!("unknown scenario `{other}`"))),
        };
    }
    if let Some(m) = &ov.adapter_mode {
        cfg.train.adapter_mode = match m.as_str() {
            "cross" => AdapterUse::Cross,
            "modality_specific" => AdapterUse::ModalitySpecific,
            "none" => AdapterUse::None,
            other => return Err(usage_err(format!("unknown adapter mode `{other}`"))),
        };
    }
    if let Some(d) = &ov.dataset {
        cfg.paths.dataset = d.clone();
    }
    if let Some(o) = &ov.out_dir {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate_stream(cfg: &RunConfig) -> Result<TaskStream, Error> {
    let spec = cfg.synth_spec();
    match cfg.scenario {
        Scenario::ClassIncremental => generate_class_incremental(&spec),
        Scenario::DomainIncremental => generate_domain_incremental(&spec),
    }
}

fn cmd_generate(cfg: &RunConfig) -> Result<(), Error> {
    let stream = generate_stream(cfg)?;
    save_dataset(&stream, &cfg.paths.dataset)?;
    let records: usize = stream.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();
    println!(
        "wrote {} ({} tasks, {} classes, {} records)",
        cfg.paths.dataset.display(),
        stream.tasks.len(),
        stream.num_classes,
        records
    );
    Ok(())
}

fn run_and_emit(cfg: &RunConfig, out_dir: &Path) -> Result<(f64, f64), Error> {
    let stream = load_dataset(&cfg.paths.dataset)?;
    let outcome = run_sequence(&stream, cfg)?;
    for (t, ckpt) in outcome.checkpoints.iter().enumerate() {
        ckpt.save(&out_dir.join(format!("checkpoint_task{}.json", t + 1)))?;
    }
    emit_report(&outcome.report, &out_dir.join("report.json"), ReportFormat::Structured)?;
    emit_report(&outcome.report, &out_dir.join("report.csv"), ReportFormat::Tabular)?;
    let stats = serde_json::to_string_pretty(&outcome.stats)
        .map_err(|e| Error::Schema(format!("stats serialization failed: {e}")))?;
    write_atomic(&out_dir.join("train_stats.json"), stats.as_bytes())?;
    Ok((outcome.report.acc, outcome.report.fgt))
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Error> {
    let (acc, fgt) = run_and_emit(cfg, &cfg.paths.out_dir)?;
    println!(
        "acc {acc:.6}  fgt {fgt:.6}  report {}",
        cfg.paths.out_dir.join("report.json").display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<(), Error> {
    let stream = load_dataset(&cfg.paths.dataset)?;
    let model = ModelState::load(checkpoint)?;
    let mut rows = Vec::new();
    let mut joint_pool = Vec::new();
    for task in &stream.tasks {
        let score = evaluate(&model, &task.test, cfg)?;
        println!("task {}: weighted F1 {score:.6}", task.id + 1);
        rows.push(serde_json::json!({"task": task.id + 1, "weighted_f1": score}));
        joint_pool.extend(task.test.iter().cloned());
    }
    let joint = evaluate(&model, &joint_pool, cfg)?;
    println!("all tasks: weighted F1 {joint:.6}");
    let out = serde_json::json!({"per_task": rows, "joint": joint});
    let path = cfg.paths.out_dir.join("evaluation.json");
    write_atomic(&path, serde_json::to_string_pretty(&out).unwrap().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, switches: &str) -> Result<(), Error> {
    let mut loss_axes: Vec<&str> = Vec::new();
    let mut adapter_axis = false;
    for s in switches.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match s {
            "align" | "preserve" | "distil" => loss_axes.push(s),
            "adapter" => adapter_axis = true,
            other => return Err(usage_err(format!("unknown ablation switch `{other}`"))),
        }
    }
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    let grid = 1usize << loss_axes.len();
    for mask in 0..grid {
        let mut v = cfg.clone();
        let mut name_parts = Vec::new();
        for (i, &axis) in loss_axes.iter().enumerate() {
            let on = mask & (1 << i) == 0;
            if !on {
                match axis {
                    "align" => v.train.lambda_align = 0.0,
                    "preserve" => v.train.lambda_preserve = 0.0,
                    "distil" => v.train.lambda_distill = 0.0,
                    _ => unreachable!(),
                }
            }
            name_parts.push(format!("{axis}={}", if on { "on" } else { "off" }));
        }
        let name = if name_parts.is_empty() { "base".to_string() } else { name_parts.join(",") };
        variants.push((name, v));
    }
    if adapter_axis {
        for (tag, mode) in [
            ("adapter=modality_specific", AdapterUse::ModalitySpecific),
            ("adapter=none", AdapterUse::None),
        ] {
            let mut v = cfg.clone();
            v.train.adapter_mode = mode;
            variants.push((tag.to_string(), v));
        }
    }

    let mut summary = String::from("variant,acc,fgt\n");
    for (name, variant) in &variants {
        let dir = cfg.paths.out_dir.join("ablate").join(name.replace([',', '='], "_"));
        let (acc, fgt) = run_and_emit(variant, &dir)?;
        println!("{name}: acc {acc:.6} fgt {fgt:.6}");
        summary.push_str(&format!("{name},{acc},{fgt}\n"));
    }
    let path = cfg.paths.out_dir.join("ablate").join("summary.csv");
    write_atomic(&path, summary.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(ov: &Overrides, step: f64, tolerance: f64) -> Result<(), Error> {
    // Without an explicit config this uses the tiny reference dims; full
    // finite differences over a production-sized model would take hours.
    let cfg = load_config(ov, Some(reference_tiny_config()))?;
    let report = run_model_gradcheck(&cfg, step, tolerance)?;
    for g in &report.groups {
        println!(
            "{}  max_rel_err {:.3e}  {}",
            if g.passed { "ok  " } else { "FAIL" },
            g.max_rel_err,
            g.group
        );
    }
    let out = cfg.paths.out_dir.join("gradcheck.json");
    write_atomic(&out, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    println!(
        "{} groups, worst {:.3e}, tolerance {:.1e}, report {}",
        report.groups.len(),
        report.worst(),
        report.tolerance,
        out.display()
    );
    if !report.passed {
        return Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            report.tolerance
        )));
    }
    Ok(())
}

fn cmd_dump_representations(cfg: &RunConfig, checkpoint: &Path) -> Result<(), Error> {
    let stream = load_dataset(&cfg.paths.dataset)?;
    let model = ModelState::load(checkpoint)?;
    let mut out = String::from("sample,task,class,tag,values\n");
    let mut sample_id = 0usize;
    for task in &stream.tasks {
        for s in &task.test {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let fwd = model.forward_sample(&mut tape, &mut binding, s, cfg.train.adapter_mode)?;
            let class = match &s.label {
                Label::Single(c) => c.to_string(),
                Label::Multi(cs) => {
                    cs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
                }
            };
            let mut push_row = |tag: &str, values: &[f64]| {
                let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
                out.push_str(&format!("{sample_id},{},{class},{tag},{joined}\n", task.id + 1));
            };
            for (k, &z) in fwd.z_mods.iter().enumerate() {
                push_row(&format!("modality{k}"), tape.value(z));
            }
            push_row("joint", tape.value(fwd.z_joint));
            sample_id += 1;
        }
    }
    let path = cfg.paths.out_dir.join("representations.csv");
    write_atomic(&path, out.as_bytes())?;
    println!("wrote {} ({} samples)", path.display(), sample_id);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(ov) => cmd_generate(&load_config(&ov, None)?),
        Command::Train(ov) => cmd_train(&load_config(&ov, None)?),
        Command::Evaluate { overrides, checkpoint } => {
            cmd_evaluate(&load_config(&overrides, None)?, &checkpoint)
        }
        Command::Ablate { overrides, switches } => {
            cmd_ablate(&load_config(&overrides, None)?, &switches)
        }
        Command::Gradcheck { overrides, tolerance, step } => {
            cmd_gradcheck(&overrides, step, tolerance)
        }
        Command::DumpRepresentations { overrides, checkpoint } => {
            cmd_dump_representations(&load_config(&overrides, None)?, &checkpoint)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                // Configuration and precondition problems are usage errors.
                Error::Contract(_) => 1,
                _ => e.exit_code(),
            };
            ExitCode::from(code as u8)
        }
    }
}
