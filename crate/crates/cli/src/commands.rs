//! The four subcommands. Each returns the lines it prints on stdout so the
//! driver and the tests share one code path.

use std::path::{Path, PathBuf};

use otkd_core::data::{read_dataset, write_dataset, Sample, SynthTask};
use otkd_core::distill::{distill, DistillPlan};
use otkd_core::metrics::{
    blank_fraction, check_compatible, evaluate, export_attention, export_posterior_heatmap,
};
use otkd_core::models::{load_model, save_model, Model, ModelKind};
use otkd_core::train::{threads_from_env, train_teacher};
use otkd_core::Error;

use crate::config::{ConfigError, RunConfig};

/// Failures grouped by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Config(msg),
            Error::Io(_) | Error::Format(_) => CliError::Io(msg),
            Error::Divergence(_) | Error::NonFinite { .. } => CliError::Divergence(msg),
            _ => CliError::Other(msg),
        }
    }
}

fn io_context(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Checkpoint problems other than a missing or unreadable file are
/// mismatches.
fn load_checkpoint_model(path: &Path) -> Result<(Model, otkd_core::autodiff::ParameterStore), CliError> {
    load_model(path).map_err(|e| match e {
        Error::Io(io) => io_context(path, io),
        other => CliError::Mismatch(format!("{}: {other}", path.display())),
    })
}

pub fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_context(path, e))?;
    Ok(RunConfig::parse(&text)?)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Train and eval files written by `gen-data --out PREFIX`.
pub fn split_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(prefix, ".train.otds"), with_suffix(prefix, ".eval.otds"))
}

fn read_split(path: &Path) -> Result<Vec<Sample>, CliError> {
    read_dataset(path).map_err(|e| io_context(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_context(path, e))
}

/// Echoes the effective configuration to stderr and next to `out`.
fn record_config(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let text = config.to_text();
    eprint!("{text}");
    write_text(&with_suffix(out, ".config"), &text)
}

fn check_data(model: &Model, samples: &[Sample], what: &str) -> Result<(), CliError> {
    check_compatible(model, samples).map_err(|e| CliError::Mismatch(format!("{what}: {e}")))
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    record_config(config, out)?;
    let task = SynthTask::new(config.task_spec())?;
    let n = config.train_samples;
    let train = task.samples(0..n)?;
    let eval = task.samples(n..n + config.eval_samples)?;
    let (tp, ep) = split_paths(out);
    let mut lines = Vec::new();
    for (name, path, samples) in [("train", &tp, &train), ("eval", &ep, &eval)] {
        write_dataset(samples, path).map_err(|e| io_context(path, e))?;
        let bytes = std::fs::metadata(path).map_err(|e| io_context(path, e))?.len();
        lines.push(format!(
            "{name}: samples={} bytes={bytes} path={}",
            samples.len(),
            path.display()
        ));
    }
    Ok(lines)
}

pub fn train_teacher_cmd(
    kind: ModelKind,
    config: &RunConfig,
    data: &Path,
    out: &Path,
) -> Result<Vec<String>, CliError> {
    record_config(config, out)?;
    let (tp, ep) = split_paths(data);
    let (train, eval) = (read_split(&tp)?, read_split(&ep)?);
    let model = config.teacher(kind)?;
    check_data(&model, &train, "training data")?;
    check_data(&model, &eval, "evaluation data")?;
    let mut params = model.init(config.seed)?;
    let settings = config.teacher_settings(threads_from_env());
    let log = train_teacher(&model, &mut params, &train, &eval, &settings, config.teacher_warmup_epochs)?;
    save_model(&model, &params, out).map_err(|e| io_context(out, e))?;
    write_text(&with_suffix(out, ".log.tsv"), &log.to_tsv())?;
    let last = log.last().ok_or_else(|| CliError::Config("teacher_epochs must be positive".into()))?;
    Ok(vec![format!(
        "kind={} epochs={} final_train_loss={:.6} eval_cer={:.6}",
        kind.name(),
        log.records.len(),
        last.loss,
        last.eval_cer
    )])
}

pub fn distill_cmd(
    teacher_path: &Path,
    config: &RunConfig,
    data: &Path,
    out: &Path,
    compare_baseline: bool,
) -> Result<Vec<String>, CliError> {
    record_config(config, out)?;
    let (teacher, teacher_params) = load_checkpoint_model(teacher_path)?;
    if !teacher.kind.is_oracle() && teacher.kind != ModelKind::Conventional {
        return Err(CliError::Mismatch(format!(
            "{} holds a {} model, not a teacher",
            teacher_path.display(),
            teacher.kind.name()
        )));
    }
    let student = config.student()?;
    if teacher.downsample() != student.downsample()
        || teacher.num_labels() != student.num_labels()
        || teacher.feat_dim() != student.feat_dim()
    {
        return Err(CliError::Mismatch(format!(
            "teacher (labels {}, features {}, downsample {}) does not fit the configured student (labels {}, features {}, downsample {})",
            teacher.num_labels(),
            teacher.feat_dim(),
            teacher.downsample(),
            student.num_labels(),
            student.feat_dim(),
            student.downsample()
        )));
    }
    let (tp, ep) = split_paths(data);
    let (train, eval) = (read_split(&tp)?, read_split(&ep)?);
    check_data(&student, &train, "training data")?;
    check_data(&student, &eval, "evaluation data")?;
    let settings = config.student_settings(threads_from_env());
    let plan = config.distill_plan();
    let outcome = distill(&plan, Some((&teacher, &teacher_params)), &student, &train, &eval, &settings)?;
    save_model(&student, &outcome.params, out).map_err(|e| io_context(out, e))?;
    write_text(&with_suffix(out, ".log.tsv"), &outcome.log.to_tsv())?;
    let cer = evaluate(&student, &outcome.params, &eval)?.corpus_cer;
    let mut lines = vec![format!(
        "teacher={} kd_loss={} seed={} distilled_cer={cer:.6}",
        teacher.kind.name(),
        plan.kd_loss.name(),
        plan.seed
    )];
    if compare_baseline {
        let base_plan = DistillPlan {
            kd_epochs: 0,
            ..plan
        };
        let base = distill(&base_plan, None, &student, &train, &eval, &settings)?;
        let base_cer = evaluate(&student, &base.params, &eval)?.corpus_cer;
        let gain = if base_cer > 0.0 { 1.0 - cer / base_cer } else { 0.0 };
        lines.push(format!(
            "baseline_cer={base_cer:.6} distilled_cer={cer:.6} relative_gain={gain:.6}"
        ));
    }
    Ok(lines)
}

pub struct EvalOptions<'a> {
    pub heatmap: Option<&'a Path>,
    pub attention: Option<&'a Path>,
    pub sample_index: usize,
}

pub fn eval_cmd(model_path: &Path, data: &Path, opts: &EvalOptions<'_>) -> Result<Vec<String>, CliError> {
    let (model, params) = load_checkpoint_model(model_path)?;
    let (_, ep) = split_paths(data);
    let eval = read_split(&ep)?;
    check_data(&model, &eval, "evaluation data")?;
    if opts.attention.is_some() && !model.kind.is_oracle() {
        return Err(CliError::Mismatch(format!(
            "attention export needs an oracle-kind checkpoint, {} holds {}",
            model_path.display(),
            model.kind.name()
        )));
    }
    let report = evaluate(&model, &params, &eval)?;
    let vocab = model.vocab();
    let mut blank = 0.0;
    for s in &eval {
        blank += blank_fraction(&model.infer(&params, &s.x, &s.y)?.grid, &vocab);
    }
    let mut lines = vec![
        format!("model={} {}", model.kind.name(), report.summary()),
        format!("blank_fraction={:.6}", blank / eval.len().max(1) as f64),
    ];
    if opts.heatmap.is_some() || opts.attention.is_some() {
        let sample = eval.get(opts.sample_index).ok_or_else(|| {
            CliError::Config(format!(
                "sample index {} beyond {} evaluation samples",
                opts.sample_index,
                eval.len()
            ))
        })?;
        let inf = model.infer(&params, &sample.x, &sample.y)?;
        if let Some(path) = opts.heatmap {
            export_posterior_heatmap(&inf.grid, &vocab, path).map_err(|e| io_context(path, e))?;
            lines.push(format!("heatmap_rows={} path={}", inf.grid.frames(), path.display()));
        }
        if let Some(path) = opts.attention {
            let weights = inf
                .cross_attention
                .ok_or_else(|| CliError::Mismatch("model produced no attention".into()))?;
            export_attention(&weights, path).map_err(|e| io_context(path, e))?;
            lines.push(format!("attention_rows={} path={}", weights.shape()[0], path.display()));
        }
    }
    Ok(lines)
}
