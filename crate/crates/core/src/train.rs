//! Mini-batch training driver shared by teachers and students.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autodiff::{sgd_like_step, Bindings, Gradients, Hyperparams, OptimizerState, ParameterStore, Tape, Var};
use crate::ctc::ctc_loss_on_tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::models::{Model, ModelKind};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub hp: Hyperparams,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads per batch. Results do not depend on this value.
    pub threads: usize,
    /// Learning rate reached by the last epoch of a CTC run, as a fraction of
    /// the initial rate; the rate follows a half cosine in between. 1 keeps
    /// it constant.
    pub final_lr_scale: f64,
}

impl TrainSettings {
    /// Constant learning rate, one worker.
    pub fn new(hp: Hyperparams, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainSettings {
            hp,
            batch_size,
            epochs,
            seed,
            threads: 1,
            final_lr_scale: 1.0,
        }
    }

    /// Hyperparameters for `epoch` (zero-based) of a run of `self.epochs`.
    pub fn hp_at(&self, epoch: usize) -> Hyperparams {
        let base = self.hp.optimizer.learning_rate();
        let progress = if self.epochs > 1 {
            epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        let s = self.final_lr_scale;
        let factor = s + (1.0 - s) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Hyperparams {
            optimizer: self.hp.optimizer.with_learning_rate(base * factor),
            ..self.hp.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub eval_cer: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, epoch: usize, phase: &str, loss: f64, eval_cer: f64) {
        self.records.push(LogRecord {
            epoch,
            phase: phase.to_string(),
            loss,
            eval_cer,
        });
    }

    /// One tab-separated `epoch phase loss eval_cer` record per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}\t{}\t{:.6}\t{:.6}", r.epoch, r.phase, r.loss, r.eval_cer)
                .expect("string write");
        }
        out
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// Reads `OTKD_THREADS`, defaulting to one worker.
pub fn threads_from_env() -> usize {
    std::env::var("OTKD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn sample_gradients<F>(params: &ParameterStore, sample: &Sample, loss_fn: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &Bindings, &Sample) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(params, true);
    let loss = match loss_fn(&mut tape, &b, sample) {
        Ok(v) => v,
        Err(Error::NonFinite { op }) => {
            return Err(Error::Divergence(format!(
                "sample {}: non-finite value in {op}",
                sample.id
            )))
        }
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("sample {}: loss {value}", sample.id)));
    }
    Ok((value, tape.backward(loss)?))
}

/// Mean loss and mean gradient over `batch`. Per-sample gradients are summed
/// in batch order whatever the thread count, so results are reproducible.
pub fn batch_gradients<F>(
    params: &ParameterStore,
    batch: &[&Sample],
    threads: usize,
    loss_fn: &F,
) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &Bindings, &Sample) -> Result<Var> + Sync,
{
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let per_sample: Vec<Result<(f64, Gradients)>> = if threads <= 1 || batch.len() == 1 {
        batch
            .iter()
            .map(|s| sample_gradients(params, s, loss_fn))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| sample_gradients(params, s, loss_fn))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for r in per_sample {
        let (loss, g) = r?;
        total += loss;
        grads.accumulate(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// One optimizer update on one batch; returns the batch mean loss.
pub fn train_step<F>(
    params: &mut ParameterStore,
    state: &mut OptimizerState,
    hp: &Hyperparams,
    batch: &[&Sample],
    threads: usize,
    loss_fn: &F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings, &Sample) -> Result<Var> + Sync,
{
    let (loss, grads) = batch_gradients(params, batch, threads, loss_fn)?;
    sgd_like_step(params, &grads, state, hp)?;
    Ok(loss)
}

/// Shuffled sample order for one epoch of the stream named `label`.
pub fn epoch_order(len: usize, master: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = seed::indexed_stream(master, label, epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// One pass over `samples`; returns the sample-weighted mean loss.
pub fn run_epoch<F>(
    params: &mut ParameterStore,
    state: &mut OptimizerState,
    settings: &TrainSettings,
    samples: &[Sample],
    label: &str,
    epoch: usize,
    loss_fn: &F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings, &Sample) -> Result<Var> + Sync,
{
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let order = epoch_order(samples.len(), settings.seed, label, epoch);
    let mut total = 0.0;
    for idx in order.chunks(settings.batch_size) {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let loss = train_step(params, state, &settings.hp, &batch, settings.threads, loss_fn)?;
        total += loss * batch.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Per-sample CTC objective of `model` on its own prediction.
pub fn ctc_objective(model: &Model) -> impl Fn(&mut Tape, &Bindings, &Sample) -> Result<Var> + Sync + '_ {
    let vocab = model.vocab();
    move |tape, b, s| {
        let out = model.forward(tape, b, &s.x, &s.y)?;
        ctc_loss_on_tape(tape, out.log_probs, &s.y, &vocab)
    }
}

/// One teacher update: mean CTC loss of the batch, gradients through every
/// part of the network.
pub fn oracle_train_step(
    teacher: &Model,
    params: &mut ParameterStore,
    state: &mut OptimizerState,
    hp: &Hyperparams,
    batch: &[&Sample],
) -> Result<f64> {
    train_step(params, state, hp, batch, 1, &ctc_objective(teacher))
}

/// Trains `model` with the CTC objective for `settings.epochs` epochs,
/// evaluating on `eval` after each.
pub fn train_ctc_model(
    model: &Model,
    params: &mut ParameterStore,
    train: &[Sample],
    eval: &[Sample],
    settings: &TrainSettings,
    phase: &str,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    let mut state = OptimizerState::new();
    let objective = ctc_objective(model);
    for epoch in 0..settings.epochs {
        let epoch_settings = TrainSettings {
            hp: settings.hp_at(epoch),
            ..settings.clone()
        };
        let loss = run_epoch(params, &mut state, &epoch_settings, train, phase, epoch, &objective)?;
        let cer = evaluate(model, params, eval)?.corpus_cer;
        log.push(epoch + 1, phase, loss, cer);
    }
    Ok(log)
}

/// Teacher recipe. When `model` is the full Oracle Teacher its first
/// `warmup_epochs` see zeros in place of the source, so the target pathway is
/// trained before the source alone can carry the loss. Every other kind
/// trains with plain CTC throughout; the epoch budget is the same either way.
pub fn train_teacher(
    model: &Model,
    params: &mut ParameterStore,
    train: &[Sample],
    eval: &[Sample],
    settings: &TrainSettings,
    warmup_epochs: usize,
) -> Result<TrainingLog> {
    let warm = if model.kind == ModelKind::Oracle && warmup_epochs > 0 {
        Some(model.oracle_variant(ModelKind::OracleWoSource)?)
    } else {
        None
    };
    let mut log = TrainingLog::default();
    let mut state = OptimizerState::new();
    let full = ctc_objective(model);
    let warm_objective = warm.as_ref().map(ctc_objective);
    for epoch in 0..settings.epochs {
        let epoch_settings = TrainSettings {
            hp: settings.hp_at(epoch),
            ..settings.clone()
        };
        let loss = match &warm_objective {
            Some(obj) if epoch < warmup_epochs => {
                run_epoch(params, &mut state, &epoch_settings, train, "teacher", epoch, obj)?
            }
            _ => run_epoch(params, &mut state, &epoch_settings, train, "teacher", epoch, &full)?,
        };
        let cer = evaluate(model, params, eval)?.corpus_cer;
        log.push(epoch + 1, "teacher", loss, cer);
    }
    Ok(log)
}

/// Checks every sample can be aligned at the model's output rate.
pub fn check_feasible_for(model: &Model, samples: &[Sample]) -> Result<()> {
    for s in samples {
        crate::ctc::check_feasible(model.output_frames(s.frames()), &s.y)?;
    }
    Ok(())
}
