//! Knowledge-distillation losses and the two-phase student recipe: a
//! representation-matching phase against a frozen teacher, then plain CTC.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Bindings, OptimizerState, ParameterStore, Tape, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::models::{Model, ModelKind, OracleConfig};
use crate::nn::Linear;
use crate::seed;
use crate::train::{ctc_objective, run_epoch, train_ctc_model, TrainSettings, TrainingLog};

/// Projection parameters live under this prefix while phase 1 runs.
pub const PROJECTION_PREFIX: &str = "proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdLoss {
    /// Squared distance between teacher hidden states and projected student
    /// hidden states.
    FitNets,
    /// Frame-wise KL divergence from teacher to student posteriors.
    FrameKl,
    /// Frame-wise squared distance between posterior vectors.
    SoftmaxL2,
}

impl KdLoss {
    pub fn name(self) -> &'static str {
        match self {
            KdLoss::FitNets => "fitnets",
            KdLoss::FrameKl => "kl",
            KdLoss::SoftmaxL2 => "l2",
        }
    }
}

/// Linear bridge from student width to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    pub fn new(student_width: usize, teacher_width: usize) -> Self {
        Projection {
            linear: Linear::new(PROJECTION_PREFIX, student_width, teacher_width),
        }
    }

    /// Small random weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        self.linear.init_scaled(&mut store, rng, 0.1)?;
        Ok(store)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        self.linear.forward(tape, b, x)
    }
}

fn frame_mismatch(student: &[usize], teacher: &[usize]) -> Error {
    Error::config(format!(
        "student output {student:?} and teacher output {teacher:?} are not frame-aligned"
    ))
}

/// `sum_t ||w_tea[t] - g(w_stu[t])||^2`, divided by the frame count when
/// `per_frame`. The teacher side is a constant.
pub fn fitnets_loss(
    tape: &mut Tape,
    b: &Bindings,
    w_stu: Var,
    w_tea: &Tensor,
    g: &Projection,
    per_frame: bool,
) -> Result<Var> {
    let stu_shape = tape.shape(w_stu).to_vec();
    if stu_shape.len() != 2 || w_tea.rank() != 2 || stu_shape[0] != w_tea.shape()[0] {
        return Err(frame_mismatch(&stu_shape, w_tea.shape()));
    }
    let projected = g.forward(tape, b, w_stu)?;
    let target = tape.constant(w_tea.clone());
    let diff = tape.sub(target, projected)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    if per_frame && stu_shape[0] > 0 {
        tape.div_scalar(total, stu_shape[0] as f64)
    } else {
        Ok(total)
    }
}

fn check_same_grid(tape: &Tape, stu: Var, tea: &Tensor) -> Result<usize> {
    let s = tape.shape(stu);
    if s != tea.shape() || s.len() != 2 {
        return Err(Error::Dimension {
            op: "distillation_loss",
            lhs: s.to_vec(),
            rhs: tea.shape().to_vec(),
        });
    }
    Ok(s[0].max(1))
}

/// `mean_t sum_c P_tea(c) (log P_tea(c) - log P_stu(c))` with both grids
/// given as log-probabilities.
pub fn frame_kl_loss(tape: &mut Tape, stu_log_probs: Var, tea_log_probs: &Tensor) -> Result<Var> {
    let frames = check_same_grid(tape, stu_log_probs, tea_log_probs)?;
    let tea_p = tea_log_probs.map(f64::exp);
    let entropy_term: f64 = tea_p
        .data()
        .iter()
        .zip(tea_log_probs.data())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lp)| p * lp)
        .sum();
    let p = tape.constant(tea_p);
    let cross = tape.mul(stu_log_probs, p)?;
    let cross = tape.sum(cross)?;
    let c = tape.constant(Tensor::scalar(entropy_term));
    let kl = tape.sub(c, cross)?;
    tape.div_scalar(kl, frames as f64)
}

/// `mean_t sum_c (P_tea(c) - P_stu(c))^2`.
pub fn softmax_l2_loss(tape: &mut Tape, stu_log_probs: Var, tea_log_probs: &Tensor) -> Result<Var> {
    let frames = check_same_grid(tape, stu_log_probs, tea_log_probs)?;
    let stu_p = tape.exp(stu_log_probs)?;
    let tea_p = tape.constant(tea_log_probs.map(f64::exp));
    let diff = tape.sub(stu_p, tea_p)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.div_scalar(total, frames as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub kd_loss: KdLoss,
    /// Representation-matching epochs; zero gives the plain CTC baseline.
    pub kd_epochs: usize,
    pub ctc_epochs: usize,
    /// Student initialization and shuffling seed.
    pub seed: u64,
    /// Divide the FitNets sum by the frame count.
    pub per_frame: bool,
}

impl DistillPlan {
    pub fn baseline(ctc_epochs: usize, seed: u64) -> Self {
        DistillPlan {
            kd_loss: KdLoss::FitNets,
            kd_epochs: 0,
            ctc_epochs,
            seed,
            per_frame: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub params: ParameterStore,
    pub log: TrainingLog,
}

struct TeacherTargets {
    hidden: Vec<Tensor>,
    log_probs: Vec<Tensor>,
}

fn teacher_targets(
    teacher: &Model,
    teacher_params: &ParameterStore,
    student: &Model,
    train: &[Sample],
) -> Result<TeacherTargets> {
    if teacher.num_labels() != student.num_labels() || teacher.feat_dim() != student.feat_dim() {
        return Err(Error::config("teacher and student disagree on vocabulary or features"));
    }
    if teacher.downsample() != student.downsample() {
        return Err(Error::config(format!(
            "teacher downsamples by {} but student by {}",
            teacher.downsample(),
            student.downsample()
        )));
    }
    let mut hidden = Vec::with_capacity(train.len());
    let mut log_probs = Vec::with_capacity(train.len());
    for s in train {
        let inf = teacher.infer(teacher_params, &s.x, &s.y)?;
        if inf.grid.frames() != student.output_frames(s.frames()) {
            return Err(frame_mismatch(
                &[student.output_frames(s.frames())],
                &[inf.grid.frames()],
            ));
        }
        hidden.push(inf.hidden);
        log_probs.push(inf.grid.log_probs().clone());
    }
    Ok(TeacherTargets { hidden, log_probs })
}

/// Two-phase student training. Phase 1 minimizes the chosen KD loss against
/// the frozen teacher; phase 2 minimizes CTC alone. With `kd_epochs == 0` no
/// teacher is needed and the run is the no-distillation baseline.
pub fn distill(
    plan: &DistillPlan,
    teacher: Option<(&Model, &ParameterStore)>,
    student: &Model,
    train: &[Sample],
    eval: &[Sample],
    settings: &TrainSettings,
) -> Result<DistillOutcome> {
    let settings = TrainSettings {
        seed: plan.seed,
        ..settings.clone()
    };
    let mut params = student.init(plan.seed)?;
    let mut log = TrainingLog::default();

    if plan.kd_epochs > 0 {
        let (t_model, t_params) = teacher.ok_or_else(|| {
            Error::config("a teacher checkpoint is required when kd_epochs > 0")
        })?;
        let targets = teacher_targets(t_model, t_params, student, train)?;
        let positions: HashMap<u32, usize> = train.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        if positions.len() != train.len() {
            return Err(Error::config("training sample ids are not unique"));
        }
        let proj = Projection::new(student.hidden_width(), t_model.hidden_width());
        if plan.kd_loss == KdLoss::FitNets {
            let mut rng = seed::stream(plan.seed, "projection");
            params.extend(proj.init(&mut rng)?)?;
        }
        let kd = plan.kd_loss;
        let per_frame = plan.per_frame;
        let objective = |tape: &mut Tape, b: &Bindings, s: &Sample| -> Result<Var> {
            let i = *positions
                .get(&s.id)
                .ok_or_else(|| Error::usage(format!("sample {} is not in the training set", s.id)))?;
            let out = student.forward(tape, b, &s.x, &s.y)?;
            match kd {
                KdLoss::FitNets => fitnets_loss(tape, b, out.hidden, &targets.hidden[i], &proj, per_frame),
                KdLoss::FrameKl => frame_kl_loss(tape, out.log_probs, &targets.log_probs[i]),
                KdLoss::SoftmaxL2 => softmax_l2_loss(tape, out.log_probs, &targets.log_probs[i]),
            }
        };
        let mut state = OptimizerState::new();
        for epoch in 0..plan.kd_epochs {
            let loss = run_epoch(&mut params, &mut state, &settings, train, "kd", epoch, &objective)?;
            let cer = evaluate(student, &params, eval)?.corpus_cer;
            log.push(epoch + 1, "kd", loss, cer);
        }
        // the bridge exists only for phase 1
        params.split_off_prefix(&format!("{PROJECTION_PREFIX}."));
    }

    let ctc_settings = TrainSettings {
        epochs: plan.ctc_epochs,
        ..settings
    };
    let ctc_log = train_ctc_model(student, &mut params, train, eval, &ctc_settings, "ctc")?;
    for r in ctc_log.records {
        log.push(plan.kd_epochs + r.epoch, &r.phase, r.loss, r.eval_cer);
    }
    Ok(DistillOutcome { params, log })
}

/// Trains an input-ablated teacher: `OracleWoTarget` sees zeros instead of
/// the target, `OracleWoSource` zeros instead of the source.
pub fn make_ablation_teacher(
    kind: ModelKind,
    base: &OracleConfig,
    train: &[Sample],
    eval: &[Sample],
    settings: &TrainSettings,
) -> Result<(Model, ParameterStore, TrainingLog)> {
    if !matches!(kind, ModelKind::OracleWoTarget | ModelKind::OracleWoSource) {
        return Err(Error::config(format!("{} is not an ablation kind", kind.name())));
    }
    let model = Model::oracle(base.clone(), kind)?;
    let mut params = model.init(settings.seed)?;
    let log = train_ctc_model(&model, &mut params, train, eval, settings, "teacher")?;
    Ok((model, params, log))
}

/// Applies the CTC objective of `model` to `sample` on a fresh tape and
/// returns the loss value.
pub fn ctc_value(model: &Model, params: &ParameterStore, sample: &Sample) -> Result<f64> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let loss = ctc_objective(model)(&mut tape, &b, sample)?;
    Ok(tape.value(loss).item())
}
