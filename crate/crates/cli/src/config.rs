//! Plain `key=value` run configuration. Every key is required and unknown
//! keys are rejected, so a config file fully describes a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use otkd_core::autodiff::{Hyperparams, Optimizer};
use otkd_core::data::TaskSpec;
use otkd_core::distill::{DistillPlan, KdLoss};
use otkd_core::models::{ConvCtcConfig, ConvStackConfig, Model, ModelKind, OracleConfig, TeacherInput};
use otkd_core::train::TrainSettings;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

/// Everything a run needs besides file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub num_labels: usize,
    pub feat_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_std: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub data_seed: u64,
    /// Conv strides shared by every network; their product is the frame
    /// reduction.
    pub strides: Vec<usize>,

    pub teacher_width: usize,
    pub teacher_heads: usize,
    pub teacher_ff_width: usize,
    pub teacher_encoder_layers: usize,
    pub teacher_decoder_layers: usize,
    pub teacher_kernel: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_warmup_epochs: usize,

    pub student_channels: usize,
    pub student_kernel: usize,
    pub student_separable: bool,
    pub student_lr: f64,

    pub optimizer: String,
    pub momentum: f64,
    /// Zero disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub final_lr_scale: f64,

    pub kd_loss: KdLoss,
    pub kd_epochs: usize,
    pub ctc_epochs: usize,
    pub per_frame: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_labels: 10,
            feat_dim: 8,
            dur_min: 3,
            dur_max: 8,
            noise_std: 0.3,
            len_min: 2,
            len_max: 10,
            train_samples: 2800,
            eval_samples: 1000,
            data_seed: 0,
            strides: vec![1, 2, 1, 2],
            teacher_width: 32,
            teacher_heads: 2,
            teacher_ff_width: 64,
            teacher_encoder_layers: 2,
            teacher_decoder_layers: 2,
            teacher_kernel: 5,
            teacher_epochs: 20,
            teacher_lr: 0.002,
            teacher_warmup_epochs: 4,
            student_channels: 16,
            student_kernel: 5,
            student_separable: false,
            student_lr: 0.003,
            optimizer: "adam".into(),
            momentum: 0.9,
            clip_norm: 0.0,
            batch_size: 16,
            final_lr_scale: 0.05,
            kd_loss: KdLoss::FitNets,
            kd_epochs: 6,
            ctc_epochs: 10,
            per_frame: true,
            seed: 1,
        }
    }
}

fn kd_from_name(s: &str) -> Option<KdLoss> {
    match s {
        "fitnets" => Some(KdLoss::FitNets),
        "kl" => Some(KdLoss::FrameKl),
        "l2" => Some(KdLoss::SoftmaxL2),
        _ => None,
    }
}

pub fn parse_kd_loss(s: &str) -> Result<KdLoss, String> {
    kd_from_name(s).ok_or_else(|| format!("unknown KD loss {s:?} (fitnets, kl, l2)"))
}

pub fn parse_kind(s: &str) -> Result<ModelKind, String> {
    [
        ModelKind::Oracle,
        ModelKind::OracleWoTarget,
        ModelKind::OracleWoSource,
        ModelKind::Conventional,
    ]
    .into_iter()
    .find(|k| k.name() == s)
    .ok_or_else(|| format!("unknown teacher kind {s:?}"))
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let value = self.0.remove(key).ok_or_else(|| ConfigError::Missing(key.into()))?;
        value.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.into(),
            value: value.clone(),
            reason: e.to_string(),
        })
    }

    fn take_with<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        let value: String = self.take(key)?;
        f(&value).map_err(|reason| ConfigError::Value {
            key: key.into(),
            value,
            reason,
        })
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

impl RunConfig {
    /// Key order of [`RunConfig::to_text`].
    pub const KEYS: [&'static str; 34] = [
        "num_labels",
        "feat_dim",
        "dur_min",
        "dur_max",
        "noise_std",
        "len_min",
        "len_max",
        "train_samples",
        "eval_samples",
        "data_seed",
        "strides",
        "teacher_width",
        "teacher_heads",
        "teacher_ff_width",
        "teacher_encoder_layers",
        "teacher_decoder_layers",
        "teacher_kernel",
        "teacher_epochs",
        "teacher_lr",
        "teacher_warmup_epochs",
        "student_channels",
        "student_kernel",
        "student_separable",
        "student_lr",
        "optimizer",
        "momentum",
        "clip_norm",
        "batch_size",
        "final_lr_scale",
        "kd_loss",
        "kd_epochs",
        "ctc_epochs",
        "per_frame",
        "seed",
    ];

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !Self::KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
        }
        let mut f = Fields(map);
        let cfg = RunConfig {
            num_labels: f.take("num_labels")?,
            feat_dim: f.take("feat_dim")?,
            dur_min: f.take("dur_min")?,
            dur_max: f.take("dur_max")?,
            noise_std: f.take("noise_std")?,
            len_min: f.take("len_min")?,
            len_max: f.take("len_max")?,
            train_samples: f.take("train_samples")?,
            eval_samples: f.take("eval_samples")?,
            data_seed: f.take("data_seed")?,
            strides: f.take_with("strides", parse_list)?,
            teacher_width: f.take("teacher_width")?,
            teacher_heads: f.take("teacher_heads")?,
            teacher_ff_width: f.take("teacher_ff_width")?,
            teacher_encoder_layers: f.take("teacher_encoder_layers")?,
            teacher_decoder_layers: f.take("teacher_decoder_layers")?,
            teacher_kernel: f.take("teacher_kernel")?,
            teacher_epochs: f.take("teacher_epochs")?,
            teacher_lr: f.take("teacher_lr")?,
            teacher_warmup_epochs: f.take("teacher_warmup_epochs")?,
            student_channels: f.take("student_channels")?,
            student_kernel: f.take("student_kernel")?,
            student_separable: f.take("student_separable")?,
            student_lr: f.take("student_lr")?,
            optimizer: f.take("optimizer")?,
            momentum: f.take("momentum")?,
            clip_norm: f.take("clip_norm")?,
            batch_size: f.take("batch_size")?,
            final_lr_scale: f.take("final_lr_scale")?,
            kd_loss: f.take_with("kd_loss", parse_kd_loss)?,
            kd_epochs: f.take("kd_epochs")?,
            ctc_epochs: f.take("ctc_epochs")?,
            per_frame: f.take("per_frame")?,
            seed: f.take("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parses back to `self`.
    pub fn to_text(&self) -> String {
        let strides: Vec<String> = self.strides.iter().map(|s| s.to_string()).collect();
        let values: [String; 34] = [
            self.num_labels.to_string(),
            self.feat_dim.to_string(),
            self.dur_min.to_string(),
            self.dur_max.to_string(),
            self.noise_std.to_string(),
            self.len_min.to_string(),
            self.len_max.to_string(),
            self.train_samples.to_string(),
            self.eval_samples.to_string(),
            self.data_seed.to_string(),
            strides.join(","),
            self.teacher_width.to_string(),
            self.teacher_heads.to_string(),
            self.teacher_ff_width.to_string(),
            self.teacher_encoder_layers.to_string(),
            self.teacher_decoder_layers.to_string(),
            self.teacher_kernel.to_string(),
            self.teacher_epochs.to_string(),
            self.teacher_lr.to_string(),
            self.teacher_warmup_epochs.to_string(),
            self.student_channels.to_string(),
            self.student_kernel.to_string(),
            self.student_separable.to_string(),
            self.student_lr.to_string(),
            self.optimizer.clone(),
            self.momentum.to_string(),
            self.clip_norm.to_string(),
            self.batch_size.to_string(),
            self.final_lr_scale.to_string(),
            self.kd_loss.name().to_string(),
            self.kd_epochs.to_string(),
            self.ctc_epochs.to_string(),
            self.per_frame.to_string(),
            self.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").expect("string write");
        }
        out
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Inconsistent(m.to_string()));
        if self.optimizer != "adam" && self.optimizer != "sgd" {
            return Err(ConfigError::Value {
                key: "optimizer".into(),
                value: self.optimizer.clone(),
                reason: "expected adam or sgd".into(),
            });
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return bad("strides must be positive");
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return bad("train_samples and eval_samples must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.final_lr_scale > 0.0 && self.final_lr_scale <= 1.0) {
            return bad("final_lr_scale must lie in (0, 1]");
        }
        if self.clip_norm < 0.0 || !self.clip_norm.is_finite() {
            return bad("clip_norm must be finite and non-negative");
        }
        if self.teacher_warmup_epochs > self.teacher_epochs {
            return bad("teacher_warmup_epochs exceeds teacher_epochs");
        }
        self.task_spec()
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.teacher(ModelKind::Oracle)
            .and_then(|_| self.student())
            .map(|_| ())
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            num_labels: self.num_labels,
            feat_dim: self.feat_dim,
            dur_min: self.dur_min,
            dur_max: self.dur_max,
            noise_std: self.noise_std,
            len_min: self.len_min,
            len_max: self.len_max,
            num_samples: self.train_samples + self.eval_samples,
            seed: self.data_seed,
            downsample: self.downsample(),
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            num_labels: self.num_labels,
            feat_dim: self.feat_dim,
            width: self.teacher_width,
            heads: self.teacher_heads,
            ff_width: self.teacher_ff_width,
            encoder_layers: self.teacher_encoder_layers,
            decoder_layers: self.teacher_decoder_layers,
            source: ConvStackConfig {
                channels: self.teacher_width,
                kernel: self.teacher_kernel,
                strides: self.strides.clone(),
                separable: false,
            },
            input: TeacherInput::Full,
        }
    }

    fn conv_config(&self, channels: usize) -> ConvCtcConfig {
        ConvCtcConfig {
            num_labels: self.num_labels,
            feat_dim: self.feat_dim,
            stack: ConvStackConfig {
                channels,
                kernel: self.student_kernel,
                strides: self.strides.clone(),
                separable: self.student_separable,
            },
        }
    }

    /// Teacher network of `kind`. The conventional teacher is the student
    /// architecture at twice the channel count.
    pub fn teacher(&self, kind: ModelKind) -> otkd_core::Result<Model> {
        match kind {
            ModelKind::Conventional => Model::conv(self.conv_config(2 * self.student_channels), kind),
            ModelKind::Student => Err(otkd_core::Error::Config("student is not a teacher kind".into())),
            k => Model::oracle(self.oracle_config(), k),
        }
    }

    pub fn student(&self) -> otkd_core::Result<Model> {
        Model::conv(self.conv_config(self.student_channels), ModelKind::Student)
    }

    fn hyperparams(&self, lr: f64) -> Hyperparams {
        let optimizer = if self.optimizer == "sgd" {
            Optimizer::sgd(lr, self.momentum)
        } else {
            Optimizer::adam(lr)
        };
        Hyperparams {
            optimizer,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn teacher_settings(&self, threads: usize) -> TrainSettings {
        TrainSettings {
            threads,
            final_lr_scale: self.final_lr_scale,
            ..TrainSettings::new(self.hyperparams(self.teacher_lr), self.batch_size, self.teacher_epochs, self.seed)
        }
    }

    pub fn student_settings(&self, threads: usize) -> TrainSettings {
        TrainSettings {
            threads,
            final_lr_scale: self.final_lr_scale,
            ..TrainSettings::new(self.hyperparams(self.student_lr), self.batch_size, self.ctc_epochs, self.seed)
        }
    }

    pub fn distill_plan(&self) -> DistillPlan {
        DistillPlan {
            kd_loss: self.kd_loss,
            kd_epochs: self.kd_epochs,
            ctc_epochs: self.ctc_epochs,
            seed: self.seed,
            per_frame: self.per_frame,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = format!("# header\n\n{}", RunConfig::default().to_text().replace("seed=1\n", "seed = 4  # note\n"));
        assert_eq!(RunConfig::parse(&text).unwrap().seed, 4);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = RunConfig::default().to_text();
        let without: String = text.lines().filter(|l| !l.starts_with("kd_epochs=")).map(|l| format!("{l}\n")).collect();
        assert_eq!(RunConfig::parse(&without), Err(ConfigError::Missing("kd_epochs".into())));
        let extra = format!("{text}learning_rate=1\n");
        assert_eq!(RunConfig::parse(&extra), Err(ConfigError::UnknownKey("learning_rate".into())));
        let twice = format!("{text}seed=2\n");
        assert_eq!(RunConfig::parse(&twice), Err(ConfigError::Duplicate("seed".into())));
        assert!(matches!(RunConfig::parse("seed"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn bad_values_are_reported_with_key() {
        let text = RunConfig::default().to_text().replace("kd_loss=fitnets", "kd_loss=mse");
        match RunConfig::parse(&text) {
            Err(ConfigError::Value { key, .. }) => assert_eq!(key, "kd_loss"),
            other => panic!("{other:?}"),
        }
        let text = RunConfig::default().to_text().replace("teacher_heads=2", "teacher_heads=3");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Inconsistent(_))));
    }

    #[test]
    fn conventional_teacher_doubles_student_channels() {
        let c = RunConfig::default();
        let t = c.teacher(ModelKind::Conventional).unwrap();
        assert_eq!(t.hidden_width(), 2 * c.student().unwrap().hidden_width());
        assert_eq!(t.downsample(), c.downsample());
    }
}
