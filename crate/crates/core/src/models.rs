//! The three networks: the conv source network, the target-conditioned
//! teacher built on top of it, and the plain conv CTC model used for both
//! students and the conventional teacher. Also checkpoint I/O.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Bindings, ParameterStore, Tape, Tensor, Var};
use crate::codec::{put_f32s, put_u32, to_u32, ByteReader};
use crate::ctc::{check_feasible, PosteriorGrid, Vocab};
use crate::error::{Error, FormatError, Result};
use crate::nn::{conv_blocks, conv_stack, sinusoidal_positions, ConvBlock, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::seed;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OTKD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reserved checkpoint entry describing the architecture.
pub const ARCH_ENTRY: &str = "meta.architecture";

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStackConfig {
    pub channels: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub separable: bool,
}

impl ConvStackConfig {
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn output_len(&self, frames: usize) -> usize {
        crate::nn::stack_output_len(frames, &self.strides)
    }

    fn blocks(&self, prefix: &str, in_channels: usize) -> Vec<ConvBlock> {
        conv_blocks(
            prefix,
            in_channels,
            self.channels,
            self.kernel,
            &self.strides,
            self.separable,
        )
    }
}

/// Which inputs the teacher actually sees. The ablations replace one side by
/// zeros of the same shape, in training and at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherInput {
    Full,
    ZeroTarget,
    ZeroSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub num_labels: usize,
    pub feat_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Source network; its `channels` must equal `width`.
    pub source: ConvStackConfig,
    pub input: TeacherInput,
}

impl OracleConfig {
    pub fn desk_scale(num_labels: usize, feat_dim: usize) -> Self {
        OracleConfig {
            num_labels,
            feat_dim,
            width: 32,
            heads: 2,
            ff_width: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            source: ConvStackConfig {
                channels: 32,
                kernel: 5,
                strides: vec![1, 2, 1, 2],
                separable: false,
            },
            input: TeacherInput::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvCtcConfig {
    pub num_labels: usize,
    pub feat_dim: usize,
    pub stack: ConvStackConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Oracle,
    OracleWoTarget,
    OracleWoSource,
    Conventional,
    Student,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::Oracle => 1,
            ModelKind::OracleWoTarget => 2,
            ModelKind::OracleWoSource => 3,
            ModelKind::Conventional => 4,
            ModelKind::Student => 5,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => ModelKind::Oracle,
            2 => ModelKind::OracleWoTarget,
            3 => ModelKind::OracleWoSource,
            4 => ModelKind::Conventional,
            5 => ModelKind::Student,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Oracle => "oracle",
            ModelKind::OracleWoTarget => "oracle-wo-target",
            ModelKind::OracleWoSource => "oracle-wo-source",
            ModelKind::Conventional => "conventional",
            ModelKind::Student => "student",
        }
    }

    /// Teacher variants that carry an encoder and cross attention.
    pub fn is_oracle(self) -> bool {
        matches!(
            self,
            ModelKind::Oracle | ModelKind::OracleWoTarget | ModelKind::OracleWoSource
        )
    }
}

/// Tape handles produced by a forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[T', classes]` log-posteriors.
    pub log_probs: Var,
    /// Last-layer representation before the output head, `[T', width]`.
    pub hidden: Var,
    /// Head-averaged cross-attention of the last decoder layer, `[T', L + 2]`.
    pub cross_attention: Option<Tensor>,
}

/// Detached results of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub grid: PosteriorGrid,
    pub hidden: Tensor,
    pub cross_attention: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTeacher {
    pub config: OracleConfig,
    source: Vec<ConvBlock>,
    embedding: String,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    head: Linear,
}

impl OracleTeacher {
    pub fn new(config: OracleConfig) -> Result<Self> {
        if config.source.channels != config.width {
            return Err(Error::config(format!(
                "source channels {} must equal teacher width {}",
                config.source.channels, config.width
            )));
        }
        if config.width % config.heads != 0 || config.width % 2 != 0 {
            return Err(Error::config(format!(
                "width {} must be even and divisible by {} heads",
                config.width, config.heads
            )));
        }
        let (w, h, f) = (config.width, config.heads, config.ff_width);
        Ok(OracleTeacher {
            source: config.source.blocks("source", config.feat_dim),
            embedding: "encoder.embedding".to_string(),
            encoder: (0..config.encoder_layers)
                .map(|i| EncoderLayer::new(&format!("encoder.{i}"), w, h, f))
                .collect(),
            encoder_norm: LayerNorm::new("encoder.norm", w),
            decoder: (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(&format!("decoder.{i}"), w, h, f))
                .collect(),
            decoder_norm: LayerNorm::new("decoder.norm", w),
            head: Linear::new("head", w, config.num_labels + 1),
            config,
        })
    }

    /// Begin and end sentinels occupy the two rows after the labels.
    pub fn sentinels(&self) -> (usize, usize) {
        (self.config.num_labels, self.config.num_labels + 1)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for b in &self.source {
            b.init(&mut store, rng)?;
        }
        store.insert(
            self.embedding.clone(),
            Tensor::randn(&[self.config.num_labels + 2, self.config.width], 1.0, rng),
        )?;
        for l in &self.encoder {
            l.init(&mut store, rng)?;
        }
        self.encoder_norm.init(&mut store)?;
        for l in &self.decoder {
            l.init(&mut store, rng)?;
        }
        self.decoder_norm.init(&mut store)?;
        self.head.init(&mut store, rng)?;
        Ok(store)
    }

    /// Source network, then target encoder, then a decoder whose queries are
    /// the source frames and whose cross-attention memory is the encoded
    /// target. Output length follows the source alone.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: &Tensor, y: &[usize]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if x.rank() != 2 || x.shape()[1] != cfg.feat_dim {
            return Err(Error::Dimension {
                op: "oracle_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![cfg.feat_dim],
            });
        }
        if y.is_empty() {
            return Err(Error::usage(
                "the target encoder needs at least one label besides the sentinels",
            ));
        }
        Vocab::new(cfg.num_labels)?.check_labels(y)?;
        let frames = cfg.source.output_len(x.shape()[0]);
        check_feasible(frames, y)?;

        let source_in = match cfg.input {
            TeacherInput::ZeroSource => Tensor::zeros(x.shape()),
            _ => x.clone(),
        };
        let source_in = tape.constant(source_in);
        let hs = conv_stack(tape, b, source_in, &self.source)?;
        let pos = tape.constant(sinusoidal_positions(frames, cfg.width)?);
        let mut dec = tape.add(hs, pos)?;

        let (bos, eos) = self.sentinels();
        let tokens: Vec<usize> = std::iter::once(bos)
            .chain(y.iter().copied())
            .chain(std::iter::once(eos))
            .collect();
        let mut enc = match cfg.input {
            TeacherInput::ZeroTarget => tape.constant(Tensor::zeros(&[tokens.len(), cfg.width])),
            _ => {
                let e = crate::nn::embed(tape, b.get(&self.embedding)?, &tokens)?;
                let p = tape.constant(sinusoidal_positions(tokens.len(), cfg.width)?);
                tape.add(e, p)?
            }
        };
        for l in &self.encoder {
            enc = l.forward(tape, b, enc)?;
        }
        let memory = self.encoder_norm.forward(tape, b, enc)?;

        let mut attention = None;
        for l in &self.decoder {
            let (next, w) = l.forward(tape, b, dec, memory)?;
            dec = next;
            attention = Some(w);
        }
        let hidden = self.decoder_norm.forward(tape, b, dec)?;
        let logits = self.head.forward(tape, b, hidden)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(ForwardOutput {
            log_probs,
            hidden,
            cross_attention: attention,
        })
    }
}

/// Conv stack plus linear output head; sees only the source.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCtc {
    pub config: ConvCtcConfig,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

impl ConvCtc {
    pub fn new(config: ConvCtcConfig) -> Result<Self> {
        if config.stack.strides.is_empty() || config.stack.channels == 0 {
            return Err(Error::config("conv CTC model needs at least one block"));
        }
        Ok(ConvCtc {
            blocks: config.stack.blocks("conv", config.feat_dim),
            head: Linear::new("head", config.stack.channels, config.num_labels + 1),
            config,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.config.stack.channels
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for b in &self.blocks {
            b.init(&mut store, rng)?;
        }
        self.head.init(&mut store, rng)?;
        Ok(store)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: &Tensor) -> Result<ForwardOutput> {
        if x.rank() != 2 || x.shape()[1] != self.config.feat_dim {
            return Err(Error::Dimension {
                op: "student_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.feat_dim],
            });
        }
        let xin = tape.constant(x.clone());
        let hidden = conv_stack(tape, b, xin, &self.blocks)?;
        let logits = self.head.forward(tape, b, hidden)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(ForwardOutput {
            log_probs,
            hidden,
            cross_attention: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Oracle(OracleTeacher),
    Conv(ConvCtc),
}

/// A network together with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub network: Network,
}

impl Model {
    pub fn oracle(mut config: OracleConfig, kind: ModelKind) -> Result<Self> {
        config.input = match kind {
            ModelKind::Oracle => TeacherInput::Full,
            ModelKind::OracleWoTarget => TeacherInput::ZeroTarget,
            ModelKind::OracleWoSource => TeacherInput::ZeroSource,
            other => {
                return Err(Error::config(format!(
                    "{} is not a target-conditioned teacher kind",
                    other.name()
                )))
            }
        };
        Ok(Model {
            kind,
            network: Network::Oracle(OracleTeacher::new(config)?),
        })
    }

    pub fn conv(config: ConvCtcConfig, kind: ModelKind) -> Result<Self> {
        if kind.is_oracle() {
            return Err(Error::config(format!(
                "{} needs the encoder-decoder network",
                kind.name()
            )));
        }
        Ok(Model {
            kind,
            network: Network::Conv(ConvCtc::new(config)?),
        })
    }

    /// The same encoder-decoder with a different input ablation. Parameter
    /// names are shared, so one store serves every variant.
    pub fn oracle_variant(&self, kind: ModelKind) -> Result<Model> {
        match &self.network {
            Network::Oracle(m) => Model::oracle(m.config.clone(), kind),
            Network::Conv(_) => Err(Error::config(format!("{} has no ablation variants", self.kind.name()))),
        }
    }

    pub fn num_labels(&self) -> usize {
        match &self.network {
            Network::Oracle(m) => m.config.num_labels,
            Network::Conv(m) => m.config.num_labels,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_labels()).expect("validated at construction")
    }

    pub fn feat_dim(&self) -> usize {
        match &self.network {
            Network::Oracle(m) => m.config.feat_dim,
            Network::Conv(m) => m.config.feat_dim,
        }
    }

    pub fn hidden_width(&self) -> usize {
        match &self.network {
            Network::Oracle(m) => m.config.width,
            Network::Conv(m) => m.hidden_width(),
        }
    }

    fn strides(&self) -> &[usize] {
        match &self.network {
            Network::Oracle(m) => &m.config.source.strides,
            Network::Conv(m) => &m.config.stack.strides,
        }
    }

    pub fn downsample(&self) -> usize {
        self.strides().iter().product()
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        crate::nn::stack_output_len(input_frames, self.strides())
    }

    /// Whether the forward pass reads the target sequence.
    pub fn uses_target(&self) -> bool {
        matches!(self.network, Network::Oracle(_))
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = seed::stream(seed, "init");
        match &self.network {
            Network::Oracle(m) => m.init(&mut rng),
            Network::Conv(m) => m.init(&mut rng),
        }
    }

    /// `y` is ignored by conv models.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: &Tensor, y: &[usize]) -> Result<ForwardOutput> {
        match &self.network {
            Network::Oracle(m) => m.forward(tape, b, x, y),
            Network::Conv(m) => m.forward(tape, b, x),
        }
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, params: &ParameterStore, x: &Tensor, y: &[usize]) -> Result<Inference> {
        let mut tape = Tape::new();
        let b = tape.bind(params, false);
        let out = self.forward(&mut tape, &b, x, y)?;
        Ok(Inference {
            grid: PosteriorGrid::from_log_probs(tape.value(out.log_probs).clone())?,
            hidden: tape.value(out.hidden).clone(),
            cross_attention: out.cross_attention,
        })
    }

    /// Architecture description stored alongside the parameters.
    pub fn describe(&self) -> Vec<f64> {
        let mut out = vec![self.kind.code() as f64];
        let (stack, extra) = match &self.network {
            Network::Oracle(m) => {
                let c = &m.config;
                (
                    &c.source,
                    [c.width, c.heads, c.ff_width, c.encoder_layers, c.decoder_layers],
                )
            }
            Network::Conv(m) => (&m.config.stack, [0; 5]),
        };
        out.extend(
            [self.num_labels(), self.feat_dim()]
                .into_iter()
                .chain(extra)
                .chain([stack.channels, stack.kernel, usize::from(stack.separable)])
                .chain([stack.strides.len()])
                .chain(stack.strides.iter().copied())
                .map(|v| v as f64),
        );
        out
    }

    pub fn from_description(desc: &[f64]) -> Result<Self> {
        let bad = || Error::Format(FormatError::Malformed("architecture entry".into()));
        let ints: Vec<usize> = desc
            .iter()
            .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize).ok_or_else(bad))
            .collect::<Result<_>>()?;
        if ints.len() < 12 {
            return Err(bad());
        }
        let kind = ModelKind::from_code(ints[0] as u32).ok_or_else(bad)?;
        let n_strides = ints[11];
        if ints.len() != 12 + n_strides {
            return Err(bad());
        }
        let stack = ConvStackConfig {
            channels: ints[8],
            kernel: ints[9],
            separable: ints[10] != 0,
            strides: ints[12..].to_vec(),
        };
        if kind.is_oracle() {
            Model::oracle(
                OracleConfig {
                    num_labels: ints[1],
                    feat_dim: ints[2],
                    width: ints[3],
                    heads: ints[4],
                    ff_width: ints[5],
                    encoder_layers: ints[6],
                    decoder_layers: ints[7],
                    source: stack,
                    input: TeacherInput::Full,
                },
                kind,
            )
        } else {
            Model::conv(
                ConvCtcConfig {
                    num_labels: ints[1],
                    feat_dim: ints[2],
                    stack,
                },
                kind,
            )
        }
    }
}

/// Teacher forward pass: posterior grid, last decoder representation and
/// cross-attention weights.
pub fn oracle_forward(
    teacher: &OracleTeacher,
    params: &ParameterStore,
    x: &Tensor,
    y: &[usize],
) -> Result<Inference> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let out = teacher.forward(&mut tape, &b, x, y)?;
    Ok(Inference {
        grid: PosteriorGrid::from_log_probs(tape.value(out.log_probs).clone())?,
        hidden: tape.value(out.hidden).clone(),
        cross_attention: out.cross_attention,
    })
}

/// Student forward pass: posterior grid and last conv representation.
pub fn student_forward(student: &ConvCtc, params: &ParameterStore, x: &Tensor) -> Result<Inference> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let out = student.forward(&mut tape, &b, x)?;
    Ok(Inference {
        grid: PosteriorGrid::from_log_probs(tape.value(out.log_probs).clone())?,
        hidden: tape.value(out.hidden).clone(),
        cross_attention: None,
    })
}

pub fn encode_checkpoint(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(store.len(), "entry count")?);
    for (name, t) in store.iter() {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.rank(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| FormatError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dimensions")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::Truncated("values"))?;
        let data = r.f32s(numel, "values")?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| FormatError::Malformed(format!("duplicate entry `{name}`")))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)?)?;
    Ok(())
}

/// Reads a whole checkpoint; nothing is returned unless every entry parsed.
pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let bytes = std::fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Saves parameters plus the architecture entry.
pub fn save_model(model: &Model, params: &ParameterStore, path: &Path) -> Result<()> {
    let mut store = params.clone();
    store.insert(ARCH_ENTRY, Tensor::from_vec(model.describe()))?;
    save_checkpoint(&store, path)
}

pub fn load_model(path: &Path) -> Result<(Model, ParameterStore)> {
    let mut store = load_checkpoint(path)?;
    let desc = store.remove(ARCH_ENTRY).ok_or_else(|| {
        Error::Format(FormatError::Malformed(format!("missing `{ARCH_ENTRY}` entry")))
    })?;
    let model = Model::from_description(desc.data())?;
    let expected = model.init(0)?;
    if expected.manifest() != store.manifest() {
        return Err(Error::config(
            "checkpoint parameters do not match the recorded architecture",
        ));
    }
    Ok((model, store))
}
