//! Network building blocks assembled on a [`Tape`]: linear maps, layer
//! norm, embeddings, sinusoidal positions, multi-head attention,
//! feed-forward blocks, conv blocks and pre-norm transformer layers.
//!
//! Each block knows its parameter names; `init` draws fresh parameters into
//! a [`ParameterStore`] and `forward` reads them back from [`Bindings`].

use rand::Rng;

use crate::autodiff::{Bindings, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Score given to masked attention logits before the softmax.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.init_scaled(store, rng, 1.0)
    }

    /// Weights `N(0, gain^2 / in_dim)`, zero bias.
    pub fn init_scaled<R: Rng + ?Sized>(
        &self,
        store: &mut ParameterStore,
        rng: &mut R,
        gain: f64,
    ) -> Result<()> {
        let std = gain / (self.in_dim as f64).sqrt();
        store.insert(
            self.weight_name(),
            Tensor::randn(&[self.in_dim, self.out_dim], std, rng),
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.get(&self.weight_name())?)?;
        tape.add(h, b.get(&self.bias_name())?)
    }
}

/// Layer norm over the last dimension with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        store.insert(format!("{}.gain", self.name), Tensor::full(&[self.dim], 1.0))?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tape.mul(n, b.get(&format!("{}.gain", self.name))?)?;
        tape.add(g, b.get(&format!("{}.bias", self.name))?)
    }
}

/// Row lookup of `tokens` in an embedding `table` of shape `[rows, width]`.
pub fn embed(tape: &mut Tape, table: Var, tokens: &[usize]) -> Result<Var> {
    tape.gather(table, tokens)
}

/// `pe[p, 2i] = sin(p / 10000^(2i/H))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(length: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 {
        return Err(Error::usage(format!(
            "sinusoidal positions need an even width, got {width}"
        )));
    }
    let mut data = Vec::with_capacity(length * width);
    for pos in 0..length {
        for i in 0..width / 2 {
            let rate = 10000f64.powf(-((2 * i) as f64) / width as f64);
            let angle = pos as f64 * rate;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![length, width], data)
}

/// Result of [`attention`]: the mixed values and one weight matrix
/// `[T_q, T_k]` per head.
#[derive(Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Tensor>,
}

impl AttentionOutput {
    /// Head-averaged attention weights.
    pub fn mean_weights(&self) -> Tensor {
        let mut acc = self.weights[0].clone();
        for w in &self.weights[1..] {
            acc.add_assign(w);
        }
        let n = self.weights.len() as f64;
        acc.map(|v| v / n)
    }
}

/// Scaled dot-product attention split over `heads` equal column groups,
/// with `1/sqrt(width/heads)` scaling. `mask` is row-major `[T_q, T_k]`;
/// `true` removes a key from that query's softmax. No causal masking.
pub fn attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (qs, ks, vs) = (
        tape.shape(query).to_vec(),
        tape.shape(key).to_vec(),
        tape.shape(value).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (tq, width, tk) = (qs[0], qs[1], ks[0]);
    if heads == 0 || width % heads != 0 {
        return Err(Error::usage(format!(
            "width {width} not divisible into {heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(Error::Dimension {
                op: "attention_mask",
                lhs: vec![tq, tk],
                rhs: vec![m.len()],
            });
        }
        if let Some(row) = (0..tq).find(|&r| m[r * tk..(r + 1) * tk].iter().all(|&x| x)) {
            return Err(Error::usage(format!(
                "attention row {row} has every key masked"
            )));
        }
    }
    if tk == 0 {
        return Err(Error::usage("attention over zero keys"));
    }
    let head_dim = width / heads;
    let scale = (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if heads == 1 {
            (query, key, value)
        } else {
            (
                tape.slice(query, 1, lo, hi)?,
                tape.slice(key, 1, lo, hi)?,
                tape.slice(value, 1, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.div_scalar(scores, scale)?;
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m, MASKED_LOGIT)?;
        }
        let w = tape.softmax(scores)?;
        weights.push(tape.value(w).clone());
        outputs.push(tape.matmul(w, vh)?);
    }
    let output = if heads == 1 {
        outputs[0]
    } else {
        tape.concat(&outputs, 1)?
    };
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, width: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            query: Linear::new(format!("{name}.query"), width, width),
            key: Linear::new(format!("{name}.key"), width, width),
            value: Linear::new(format!("{name}.value"), width, width),
            out: Linear::new(format!("{name}.out"), width, width),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    /// Returns the projected output and head-averaged weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Tensor)> {
        let q = self.query.forward(tape, b, queries)?;
        let k = self.key.forward(tape, b, memory)?;
        let v = self.value.forward(tape, b, memory)?;
        let att = attention(tape, q, k, v, self.heads, mask)?;
        let out = self.out.forward(tape, b, att.output)?;
        Ok((out, att.mean_weights()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(format!("{name}.inner"), width, hidden),
            outer: Linear::new(format!("{name}.outer"), hidden, width),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.inner.init_scaled(store, rng, 2f64.sqrt())?;
        self.outer.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, b, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, b, h)
    }
}

/// Convolution, bias, layer norm, ReLU. The separable variant is a
/// depthwise convolution followed by a pointwise (kernel 1) convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub separable: bool,
}

impl ConvBlock {
    pub fn new(
        name: impl Into<String>,
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
        separable: bool,
    ) -> Self {
        ConvBlock {
            name: name.into(),
            kernel,
            stride,
            in_channels,
            out_channels,
            separable,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        input_len.div_ceil(self.stride)
    }

    fn norm(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.norm", self.name), self.out_channels)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let n = &self.name;
        if self.separable {
            let std = (1.0 / self.kernel as f64).sqrt();
            store.insert(
                format!("{n}.depthwise"),
                Tensor::randn(&[self.in_channels, 1, self.kernel], std, rng),
            )?;
            let std = (2.0 / self.in_channels as f64).sqrt();
            store.insert(
                format!("{n}.pointwise"),
                Tensor::randn(&[self.out_channels, self.in_channels, 1], std, rng),
            )?;
        } else {
            let std = (2.0 / (self.in_channels * self.kernel) as f64).sqrt();
            store.insert(
                format!("{n}.weight"),
                Tensor::randn(&[self.out_channels, self.in_channels, self.kernel], std, rng),
            )?;
        }
        store.insert(format!("{n}.bias"), Tensor::zeros(&[self.out_channels]))?;
        self.norm().init(store)
    }

    /// Output before the activation, `[ceil(T / stride), out_channels]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let n = &self.name;
        let h = if self.separable {
            let d = tape.conv1d(
                x,
                b.get(&format!("{n}.depthwise"))?,
                self.stride,
                self.in_channels,
            )?;
            tape.conv1d(d, b.get(&format!("{n}.pointwise"))?, 1, 1)?
        } else {
            tape.conv1d(x, b.get(&format!("{n}.weight"))?, self.stride, 1)?
        };
        let h = tape.add(h, b.get(&format!("{n}.bias"))?)?;
        let h = self.norm().forward(tape, b, h)?;
        tape.relu(h)
    }
}

/// Builds `strides.len()` chained conv blocks named `{prefix}.{i}`.
pub fn conv_blocks(
    prefix: &str,
    in_channels: usize,
    channels: usize,
    kernel: usize,
    strides: &[usize],
    separable: bool,
) -> Vec<ConvBlock> {
    strides
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let cin = if i == 0 { in_channels } else { channels };
            ConvBlock::new(format!("{prefix}.{i}"), kernel, s, cin, channels, separable)
        })
        .collect()
}

/// Runs `blocks` in order. Channel chaining is checked up front.
pub fn conv_stack(tape: &mut Tape, b: &Bindings, x: Var, blocks: &[ConvBlock]) -> Result<Var> {
    let mut channels = tape.shape(x).get(1).copied().unwrap_or(0);
    for blk in blocks {
        if blk.in_channels != channels {
            return Err(Error::Dimension {
                op: "conv_stack",
                lhs: vec![channels],
                rhs: vec![blk.in_channels],
            });
        }
        channels = blk.out_channels;
    }
    blocks.iter().try_fold(x, |h, blk| blk.forward(tape, b, h))
}

/// Total downsampling applied by `strides` to `len` frames.
pub fn stack_output_len(len: usize, strides: &[usize]) -> usize {
    strides.iter().fold(len, |t, &s| t.div_ceil(s))
}

/// Pre-norm encoder layer: self-attention then feed-forward, each residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(name: &str, width: usize, heads: usize, ff_width: usize) -> Self {
        EncoderLayer {
            attn_norm: LayerNorm::new(format!("{name}.attn_norm"), width),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), width, heads),
            ff_norm: LayerNorm::new(format!("{name}.ff_norm"), width),
            ff: FeedForward::new(&format!("{name}.ff"), width, ff_width),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.attn_norm.init(store)?;
        self.attn.init(store, rng)?;
        self.ff_norm.init(store)?;
        self.ff.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let n = self.attn_norm.forward(tape, b, x)?;
        let (a, _) = self.attn.forward(tape, b, n, n, None)?;
        let x = tape.add(x, a)?;
        let n = self.ff_norm.forward(tape, b, x)?;
        let f = self.ff.forward(tape, b, n)?;
        tape.add(x, f)
    }
}

/// Pre-norm decoder layer without a look-ahead mask: self-attention over the
/// query sequence, cross-attention into `memory`, feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(name: &str, width: usize, heads: usize, ff_width: usize) -> Self {
        DecoderLayer {
            self_norm: LayerNorm::new(format!("{name}.self_norm"), width),
            self_attn: MultiHeadAttention::new(&format!("{name}.self_attn"), width, heads),
            cross_norm: LayerNorm::new(format!("{name}.cross_norm"), width),
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross_attn"), width, heads),
            ff_norm: LayerNorm::new(format!("{name}.ff_norm"), width),
            ff: FeedForward::new(&format!("{name}.ff"), width, ff_width),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.self_norm.init(store)?;
        self.self_attn.init(store, rng)?;
        self.cross_norm.init(store)?;
        self.cross_attn.init(store, rng)?;
        self.ff_norm.init(store)?;
        self.ff.init(store, rng)
    }

    /// Returns the layer output and the head-averaged cross-attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        memory: Var,
    ) -> Result<(Var, Tensor)> {
        let n = self.self_norm.forward(tape, b, x)?;
        let (a, _) = self.self_attn.forward(tape, b, n, n, None)?;
        let x = tape.add(x, a)?;
        let n = self.cross_norm.forward(tape, b, x)?;
        let (c, weights) = self.cross_attn.forward(tape, b, n, memory, None)?;
        let x = tape.add(x, c)?;
        let n = self.ff_norm.forward(tape, b, x)?;
        let f = self.ff.forward(tape, b, n)?;
        Ok((tape.add(x, f)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_selects_rows_and_handles_empty() {
        let mut tape = Tape::new();
        let table = tape.leaf("t", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), true);
        let e = embed(&mut tape, table, &[0]).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 0.0]);
        let e = embed(&mut tape, table, &[]).unwrap();
        assert_eq!(tape.shape(e), &[0, 2]);
        assert!(matches!(embed(&mut tape, table, &[2]), Err(Error::Usage(_))));
    }

    #[test]
    fn embed_gradient_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf("t", Tensor::zeros(&[3, 2]), true);
        let e = embed(&mut tape, table, &[0, 0]).unwrap();
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("t").unwrap().data(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn positions_closed_form() {
        let pe = sinusoidal_positions(2, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let r = 10000f64.powf(-0.5);
        let want = [1f64.sin(), 1f64.cos(), r.sin(), r.cos()];
        for (a, b) in pe.row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let pe = sinusoidal_positions(50, 8).unwrap();
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(sinusoidal_positions(3, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = attention(&mut tape, q, k, v, 2, None).unwrap();
        for row in tape.value(out.output).rows() {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap());
        let k = tape.constant(Tensor::full(&[3, 2], 0.5));
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 3.0, 3.0, 6.0]).unwrap());
        let out = attention(&mut tape, q, k, v, 1, None).unwrap();
        let got = tape.value(out.output).data();
        assert!((got[0] - 2.0).abs() < 1e-12 && (got[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let mask = [false, true, false, true, true, false];
        let out = attention(&mut tape, q, k, v, 2, Some(&mask)).unwrap();
        for w in &out.weights {
            assert_eq!(w.get2(0, 1), 0.0);
            assert_eq!(w.get2(1, 0), 0.0);
            assert!((w.get2(1, 2) - 1.0).abs() < 1e-12);
            for row in w.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let all = [true, true, true, false, false, false];
        assert!(matches!(
            attention(&mut tape, q, k, v, 2, Some(&all)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn attention_shape_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            attention(&mut tape, q, k, k, 1, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_stack_length_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = conv_blocks("c", 3, 4, 3, &[2, 2], false);
        let mut store = ParameterStore::new();
        for b in &blocks {
            b.init(&mut store, &mut rng).unwrap();
        }
        let mut tape = Tape::new();
        let b = tape.bind(&store, false);
        let x = tape.constant(Tensor::randn(&[100, 3], 1.0, &mut rng));
        let y = conv_stack(&mut tape, &b, x, &blocks).unwrap();
        assert_eq!(tape.shape(y), &[25, 4]);
        assert_eq!(stack_output_len(100, &[1, 2, 1, 2]), 25);
        assert_eq!(stack_output_len(7, &[2, 2]), 2);
    }

    #[test]
    fn identity_kernel_leaves_input() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let mut eye = Tensor::zeros(&[3, 3, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(eye);
        let y = tape.conv1d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_stack_rejects_broken_chain() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let blocks = vec![ConvBlock::new("c", 3, 1, 2, 4, false)];
        let b = Bindings::default();
        assert!(matches!(
            conv_stack(&mut tape, &b, x, &blocks),
            Err(Error::Dimension { .. })
        ));
    }
}
