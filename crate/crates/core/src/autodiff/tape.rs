//! Wengert tape: every primitive evaluates eagerly, appends its output to the
//! tape, and remembers just enough to replay the chain rule in reverse.

use std::collections::BTreeMap;

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Output of an op none of whose inputs needed a gradient.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Conv1d { x: Var, w: Var, stride: usize, groups: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    /// Scalar loss whose gradient w.r.t. `input` was computed alongside the value.
    Custom { input: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar loss keyed by leaf name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.by_name.insert(name, grad);
    }

    /// Adds `other` into `self`, creating entries that are missing.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_name.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Parameter handles produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("parameter `{name}` is not bound")))
    }

    pub fn merge(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Right operand may equal the left shape, be a single element, or match the
/// left operand's trailing dimensions. The element of `b` paired with `a[i]`
/// is then always `b[i % b.len()]`.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let bn: usize = b.iter().product();
    if a == b || bn == 1 {
        return Ok(());
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Ok(());
    }
    Err(dim_err(op, a, b))
}

fn reduce_broadcast(g: &[f64], bn: usize) -> Vec<f64> {
    let mut out = vec![0.0; bn];
    for (i, v) in g.iter().enumerate() {
        out[i % bn] += v;
    }
    out
}

/// (outer, axis extent, inner) split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Named leaf; named leaves requiring grad appear in the gradient table.
    pub fn leaf(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records every tensor of `store` as a named leaf.
    pub fn bind(&mut self, store: &ParameterStore, trainable: bool) -> Bindings {
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), self.leaf(name, t.clone(), trainable)))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast(op_name, av.shape(), bv.shape())?;
        let bd = bv.data();
        let bn = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        check_finite(op_name, &t)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x / c);
        check_finite("div_scalar", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::DivScalar(a, c), rg))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        check_finite(name, &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, op, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    fn rank_at_least(&self, op: &'static str, a: Var, rank: usize) -> Result<()> {
        let s = self.shape(a);
        if s.len() < rank {
            return Err(dim_err(op, s, &[]));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rank_at_least("softmax", a, 1)?;
        let t = softmax_rows(self.value(a));
        check_finite("softmax", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rank_at_least("log_softmax", a, 1)?;
        let t = log_softmax_rows(self.value(a));
        check_finite("log_softmax", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// Normalizes each last-dimension row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.rank_at_least("layer_norm", a, 1)?;
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = Vec::with_capacity(av.numel());
        let mut inv_std = Vec::with_capacity(av.num_rows());
        for row in av.rows().filter(|_| w > 0) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        check_finite("layer_norm", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::LayerNorm { x: a, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let t = Tensor::scalar(s);
        check_finite("sum", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::usage("mean of an empty tensor"));
        }
        let t = Tensor::scalar(av.data().iter().sum::<f64>() / av.numel() as f64);
        check_finite("mean", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Mean(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(dim_err("transpose", av.shape(), &[]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let t = Tensor::new(vec![c, r], transpose_raw(av.data(), r, c))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(dim_err("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&av.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        let t = Tensor::new(new_shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Slice { x: a, axis, start }, rg))
    }

    /// Row gather from a 2-D table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(dim_err("gather", tv.shape(), &[]));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::usage(format!(
                    "embedding index {i} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![indices.len(), width], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution over time. `x` is `[T, C_in]`, `w` is
    /// `[C_out, C_in / groups, K]`; zero padding `K / 2` on both sides and
    /// output length `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 3 || stride == 0 || groups == 0 {
            return Err(dim_err("conv1d", xs, ws));
        }
        let (t_in, c_in) = (xs[0], xs[1]);
        let (c_out, cpg, k) = (ws[0], ws[1], ws[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cpg != c_in / groups {
            return Err(dim_err("conv1d", xs, ws));
        }
        let geo = ConvGeometry {
            t_in,
            t_out: conv_out_len(t_in, stride),
            c_in,
            c_out,
            k,
            stride,
            groups,
        };
        let out = conv1d_forward(xv.data(), wv.data(), &geo);
        let t = Tensor::new(vec![geo.t_out, c_out], out)?;
        check_finite("conv1d", &t)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                stride,
                groups,
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(dim_err("masked_fill", av.shape(), &[mask.len()]));
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        check_finite("masked_fill", &t)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            t,
            Op::MaskedFill {
                x: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `input`.
    pub fn custom_scalar(&mut self, name: &'static str, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(dim_err(name, self.shape(input), grad.shape()));
        }
        let t = Tensor::scalar(value);
        check_finite(name, &t)?;
        check_finite(name, &grad)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(t, Op::Custom { input, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every named leaf that requires a
    /// gradient gets an entry, zero-filled if no path reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (match node.op {
                Op::Leaf => None,
                _ => grads[i].take(),
            }) else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }

        let mut table = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.name) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match table.by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => table.insert(name.clone(), g),
                }
            }
        }
        Ok(table)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let g = Tensor::new(self.shape(v).to_vec(), g)?;
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(gd, &bt, m, n, k))?;
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, gd, k, m, n))?;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, gd.to_vec())?;
                if self.requires_grad(*b) {
                    let bn = self.value(*b).numel();
                    let mut gb = reduce_broadcast(gd, bn);
                    gb.iter_mut().for_each(|v| *v *= sign);
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bn = bd.len();
                if self.requires_grad(*a) {
                    let ga = gd.iter().enumerate().map(|(i, g)| g * bd[i % bn]).collect();
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> = gd.iter().zip(ad).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, reduce_broadcast(&prod, bn))?;
                }
            }
            Op::DivScalar(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g / c).collect())?;
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y).collect())?;
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| g / x).collect())?;
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax(a) => {
                let w = node.value.last_dim();
                let mut ga = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(w.max(1)).zip(y.chunks(w.max(1))) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    ga.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSoftmax(a) => {
                let w = node.value.last_dim();
                let mut ga = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(w.max(1)).zip(y.chunks(w.max(1))) {
                    let total: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * total));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let w = node.value.last_dim();
                let mut ga = Vec::with_capacity(gd.len());
                for ((gr, yr), inv) in gd.chunks(w.max(1)).zip(y.chunks(w.max(1))).zip(inv_std) {
                    let n = w as f64;
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    ga.extend(gr.iter().zip(yr).map(|(g, y)| inv * (g - mean_g - y * mean_gy)));
                }
                self.accumulate(grads, *x, ga)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n])?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n])?;
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.accumulate(grads, *a, transpose_raw(gd, s[0], s[1]))?;
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.to_vec())?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (v, part) in inputs.iter().zip(parts.iter_mut()) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, *v, part)?;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&src, *axis);
                let width = node.value.shape()[*axis];
                let mut ga = vec![0.0; src.iter().product()];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let from = o * width * inner;
                    ga[dst..dst + width * inner].copy_from_slice(&gd[from..from + width * inner]);
                }
                self.accumulate(grads, *x, ga)?;
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let w = tv.shape()[1];
                let mut ga = vec![0.0; tv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..w {
                        ga[i * w + c] += gd[r * w + c];
                    }
                }
                self.accumulate(grads, *table, ga)?;
            }
            Op::Conv1d {
                x,
                w,
                stride,
                groups,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry {
                    t_in: xv.shape()[0],
                    t_out: node.value.shape()[0],
                    c_in: xv.shape()[1],
                    c_out: wv.shape()[0],
                    k: wv.shape()[2],
                    stride: *stride,
                    groups: *groups,
                };
                let (gx, gw) = conv1d_backward(
                    xv.data(),
                    wv.data(),
                    gd,
                    &geo,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx)?;
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw)?;
                }
            }
            Op::MaskedFill { x, mask } => {
                let ga = gd
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| if *m { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *x, ga)?;
            }
            Op::Custom { input, grad } => {
                let ga = grad.data().iter().map(|v| v * gd[0]).collect();
                self.accumulate(grads, *input, ga)?;
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let w = t.last_dim().max(1);
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let w = t.last_dim().max(1);
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
}

struct ConvGeometry {
    t_in: usize,
    t_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
}

impl ConvGeometry {
    /// Input frame read by output frame `o` at tap `j`, if inside the signal.
    fn source(&self, o: usize, j: usize) -> Option<usize> {
        let pos = (o * self.stride + j) as isize - (self.k / 2) as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

impl ConvGeometry {
    fn cpg_in(&self) -> usize {
        self.c_in / self.groups
    }

    /// `[C_out, C_in/g, K]` to tap-major `[K, C_out, C_in/g]`.
    fn tap_major(&self, w: &[f64]) -> Vec<f64> {
        let cpg = self.cpg_in();
        let mut out = vec![0.0; w.len()];
        for co in 0..self.c_out {
            for ci in 0..cpg {
                for j in 0..self.k {
                    out[(j * self.c_out + co) * cpg + ci] = w[(co * cpg + ci) * self.k + j];
                }
            }
        }
        out
    }

    fn from_tap_major(&self, wt: &[f64]) -> Vec<f64> {
        let cpg = self.cpg_in();
        let mut out = vec![0.0; wt.len()];
        for co in 0..self.c_out {
            for ci in 0..cpg {
                for j in 0..self.k {
                    out[(co * cpg + ci) * self.k + j] = wt[(j * self.c_out + co) * cpg + ci];
                }
            }
        }
        out
    }
}

fn conv1d_forward(x: &[f64], w: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let cpg_in = geo.cpg_in();
    let cpg_out = geo.c_out / geo.groups;
    let wt = geo.tap_major(w);
    let mut out = vec![0.0; geo.t_out * geo.c_out];
    for o in 0..geo.t_out {
        let orow = &mut out[o * geo.c_out..(o + 1) * geo.c_out];
        for j in 0..geo.k {
            let Some(src) = geo.source(o, j) else { continue };
            let xrow = &x[src * geo.c_in..(src + 1) * geo.c_in];
            for (co, acc) in orow.iter_mut().enumerate() {
                let xs = &xrow[(co / cpg_out) * cpg_in..][..cpg_in];
                let ws = &wt[(j * geo.c_out + co) * cpg_in..][..cpg_in];
                *acc += ws.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    geo: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let cpg_in = geo.cpg_in();
    let cpg_out = geo.c_out / geo.groups;
    let wt = geo.tap_major(w);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gwt = want_w.then(|| vec![0.0; w.len()]);
    for o in 0..geo.t_out {
        for j in 0..geo.k {
            let Some(src) = geo.source(o, j) else { continue };
            for co in 0..geo.c_out {
                let go = gy[o * geo.c_out + co];
                if go == 0.0 {
                    continue;
                }
                let xbase = src * geo.c_in + (co / cpg_out) * cpg_in;
                let wbase = (j * geo.c_out + co) * cpg_in;
                if let Some(gx) = gx.as_mut() {
                    for (g, wv) in gx[xbase..xbase + cpg_in].iter_mut().zip(&wt[wbase..wbase + cpg_in]) {
                        *g += go * wv;
                    }
                }
                if let Some(gw) = gwt.as_mut() {
                    for (g, xv) in gw[wbase..wbase + cpg_in].iter_mut().zip(&x[xbase..xbase + cpg_in]) {
                        *g += go * xv;
                    }
                }
            }
        }
    }
    (gx, gwt.map(|g| geo.from_tap_major(&g)))
}
