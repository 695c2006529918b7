use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used to prove that the
/// finite-difference checker catches a wrong gradient.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// ReLU forwards its upstream gradient unmasked.
    ReluPassThrough,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    BiasAdd { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Relu(Var),
    Sigmoid(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeometry },
    SumOver(Vec<Var>),
    MeanOver(Vec<Var>),
    Concat(Var, Var),
    Stack(Vec<Var>),
    PairConcat { a: Var, b: Var, pairs: Vec<(u32, u32)>, width: usize },
    SumRows { x: Var, rows: usize, cols: usize },
    Bce { scores: Var, targets: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order and replays them in
/// reverse to compute gradients.
///
/// Node ids are allocated sequentially, so every operation's inputs precede
/// it and reverse index order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<BackwardFault>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// Gradient of any trainable leaf.
    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Drops every node recorded after `len`. Used by inference loops that
    /// only need forward values and would otherwise grow the tape unbounded.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|(_, v)| v.0 < len);
    }

    /// Fingerprint of every piecewise choice made so far: which ReLU inputs
    /// were positive and which max-pool inputs won. Two evaluations with the
    /// same fingerprint lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable leaf. Names must be unique within one graph.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Logic(format!("parameter `{name}` bound twice")));
        }
        let var = self.variable(value);
        self.params.push((name.to_string(), var));
        Ok(var)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds `bias[C]` to every length-`C` row along the last axis of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = *tx.shape().last().expect("nonempty shape");
        if tb.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias {:?} does not match last axis of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`. A rank-1 `a` is treated as a
    /// single row and yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, vector) = match *ta.shape() {
            [k] => (1, k, true),
            [m, k] => (m, k, false),
            ref s => return Err(Error::shape("matmul", format!("left operand has rank {}", s.len()))),
        };
        let n = match *tb.shape() {
            [kb, n] if kb == k => n,
            ref s => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {:?} by {s:?}", ta.shape()),
                ))
            }
        };
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let shape: Vec<usize> = if vector { vec![n] } else { vec![m, n] };
        let value = Tensor::new(&shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Affine map `input·weight + bias` with `weight[n×m]` and `bias[m]`.
    /// `input` may be a single vector `[n]` or a batch of rows `[r×n]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let prod = self.matmul(input, weight)?;
        self.bias_add(prod, bias)
    }

    /// 2-D convolution of an `H×W×Cin` input with `k×k×Cin×Cout` kernels.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (height, width, in_channels) = match *tx.shape() {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape("conv2d", format!("input must be H×W×C, got {s:?}"))),
        };
        let (k, out_channels) = match *tk.shape() {
            [k1, k2, cin, cout] if k1 == k2 && cin == in_channels => (k1, cout),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} incompatible with input {:?}", tx.shape()),
                ))
            }
        };
        let (oh, ow) = match (
            kernels::window_output(height, k, stride, padding),
            kernels::window_output(width, k, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("{k}×{k} kernel (stride {stride}, padding {padding}) does not fit {height}×{width}"),
                ))
            }
        };
        let geom = ConvGeometry {
            height,
            width,
            in_channels,
            out_channels,
            kernel: k,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let cols = kernels::im2col(tx.data(), &geom);
        let out = kernels::matmul(&cols, tk.data(), geom.positions(), geom.patch_len(), out_channels);
        let value = Tensor::new(&[oh, ow, out_channels], out)?;
        let rg = self.any_grad(&[x, kernel]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, kernel, geom, cols }, rg))
    }

    fn pool_geometry(&self, op: &'static str, x: Var, k: usize, stride: usize) -> Result<PoolGeometry> {
        let tx = self.value(x);
        let (height, width, channels) = match *tx.shape() {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::shape(op, format!("input must be H×W×C, got {s:?}"))),
        };
        if k == 0 || stride == 0 || k > height || k > width {
            return Err(Error::shape(
                op,
                format!("window {k} (stride {stride}) invalid for {height}×{width} input"),
            ));
        }
        Ok(PoolGeometry {
            height,
            width,
            channels,
            kernel: k,
            stride,
            out_height: (height - k) / stride + 1,
            out_width: (width - k) / stride + 1,
        })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geometry("max_pool2d", x, k, stride)?;
        let (out, argmax) = kernels::max_pool(self.value(x).data(), &geom);
        let value = Tensor::new(&[geom.out_height, geom.out_width, geom.channels], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geometry("avg_pool2d", x, k, stride)?;
        let out = kernels::avg_pool(self.value(x).data(), &geom);
        let value = Tensor::new(&[geom.out_height, geom.out_width, geom.channels], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool { x, geom }, rg))
    }

    fn stacked_rows(&self, op: &'static str, xs: &[Var]) -> Result<(Vec<usize>, Vec<f64>)> {
        let first = xs.first().ok_or(Error::EmptyInput { op })?;
        let shape = self.value(*first).shape().to_vec();
        let cols = self.value(*first).len();
        let mut rows = Vec::with_capacity(xs.len() * cols);
        for &v in xs {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    op,
                    format!("list mixes shapes {shape:?} and {:?}", t.shape()),
                ));
            }
            rows.extend_from_slice(t.data());
        }
        Ok((shape, rows))
    }

    /// Element-wise sum of equally shaped tensors. The result does not depend
    /// on the order of `xs`.
    pub fn sum_over(&mut self, xs: &[Var]) -> Result<Var> {
        let (shape, rows) = self.stacked_rows("sum_over", xs)?;
        let cols = rows.len() / xs.len();
        let sum = kernels::order_free_column_sum(&rows, xs.len(), cols);
        let value = Tensor::new(&shape, sum)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::SumOver(xs.to_vec()), rg))
    }

    /// Element-wise mean of equally shaped tensors. Order-independent, and
    /// exact when all inputs are equal.
    pub fn mean_over(&mut self, xs: &[Var]) -> Result<Var> {
        let (shape, rows) = self.stacked_rows("mean_over", xs)?;
        let n = xs.len();
        let cols = rows.len() / n;
        let mut column = Vec::with_capacity(n);
        let mean = (0..cols)
            .map(|c| {
                column.clear();
                column.extend((0..n).map(|r| rows[r * cols + c]));
                column.sort_unstable_by(f64::total_cmp);
                let base = column[0];
                base + column.iter().map(|v| v - base).sum::<f64>() / n as f64
            })
            .collect();
        let value = Tensor::new(&shape, mean)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::MeanOver(xs.to_vec()), rg))
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(Error::shape(
                "concat",
                format!("expected vectors, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(&[data.len()], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Packs one-element tensors into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput { op: "stack" });
        }
        let mut data = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("stack", format!("element has shape {:?}", t.shape())));
            }
            data.push(t.item());
        }
        let value = Tensor::new(&[xs.len()], data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::Stack(xs.to_vec()), rg))
    }

    /// Row `p` of the result is `concat(a[i], b[j])` for `(i, j) = pairs[p]`,
    /// where `a` and `b` are read as matrices of row vectors.
    pub fn pair_concat(&mut self, a: Var, b: Var, pairs: &[(u32, u32)]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let width = *ta.shape().last().expect("nonempty shape");
        if *tb.shape().last().expect("nonempty shape") != width {
            return Err(Error::shape(
                "pair_concat",
                format!("row widths differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyInput { op: "pair_concat" });
        }
        let (na, nb) = (ta.len() / width, tb.len() / width);
        let mut data = Vec::with_capacity(pairs.len() * 2 * width);
        for &(i, j) in pairs {
            let (i, j) = (i as usize, j as usize);
            if i >= na || j >= nb {
                return Err(Error::shape("pair_concat", format!("pair ({i}, {j}) out of range")));
            }
            data.extend_from_slice(&ta.data()[i * width..(i + 1) * width]);
            data.extend_from_slice(&tb.data()[j * width..(j + 1) * width]);
        }
        let value = Tensor::new(&[pairs.len(), 2 * width], data)?;
        let rg = self.any_grad(&[a, b]);
        let pairs = pairs.to_vec();
        Ok(self.push(value, Op::PairConcat { a, b, pairs, width }, rg))
    }

    /// Sums the rows of a matrix into one vector, independent of row order.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = match *tx.shape() {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("sum_rows", format!("expected a matrix, got {s:?}"))),
        };
        let sum = kernels::order_free_column_sum(tx.data(), rows, cols);
        let value = Tensor::new(&[cols], sum)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SumRows { x, rows, cols }, rg))
    }

    /// Mean binary cross-entropy of probabilities `scores[n]` against 0/1
    /// targets. Returns a one-element tensor.
    pub fn bce(&mut self, scores: Var, targets: &[f64]) -> Result<Var> {
        let ts = self.value(scores);
        if targets.is_empty() {
            return Err(Error::EmptyInput { op: "bce" });
        }
        if ts.len() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} scores for {} targets", ts.len(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let total: f64 = ts
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &y)| -(y * s.ln() + (1.0 - y) * (1.0 - s).ln()))
            .sum();
        let loss = total / n;
        if !loss.is_finite() {
            let (lo, hi) = ts
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
            return Err(Error::Numeric(format!(
                "non-finite loss {loss}; scores span [{lo:e}, {hi:e}]"
            )));
        }
        let rg = self.any_grad(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                scores,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Same loss as [`Graph::bce`] on `sigmoid(logits)`, evaluated as
    /// `max(z, 0) − y·z + ln(1 + e^{−|z|})` so saturated logits stay finite.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tz = self.value(logits);
        if targets.is_empty() {
            return Err(Error::EmptyInput { op: "bce_with_logits" });
        }
        if tz.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits for {} targets", tz.len(), targets.len()),
            ));
        }
        let total: f64 = tz
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        if !loss.is_finite() {
            let (lo, hi) = tz
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
            return Err(Error::Numeric(format!(
                "non-finite loss {loss}; logits span [{lo:e}, {hi:e}]"
            )));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    ///
    /// Every trainable leaf gets an entry in the result; leaves the loss does
    /// not depend on receive zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph {
            nodes,
            params,
            fault,
        } = self;
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Logic(format!("loss node {} not on this tape", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Logic(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::Logic(
                "backward called on a tensor detached from every trainable leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Reshape(x) => accumulate(&mut grads[x.0], &g),
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::BiasAdd { x, bias } => {
                    if needs(x) {
                        accumulate(&mut grads[x.0], &g);
                    }
                    if needs(bias) {
                        let c = nodes[bias.0].value.len();
                        accumulate_with(&mut grads[bias.0], c, |gb| {
                            for row in g.chunks_exact(c) {
                                gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                            }
                        });
                    }
                }
                Op::Scale { x, factor } => {
                    let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads[x.0], &d);
                }
                Op::Relu(x) => {
                    let input = nodes[x.0].value.data();
                    let d: Vec<f64> = match fault {
                        Some(BackwardFault::ReluPassThrough) => g.clone(),
                        None => g
                            .iter()
                            .zip(input)
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads[x.0], &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads[x.0], &d);
                }
                Op::MatMul { a, b, m, k, n } => {
                    if needs(a) {
                        let d = kernels::matmul_a_bt(&g, nodes[b.0].value.data(), *m, *n, *k);
                        accumulate(&mut grads[a.0], &d);
                    }
                    if needs(b) {
                        let d = kernels::matmul_at_b(nodes[a.0].value.data(), &g, *m, *k, *n);
                        accumulate(&mut grads[b.0], &d);
                    }
                }
                Op::Conv2d {
                    x,
                    kernel,
                    geom,
                    cols,
                } => {
                    let (p, q, co) = (geom.positions(), geom.patch_len(), geom.out_channels);
                    if needs(kernel) {
                        let d = kernels::matmul_at_b(cols, &g, p, q, co);
                        accumulate(&mut grads[kernel.0], &d);
                    }
                    if needs(x) {
                        let dcols = kernels::matmul_a_bt(&g, nodes[kernel.0].value.data(), p, co, q);
                        let d = kernels::col2im(&dcols, geom);
                        accumulate(&mut grads[x.0], &d);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let len = nodes[x.0].value.len();
                    accumulate_with(&mut grads[x.0], len, |gx| {
                        for (&src, &gv) in argmax.iter().zip(&g) {
                            gx[src] += gv;
                        }
                    });
                }
                Op::AvgPool { x, geom } => {
                    let d = kernels::avg_pool_backward(&g, geom);
                    accumulate(&mut grads[x.0], &d);
                }
                Op::SumOver(xs) => {
                    for v in xs.iter().filter(|v| needs(v)) {
                        accumulate(&mut grads[v.0], &g);
                    }
                }
                Op::MeanOver(xs) => {
                    let d: Vec<f64> = g.iter().map(|v| v / xs.len() as f64).collect();
                    for v in xs.iter().filter(|v| needs(v)) {
                        accumulate(&mut grads[v.0], &d);
                    }
                }
                Op::Concat(a, b) => {
                    let split = nodes[a.0].value.len();
                    if needs(a) {
                        accumulate(&mut grads[a.0], &g[..split]);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], &g[split..]);
                    }
                }
                Op::Stack(xs) => {
                    for (v, gv) in xs.iter().zip(&g) {
                        if needs(v) {
                            accumulate(&mut grads[v.0], &[*gv]);
                        }
                    }
                }
                Op::PairConcat { a, b, pairs, width } => {
                    let w = *width;
                    let (na, nb) = (nodes[a.0].value.len(), nodes[b.0].value.len());
                    let mut ga = needs(a).then(|| vec![0.0; na]);
                    let mut gb = needs(b).then(|| vec![0.0; nb]);
                    for (row, &(i, j)) in g.chunks_exact(2 * w).zip(pairs) {
                        let (i, j) = (i as usize, j as usize);
                        if let Some(ga) = ga.as_mut() {
                            ga[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[..w])
                                .for_each(|(a, r)| *a += r);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j * w..(j + 1) * w]
                                .iter_mut()
                                .zip(&row[w..])
                                .for_each(|(a, r)| *a += r);
                        }
                    }
                    if let Some(ga) = ga {
                        accumulate(&mut grads[a.0], &ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads[b.0], &gb);
                    }
                }
                Op::SumRows { x, rows, cols } => {
                    let mut d = Vec::with_capacity(rows * cols);
                    for _ in 0..*rows {
                        d.extend_from_slice(&g);
                    }
                    accumulate(&mut grads[x.0], &d);
                }
                Op::Bce { scores, targets } => {
                    let n = targets.len() as f64;
                    let d: Vec<f64> = nodes[scores.0]
                        .value
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&s, &y)| g[0] * (s - y) / (s * (1.0 - s)) / n)
                        .collect();
                    accumulate(&mut grads[scores.0], &d);
                }
                Op::BceLogits { logits, targets } => {
                    let n = targets.len() as f64;
                    let d: Vec<f64> = nodes[logits.0]
                        .value
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n)
                        .collect();
                    accumulate(&mut grads[logits.0], &d);
                }
            }
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.leaves
                    .insert(Var(id), Tensor::new(node.value.shape(), data)?);
            }
        }
        for (name, var) in params {
            let g = out.leaves[&var].clone();
            out.named.insert(name, g);
        }
        Ok(out)
    }
}
