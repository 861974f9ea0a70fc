//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! its backward rule needs. Nodes only refer to earlier nodes, so the tape
//! is topologically ordered by construction and backward is a single
//! reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::{self, BnMode};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: BnMode,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
    GatherRows {
        source: Var,
        indices: Vec<usize>,
    },
    MaxOverSet {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves reached by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `target.grad`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], var: Var, g: Vec<f32>) {
    match &mut grads[var.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
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

    /// Drops every recorded node; existing [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node { value, tracked, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf; it receives a gradient iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: &Tensor) -> Var {
        let tracked = value.requires_grad();
        let mut v = value.clone();
        v.zero_grad();
        self.push(v, tracked, Op::Leaf)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut v = value.clone();
        v.zero_grad();
        self.push(v, true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        let tracked = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        Ok(self.push(out, tracked, Op::Conv2d { input, kernel, bias }))
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// In train mode the batch statistics are folded into `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let fwd = ops::batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            &running.mean,
            &running.var,
            mode,
        )?;
        if let Some(stats) = &fwd.stats {
            ops::update_running_stats(&mut running.mean, &mut running.var, stats);
        }
        let shape = self.value(input).shape().to_vec();
        let out = Tensor::new(shape, fwd.output)?;
        let tracked = self.tracked(input) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            out,
            tracked,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                mode,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let tracked = self.tracked(input);
        self.push(out, tracked, Op::Relu { input })
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let tracked = self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(out, tracked, Op::Linear { input, weight, bias }))
    }

    /// Mean cross-entropy over the batch; a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            tracked,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Softmax probabilities cached by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&[f32]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[M,C]` source rows selected by `[rows,k]` indices into `[rows,k,C]`.
    /// Indices carry no gradient.
    pub fn gather_rows(&mut self, source: Var, indices: &[usize], k: usize) -> Result<Var> {
        let out = ops::gather_rows(self.value(source), indices, k)?;
        let tracked = self.tracked(source);
        Ok(self.push(
            out,
            tracked,
            Op::GatherRows {
                source,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn max_over_set(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::max_over_set(self.value(input))?;
        let tracked = self.tracked(input);
        Ok(self.push(out, tracked, Op::MaxOverSet { input, argmax }))
    }

    /// Winning set slot per (row, channel) of a `max_over_set` node.
    pub fn argmax(&self, pooled: Var) -> Option<&[u32]> {
        match &self.nodes[pooled.0].op {
            Op::MaxOverSet { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let tracked = self.tracked(input);
        Ok(self.push(out, tracked, Op::GlobalAvgPool { input }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let tracked = self.tracked(input);
        self.push(Tensor::scalar(s), tracked, Op::Sum { input })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, tracked, Op::Reshape { input }))
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(input), axes)?;
        let tracked = self.tracked(input);
        Ok(self.push(
            out,
            tracked,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        let s = v.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let data = v
            .data()
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![s[0], len], data)?;
        let tracked = self.tracked(input);
        Ok(self.push(out, tracked, Op::SliceCols { input, start }))
    }

    /// Hash of every discrete selection recorded on the tape: rectifier
    /// masks, max-pool winners and gather indices. Two forward passes with
    /// equal fingerprints took the same piecewise-smooth branch.
    pub fn selection_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxOverSet { argmax, .. } => argmax.hash(&mut h),
                Op::GatherRows { indices, .. } => indices.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let gref: &[f32] = &g;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*kernel), gref);
                    if self.tracked(*input) {
                        accumulate(&mut grads, *input, cg.input);
                    }
                    if self.tracked(*kernel) {
                        accumulate(&mut grads, *kernel, cg.kernel);
                    }
                    if self.tracked(*bias) {
                        accumulate(&mut grads, *bias, cg.bias);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let bg = ops::batch_norm_backward(
                        node.value.shape(),
                        gref,
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        *mode,
                    );
                    if self.tracked(*input) {
                        accumulate(&mut grads, *input, bg.input);
                    }
                    if self.tracked(*gamma) {
                        accumulate(&mut grads, *gamma, bg.gamma);
                    }
                    if self.tracked(*beta) {
                        accumulate(&mut grads, *beta, bg.beta);
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gi = gref
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Linear { input, weight, bias } => {
                    let lg = ops::linear_backward(self.value(*input), self.value(*weight), gref);
                    if self.tracked(*input) {
                        accumulate(&mut grads, *input, lg.input);
                    }
                    if self.tracked(*weight) {
                        accumulate(&mut grads, *weight, lg.weight);
                    }
                    if let Some(b) = bias {
                        if self.tracked(*b) {
                            accumulate(&mut grads, *b, lg.bias);
                        }
                    }
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let classes = self.value(*logits).shape()[1];
                    let scale = gref[0] / labels.len() as f32;
                    let mut gi: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gi[i * classes + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, gi);
                }
                Op::GatherRows { source, indices } => {
                    let s = self.value(*source).shape();
                    let gi = ops::gather_rows_backward(s[0], s[1], indices, gref);
                    accumulate(&mut grads, *source, gi);
                }
                Op::MaxOverSet { input, argmax } => {
                    let gi = ops::max_over_set_backward(self.value(*input).shape(), argmax, gref);
                    accumulate(&mut grads, *input, gi);
                }
                Op::GlobalAvgPool { input } => {
                    let s = self.value(*input).shape();
                    let sp: usize = s[2..].iter().product();
                    let gi = gref
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g / sp as f32, sp))
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add { a, b } => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                    continue;
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, gref.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, gref.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Sum { input } => {
                    let n = self.value(*input).numel();
                    accumulate(&mut grads, *input, vec![gref[0]; n]);
                }
                Op::Reshape { input } => {
                    accumulate(&mut grads, *input, g);
                    continue;
                }
                Op::Permute { input, axes } => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    let back = ops::permute(&gt, &ops::inverse_axes(axes))?;
                    accumulate(&mut grads, *input, back.into_data());
                }
                Op::SliceCols { input, start } => {
                    let s = self.value(*input).shape();
                    let len = node.value.shape()[1];
                    let mut gi = vec![0.0f32; s[0] * s[1]];
                    for (r, grow) in gref.chunks(len).enumerate() {
                        gi[r * s[1] + start..r * s[1] + start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *input, gi);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}
