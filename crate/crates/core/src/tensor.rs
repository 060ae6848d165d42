//! Dense vector/matrix tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Each recorded
//! node owns its forward value and a gradient buffer of the same shape.
//! [`Graph::backward`] walks the tape once in reverse, accumulating
//! `d(loss)/d(node)` into every node that the loss depends on.
//!
//! Shapes are explicit and never broadcast: vectors are `[n]`, matrices are
//! row-major `[rows, cols]`, scalars are `[1]`.

use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operation produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Linear,
    Relu,
    Sigmoid,
    Hadamard,
    Concat,
    SoftmaxCrossEntropy,
    Sum,
    Add,
    Scale,
}

#[derive(Clone, Debug)]
enum Rule {
    Leaf,
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Hadamard(usize, usize),
    Concat(usize, usize),
    SoftmaxCrossEntropy {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(usize),
    Add(usize, usize),
    Scale(usize, f64),
}

impl Rule {
    fn tag(&self) -> OpTag {
        match self {
            Rule::Leaf => OpTag::Leaf,
            Rule::Linear { .. } => OpTag::Linear,
            Rule::Relu(_) => OpTag::Relu,
            Rule::Sigmoid(_) => OpTag::Sigmoid,
            Rule::Hadamard(..) => OpTag::Hadamard,
            Rule::Concat(..) => OpTag::Concat,
            Rule::SoftmaxCrossEntropy { .. } => OpTag::SoftmaxCrossEntropy,
            Rule::Sum(_) => OpTag::Sum,
            Rule::Add(..) => OpTag::Add,
            Rule::Scale(..) => OpTag::Scale,
        }
    }
}

/// A node of the computation graph: forward value plus accumulated gradient.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    rule: Rule,
}

impl DiffTensor {
    fn new(shape: Vec<usize>, value: Vec<f64>, rule: Rule) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            rule,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn op_tag(&self) -> OpTag {
        self.rule.tag()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.rule, Rule::Leaf)
    }
}

/// Dynamic tape of recorded operations. Nodes are appended in execution
/// order, so every operation's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffTensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &DiffTensor {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, rule: Rule) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(DiffTensor::new(shape, value, rule));
        TensorId(self.nodes.len() - 1)
    }

    /// Records a leaf holding `value`. Its gradient starts at zero.
    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>) -> Result<TensorId> {
        let expected: usize = shape.iter().product();
        if expected != value.len() {
            return Err(Error::dim("leaf", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, Rule::Leaf))
    }

    pub fn vector(&mut self, value: Vec<f64>) -> TensorId {
        let n = value.len();
        self.push(vec![n], value, Rule::Leaf)
    }

    fn vector_len(&self, id: TensorId, op: &'static str) -> Result<usize> {
        match self.shape(id) {
            [n] => Ok(*n),
            other => Err(Error::dim(op, other, &[0])),
        }
    }

    /// `Wᵀ·input + b` for `input: [n]`, `weight: [n, m]`, `bias: [m]`.
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let n = self.vector_len(input, "linear")?;
        let (rows, cols) = match self.shape(weight) {
            [r, c] => (*r, *c),
            other => return Err(Error::dim("linear", &[n], other)),
        };
        if rows != n {
            return Err(Error::dim("linear", &[n], &[rows, cols]));
        }
        let m = self.vector_len(bias, "linear")?;
        if m != cols {
            return Err(Error::dim("linear", &[rows, cols], &[m]));
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let mut out = vec![0.0; m];
        for (xi, row) in x.iter().zip(w.chunks_exact(m)) {
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        for (o, bj) in out.iter_mut().zip(&self.nodes[bias.0].value) {
            *o += bj;
        }
        Ok(self.push(
            vec![m],
            out,
            Rule::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let node = &self.nodes[input.0];
        let out = node.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = node.shape.clone();
        self.push(shape, out, Rule::Relu(input.0))
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let node = &self.nodes[input.0];
        let out = node.value.iter().map(|&x| sigmoid(x)).collect();
        let shape = node.shape.clone();
        self.push(shape, out, Rule::Sigmoid(input.0))
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("hadamard", sa, sb));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Rule::Hadamard(a.0, b.0)))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let n = self.vector_len(a, "concat")?;
        let m = self.vector_len(b, "concat")?;
        let mut out = Vec::with_capacity(n + m);
        out.extend_from_slice(&self.nodes[a.0].value);
        out.extend_from_slice(&self.nodes[b.0].value);
        Ok(self.push(vec![n + m], out, Rule::Concat(a.0, b.0)))
    }

    /// `-log softmax(logits)[target]` as a `[1]` node.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let k = self.vector_len(logits, "softmax_cross_entropy")?;
        if target >= k {
            return Err(Error::Index {
                what: "logits",
                index: target,
                len: k,
            });
        }
        let z = &self.nodes[logits.0].value;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        let loss = log_norm - z[target];
        let probs = z.iter().map(|&v| (v - log_norm).exp()).collect();
        Ok(self.push(
            vec![1],
            vec![loss],
            Rule::SoftmaxCrossEntropy {
                logits: logits.0,
                target,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total = self.nodes[input.0].value.iter().sum();
        self.push(vec![1], vec![total], Rule::Sum(input.0))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("add", sa, sb));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Rule::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let node = &self.nodes[input.0];
        let out = node.value.iter().map(|v| v * factor).collect();
        let shape = node.shape.clone();
        self.push(shape, out, Rule::Scale(input.0, factor))
    }

    /// Resets every gradient, seeds `d(loss)/d(loss) = 1` and propagates to
    /// all nodes recorded before `loss`. Nodes recorded after it are untouched
    /// apart from the reset.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("loss node {} is not on this graph", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let upstream = &node.grad;
            match &node.rule {
                Rule::Leaf => {}
                Rule::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let m = upstream.len();
                    for (gb, g) in before[*bias].grad.iter_mut().zip(upstream) {
                        *gb += g;
                    }
                    let mut gw = std::mem::take(&mut before[*weight].grad);
                    for (xi, grow) in before[*input].value.iter().zip(gw.chunks_exact_mut(m)) {
                        for (gwij, g) in grow.iter_mut().zip(upstream) {
                            *gwij += xi * g;
                        }
                    }
                    before[*weight].grad = gw;
                    let mut gx = std::mem::take(&mut before[*input].grad);
                    for (gxi, wrow) in gx.iter_mut().zip(before[*weight].value.chunks_exact(m)) {
                        let mut acc = 0.0;
                        for (wij, g) in wrow.iter().zip(upstream) {
                            acc += wij * g;
                        }
                        *gxi += acc;
                    }
                    before[*input].grad = gx;
                }
                Rule::Relu(x) => {
                    let src = &mut before[*x];
                    for ((gx, &xv), g) in src.grad.iter_mut().zip(&src.value).zip(upstream) {
                        if xv > 0.0 {
                            *gx += g;
                        }
                    }
                }
                Rule::Sigmoid(x) => {
                    for ((gx, y), g) in before[*x].grad.iter_mut().zip(&node.value).zip(upstream) {
                        *gx += y * (1.0 - y) * g;
                    }
                }
                Rule::Hadamard(a, b) => {
                    let mut ga = std::mem::take(&mut before[*a].grad);
                    for ((gai, bv), g) in ga.iter_mut().zip(&before[*b].value).zip(upstream) {
                        *gai += bv * g;
                    }
                    before[*a].grad = ga;
                    let mut gb = std::mem::take(&mut before[*b].grad);
                    for ((gbi, av), g) in gb.iter_mut().zip(&before[*a].value).zip(upstream) {
                        *gbi += av * g;
                    }
                    before[*b].grad = gb;
                }
                Rule::Concat(a, b) => {
                    let n = before[*a].value.len();
                    let (left, right) = upstream.split_at(n);
                    for (ga, g) in before[*a].grad.iter_mut().zip(left) {
                        *ga += g;
                    }
                    for (gb, g) in before[*b].grad.iter_mut().zip(right) {
                        *gb += g;
                    }
                }
                Rule::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let g = upstream[0];
                    for (k, (gz, p)) in before[*logits].grad.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *gz += (p - onehot) * g;
                    }
                }
                Rule::Sum(x) => {
                    let g = upstream[0];
                    before[*x].grad.iter_mut().for_each(|gx| *gx += g);
                }
                Rule::Add(a, b) => {
                    for (ga, g) in before[*a].grad.iter_mut().zip(upstream) {
                        *ga += g;
                    }
                    for (gb, g) in before[*b].grad.iter_mut().zip(upstream) {
                        *gb += g;
                    }
                }
                Rule::Scale(x, factor) => {
                    for (gx, g) in before[*x].grad.iter_mut().zip(upstream) {
                        *gx += factor * g;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Logistic function, branching on sign so that `exp` never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A parameter tensor handed to [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamValue {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl ParamValue {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        Self {
            shape: shape.to_vec(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, entry index)` of the worst entry, if any entry exists.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` records a scalar loss on a fresh graph from the leaf handles of
/// `params` (in order). The relative error per entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradient_check<F>(build: F, params: &[ParamValue], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[ParamValue], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut graph = Graph::new();
        let ids = values
            .iter()
            .map(|p| graph.leaf(&p.shape, p.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut graph, &ids)?;
        let value = graph.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite ({value})")));
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        graph.backward(loss)?;
        Ok((value, ids.iter().map(|&id| graph.grad(id).to_vec()).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (p, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let original = work[p].value[k];
            work[p].value[k] = original + epsilon;
            let (plus, _) = eval(&work, false)?;
            work[p].value[k] = original - epsilon;
            let (minus, _) = eval(&work, false)?;
            work[p].value[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((p, k));
            }
        }
    }
    Ok(report)
}
