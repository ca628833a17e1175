//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A `Tape` is a static program: an append-only list of primitive
//! applications over named inputs and store-backed parameters. Building and
//! running are separate so one tape serves many forward passes (training
//! steps, batch-size changes). `forward` materializes every node, then
//! `backward` consumes the pass and produces gradients for every
//! `requires_grad` leaf.
//!
//! Execution buffers are 64-bit; tensor storage at rest stays 32-bit.
//! Everything runs in fixed index order, so results are deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dSpec, Pool2dSpec};
use crate::tensor::Tensor;

pub type ValueId = usize;
pub type ParamId = usize;

// ── Parameter store ──────────────────────────────────────────────────

/// Which optimizer owns a parameter: model weights or architecture encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    Arch,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Owns all trainable leaves referenced by a tape. Single-writer: one
/// training session mutates a store at a time.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_grad(),
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total scalar count, optionally restricted to one group. Optimizer
    /// state is never included.
    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Tensor]) {
        assert_eq!(snap.len(), self.entries.len(), "snapshot size mismatch");
        for (e, t) in self.entries.iter_mut().zip(snap.iter()) {
            e.tensor = t.clone();
        }
    }
}

// ── Primitive set ────────────────────────────────────────────────────

/// The closed primitive set. Each op carries its structural attributes;
/// shape rules live in `infer_shape` and are checked before execution.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveOp {
    /// 2-D `[m,k]x[k,n]` or batched 3-D `[B,m,k]x[B,k,n]` matrix product.
    MatMul,
    /// `x · W + b` with x `[B,in]` or `[in]`, W `[in,out]`, b `[out]`.
    Affine,
    Conv2d {
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ElementwiseAdd,
    ElementwiseMul,
    /// y = factor * x. Constant-factor glue for negation and zeroing.
    Scale { factor: f32 },
    /// inputs: weights `[n]` then n same-shaped operands; y = sum_i w_i * x_i.
    WeightedSum,
    Concat { axis: usize },
    /// Row-major reinterpretation; one dim may be -1 (inferred).
    Reshape { dims: Vec<i64> },
    /// Softmax along the last axis.
    Softmax,
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f32 },
    /// Mean over the given axes (removed from the shape; full reduction
    /// yields `[1]`).
    Mean { axes: Vec<usize> },
    /// inputs: logits `[B,K]`, labels `[B]` (integral class indices).
    /// Fuses log-softmax; output is the mean loss `[1]`.
    CrossEntropy,
}

impl PrimitiveOp {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveOp::MatMul => "matmul",
            PrimitiveOp::Affine => "affine",
            PrimitiveOp::Conv2d { .. } => "conv2d",
            PrimitiveOp::AvgPool2d { .. } => "avg_pool2d",
            PrimitiveOp::MaxPool2d { .. } => "max_pool2d",
            PrimitiveOp::ElementwiseAdd => "elementwise_add",
            PrimitiveOp::ElementwiseMul => "elementwise_mul",
            PrimitiveOp::Scale { .. } => "scale",
            PrimitiveOp::WeightedSum => "weighted_sum",
            PrimitiveOp::Concat { .. } => "concat",
            PrimitiveOp::Reshape { .. } => "reshape",
            PrimitiveOp::Softmax => "softmax",
            PrimitiveOp::Sigmoid => "sigmoid",
            PrimitiveOp::Tanh => "tanh",
            PrimitiveOp::LeakyRelu { .. } => "leaky_relu",
            PrimitiveOp::Mean { .. } => "mean",
            PrimitiveOp::CrossEntropy => "cross_entropy",
        }
    }

    /// Shape rule: total on valid inputs, rejects mismatches.
    pub fn infer_shape(&self, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        let arity_err = |want: &str| Err(format!("expects {want} inputs, got {}", ins.len()));
        match self {
            PrimitiveOp::MatMul => {
                if ins.len() != 2 {
                    return arity_err("2");
                }
                let (a, b) = (ins[0], ins[1]);
                match (a.len(), b.len()) {
                    (2, 2) => {
                        if a[1] != b[0] {
                            return Err(format!("inner dims differ: {a:?} x {b:?}"));
                        }
                        Ok(vec![a[0], b[1]])
                    }
                    (3, 3) => {
                        if a[0] != b[0] || a[2] != b[1] {
                            return Err(format!("batched dims differ: {a:?} x {b:?}"));
                        }
                        Ok(vec![a[0], a[1], b[2]])
                    }
                    _ => Err(format!("rank must be 2x2 or 3x3, got {a:?} x {b:?}")),
                }
            }
            PrimitiveOp::Affine => {
                if ins.len() != 3 {
                    return arity_err("3 (x, W, b)");
                }
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                if w.len() != 2 || b.len() != 1 || b[0] != w[1] {
                    return Err(format!("W/b malformed: W {w:?}, b {b:?}"));
                }
                match x.len() {
                    1 if x[0] == w[0] => Ok(vec![w[1]]),
                    2 if x[1] == w[0] => Ok(vec![x[0], w[1]]),
                    _ => Err(format!("x {x:?} incompatible with W {w:?}")),
                }
            }
            PrimitiveOp::Conv2d {
                stride,
                padding,
                dilation,
                groups,
            } => {
                if ins.len() != 2 && ins.len() != 3 {
                    return arity_err("2 or 3 (x, w[, bias])");
                }
                let (x, w) = (ins[0], ins[1]);
                if x.len() != 4 || w.len() != 4 {
                    return Err(format!("x and w must be rank-4, got {x:?}, {w:?}"));
                }
                if w[2] != w[3] {
                    return Err(format!("kernel must be square, got {w:?}"));
                }
                let (cin, cout, k) = (x[1], w[0], w[2]);
                if cout % groups != 0 || cin % groups != 0 || w[1] * groups != cin {
                    return Err(format!(
                        "channel mismatch: x {x:?}, w {w:?}, groups {groups}"
                    ));
                }
                if ins.len() == 3 && (ins[2].len() != 1 || ins[2][0] != cout) {
                    return Err(format!("bias must be [{cout}], got {:?}", ins[2]));
                }
                let ho = kernels::conv_out_dim(x[2], k, *stride, *padding, *dilation)
                    .ok_or_else(|| format!("kernel extent exceeds padded height {}", x[2]))?;
                let wo = kernels::conv_out_dim(x[3], k, *stride, *padding, *dilation)
                    .ok_or_else(|| format!("kernel extent exceeds padded width {}", x[3]))?;
                Ok(vec![x[0], cout, ho, wo])
            }
            PrimitiveOp::AvgPool2d {
                kernel,
                stride,
                padding,
            }
            | PrimitiveOp::MaxPool2d {
                kernel,
                stride,
                padding,
            } => {
                if ins.len() != 1 {
                    return arity_err("1");
                }
                let x = ins[0];
                if x.len() != 4 {
                    return Err(format!("input must be rank-4, got {x:?}"));
                }
                if padding >= kernel {
                    return Err(format!("padding {padding} must be < kernel {kernel}"));
                }
                let ho = kernels::conv_out_dim(x[2], *kernel, *stride, *padding, 1)
                    .ok_or_else(|| format!("window exceeds padded height {}", x[2]))?;
                let wo = kernels::conv_out_dim(x[3], *kernel, *stride, *padding, 1)
                    .ok_or_else(|| format!("window exceeds padded width {}", x[3]))?;
                Ok(vec![x[0], x[1], ho, wo])
            }
            PrimitiveOp::ElementwiseAdd | PrimitiveOp::ElementwiseMul => {
                if ins.len() != 2 {
                    return arity_err("2");
                }
                if ins[0] != ins[1] {
                    return Err(format!("shapes differ: {:?} vs {:?}", ins[0], ins[1]));
                }
                Ok(ins[0].to_vec())
            }
            PrimitiveOp::Scale { .. } => {
                if ins.len() != 1 {
                    return arity_err("1");
                }
                Ok(ins[0].to_vec())
            }
            PrimitiveOp::WeightedSum => {
                if ins.len() < 2 {
                    return arity_err("weights plus at least one operand");
                }
                let w = ins[0];
                if w.len() != 1 || w[0] != ins.len() - 1 {
                    return Err(format!(
                        "weights must be [{}], got {w:?}",
                        ins.len() - 1
                    ));
                }
                for x in &ins[2..] {
                    if *x != ins[1] {
                        return Err(format!("operand shapes differ: {:?} vs {:?}", ins[1], x));
                    }
                }
                Ok(ins[1].to_vec())
            }
            PrimitiveOp::Concat { axis } => {
                if ins.is_empty() {
                    return arity_err("at least 1");
                }
                let first = ins[0];
                if *axis >= first.len() {
                    return Err(format!("axis {axis} out of range for {first:?}"));
                }
                let mut total = 0;
                for x in ins {
                    if x.len() != first.len() {
                        return Err(format!("rank mismatch: {first:?} vs {x:?}"));
                    }
                    for (d, (&a, &b)) in first.iter().zip(x.iter()).enumerate() {
                        if d != *axis && a != b {
                            return Err(format!("non-axis dims differ: {first:?} vs {x:?}"));
                        }
                    }
                    total += x[*axis];
                }
                let mut out = first.to_vec();
                out[*axis] = total;
                Ok(out)
            }
            PrimitiveOp::Reshape { dims } => {
                if ins.len() != 1 {
                    return arity_err("1");
                }
                let numel: usize = ins[0].iter().product();
                let mut known = 1usize;
                let mut infer = None;
                for (i, &d) in dims.iter().enumerate() {
                    if d == -1 {
                        if infer.is_some() {
                            return Err("at most one -1 dim".into());
                        }
                        infer = Some(i);
                    } else if d <= 0 {
                        return Err(format!("bad dim {d}"));
                    } else {
                        known *= d as usize;
                    }
                }
                let mut out: Vec<usize> = dims.iter().map(|&d| d.max(1) as usize).collect();
                if let Some(i) = infer {
                    if known == 0 || !numel.is_multiple_of(known) {
                        return Err(format!("cannot infer dim: {numel} vs {dims:?}"));
                    }
                    out[i] = numel / known;
                } else if known != numel {
                    return Err(format!("element count changes: {numel} -> {known}"));
                }
                Ok(out)
            }
            PrimitiveOp::Softmax
            | PrimitiveOp::Sigmoid
            | PrimitiveOp::Tanh
            | PrimitiveOp::LeakyRelu { .. } => {
                if ins.len() != 1 {
                    return arity_err("1");
                }
                Ok(ins[0].to_vec())
            }
            PrimitiveOp::Mean { axes } => {
                if ins.len() != 1 {
                    return arity_err("1");
                }
                let x = ins[0];
                let mut seen = vec![false; x.len()];
                for &a in axes {
                    if a >= x.len() || seen[a] {
                        return Err(format!("bad reduction axes {axes:?} for {x:?}"));
                    }
                    seen[a] = true;
                }
                let out: Vec<usize> = x
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !seen[*i])
                    .map(|(_, &d)| d)
                    .collect();
                Ok(if out.is_empty() { vec![1] } else { out })
            }
            PrimitiveOp::CrossEntropy => {
                if ins.len() != 2 {
                    return arity_err("2 (logits, labels)");
                }
                let (l, y) = (ins[0], ins[1]);
                if l.len() != 2 || y.len() != 1 || y[0] != l[0] {
                    return Err(format!("logits {l:?} vs labels {y:?}"));
                }
                Ok(vec![1])
            }
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Slot {
    Input { name: String },
    Param { param: ParamId },
    Node { op: PrimitiveOp, inputs: Vec<ValueId> },
}

/// Append-only program over inputs, parameters and primitive applications.
/// Topological order holds by construction: a node can only reference
/// already-created slots.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    slots: Vec<Slot>,
    inputs: BTreeMap<String, ValueId>,
    params: BTreeMap<ParamId, ValueId>,
    outputs: BTreeMap<String, ValueId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str) -> ValueId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.slots.len();
        self.slots.push(Slot::Input { name: name.to_string() });
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, pid: ParamId) -> ValueId {
        if let Some(&id) = self.params.get(&pid) {
            return id;
        }
        let id = self.slots.len();
        self.slots.push(Slot::Param { param: pid });
        self.params.insert(pid, id);
        id
    }

    pub fn apply(&mut self, op: PrimitiveOp, inputs: &[ValueId]) -> ValueId {
        for &i in inputs {
            assert!(i < self.slots.len(), "dangling value id {i}");
        }
        let id = self.slots.len();
        self.slots.push(Slot::Node {
            op,
            inputs: inputs.to_vec(),
        });
        id
    }

    pub fn mark_output(&mut self, name: &str, v: ValueId) {
        self.outputs.insert(name.to_string(), v);
    }

    pub fn output_id(&self, name: &str) -> Option<ValueId> {
        self.outputs.get(name).copied()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &String> {
        self.outputs.keys()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &String> {
        self.inputs.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn describe(&self, id: ValueId) -> String {
        match &self.slots[id] {
            Slot::Input { name } => format!("input `{name}`"),
            Slot::Param { param } => format!("param #{param}"),
            Slot::Node { op, .. } => format!("node#{id} {}", op.name()),
        }
    }

    // builder sugar

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.apply(PrimitiveOp::ElementwiseAdd, &[a, b])
    }
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.apply(PrimitiveOp::ElementwiseMul, &[a, b])
    }
    pub fn scale(&mut self, x: ValueId, factor: f32) -> ValueId {
        self.apply(PrimitiveOp::Scale { factor }, &[x])
    }
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.apply(PrimitiveOp::MatMul, &[a, b])
    }
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        self.apply(PrimitiveOp::Affine, &[x, w, b])
    }
    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.apply(PrimitiveOp::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        self.apply(PrimitiveOp::Tanh, &[x])
    }
    pub fn leaky_relu(&mut self, x: ValueId, slope: f32) -> ValueId {
        self.apply(PrimitiveOp::LeakyRelu { slope }, &[x])
    }
    pub fn softmax(&mut self, x: ValueId) -> ValueId {
        self.apply(PrimitiveOp::Softmax, &[x])
    }
    pub fn concat(&mut self, axis: usize, xs: &[ValueId]) -> ValueId {
        self.apply(PrimitiveOp::Concat { axis }, xs)
    }
    pub fn reshape(&mut self, x: ValueId, dims: &[i64]) -> ValueId {
        self.apply(PrimitiveOp::Reshape { dims: dims.to_vec() }, &[x])
    }
    pub fn mean(&mut self, x: ValueId, axes: &[usize]) -> ValueId {
        self.apply(PrimitiveOp::Mean { axes: axes.to_vec() }, &[x])
    }
    pub fn weighted_sum(&mut self, weights: ValueId, xs: &[ValueId]) -> ValueId {
        let mut ins = vec![weights];
        ins.extend_from_slice(xs);
        self.apply(PrimitiveOp::WeightedSum, &ins)
    }
    pub fn cross_entropy(&mut self, logits: ValueId, labels: ValueId) -> ValueId {
        self.apply(PrimitiveOp::CrossEntropy, &[logits, labels])
    }

    /// Compute every slot's shape from bound input shapes, rejecting any
    /// mismatch before execution. Errors name the offending node.
    pub fn check_shapes(
        &self,
        store: &ParamStore,
        input_shapes: &BTreeMap<String, Vec<usize>>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.slots.len());
        for (id, slot) in self.slots.iter().enumerate() {
            let shape = match slot {
                Slot::Input { name } => input_shapes
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Slot::Param { param } => store.tensor(*param).shape().to_vec(),
                Slot::Node { op, inputs } => {
                    let in_shapes: Vec<&[usize]> =
                        inputs.iter().map(|&i| shapes[i].as_slice()).collect();
                    op.infer_shape(&in_shapes).map_err(|detail| Error::ShapeMismatch {
                        context: self.describe(id),
                        detail,
                    })?
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

// ── Forward execution ────────────────────────────────────────────────

/// Input bindings for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, t: Tensor) -> Self {
        self.map.insert(name.to_string(), t);
        self
    }

    pub fn bind(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.map.insert(name.to_string(), t);
        self
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// One materialized forward pass. Consumed by `backward`; a fresh pass is
/// required for every backward (one backward per forward).
#[derive(Debug)]
pub struct ForwardPass<'t> {
    tape: &'t Tape,
    values: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    pool_argmax: BTreeMap<ValueId, Vec<usize>>,
    ce_labels: BTreeMap<ValueId, Vec<usize>>,
    /// Smallest max-vs-runner-up gap over all max-pool windows this pass.
    pub pool_tie_gap: f64,
}

impl<'t> ForwardPass<'t> {
    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.values[id]
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn output(&self, name: &str) -> Result<Tensor> {
        let id = self
            .tape
            .output_id(name)
            .ok_or_else(|| Error::msg(format!("no output named `{name}`")))?;
        Tensor::from_f64(self.shapes[id].clone(), &self.values[id])
    }

    /// Every named output as a 32-bit tensor.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.tape
            .outputs
            .iter()
            .map(|(name, &id)| {
                (
                    name.clone(),
                    Tensor::from_f64(self.shapes[id].clone(), &self.values[id]).expect("shape"),
                )
            })
            .collect()
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let id = self
            .tape
            .output_id(name)
            .ok_or_else(|| Error::msg(format!("no output named `{name}`")))?;
        if self.values[id].len() != 1 {
            return Err(Error::NonScalarLoss(self.shapes[id].clone()));
        }
        Ok(self.values[id][0])
    }
}

/// Run the tape over bound inputs: shape-check everything first, then
/// materialize every node in topological order. Deterministic for fixed
/// inputs and parameters.
pub fn forward<'t>(tape: &'t Tape, store: &ParamStore, inputs: &Bindings) -> Result<ForwardPass<'t>> {
    let shapes = tape.check_shapes(store, &inputs.shapes())?;
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(tape.slots.len());
    let mut pool_argmax = BTreeMap::new();
    let mut ce_labels = BTreeMap::new();
    let mut pool_tie_gap = f64::INFINITY;

    for (id, slot) in tape.slots.iter().enumerate() {
        let value = match slot {
            Slot::Input { name } => inputs.get(name).expect("checked").to_f64(),
            Slot::Param { param } => store.tensor(*param).to_f64(),
            Slot::Node { op, inputs: ins } => {
                let get = |i: usize| -> &[f64] { &values[ins[i]] };
                let shape_of = |i: usize| -> &[usize] { &shapes[ins[i]] };
                let out_shape = &shapes[id];
                let out_numel: usize = out_shape.iter().product();
                match op {
                    PrimitiveOp::MatMul => {
                        let (a, b) = (shape_of(0), shape_of(1));
                        let mut out = vec![0.0; out_numel];
                        if a.len() == 2 {
                            kernels::matmul(get(0), get(1), a[0], a[1], b[1], &mut out);
                        } else {
                            let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
                            for i in 0..bs {
                                kernels::matmul(
                                    &get(0)[i * m * k..(i + 1) * m * k],
                                    &get(1)[i * k * n..(i + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                    &mut out[i * m * n..(i + 1) * m * n],
                                );
                            }
                        }
                        out
                    }
                    PrimitiveOp::Affine => {
                        let x = get(0);
                        let (w, b) = (get(1), get(2));
                        let (win, wout) = (shape_of(1)[0], shape_of(1)[1]);
                        let rows = x.len() / win;
                        let mut out = vec![0.0; rows * wout];
                        kernels::matmul(x, w, rows, win, wout, &mut out);
                        for r in 0..rows {
                            for j in 0..wout {
                                out[r * wout + j] += b[j];
                            }
                        }
                        out
                    }
                    PrimitiveOp::Conv2d {
                        stride,
                        padding,
                        dilation,
                        groups,
                    } => {
                        let (x, w) = (shape_of(0), shape_of(1));
                        let spec = Conv2dSpec {
                            batch: x[0],
                            in_channels: x[1],
                            out_channels: w[0],
                            height: x[2],
                            width: x[3],
                            kernel: w[2],
                            stride: *stride,
                            padding: *padding,
                            dilation: *dilation,
                            groups: *groups,
                        };
                        let bias = if ins.len() == 3 { Some(get(2)) } else { None };
                        let mut out = vec![0.0; out_numel];
                        kernels::conv2d(get(0), get(1), bias, &spec, &mut out);
                        out
                    }
                    PrimitiveOp::AvgPool2d {
                        kernel,
                        stride,
                        padding,
                    } => {
                        let x = shape_of(0);
                        let spec = Pool2dSpec {
                            batch: x[0],
                            channels: x[1],
                            height: x[2],
                            width: x[3],
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                        };
                        let mut out = vec![0.0; out_numel];
                        kernels::avg_pool2d(get(0), &spec, &mut out);
                        out
                    }
                    PrimitiveOp::MaxPool2d {
                        kernel,
                        stride,
                        padding,
                    } => {
                        let x = shape_of(0);
                        let spec = Pool2dSpec {
                            batch: x[0],
                            channels: x[1],
                            height: x[2],
                            width: x[3],
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                        };
                        let mut out = vec![0.0; out_numel];
                        let mut argmax = vec![0usize; out_numel];
                        kernels::max_pool2d(get(0), &spec, &mut out, &mut argmax);
                        pool_tie_gap = pool_tie_gap.min(kernels::max_pool2d_tie_gap(get(0), &spec));
                        pool_argmax.insert(id, argmax);
                        out
                    }
                    PrimitiveOp::ElementwiseAdd => {
                        get(0).iter().zip(get(1)).map(|(a, b)| a + b).collect()
                    }
                    PrimitiveOp::ElementwiseMul => {
                        get(0).iter().zip(get(1)).map(|(a, b)| a * b).collect()
                    }
                    PrimitiveOp::Scale { factor } => {
                        let f = *factor as f64;
                        get(0).iter().map(|v| v * f).collect()
                    }
                    PrimitiveOp::WeightedSum => {
                        let w = get(0);
                        let mut out = vec![0.0; out_numel];
                        // fixed operand order keeps the summation deterministic
                        for (i, &wi) in w.iter().enumerate() {
                            for (o, &x) in out.iter_mut().zip(values[ins[i + 1]].iter()) {
                                *o += wi * x;
                            }
                        }
                        out
                    }
                    PrimitiveOp::Concat { axis } => {
                        let outer: usize = shapes[id][..*axis].iter().product();
                        let inner: usize = shapes[id][*axis + 1..].iter().product();
                        let mut out = vec![0.0; out_numel];
                        let mut offset = 0;
                        for &src in ins.iter() {
                            let alen = shapes[src][*axis];
                            let block = alen * inner;
                            for o in 0..outer {
                                let dst_base = o * shapes[id][*axis] * inner + offset * inner;
                                let src_base = o * block;
                                out[dst_base..dst_base + block]
                                    .copy_from_slice(&values[src][src_base..src_base + block]);
                            }
                            offset += alen;
                        }
                        out
                    }
                    PrimitiveOp::Reshape { .. } => get(0).to_vec(),
                    PrimitiveOp::Softmax => {
                        let cols = *shapes[id].last().unwrap();
                        let rows = out_numel / cols;
                        let mut out = vec![0.0; out_numel];
                        kernels::softmax_last_axis(get(0), rows, cols, &mut out);
                        out
                    }
                    PrimitiveOp::Sigmoid => {
                        get(0).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
                    }
                    PrimitiveOp::Tanh => get(0).iter().map(|v| v.tanh()).collect(),
                    PrimitiveOp::LeakyRelu { slope } => {
                        let s = *slope as f64;
                        get(0)
                            .iter()
                            .map(|&v| if v > 0.0 { v } else { s * v })
                            .collect()
                    }
                    PrimitiveOp::Mean { axes } => {
                        mean_forward(get(0), shape_of(0), axes, out_numel)
                    }
                    PrimitiveOp::CrossEntropy => {
                        let l = shape_of(0);
                        let labels = parse_labels(get(1), l[1]).map_err(|detail| {
                            Error::InvalidData(format!("{}: {detail}", tape.describe(id)))
                        })?;
                        let loss = kernels::cross_entropy(get(0), &labels, l[0], l[1]);
                        ce_labels.insert(id, labels);
                        vec![loss]
                    }
                }
            }
        };
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: tape.describe(id),
                index,
            });
        }
        values.push(value);
    }

    Ok(ForwardPass {
        tape,
        values,
        shapes,
        pool_argmax,
        ce_labels,
        pool_tie_gap,
    })
}

fn parse_labels(raw: &[f64], classes: usize) -> std::result::Result<Vec<usize>, String> {
    raw.iter()
        .map(|&v| {
            let r = v.round();
            if (v - r).abs() > 1e-6 || r < 0.0 || r as usize >= classes {
                Err(format!("label {v} is not a class index < {classes}"))
            } else {
                Ok(r as usize)
            }
        })
        .collect()
}

fn mean_forward(x: &[f64], shape: &[usize], axes: &[usize], out_numel: usize) -> Vec<f64> {
    let reduced: usize = axes.iter().map(|&a| shape[a]).product();
    let mut out = vec![0.0; out_numel];
    for (flat, &v) in x.iter().enumerate() {
        out[mean_out_index(flat, shape, axes)] += v;
    }
    let norm = 1.0 / reduced as f64;
    for o in out.iter_mut() {
        *o *= norm;
    }
    out
}

/// Flat output index for `mean` (input flat index with reduced axes dropped).
fn mean_out_index(flat: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = rem % shape[i];
        rem /= shape[i];
    }
    let mut out = 0usize;
    for i in 0..shape.len() {
        if !axes.contains(&i) {
            out = out * shape[i] + coords[i];
        }
    }
    out
}

// ── Backward ─────────────────────────────────────────────────────────

/// Gradient of the loss w.r.t. every parameter. Leaves the loss never
/// reached report zero.
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradientMap {
    pub fn get(&self, pid: ParamId) -> Tensor {
        match &self.grads[pid] {
            Some(g) => Tensor::from_f64(self.shapes[pid].clone(), g).expect("shape"),
            None => Tensor::zeros(&self.shapes[pid]),
        }
    }

    pub fn get_f64(&self, pid: ParamId) -> std::borrow::Cow<'_, [f64]> {
        match &self.grads[pid] {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(vec![0.0; self.shapes[pid].iter().product()]),
        }
    }

    pub fn reached(&self, pid: ParamId) -> bool {
        self.grads[pid].is_some()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse sweep from a scalar output. Consumes the pass: one backward per
/// forward. Gradients accumulate additively where fan-out meets.
pub fn backward(pass: ForwardPass<'_>, store: &ParamStore, loss: &str) -> Result<GradientMap> {
    let tape = pass.tape;
    let loss_id = tape
        .output_id(loss)
        .ok_or_else(|| Error::msg(format!("no output named `{loss}`")))?;
    if pass.values[loss_id].len() != 1 {
        return Err(Error::NonScalarLoss(pass.shapes[loss_id].clone()));
    }

    let mut adj: Vec<Option<Vec<f64>>> = vec![None; tape.slots.len()];
    adj[loss_id] = Some(vec![1.0]);

    for id in (0..tape.slots.len()).rev() {
        let Slot::Node { op, inputs: ins } = &tape.slots[id] else {
            continue;
        };
        let Some(dy) = adj[id].take() else { continue };

        let mut contribs: Vec<(ValueId, Vec<f64>)> = Vec::with_capacity(ins.len());
        {
            let val = |i: usize| -> &[f64] { &pass.values[ins[i]] };
            let shape_of = |i: usize| -> &[usize] { &pass.shapes[ins[i]] };
            match op {
                PrimitiveOp::MatMul => {
                    let (a, b) = (shape_of(0), shape_of(1));
                    if a.len() == 2 {
                        let (m, k, n) = (a[0], a[1], b[1]);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_a_bt(&dy, val(1), m, n, k, &mut da);
                        kernels::matmul_at_b(val(0), &dy, m, k, n, &mut db);
                        contribs.push((ins[0], da));
                        contribs.push((ins[1], db));
                    } else {
                        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
                        let mut da = vec![0.0; bs * m * k];
                        let mut db = vec![0.0; bs * k * n];
                        for i in 0..bs {
                            kernels::matmul_a_bt(
                                &dy[i * m * n..(i + 1) * m * n],
                                &val(1)[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                            kernels::matmul_at_b(
                                &val(0)[i * m * k..(i + 1) * m * k],
                                &dy[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                        contribs.push((ins[0], da));
                        contribs.push((ins[1], db));
                    }
                }
                PrimitiveOp::Affine => {
                    let (win, wout) = (shape_of(1)[0], shape_of(1)[1]);
                    let rows = val(0).len() / win;
                    let mut dx = vec![0.0; rows * win];
                    let mut dw = vec![0.0; win * wout];
                    let mut db = vec![0.0; wout];
                    kernels::matmul_a_bt(&dy, val(1), rows, wout, win, &mut dx);
                    kernels::matmul_at_b(val(0), &dy, rows, win, wout, &mut dw);
                    for r in 0..rows {
                        for j in 0..wout {
                            db[j] += dy[r * wout + j];
                        }
                    }
                    contribs.push((ins[0], dx));
                    contribs.push((ins[1], dw));
                    contribs.push((ins[2], db));
                }
                PrimitiveOp::Conv2d {
                    stride,
                    padding,
                    dilation,
                    groups,
                } => {
                    let (x, w) = (shape_of(0), shape_of(1));
                    let spec = Conv2dSpec {
                        batch: x[0],
                        in_channels: x[1],
                        out_channels: w[0],
                        height: x[2],
                        width: x[3],
                        kernel: w[2],
                        stride: *stride,
                        padding: *padding,
                        dilation: *dilation,
                        groups: *groups,
                    };
                    let mut dx = vec![0.0; val(0).len()];
                    let mut dw = vec![0.0; val(1).len()];
                    if ins.len() == 3 {
                        let mut db = vec![0.0; val(2).len()];
                        kernels::conv2d_backward(
                            val(0),
                            val(1),
                            &dy,
                            &spec,
                            &mut dx,
                            &mut dw,
                            Some(&mut db),
                        );
                        contribs.push((ins[2], db));
                    } else {
                        kernels::conv2d_backward(val(0), val(1), &dy, &spec, &mut dx, &mut dw, None);
                    }
                    contribs.push((ins[0], dx));
                    contribs.push((ins[1], dw));
                }
                PrimitiveOp::AvgPool2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    let x = shape_of(0);
                    let spec = Pool2dSpec {
                        batch: x[0],
                        channels: x[1],
                        height: x[2],
                        width: x[3],
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    };
                    let mut dx = vec![0.0; val(0).len()];
                    kernels::avg_pool2d_backward(&dy, &spec, &mut dx);
                    contribs.push((ins[0], dx));
                }
                PrimitiveOp::MaxPool2d { .. } => {
                    let argmax = pass.pool_argmax.get(&id).expect("forward recorded argmax");
                    let mut dx = vec![0.0; val(0).len()];
                    kernels::max_pool2d_backward(&dy, argmax, &mut dx);
                    contribs.push((ins[0], dx));
                }
                PrimitiveOp::ElementwiseAdd => {
                    contribs.push((ins[0], dy.clone()));
                    contribs.push((ins[1], dy.clone()));
                }
                PrimitiveOp::ElementwiseMul => {
                    let da: Vec<f64> = dy.iter().zip(val(1)).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = dy.iter().zip(val(0)).map(|(g, a)| g * a).collect();
                    contribs.push((ins[0], da));
                    contribs.push((ins[1], db));
                }
                PrimitiveOp::Scale { factor } => {
                    let f = *factor as f64;
                    contribs.push((ins[0], dy.iter().map(|g| g * f).collect()));
                }
                PrimitiveOp::WeightedSum => {
                    let w = val(0);
                    let mut dw = vec![0.0; w.len()];
                    for i in 0..w.len() {
                        let x = &pass.values[ins[i + 1]];
                        let mut acc = 0.0;
                        for (g, &xv) in dy.iter().zip(x.iter()) {
                            acc += g * xv;
                        }
                        dw[i] = acc;
                        contribs.push((ins[i + 1], dy.iter().map(|g| g * w[i]).collect()));
                    }
                    contribs.push((ins[0], dw));
                }
                PrimitiveOp::Concat { axis } => {
                    let out_shape = &pass.shapes[id];
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let mut offset = 0;
                    for &src in ins.iter() {
                        let alen = pass.shapes[src][*axis];
                        let block = alen * inner;
                        let mut dsrc = vec![0.0; pass.values[src].len()];
                        for o in 0..outer {
                            let dy_base = o * out_shape[*axis] * inner + offset * inner;
                            dsrc[o * block..(o + 1) * block]
                                .copy_from_slice(&dy[dy_base..dy_base + block]);
                        }
                        contribs.push((src, dsrc));
                        offset += alen;
                    }
                }
                PrimitiveOp::Reshape { .. } => {
                    contribs.push((ins[0], dy.clone()));
                }
                PrimitiveOp::Softmax => {
                    let y = &pass.values[id];
                    let cols = *pass.shapes[id].last().unwrap();
                    let rows = y.len() / cols;
                    let mut dx = vec![0.0; y.len()];
                    kernels::softmax_backward(y, &dy, rows, cols, &mut dx);
                    contribs.push((ins[0], dx));
                }
                PrimitiveOp::Sigmoid => {
                    let y = &pass.values[id];
                    contribs.push((
                        ins[0],
                        dy.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect(),
                    ));
                }
                PrimitiveOp::Tanh => {
                    let y = &pass.values[id];
                    contribs.push((
                        ins[0],
                        dy.iter().zip(y).map(|(g, &t)| g * (1.0 - t * t)).collect(),
                    ));
                }
                PrimitiveOp::LeakyRelu { slope } => {
                    let s = *slope as f64;
                    contribs.push((
                        ins[0],
                        dy.iter()
                            .zip(val(0))
                            .map(|(g, &x)| if x > 0.0 { *g } else { g * s })
                            .collect(),
                    ));
                }
                PrimitiveOp::Mean { axes } => {
                    let shape = shape_of(0);
                    let reduced: usize = axes.iter().map(|&a| shape[a]).product();
                    let norm = 1.0 / reduced as f64;
                    let mut dx = vec![0.0; val(0).len()];
                    for (flat, d) in dx.iter_mut().enumerate() {
                        *d = dy[mean_out_index(flat, shape, axes)] * norm;
                    }
                    contribs.push((ins[0], dx));
                }
                PrimitiveOp::CrossEntropy => {
                    let l = shape_of(0);
                    let labels = pass.ce_labels.get(&id).expect("forward recorded labels");
                    let mut dx = vec![0.0; val(0).len()];
                    kernels::cross_entropy_backward(val(0), labels, l[0], l[1], dy[0], &mut dx);
                    contribs.push((ins[0], dx));
                    // labels are indices; no gradient flows to them
                }
            }
        }

        for (target, grad) in contribs {
            match &mut adj[target] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grad.iter()) {
                        *a += g;
                    }
                }
                None => adj[target] = Some(grad),
            }
        }
    }

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    let mut shapes: Vec<Vec<usize>> = store
        .iter()
        .map(|(_, e)| e.tensor.shape().to_vec())
        .collect();
    for (&pid, &slot_id) in tape.params.iter() {
        if store.tensor(pid).requires_grad {
            if let Some(g) = adj[slot_id].take() {
                grads[pid] = Some(g);
            }
        }
        shapes[pid] = store.tensor(pid).shape().to_vec();
    }
    Ok(GradientMap { grads, shapes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_input(t: &mut Tape, name: &str) -> ValueId {
        t.input(name)
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            ParamGroup::Weight,
        );
        let b = store.add("b", Tensor::zeros(&[2]), ParamGroup::Weight);
        let x = tape.input("x");
        let (wv, bv) = (tape.param(w), tape.param(b));
        let y = tape.affine(x, wv, bv);
        tape.mark_output("y", y);

        let pass = forward(
            &tape,
            &store,
            &Bindings::new().with("x", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(pass.output("y").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let x = scalar_input(&mut tape, "x");
        let y = tape.softmax(x);
        tape.mark_output("y", y);
        let pass = forward(
            &tape,
            &store,
            &Bindings::new().with("x", Tensor::zeros(&[3])),
        )
        .unwrap();
        for v in pass.output("y").unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = mean(x*x) with x = [3] (single element): d/dx = 2x = 6
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::from_vec(vec![1], vec![3.0]).unwrap(),
            ParamGroup::Weight,
        );
        let xv = tape.param(x);
        let sq = tape.mul(xv, xv);
        let loss = tape.mean(sq, &[0]);
        tape.mark_output("loss", loss);

        let pass = forward(&tape, &store, &Bindings::new()).unwrap();
        let grads = backward(pass, &store, "loss").unwrap();
        assert!((grads.get(x).data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(2.0), ParamGroup::Weight);
        let unused = store.add("unused", Tensor::scalar(5.0), ParamGroup::Weight);
        let uv = tape.param(used);
        let _ = tape.param(unused); // on the tape but not on the loss path
        let loss = tape.mul(uv, uv);
        tape.mark_output("loss", loss);

        let pass = forward(&tape, &store, &Bindings::new()).unwrap();
        let grads = backward(pass, &store, "loss").unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).data(), &[0.0]);
        assert!((grads.get(used).data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let a = tape.input("a");
        let b = tape.input("b");
        let c = tape.add(a, b);
        tape.mark_output("c", c);
        let err = forward(
            &tape,
            &store,
            &Bindings::new()
                .with("a", Tensor::zeros(&[2]))
                .with("b", Tensor::zeros(&[3])),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("elementwise_add"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[2]), ParamGroup::Weight);
        let pv = tape.param(p);
        let y = tape.scale(pv, 2.0);
        tape.mark_output("y", y);
        let pass = forward(&tape, &store, &Bindings::new()).unwrap();
        assert!(matches!(
            backward(pass, &store, "y"),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gradient_accumulation_matches_separate_passes() {
        // loss12 = mean(x*x) + mean(scale(x,3)) vs separate backwards summed
        let build = |combined: bool| -> (Tape, ParamStore, ParamId) {
            let mut tape = Tape::new();
            let mut store = ParamStore::new();
            let x = store.add(
                "x",
                Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap(),
                ParamGroup::Weight,
            );
            let xv = tape.param(x);
            let sq = tape.mul(xv, xv);
            let l1 = tape.mean(sq, &[0]);
            let sc = tape.scale(xv, 3.0);
            let l2 = tape.mean(sc, &[0]);
            if combined {
                let l = tape.add(l1, l2);
                tape.mark_output("loss", l);
            } else {
                tape.mark_output("l1", l1);
                tape.mark_output("l2", l2);
            }
            (tape, store, x)
        };

        let (tape, store, x) = build(true);
        let pass = forward(&tape, &store, &Bindings::new()).unwrap();
        let combined = backward(pass, &store, "loss").unwrap().get(x);

        let (tape2, store2, x2) = build(false);
        let p1 = forward(&tape2, &store2, &Bindings::new()).unwrap();
        let g1 = backward(p1, &store2, "l1").unwrap().get(x2);
        let p2 = forward(&tape2, &store2, &Bindings::new()).unwrap();
        let g2 = backward(p2, &store2, "l2").unwrap().get(x2);

        for i in 0..2 {
            let sum = g1.data()[i] + g2.data()[i];
            assert!((combined.data()[i] - sum).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(99)
        };
        let w = store.add(
            "w",
            Tensor::init_fan_in(&mut rng, &[4, 4], 4),
            ParamGroup::Weight,
        );
        let b = store.add("b", Tensor::zeros(&[4]), ParamGroup::Weight);
        let x = tape.input("x");
        let (wv, bv) = (tape.param(w), tape.param(b));
        let h = tape.affine(x, wv, bv);
        let y = tape.tanh(h);
        tape.mark_output("y", y);

        let input = Tensor::uniform(&mut rng, &[3, 4], 1.0);
        let b1 = Bindings::new().with("x", input.clone());
        let b2 = Bindings::new().with("x", input);
        let y1 = forward(&tape, &store, &b1).unwrap().output("y").unwrap();
        let y2 = forward(&tape, &store, &b2).unwrap().output("y").unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let x = tape.input("x");
        let x2 = tape.mul(x, x);
        let x4 = tape.mul(x2, x2);
        let x8 = tape.mul(x4, x4);
        let x16 = tape.mul(x8, x8); // overflows the f64 buffers to inf
        tape.mark_output("z", x16);
        let err = forward(
            &tape,
            &store,
            &Bindings::new().with("x", Tensor::filled(&[2], 1.0e30)),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { context, index } => {
                assert!(context.contains("elementwise_mul"), "{context}");
                assert_eq!(index, 0);
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }
}
