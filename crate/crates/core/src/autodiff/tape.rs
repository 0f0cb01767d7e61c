//! Define-by-run tape. Every operation appends one node; backward walks
//! the nodes in exact reverse append order.

use std::cell::{Ref, RefCell};

use super::{AutodiffError, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Concat(Vec<usize>),
    LeakyRelu(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Log1p(usize),
    Clamp(usize, f64, f64),
    Softmax(usize, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    L2NormalizeRows(usize, Vec<f64>),
    Transpose(usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    SegmentSoftmax(usize, Vec<usize>, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Result of a backward pass: one optional adjoint per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of the right length if nothing flowed.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize), AutodiffError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(AutodiffError::Shape {
            op,
            left: shape.to_vec(),
            right: vec![],
        }),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(delta).for_each(|(d, x)| *d += x),
        None => *dst = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a differentiable leaf holding a copy of `tensor`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Constant,
            false,
        )
    }

    pub fn constant_data(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>, AutodiffError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![1], vec![value], Op::Constant, false)
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Back-propagates from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: nodes[loss.id].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &[f64] { &nodes[i].value };
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = rank2("matmul", &nodes[*a].shape).unwrap();
            let (_, ncol) = rank2("matmul", &nodes[*b].shape).unwrap();
            let av = val(*a);
            let bv = val(*b);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * ncol..(i + 1) * ncol];
                    for p in 0..k {
                        let brow = &bv[p * ncol..(p + 1) * ncol];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                add_into(&mut grads[*a], &da);
            }
            if needs(*b) {
                let mut db = vec![0.0; k * ncol];
                for i in 0..m {
                    let grow = &g[i * ncol..(i + 1) * ncol];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * ncol..(p + 1) * ncol];
                        drow.iter_mut().zip(grow).for_each(|(d, x)| *d += s * x);
                    }
                }
                add_into(&mut grads[*b], &db);
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g);
            }
            if needs(*b) {
                add_into(&mut grads[*b], g);
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g);
            }
            if needs(*b) {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[*b], &neg);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                add_into(&mut grads[*a], &d);
            }
            if needs(*b) {
                let d: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                add_into(&mut grads[*b], &d);
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                add_into(&mut grads[*a], &d);
            }
            if needs(*b) {
                let d: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                add_into(&mut grads[*b], &d);
            }
        }
        Op::AddRow(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g);
            }
            if needs(*b) {
                let n = nodes[*b].value.len();
                let mut d = vec![0.0; n];
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                add_into(&mut grads[*b], &d);
            }
        }
        Op::MulRows(a, s) => {
            let (av, sv) = (val(*a), val(*s));
            let cols = node.shape.last().copied().unwrap_or(1);
            if needs(*a) {
                let mut d = vec![0.0; g.len()];
                for (r, (drow, grow)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    drow.iter_mut().zip(grow).for_each(|(d, x)| *d = x * sv[r]);
                }
                add_into(&mut grads[*a], &d);
            }
            if needs(*s) {
                let d: Vec<f64> = g
                    .chunks(cols)
                    .zip(av.chunks(cols))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                add_into(&mut grads[*s], &d);
            }
        }
        Op::Scale(a, k) => {
            let d: Vec<f64> = g.iter().map(|x| x * k).collect();
            add_into(&mut grads[*a], &d);
        }
        Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[*a], g),
        Op::Concat(parts) => {
            let rows = node.shape.first().copied().unwrap_or(1);
            let total = node.shape.last().copied().unwrap_or(1);
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].shape.last().copied().unwrap_or(1);
                if needs(p) {
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + pc]);
                    }
                    add_into(&mut grads[p], &d);
                }
                offset += pc;
            }
        }
        Op::LeakyRelu(a, slope) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a))
                .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                .collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Relu(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a))
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Sigmoid(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(&node.value)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Exp(a) => {
            let d: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Log(a) => {
            let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Log1p(a) => {
            let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g / (1.0 + x)).collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Clamp(a, lo, hi) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(*a))
                .map(|(g, x)| if *x < *lo || *x > *hi { 0.0 } else { *g })
                .collect();
            add_into(&mut grads[*a], &d);
        }
        Op::Softmax(a, axis) => {
            let (r, c) = rank2("softmax", &node.shape).unwrap();
            let y = &node.value;
            let mut d = vec![0.0; y.len()];
            if *axis == 1 || node.shape.len() == 1 {
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
            } else {
                for j in 0..c {
                    let dot: f64 = (0..r).map(|i| y[i * c + j] * g[i * c + j]).sum();
                    for i in 0..r {
                        d[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
            }
            add_into(&mut grads[*a], &d);
        }
        Op::Sum(a) => {
            let d = vec![g[0]; nodes[*a].value.len()];
            add_into(&mut grads[*a], &d);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            let d = vec![g[0] / n as f64; n];
            add_into(&mut grads[*a], &d);
        }
        Op::SumAxis(a, axis) => {
            let (r, c) = rank2("sum_axis", &nodes[*a].shape).unwrap();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = if *axis == 1 { g[i] } else { g[j] };
                }
            }
            add_into(&mut grads[*a], &d);
        }
        Op::L2NormalizeRows(a, norms) => {
            let (r, c) = rank2("l2_normalize", &node.shape).unwrap();
            let y = &node.value;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let ys = &y[i * c..(i + 1) * c];
                let gs = &g[i * c..(i + 1) * c];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[i * c + j] = (gs[j] - ys[j] * dot) / norms[i];
                }
            }
            add_into(&mut grads[*a], &d);
        }
        Op::Transpose(a) => {
            let (r, c) = rank2("transpose", &node.shape).unwrap();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            add_into(&mut grads[*a], &d);
        }
        Op::GatherRows(a, idx) => {
            let c = node.shape.last().copied().unwrap_or(1);
            let mut d = vec![0.0; nodes[*a].value.len()];
            for (k, &src) in idx.iter().enumerate() {
                let grow = &g[k * c..(k + 1) * c];
                d[src * c..(src + 1) * c]
                    .iter_mut()
                    .zip(grow)
                    .for_each(|(d, x)| *d += x);
            }
            add_into(&mut grads[*a], &d);
        }
        Op::ScatterAddRows(a, idx) => {
            let c = node.shape.last().copied().unwrap_or(1);
            let mut d = Vec::with_capacity(idx.len() * c);
            for &dst in idx {
                d.extend_from_slice(&g[dst * c..(dst + 1) * c]);
            }
            add_into(&mut grads[*a], &d);
        }
        Op::SegmentSoftmax(a, seg, nseg) => {
            let y = &node.value;
            let mut dot = vec![0.0; *nseg];
            for (k, &s) in seg.iter().enumerate() {
                dot[s] += y[k] * g[k];
            }
            let d: Vec<f64> = seg
                .iter()
                .enumerate()
                .map(|(k, &s)| y[k] * (g[k] - dot[s]))
                .collect();
            add_into(&mut grads[*a], &d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Borrowed view of the forward value.
    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let needs = self.requires_grad();
        self.tape.push(shape, value, op, needs)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<Vec<usize>, AutodiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(AutodiffError::Shape { op, left: a, right: b });
        }
        Ok(a)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, AutodiffError> {
        let shape = self.same_shape(other, name)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(&nodes[other.id].value)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(shape, value, op, needs))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k) = rank2("matmul", &sa)?;
        let (k2, n) = rank2("matmul", &sb)?;
        if k != k2 || sa.len() != 2 || sb.len() != 2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = a[i * k + p];
                    if s == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    crow.iter_mut().zip(brow).for_each(|(c, b)| *c += s * b);
                }
            }
            c
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(vec![m, n], value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (_, c) = rank2("add_row", &shape)?;
        if bias.numel() != c {
            return Err(AutodiffError::Shape {
                op: "add_row",
                left: shape,
                right: bias.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[bias.id].value;
            nodes[self.id]
                .value
                .chunks(c)
                .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
                .collect()
        };
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self
            .tape
            .push(shape, value, Op::AddRow(self.id, bias.id), needs))
    }

    /// Scales row `i` of an `m × n` matrix by `s[i]`.
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("mul_rows", &shape)?;
        if s.numel() != r {
            return Err(AutodiffError::Shape {
                op: "mul_rows",
                left: shape,
                right: s.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let sv = &nodes[s.id].value;
            nodes[self.id]
                .value
                .chunks(c)
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |x| x * sv[i]))
                .collect()
        };
        let needs = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push(shape, value, Op::MulRows(self.id, s.id), needs))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        let tape = first.tape;
        let (rows, _) = rank2("concat", &first.shape())?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let (r, c) = rank2("concat", &s)?;
            if r != rows {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    left: first.shape(),
                    right: s,
                });
            }
            total += c;
        }
        let value = {
            let nodes = tape.nodes.borrow();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let c = nodes[p.id].shape.last().copied().unwrap_or(1);
                    out.extend_from_slice(&nodes[p.id].value[r * c..(r + 1) * c]);
                }
            }
            out
        };
        let needs = parts.iter().any(|p| p.requires_grad());
        let shape = if first.shape().len() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        Ok(tape.push(
            shape,
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| {
            if x > 0.0 {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// `ln(1 + x)`, accurate for small `x`.
    pub fn ln_1p(self) -> Var<'t> {
        self.unary(Op::Log1p(self.id), f64::ln_1p)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("softmax", &shape)?;
        let axis = if shape.len() == 1 { 1 } else { axis };
        if axis > 1 || (axis == 1 && c == 0) || (axis == 0 && r == 0) {
            return Err(AutodiffError::Shape {
                op: "softmax",
                left: shape,
                right: vec![axis],
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut y = vec![0.0; x.len()];
            if axis == 1 {
                for i in 0..r {
                    softmax_into(&x[i * c..(i + 1) * c], &mut y[i * c..(i + 1) * c]);
                }
            } else {
                let mut col = vec![0.0; r];
                let mut out = vec![0.0; r];
                for j in 0..c {
                    (0..r).for_each(|i| col[i] = x[i * c + j]);
                    softmax_into(&col, &mut out);
                    (0..r).for_each(|i| y[i * c + j] = out[i]);
                }
            }
            y
        };
        let needs = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::Softmax(self.id, axis), needs))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.data().iter().sum();
        let needs = self.requires_grad();
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), needs)
    }

    pub fn mean(self) -> Var<'t> {
        let (s, n) = {
            let d = self.data();
            (d.iter().sum::<f64>(), d.len())
        };
        let needs = self.requires_grad();
        self.tape
            .push(vec![1], vec![s / n as f64], Op::Mean(self.id), needs)
    }

    /// Sum of a rank-2 tensor along `axis`; axis 1 yields `[rows]`, axis 0 yields `[1, cols]`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("sum_axis", &shape)?;
        let (out_shape, value) = {
            let x = self.data();
            match axis {
                1 => (
                    vec![r],
                    x.chunks(c.max(1)).map(|row| row.iter().sum()).collect(),
                ),
                0 => {
                    let mut v = vec![0.0; c];
                    for row in x.chunks(c.max(1)) {
                        v.iter_mut().zip(row).for_each(|(v, x)| *v += x);
                    }
                    (vec![1, c], v)
                }
                _ => {
                    return Err(AutodiffError::Shape {
                        op: "sum_axis",
                        left: shape,
                        right: vec![axis],
                    })
                }
            }
        };
        let needs = self.requires_grad();
        Ok(self
            .tape
            .push(out_shape, value, Op::SumAxis(self.id, axis), needs))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("mean_axis", &shape)?;
        let n = if axis == 1 { c } else { r };
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Divides each row by its Euclidean norm (zero rows are left unchanged via a 1e-12 floor).
    pub fn l2_normalize_rows(self) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (_, c) = rank2("l2_normalize_rows", &shape)?;
        let (value, norms) = {
            let x = self.data();
            let mut norms = Vec::new();
            let mut y = Vec::with_capacity(x.len());
            for row in x.chunks(c.max(1)) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                norms.push(n);
                y.extend(row.iter().map(|v| v / n));
            }
            (y, norms)
        };
        let needs = self.requires_grad();
        Ok(self
            .tape
            .push(shape, value, Op::L2NormalizeRows(self.id, norms), needs))
    }

    pub fn transpose(self) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("transpose", &shape)?;
        let value = {
            let x = self.data();
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    y[j * r + i] = x[i * c + j];
                }
            }
            y
        };
        let needs = self.requires_grad();
        Ok(self
            .tape
            .push(vec![c, r], value, Op::Transpose(self.id), needs))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>, AutodiffError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                left: self.shape(),
                right: shape,
            });
        }
        let value = self.data().to_vec();
        let needs = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::Reshape(self.id), needs))
    }

    /// Copies the value into a fresh constant node; gradients stop here.
    pub fn detach(self) -> Var<'t> {
        let t = self.value();
        self.tape.constant(&t)
    }

    /// Selects rows `idx[k]` of a rank-2 tensor into a `len(idx) × n` matrix.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("gather_rows", &shape)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let value = {
            let x = self.data();
            let mut y = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                y.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
            y
        };
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![idx.len(), c],
            value,
            Op::GatherRows(self.id, idx.to_vec()),
            needs,
        ))
    }

    /// Sums row `k` into output row `idx[k]` of an `n_rows × n` result.
    pub fn scatter_add_rows(self, idx: &[usize], n_rows: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        let (r, c) = rank2("scatter_add_rows", &shape)?;
        if idx.len() != r {
            return Err(AutodiffError::Shape {
                op: "scatter_add_rows",
                left: shape,
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(AutodiffError::Index {
                op: "scatter_add_rows",
                index: bad,
                len: n_rows,
            });
        }
        let value = {
            let x = self.data();
            let mut y = vec![0.0; n_rows * c];
            for (k, &dst) in idx.iter().enumerate() {
                y[dst * c..(dst + 1) * c]
                    .iter_mut()
                    .zip(&x[k * c..(k + 1) * c])
                    .for_each(|(y, x)| *y += x);
            }
            y
        };
        let needs = self.requires_grad();
        Ok(self.tape.push(
            vec![n_rows, c],
            value,
            Op::ScatterAddRows(self.id, idx.to_vec()),
            needs,
        ))
    }

    /// Softmax of a flat vector within groups: entries sharing `segments[k]`
    /// are normalized together.
    pub fn segment_softmax(self, segments: &[usize], n_segments: usize) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        if segments.len() != self.numel() {
            return Err(AutodiffError::Shape {
                op: "segment_softmax",
                left: shape,
                right: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AutodiffError::Index {
                op: "segment_softmax",
                index: bad,
                len: n_segments,
            });
        }
        let value = {
            let x = self.data();
            let mut max = vec![f64::NEG_INFINITY; n_segments];
            for (k, &s) in segments.iter().enumerate() {
                max[s] = max[s].max(x[k]);
            }
            let mut y: Vec<f64> = segments
                .iter()
                .enumerate()
                .map(|(k, &s)| (x[k] - max[s]).exp())
                .collect();
            let mut den = vec![0.0; n_segments];
            for (k, &s) in segments.iter().enumerate() {
                den[s] += y[k];
            }
            for (k, &s) in segments.iter().enumerate() {
                y[k] /= den[s];
            }
            y
        };
        let needs = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::SegmentSoftmax(self.id, segments.to_vec(), n_segments),
            needs,
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], y: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (y, &x) in y.iter_mut().zip(x) {
        *y = (x - max).exp();
        s += *y;
    }
    y.iter_mut().for_each(|y| *y /= s);
}

/// Plain softmax over a slice, for callers outside the tape.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    if !x.is_empty() {
        softmax_into(x, &mut y);
    }
    y
}
