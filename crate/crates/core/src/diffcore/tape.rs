//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] consumes the
//! tape and walks the nodes in reverse, so each op is visited exactly once.
//! Nodes whose inputs carry no gradient are stored as constants and are
//! skipped by the backward pass.

use super::tensor::{matmul_kernel, Tensor};
use crate::error::{Error, Result};

/// Added under the square root of every L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Concat(Var, Var),
    L2Normalize(Var),
    RowDot(Var, Var),
    ClipNorm(Var, f64),
    Mean(Var),
    Sum(Var),
    SoftmaxXent(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` does not
    /// require gradients (frozen leaf or constant).
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn last_axis_rows(shape: &[usize]) -> (usize, usize) {
    let m = shape.last().copied().unwrap_or(1);
    let n = if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    (n, m)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Registers a leaf. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v` into a constant node, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.record("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.record("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.record("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.record("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a rank-1 bias of width `m` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, m) = last_axis_rows(self.shape(a));
        if self.shape(bias) != [m] {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % m])
            .collect();
        self.record("add_bias", self.shape(a).to_vec(), out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        self.record("scale", self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        self.record("add_scalar", self.shape(a).to_vec(), out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.record("relu", self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * x);
        self.record("square", self.shape(a).to_vec(), out, Op::Square(a), &[a])
    }

    /// Concatenates along the last (feature) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (n, ma) = last_axis_rows(sa);
        let (_, mb) = last_axis_rows(sb);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ma + mb;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&va[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&vb[i * mb..(i + 1) * mb]);
        }
        self.record("concat", shape, out, Op::Concat(a, b), &[a, b])
    }

    /// Normalizes each row to unit L2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (n, m) = last_axis_rows(self.shape(a));
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            out.extend(row.iter().map(|v| v / norm));
        }
        self.record("l2_normalize", self.shape(a).to_vec(), out, Op::L2Normalize(a), &[a])
    }

    /// Row-wise inner product; drops the last axis.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let sa = self.shape(a);
        let (n, m) = last_axis_rows(sa);
        let shape = if sa.is_empty() { Vec::new() } else { sa[..sa.len() - 1].to_vec() };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| {
                va[i * m..(i + 1) * m]
                    .iter()
                    .zip(&vb[i * m..(i + 1) * m])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.record("row_dot", shape, out, Op::RowDot(a, b), &[a, b])
    }

    /// Rescales rows whose norm exceeds `max_norm` down to exactly `max_norm`.
    pub fn clip_norm(&mut self, a: Var, max_norm: f64) -> Result<Var> {
        if max_norm.is_nan() || max_norm <= 0.0 {
            return Err(Error::Contract(format!("clip_norm needs a positive bound, got {max_norm}")));
        }
        let (n, m) = last_axis_rows(self.shape(a));
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max_norm {
                out.extend(row.iter().map(|v| v * max_norm / norm));
            } else {
                out.extend_from_slice(row);
            }
        }
        self.record("clip_norm", self.shape(a).to_vec(), out, Op::ClipNorm(a, max_norm), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data();
        let out = v.iter().sum::<f64>() / v.len() as f64;
        self.record("mean", Vec::new(), vec![out], Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().sum::<f64>();
        self.record("sum", Vec::new(), vec![out], Op::Sum(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits` (n x K) against column targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("softmax_cross_entropy", s, &[targets.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("target column {bad} out of range for {k} logits")));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        self.record(
            "softmax_cross_entropy",
            Vec::new(),
            vec![total / n as f64],
            Op::SoftmaxXent(logits, targets.to_vec()),
            &[logits],
        )
    }

    /// Runs the reverse pass from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, local: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(local),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (shp(*a)[0], shp(*a)[1]);
                let m = shp(*b)[1];
                if nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let bv = val(*b);
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bv[p * m + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let av = val(*a);
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(a, bias) => {
                send(*a, g.to_vec());
                let m = shp(*bias)[0];
                let mut db = vec![0.0; m];
                for (i, gv) in g.iter().enumerate() {
                    db[i % m] += gv;
                }
                send(*bias, db);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Relu(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Square(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Concat(a, b) => {
                let (n, ma) = last_axis_rows(shp(*a));
                let (_, mb) = last_axis_rows(shp(*b));
                let w = ma + mb;
                let mut ga = Vec::with_capacity(n * ma);
                let mut gb = Vec::with_capacity(n * mb);
                for i in 0..n {
                    ga.extend_from_slice(&g[i * w..i * w + ma]);
                    gb.extend_from_slice(&g[i * w + ma..(i + 1) * w]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::L2Normalize(a) => {
                // dx = (g - y (y.g)) / sqrt(|x|^2 + eps)
                let (n, m) = last_axis_rows(shp(*a));
                let x = val(*a);
                let y = node.value.data();
                let mut dx = Vec::with_capacity(n * m);
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let norm = (x[r.clone()].iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let yg: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    dx.extend(y[r.clone()].iter().zip(&g[r]).map(|(yv, gv)| (gv - yv * yg) / norm));
                }
                send(*a, dx);
            }
            Op::RowDot(a, b) => {
                let (n, m) = last_axis_rows(shp(*a));
                let (av, bv) = (val(*a), val(*b));
                let expand = |other: &[f64]| {
                    let mut out = Vec::with_capacity(n * m);
                    for i in 0..n {
                        out.extend(other[i * m..(i + 1) * m].iter().map(|v| v * g[i]));
                    }
                    out
                };
                send(*a, expand(bv));
                send(*b, expand(av));
            }
            Op::ClipNorm(a, max_norm) => {
                let (n, m) = last_axis_rows(shp(*a));
                let x = val(*a);
                let mut dx = Vec::with_capacity(n * m);
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let norm = x[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *max_norm {
                        let xg: f64 = x[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        let s = max_norm / norm;
                        let n2 = norm * norm;
                        dx.extend(x[r.clone()].iter().zip(&g[r]).map(|(xv, gv)| s * (gv - xv * xg / n2)));
                    } else {
                        dx.extend_from_slice(&g[r]);
                    }
                }
                send(*a, dx);
            }
            Op::Mean(a) => {
                let len = nodes[a.0].value.len();
                send(*a, vec![g[0] / len as f64; len]);
            }
            Op::Sum(a) => {
                let len = nodes[a.0].value.len();
                send(*a, vec![g[0]; len]);
            }
            Op::SoftmaxXent(logits, targets) => {
                let (n, k) = (shp(*logits)[0], shp(*logits)[1]);
                let x = val(*logits);
                let mut dx = Vec::with_capacity(n * k);
                for (i, &t) in targets.iter().enumerate() {
                    let row = &x[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - max).exp() / z;
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dx.push(g[0] * (p - onehot) / n as f64);
                    }
                }
                send(*logits, dx);
            }
        }
    }
}
