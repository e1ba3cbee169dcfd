use super::{gemm, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs repeats over the leading axes of lhs.
    Rows,
    /// rhs has a trailing extent of 1 and repeats along lhs's last axis.
    Cols,
}

impl Bcast {
    #[inline]
    fn map(self, i: usize, rhs_len: usize, last: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Rows => i % rhs_len,
            Bcast::Cols => i / last,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Bcast),
    Affine(Var, S),
    Unary(UnOp, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<S>,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mse(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Transpose(Var),
    OuterAdd(Var, Var),
    Mix(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Linear record of forward operations. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with zeros substituted for unreachable values.
    pub fn get_or_zero(&self, tape: &Tape<S>, v: Var) -> Vec<S> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); tape.value(v).len()],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn to_f32(&self, v: Var) -> Vec<f32> {
        self.value(v).iter().map(|x| x.as_f32()).collect()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Length {
                what: "leaf",
                expected: numel(&shape),
                got: value.len(),
            });
        }
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Records an owned tensor, widening or narrowing to `S`.
    pub fn tensor(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data.iter().map(|&x| S::from_f32(x)).collect();
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a fresh leaf holding the same values.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, S::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if !sb.is_empty() && sa.len() > sb.len() && sa.ends_with(sb) {
            return Ok(Bcast::Rows);
        }
        if sa.len() == sb.len()
            && !sa.is_empty()
            && sb[sb.len() - 1] == 1
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            return Ok(Bcast::Cols);
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let kind = self.bcast(name, a, b)?;
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap_or(&1);
        let (va, vb) = (self.value(a), self.value(b));
        let rl = vb.len();
        let out: Vec<S> = va
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = vb[kind.map(i, rl, last)];
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        Ok(self.push(shape, out, Op::Binary(op, a, b, kind), &[a, b]))
    }

    /// Elementwise sum. `b` may match `a`, repeat over `a`'s leading axes, or
    /// carry a trailing extent of 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (S::from_f64(scale), S::from_f64(shift));
        let out = self.value(x).iter().map(|&v| s * v + t).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Affine(x, s), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, op: UnOp, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| match op {
                UnOp::Relu => v.max(S::zero()),
                UnOp::Sigmoid => sigmoid(v),
                UnOp::Tanh => v.tanh(),
                UnOp::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Unary(op, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnOp::Exp, x)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![S::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(v[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (v[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    /// Affine scaling is left to the caller.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(Error::Axis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            });
        };
        let v = self.value(x);
        let rows = v.len() / d.max(1);
        let dn = S::from_f64(d as f64);
        let eps = S::from_f64(LN_EPS);
        let mut out = vec![S::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &b| a + b) / dn;
            let var = row
                .iter()
                .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
                / dn;
            let is = S::one() / (var + eps).sqrt();
            for (o, &b) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (b - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Sums along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + v[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(
            new_shape,
            out,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Mean of squared differences, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let sum = va
            .iter()
            .zip(vb)
            .fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let mean = sum / S::from_f64(va.len().max(1) as f64);
        Ok(self.push(vec![], vec![mean], Op::Mse(a, b), &[a, b]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let lead = {
            let s = self.shape(first);
            if s.is_empty() {
                return Err(Error::Axis {
                    op: "concat",
                    axis: 0,
                    rank: 0,
                });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(xs.to_vec()), xs))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(Error::Axis {
                op: "slice",
                axis: 0,
                rank: 0,
            });
        };
        if start >= end || end > d {
            return Err(Error::Invalid(format!(
                "slice: range {start}..{end} invalid for last extent {d}"
            )));
        }
        let rows = numel(&shape) / d.max(1);
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * d + start..r * d + end]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = w;
        Ok(self.push(new_shape, out, Op::Slice { x, start, end }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    /// Pairwise row sums: for `a` of K×D and `b` of N×D, row `k*N + i` of the
    /// K·N×D output is `a[k] + b[i]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("outer_add", &sa, &sb));
        }
        let (k, n, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(k * n * d);
        for kk in 0..k {
            let ra = &va[kk * d..(kk + 1) * d];
            for i in 0..n {
                let rb = &vb[i * d..(i + 1) * d];
                out.extend(ra.iter().zip(rb).map(|(&x, &y)| x + y));
            }
        }
        Ok(self.push(vec![k * n, d], out, Op::OuterAdd(a, b), &[a, b]))
    }

    /// Weighted combination over the leading axis: `alpha` is K×N and `comp`
    /// holds K·N rows of width C; output row `i` is `Σ_k alpha[k,i]·comp[k·N+i]`.
    pub fn mix(&mut self, alpha: Var, comp: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(alpha).to_vec(), self.shape(comp).to_vec());
        if sa.len() != 2 || sc.is_empty() || numel(&sc) % (sa[0] * sa[1]).max(1) != 0 {
            return Err(Error::shape("mix", &sa, &sc));
        }
        let (k, n) = (sa[0], sa[1]);
        let c = numel(&sc) / (k * n).max(1);
        if sc[sc.len() - 1] != c {
            return Err(Error::shape("mix", &sa, &sc));
        }
        let (va, vc) = (self.value(alpha), self.value(comp));
        let mut out = vec![S::zero(); n * c];
        for kk in 0..k {
            for i in 0..n {
                let w = va[kk * n + i];
                let row = &vc[(kk * n + i) * c..(kk * n + i + 1) * c];
                for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = *o + w * x;
                }
            }
        }
        Ok(self.push(vec![n, c], out, Op::Mix(alpha, comp), &[alpha, comp]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::NotOnTape);
        };
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::NotOnTape);
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b), true, S::one(), ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(k, m, n, self.value(*a), true, g, false, S::one(), gb);
                }
            }
            Op::Binary(op, a, b, kind) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let last = *node.shape.last().unwrap_or(&1);
                let rl = vb.len();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        let y = vb[kind.map(i, rl, last)];
                        ga[i] = ga[i]
                            + match op {
                                BinOp::Add | BinOp::Sub => *gi,
                                BinOp::Mul => *gi * y,
                                BinOp::Div => *gi / y,
                            };
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        let j = kind.map(i, rl, last);
                        let y = vb[j];
                        gb[j] = gb[j]
                            + match op {
                                BinOp::Add => *gi,
                                BinOp::Sub => -*gi,
                                BinOp::Mul => *gi * va[i],
                                BinOp::Div => -*gi * va[i] / (y * y),
                            };
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d = *d + *gi * *s;
                    }
                }
            }
            Op::Unary(op, x) => {
                let vx = self.value(*x);
                let y = &node.value;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        let local = match op {
                            UnOp::Relu => {
                                if vx[i] > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            UnOp::Sigmoid => y[i] * (S::one() - y[i]),
                            UnOp::Tanh => S::one() - y[i] * y[i],
                            UnOp::Exp => y[i],
                        };
                        gx[i] = gx[i] + g[i] * local;
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for j in 0..*len {
                                let p = base + j * inner;
                                dot = dot + g[p] * y[p];
                            }
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] = gx[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = *node.shape.last().unwrap();
                let dn = S::from_f64(d as f64);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mg = gr.iter().fold(S::zero(), |a, &b| a + b) / dn;
                        let mgy = gr
                            .iter()
                            .zip(yr)
                            .fold(S::zero(), |a, (&b, &c)| a + b * c)
                            / dn;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for o in 0..*outer {
                        for j in 0..*len {
                            for i in 0..*inner {
                                let p = (o * len + j) * inner + i;
                                gx[p] = gx[p] + g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = S::from_f64(2.0) * g[0] / S::from_f64(va.len().max(1) as f64);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..va.len() {
                        ga[i] = ga[i] + c * (va[i] - vb[i]);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..va.len() {
                        gb[i] = gb[i] - c * (va[i] - vb[i]);
                    }
                }
            }
            Op::Concat(xs) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total.max(1);
                let mut off = 0;
                for &x in xs {
                    let w = *self.shape(x).last().unwrap();
                    if let Some(gx) = self.grad_buf(grads, x) {
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] = gx[r * w + j] + g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let d = *self.shape(*x).last().unwrap();
                let w = end - start;
                let rows = g.len() / w;
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * d + start + j] = gx[r * d + start + j] + g[r * w + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d = *d + *gi;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let (k, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for kk in 0..k {
                        for i in 0..n {
                            let row = &g[(kk * n + i) * d..(kk * n + i + 1) * d];
                            for (dst, &src) in ga[kk * d..(kk + 1) * d].iter_mut().zip(row) {
                                *dst = *dst + src;
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for kk in 0..k {
                        for i in 0..n {
                            let row = &g[(kk * n + i) * d..(kk * n + i + 1) * d];
                            for (dst, &src) in gb[i * d..(i + 1) * d].iter_mut().zip(row) {
                                *dst = *dst + src;
                            }
                        }
                    }
                }
            }
            Op::Mix(alpha, comp) => {
                let (k, n) = (self.shape(*alpha)[0], self.shape(*alpha)[1]);
                let c = node.shape[1];
                let (va, vc) = (self.value(*alpha), self.value(*comp));
                if let Some(ga) = self.grad_buf(grads, *alpha) {
                    for kk in 0..k {
                        for i in 0..n {
                            let row = &vc[(kk * n + i) * c..(kk * n + i + 1) * c];
                            let gi = &g[i * c..(i + 1) * c];
                            ga[kk * n + i] = ga[kk * n + i]
                                + row.iter().zip(gi).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                }
                if let Some(gc) = self.grad_buf(grads, *comp) {
                    for kk in 0..k {
                        for i in 0..n {
                            let w = va[kk * n + i];
                            let gi = &g[i * c..(i + 1) * c];
                            for (dst, &src) in
                                gc[(kk * n + i) * c..(kk * n + i + 1) * c].iter_mut().zip(gi)
                            {
                                *dst = *dst + w * src;
                            }
                        }
                    }
                }
            }
        }
    }
}
