//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Values live in the [`Tape`] and are addressed by [`Var`] handles. An op is
//! recorded only when at least one of its inputs requires a gradient, so
//! inference on constant parameters leaves the node list empty.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set reachable through [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    MulScalar(f64),
    Relu,
    Sigmoid,
    Reshape(Vec<usize>),
    Mean,
    Sum,
    /// Inputs: image `[N,C,H,W]`, kernel `[O,C,k,k]`, bias `[O]`.
    Conv2dSmall,
    /// Row-wise maximum over the last axis.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// `b` is a row vector repeated over the rows of `a`.
    Row,
    /// `b` is a column vector repeated over the columns of `a`.
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

#[derive(Debug)]
enum Op {
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, mode: Broadcast, cols: usize },
    Mul { a: usize, b: usize },
    MulScalar { a: usize, s: f64 },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Sqrt { a: usize },
    Reshape { a: usize },
    Mean { a: usize },
    Sum { a: usize },
    SumRows { a: usize, cols: usize },
    MaxRows { a: usize, argmax: Vec<usize>, cols: usize },
    Softmax { a: usize, cols: usize },
    XentRows { logits: usize, labels: Vec<usize>, probs: Vec<f64>, cols: usize },
    UniformXentRows { logits: usize, probs: Vec<f64>, cols: usize },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    out: usize,
    op: Op,
}

/// Recorded computation. Single-writer; confine each tape to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    tracked: Vec<bool>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// `c = beta*c + op(a) * op(b)` with `op(a)` logically `[m,k]` and `op(b)`
/// logically `[k,n]`; `*_t` selects the transposed storage layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are validated by callers against m, k, n and the
    // strides above address exactly those elements.
    unsafe {
        dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap()
}

fn softmax_row(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    // log-sum-exp of the row
    max + sum.ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf value. Non-finite inputs are rejected.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t, requires_grad))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position marker for [`Tape::rewind`].
    pub fn mark(&self) -> usize {
        self.values.len()
    }

    /// Drops every value and node created after `mark`, so loops can reuse
    /// leaves registered before it.
    pub fn rewind(&mut self, mark: usize) {
        self.values.truncate(mark);
        self.tracked.truncate(mark);
        self.nodes.retain(|n| n.out < mark);
    }

    fn push(&mut self, t: Tensor, tracked: bool) -> Var {
        self.values.push(t);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, out: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op_name, out.data())?;
        let tracked = inputs.iter().any(|v| self.tracked[v.0]);
        let var = self.push(out, tracked);
        if tracked {
            self.nodes.push(Node { out: var.0, op });
        }
        Ok(var)
    }

    /// Dispatches one of the named primitives.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::Matmul | Primitive::Add => 2,
            Primitive::Conv2dSmall => 3,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{prim:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match prim {
            Primitive::Matmul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::MulScalar(s) => self.mul_scalar(inputs[0], *s),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Reshape(shape) => self.reshape(inputs[0], shape),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Conv2dSmall => self.conv2d_small(inputs[0], inputs[1], inputs[2]),
            Primitive::Max => self.max(inputs[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.record("matmul", out, &[a, b], Op::Matmul { a: a.0, b: b.0, m, k, n })
    }

    /// Elementwise sum with row, column, or scalar broadcasting of the
    /// smaller operand over a 2-D one.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() < tb.numel() {
            return self.add(b, a);
        }
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        let mode = if sa == sb {
            Broadcast::Same
        } else if tb.numel() == 1 {
            Broadcast::Scalar
        } else if sa.len() == 2 && tb.numel() == sa[1] && (sb.len() == 1 || sb[0] == 1) {
            Broadcast::Row
        } else if sa.len() == 2 && sb == [sa[0], 1] {
            Broadcast::Col
        } else {
            return Err(mismatch("add", format!("{sa:?} + {sb:?}")));
        };
        let cols = *sa.last().unwrap();
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f64> = match mode {
            Broadcast::Same => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Broadcast::Scalar => da.iter().map(|x| x + db[0]).collect(),
            Broadcast::Row => da.iter().enumerate().map(|(i, x)| x + db[i % cols]).collect(),
            Broadcast::Col => da.iter().enumerate().map(|(i, x)| x + db[i / cols]).collect(),
        };
        let out = Tensor::new(sa, out)?;
        self.record("add", out, &[a, b], Op::Add { a: a.0, b: b.0, mode, cols })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.mul_scalar(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.record("mul", out, &[a, b], Op::Mul { a: a.0, b: b.0 })
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "mul_scalar" });
        }
        let out = self.value(a).map(|x| x * s);
        self.record("mul_scalar", out, &[a], Op::MulScalar { a: a.0, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "add_scalar" });
        }
        let out = self.value(a).map(|x| x + s);
        self.record("add_scalar", out, &[a], Op::AddScalar { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record("relu", out, &[a], Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.record("sigmoid", out, &[a], Op::Sigmoid { a: a.0 })
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        let out = self.value(a).map(f64::sqrt);
        self.record("sqrt", out, &[a], Op::Sqrt { a: a.0 })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let out = t.reshape(shape).map_err(|_| {
            mismatch("reshape", format!("{:?} -> {shape:?}", t.shape()))
        })?;
        self.record("reshape", out, &[a], Op::Reshape { a: a.0 })
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.record("mean", out, &[a], Op::Mean { a: a.0 })
    }

    /// Sum over all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.record("sum", out, &[a], Op::Sum { a: a.0 })
    }

    /// Sum over the last axis.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = last_dim(t);
        let out: Vec<f64> = t.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = reduced_shape(t.shape());
        let out = Tensor::new(shape, out)?;
        self.record("sum_rows", out, &[a], Op::SumRows { a: a.0, cols })
    }

    /// Maximum over the last axis (the `max` primitive).
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = last_dim(t);
        let argmax: Vec<usize> = t.data().chunks(cols).map(crate::tensor::argmax).collect();
        let out: Vec<f64> = t.data().chunks(cols).zip(&argmax).map(|(r, &j)| r[j]).collect();
        let shape = reduced_shape(t.shape());
        let out = Tensor::new(shape, out)?;
        self.record("max", out, &[a], Op::MaxRows { a: a.0, argmax, cols })
    }

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(mismatch("softmax", format!("expected [batch, K], got {:?}", t.shape())));
        }
        let cols = last_dim(t);
        let mut out = vec![0.0; t.numel()];
        for (z, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(z, o);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.record("softmax", out, &[a], Op::Softmax { a: a.0, cols })
    }

    /// Per-row cross-entropy `-log softmax(z)[label]`, shape `[batch]`.
    pub fn softmax_xent_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != labels.len() {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let cols = last_dim(t);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::LabelOutOfRange { label: bad, classes: cols });
        }
        let mut probs = vec![0.0; t.numel()];
        let mut out = Vec::with_capacity(labels.len());
        for ((z, p), &l) in t.data().chunks(cols).zip(probs.chunks_mut(cols)).zip(labels) {
            let lse = softmax_row(z, p);
            out.push(lse - z[l]);
        }
        let out = Tensor::new(vec![labels.len()], out)?;
        let op = Op::XentRows { logits: logits.0, labels: labels.to_vec(), probs, cols };
        self.record("softmax_cross_entropy", out, &[logits], op)
    }

    /// Mean cross-entropy over the batch, stabilized by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::Empty("softmax_cross_entropy batch"));
        }
        let rows = self.softmax_xent_rows(logits, labels)?;
        self.mean(rows)
    }

    /// Per-row cross-entropy of the softmax against the uniform distribution
    /// over the K classes, shape `[batch]`. Equals `ln K` at uniform output.
    pub fn uniform_xent_rows(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(mismatch("uniform_xent", format!("expected [batch, K], got {:?}", t.shape())));
        }
        let cols = last_dim(t);
        let mut probs = vec![0.0; t.numel()];
        let mut out = Vec::with_capacity(t.rows());
        for (z, p) in t.data().chunks(cols).zip(probs.chunks_mut(cols)) {
            let lse = softmax_row(z, p);
            let mean = z.iter().sum::<f64>() / cols as f64;
            out.push(lse - mean);
        }
        let out = Tensor::new(vec![t.rows()], out)?;
        self.record("uniform_xent", out, &[logits], Op::UniformXentRows { logits: logits.0, probs, cols })
    }

    /// Concatenates `[m, n_i]` (or `[m]`) tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || t.rank() > 2 {
                return Err(mismatch("concat", format!("{:?} with {rows} rows", t.shape())));
            }
            widths.push((p.0, if t.rank() == 1 { 1 } else { t.shape()[1] }));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &(idx, w) in &widths {
            let src = self.values[idx].data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.record("concat", out, parts, Op::Concat { parts: widths, rows })
    }

    /// Stride-1, zero-padded convolution with an odd square kernel.
    pub fn conv2d_small(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 || tb.numel() != sw[0]
        {
            return Err(mismatch(
                "conv2d_small",
                format!("input {sx:?}, kernel {sw:?}, bias {:?}", tb.shape()),
            ));
        }
        let geom = ConvGeom { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sw[0], k: sw[2] };
        let out = conv_forward(&geom, tx.data(), tw.data(), tb.data());
        let out = Tensor::new(vec![geom.n, geom.o, geom.h, geom.w], out)?;
        self.record("conv2d_small", out, &[x, w, b], Op::Conv2d { x: x.0, w: w.0, b: b.0, geom })
    }

    /// Back-propagates from a scalar loss, returning gradients for every
    /// tracked value, then clears the recorded nodes.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !self.tracked[loss.0] {
            return Err(Error::NotRecorded);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            let Some(g) = grads[node.out].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[node.out] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.tracked[idx] {
            return;
        }
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; self.values[idx].numel()]);
        f(slot);
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.values[node.out];
        match &node.op {
            &Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (self.values[a].data(), self.values[b].data());
                // dA = dC Bᵀ, dB = Aᵀ dC
                self.accumulate(grads, a, |ga| gemm(m, n, k, g, false, vb, true, 1.0, ga));
                self.accumulate(grads, b, |gb| gemm(k, m, n, va, true, g, false, 1.0, gb));
            }
            &Op::Add { a, b, mode, cols } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, b, |gb| match mode {
                    Broadcast::Same => gb.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                    Broadcast::Scalar => gb[0] += g.iter().sum::<f64>(),
                    Broadcast::Row => g.iter().enumerate().for_each(|(i, y)| gb[i % cols] += y),
                    Broadcast::Col => g.iter().enumerate().for_each(|(i, y)| gb[i / cols] += y),
                });
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.values[a].data(), self.values[b].data());
                self.accumulate(grads, a, |ga| {
                    ga.iter_mut().zip(g).zip(vb).for_each(|((x, y), w)| *x += y * w)
                });
                self.accumulate(grads, b, |gb| {
                    gb.iter_mut().zip(g).zip(va).for_each(|((x, y), w)| *x += y * w)
                });
            }
            &Op::MulScalar { a, s } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Relu { a } => {
                let va = self.values[a].data();
                self.accumulate(grads, a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            &Op::Sigmoid { a } => {
                let vo = out.data();
                self.accumulate(grads, a, |ga| {
                    ga.iter_mut().zip(g).zip(vo).for_each(|((x, y), s)| *x += y * s * (1.0 - s))
                });
            }
            &Op::Sqrt { a } => {
                let vo = out.data();
                self.accumulate(grads, a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(vo) {
                        if *s > 0.0 {
                            *x += y / (2.0 * s);
                        }
                    }
                });
            }
            &Op::Mean { a } => {
                let n = self.values[a].numel() as f64;
                self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::Sum { a } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            &Op::SumRows { a, cols } => {
                self.accumulate(grads, a, |ga| ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i / cols]));
            }
            Op::MaxRows { a, argmax, cols } => {
                self.accumulate(grads, *a, |ga| {
                    for (r, &j) in argmax.iter().enumerate() {
                        ga[r * cols + j] += g[r];
                    }
                });
            }
            &Op::Softmax { a, cols } => {
                let y = out.data();
                self.accumulate(grads, a, |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for ((x, p), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += p * (d - dot);
                        }
                    }
                });
            }
            Op::XentRows { logits, labels, probs, cols } => {
                self.accumulate(grads, *logits, |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (x, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *x += g[r] * p;
                        }
                        row[l] -= g[r];
                    }
                });
            }
            Op::UniformXentRows { logits, probs, cols } => {
                let inv = 1.0 / *cols as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, (row, pr)) in gl.chunks_mut(*cols).zip(probs.chunks(*cols)).enumerate() {
                        for (x, p) in row.iter_mut().zip(pr) {
                            *x += g[r] * (p - inv);
                        }
                    }
                });
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(idx, w) in parts {
                    self.accumulate(grads, idx, |gp| {
                        for r in 0..*rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.values[x].data(), self.values[w].data());
                if self.tracked[x] {
                    self.accumulate(grads, x, |gx| conv_backward_input(&geom, g, vw, gx));
                }
                if self.tracked[w] {
                    self.accumulate(grads, w, |gw| conv_backward_kernel(&geom, g, vx, gw));
                }
                self.accumulate(grads, b, |gb| {
                    let hw = geom.h * geom.w;
                    for (i, chunk) in g.chunks(hw).enumerate() {
                        gb[i % geom.o] += chunk.iter().sum::<f64>();
                    }
                });
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

// Convolution kernels. Index helpers keep the loops readable; the sizes
// involved are small enough that direct loops are adequate.

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    let mut out = vec![0.0; g.n * g.o * hw];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * hw..(n * g.o + o + 1) * hw];
            dst.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                let ker = &w[(o * g.c + c) * g.k * g.k..(o * g.c + c + 1) * g.k * g.k];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = ker[ky * g.k + kx];
                        let (dy, dx) = (ky as isize - p, kx as isize - p);
                        for_each_valid(g, dy, dx, |oi, ii| dst[oi] += wv * src[ii]);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64], gx: &mut [f64]) {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    for n in 0..g.n {
        for o in 0..g.o {
            let go = &gout[(n * g.o + o) * hw..(n * g.o + o + 1) * hw];
            for c in 0..g.c {
                let dst = &mut gx[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                let ker = &w[(o * g.c + c) * g.k * g.k..(o * g.c + c + 1) * g.k * g.k];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = ker[ky * g.k + kx];
                        let (dy, dx) = (ky as isize - p, kx as isize - p);
                        for_each_valid(g, dy, dx, |oi, ii| dst[ii] += wv * go[oi]);
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(g: &ConvGeom, gout: &[f64], x: &[f64], gw: &mut [f64]) {
    let (hw, p) = (g.h * g.w, (g.k / 2) as isize);
    for n in 0..g.n {
        for o in 0..g.o {
            let go = &gout[(n * g.o + o) * hw..(n * g.o + o + 1) * hw];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                let base = (o * g.c + c) * g.k * g.k;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let (dy, dx) = (ky as isize - p, kx as isize - p);
                        let mut acc = 0.0;
                        for_each_valid(g, dy, dx, |oi, ii| acc += go[oi] * src[ii]);
                        gw[base + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for every output pixel whose source pixel,
/// offset by `(dy, dx)`, lies inside the frame.
#[inline]
fn for_each_valid(g: &ConvGeom, dy: isize, dx: isize, mut f: impl FnMut(usize, usize)) {
    let (h, w) = (g.h as isize, g.w as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    for y in y0..y1 {
        let orow = (y * w) as usize;
        let irow = ((y + dy) * w) as usize;
        for x in x0..x1 {
            f(orow + x as usize, (irow as isize + x + dx) as usize);
        }
    }
}
