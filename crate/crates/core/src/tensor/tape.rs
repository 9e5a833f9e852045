//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive executed through a [`Tape`] appends one node holding its
//! output value and whatever it needs for the reverse pass. `backward`
//! replays the list in exact reverse order. Nodes whose inputs do not require
//! gradients are skipped entirely, so frozen weights cost nothing.

use super::kernels;
use super::{matmul, shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Upsample { x: Var },
    UpsampleAdjoint { x: Var, out: [usize; 4] },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dense { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: T },
    MulScalar { x: Var, s: Var },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Softmax { x: Var },
    SigmoidSimplex { aux: Var, active: Vec<bool> },
    Select { x: Var, index: usize },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`]. Only leaves
/// keep their buffers; intermediate gradients are released as the reverse
/// sweep passes them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) if tensor.requires_grad() => tensor.accumulate_grad(g),
            _ => Ok(()),
        }
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let mut needs = false;
        for &v in inputs {
            needs |= self.node(v)?.needs_grad;
        }
        Ok(self.push(value, op, needs))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a copy of a parameter; it is differentiated iff the tensor
    /// has `requires_grad` set.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, needs)
    }

    /// Records a leaf that always receives a gradient (e.g. an input image
    /// under attack).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.node(x)?.value.dims4()?;
        let ws = self.node(w)?.value.dims4()?;
        let bias = match b {
            Some(b) => Some(self.node(b)?.value.data()),
            None => None,
        };
        let (out, os) = kernels::conv2d(self.value(x).data(), xs, self.value(w).data(), ws, bias, stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op("conv2d", Tensor::new(os.to_vec(), out)?, Op::Conv2d { x, w, b, stride, padding }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.node(x)?.value.dims4()?;
        let ws = self.node(w)?.value.dims4()?;
        let bias = match b {
            Some(b) => Some(self.node(b)?.value.data()),
            None => None,
        };
        let (out, os) =
            kernels::conv_transpose2d(self.value(x).data(), xs, self.value(w).data(), ws, bias, stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(
            "conv_transpose2d",
            Tensor::new(os.to_vec(), out)?,
            Op::ConvTranspose2d { x, w, b, stride, padding },
            &inputs,
        )
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x)?.value.dims4()?;
        let (out, os) = kernels::upsample_bilinear2x(self.value(x).data(), xs)?;
        self.push_op("upsample_bilinear2x", Tensor::new(os.to_vec(), out)?, Op::Upsample { x }, &[x])
    }

    /// Adjoint of [`Self::upsample_bilinear2x`]: maps `[n, c, 2h, 2w]` to
    /// `[n, c, h, w]`.
    pub fn upsample_bilinear2x_adjoint(&mut self, x: Var) -> Result<Var> {
        let [n, c, h2, w2] = self.node(x)?.value.dims4()?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(shape_err("upsample_bilinear2x_adjoint", format!("spatial extents {h2}x{w2} must be even")));
        }
        let out = [n, c, h2 / 2, w2 / 2];
        let d = kernels::upsample_bilinear2x_backward(self.value(x).data(), out)?;
        self.push_op("upsample_bilinear2x_adjoint", Tensor::new(out.to_vec(), d)?, Op::UpsampleAdjoint { x, out }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v.max(T::zero()));
        self.push_op("relu", out, Op::Relu { x }, &[x])
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x)?.value.dims4()?;
        let (out, argmax, os) = kernels::maxpool2x2(self.value(x).data(), xs)?;
        self.push_op("maxpool2x2", Tensor::new(os.to_vec(), out)?, Op::MaxPool { x, argmax }, &[x])
    }

    /// `x W^T + b` with `x` flattened to `[n, in]` and `W` of shape `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let wv = &self.node(w)?.value;
        let n = *xv.shape().first().ok_or_else(|| shape_err("dense", "input has rank 0"))?;
        let fan_in = xv.numel() / n.max(1);
        let (out_dim, w_in) = match wv.shape() {
            &[o, i] => (o, i),
            other => return Err(shape_err("dense", format!("weight must be rank 2, got {other:?}"))),
        };
        if w_in != fan_in {
            return Err(shape_err("dense", format!("input features {fan_in} but weight expects {w_in} (dim 1)")));
        }
        let mut out = vec![T::zero(); n * out_dim];
        if let Some(b) = b {
            let bv = self.node(b)?.value.data();
            if bv.len() != out_dim {
                return Err(shape_err("dense", format!("bias has {} entries for {out_dim} outputs", bv.len())));
            }
            for row in out.chunks_exact_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        matmul(n, fan_in, out_dim, xv.data(), false, wv.data(), true, &mut out, b.is_some());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op("dense", Tensor::new(vec![n, out_dim], out)?, Op::Dense { x, w, b }, &inputs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push_op("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push_op("sub", out, Op::Sub { a, b }, &[a, b])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v * factor);
        self.push_op("scale", out, Op::Scale { x, factor }, &[x])
    }

    /// Multiplication by a recorded scalar (differentiable in both).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.node(s)?.value;
        if sv.numel() != 1 {
            return Err(shape_err("mul_scalar", format!("multiplier must be scalar, got {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let out = self.node(x)?.value.map(|v| v * k);
        self.push_op("mul_scalar", out, Op::MulScalar { x, s }, &[x, s])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.sum();
        self.push_op("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.node(x)?.value;
        let m = v.sum() / T::lit(v.numel().max(1) as f64);
        self.push_op("mean", Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Mean over every element (batch included) of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = T::lit(av.numel().max(1) as f64);
        let total: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push_op("mse", Tensor::scalar(total / n), Op::Mse { a, b }, &[a, b])
    }

    fn row_softmax(data: &[T], classes: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks_exact(classes) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        out
    }

    fn rows(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.node(x)?.value.shape() {
            &[n, k] if k > 0 => Ok((n, k)),
            other => Err(shape_err(op, format!("expected [batch, classes], got {other:?}"))),
        }
    }

    /// Row-wise softmax of a `[batch, classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rows("softmax", x)?;
        let p = Self::row_softmax(self.value(x).data(), k);
        self.push_op("softmax", Tensor::new(vec![n, k], p)?, Op::Softmax { x }, &[x])
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.rows("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let data = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &l) in data.chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
        }
        loss = loss / T::lit(n.max(1) as f64);
        let probs = Self::row_softmax(data, k);
        self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// `sigma(a_i) / sum_j sigma(a_j)` over the active entries of a rank-1
    /// tensor; inactive entries are exactly zero and receive no gradient.
    pub fn sigmoid_simplex(&mut self, aux: Var, active: &[bool]) -> Result<Var> {
        let av = &self.node(aux)?.value;
        if av.rank() != 1 || av.numel() != active.len() {
            return Err(shape_err(
                "sigmoid_simplex",
                format!("aux shape {:?} vs {} mask entries", av.shape(), active.len()),
            ));
        }
        if !active.iter().any(|&a| a) {
            return Err(TensorError::InvalidArgument { op: "sigmoid_simplex", detail: "no active entries".into() });
        }
        let s: Vec<T> = av
            .data()
            .iter()
            .zip(active)
            .map(|(&a, &on)| if on { sigmoid(a) } else { T::zero() })
            .collect();
        let z: T = s.iter().copied().sum();
        let out = Tensor::new(vec![s.len()], s.into_iter().map(|v| v / z).collect())?;
        self.push_op("sigmoid_simplex", out, Op::SigmoidSimplex { aux, active: active.to_vec() }, &[aux])
    }

    /// Scalar view of one element of `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let v = *xv
            .data()
            .get(index)
            .ok_or_else(|| shape_err("select", format!("index {index} of {} elements", xv.numel())))?;
        self.push_op("select", Tensor::scalar(v), Op::Select { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape.to_vec())?;
        self.push_op("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Reverse pass from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = &self.node(loss)?.value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, padding } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let need = (self.wants(x), self.wants(w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    xv.dims4()?,
                    wv.data(),
                    wv.dims4()?,
                    g,
                    stride,
                    padding,
                    need,
                )?;
                if let Some(d) = dx {
                    accumulate(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    accumulate(&mut grads[w.0], d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, padding } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let need = (self.wants(x), self.wants(w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    xv.data(),
                    xv.dims4()?,
                    wv.data(),
                    wv.dims4()?,
                    g,
                    stride,
                    padding,
                    need,
                )?;
                if let Some(d) = dx {
                    accumulate(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    accumulate(&mut grads[w.0], d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::Upsample { x } => {
                let d = kernels::upsample_bilinear2x_backward(g, self.value(x).dims4()?)?;
                accumulate(&mut grads[x.0], d);
            }
            &Op::UpsampleAdjoint { x, out } => {
                let (d, _) = kernels::upsample_bilinear2x(g, out)?;
                accumulate(&mut grads[x.0], d);
            }
            &Op::Relu { x } => {
                let d = self.value(x).data().iter().zip(g).map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() });
                accumulate(&mut grads[x.0], d.collect());
            }
            Op::MaxPool { x, argmax } => {
                let d = kernels::maxpool2x2_backward(g, argmax, self.value(*x).numel());
                accumulate(&mut grads[x.0], d);
            }
            &Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (out_dim, fan_in) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.shape()[0];
                if self.wants(x) {
                    let mut d = vec![T::zero(); n * fan_in];
                    matmul(n, out_dim, fan_in, g, false, wv.data(), false, &mut d, false);
                    accumulate(&mut grads[x.0], d);
                }
                if self.wants(w) {
                    let mut d = vec![T::zero(); out_dim * fan_in];
                    matmul(out_dim, n, fan_in, g, true, xv.data(), false, &mut d, false);
                    accumulate(&mut grads[w.0], d);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut d = vec![T::zero(); out_dim];
                    for row in g.chunks_exact(out_dim) {
                        d.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    accumulate(&mut grads[b.0], d);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Scale { x, factor } => {
                accumulate(&mut grads[x.0], g.iter().map(|&v| v * factor).collect());
            }
            &Op::MulScalar { x, s } => {
                let k = self.value(s).data()[0];
                if self.wants(x) {
                    accumulate(&mut grads[x.0], g.iter().map(|&v| v * k).collect());
                }
                if self.wants(s) {
                    let ds: T = self.value(x).data().iter().zip(g).map(|(&a, &b)| a * b).sum();
                    accumulate(&mut grads[s.0], vec![ds]);
                }
            }
            &Op::Sum { x } => {
                accumulate(&mut grads[x.0], vec![g[0]; self.value(x).numel()]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                accumulate(&mut grads[x.0], vec![g[0] / T::lit(n.max(1) as f64); n]);
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let k = T::lit(2.0) * g[0] / T::lit(av.numel().max(1) as f64);
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * k).collect();
                if self.wants(b) {
                    accumulate(&mut grads[b.0], diff.iter().map(|&v| -v).collect());
                }
                if self.wants(a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len().max(1);
                let scale = g[0] / T::lit(labels.len().max(1) as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * k + l] -= scale;
                }
                accumulate(&mut grads[logits.0], d);
            }
            &Op::Softmax { x } => {
                let p = node.value.data();
                let k = node.value.shape()[1];
                let mut d = Vec::with_capacity(p.len());
                for (pr, gr) in p.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(pr.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::SigmoidSimplex { aux, active } => {
                let a = self.value(*aux).data();
                let s: Vec<T> =
                    a.iter().zip(active).map(|(&v, &on)| if on { sigmoid(v) } else { T::zero() }).collect();
                let z: T = s.iter().copied().sum();
                let gs: T = g.iter().zip(&s).map(|(&gi, &si)| gi * si).sum();
                let d = a
                    .iter()
                    .zip(&s)
                    .zip(g)
                    .zip(active)
                    .map(|(((_, &sj), &gj), &on)| {
                        if on {
                            sj * (T::one() - sj) * (gj / z - gs / (z * z))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(&mut grads[aux.0], d);
            }
            &Op::Select { x, index } => {
                let mut d = vec![T::zero(); self.value(x).numel()];
                d[index] = g[0];
                accumulate(&mut grads[x.0], d);
            }
            &Op::Reshape { x } => {
                accumulate(&mut grads[x.0], g.to_vec());
            }
        }
        Ok(())
    }
}
