//! Define-by-run computation graph with a reverse-mode tape.
//!
//! Every op evaluates eagerly and stores its output in the graph. When
//! recording is enabled and at least one input needs a gradient, the op is
//! also appended to the tape; [`Graph::backward`] replays the tape in reverse.

use super::kernels::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value living in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op selector for [`Graph::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Gelu,
    Softmax,
    LayerNorm,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        gather: Vec<usize>,
    },
    Expand {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    tape: Vec<usize>,
    recording: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;

impl<T: Real> Graph<T> {
    /// A graph that records differentiable ops.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tape: Vec::new(),
            recording: true,
        }
    }

    /// A graph for inference; nothing is ever recorded.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.recording = enabled;
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.recording
    }

    /// Number of ops recorded for the backward pass.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Parameter leaf. Frozen parameters behave like inputs.
    pub fn param(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let rg = trainable && self.recording;
        self.push_leaf(value, rg)
    }

    fn push_leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        let id = self.nodes.len() - 1;
        if requires_grad {
            self.tape.push(id);
        }
        Var(id)
    }

    fn make(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Dispatches one of the core op kinds by value.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(format!("{kind:?} expects {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Gelu => {
                arity(1)?;
                Ok(self.gelu(inputs[0]))
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::LayerNorm => {
                arity(1)?;
                self.layer_norm(inputs[0])
            }
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], axis, start, len)
            }
        }
    }

    /// `a[..., n, k] · b[k, m]` (shared right operand) or
    /// `a[..., n, k] · b[..., k, m]` (matching batch dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", &[&sa, &sb]);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([n, m]);

        let mut out = vec![T::zero(); batch * n * m];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm_acc(av, bv, &mut out, batch * n, k, m);
            } else {
                for i in 0..batch {
                    gemm_acc(
                        &av[i * n * k..(i + 1) * n * k],
                        &bv[i * k * m..(i + 1) * k * m],
                        &mut out[i * n * m..(i + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
            }
        }
        let op = Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            m,
            shared_rhs,
        };
        Ok(self.push(Self::make(out_shape, out), op, &[a, b]))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, &[sa, sb]));
        }
        Ok(())
    }

    /// Element-wise `a + b`; `b` may have a shape equal to a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let t = Self::make(av.shape().to_vec(), data);
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Element-wise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let t = Self::make(av.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let t = Self::make(av.shape().to_vec(), data);
        self.push(t, Op::Scale { a, factor }, &[a])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let t = Self::make(av.shape().to_vec(), data);
        self.push(t, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let Some(&width) = shape.last() else {
            return Err(Error::shape("softmax", &[&shape]));
        };
        let mut data = av.data().to_vec();
        if width > 0 {
            for row in data.chunks_exact_mut(width) {
                softmax_row(row);
            }
        }
        Ok(self.push(Self::make(shape, data), Op::Softmax { a }, &[a]))
    }

    /// Layer normalisation over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let width = match shape.last() {
            Some(&w) if w > 0 => w,
            _ => return Err(Error::shape("layer_norm", &[&shape])),
        };
        let eps = T::c(LAYER_NORM_EPS);
        let wn = T::c(width as f64);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / width);
        for row in data.chunks_exact_mut(width) {
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / wn;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        Ok(self.push(Self::make(shape, data), Op::LayerNorm { a, inv_std }, &[a]))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let err = || {
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            Error::shape("concat", &refs)
        };
        if axis >= base.len() {
            return Err(err());
        }
        for s in &shapes {
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(err());
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total_axis;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Self::make(out_shape, out), op, parts))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &[&shape, &[axis, start, len]]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Self::make(out_shape, out), Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if numel(&shape) != av.len() {
            return Err(Error::shape("reshape", &[av.shape(), &shape]));
        }
        let t = Self::make(shape, av.data().to_vec());
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &[&shape, perm]));
        }
        let gather = permute_gather(&shape, perm);
        let src = self.value(a).data();
        let out: Vec<T> = gather.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Self::make(out_shape, out), Op::Permute { a, gather }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose", &[self.shape(a)]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Repeats `a` along a new leading axis of size `count`.
    pub fn expand(&mut self, a: Var, count: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![count];
        shape.extend_from_slice(av.shape());
        let mut out = Vec::with_capacity(count * av.len());
        for _ in 0..count {
            out.extend_from_slice(av.data());
        }
        self.push(Self::make(shape, out), Op::Expand { a }, &[a])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &[&shape, &[labels.len()]]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            softmax_row(row);
        }
        let loss = total / T::c(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Reverse pass from a scalar `loss`. Only values that require a gradient
    /// receive one; frozen leaves are skipped entirely.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for &id in self.tape.iter().rev() {
            if id > loss.0 {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_rhs,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.needs(a) {
                    let mut da = vec![T::zero(); av.len()];
                    if shared_rhs {
                        gemm_a_bt_acc(dy, bv, &mut da, batch * n, k, m);
                    } else {
                        for i in 0..batch {
                            gemm_a_bt_acc(
                                &dy[i * n * m..(i + 1) * n * m],
                                &bv[i * k * m..(i + 1) * k * m],
                                &mut da[i * n * k..(i + 1) * n * k],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if shared_rhs {
                        gemm_at_b_acc(av, dy, &mut db, batch * n, k, m);
                    } else {
                        for i in 0..batch {
                            gemm_at_b_acc(
                                &av[i * n * k..(i + 1) * n * k],
                                &dy[i * n * m..(i + 1) * n * m],
                                &mut db[i * k * m..(i + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    accumulate(grads, a, dy.to_vec());
                }
                if self.needs(b) {
                    let nb = self.value(b).len();
                    accumulate(grads, b, fold_suffix(dy, nb));
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let nb = bv.len().max(1);
                if self.needs(a) {
                    let da = dy.iter().enumerate().map(|(i, &g)| g * bv[i % nb]).collect();
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let prod: Vec<T> = dy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, b, fold_suffix(&prod, bv.len()));
                }
            }
            &Op::Scale { a, factor } => {
                accumulate(grads, a, dy.iter().map(|&g| g * factor).collect());
            }
            &Op::Gelu { a } => {
                let x = self.value(a).data();
                let da = dy.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, a, da);
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let mut da = vec![T::zero(); y.len()];
                if width > 0 {
                    for ((yr, gr), dr) in y
                        .chunks_exact(width)
                        .zip(dy.chunks_exact(width))
                        .zip(da.chunks_exact_mut(width))
                    {
                        let dot = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                }
                accumulate(grads, a, da);
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let wn = T::c(width as f64);
                let mut da = vec![T::zero(); y.len()];
                for (((yr, gr), dr), &r) in y
                    .chunks_exact(width)
                    .zip(dy.chunks_exact(width))
                    .zip(da.chunks_exact_mut(width))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().copied().sum::<T>() / wn;
                    let mean_gy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / wn;
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = r * (g - mean_g - y * mean_gy);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let s = o * total + offset;
                            dp.extend_from_slice(&dy[s..s + chunk]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { a, axis, start } => {
                let in_shape = self.shape(a);
                let outer = numel(&in_shape[..axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let len = node.value.shape()[axis];
                let mut da = vec![T::zero(); self.value(a).len()];
                for o in 0..outer {
                    let dst = (o * in_shape[axis] + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                accumulate(grads, a, da);
            }
            &Op::Reshape { a } => accumulate(grads, a, dy.to_vec()),
            Op::Permute { a, gather } => {
                let mut da = vec![T::zero(); dy.len()];
                for (&src, &g) in gather.iter().zip(dy) {
                    da[src] = g;
                }
                accumulate(grads, *a, da);
            }
            &Op::Expand { a } => {
                let n = self.value(a).len();
                accumulate(grads, a, fold_suffix(dy, n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = dy[0] / T::c(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
                    row[label] -= T::one();
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                accumulate(grads, *logits, d);
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                accumulate(grads, a, vec![dy[0]; n]);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, d) in g.iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Sums a gradient over the leading (broadcast) positions down to `n` entries.
fn fold_suffix<T: Real>(dy: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    for chunk in dy.chunks_exact(n) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Linear source index for every output position of a permutation.
fn permute_gather(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut gather = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..total {
        gather.push(src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    gather
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    half * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let cdf = half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 4], &[3.5; 4]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[0.0; 3]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![4, 5]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![4, 5]]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]), true);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::zeros(vec![2]), true);
        let y = g.gelu(w);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]), false);
        let v = g.param(t(&[2], &[3.0, 4.0]), true);
        let p = g.mul(w, v).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(v).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn disabled_recording_leaves_tape_untouched() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]), true);
        let _ = g.gelu(w);
        assert_eq!(g.tape_len(), 1);
        g.set_grad_enabled(false);
        let x = g.gelu(w);
        let _ = g.sum(x);
        assert_eq!(g.tape_len(), 1);
        g.set_grad_enabled(true);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 100]));
        let l = g.cross_entropy(x, &[3, 99]).unwrap();
        assert!((g.value(l).data()[0] - 100f64.ln()).abs() < 1e-12);
        assert!(matches!(g.cross_entropy(x, &[0, 100]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::<f64>::new();
            let x = g.input(t(&[1, 3], &[margin, 0.0, 0.0]));
            let l = g.cross_entropy(x, &[0]).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.input(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).data(), data.as_slice());
    }
}
