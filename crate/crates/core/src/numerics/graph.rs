//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every kernel applied to its nodes. Nodes created from
//! borrowed parameters reference the parameter storage directly, so frozen
//! backbone weights are never copied per forward pass. Gradients are only
//! propagated into nodes that (transitively) depend on a tracked leaf; with a
//! frozen backbone this skips every weight-gradient product for θ.

use std::ops::Deref;

use super::optim::Parameter;
use super::tensor::{dims2, validate_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

enum Data<'a, T> {
    Owned(Vec<T>),
    Borrowed(&'a [T]),
}

impl<T> Deref for Data<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        match self {
            Data::Owned(v) => v,
            Data::Borrowed(s) => s,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Rows(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    KlUniform {
        logits: Var,
        probs: Vec<T>,
        log_probs: Vec<T>,
    },
    Sum(Vec<Var>),
}

struct Node<'a, T> {
    shape: Vec<usize>,
    value: Data<'a, T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂loss/∂var`, or `None` when `var` does not track gradients or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    bound: Vec<(Var, &'a str)>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(128),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Data<'a, T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes ownership of `tensor`; tracks gradients iff the tensor does.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Data::Owned(tensor.into_values()), requires_grad, Op::Leaf)
    }

    /// Leaf that borrows `tensor`'s storage.
    pub fn borrow(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Data::Borrowed(tensor.values()),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf bound to a model parameter. Frozen parameters never track gradients.
    pub fn param(&mut self, param: &'a Parameter<T>) -> Var {
        let requires_grad = !param.frozen && param.tensor.requires_grad();
        let v = self.push(
            param.tensor.shape().to_vec(),
            Data::Borrowed(param.tensor.values()),
            requires_grad,
            Op::Leaf,
        );
        if requires_grad {
            self.bound.push((v, &param.name));
        }
        v
    }

    /// Per-parameter gradients, summed over every leaf bound to the same
    /// parameter, in order of first use.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(&'a str, Vec<T>)> {
        let mut out: Vec<(&'a str, Vec<T>)> = Vec::new();
        for (var, name) in &self.bound {
            let Some(g) = grads.get(*var) else { continue };
            match out.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => axpy(acc, g, T::one()),
                None => out.push((name, g.to_vec())),
            }
        }
        out
    }

    /// Untracked leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.input(t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.tracked(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Data::Owned(out), rg, Op::Add(a, b)))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = dims2(self.shape(x), "add_row_bias")?;
        if self.value(bias).len() != m {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for rows of width {m}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| *x + *b))
            .collect();
        let rg = self.tracked(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Data::Owned(out), rg, Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|v| *v * s).collect();
        let rg = self.tracked(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Data::Owned(out), rg, Op::Scale(x, s))
    }

    /// `a·b` for `a: n×k` (or a length-`k` vector) and `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.shape(a), "matmul")?;
        let (k2, m) = match *self.shape(b) {
            [r, c] => (r, c),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("rhs must be a matrix, got {:?}", self.shape(b)),
                ))
            }
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (m as isize, 1),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        let shape = if self.shape(a).len() == 1 {
            vec![m]
        } else {
            vec![n, m]
        };
        let rg = self.tracked(&[a, b]);
        Ok(self.push(shape, Data::Owned(out), rg, Op::MatMul(a, b)))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine terms {:?}/{:?} for width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(n * d);
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for row in xs.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.tracked(&[x, gamma, beta]);
        if !rg {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Data::Owned(out),
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| gelu(*v)).collect();
        let rg = self.tracked(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Data::Owned(out), rg, Op::Gelu(x))
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let (_, d) = dims2(self.shape(*first), "concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = dims2(self.shape(*p), "concat_rows")?;
            if c != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("row width {c} does not match {d}"),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = self.tracked(parts);
        Ok(self.push(vec![rows, d], Data::Owned(out), rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "row")?;
        if i >= n {
            return Err(Error::shape("row", format!("row {i} of {n}")));
        }
        let out = self.value(x)[i * d..(i + 1) * d].to_vec();
        let rg = self.tracked(&[x]);
        Ok(self.push(vec![d], Data::Owned(out), rg, Op::Row(x, i)))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (n, d) = dims2(self.shape(x), "rows")?;
        if count == 0 || start + count > n {
            return Err(Error::shape("rows", format!("rows {start}..{} of {n}", start + count)));
        }
        let out = self.value(x)[start * d..(start + count) * d].to_vec();
        let rg = self.tracked(&[x]);
        Ok(self.push(vec![count, d], Data::Owned(out), rg, Op::Rows(x, start)))
    }

    /// Multi-head scaled dot-product attention over `n×d` query/key/value
    /// matrices, returning the concatenated head outputs (`n×d`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let (n, d) = dims2(&shape, "attention")?;
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    shape,
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let ds = d as isize;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            T::gemm(n, dh, n, scale, &qv[off..], (ds, 1), &kv[off..], (1, ds), T::zero(), p, (n as isize, 1));
            for row in p.chunks_exact_mut(n) {
                softmax_in_place(row);
            }
            T::gemm(n, n, dh, T::one(), p, (n as isize, 1), &vv[off..], (ds, 1), T::zero(), &mut out[off..], (ds, 1));
        }
        let rg = self.tracked(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            shape,
            Data::Owned(out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let mut out = self.value(x).to_vec();
        check_finite(&out, "softmax input")?;
        for_each_fiber(&shape, axis, &mut out, softmax_strided);
        let rg = self.tracked(&[x]);
        Ok(self.push(shape, Data::Owned(out), rg, Op::Softmax { x, axis }))
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        check_logits(self.shape(logits), "cross_entropy")?;
        if label >= z.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        check_finite(z, "cross_entropy logits")?;
        let log_probs = log_softmax(z);
        let loss = -log_probs[label];
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            vec![1],
            Data::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// `KL(softmax(logits) ‖ uniform)` over all K entries.
    pub fn kl_to_uniform(&mut self, logits: Var) -> Result<Var> {
        let z = self.value(logits);
        check_logits(self.shape(logits), "kl_to_uniform")?;
        if z.len() < 2 {
            return Err(Error::InvalidArgument(
                "kl_to_uniform needs at least two classes".into(),
            ));
        }
        check_finite(z, "kl_to_uniform logits")?;
        let log_probs = log_softmax(z);
        let probs: Vec<T> = log_probs.iter().map(|l| l.exp()).collect();
        let (kl, _) = kl_from_log_probs(&probs, &log_probs);
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            vec![1],
            Data::Owned(vec![kl]),
            rg,
            Op::KlUniform {
                logits,
                probs,
                log_probs,
            },
        ))
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("sum of no terms".into()));
        }
        let mut acc = T::zero();
        for t in terms {
            if self.value(*t).len() != 1 {
                return Err(Error::shape(
                    "sum_scalars",
                    format!("term of shape {:?}", self.shape(*t)),
                ));
            }
            acc = acc + self.value(*t)[0];
        }
        let rg = self.tracked(terms);
        Ok(self.push(vec![1], Data::Owned(vec![acc]), rg, Op::Sum(terms.to_vec())))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::NoGradient);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
            if !matches!(node.op, Op::Leaf) {
                upper[0] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.grad_slot(grads, *v) {
                        axpy(s, g, T::one());
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    axpy(s, g, T::one());
                }
                if let Some(s) = self.grad_slot(grads, *bias) {
                    let m = s.len();
                    for row in g.chunks_exact(m) {
                        axpy(s, row, T::one());
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    axpy(s, g, *c);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a), "matmul").expect("checked in forward");
                let m = self.shape(*b)[1];
                let (ki, mi) = (k as isize, m as isize);
                if let Some(s) = self.grad_slot(grads, *a) {
                    // dA = dC · Bᵀ
                    T::gemm(n, m, k, T::one(), g, (mi, 1), self.value(*b), (1, mi), T::one(), s, (ki, 1));
                }
                if let Some(s) = self.grad_slot(grads, *b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, n, m, T::one(), self.value(*a), (1, ki), g, (mi, 1), T::one(), s, (mi, 1));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                if let Some(s) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] = s[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        axpy(s, gr, T::one());
                    }
                }
                if let Some(s) = self.grad_slot(grads, *x) {
                    let gam = self.value(*gamma);
                    let inv_d = T::lit(1.0 / d as f64);
                    for (r, ((gr, hr), sr)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(s.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            sr[j] = sr[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    for ((s, gv), xv) in s.iter_mut().zip(g).zip(self.value(*x)) {
                        *s = *s + *gv * gelu_grad(*xv);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(s) = self.grad_slot(grads, *p) {
                        axpy(s, &g[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::Row(x, i) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    let d = g.len();
                    axpy(&mut s[i * d..(i + 1) * d], g, T::one());
                }
            }
            Op::Rows(x, start) => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    let d = node.shape[1];
                    axpy(&mut s[start * d..start * d + g.len()], g, T::one());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Softmax { x, axis } => {
                if let Some(s) = self.grad_slot(grads, *x) {
                    // dx = y ⊙ (dy − Σ dy⊙y) along the axis
                    let y = &node.value;
                    let mut prod: Vec<T> = g.iter().zip(y.iter()).map(|(a, b)| *a * *b).collect();
                    for_each_fiber(&node.shape, *axis, &mut prod, |fiber, stride| {
                        let n = fiber.len().div_ceil(stride);
                        let total = (0..n).map(|i| fiber[i * stride]).sum::<T>();
                        for i in 0..n {
                            fiber[i * stride] = total;
                        }
                    });
                    for (((s, gv), yv), tot) in s.iter_mut().zip(g).zip(y.iter()).zip(&prod) {
                        *s = *s + *yv * (*gv - *tot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(s) = self.grad_slot(grads, *logits) {
                    for (j, (s, p)) in s.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { T::one() } else { T::zero() };
                        *s = *s + g[0] * (*p - target);
                    }
                }
            }
            Op::KlUniform {
                logits,
                probs,
                log_probs,
            } => {
                if let Some(s) = self.grad_slot(grads, *logits) {
                    // ∂/∂z_j Σ p ln p = p_j (ln p_j − Σ p ln p)
                    let (_, neg_entropy) = kl_from_log_probs(probs, log_probs);
                    for ((s, p), lp) in s.iter_mut().zip(probs).zip(log_probs) {
                        *s = *s + g[0] * *p * (*lp - neg_entropy);
                    }
                }
            }
            Op::Sum(terms) => {
                for t in terms {
                    if let Some(s) = self.grad_slot(grads, *t) {
                        s[0] = s[0] + g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = dims2(self.shape(q), "attention").expect("checked in forward");
        let dh = d / heads;
        let ds = d as isize;
        let ns = n as isize;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let need_qk = self.nodes[q.0].requires_grad || self.nodes[k.0].requires_grad;
        let mut dp = vec![T::zero(); n * n];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * n * n..(h + 1) * n * n];
            if let Some(s) = self.grad_slot(grads, v) {
                // dV_h += Pᵀ · dO_h
                T::gemm(n, n, dh, T::one(), p, (1, ns), &g[off..], (ds, 1), T::one(), &mut s[off..], (ds, 1));
            }
            if !need_qk {
                continue;
            }
            // dP = dO_h · V_hᵀ
            T::gemm(n, dh, n, T::one(), &g[off..], (ds, 1), &vv[off..], (1, ds), T::zero(), &mut dp, (ns, 1));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh score scale
            for (dpr, pr) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot = dpr.iter().zip(pr).map(|(a, b)| *a * *b).sum::<T>();
                for (x, pv) in dpr.iter_mut().zip(pr) {
                    *x = *pv * (*x - dot) * scale;
                }
            }
            if let Some(s) = self.grad_slot(grads, q) {
                T::gemm(n, n, dh, T::one(), &dp, (ns, 1), &kv[off..], (ds, 1), T::one(), &mut s[off..], (ds, 1));
            }
            if let Some(s) = self.grad_slot(grads, k) {
                T::gemm(n, n, dh, T::one(), &dp, (1, ns), &qv[off..], (ds, 1), T::one(), &mut s[off..], (ds, 1));
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + a * *s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_logits(shape: &[usize], op: &'static str) -> Result<()> {
    match *shape {
        [_] | [1, _] => Ok(()),
        _ => Err(Error::shape(op, format!("expected a logit vector, got {shape:?}"))),
    }
}

/// Max-subtracted softmax of a contiguous slice.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    softmax_strided(row, 1);
}

/// Softmax over the elements `fiber[0], fiber[stride], ...`.
fn softmax_strided<T: Scalar>(fiber: &mut [T], stride: usize) {
    let n = fiber.len().div_ceil(stride);
    let mut max = T::neg_infinity();
    for i in 0..n {
        max = max.max(fiber[i * stride]);
    }
    let mut total = T::zero();
    for i in 0..n {
        let e = (fiber[i * stride] - max).exp();
        fiber[i * stride] = e;
        total = total + e;
    }
    for i in 0..n {
        fiber[i * stride] = fiber[i * stride] / total;
    }
}

/// Applies `f(fiber, stride)` to every 1-D fiber along `axis`. The slice
/// handed to `f` starts at the fiber's first element.
fn for_each_fiber<T: Scalar>(shape: &[usize], axis: usize, data: &mut [T], mut f: impl FnMut(&mut [T], usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            let end = start + (len - 1) * inner + 1;
            f(&mut data[start..end], inner);
        }
    }
}

pub(crate) fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|v| *v - lse).collect()
}

/// Returns `(KL(p‖u), Σ p ln p)`.
fn kl_from_log_probs<T: Scalar>(probs: &[T], log_probs: &[T]) -> (T, T) {
    let neg_entropy = probs.iter().zip(log_probs).map(|(p, l)| *p * *l).sum::<T>();
    let kl = neg_entropy + T::lit(probs.len() as f64).ln();
    (kl.max(T::zero()), neg_entropy)
}

/// Softmax of a tensor along `axis`, outside any graph.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    validate_shape(logits.shape())?;
    let mut g = Graph::new();
    let x = g.input(logits.clone().with_requires_grad(false));
    let y = g.softmax(x, axis)?;
    Ok(g.tensor(y))
}
