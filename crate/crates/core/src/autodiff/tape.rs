//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs for the vector-Jacobian product. Nodes are only ever appended, so
//! the list is topologically ordered and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    /// `out[i] = x[index[i]]`; covers every pure rearrangement.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    AbsDiff {
        x: Var,
        target: Vec<T>,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record list for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one slot per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of a node, zeros when unreachable.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers every tensor of `store` as a differentiable leaf.
    pub fn register_params(&mut self, store: &ParamStore<T>) -> ParamVars {
        let vars = store.iter().map(|(_, t)| self.param(t.clone())).collect();
        ParamVars::new(vars)
    }

    /// Registers every tensor of `store` as a constant, for inference.
    pub fn register_frozen(&mut self, store: &ParamStore<T>) -> ParamVars {
        let vars = store.iter().map(|(_, t)| self.constant(t.clone())).collect();
        ParamVars::new(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let out = transpose(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x[t×d] + b[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, d) = self.value(x).dims2("add_row_bias")?;
        if self.shape(b) != [d] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)).take(t) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![t, d], data)?, Op::AddRowBias(x, b), rg))
    }

    /// `x·w + b`, recorded as a matmul followed by a row-bias add.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        if c == 0 {
            return Err(Error::invalid("softmax_rows needs at least one column"));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c).take(r) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::SoftmaxRows(x), rg))
    }

    /// Per-row standardization with population variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (t, d) = self.value(x).dims2("layer_norm")?;
        if d < 2 {
            return Err(Error::invalid("layer_norm needs at least two features"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > T::zero()) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (xhat, inv_std) = standardize_rows(self.value(x).data(), t, d, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Same-padded 2-D cross-correlation of `[c_in×H×W]` with `[c_out×c_in×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ci, h, w) = self.value(input).dims3("conv2d")?;
        let ks = self.shape(kernel).to_vec();
        let (co, kci, k) = match ks.as_slice() {
            &[co, kci, k1, k2] if k1 == k2 => (co, kci, k1),
            _ => return Err(Error::shape("conv2d", self.shape(input), &ks)),
        };
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel size must be odd, got {k}")));
        }
        if kci != ci {
            return Err(Error::shape("conv2d", self.shape(input), &ks));
        }
        if self.shape(bias) != [co] {
            return Err(Error::shape("conv2d", &ks, self.shape(bias)));
        }
        let geom = ConvGeom { ci, co, h, w, k };
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            geom,
        );
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![co, h, w], out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::invalid(format!(
                "gather index length {} does not fill shape {:?}",
                index.len(),
                shape
            )));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Depth-to-space: `[c·r²×H×W] → [c×rH×rW]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (cr, h, w) = self.value(x).dims3("pixel_shuffle")?;
        let (index, shape) = pixel_shuffle_index(cr, h, w, r)?;
        self.gather(x, index, &shape)
    }

    /// Space-to-depth, the inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("pixel_unshuffle")?;
        let (index, shape) = pixel_unshuffle_index(c, h, w, r)?;
        self.gather(x, index, &shape)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::invalid(format!(
                "column slice {start}..{} exceeds {c} columns",
                start + len
            )));
        }
        let index = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, index, &[r, len])
    }

    /// Stacks `a` above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2("concat_rows")?;
        let (rb, cb) = self.value(b).dims2("concat_rows")?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ra + rb, ca], data)?, Op::ConcatRows(a, b), rg))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols needs at least one input"))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.value(p).dims2("concat_cols")?;
            if rp != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &cp) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * cp..(i + 1) * cp]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `mean |x − target|` over all elements.
    pub fn mean_abs_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let n = self.value(x).len().max(1);
        self.abs_diff(x, target, T::one() / T::lit(n as f64))
    }

    /// `Σ |x − target|` over all elements.
    pub fn sum_abs_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.abs_diff(x, target, T::one())
    }

    fn abs_diff(&mut self, x: Var, target: &Tensor<T>, scale: T) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape("abs_error", self.shape(x), target.shape()));
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s * scale),
            Op::AbsDiff {
                x,
                target: target.data().to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// Fingerprint of the branch taken at every non-smooth point (ReLU
    /// inputs and L1 residual signs). Two forward passes with equal
    /// fingerprints evaluate the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        h.bit(v > T::zero());
                    }
                }
                Op::AbsDiff { x, target, .. } => {
                    for (&v, &t) in self.value(*x).data().iter().zip(target) {
                        let d = v - t;
                        h.bit(d > T::zero());
                        h.bit(d < T::zero());
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").expect("rank checked");
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let (r, c) = self.value(*a).dims2("transpose").expect("rank checked");
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(T::one(), g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((s, &gi), &bv) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *s = *s + gi * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((s, &gi), &av) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *s = *s + gi * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(T::one(), g, gx);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let d = gb.len();
                    if d > 0 {
                        for row in g.chunks_exact(d) {
                            axpy(T::one(), row, gb);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, &gi), &xv) in gx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        if xv > T::zero() {
                            *s = *s + gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let inner = dot(gr, yr);
                        for j in 0..c {
                            gxr[j] = gxr[j] + yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(d) {
                        axpy(T::one(), row, gb);
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * xr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let gain_v = self.value(*gain).data();
                    let dt = T::lit(d as f64);
                    let mut gxhat = vec![T::zero(); d];
                    for (r, ((gxr, gr), xr)) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            gxhat[j] = gr[j] * gain_v[j];
                        }
                        let s1: T = gxhat.iter().copied().sum();
                        let s2 = dot(&gxhat, xr);
                        let k = inv_std[r] / dt;
                        for j in 0..d {
                            gxr[j] = gxr[j] + k * (dt * gxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (ci, h, w) = self.value(*input).dims3("conv2d").expect("rank checked");
                let ks = self.shape(*kernel);
                let geom = ConvGeom {
                    ci,
                    co: ks[0],
                    h,
                    w,
                    k: ks[2],
                };
                if let Some(gb) = self.slot(grads, *bias) {
                    for (o, plane) in g.chunks_exact(h * w).enumerate() {
                        gb[o] = gb[o] + plane.iter().copied().sum();
                    }
                }
                if let Some(gk) = self.slot(grads, *kernel) {
                    conv2d_kernel_grad(self.value(*input).data(), g, gk, geom);
                }
                if let Some(gi) = self.slot(grads, *input) {
                    conv2d_input_grad(self.value(*kernel).data(), g, gi, geom);
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&i, &gi) in index.iter().zip(g) {
                        gx[i] = gx[i] + gi;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(T::one(), g, gx);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(T::one(), &g[..na], ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(T::one(), &g[na..], gb);
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let cp = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..r {
                            axpy(
                                T::one(),
                                &g[i * total + offset..i * total + offset + cp],
                                &mut gp[i * cp..(i + 1) * cp],
                            );
                        }
                    }
                    offset += cp;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for s in gx.iter_mut() {
                        *s = *s + g[0];
                    }
                }
            }
            Op::AbsDiff { x, target, scale } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let k = g[0] * *scale;
                    for ((s, &xv), &t) in gx.iter_mut().zip(self.value(*x).data()).zip(target) {
                        // subgradient 0 at the kink
                        if xv > t {
                            *s = *s + k;
                        } else if xv < t {
                            *s = *s - k;
                        }
                    }
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when
    /// `v` does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

// ── kernels ─────────────────────────────────────────────────────────

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// `c = op(a)·op(b)` (or `c +=` with `accumulate`), where `op` transposes
/// when the flag is set. Storage is row-major: `a` holds m×k (k×m when
/// transposed), `b` holds k×n (n×k when transposed), `c` holds m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let sa = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let sb = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length checks above cover every index of each view.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), sa, b.as_ptr(), sb, beta, c.as_mut_ptr(), (n as isize, 1));
    }
}

pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a, false, b, false, &mut out, false);
    out
}

fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Returns `(xhat, 1/sqrt(var+eps))` per row, population variance.
pub(crate) fn standardize_rows<T: Scalar>(x: &[T], t: usize, d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let dt = T::lit(d as f64);
    let mut xhat = Vec::with_capacity(t * d);
    let mut inv_std = Vec::with_capacity(t);
    for row in x.chunks_exact(d).take(t) {
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
    }
    (xhat, inv_std)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

/// Valid output range for tap offset `d` with half-width `p` over length `len`.
fn tap_range(d: usize, p: usize, len: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (len + p).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

fn conv2d_forward<T: Scalar>(inp: &[T], ker: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let ConvGeom { ci, co, h, w, k } = g;
    let p = k / 2;
    let mut out = vec![T::zero(); co * h * w];
    for o in 0..co {
        let oplane = &mut out[o * h * w..(o + 1) * h * w];
        oplane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..ci {
            let iplane = &inp[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = tap_range(dy, p, h);
                for dx in 0..k {
                    let wv = ker[((o * ci + i) * k + dy) * k + dx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = tap_range(dx, p, w);
                    for y in y0..y1 {
                        let yy = y + dy - p;
                        let orow = &mut oplane[y * w + x0..y * w + x1];
                        let irow = &iplane[yy * w + x0 + dx - p..yy * w + x1 + dx - p];
                        axpy(wv, irow, orow);
                    }
                }
            }
        }
    }
    out
}

fn conv2d_kernel_grad<T: Scalar>(inp: &[T], gout: &[T], gk: &mut [T], g: ConvGeom) {
    let ConvGeom { ci, co, h, w, k } = g;
    let p = k / 2;
    for o in 0..co {
        let gplane = &gout[o * h * w..(o + 1) * h * w];
        for i in 0..ci {
            let iplane = &inp[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = tap_range(dy, p, h);
                for dx in 0..k {
                    let (x0, x1) = tap_range(dx, p, w);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        let yy = y + dy - p;
                        s = s + dot(
                            &gplane[y * w + x0..y * w + x1],
                            &iplane[yy * w + x0 + dx - p..yy * w + x1 + dx - p],
                        );
                    }
                    let idx = ((o * ci + i) * k + dy) * k + dx;
                    gk[idx] = gk[idx] + s;
                }
            }
        }
    }
}

fn conv2d_input_grad<T: Scalar>(ker: &[T], gout: &[T], gin: &mut [T], g: ConvGeom) {
    let ConvGeom { ci, co, h, w, k } = g;
    let p = k / 2;
    for o in 0..co {
        let gplane = &gout[o * h * w..(o + 1) * h * w];
        for i in 0..ci {
            let iplane = &mut gin[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = tap_range(dy, p, h);
                for dx in 0..k {
                    let wv = ker[((o * ci + i) * k + dy) * k + dx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = tap_range(dx, p, w);
                    for y in y0..y1 {
                        let yy = y + dy - p;
                        axpy(
                            wv,
                            &gplane[y * w + x0..y * w + x1],
                            &mut iplane[yy * w + x0 + dx - p..yy * w + x1 + dx - p],
                        );
                    }
                }
            }
        }
    }
}

pub(crate) fn pixel_shuffle_index(cr: usize, h: usize, w: usize, r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "pixel_shuffle: {cr} channels not divisible by r²={}",
            r * r
        )));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut index = Vec::with_capacity(cr * h * w);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, i) = (oy / r, oy % r);
                let (x, j) = (ox / r, ox % r);
                let src_c = ch * r * r + i * r + j;
                index.push((src_c * h + y) * w + x);
            }
        }
    }
    Ok((index, vec![c, oh, ow]))
}

pub(crate) fn pixel_unshuffle_index(c: usize, h: usize, w: usize, r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!(
            "pixel_unshuffle: {h}×{w} not divisible by {r}"
        )));
    }
    let (sh, sw) = (h / r, w / r);
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                for y in 0..sh {
                    for x in 0..sw {
                        index.push((ch * h + y * r + i) * w + x * r + j);
                    }
                }
            }
        }
    }
    Ok((index, vec![c * r * r, sh, sw]))
}

struct Fnv(u64, u8, u32);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325, 0, 0)
    }

    fn bit(&mut self, b: bool) {
        self.1 = (self.1 << 1) | b as u8;
        self.2 += 1;
        if self.2 % 8 == 0 {
            self.byte();
        }
    }

    fn byte(&mut self) {
        self.0 ^= self.1 as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        self.1 = 0;
    }

    fn finish(mut self) -> u64 {
        if self.2 % 8 != 0 {
            self.byte();
        }
        self.0 ^ self.2 as u64
    }
}
