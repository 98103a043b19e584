//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is an arena of nodes. Every op appends its output node and,
//! when recording and at least one input requires a gradient, the op that
//! produced it. Node indices are a topological order by construction, so
//! [`Tape::backward`] is a single reverse sweep.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    LnClamped(Var, F),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    Pick { x: Var, index: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    MulConst { x: Var, factor: Vec<F> },
    Sum(Var),
}

struct Node<'a, F: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [F]>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Arena of recorded values and ops for one forward pass.
///
/// Parameters are bound by reference (`'a`) so binding a model does not
/// copy its weights.
pub struct Tape<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    recording: bool,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Real> Tape<'a, F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates ops without recording anything for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a recorded op.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let requires_grad = tensor.requires_grad() && self.recording;
        let shape = tensor.shape().to_vec();
        self.push_raw(shape, Cow::Owned(tensor.into_data()), Op::Leaf, requires_grad)
    }

    /// Borrows `tensor` as a leaf; it takes part in backward iff it requires grad.
    pub fn param(&mut self, tensor: &'a Tensor<F>) -> Var {
        let requires_grad = tensor.requires_grad() && self.recording;
        self.push_raw(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Cow<'a, [F]>, op: Op<F>, rg: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(shape, Cow::Owned(value), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- ops -------------------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`, or `a · bᵀ` with `b[B×n×k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bs, m, k, n) = match (sa, sb, trans_b) {
            ([b1, m, k], [b2, k2, n], false) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            ([b1, m, k], [b2, n, k2], true) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("batch_matmul", sa, sb)),
        };
        let mut out = vec![F::zero(); bs * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for ((ai, bi), oi) in av
            .chunks_exact(m * k)
            .zip(bv.chunks_exact(k * n))
            .zip(out.chunks_exact_mut(m * n))
        {
            if trans_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        Ok(self.push(vec![bs, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias).iter().product::<usize>() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: F) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(eps).ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::LnClamped(x, eps), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain).iter().product::<usize>() != d
            || self.shape(bias).iter().product::<usize>() != d
        {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let dn = F::lit(d as f64);
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let s = (var + eps).sqrt().recip();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(shape, out, op, &[x, gain, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (out, out_shape) = permute_data(self.value(x), &shape, perm);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Selects slices along axis 0 (repeats allowed).
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if index.is_empty() {
            return Err(Error::Contract("gather with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Contract(format!("gather index {bad} out of range for {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.push(
            out_shape,
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[r] = x[r, index[r]]` for `x[rows×c]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = match shape[..] {
            [r, c] if r == index.len() && index.iter().all(|&i| i < c) => (r, c),
            _ => return Err(Error::shape("pick", &shape, &[index.len()])),
        };
        let xv = self.value(x);
        let out = (0..rows).map(|r| xv[r * c + index[r]]).collect();
        Ok(self.push(
            vec![rows],
            out,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: F) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskedFill { x, mask }, &[x]))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, factor: Vec<F>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[factor.len()]));
        }
        let out = self.value(x).iter().zip(&factor).map(|(&v, &c)| v * c).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, factor }, &[x]))
    }

    /// Inverted dropout; the identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let factor = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, n.recip())
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ---- backward --------------------------------------------------------

    /// Populates the gradient of every requires-grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| -> &[F] { &nodes[v.0].value };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(val(*a), g, gb, k, m, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &val(*b)[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gt, bt, out, m, n, k);
                        } else {
                            gemm_nt(gt, bt, out, m, n, k);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &val(*a)[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gt, at, out, n, m, k);
                        } else {
                            gemm_tn(at, gt, out, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, F::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, F::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, F::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, -F::one());
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o = *o + gv * bv;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o = *o + gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, F::one());
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        axpy(gb, row, F::one());
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, *factor);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, F::one());
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > F::zero() {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::LnClamped(x, eps) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > *eps {
                            *o = *o + gv / xv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(&node.shape, *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let s: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                let p = at(j);
                                gx[p] = gx[p] + y[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for grow in g.chunks_exact(d) {
                        axpy(gb, grow, F::one());
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let gain_v = val(*gain);
                    let dn = F::lit(d as f64);
                    let mut dh = vec![F::zero(); d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gain_v[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / dn;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_data(g, &node.shape, &inverse);
                    axpy(gx, &back, F::one());
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    if let Some(gv) = slot(nodes, grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(&mut gv[o * chunk..(o + 1) * chunk], src, F::one());
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, index } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let row = g.len() / index.len();
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut gx[i * row..(i + 1) * row], &g[r * row..(r + 1) * row], F::one());
                    }
                }
            }
            Op::Pick { x, index } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = nodes[x.0].shape[1];
                    for (r, &i) in index.iter().enumerate() {
                        gx[r * c + i] = gx[r * c + i] + g[r];
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &c) in gx.iter_mut().zip(g).zip(factor) {
                        *o = *o + gv * c;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
        }
    }
}

/// Accumulator for `v`, or None when it needs no gradient.
fn slot<'g, F: Real>(nodes: &[Node<'_, F>], grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n.value.len()]))
}

#[inline]
fn axpy<F: Real>(acc: &mut [F], x: &[F], a: F) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<F: Copy>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; rank];
    let mut offset = 0;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}
