use std::collections::BTreeMap;

use super::kernels::{self, Bcast};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { x: Var, c: T },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Expand { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumLast { x: Var, k: usize },
    Upsample2x { x: Var },
    StraightThrough { x: Var },
    BceWithLogits { x: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which is
/// a valid topological order because every op only references earlier nodes.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a `requires_grad` leaf; zero-filled if the loss does not
    /// depend on it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault { op })
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Real>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, g).expect("gradient shape")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
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

    /// Looks up a named leaf.
    pub fn named(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Unnamed leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named parameter leaf. Names are unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        check_finite("param", &value)?;
        let v = self.leaf(value, requires_grad);
        self.names.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- matrix products -------------------------------------------------

    /// `op(a) · op(b)` over the last two axes.
    ///
    /// Leading (batch) axes must match, or one side must be plain 2-D and is
    /// shared across the other side's batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if ka != kb || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            ));
        }
        let batch_shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let nb = numel(&batch_shape);
        let mut out = vec![T::zero(); nb * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if bb.is_empty() && !ta {
            kernels::gemm(nb * m, ka, n, ad, false, bd, tb, &mut out);
        } else {
            let (sa_step, sb_step) = (
                if ba.is_empty() { 0 } else { m * ka },
                if bb.is_empty() { 0 } else { ka * n },
            );
            for i in 0..nb {
                kernels::gemm(
                    m,
                    ka,
                    n,
                    &ad[i * sa_step..i * sa_step + m * ka],
                    ta,
                    &bd[i * sb_step..i * sb_step + ka * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        check_finite("matmul", &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ (+ bias)`, the usual dense layer with `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape = kernels::broadcast_shape(name, self.shape(a), self.shape(b))?;
        let pa = kernels::plan(self.shape(a), &out_shape);
        let pb = kernels::plan(self.shape(b), &out_shape);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let total = numel(&out_shape);
        let data: Vec<T> = match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Suffix(l)) => ad
                .chunks(*l)
                .flat_map(|ch| ch.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..total).map(|i| f(ad[pa.at(i)], bd[pb.at(i)])).collect(),
        };
        let value = Tensor::new(&out_shape, data)?;
        check_finite(name, &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        check_finite("scale", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale { x, c }, rg))
    }

    /// `x + c` for a scalar constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(T::lit(c)));
        self.add(x, k)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * gelu_cdf(v));
        check_finite("gelu", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gelu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sigmoid { x }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let w = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(src.shape(), data)?;
        check_finite("softmax", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let w = *src.shape().last().unwrap();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    src.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / w;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_w = T::lit(1.0 / w as f64);
        for r in 0..rows {
            let row = &src.data()[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        check_finite("layer_norm", &value)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, axes);
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}..{}] of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = kernels::broadcast_shape("expand", self.shape(x), shape)?;
        if out != shape {
            return Err(Error::shape("expand", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let p = kernels::plan(self.shape(x), shape);
        let src = self.value(x).data();
        let data = (0..numel(shape)).map(|i| src[p.at(i)]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Expand { x }, rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        check_finite("sum", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        check_finite("mean", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean { x }, rg))
    }

    /// Sums over the trailing `k` axes.
    pub fn sum_last(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if k == 0 || k >= shape.len() {
            return Err(Error::shape("sum_last", format!("k={k} for {shape:?}")));
        }
        let keep = &shape[..shape.len() - k];
        let inner = numel(&shape[shape.len() - k..]);
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum())
            .collect();
        let value = Tensor::new(keep, data)?;
        check_finite("sum_last", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumLast { x, k }, rg))
    }

    // ---- image / special -------------------------------------------------

    /// Fixed bilinear 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("upsample2x", format!("{shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = numel(&shape[..shape.len() - 2]);
        let data = kernels::upsample2x(self.value(x).data(), planes, h, w);
        let mut out = shape;
        let nd = out.len();
        out[nd - 2] = 2 * h;
        out[nd - 1] = 2 * w;
        let value = Tensor::new(&out, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    /// Node whose forward value is `value` and whose backward passes the
    /// upstream gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", value.shape(), self.shape(x)),
            ));
        }
        check_finite("straight_through", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::StraightThrough { x }, rg))
    }

    /// Elementwise binary cross-entropy of `sigmoid(x)` against a constant
    /// target, in the overflow-free logits form.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if target.shape() != self.shape(x) {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(x), target.shape()),
            ));
        }
        let value = self.value(x).zip_map(target, |z, t| {
            z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
        })?;
        check_finite("bce_with_logits", &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf gets a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out[i] = Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        let by_name = self
            .names
            .iter()
            .filter_map(|(k, v)| out[v.0].clone().map(|g| (k.clone(), g)))
            .collect();
        Ok(Gradients { grads: out, by_name })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let pa = kernels::plan(va.shape(), out_shape);
                let pb = kernels::plan(vb.shape(), out_shape);
                let (ad, bd) = (va.data(), vb.data());
                if self.wants(*a) {
                    let local: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().enumerate().map(|(i, &gi)| gi * bd[pb.at(i)]).collect(),
                        Binary::Div => gd.iter().enumerate().map(|(i, &gi)| gi / bd[pb.at(i)]).collect(),
                    };
                    add_into(&mut grads[a.0], va.shape(), pa.reduce(&local, va.len()));
                }
                if self.wants(*b) {
                    let local: Vec<T> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&gi| -gi).collect(),
                        Binary::Mul => gd.iter().enumerate().map(|(i, &gi)| gi * ad[pa.at(i)]).collect(),
                        Binary::Div => gd
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| {
                                let y = bd[pb.at(i)];
                                -gi * ad[pa.at(i)] / (y * y)
                            })
                            .collect(),
                    };
                    add_into(&mut grads[b.0], vb.shape(), pb.reduce(&local, vb.len()));
                }
            }
            Op::Scale { x, c } => {
                add_into(&mut grads[x.0], self.shape(*x), gd.iter().map(|&v| v * *c).collect());
            }
            Op::Gelu { x } => {
                let xd = self.value(*x).data();
                let local = gd
                    .iter()
                    .zip(xd)
                    .map(|(&gi, &v)| gi * (gelu_cdf(v) + v * gelu_pdf(v)))
                    .collect();
                add_into(&mut grads[x.0], self.shape(*x), local);
            }
            Op::Sigmoid { x } => {
                let yd = node.value.data();
                let local = gd.iter().zip(yd).map(|(&gi, &y)| gi * y * (T::one() - y)).collect();
                add_into(&mut grads[x.0], self.shape(*x), local);
            }
            Op::Softmax { x } => {
                let yd = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut local = vec![T::zero(); yd.len()];
                for ((lr, yr), gr) in local.chunks_mut(w).zip(yd.chunks(w)).zip(gd.chunks(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..w {
                        lr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], self.shape(*x), local);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let w = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); w];
                    for (gr, hr) in gd.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &[w], dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); w];
                    for gr in gd.chunks(w) {
                        for j in 0..w {
                            db[j] += gr[j];
                        }
                    }
                    add_into(&mut grads[beta.0], &[w], db);
                }
                if self.wants(*x) {
                    let inv_w = T::lit(1.0 / w as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(w)
                        .zip(gd.chunks(w))
                        .zip(xhat.chunks(w))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..w {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 * inv_w;
                        m2 = m2 * inv_w;
                        for j in 0..w {
                            dr[j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], self.shape(*x), dx);
                }
            }
            Op::Reshape { x } | Op::StraightThrough { x } => {
                add_into(&mut grads[x.0], self.shape(*x), gd.to_vec());
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (data, _) = kernels::permute(gd, g.shape(), &inv);
                add_into(&mut grads[x.0], self.shape(*x), data);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let len = g.shape()[*axis];
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let mut dx = vec![T::zero(); numel(shape)];
                for o in 0..outer {
                    let base = o * shape[*axis] * inner;
                    dx[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut grads[x.0], shape, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&gd[o * row + offset..o * row + offset + len]);
                        }
                        add_into(&mut grads[v.0], self.shape(v), dv);
                    }
                    offset += len;
                }
            }
            Op::Expand { x } => {
                let p = kernels::plan(self.shape(*x), g.shape());
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], self.shape(*x), p.reduce(gd, n));
            }
            Op::Sum { x } => {
                add_into(&mut grads[x.0], self.shape(*x), vec![gd[0]; self.value(*x).len()]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let v = gd[0] / T::lit(n as f64);
                add_into(&mut grads[x.0], self.shape(*x), vec![v; n]);
            }
            Op::SumLast { x, k } => {
                let shape = self.shape(*x);
                let inner = numel(&shape[shape.len() - k..]);
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect();
                add_into(&mut grads[x.0], shape, dx);
            }
            Op::Upsample2x { x } => {
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes = numel(&shape[..shape.len() - 2]);
                add_into(
                    &mut grads[x.0],
                    shape,
                    kernels::upsample2x_backward(gd, planes, h, w),
                );
            }
            Op::BceWithLogits { x, target } => {
                let xd = self.value(*x).data();
                let local = gd
                    .iter()
                    .zip(xd)
                    .zip(target)
                    .map(|((&gi, &z), &t)| gi * (sigmoid(z) - t))
                    .collect();
                add_into(&mut grads[x.0], self.shape(*x), local);
            }
        }
        Ok(())
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;
        let gd = g.data();
        let nb = gd.len() / (m * n);
        let (ad, bd) = (va.data(), vb.data());

        if !b_batched && !ta {
            // `a` was flattened into one tall matrix in the forward pass.
            let big_m = nb * m;
            if self.wants(a) {
                let mut da = vec![T::zero(); ad.len()];
                kernels::gemm(big_m, n, k, gd, false, bd, !tb, &mut da);
                add_into(&mut grads[a.0], sa, da);
            }
            if self.wants(b) {
                let mut db = vec![T::zero(); bd.len()];
                if tb {
                    kernels::gemm(n, big_m, k, gd, true, ad, false, &mut db);
                } else {
                    kernels::gemm(k, big_m, n, ad, true, gd, false, &mut db);
                }
                add_into(&mut grads[b.0], sb, db);
            }
            return;
        }

        let a_step = if a_batched { m * k } else { 0 };
        let b_step = if b_batched { k * n } else { 0 };
        if self.wants(a) {
            let mut da = vec![T::zero(); ad.len()];
            for i in 0..nb {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let bi = &bd[i * b_step..i * b_step + k * n];
                let dst = &mut da[i * a_step..i * a_step + m * k];
                if ta {
                    kernels::gemm(k, n, m, bi, tb, gi, true, dst);
                } else {
                    kernels::gemm(m, n, k, gi, false, bi, !tb, dst);
                }
            }
            add_into(&mut grads[a.0], sa, da);
        }
        if self.wants(b) {
            let mut db = vec![T::zero(); bd.len()];
            for i in 0..nb {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * a_step..i * a_step + m * k];
                let dst = &mut db[i * b_step..i * b_step + k * n];
                if tb {
                    kernels::gemm(n, m, k, gi, true, ai, ta, dst);
                } else {
                    kernels::gemm(k, m, n, ai, !ta, gi, false, dst);
                }
            }
            add_into(&mut grads[b.0], sb, db);
        }
    }
}
