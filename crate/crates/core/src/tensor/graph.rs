use std::sync::Arc;

use super::kernels::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    Cosine(Var, Var),
    Silu(Var),
    Tanh(Var),
    Abs(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// A node requires a gradient when it is a tracked leaf or when any of its
/// inputs does; untracked subgraphs are skipped during the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of the tracked leaves, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked input: receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_leaf(t, false)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor, &Tensor)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok((ta, tb))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = dims2("matmul", ta)?;
        let (k2, m) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("add", a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("sub", a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same("mul", a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = dims2(op, ta)?;
        if tr.len() != m {
            return Err(shape_err(op, ta, tr));
        }
        Ok((n, m))
    }

    /// `a[n×m] + row[m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, b) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    /// `a[n×m] ⊙ row[m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, w) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *x *= w;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        self.push("mul_row", value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, m) = dims2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            let (r, c) = dims2("concat_rows", t)?;
            if c != m {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, m], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out.flat[i] = a.flat[index[i]]`; indices may repeat or skip.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let n: usize = shape.iter().product();
        if n != index.len() || index.iter().any(|&i| i >= ta.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let src = ta.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", value, Op::Gather(a, index), &[a])
    }

    /// Nearest-neighbour ×2 upsampling of an `[h*w, c]` feature map
    /// stored row-major over pixels.
    pub fn upsample_nearest2x(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = dims2("upsample_nearest2x", self.value(a))?;
        if rows != h * w {
            return Err(Error::Shape {
                op: "upsample_nearest2x",
                lhs: vec![rows, c],
                rhs: vec![h, w],
            });
        }
        let index = upsample_index(h, w, c);
        self.gather(a, index.into(), &[4 * h * w, c])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// L2 norm of all elements.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).norm();
        if n == 0.0 {
            return Err(Error::ZeroVector { op: "norm" });
        }
        self.push("norm", Tensor::scalar(n), Op::Norm(a), &[a])
    }

    /// Cosine similarity of the flattened inputs; zero-norm inputs are an error.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("cosine", ta, tb));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector { op: "cosine" });
        }
        let c = (dot(ta.data(), tb.data()) / (na * nb)).clamp(-1.0, 1.0);
        self.push("cosine", Tensor::scalar(c), Op::Cosine(a, b), &[a, b])
    }

    /// Smooth ReLU-like nonlinearity `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("silu", value, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.abs()).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("abs", value, Op::Abs(a), &[a])
    }

    /// Sum of squared elements.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        // Interior adjoints were consumed; only leaves keep theirs.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = dims2("matmul", ta)?;
                let m = tb.shape()[1];
                self.accumulate(grads, *a, |ga| matmul_bt_acc(gd, tb.data(), ga, n, k, m));
                self.accumulate(grads, *b, |gb| matmul_at_acc(ta.data(), gd, gb, n, k, m));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(gd).zip(tb) {
                        *x += y * z;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(gd).zip(ta) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let m = self.value(*row).len();
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *row, |gr| {
                    for chunk in gd.chunks_exact(m) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let ta = self.value(*a).data();
                let tr = self.value(*row).data();
                let m = tr.len();
                self.accumulate(grads, *a, |ga| {
                    for (gac, gc) in ga.chunks_exact_mut(m).zip(gd.chunks_exact(m)) {
                        for ((x, y), w) in gac.iter_mut().zip(gc).zip(tr) {
                            *x += y * w;
                        }
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (gc, ac) in gd.chunks_exact(m).zip(ta.chunks_exact(m)) {
                        for ((x, y), z) in gr.iter_mut().zip(gc).zip(ac) {
                            *x += y * z;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += s * y;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |ga| {
                    for (&i, y) in index.iter().zip(gd) {
                        ga[i] += y;
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Norm(a) => {
                let n = node.value.data()[0];
                let ta = self.value(*a).data();
                let s = gd[0] / n;
                self.accumulate(grads, *a, |ga| {
                    for (x, v) in ga.iter_mut().zip(ta) {
                        *x += s * v;
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                let c = dot(ta.data(), tb.data()) / (na * nb);
                let s = gd[0];
                let (ad, bd) = (ta.data(), tb.data());
                // d cos / da = b/(|a||b|) - cos * a/|a|^2
                self.accumulate(grads, *a, |ga| {
                    for ((x, av), bv) in ga.iter_mut().zip(ad).zip(bd) {
                        *x += s * (bv / (na * nb) - c * av / (na * na));
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, bv), av) in gb.iter_mut().zip(bd).zip(ad) {
                        *x += s * (av / (na * nb) - c * bv / (nb * nb));
                    }
                });
            }
            Op::Silu(a) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(ta) {
                        let s = sigmoid(v);
                        *x += y * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), t) in ga.iter_mut().zip(gd).zip(out) {
                        *x += y * (1.0 - t * t);
                    }
                });
            }
            Op::Abs(a) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(gd).zip(ta) {
                        let sign = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *x += y * sign;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Flat source index for each element of a ×2 nearest-neighbour upsample.
pub(crate) fn upsample_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(h2 * w2 * c);
    for y in 0..h2 {
        for x in 0..w2 {
            let src = (y / 2) * w + x / 2;
            idx.extend((0..c).map(|ch| src * c + ch));
        }
    }
    idx
}

/// Index that rearranges `[h*w, 4*c]` (four parity blocks of `c` channels per
/// low-resolution pixel) into `[2h*2w, c]`.
pub(crate) fn depth_to_space_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(h2 * w2 * c);
    for y in 0..h2 {
        for x in 0..w2 {
            let src = (y / 2) * w + x / 2;
            let parity = (y % 2) * 2 + x % 2;
            idx.extend((0..c).map(|ch| src * 4 * c + parity * c + ch));
        }
    }
    idx
}

/// Index that folds each 2×2 block of an `[h*w, c]` map into one pixel of
/// `[(h/2)*(w/2), 4*c]`.
pub(crate) fn space_to_depth_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h2 {
        for x in 0..w2 {
            for parity in 0..4 {
                let (dy, dx) = (parity / 2, parity % 2);
                let src = (2 * y + dy) * w + 2 * x + dx;
                idx.extend((0..c).map(|ch| src * c + ch));
            }
        }
    }
    idx
}

impl Graph {
    /// Pixel-shuffle `[h*w, 4c]` → `[2h*2w, c]`.
    pub fn depth_to_space(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, c4) = dims2("depth_to_space", self.value(a))?;
        if rows != h * w || c4 % 4 != 0 {
            return Err(Error::Shape {
                op: "depth_to_space",
                lhs: vec![rows, c4],
                rhs: vec![h, w],
            });
        }
        let c = c4 / 4;
        let index = depth_to_space_index(h, w, c);
        self.gather(a, index.into(), &[4 * h * w, c])
    }

    /// Inverse pixel-shuffle `[h*w, c]` → `[(h/2)(w/2), 4c]`.
    pub fn space_to_depth(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = dims2("space_to_depth", self.value(a))?;
        if rows != h * w || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "space_to_depth",
                lhs: vec![rows, c],
                rhs: vec![h, w],
            });
        }
        let index = space_to_depth_index(h, w, c);
        self.gather(a, index.into(), &[(h / 2) * (w / 2), 4 * c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        let err = g.matmul(a, a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn cosine_of_self_is_one_and_zero_is_error() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.3, -1.2, 4.0])).unwrap();
        let c = g.cosine(v, v).unwrap();
        assert!((g.value(c).item().unwrap() - 1.0).abs() < 1e-15);
        let z = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.cosine(v, z), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn mean_of_zeros() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4, 5])).unwrap();
        let m = g.mean(z).unwrap();
        assert_eq!(g.value(m).item(), Some(0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut rand::rng())).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let l = g.sum_squares(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let p = g.mul(x, c).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
        assert!(g.leaf(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::new();
        // 1x2 map, 1 channel
        let x = g.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let u = g.upsample_nearest2x(x, 1, 2).unwrap();
        assert_eq!(g.value(u).shape(), &[8, 1]);
        assert_eq!(
            g.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn space_depth_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..32).map(f64::from).collect();
        let x = g.constant(t(&[16, 2], &data)).unwrap();
        let d = g.space_to_depth(x, 4, 4).unwrap();
        assert_eq!(g.value(d).shape(), &[4, 8]);
        let back = g.depth_to_space(d, 2, 2).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn concat_rows_stacks() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let bad = g.constant(t(&[1, 3], &[0.0; 3])).unwrap();
        assert!(g.concat_rows(&[a, bad]).is_err());
    }
}
