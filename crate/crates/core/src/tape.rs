//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes only reference earlier
//! nodes, so the tape is always in topological order and backward is a single
//! reverse sweep. Leaves created with [`Tape::param`] accumulate gradients
//! across repeated `backward` calls until [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied operation: given the input values, the
/// output value and the output gradient, returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        probs: Var,
        labels: Vec<T>,
        weights: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Probability clamp applied before taking logarithms in [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the new end become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(true);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Tensor(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op_name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    fn row_broadcast_dims(&self, x: Var, row: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.mat_dims(x, op)?;
        let r = self.shape(row);
        let ok = match r {
            [c] => *c == n,
            [1, c] => *c == n,
            _ => false,
        };
        if !ok {
            return Err(shape_err(op, self.shape(x), r));
        }
        Ok((m, n))
    }

    /// `x + 1·r`: adds a length-n row to every row of an m×n matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_dims(x, row, "add_row")?;
        let r = self.value(row).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    /// `x ⊙ 1·g`: scales every row of x channel-wise by the same gate row.
    pub fn mul_row(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_dims(x, gate, "mul_row")?;
        let g = self.value(gate).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % n])
            .collect();
        let t = Tensor::new(vx.shape(), data)?;
        Ok(self.push(t, Op::MulRow(x, gate), &[x, gate]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(T::zero())).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to the columns where `keep` is true.
    /// Masked columns get exactly zero weight; a fully masked row is all
    /// zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "softmax_rows")?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(shape_err("softmax_rows_masked", self.shape(a), &[k.len()]));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        let live = |j: usize| keep.is_none_or(|k| k[j]);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if live(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if live(j) {
                    let e = (v - mx).exp();
                    o[j] = e;
                    z += e;
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Row-major flatten to a 1-D vector.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, &[n]).expect("flatten preserves count")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Tensor("concat_rows of nothing".into()))?;
        let (_, n) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Tensor("concat_cols of nothing".into()))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(shape_err("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(&[len, n], data)?;
        Ok(self.push(t, Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(&[m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x: a, start }, &[a]))
    }

    /// Gathers rows by index (embedding lookup). Backward scatter-adds, so
    /// only the gathered rows receive gradient.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "select_rows")?;
        if rows.is_empty() {
            return Err(Error::Tensor("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err("select_rows", self.shape(a), &[bad]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(&[rows.len(), n], data)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
            &[a],
        ))
    }

    /// Writes exact zeros into every row where `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "mask_rows")?;
        if keep.len() != m {
            return Err(shape_err("mask_rows", self.shape(a), &[keep.len()]));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                data[i * n..(i + 1) * n].fill(T::zero());
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(
            t,
            Op::MaskRows {
                x: a,
                keep: keep.to_vec(),
            },
            &[a],
        ))
    }

    /// Column sums: m×n → 1×n.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let t = Tensor::new(&[1, n], out)?;
        Ok(self.push(t, Op::SumRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_count(v.len());
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Weighted binary cross-entropy summed over the elements of `probs`:
    /// `Σ wᵢ · −[yᵢ ln p̂ᵢ + (1 − yᵢ) ln(1 − p̂ᵢ)]` with `p̂` clamped to
    /// `[BCE_EPS, 1 − BCE_EPS]`. A zero weight removes an element from both
    /// the value and the gradient.
    pub fn bce(&mut self, probs: Var, labels: &[T], weights: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if labels.len() != p.len() || weights.len() != p.len() {
            return Err(shape_err("bce", p.shape(), &[labels.len(), weights.len()]));
        }
        if let Some(y) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Tensor(format!("bce label {y} is not 0 or 1")));
        }
        let eps = T::lit(BCE_EPS);
        let mut total = T::zero();
        for ((&pi, &yi), &wi) in p.data().iter().zip(labels).zip(weights) {
            if wi == T::zero() {
                continue;
            }
            let pc = pi.max(eps).min(T::one() - eps);
            total += wi * -(yi * pc.ln() + (T::one() - yi) * (T::one() - pc).ln());
        }
        let op = Op::Bce {
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op, &[probs]))
    }

    /// Records an operation whose value and backward rule come from the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(value, op, inputs)
    }

    /// Propagates d(loss)/d(node) back to every differentiable leaf and adds
    /// it to the leaf's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Tensor(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    gemm_nt_acc(m, n, k, g, vb.data(), acc!(*a));
                }
                if wants(*b) {
                    gemm_tn_acc(k, m, n, va.data(), g, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let ga = acc!(*a);
                for r in 0..m {
                    for c in 0..n {
                        ga[c * m + r] += g[r * n + c];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_assign(acc!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_assign(acc!(*a), g);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, &gi)| *x += gi * *s);
            }
            Op::AddRow(x, r) => {
                let n = out.cols();
                if wants(*x) {
                    add_assign(acc!(*x), g);
                }
                if wants(*r) {
                    let gr = acc!(*r);
                    for (idx, &gi) in g.iter().enumerate() {
                        gr[idx % n] += gi;
                    }
                }
            }
            Op::MulRow(x, r) => {
                let n = out.cols();
                let vx = nodes[x.0].value.data();
                let vr = nodes[r.0].value.data();
                if wants(*x) {
                    let gx = acc!(*x);
                    for (idx, (o, &gi)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gi * vr[idx % n];
                    }
                }
                if wants(*r) {
                    let gr = acc!(*r);
                    for (idx, (&gi, &xi)) in g.iter().zip(vx).enumerate() {
                        gr[idx % n] += gi * xi;
                    }
                }
            }
            Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                let ga = acc!(*a);
                for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(va) {
                    if xi > T::zero() {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc!(*a);
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gi * y * (T::one() - y);
                }
            }
            Op::Softmax(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let ga = acc!(*a);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        ga[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Reshape(a) => add_assign(acc!(*a), g),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        add_assign(acc!(p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..m {
                            add_assign(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * n + col..r * n + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                let gx = acc!(*x);
                add_assign(&mut gx[start * n..start * n + g.len()], g);
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (out.shape()[0], out.shape()[1]);
                let n = nodes[x.0].value.cols();
                let gx = acc!(*x);
                for r in 0..m {
                    add_assign(
                        &mut gx[r * n + start..r * n + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            Op::SelectRows { x, rows } => {
                let n = out.cols();
                let gx = acc!(*x);
                for (k, &r) in rows.iter().enumerate() {
                    add_assign(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
            Op::MaskRows { x, keep } => {
                let n = out.cols();
                let gx = acc!(*x);
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        add_assign(&mut gx[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SumRows(a) => {
                let n = out.cols();
                let ga = acc!(*a);
                for (idx, o) in ga.iter_mut().enumerate() {
                    *o += g[idx % n];
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc!(*a).iter_mut().for_each(|o| *o += g0);
            }
            Op::Mean(a) => {
                let ga = acc!(*a);
                let g0 = g[0] / T::from_count(ga.len());
                ga.iter_mut().for_each(|o| *o += g0);
            }
            Op::Bce {
                probs,
                labels,
                weights,
            } => {
                let eps = T::lit(BCE_EPS);
                let p = nodes[probs.0].value.data();
                let gp = acc!(*probs);
                for (k, o) in gp.iter_mut().enumerate() {
                    let (pi, yi, wi) = (p[k], labels[k], weights[k]);
                    if wi == T::zero() || pi <= eps || pi >= T::one() - eps {
                        continue;
                    }
                    *o += g[0] * wi * (-yi / pi + (T::one() - yi) / (T::one() - pi));
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gs = backward(&vals, out, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if wants(v) {
                        add_assign(acc!(v), &gv);
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut [T] {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
