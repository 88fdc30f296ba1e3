//! Reverse-mode differentiation over a linear record of kernels.
//!
//! Every kernel computes its forward value eagerly and records enough of its
//! inputs to produce vector-Jacobian products later. [`Tape::backward`] walks
//! the record once, newest node first, summing gradient contributions.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, cosine_slice, dot, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows: `m×n -> n`.
    Rows,
    /// Reduce over columns: `m×n -> m`.
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Outer(Var, Var),
    Scale(Var, Var),
    DivScalar(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LogFloor(Var, T),
    Concat(Vec<Var>),
    Slice(Var, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Softmax(Var),
    Cosine(Var, Var),
    RowCosine(Var, Var),
    Max(Var, Axis, Vec<usize>),
    SumAxis(Var, Axis),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
    ScatterAdd(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices in the order their backward rules ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Single-threaded record of executed kernels.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    corrupt_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_backward: false,
        }
    }

    /// Fault injection: the `tanh` backward rule is scaled by 1.5.
    #[doc(hidden)]
    pub fn with_corrupted_backward() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_backward: true,
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

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok(s[0])
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<()> {
        if self.shape(v) != [1] {
            return Err(Error::dim(op, self.shape(v), &[1]));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- kernels -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = tensor::matvec(self.val(w), self.val(x))?;
        Ok(self.push(out, Op::MatVec(w, x), &[w, x]))
    }

    /// `aᵀ · m` for `a: n`, `m: n×k`, i.e. the `a`-weighted sum of rows.
    pub fn vecmat(&mut self, a: Var, m: Var) -> Result<Var> {
        let n = self.expect_vector("vecmat", a)?;
        let (rows, k) = self.expect_matrix("vecmat", m)?;
        if rows != n {
            return Err(Error::dim("vecmat", self.shape(a), self.shape(m)));
        }
        let (av, mv) = (self.val(a).data(), self.val(m).data());
        let mut out = vec![T::zero(); k];
        for i in 0..n {
            let w = av[i];
            for (o, &x) in out.iter_mut().zip(&mv[i * k..(i + 1) * k]) {
                *o = *o + w * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat(a, m), &[a, m]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .val(a)
            .zip_map(self.val(b), "min", |x, y| if x <= y { x } else { y })?;
        Ok(self.push(out, Op::Min(a, b), &[a, b]))
    }

    /// Adds vector `r` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, r, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, r), &[a, r]))
    }

    /// Multiplies every row of matrix `a` elementwise by vector `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, r, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, r), &[a, r]))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        r: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (m, n) = self.expect_matrix(op, a)?;
        if self.shape(r) != [n] {
            return Err(Error::dim(op, self.shape(a), self.shape(r)));
        }
        let rv = self.val(r).data();
        let data = self
            .val(a)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(vec![m, n], data)
    }

    /// `a bᵀ` for vectors `a: m`, `b: n`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.expect_vector("outer", a)?;
        let n = self.expect_vector("outer", b)?;
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        let data = av
            .iter()
            .flat_map(|&x| bv.iter().map(move |&y| x * y))
            .collect();
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Outer(a, b), &[a, b]))
    }

    /// `x · s` for a one-element `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar("scale", s)?;
        let sv = self.val(s).item();
        let out = self.val(x).map(|v| v * sv);
        Ok(self.push(out, Op::Scale(x, s), &[x, s]))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_scalar("div_scalar", s)?;
        let sv = self.val(s).item();
        let out = self.val(x).map(|v| v / sv);
        Ok(self.push(out, Op::DivScalar(x, s), &[x, s]))
    }

    /// `a·x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.val(x).map(|v| a * v + b);
        self.push(out, Op::Affine(x, a), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.val(x).map(T::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.val(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        let out = self.val(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogFloor(x, floor), &[x])
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            self.expect_vector("concat", p)?;
            data.extend_from_slice(self.val(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Contiguous sub-vector `x[start..start+len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.expect_vector("slice", x)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice", &[n], &[start, len]));
        }
        let out = Tensor::vector(self.val(x).data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(x, start), &[x]))
    }

    /// Stacks equally sized vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::contract("stack of zero rows"))?;
        let n = self.expect_vector("stack_rows", first)?;
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.shape(r) != [n] {
                return Err(Error::dim("stack_rows", &[n], self.shape(r)));
            }
            data.extend_from_slice(self.val(r).data());
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let (rows, _) = self.expect_matrix("row", m)?;
        if i >= rows {
            return Err(Error::dim("row", self.shape(m), &[i]));
        }
        let out = Tensor::vector(self.val(m).row(i).to_vec());
        Ok(self.push(out, Op::Row(m, i), &[m]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax(self.val(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Cosine similarity of two vectors as a one-element tensor.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_vector("cosine", a)?;
        self.same_shape("cosine", a, b)?;
        let (c, _, _) = cosine_slice(self.val(a).data(), self.val(b).data());
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// Row-wise cosine of two `m×n` matrices, giving `m` values.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.expect_matrix("row_cosine", a)?;
        self.same_shape("row_cosine", a, b)?;
        let out: Vec<T> = self
            .val(a)
            .data()
            .chunks_exact(n)
            .zip(self.val(b).data().chunks_exact(n))
            .map(|(ra, rb)| cosine_slice(ra, rb).0)
            .collect();
        Ok(self.push(Tensor::vector(out), Op::RowCosine(a, b), &[a, b]))
    }

    /// Maximum over an axis of a matrix; ties resolve to the smallest index.
    pub fn max_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.expect_matrix("max_axis", x)?;
        let xv = self.val(x);
        let (outer, inner) = match axis {
            Axis::Rows => (n, m),
            Axis::Cols => (m, n),
        };
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::with_capacity(outer);
        for o in 0..outer {
            let at = |k: usize| match axis {
                Axis::Rows => xv.at(k, o),
                Axis::Cols => xv.at(o, k),
            };
            let mut best = 0;
            for k in 1..inner {
                if at(k) > at(best) {
                    best = k;
                }
            }
            vals.push(at(best));
            arg.push(best);
        }
        Ok(self.push(Tensor::vector(vals), Op::Max(x, axis, arg), &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.expect_matrix("sum_axis", x)?;
        let xv = self.val(x);
        let vals = match axis {
            Axis::Rows => (0..n).map(|j| (0..m).map(|i| xv.at(i, j)).sum()).collect(),
            Axis::Cols => (0..m).map(|i| xv.row(i).iter().copied().sum()).collect(),
        };
        Ok(self.push(Tensor::vector(vals), Op::SumAxis(x, axis), &[x]))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_vector("dot", a)?;
        self.same_shape("dot", a, b)?;
        let d = dot(self.val(a).data(), self.val(b).data());
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), &[a, b]))
    }

    /// Selects entry `i` of a vector as a one-element tensor.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.expect_vector("pick", x)?;
        if i >= n {
            return Err(Error::dim("pick", &[n], &[i]));
        }
        let v = self.val(x).get(i);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, i), &[x]))
    }

    /// `out[index[i]] += x[i]` into a zero vector of length `size`.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], size: usize) -> Result<Var> {
        let n = self.expect_vector("scatter_add", x)?;
        if index.len() != n || size == 0 || index.iter().any(|&i| i >= size) {
            return Err(Error::dim("scatter_add", &[n], &[index.len(), size]));
        }
        let mut out = vec![T::zero(); size];
        for (&i, &v) in index.iter().zip(self.val(x).data()) {
            out[i] = out[i] + v;
        }
        Ok(self.push(Tensor::vector(out), Op::ScatterAdd(x, index.to_vec()), &[x]))
    }

    /// Zero-extends a vector to length `size`.
    pub fn pad(&mut self, x: Var, size: usize) -> Result<Var> {
        let n = self.expect_vector("pad", x)?;
        if size < n {
            return Err(Error::dim("pad", &[n], &[size]));
        }
        let index: Vec<usize> = (0..n).collect();
        self.scatter_add(x, &index, size)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a one-element `head`.
    pub fn backward(&self, head: Var) -> Result<Gradients<T>> {
        if self.shape(head) != [1] {
            return Err(Error::contract(format!(
                "backward needs a scalar head, got shape {:?}",
                self.shape(head)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[head.0] = Some(Tensor::scalar(T::one()));
        let mut visited = Vec::new();
        for idx in (0..=head.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let bt = bv.transpose().expect("rank 2");
                let at = av.transpose().expect("rank 2");
                acc(*a, tensor::matmul(g, &bt).expect("shapes"));
                acc(*b, tensor::matmul(&at, g).expect("shapes"));
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.val(*w), self.val(*x));
                let k = xv.len();
                if self.nodes[w.0].requires_grad {
                    let data = gd
                        .iter()
                        .flat_map(|&gi| xv.data().iter().map(move |&xj| gi * xj))
                        .collect();
                    acc(*w, Tensor::new(wv.shape().to_vec(), data).expect("shape"));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); k];
                    for (row, &gi) in wv.data().chunks_exact(k).zip(gd) {
                        for (d, &wij) in dx.iter_mut().zip(row) {
                            *d = *d + gi * wij;
                        }
                    }
                    acc(*x, Tensor::vector(dx));
                }
            }
            Op::VecMat(a, m) => {
                let (avv, mv) = (self.val(*a), self.val(*m));
                let k = mv.cols();
                if self.nodes[a.0].requires_grad {
                    let da = mv.data().chunks_exact(k).map(|row| dot(row, gd)).collect();
                    acc(*a, Tensor::vector(da));
                }
                if self.nodes[m.0].requires_grad {
                    let data = avv
                        .data()
                        .iter()
                        .flat_map(|&ai| gd.iter().map(move |&gj| ai * gj))
                        .collect();
                    acc(*m, Tensor::new(mv.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().expect("rank 2")),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, g.zip_map(bv, "mul", |x, y| x * y).expect("shape"));
                acc(*b, g.zip_map(av, "mul", |x, y| x * y).expect("shape"));
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let take_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                let ga = gd
                    .iter()
                    .zip(&take_a)
                    .map(|(&v, &t)| if t { v } else { T::zero() })
                    .collect();
                let gb = gd
                    .iter()
                    .zip(&take_a)
                    .map(|(&v, &t)| if t { T::zero() } else { v })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), ga).expect("shape"));
                acc(*b, Tensor::new(g.shape().to_vec(), gb).expect("shape"));
            }
            Op::AddRow(a, r) => {
                let n = self.val(*r).len();
                acc(*a, g.clone());
                acc(*r, Tensor::vector(column_sums(gd, n)));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.val(*a), self.val(*r));
                let n = rv.len();
                let ga = gd
                    .chunks_exact(n)
                    .flat_map(|row| row.iter().zip(rv.data()).map(|(&x, &y)| x * y))
                    .collect();
                acc(*a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
                let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                acc(*r, Tensor::vector(column_sums(&prod, n)));
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let n = bv.len();
                let da = gd.chunks_exact(n).map(|row| dot(row, bv)).collect();
                let mut db = vec![T::zero(); n];
                for (row, &ai) in gd.chunks_exact(n).zip(av) {
                    for (d, &gij) in db.iter_mut().zip(row) {
                        *d = *d + gij * ai;
                    }
                }
                acc(*a, Tensor::vector(da));
                acc(*b, Tensor::vector(db));
            }
            Op::Scale(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s).item());
                acc(*x, g.map(|v| v * sv));
                acc(*s, Tensor::scalar(dot(gd, xv.data())));
            }
            Op::DivScalar(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s).item());
                acc(*x, g.map(|v| v / sv));
                acc(*s, Tensor::scalar(-dot(gd, xv.data()) / (sv * sv)));
            }
            Op::Affine(x, a) => {
                let a = *a;
                acc(*x, g.map(|v| v * a));
            }
            Op::Tanh(x) => {
                let k = if self.corrupt_backward { T::of(1.5) } else { T::one() };
                let d = g
                    .zip_map(out, "tanh", |gv, y| gv * (T::one() - y * y) * k)
                    .expect("shape");
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .zip_map(out, "sigmoid", |gv, y| gv * y * (T::one() - y))
                    .expect("shape");
                acc(*x, d);
            }
            Op::LogFloor(x, floor) => {
                let floor = *floor;
                let d = g
                    .zip_map(self.val(*x), "log", |gv, xv| {
                        if xv > floor {
                            gv / xv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("shape");
                acc(*x, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    acc(p, Tensor::vector(gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Slice(x, start) => {
                let mut d = vec![T::zero(); self.val(*x).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                acc(*x, Tensor::vector(d));
            }
            Op::StackRows(rows) => {
                let n = g.cols();
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, Tensor::vector(gd[i * n..(i + 1) * n].to_vec()));
                }
            }
            Op::Row(m, i) => {
                let mv = self.val(*m);
                let n = mv.cols();
                let mut d = Tensor::zeros(mv.shape());
                d.data_mut()[i * n..(i + 1) * n].copy_from_slice(gd);
                acc(*m, d);
            }
            Op::Softmax(x) => {
                let y = out.data();
                let gy = dot(gd, y);
                let d = y.iter().zip(gd).map(|(&yi, &gi)| yi * (gi - gy)).collect();
                acc(*x, Tensor::vector(d));
            }
            Op::Cosine(a, b) => {
                let (da, db) = cosine_grads(self.val(*a).data(), self.val(*b).data(), gd[0]);
                acc(*a, Tensor::vector(da));
                acc(*b, Tensor::vector(db));
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let n = av.cols();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(av.len());
                for ((ra, rb), &gi) in av
                    .data()
                    .chunks_exact(n)
                    .zip(bv.data().chunks_exact(n))
                    .zip(gd)
                {
                    let (x, y) = cosine_grads(ra, rb, gi);
                    da.extend(x);
                    db.extend(y);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
            }
            Op::Max(x, axis, arg) => {
                let xv = self.val(*x);
                let n = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (o, (&k, &gv)) in arg.iter().zip(gd).enumerate() {
                    let flat = match axis {
                        Axis::Rows => k * n + o,
                        Axis::Cols => o * n + k,
                    };
                    d.data_mut()[flat] = gv;
                }
                acc(*x, d);
            }
            Op::SumAxis(x, axis) => {
                let xv = self.val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let data = (0..m * n)
                    .map(|f| match axis {
                        Axis::Rows => gd[f % n],
                        Axis::Cols => gd[f / n],
                    })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::filled(self.val(*x).shape(), gd[0]));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, bv.map(|v| v * gd[0]));
                acc(*b, av.map(|v| v * gd[0]));
            }
            Op::Pick(x, i) => {
                let mut d = Tensor::zeros(self.val(*x).shape());
                d.data_mut()[*i] = gd[0];
                acc(*x, d);
            }
            Op::ScatterAdd(x, index) => {
                let d = index.iter().map(|&i| gd[i]).collect();
                acc(*x, Tensor::vector(d));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn column_sums<T: Scalar>(data: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in data.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

/// Vector-Jacobian product of cosine; both gradients vanish in the degenerate case.
fn cosine_grads<T: Scalar>(a: &[T], b: &[T], g: T) -> (Vec<T>, Vec<T>) {
    let (c, na, nb) = cosine_slice(a, b);
    let floor = T::of(tensor::COSINE_NORM_FLOOR);
    if na < floor || nb < floor {
        return (vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    let inv = T::one() / (na * nb);
    let (na2, nb2) = (na * na, nb * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| g * (y * inv - c * x / na2))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| g * (x * inv - c * y / nb2))
        .collect();
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn elementwise_kernels() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(vec64(&[0.0]));
        let th = t.tanh(z);
        assert_eq!(t.value(th).item(), 0.0);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
        let a = t.constant(vec64(&[1.0, 2.0]));
        let b = t.constant(vec64(&[3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let mx = t.max_axis(m, Axis::Rows).unwrap();
        assert_eq!(t.value(mx).data(), &[3.0, 5.0]);
        let mc = t.max_axis(m, Axis::Cols).unwrap();
        assert_eq!(t.value(mc).data(), &[5.0, 3.0]);
        let sr = t.sum_axis(m, Axis::Rows).unwrap();
        assert_eq!(t.value(sr).data(), &[4.0, 7.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut t = Tape::<f64>::new();
        let w = t.input(vec64(&[2.0, -1.0]));
        let x = t.constant(vec64(&[1.0, 3.0]));
        let a = t.dot(w, x).unwrap();
        let b = t.dot(w, w).unwrap();
        let y = t.add(a, b).unwrap();
        let g = t.backward(y).unwrap();
        // d/dw (w·x + w·w) = x + 2w
        assert_eq!(g.get(w).unwrap().data(), &[5.0, 1.0]);
    }

    #[test]
    fn backward_runs_in_reverse_order() {
        let mut t = Tape::<f64>::new();
        let x = t.input(vec64(&[0.3, 0.1]));
        let a = t.tanh(x);
        let b = t.sigmoid(a);
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        let order = g.visit_order();
        assert_eq!(order, &[s.index(), c.index(), b.index(), a.index(), x.index()]);
    }

    #[test]
    fn non_scalar_head_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.input(vec64(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.input(vec64(&[1.0]));
        let c = t.constant(vec64(&[4.0]));
        let y = t.mul(w, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().item(), 4.0);
    }

    #[test]
    fn zero_cosine_operand_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.input(vec64(&[0.0, 0.0]));
        let b = t.input(vec64(&[1.0, 2.0]));
        let c = t.cosine(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let g = t.backward(c).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_merges_duplicates() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec64(&[0.2, 0.3, 0.5]));
        let p = t.scatter_add(a, &[4, 5, 4], 6).unwrap();
        let v = t.value(p);
        assert!((v.get(4) - 0.7).abs() < 1e-15);
        assert!((v.get(5) - 0.3).abs() < 1e-15);
        assert!(t.scatter_add(a, &[0, 1], 6).is_err());
    }

    #[test]
    fn dimension_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
        let v = t.constant(vec64(&[1.0, 2.0]));
        let w = t.constant(vec64(&[1.0]));
        assert!(t.add(v, w).is_err());
        assert!(t.cosine(v, w).is_err());
        assert!(t.slice(v, 1, 2).is_err());
    }
}
