//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! depends on a trainable leaf.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gather(Var, Rc<Vec<Option<usize>>>),
    GroupMax(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
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
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a[n,k] x b[k,m]`; a 1-D `a` is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(bv.shape.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bv.shape[0], k, "matmul inner dims {:?} x {:?}", av.shape, bv.shape);
        let m = bv.shape[1];
        let mut out = vec![T::zero(); n * m];
        matmul_acc(&av.data, &bv.data, &mut out, n, k, m);
        let shape = if av.shape.len() == 1 { vec![m] } else { vec![n, m] };
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data: out }, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.numel(), bv.numel(), "add {:?} + {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// Adds the row vector `b[m]` to every row of `a[n,m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.cols();
        assert_eq!(bv.numel(), m, "add_row {:?} + {:?}", av.shape, bv.shape);
        let mut data = av.data.clone();
        for row in data.chunks_mut(m) {
            for (x, &y) in row.iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.numel(), bv.numel(), "mul {:?} * {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Mul(a, b), ng)
    }

    /// Scales row `i` of `a[n,m]` by `s[i]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        let (n, m) = (av.rows(), av.cols());
        assert_eq!(sv.numel(), n, "mul_col {:?} * {:?}", av.shape, sv.shape);
        let mut data = av.data.clone();
        for (row, &f) in data.chunks_mut(m).zip(&sv.data) {
            for x in row.iter_mut() {
                *x *= f;
            }
        }
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(s);
        self.push(Tensor { shape, data }, Op::MulCol(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let shape = av.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data }, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = av.shape.clone();
        let ng = self.ng(a);
        self.push(Tensor { shape, data }, Op::LogSoftmaxRows(a), ng)
    }

    /// `out[i] = a[index[i]]` over the flattened input, zero where the index
    /// is `None`. Covers lookups, unfolding for convolutions, slicing and
    /// zero padding.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<Option<usize>>>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
        let av = self.value(a);
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| av.data[i])).collect();
        let ng = self.ng(a);
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Gather(a, index),
            ng,
        )
    }

    /// Rows `rows` of a 2-D tensor, stacked.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let m = self.value(a).cols();
        let index: Vec<Option<usize>> = rows
            .iter()
            .flat_map(|&r| (0..m).map(move |j| Some(r * m + j)))
            .collect();
        self.gather(a, Rc::new(index), &[rows.len(), m])
    }

    /// `out[i] = max(a[g])` for each group `g`. The first maximal element
    /// receives the gradient.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>], shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), groups.len(), "group_max shape");
        let av = self.value(a);
        let mut data = Vec::with_capacity(groups.len());
        let mut arg = Vec::with_capacity(groups.len());
        for g in groups {
            let mut best = g[0];
            for &i in &g[1..] {
                if av.data[i] > av.data[best] {
                    best = i;
                }
            }
            data.push(av.data[best]);
            arg.push(best);
        }
        let ng = self.ng(a);
        self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::GroupMax(a, arg),
            ng,
        )
    }

    /// Column-wise max of a 2-D tensor `[n,m] -> [m]`.
    pub fn max_over_rows(&mut self, a: Var) -> Var {
        let (n, m) = {
            let av = self.value(a);
            (av.rows(), av.cols())
        };
        let groups: Vec<Vec<usize>> = (0..m).map(|j| (0..n).map(|i| i * m + j).collect()).collect();
        self.group_max(a, &groups, &[m])
    }

    /// Flat concatenation of all inputs.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
            ng |= self.ng(p);
        }
        let n = data.len();
        self.push(Tensor { shape: vec![n], data }, Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over rows of a 2-D tensor `[n,m] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        let ones = self.constant(Tensor::filled(&[n], T::one()));
        self.matmul(ones, a)
    }

    /// `x W + b` for `x[n,k]` or `x[k]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Mean of `weights[i] * -log softmax(logits[i])[labels[i]]` over rows.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Var {
        let (n, c) = {
            let v = self.value(logits);
            (v.rows(), v.cols())
        };
        assert_eq!(labels.len(), n, "labels per row");
        assert_eq!(weights.len(), n, "weights per row");
        let logp = self.log_softmax_rows(logits);
        let index: Vec<Option<usize>> = labels.iter().enumerate().map(|(i, &y)| Some(i * c + y)).collect();
        let picked = self.gather(logp, Rc::new(index), &[n]);
        let w = self.constant(Tensor::vector(weights.iter().map(|&w| -w).collect()));
        let terms = self.mul(picked, w);
        self.mean(terms)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape, T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(&mut slot.data);
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape[1]);
                self.acc(grads, *a, |ga| matmul_bt_acc(&g.data, &bv.data, ga, n, k, m));
                self.acc(grads, *b, |gb| matmul_at_acc(&av.data, &g.data, gb, n, k, m));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |gv| add_into(gv, &g.data));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, &g.data));
                let m = g.cols();
                self.acc(grads, *b, |gb| {
                    for row in g.data.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(&g.data).zip(&bv.data) {
                        *x += gi * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(&g.data).zip(&av.data) {
                        *x += gi * y;
                    }
                });
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let m = av.cols();
                self.acc(grads, *a, |ga| {
                    for ((grow, orow), &f) in ga.chunks_mut(m).zip(g.data.chunks(m)).zip(&sv.data) {
                        for (x, &gi) in grow.iter_mut().zip(orow) {
                            *x += gi * f;
                        }
                    }
                });
                self.acc(grads, *s, |gs| {
                    for ((x, grow), arow) in gs.iter_mut().zip(g.data.chunks(m)).zip(av.data.chunks(m)) {
                        *x += grow.iter().zip(arow).map(|(&p, &q)| p * q).sum::<T>();
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| {
                    for (x, &gi) in ga.iter_mut().zip(&g.data) {
                        *x += gi * *c;
                    }
                });
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |ga| add_into(ga, &g.data));
            }
            Op::Relu(a) => {
                self.acc(grads, *a, |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                        if y > T::zero() {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(&g.data).zip(&out.data) {
                        *x += gi * (T::one() - y * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let m = out.cols();
                self.acc(grads, *a, |ga| {
                    for ((xr, gr), yr) in ga.chunks_mut(m).zip(g.data.chunks(m)).zip(out.data.chunks(m)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((x, &gi), &y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let m = out.cols();
                self.acc(grads, *a, |ga| {
                    for ((xr, gr), yr) in ga.chunks_mut(m).zip(g.data.chunks(m)).zip(out.data.chunks(m)) {
                        let total: T = gr.iter().copied().sum();
                        for ((x, &gi), &y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - y.exp() * total;
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                self.acc(grads, *a, |ga| {
                    for (i, &gi) in index.iter().zip(&g.data) {
                        if let Some(i) = i {
                            ga[*i] += gi;
                        }
                    }
                });
            }
            Op::GroupMax(a, arg) => {
                self.acc(grads, *a, |ga| {
                    for (&i, &gi) in arg.iter().zip(&g.data) {
                        ga[i] += gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = &g.data[offset..offset + n];
                    self.acc(grads, p, |gp| add_into(gp, slice));
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gi = g.data[0];
                self.acc(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gi;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
