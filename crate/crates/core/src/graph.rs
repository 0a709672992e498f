//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes hold their value
//! plus whatever the backward rule needs; [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that depends on a parameter.
//!
//! Shapes: matrices are `[rows, cols]`, image maps are `[channels, h, w]`.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm_into, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    LeakyRelu(Var, F),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Conv { x: Var, w: Var, b: Var, stride: usize, cols: Vec<F> },
    Upsample(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    IndexRows(Var, Vec<usize>),
    MeanRows(Var),
    MeanCols(Var),
    SumAll(Var),
    MseConst(Var, Vec<F>),
    CrossEntropy(Var, usize, Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Adds `scale *` every parameter gradient into `acc`.
    pub fn accumulate_into(&self, acc: &mut Grads<F>, scale: F) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                acc.accumulate(id, g, scale);
            }
        }
    }
}

fn add_into<F: Real>(slot: &mut Option<Tensor<F>>, shape: &[usize], data: &[F]) {
    match slot {
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, data.to_vec())),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Graph { store, nodes: Vec::with_capacity(256), params: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input that still receives a gradient, for tests that probe input
    /// sensitivities.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a trainable parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// `a b` (or `a bᵀ` when `trans_b`).
    pub fn matmul_opt(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = self.value(a).matmul(false, self.value(b), trans_b);
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_opt(a, b, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row).data();
        assert_eq!(r.len(), n, "row broadcast length mismatch");
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::AddRow(a, row), &[a, row])
    }

    /// `[c, h, w] + [c]` broadcast over pixels.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(a).dims3();
        let b = self.value(bias).data();
        assert_eq!(b.len(), c);
        let mut data = self.value(a).data().to_vec();
        for (ci, chunk) in data.chunks_mut(h * w).enumerate() {
            for x in chunk {
                *x += b[ci];
            }
        }
        self.push(Tensor::new(&[c, h, w], data), Op::AddChannel(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len());
        let data = va.data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data);
        self.push(out, Op::MulConst(a, c), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::c(gelu_parts(x.f64()).0));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`[n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        let (xhat, rstd) = kernels::normalize_groups(self.value(x).data(), m, F::c(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), n);
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        self.push(Tensor::new(&[m, n], out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Group normalization over a `[c, h, w]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let (xhat, rstd) = kernels::normalize_groups(self.value(x).data(), groups, F::c(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (ci, chunk) in out.chunks_mut(h * w).enumerate() {
            for v in chunk {
                *v = *v * g[ci] + b[ci];
            }
        }
        let op = Op::GroupNorm { x, gamma, beta, xhat, rstd };
        self.push(Tensor::new(&[c, h, w], out), op, &[x, gamma, beta])
    }

    /// 3x3 convolution with padding 1; `w` is `[cout, cin*9]`, `b` is `[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let (cout, k) = self.value(w).dims2();
        assert_eq!(k, cin * 9, "conv weight expects {} inputs, got {cin} channels", k / 9);
        let (y, cols, ho, wo) = kernels::conv3x3(
            self.value(x).data(),
            cin,
            h,
            wd,
            self.value(w).data(),
            self.value(b).data(),
            cout,
            stride,
        );
        self.push(Tensor::new(&[cout, ho, wo], y), Op::Conv { x, w, b, stride, cols }, &[x, w, b])
    }

    /// x2 bilinear upsampling of a `[c, h, w]` map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let y = kernels::upsample2x(self.value(x).data(), c, h, w);
        self.push(Tensor::new(&[c, 2 * h, 2 * w], y), Op::Upsample(x), &[x])
    }

    /// Concatenation along the leading axis (channels for maps, rows for
    /// matrices). Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shape mismatch");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let (pm, _) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols row mismatch");
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::new(&[m, n], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, n) = self.value(a).dims2();
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push(Tensor::new(&[end - start, n], data), Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, _) = self.value(a).dims2();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.value(a).row(i)[start..end]);
        }
        self.push(Tensor::new(&[m, end - start], data), Op::SliceCols(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(&[n, m], data), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(&[m, n], data), Op::Softmax(a), &[a])
    }

    /// Gathers rows of a table (embedding lookup).
    pub fn index_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (_, n) = self.value(table).dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.value(table).row(i));
        }
        self.push(Tensor::new(&[idx.len(), n], data), Op::IndexRows(table, idx.to_vec()), &[table])
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = vec![F::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = F::one() / F::c(m as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        self.push(Tensor::new(&[1, n], out), Op::MeanRows(a), &[a])
    }

    /// Mean over columns: `[m, n] -> [m, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let inv = F::one() / F::c(n as f64);
        let out = self.value(a).data().chunks(n).map(|r| r.iter().copied().sum::<F>() * inv).collect();
        self.push(Tensor::new(&[m, 1], out), Op::MeanCols(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, a: Var, target: &[F]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), target.len());
        let n = F::c(va.len() as f64);
        let s = va.data().iter().zip(target).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>() / n;
        self.push(Tensor::scalar(s), Op::MseConst(a, target.to_vec()), &[a])
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let mut p = self.value(logits).data().to_vec();
        assert!(target < p.len(), "class {target} out of range");
        softmax_in_place(&mut p);
        let loss = -(p[target].max(F::min_positive_value())).ln();
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target, p), &[logits])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.shape(out), vec![F::one()]));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2();
                let n = gy.dims2().1;
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    let (br, bc) = vb.dims2();
                    // da = gy · op(b)ᵀ
                    gemm_into(g, m, n, false, vb.data(), br, bc, !trans_b, &mut da, F::zero());
                    add_into(&mut grads[a.0], va.shape(), &da);
                }
                if self.wants(*b) {
                    let (br, bc) = vb.dims2();
                    let mut db = vec![F::zero(); br * bc];
                    if *trans_b {
                        // b is [n, k]: db = gyᵀ · a
                        gemm_into(g, m, n, true, va.data(), m, k, false, &mut db, F::zero());
                    } else {
                        // b is [k, n]: db = aᵀ · gy
                        gemm_into(va.data(), m, k, true, g, m, n, false, &mut db, F::zero());
                    }
                    add_into(&mut grads[b.0], vb.shape(), &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], gy.shape(), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.shape(), g);
                }
                if self.wants(*b) {
                    let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                    add_into(&mut grads[b.0], gy.shape(), &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d: Vec<F> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], gy.shape(), &d);
                }
                if self.wants(*b) {
                    let d: Vec<F> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], gy.shape(), &d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.shape(), g);
                }
                if self.wants(*row) {
                    let (_, n) = gy.dims2();
                    let mut d = vec![F::zero(); n];
                    for r in g.chunks(n) {
                        for (o, &x) in d.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    add_into(&mut grads[row.0], self.shape(*row), &d);
                }
            }
            Op::AddChannel(a, bias) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], gy.shape(), g);
                }
                if self.wants(*bias) {
                    let (_, h, w) = gy.dims3();
                    let d: Vec<F> = g.chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    add_into(&mut grads[bias.0], self.shape(*bias), &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<F> = g.iter().map(|&x| x * *s).collect();
                add_into(&mut grads[a.0], gy.shape(), &d);
            }
            Op::MulConst(a, c) => {
                let d: Vec<F> = g.iter().zip(c).map(|(&x, &y)| x * y).collect();
                add_into(&mut grads[a.0], gy.shape(), &d);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d: Vec<F> =
                    g.iter().zip(x).map(|(&gv, &xv)| if xv > F::zero() { gv } else { gv * *slope }).collect();
                add_into(&mut grads[a.0], gy.shape(), &d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d: Vec<F> = g.iter().zip(x).map(|(&gv, &xv)| gv * F::c(gelu_parts(xv.f64()).1)).collect();
                add_into(&mut grads[a.0], gy.shape(), &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (_, n) = gy.dims2();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![F::zero(); n];
                    let mut db = vec![F::zero(); n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        add_into(&mut grads[gamma.0], &[n], &dg);
                    }
                    if self.wants(*beta) {
                        add_into(&mut grads[beta.0], &[n], &db);
                    }
                }
                if self.wants(*x) {
                    let dxhat: Vec<F> = g.iter().enumerate().map(|(idx, &v)| v * gam[idx % n]).collect();
                    let mut dx = vec![F::zero(); g.len()];
                    kernels::normalize_groups_backward(&dxhat, xhat, rstd, &mut dx);
                    add_into(&mut grads[x.0], gy.shape(), &dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, xhat, rstd, .. } => {
                let (c, h, w) = gy.dims3();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for ci in 0..c {
                        for p in ci * hw..(ci + 1) * hw {
                            dg[ci] += g[p] * xhat[p];
                            db[ci] += g[p];
                        }
                    }
                    if self.wants(*gamma) {
                        add_into(&mut grads[gamma.0], &[c], &dg);
                    }
                    if self.wants(*beta) {
                        add_into(&mut grads[beta.0], &[c], &db);
                    }
                }
                if self.wants(*x) {
                    let dxhat: Vec<F> = g.iter().enumerate().map(|(p, &v)| v * gam[p / hw]).collect();
                    let mut dx = vec![F::zero(); g.len()];
                    kernels::normalize_groups_backward(&dxhat, xhat, rstd, &mut dx);
                    add_into(&mut grads[x.0], gy.shape(), &dx);
                }
            }
            Op::Conv { x, w, b, stride, cols } => {
                let (cout, ho, wo) = gy.dims3();
                let (cin, h, wd) = self.value(*x).dims3();
                let k = cin * 9;
                if self.wants(*w) {
                    let mut dw = vec![F::zero(); cout * k];
                    gemm_into(g, cout, ho * wo, false, cols, k, ho * wo, true, &mut dw, F::zero());
                    add_into(&mut grads[w.0], &[cout, k], &dw);
                }
                if self.wants(*b) {
                    let db: Vec<F> = g.chunks(ho * wo).map(|c| c.iter().copied().sum()).collect();
                    add_into(&mut grads[b.0], &[cout], &db);
                }
                if self.wants(*x) {
                    let mut dcols = vec![F::zero(); k * ho * wo];
                    gemm_into(self.value(*w).data(), cout, k, true, g, cout, ho * wo, false, &mut dcols, F::zero());
                    let mut dx = vec![F::zero(); cin * h * wd];
                    kernels::col2im(&dcols, cin, h, wd, *stride, &mut dx);
                    add_into(&mut grads[x.0], &[cin, h, wd], &dx);
                }
            }
            Op::Upsample(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let mut dx = vec![F::zero(); c * h * w];
                kernels::upsample2x_backward(g, c, h, w, &mut dx);
                add_into(&mut grads[x.0], &[c, h, w], &dx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], self.shape(*p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = gy.dims2();
                let mut col = 0;
                for p in parts {
                    let pn = self.value(*p).dims2().1;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * n + col..i * n + col + pn]);
                        }
                        add_into(&mut grads[p.0], &[m, pn], &d);
                    }
                    col += pn;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let (_, n) = va.dims2();
                let mut d = vec![F::zero(); va.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                add_into(&mut grads[a.0], va.shape(), &d);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = va.dims2();
                let (_, w) = gy.dims2();
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(&mut grads[a.0], va.shape(), &d);
            }
            Op::Transpose(a) => {
                let (n, m) = gy.dims2();
                let mut d = vec![F::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = g[i * m + j];
                    }
                }
                add_into(&mut grads[a.0], &[m, n], &d);
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], self.shape(*a), g);
            }
            Op::Softmax(a) => {
                let (_, n) = gy.dims2();
                let y = node.value.data();
                let mut d = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], gy.shape(), &d);
            }
            Op::IndexRows(table, idx) => {
                let vt = self.value(*table);
                let (_, n) = vt.dims2();
                let mut d = vec![F::zero(); vt.len()];
                for (r, &ti) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[ti * n + j] += g[r * n + j];
                    }
                }
                add_into(&mut grads[table.0], vt.shape(), &d);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let inv = F::one() / F::c(m as f64);
                let d: Vec<F> = (0..m * n).map(|p| g[p % n] * inv).collect();
                add_into(&mut grads[a.0], &[m, n], &d);
            }
            Op::MeanCols(a) => {
                let (m, n) = self.value(*a).dims2();
                let inv = F::one() / F::c(n as f64);
                let d: Vec<F> = (0..m * n).map(|p| g[p / n] * inv).collect();
                add_into(&mut grads[a.0], &[m, n], &d);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                add_into(&mut grads[a.0], va.shape(), &vec![g[0]; va.len()]);
            }
            Op::MseConst(a, target) => {
                let va = self.value(*a);
                let s = g[0] * F::c(2.0) / F::c(va.len() as f64);
                let d: Vec<F> = va.data().iter().zip(target).map(|(&x, &y)| (x - y) * s).collect();
                add_into(&mut grads[a.0], va.shape(), &d);
            }
            Op::CrossEntropy(a, target, p) => {
                let mut d: Vec<F> = p.iter().map(|&x| x * g[0]).collect();
                d[*target] -= g[0];
                add_into(&mut grads[a.0], self.shape(*a), &d);
            }
        }
    }
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for every entry of every
    /// parameter of `store`.
    fn check<Fw>(store: &mut ParamStore<f64>, forward: Fw)
    where
        Fw: Fn(&mut Graph<'_, f64>) -> Var,
    {
        let mut grads = Grads::zeros_like(store);
        {
            let mut g = Graph::new(store);
            let out = forward(&mut g);
            g.backward(out).accumulate_into(&mut grads, 1.0);
        }
        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let out = forward(&mut g);
            g.value(out).data()[0]
        };
        let h = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for j in 0..store.get(id).len() {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[j] = orig - h;
                let down = eval(store);
                store.get_mut(id).data_mut()[j] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.get(id).data()[j];
                let err = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-7);
                assert!(err < 1e-5, "{} [{j}]: numeric {num} analytic {ana}", store.name(id));
            }
        }
    }

    fn rand_param(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, init_uniform(rng, shape, 1, 1.0))
    }

    #[test]
    fn conv_groupnorm_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = rand_param(&mut s, &mut rng, "x", &[2, 5, 6]);
        let w = rand_param(&mut s, &mut rng, "w", &[4, 18]);
        let b = rand_param(&mut s, &mut rng, "b", &[4]);
        let gm = rand_param(&mut s, &mut rng, "gamma", &[4]);
        let bt = rand_param(&mut s, &mut rng, "beta", &[4]);
        let probe = init_uniform::<f64>(&mut rng, &[4 * 6 * 6], 1, 1.0).into_data();
        check(&mut s, |g| {
            let (x, w, b, gm, bt) = (g.param(x), g.param(w), g.param(b), g.param(gm), g.param(bt));
            let y = g.conv3x3(x, w, b, 2);
            let y = g.group_norm(y, 2, gm, bt, 1e-5);
            let y = g.leaky_relu(y, 0.02);
            let y = g.upsample2x(y);
            let y = g.mul_const(y, probe.clone());
            g.sum_all(y)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let q = rand_param(&mut s, &mut rng, "q", &[3, 4]);
        let k = rand_param(&mut s, &mut rng, "k", &[5, 4]);
        let wq = rand_param(&mut s, &mut rng, "wq", &[4, 4]);
        let gm = rand_param(&mut s, &mut rng, "gamma", &[4]);
        let bt = rand_param(&mut s, &mut rng, "beta", &[4]);
        let row = rand_param(&mut s, &mut rng, "row", &[4]);
        let table = rand_param(&mut s, &mut rng, "table", &[3, 4]);
        check(&mut s, |g| {
            let (q, k, wq) = (g.param(q), g.param(k), g.param(wq));
            let qp = g.matmul(q, wq);
            let logits = g.matmul_opt(qp, k, true);
            let a = g.softmax(logits);
            let out = g.matmul(a, k);
            let r = g.param(row);
            let out = g.add_row(out, r);
            let (gm, bt) = (g.param(gm), g.param(bt));
            let out = g.layer_norm(out, gm, bt, 1e-5);
            let out = g.gelu(out);
            let t = g.param(table);
            let e = g.index_rows(t, &[2, 0, 2]);
            let out = g.add(out, e);
            let tr = g.transpose(out);
            let sl = g.slice_cols(tr, 1, 3);
            let sr = g.slice_rows(tr, 1, 3);
            let cc = g.concat_cols(&[sl, tr]);
            let m1 = g.mean_rows(cc);
            let m2 = g.mean_cols(sr);
            let m2t = g.transpose(m2);
            let mx = g.mul(m2t, m2t);
            let both = g.concat_cols(&[m1, mx]);
            let l1 = g.mse_const(both, &[0.3; 7]);
            let l2 = g.cross_entropy(m1, 2);
            let l = g.add(l1, l2);
            g.scale(l, 0.7)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1000.0, 0.0, 0.0, -1.0, 2.0, 0.5]));
        let y = g.softmax(x);
        for r in g.value(y).data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    }
}
