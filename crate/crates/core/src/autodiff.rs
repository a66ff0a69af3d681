//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Nodes only refer to
//! earlier nodes, so reverse construction order is a valid topological order
//! and `backward` is a single reverse sweep. Gradients accumulate additively
//! when a value feeds several consumers.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    /// every element of the first input times the single element of the second
    Scale(Var, Var),
    /// `[N,C]` rows times `[N]`
    MulRows(Var, Var),
    /// `[B,N] + [N]`
    AddRowBias(Var, Var),
    /// `[B,C,H,W] + [C]`
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d(Var, Var, ConvGeometry),
    MaxPool(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    L2Normalize(Var, T),
    /// `[B,C,H,W] * [B,1,H,W]`
    MulSpatial(Var, Var),
    Sum(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SoftmaxCrossEntropy(Var, Vec<usize>, Tensor<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation and differentiates it.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    /// Scales row `i` of a `[N,C]` tensor by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        if va.ndim() != 2 || vs.shape() != [va.shape()[0]] {
            return Err(mismatch("mul_rows", va.shape(), vs.shape()));
        }
        let cols = va.shape()[1];
        let mut out = va.clone();
        for (row, &k) in out.data_mut().chunks_exact_mut(cols.max(1)).zip(vs.data()) {
            row.iter_mut().for_each(|x| *x = *x * k);
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulRows(a, s), rg))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.ndim() != 2 || vb.shape() != [va.shape()[1]] {
            return Err(mismatch("add_row_bias", va.shape(), vb.shape()));
        }
        let cols = va.shape()[1];
        let mut out = va.clone();
        for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRowBias(a, bias), rg))
    }

    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.ndim() != 4 || vb.shape() != [va.shape()[1]] {
            return Err(mismatch("add_channel_bias", va.shape(), vb.shape()));
        }
        let c = va.shape()[1];
        let spatial = va.shape()[2] * va.shape()[3];
        let mut out = va.clone();
        if spatial > 0 {
            for (i, plane) in out.data_mut().chunks_exact_mut(spatial).enumerate() {
                let b = vb.data()[i % c];
                plane.iter_mut().for_each(|x| *x = *x + b);
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddChannelBias(a, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a [M,K] * b[N,K]^T -> [M,N]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), false, self.value(b), true)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = tensor::conv2d_with(self.value(input), self.value(kernel), &g);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, Op::Conv2d(input, kernel, g), rg))
    }

    pub fn max_pool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        let (out, arg) = tensor::max_pool2d(self.value(a), size)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaxPool(a, arg), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = tensor::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let out = tensor::global_avg_pool(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GlobalAvgPool(a), rg))
    }

    pub fn l2_normalize(&mut self, a: Var, epsilon: T) -> Var {
        let out = tensor::l2_normalize(self.value(a), epsilon);
        let rg = self.rg(&[a]);
        self.push(out, Op::L2Normalize(a, epsilon), rg)
    }

    /// Broadcasts a single-channel `[B,1,H,W]` map over the channels of `[B,C,H,W]`.
    pub fn mul_spatial(&mut self, features: Var, map: Var) -> Result<Var> {
        let (vf, vm) = (self.value(features), self.value(map));
        let ok = vf.ndim() == 4
            && vm.ndim() == 4
            && vm.shape()[0] == vf.shape()[0]
            && vm.shape()[1] == 1
            && vm.shape()[2..] == vf.shape()[2..];
        if !ok {
            return Err(mismatch("mul_spatial", vf.shape(), vm.shape()));
        }
        let (c, spatial) = (vf.shape()[1], vf.shape()[2] * vf.shape()[3]);
        let mut out = vf.clone();
        if spatial > 0 {
            for (i, plane) in out.data_mut().chunks_exact_mut(spatial).enumerate() {
                let m = &vm.data()[(i / c) * spatial..][..spatial];
                for (x, &g) in plane.iter_mut().zip(m) {
                    *x = *x * g;
                }
            }
        }
        let rg = self.rg(&[features, map]);
        Ok(self.push(out, Op::MulSpatial(features, map), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 || rows.iter().any(|&r| r >= va.shape()[0]) {
            return Err(Error::invalid(format!("select_rows {rows:?} from {:?}", va.shape())));
        }
        let cols = va.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(va.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), rg))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 || cols.iter().any(|&c| c >= va.shape()[1]) {
            return Err(Error::invalid(format!("select_cols {cols:?} from {:?}", va.shape())));
        }
        let rows = va.shape()[0];
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = va.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(vec![rows, cols.len()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectCols(a, cols.to_vec()), rg))
    }

    /// Concatenates `[B,k_i]` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `[B,N]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs), rg))
    }

    /// Populates gradients of `loss` for every node that requires one.
    /// Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let want = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if want(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, s) => {
                let s = *s;
                acc(*a, g.map(|x| x * s));
            }
            Op::Scale(a, s) => {
                let sv = val(*s).item();
                if want(*a) {
                    acc(*a, g.map(|x| x * sv));
                }
                if want(*s) {
                    let total: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                    acc(*s, Tensor::full(val(*s).shape(), total));
                }
            }
            Op::MulRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let cols = va.shape()[1].max(1);
                if want(*a) {
                    let mut ga = g.clone();
                    for (row, &k) in ga.data_mut().chunks_exact_mut(cols).zip(vs.data()) {
                        row.iter_mut().for_each(|x| *x = *x * k);
                    }
                    acc(*a, ga);
                }
                if want(*s) {
                    let gs = g
                        .data()
                        .chunks_exact(cols)
                        .zip(va.data().chunks_exact(cols))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    acc(*s, Tensor::new(vs.shape().to_vec(), gs).unwrap());
                }
            }
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone());
                if want(*b) {
                    let cols = g.shape()[1];
                    let mut gb = Tensor::zeros(&[cols]);
                    for row in g.data().chunks_exact(cols.max(1)) {
                        for (x, &y) in gb.data_mut().iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::AddChannelBias(a, b) => {
                acc(*a, g.clone());
                if want(*b) {
                    let c = g.shape()[1];
                    let spatial = g.shape()[2] * g.shape()[3];
                    let mut gb = Tensor::zeros(&[c]);
                    if spatial > 0 {
                        for (ix, plane) in g.data().chunks_exact(spatial).enumerate() {
                            let d = &mut gb.data_mut()[ix % c];
                            *d = *d + plane.iter().copied().sum::<T>();
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::MatMul(a, b) => {
                if want(*a) {
                    acc(*a, tensor::matmul_t(g, false, val(*b), true).unwrap());
                }
                if want(*b) {
                    acc(*b, tensor::matmul_t(val(*a), true, g, false).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                if want(*a) {
                    acc(*a, tensor::matmul(g, val(*b)).unwrap());
                }
                if want(*b) {
                    acc(*b, tensor::matmul_t(g, true, val(*a), false).unwrap());
                }
            }
            Op::Transpose(a) => acc(*a, tensor::transpose(g).unwrap()),
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape()).unwrap()),
            Op::Conv2d(x, k, geom) => {
                let (gx, gk) = tensor::conv2d_backward(val(*x), val(*k), g, geom, want(*x), want(*k));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gk) = gk {
                    acc(*k, gk);
                }
            }
            Op::MaxPool(a, arg) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                for (&ix, &gv) in arg.iter().zip(g.data()) {
                    let d = &mut ga.data_mut()[ix];
                    *d = *d + gv;
                }
                acc(*a, ga);
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { T::zero() }).unwrap());
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(out, |x, s| x * s * (T::one() - s)).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape();
                let spatial = shape[2] * shape[3];
                let scale = T::one() / T::from_usize(spatial).unwrap();
                let mut ga = Tensor::zeros(shape);
                for (plane, &gv) in ga.data_mut().chunks_exact_mut(spatial).zip(g.data()) {
                    plane.iter_mut().for_each(|x| *x = gv * scale);
                }
                acc(*a, ga);
            }
            Op::L2Normalize(a, eps) => {
                let va = val(*a);
                let d = *va.shape().last().unwrap_or(&1);
                let mut ga = g.clone();
                if d > 0 {
                    for ((gr, xr), yr) in ga
                        .data_mut()
                        .chunks_exact_mut(d)
                        .zip(va.data().chunks_exact(d))
                        .zip(out.data().chunks_exact(d))
                    {
                        let norm = xr.iter().map(|&x| x * x).sum::<T>().sqrt();
                        if norm > *eps {
                            let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                            for (gv, &y) in gr.iter_mut().zip(yr) {
                                *gv = (*gv - y * dot) / norm;
                            }
                        } else {
                            gr.iter_mut().for_each(|gv| *gv = *gv / *eps);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::MulSpatial(f, m) => {
                let (vf, vm) = (val(*f), val(*m));
                let (c, spatial) = (vf.shape()[1], vf.shape()[2] * vf.shape()[3]);
                if want(*f) {
                    let mut gf = g.clone();
                    for (ix, plane) in gf.data_mut().chunks_exact_mut(spatial.max(1)).enumerate() {
                        let mv = &vm.data()[(ix / c) * spatial..][..spatial];
                        for (x, &s) in plane.iter_mut().zip(mv) {
                            *x = *x * s;
                        }
                    }
                    acc(*f, gf);
                }
                if want(*m) {
                    let mut gm = Tensor::zeros(vm.shape());
                    for (ix, (gp, fp)) in g
                        .data()
                        .chunks_exact(spatial.max(1))
                        .zip(vf.data().chunks_exact(spatial.max(1)))
                        .enumerate()
                    {
                        let dst = &mut gm.data_mut()[(ix / c) * spatial..][..spatial];
                        for ((d, &x), &y) in dst.iter_mut().zip(gp).zip(fp) {
                            *d = *d + x * y;
                        }
                    }
                    acc(*m, gm);
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::SelectRows(a, rows) => {
                let va = val(*a);
                let cols = va.shape()[1];
                let mut ga = Tensor::zeros(va.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        let d = &mut ga.data_mut()[r * cols + j];
                        *d = *d + g.data()[k * cols + j];
                    }
                }
                acc(*a, ga);
            }
            Op::SelectCols(a, cols) => {
                let va = val(*a);
                let n = va.shape()[1];
                let mut ga = Tensor::zeros(va.shape());
                for r in 0..va.shape()[0] {
                    for (k, &c) in cols.iter().enumerate() {
                        let d = &mut ga.data_mut()[r * n + c];
                        *d = *d + g.data()[r * cols.len() + k];
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let k = val(p).shape()[1];
                    if want(p) {
                        let mut gp = Vec::with_capacity(rows * k);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..][..k]);
                        }
                        acc(p, Tensor::new(vec![rows, k], gp).unwrap());
                    }
                    offset += k;
                }
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let gv = g.item();
                let n = probs.shape()[1];
                let scale = gv / T::from_usize(labels.len()).unwrap();
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let d = &mut gl.data_mut()[r * n + l];
                    *d = *d - T::one();
                }
                gl.data_mut().iter_mut().for_each(|x| *x = *x * scale);
                acc(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut t = Tape::<f32>::new();
        let w = t.param(Tensor::new(vec![3], vec![0.5, 1.0, -1.0]).unwrap());
        let x_val = Tensor::new(vec![3], vec![2.0, -3.0, 4.0]).unwrap();
        let x = t.constant(x_val.clone());
        let prod = t.mul(w, x).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &x_val);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        // loss = sum(x*x + 3x) -> grad = 2x + 3
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let lin = t.mul_scalar(x, 3.0);
        let s = t.add(sq, lin).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![5], vec![-30.0, -1.0, 0.0, 1.0, 15.0]).unwrap());
        let s = t.sigmoid(x);
        assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(t.value(s).data()[2], 0.5);
    }
}
