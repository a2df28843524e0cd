use std::collections::{BTreeMap, HashMap};

use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::params::ParamStore;
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A running-statistics value produced during a forward pass, to be written
/// back into its store once the step is done.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub store: String,
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    MulPrefix(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    LogClamp(Var, T),
    SumAll(Var),
    SumAxis(Var, usize),
    ExpandAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    L2Normalize(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A graph is built fresh for every step and dropped afterwards. Parameters
/// are pulled in from [`ParamStore`]s by name; each (store, name) pair maps
/// to a single leaf no matter how often it is used, so gradients of shared
/// weights accumulate.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<(String, String), Var>,
    param_order: Vec<(String, String, Var)>,
    grad_enabled: bool,
    buffer_updates: Vec<BufferUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that feeds it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Gradients of every parameter of `store` used in the graph, zero-filled
    /// when the parameter took part in the forward pass but not in the loss.
    pub fn for_store(&self, store: &str) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(s, _, _)| s == store)
            .map(|(_, name, v)| (name.clone(), self.get_or_zeros(*v)))
            .collect()
    }

    pub fn param(&self, store: &str, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(s, n, _)| s == store && n == name)
            .and_then(|(_, _, v)| self.get(*v))
    }
}

fn unbroadcast_suffix<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        3 | 4 => (shape[0], shape[1], numel(&shape[2..])),
        _ => panic!("batch_norm expects rank 2-4 input, got {:?}", shape),
    }
}

fn bmm_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (usize, usize, usize, usize) {
    assert_eq!(a.len(), 3, "bmm lhs must be rank 3, got {:?}", a);
    assert_eq!(b.len(), 3, "bmm rhs must be rank 3, got {:?}", b);
    assert_eq!(a[0], b[0], "bmm batch mismatch {:?} vs {:?}", a, b);
    let (m, k) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
    let (k2, n) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
    assert_eq!(k, k2, "bmm inner mismatch {:?}{} x {:?}{}", a, if ta { "^T" } else { "" }, b, if tb { "^T" } else { "" });
    (a[0], m, k, n)
}

#[allow(clippy::too_many_arguments)]
fn bmm_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            ta,
            tb,
            m,
            n,
            k,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * n..(i + 1) * k * n],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
            buffer_updates: Vec::new(),
        }
    }

    /// A graph that only evaluates values; nothing in it requires gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for `store[name]`, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        let key = (store.tag().to_string(), name.to_string());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.expect(name).clone(), Op::Leaf, true);
        self.params.insert(key.clone(), v);
        self.param_order.push((key.0, key.1, v));
        v
    }

    /// Copies the value of `v` into a new constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn push_buffer_update(&mut self, store: &str, name: &str, value: Tensor<T>) {
        self.buffer_updates.push(BufferUpdate { store: store.into(), name: name.into(), value });
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn check_suffix(&self, x: Var, b: Var) {
        let (xs, bs) = (self.shape(x), self.shape(b));
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
            "{:?} is not a suffix of {:?}",
            bs,
            xs
        );
    }

    /// `x + b` with `b` broadcast over the leading axes of `x`.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Var {
        self.check_suffix(x, b);
        let bv = self.value(b).data();
        let n = bv.len();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (y, &v) in chunk.iter_mut().zip(bv) {
                *y += v;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddSuffix(x, b), rg)
    }

    /// `x * s` with `s` broadcast over the leading axes of `x`.
    pub fn mul_suffix(&mut self, x: Var, s: Var) -> Var {
        self.check_suffix(x, s);
        let sv = self.value(s).data();
        let n = sv.len();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (y, &v) in chunk.iter_mut().zip(sv) {
                *y *= v;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulSuffix(x, s), rg)
    }

    /// `x * s` with `s` broadcast over the trailing axes of `x`.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Var {
        let (xs, ss) = (self.shape(x), self.shape(s));
        assert!(ss.len() <= xs.len() && xs[..ss.len()] == *ss, "{:?} is not a prefix of {:?}", ss, xs);
        let sv = self.value(s).data();
        let inner = self.value(x).numel() / sv.len().max(1);
        let mut value = self.value(x).clone();
        for (chunk, &v) in value.data_mut().chunks_mut(inner.max(1)).zip(sv) {
            for y in chunk {
                *y *= v;
            }
        }
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulPrefix(x, s), rg)
    }

    /// `a * x + b` for scalars `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
        let value = self.value(x).map(|v| a * v + b);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, x: Var, floor: f64) -> Var {
        let floor = T::from_f64_lossy(floor);
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(&[x]);
        self.push(value, Op::LogClamp(x, floor), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(axis);
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAxis(x, axis), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis].max(1);
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats `x` `dim` times along a new axis at position `axis`.
    pub fn expand_axis(&mut self, x: Var, axis: usize, dim: usize) -> Var {
        let value = self.value(x).expand_axis(axis, dim);
        let rg = self.rg(&[x]);
        self.push(value, Op::ExpandAxis(x, axis), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).permute(axes);
        let rg = self.rg(&[x]);
        self.push(value, Op::Permute(x, axes.to_vec()), rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::Narrow(x, axis, start), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis);
        let rg = self.rg(xs);
        self.push(value, Op::Concat(xs.to_vec(), axis), rg)
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        let fin = *xs.last().expect("linear on scalar");
        assert_eq!(fin, ws[1], "linear input width {} vs weight {:?}", fin, ws);
        let rows = numel(&xs) / fin.max(1);
        let fout = ws[0];
        let mut out = vec![T::zero(); rows * fout];
        gemm(false, true, rows, fout, fin, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout, "linear bias width");
            for row in out.chunks_mut(fout) {
                for (y, &v) in row.iter_mut().zip(bv) {
                    *y += v;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched `op(a) @ op(b)` for rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (batch, m, k, n) = bmm_dims(self.shape(a), self.shape(b), ta, tb);
        let out = bmm_kernel(self.value(a).data(), self.value(b).data(), ta, tb, batch, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![batch, m, n], out), Op::Bmm { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("softmax on scalar");
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// `x / (||x|| + eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::from_f64_lossy(eps);
        let n = *self.shape(x).last().expect("normalize on scalar");
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm + eps;
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize(x, eps), rg)
    }

    /// Row-wise cosine similarity over the last axis; output drops that axis.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let an = self.l2_normalize(a, eps);
        let bn = self.l2_normalize(b, eps);
        let p = self.mul(an, bn);
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = *self.shape(x).last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), [n], "layer_norm gamma width");
        assert_eq!(self.shape(beta), [n], "layer_norm beta width");
        let rows = self.value(x).numel() / n;
        let (xhat, _, _, rstd) = kernels::channel_stats(self.value(x).data(), 1, rows, n, T::from_f64_lossy(eps));
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((y, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *y = *y * g + b;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Batch normalization over every axis except 1.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, biased variance)`; otherwise the given running mean/variance
    /// are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let (outer, c, inner) = bn_layout(self.shape(x));
        assert_eq!(self.shape(gamma), [c], "batch_norm gamma width");
        assert_eq!(self.shape(beta), [c], "batch_norm beta width");
        let eps_t = T::from_f64_lossy(eps);
        let (xhat, stats, rstd) = match running {
            None => {
                let (xhat, mean, var, rstd) = kernels::channel_stats(self.value(x).data(), outer, c, inner, eps_t);
                (xhat, Some((mean, var)), rstd)
            }
            Some((rm, rv)) => {
                let rstd: Vec<T> = rv.data().iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
                let xv = self.value(x).data();
                let mut xhat = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        let (mu, r) = (rm.data()[ch], rstd[ch]);
                        for (y, &v) in xhat[off..off + inner].iter_mut().zip(&xv[off..off + inner]) {
                            *y = (v - mu) * r;
                        }
                    }
                }
                (xhat, None, rstd)
            }
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for o in 0..outer {
            for ch in 0..c {
                let (g, b) = (gv[ch], bv[ch]);
                for y in &mut out[(o * c + ch) * inner..][..inner] {
                    *y = *y * g + b;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let train = running.is_none();
        let v = self.push(Tensor::new(shape, out), Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, rg);
        (v, stats)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.batch, geom.cout, geom.oh, geom.ow];
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, geom }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let geom = PoolGeom::new(&xs, k, stride, pad);
        let (out, argmax) = kernels::max_pool2d_forward(self.value(x).data(), &geom);
        let shape = vec![xs[0], xs[1], geom.oh, geom.ow];
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out), Op::MaxPool2d { x, argmax }, rg)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.requires_grad(*b) {
                    let t = g.zip_map(out, |x, y| x * y);
                    self.accumulate(grads, *b, t.zip_map(bv, |x, y| -x / y));
                }
            }
            Op::AddSuffix(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, unbroadcast_suffix(g, self.shape(*b)));
                }
            }
            Op::MulSuffix(x, s) => {
                let sv = self.value(*s);
                let n = sv.numel();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for chunk in gx.data_mut().chunks_mut(n) {
                        for (y, &v) in chunk.iter_mut().zip(sv.data()) {
                            *y *= v;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*s) {
                    let prod = g.zip_map(self.value(*x), |a, b| a * b);
                    self.accumulate(grads, *s, unbroadcast_suffix(&prod, sv.shape()));
                }
            }
            Op::MulPrefix(x, s) => {
                let sv = self.value(*s);
                let inner = (g.numel() / sv.numel().max(1)).max(1);
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for (chunk, &v) in gx.data_mut().chunks_mut(inner).zip(sv.data()) {
                        for y in chunk {
                            *y *= v;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*s) {
                    let xv = self.value(*x);
                    let gs: Vec<T> = g
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), gs));
                }
            }
            Op::Scale(x, a) => {
                let a = *a;
                self.accumulate(grads, *x, g.map(|v| v * a));
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() }));
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y));
            }
            Op::LogClamp(x, floor) => {
                let floor = *floor;
                let gx = g.zip_map(self.value(*x), |gv, v| if v > floor { gv / v } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::SumAxis(x, axis) => {
                let dim = self.shape(*x)[*axis];
                self.accumulate(grads, *x, g.expand_axis(*axis, dim));
            }
            Op::ExpandAxis(x, axis) => {
                self.accumulate(grads, *x, g.sum_axis(*axis));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x).to_vec()));
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv));
            }
            Op::Narrow(x, axis, start) => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), gx));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = self.shape(*x)[*axis];
                    if self.requires_grad(*x) {
                        self.accumulate(grads, *x, g.narrow(*axis, start, len));
                    }
                    start += len;
                }
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (fout, fin) = (wv.dim(0), wv.dim(1));
                let rows = g.numel() / fout.max(1);
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); rows * fin];
                    gemm(false, false, rows, fin, fout, T::one(), g.data(), wv.data(), T::zero(), &mut gx);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(true, false, fout, fin, rows, T::one(), g.data(), self.value(*x).data(), T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], gw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (y, &v) in gb.iter_mut().zip(row) {
                                *y += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![fout], gb));
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = bmm_dims(av.shape(), bv.shape(), ta, tb);
                if self.requires_grad(*a) {
                    // dA = dC op(B)^T, or its transpose when A is stored transposed.
                    let ga = if ta {
                        bmm_kernel(bv.data(), g.data(), tb, true, batch, k, n, m)
                    } else {
                        bmm_kernel(g.data(), bv.data(), false, !tb, batch, m, n, k)
                    };
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
                }
                if self.requires_grad(*b) {
                    let gb = if tb {
                        bmm_kernel(g.data(), av.data(), true, ta, batch, n, m, k)
                    } else {
                        bmm_kernel(av.data(), g.data(), !ta, false, batch, k, m, n)
                    };
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb));
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize(x, eps) => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, xr) in gx.data_mut().chunks_mut(n).zip(xv.data().chunks(n)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let s = norm + *eps;
                    let dot: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    let coef = if norm > T::zero() { dot / (s * s * norm) } else { T::zero() };
                    for (gv, &xi) in gr.iter_mut().zip(xr) {
                        *gv = *gv / s - xi * coef;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); g.numel()];
                    let nt = T::from_usize(n).unwrap();
                    for (r, ((gr, xr), out_r)) in
                        g.data().chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            m1 += d;
                            m2 += d * xr[j];
                        }
                        m1 /= nt;
                        m2 /= nt;
                        for j in 0..n {
                            out_r[j] = rstd[r] * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); n];
                    for (gr, xr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![n], gg));
                    self.accumulate(grads, *beta, Tensor::new(vec![n], gb));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (outer, c, inner) = bn_layout(self.shape(*x));
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        for j in off..off + inner {
                            sum_g[ch] += g.data()[j];
                            sum_gx[ch] += g.data()[j] * xhat[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let m = T::from_usize(outer * inner).unwrap();
                    let mut gx = vec![T::zero(); g.numel()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let off = (o * c + ch) * inner;
                            let k = gv[ch] * rstd[ch];
                            if *train {
                                let (m1, m2) = (sum_g[ch] / m, sum_gx[ch] / m);
                                for j in off..off + inner {
                                    gx[j] = k * (g.data()[j] - m1 - xhat[j] * m2);
                                }
                            } else {
                                for j in off..off + inner {
                                    gx[j] = k * g.data()[j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx));
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g));
            }
            Op::Conv2d { x, w, geom } => {
                let (need_dx, need_dw) = (self.requires_grad(*x), self.requires_grad(*w));
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); numel(self.shape(*x))];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
            }
        }
    }
}
