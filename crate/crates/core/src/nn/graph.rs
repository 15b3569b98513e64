//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward/backward pass. Every
//! operation appends a node; [`Graph::backward`] walks the tape in reverse.
//! Nodes whose inputs are all constants or frozen parameters carry no
//! gradient and are skipped entirely during the backward pass.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AttentionLayout};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>, probs: Vec<T> },
    GatherRows { table: Var, index: Vec<usize> },
    SelectRows { x: Var, fill: Var, mask: Rc<Vec<bool>> },
    Permute { x: Var, index: Rc<Vec<usize>> },
    Reshape(Var),
    SoftmaxRows(Var),
    StraightThrough(Var),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<T>, count: usize },
    Mse { pred: Var, target: Tensor<T> },
    KlUniform { logits: Var, probs: Tensor<T> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient of a parameter, if it was used and trainable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false, 0)
    }

    pub fn train(params: &'p ParamStore<T>, seed: u64) -> Self {
        Self::with_mode(params, true, seed)
    }

    fn with_mode(params: &'p ParamStore<T>, train: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input leaf that receives a gradient (used by verification code).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.params.is_trainable(id);
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `[n]` row vector to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(x.cols(), r.numel(), "add_row width mismatch");
        let mut out = x.clone();
        let n = out.cols();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::linear(self.value(a), self.value(b), None);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let r = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(r.y, Op::LayerNorm { x, gamma, beta, mean: r.mean, rstd: r.rstd }, rg)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>) -> Var {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), &layout);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, layout, probs }, rg)
    }

    /// Rows `table[index[i]]`, i.e. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros([index.len(), d]);
        for (i, &r) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        let rg = self.rg(table);
        self.push(out, Op::GatherRows { table, index }, rg)
    }

    /// Replaces row `i` of `x` by the `[d]` vector `fill` wherever `mask[i]`.
    pub fn select_rows(&mut self, x: Var, fill: Var, mask: Rc<Vec<bool>>) -> Var {
        let mut out = self.value(x).clone();
        let f = self.value(fill).data().to_vec();
        assert_eq!(mask.len(), out.rows());
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(&f);
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        self.push(out, Op::SelectRows { x, fill, mask }, rg)
    }

    /// `out.data[i] = x.data[index[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data).expect("permute shape");
        let rg = self.rg(x);
        self.push(out, Op::Permute { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Forward value `hard`, backward gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Var {
        assert_eq!(self.shape(soft), hard.shape());
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> =
            (0..n).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Mean of `-log softmax(logits)[t]` over rows whose target is `Some(t)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} logit rows",
                targets.len(),
                l.rows()
            )));
        }
        let v = l.cols();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::ShapeMismatch(format!("target {t} >= {v} classes")));
                }
                let row = l.row(i);
                total = total + kernels::log_sum_exp(row) - row[t];
            }
        }
        let probs = kernels::softmax_rows(l);
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let n = T::from_usize(p.numel()).unwrap();
        let loss = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg)
    }

    /// Mean over rows of `KL(softmax(logits) ‖ uniform)`.
    pub fn kl_uniform(&mut self, logits: Var) -> Var {
        let l = self.value(logits);
        let probs = kernels::softmax_rows(l);
        let log_k = T::from_usize(l.cols()).unwrap().ln();
        let mut total = T::zero();
        for i in 0..l.rows() {
            let lse = kernels::log_sum_exp(l.row(i));
            for (&q, &x) in probs.row(i).iter().zip(l.row(i)) {
                total = total + q * (x - lse);
            }
            total = total + log_k;
        }
        let loss = total / T::from_usize(l.rows()).unwrap();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::KlUniform { logits, probs }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = vec![None; self.params.len()];
        for (&id, &v) in &self.param_vars {
            if self.nodes[v.0].requires_grad {
                params[id.0] = grads[v.0].clone();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let n = g.cols();
                    let mut r = Tensor::zeros(self.shape(*row).to_vec());
                    for chunk in g.data().chunks(n) {
                        for (o, &x) in r.data_mut().iter_mut().zip(chunk) {
                            *o = *o + x;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                if self.rg(*a) {
                    // dX = dY · Wᵀ
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        w.data(),
                        (1, n as isize),
                        T::zero(),
                        dx.data_mut(),
                        (k as isize, 1),
                    );
                    self.accumulate(grads, *a, dx);
                }
                if self.rg(*b) {
                    // dW = Xᵀ · dY
                    let mut dw = Tensor::zeros(w.shape().to_vec());
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        x.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (n as isize, 1),
                    );
                    self.accumulate(grads, *b, dw);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gy, &xv)| gy * kernels::gelu_grad(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                let (m, n) = (xv.rows(), xv.cols());
                let nf = T::from_usize(n).unwrap();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgamma = Tensor::zeros([n]);
                let mut dbeta = Tensor::zeros([n]);
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for i in 0..m {
                    let (xr, gr) = (xv.row(i), g.row(i));
                    for j in 0..n {
                        xhat[j] = (xr[j] - mean[i]) * rstd[i];
                        dxhat[j] = gr[j] * gm.data()[j];
                        dgamma.data_mut()[j] = dgamma.data()[j] + gr[j] * xhat[j];
                        dbeta.data_mut()[j] = dbeta.data()[j] + gr[j];
                    }
                    let s1 = dxhat.iter().copied().sum::<T>();
                    let s2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>();
                    let out_row = dx.row_mut(i);
                    for j in 0..n {
                        out_row[j] = rstd[i] * (dxhat[j] - s1 / nf - xhat[j] * s2 / nf);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    layout,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatherRows { table, index } => {
                if self.rg(*table) {
                    let mut dt = Tensor::zeros(self.shape(*table).to_vec());
                    for (i, &r) in index.iter().enumerate() {
                        for (o, &x) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::SelectRows { x, fill, mask } => {
                let mut dx = g.clone();
                let mut df = Tensor::zeros(self.shape(*fill).to_vec());
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for (o, &x) in df.data_mut().iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                        dx.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *fill, df);
            }
            Op::Permute { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                for (i, &src) in index.iter().enumerate() {
                    dx.data_mut()[src] = dx.data()[src] + g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x).to_vec()).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = out.unwrap();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for (o, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StraightThrough(soft) => {
                self.accumulate(grads, *soft, g.clone());
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let scale = g.data()[0] / T::from_usize(*count).unwrap();
                let mut dl = Tensor::zeros(probs.shape().to_vec());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = dl.row_mut(i);
                        row.copy_from_slice(probs.row(i));
                        row[t] = row[t] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(p.numel()).unwrap();
                let d = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * c).collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), d).unwrap());
            }
            Op::KlUniform { logits, probs } => {
                let l = self.value(*logits);
                let scale = g.data()[0] / T::from_usize(l.rows()).unwrap();
                let mut dl = Tensor::zeros(l.shape().to_vec());
                for i in 0..l.rows() {
                    let lse = kernels::log_sum_exp(l.row(i));
                    let q = probs.row(i);
                    let h = q.iter().zip(l.row(i)).map(|(&a, &x)| a * (x - lse)).sum::<T>();
                    for ((o, &a), &x) in dl.row_mut(i).iter_mut().zip(q).zip(l.row(i)) {
                        *o = a * (x - lse - h) * scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttentionLayout,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / layout.heads;
    let ds = d as isize;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (offsets, _) = layout.prob_offsets();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut dp = Vec::new();

    for (s, (qs, ks)) in layout.q_segments.iter().zip(&layout.k_segments).enumerate() {
        let (nq, nk) = (qs.len, ks.len);
        if nq == 0 || nk == 0 {
            continue;
        }
        for h in 0..layout.heads {
            let p = &probs[offsets[s] + h * nq * nk..offsets[s] + (h + 1) * nq * nk];
            let q_off = qs.start * d + h * dh;
            let k_off = ks.start * d + h * dh;
            // dV = Pᵀ · dO
            T::gemm(
                nk,
                nq,
                dh,
                T::one(),
                p,
                (1, nk as isize),
                &g.data()[q_off..],
                (ds, 1),
                T::one(),
                &mut dv.data_mut()[k_off..],
                (ds, 1),
            );
            // dP = dO · Vᵀ
            dp.clear();
            dp.resize(nq * nk, T::zero());
            T::gemm(
                nq,
                dh,
                nk,
                T::one(),
                &g.data()[q_off..],
                (ds, 1),
                &v.data()[k_off..],
                (1, ds),
                T::zero(),
                &mut dp,
                (nk as isize, 1),
            );
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)), pre-multiplied by the score scale.
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv_, &pv) in dr.iter_mut().zip(pr) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            // dQ = dS · K
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                &dp,
                (nk as isize, 1),
                &k.data()[k_off..],
                (ds, 1),
                T::one(),
                &mut dq.data_mut()[q_off..],
                (ds, 1),
            );
            // dK = dSᵀ · Q
            T::gemm(
                nk,
                nq,
                dh,
                T::one(),
                &dp,
                (1, nk as isize),
                &q.data()[q_off..],
                (ds, 1),
                T::one(),
                &mut dk.data_mut()[k_off..],
                (ds, 1),
            );
        }
    }
    (dq, dk, dv)
}
