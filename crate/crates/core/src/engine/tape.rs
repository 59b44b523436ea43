//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, so node inputs always precede the node itself. [`Tape::backward`]
//! walks the nodes once in reverse, accumulating vector-Jacobian products.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, PoolAxis};
use super::params::{ParamId, ParamStore};
use super::real::{matmul, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast {
        x: Var,
        gate: Var,
        strides: [usize; 4],
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2d {
        x: Var,
        idx: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        idx: Vec<usize>,
    },
    DirectionalPool {
        x: Var,
        axis: PoolAxis,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics from a training-mode batch norm, for running averages.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over batch and spatial positions.
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], data: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_rc(Rc::new(value), Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_rc(Rc::new(value), Op::Leaf, true)
    }

    /// Records a stored parameter without copying it.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let needs_grad = store.param(id).requires_grad();
        self.push_rc(store.shared(id), Op::Param(id), needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x ⊙ gate` where the 4-D gate has singleton dimensions wherever it is
    /// shared, e.g. `b×c×1×1`, `b×c×H×1`, `b×c×1×W` or `b×1×H×W`.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let strides = kernels::broadcast_strides(self.shape(x), self.shape(gate))?;
        let xv = self.value(x);
        let gv = self.value(gate).data();
        let mut out = xv.data().to_vec();
        kernels::for_each_broadcast(xv.shape(), strides, |i, j| out[i] *= gv[j]);
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(v, Op::MulBroadcast { x, gate, strides }, &[x, gate]))
    }

    /// `s · x` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::MulScalar { x, s }, &[x, s]))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|e| T::one() - e);
        self.push(v, Op::OneMinus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::from_usize(x.len()).unwrap());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (v, geom) = kernels::conv2d_forward(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, kernel, bias, geom }, &inputs))
    }

    /// Fully connected layer on a 2-D input: `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (v, idx) = kernels::max_pool2d_forward(self.value(x))?;
        Ok(self.push(v, Op::MaxPool2d { x, idx }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (v, idx) = kernels::global_max_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalMaxPool { x, idx }, &[x]))
    }

    pub fn directional_pool(&mut self, x: Var, axis: PoolAxis) -> Result<Var> {
        let v = kernels::directional_pool(self.value(x), axis)?;
        Ok(self.push(v, Op::DirectionalPool { x, axis }, &[x]))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = kernels::channel_mean(self.value(x))?;
        Ok(self.push(v, Op::ChannelMean(x), &[x]))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (v, idx) = kernels::channel_max(self.value(x))?;
        Ok(self.push(v, Op::ChannelMax { x, idx }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Training-mode batch normalization over `(batch, H, W)` per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let out = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let s = self.shape(x);
        let stats = BatchStats {
            mean: out.mean,
            var: out.var,
            count: s[0] * s[2] * s[3],
        };
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        Ok((self.push(out.y, op, &[x, gamma, beta]), stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (v, inv_std) = kernels::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Mean over the batch of `weights[yᵢ] · −log softmax(logitsᵢ)[yᵢ]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(Error::shape(format!(
                "cross entropy expects batch×classes logits, got {:?}",
                lv.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if weights.len() != k {
            return Err(Error::Contract(format!(
                "{} class weights for {k} classes",
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax_rows(lv)?;
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += weights[y] * (lse - row[y]);
        }
        loss /= T::from_usize(n).unwrap();
        let op = Op::CrossEntropy {
            logits,
            probs: probs.into_data(),
            labels: labels.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.leaves.insert(Var(i), g.clone());
                    match out.params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(*id, g);
                        }
                    }
                }
                op => self.node_backward(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], self.shape(v), data);
        }
    }

    fn node_backward(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are handled by backward"),
            Op::Add(a, b) => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, gd.to_vec());
                self.send(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.send(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.send(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::MulBroadcast { x, gate, strides } => {
                let xv = self.value(*x);
                let gv = self.value(*gate).data();
                let shape = xv.shape();
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    kernels::for_each_broadcast(shape, *strides, |i, j| dx[i] *= gv[j]);
                    self.send(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let xd = xv.data();
                    let mut dg = vec![T::zero(); gv.len()];
                    kernels::for_each_broadcast(shape, *strides, |i, j| dg[j] += gd[i] * xd[i]);
                    self.send(grads, *gate, dg);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    self.send(grads, *x, gd.iter().map(|&v| v * sv).collect());
                }
                if self.wants(*s) {
                    let xd = self.value(*x).data();
                    let ds = gd.iter().zip(xd).map(|(&g, &v)| g * v).sum();
                    self.send(grads, *s, vec![ds]);
                }
            }
            Op::OneMinus(a) => self.send(grads, *a, gd.iter().map(|&v| -v).collect()),
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.send(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.send(grads, *a, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = gd[0] / T::from_usize(n).unwrap();
                self.send(grads, *a, vec![v; n]);
            }
            Op::Reshape(a) => self.send(grads, *a, gd.to_vec()),
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let need = (
                    self.wants(*x),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    gd,
                    need,
                );
                if let Some(dx) = cg.dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dk) = cg.dkernel {
                    self.send(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, cg.dbias) {
                    self.send(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul(n, fout, fin, gd, false, self.value(*w).data(), false, &mut dx, false);
                    self.send(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    matmul(fout, n, fin, gd, true, self.value(*x).data(), false, &mut dw, false);
                    self.send(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.send(grads, *b, db);
                    }
                }
            }
            Op::MaxPool2d { x, idx } | Op::GlobalMaxPool { x, idx } | Op::ChannelMax { x, idx } => {
                let n = self.value(*x).len();
                self.send(grads, *x, kernels::scatter_argmax(gd, idx, n));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                self.send(grads, *x, dx);
            }
            Op::DirectionalPool { x, axis } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let mut dx = vec![T::zero(); self.value(*x).len()];
                match axis {
                    PoolAxis::Height => {
                        let inv = T::one() / T::from_usize(w).unwrap();
                        for (row, &v) in dx.chunks_mut(w).zip(gd) {
                            row.fill(v * inv);
                        }
                    }
                    PoolAxis::Width => {
                        let inv = T::one() / T::from_usize(h).unwrap();
                        for (plane, gp) in dx.chunks_mut(h * w).zip(gd.chunks(w)) {
                            for row in plane.chunks_mut(w) {
                                for (d, &v) in row.iter_mut().zip(gp) {
                                    *d = v * inv;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::ChannelMean(x) => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut dx = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    let src = &gd[bi * hw..(bi + 1) * hw];
                    for plane in dx[bi * c * hw..(bi + 1) * c * hw].chunks_mut(hw) {
                        for (d, &v) in plane.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let piece = kernels::slice_axis(g, *axis, start, len).expect("in range");
                        self.send(grads, p, piece.into_data());
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let len = g.shape()[*axis] * inner;
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    dx[o * full + start * inner..][..len].copy_from_slice(&gd[o * len..(o + 1) * len]);
                }
                self.send(grads, *x, dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = kernels::batch_norm_train_backward(
                    self.shape(*x),
                    gd,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                );
                self.send(grads, *x, dx);
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (b, c, h, w) = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for i in off..off + hw {
                            dx[i] = gd[i] * gam[ci] * inv_std[ci];
                            dgamma[ci] += gd[i] * (xd[i] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                self.send(grads, *x, dx);
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let y = out;
                let k = y.shape()[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((d, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(gd.chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                weights,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = gd[0] / T::from_usize(n).unwrap();
                let mut dx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = &mut dx[i * k..(i + 1) * k];
                    row[y] -= T::one();
                    let wgt = weights[y] * scale;
                    for v in row.iter_mut() {
                        *v *= wgt;
                    }
                }
                self.send(grads, *logits, dx);
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
