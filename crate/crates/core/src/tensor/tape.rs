use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Trans};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    AvgPool,
    Linear,
    BatchNorm,
    Add,
    ScaleChannels,
    Reshape,
    SoftmaxCrossEntropy,
    Sum,
    Dot,
}

/// Running-statistics handling for [`Tape::batch_norm`].
pub enum BnMode<'a, T> {
    /// Normalize by batch statistics and fold them into the running estimates.
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    /// Normalize by the running estimates; nothing is mutated.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Dot {
        x: Var,
        coeffs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Add(..) => OpKind::Add,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    scope: Rc<str>,
}

/// Linear record of one forward pass. Nodes are appended in evaluation
/// order, so operands always precede their consumers.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    keyed: BTreeMap<usize, Var>,
    scopes: Vec<String>,
    scope: Rc<str>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            keyed: BTreeMap::new(),
            scopes: Vec::new(),
            scope: Rc::from(""),
            consumed: false,
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

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scopes.push(name.to_string());
        self.scope = Rc::from(self.scopes.join("."));
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
        self.scope = Rc::from(self.scopes.join("."));
    }

    /// Recorded operations with the scope active when each was recorded.
    pub fn ops(&self) -> impl Iterator<Item = (OpKind, &str)> + '_ {
        self.nodes.iter().map(|n| (n.op.kind(), &*n.scope))
    }

    /// Hash of which ReLU outputs are active. Two forward passes with equal
    /// fingerprints took the same side of every ReLU kink.
    pub fn relu_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(_) = node.op {
                for chunk in node.value.data().chunks(64) {
                    let bits = chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i));
                    h.write_u64(bits);
                }
            }
        }
        h.finish()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.push(Op::Leaf, value, needs_grad)
    }

    /// Leaf registered at most once per key; later calls return the same var.
    pub fn keyed_leaf(&mut self, key: usize, make: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf(make());
        self.keyed.insert(key, v);
        v
    }

    pub fn keyed_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.keyed.iter().map(|(&k, &v)| (k, v))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        let input = self.value(x);
        input.check_finite("conv2d")?;
        let out = kernels::conv2d_forward(&geom, input.data(), self.value(w).data());
        let value = Tensor::new(&geom.out_shape(), out)?;
        let needs = self.needs(&[x, w]);
        Ok(self.push(Op::Conv2d { x, w, geom }, value, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(&[x]);
        self.push(Op::Relu(x), value, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let needs = self.needs(&[x]);
        self.push(Op::Sigmoid(x), value, needs)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected NCHW, got {shape:?}"),
            ));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let denom = T::from_usize(plane).expect("plane size");
        let data = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| {
                let mut acc = T::zero();
                for &v in &data[i * plane..(i + 1) * plane] {
                    acc = acc + v;
                }
                acc / denom
            })
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, needs))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("avg_pool", format!("expected NCHW, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("window {k} does not divide {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let denom = T::from_usize(k * k).expect("window");
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let plane = &data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + plane[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc / denom;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::AvgPool { x, k }, value, needs))
    }

    /// Affine map `x * w^T + b` for `x: [N, D_in]`, `w: [D_out, D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "fully_connected",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            Trans::No,
            self.value(w).data(),
            Trans::Yes,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[n, d_out], out)?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, value, needs))
    }

    /// Per-channel normalization of an NCHW tensor followed by `gamma * x + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected NCHW, got {shape:?}"),
            ));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let count = n * plane;
        let data = self.value(x).data();
        let (mean, inv_std, train) = match mode {
            BnMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        "train mode needs at least two values per channel",
                    ));
                }
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                let m = T::from_usize(count).expect("count");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let planes = |ch: usize| (0..n).map(move |s| (s * c + ch) * plane);
                for ch in 0..c {
                    let acc = planes(ch)
                        .map(|off| kernels::sum_lanes(&data[off..off + plane]))
                        .fold(T::zero(), |a, b| a + b);
                    mean[ch] = acc / m;
                    let sq = planes(ch)
                        .map(|off| kernels::sq_dev_lanes(&data[off..off + plane], mean[ch]))
                        .fold(T::zero(), |a, b| a + b);
                    var[ch] = sq / m;
                }
                let unbias = m / (m - T::one());
                for ch in 0..c {
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean[ch];
                    running_var[ch] = (T::one() - momentum) * running_var[ch] + momentum * var[ch] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std, true)
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); data.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                for (o, &v) in out[off..off + plane].iter_mut().zip(&data[off..off + plane]) {
                    *o = v * scale + shift;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            value,
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Multiply every element of channel `c` in sample `n` by `s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s);
        if xs.len() != 4 || ss != [xs[0], xs[1], 1, 1] {
            return Err(Error::shape("scale_channels", format!("x {xs:?}, s {ss:?}")));
        }
        let plane = xs[2] * xs[3];
        let scales = self.value(s).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scales[i / plane])
            .collect();
        let value = Tensor::new(&xs, out)?;
        let needs = self.needs(&[x, s]);
        Ok(self.push(Op::ScaleChannels { x, s }, value, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detach().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), value, needs))
    }

    /// Batch-mean of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let lse = kernels::log_sum_exp(row);
            total = total + (lse - row[label]);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::from_usize(n).expect("batch");
        if !loss.is_finite() {
            return Err(Error::NumericFault {
                op: "softmax_cross_entropy".into(),
                iter: None,
            });
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let needs = self.needs(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(acc), needs)
    }

    /// `sum(x * coeffs)`; a generic scalar probe for gradient checks.
    pub fn dot(&mut self, x: Var, coeffs: &Tensor<T>) -> Result<Var> {
        if self.value(x).numel() != coeffs.numel() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape(x), coeffs.shape()),
            ));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.value(x).data().iter().zip(coeffs.data()) {
            acc = acc + a * b;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::Dot {
                x,
                coeffs: coeffs.data().to_vec(),
            },
            Tensor::scalar(acc),
            needs,
        ))
    }

    /// Reverse sweep from a scalar. Gradients land on leaves created with
    /// `requires_grad`; a tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Vec<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    slot @ None => *slot = Some(contrib),
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                }
            };
            let value = |v: Var| nodes[v.0].value.data();
            let needs = |v: Var| nodes[v.0].needs_grad;

            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad() {
                        leaf_grads.push((i, g));
                    }
                }
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = kernels::conv2d_backward(geom, value(*x), value(*w), &g, needs(*x));
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    send(*w, dw);
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() })
                        .collect();
                    send(*x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let dx = g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                    send(*x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = nodes[x.0].value.shape();
                    let plane = shape[2] * shape[3];
                    let denom = T::from_usize(plane).expect("plane");
                    let dx = (0..g.len() * plane).map(|j| g[j / plane] / denom).collect();
                    send(*x, dx);
                }
                Op::AvgPool { x, k } => {
                    let shape = nodes[x.0].value.shape();
                    let (h, w) = (shape[2], shape[3]);
                    let (ho, wo) = (h / k, w / k);
                    let denom = T::from_usize(k * k).expect("window");
                    let planes = shape[0] * shape[1];
                    let mut dx = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(p * h + y) * w + xx] = g[(p * ho + y / k) * wo + xx / k] / denom;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, d_in) = (xs[0], xs[1]);
                    let d_out = nodes[w.0].value.shape()[0];
                    if needs(*x) {
                        let mut dx = vec![T::zero(); n * d_in];
                        kernels::gemm(
                            n,
                            d_out,
                            d_in,
                            &g,
                            Trans::No,
                            value(*w),
                            Trans::No,
                            T::zero(),
                            &mut dx,
                        );
                        send(*x, dx);
                    }
                    if needs(*w) {
                        let mut dw = vec![T::zero(); d_out * d_in];
                        kernels::gemm(
                            d_out,
                            n,
                            d_in,
                            &g,
                            Trans::Yes,
                            value(*x),
                            Trans::No,
                            T::zero(),
                            &mut dw,
                        );
                        send(*w, dw);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); d_out];
                        for row in g.chunks(d_out) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d = *d + r;
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    let shape = nodes[x.0].value.shape();
                    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let xd = value(*x);
                    let gd = value(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let gs = &g[off..off + plane];
                            let sg = kernels::sum_lanes(gs);
                            let sgx = kernels::dot_lanes(gs, &xd[off..off + plane]);
                            // sum(g * xhat) = inv_std * (sum(g x) - mean sum(g))
                            dgamma[ch] = dgamma[ch] + (sgx - mean[ch] * sg) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + sg;
                        }
                    }
                    if needs(*x) {
                        let mut dx = vec![T::zero(); xd.len()];
                        let m = T::from_usize(n * plane).expect("count");
                        // dx = a g + b x + c per channel
                        let coef: Vec<(T, T, T)> = (0..c)
                            .map(|ch| {
                                let scale = gd[ch] * inv_std[ch];
                                if *train {
                                    let k = scale / m;
                                    let bx = -k * dgamma[ch] * inv_std[ch];
                                    (scale, bx, -k * dbeta[ch] - bx * mean[ch])
                                } else {
                                    (scale, T::zero(), T::zero())
                                }
                            })
                            .collect();
                        for s in 0..n {
                            for (ch, &(ca, cb, cc)) in coef.iter().enumerate() {
                                let off = (s * c + ch) * plane;
                                let out = &mut dx[off..off + plane];
                                for ((d, &gv), &xv) in out
                                    .iter_mut()
                                    .zip(&g[off..off + plane])
                                    .zip(&xd[off..off + plane])
                                {
                                    *d = ca * gv + cb * xv + cc;
                                }
                            }
                        }
                        send(*x, dx);
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                Op::Add(a, b) => {
                    if needs(*a) && needs(*b) {
                        send(*a, g.clone());
                    } else if needs(*a) {
                        send(*a, g);
                        continue;
                    }
                    send(*b, g);
                }
                Op::ScaleChannels { x, s } => {
                    let shape = nodes[x.0].value.shape();
                    let plane = shape[2] * shape[3];
                    let xd = value(*x);
                    let sd = value(*s);
                    if needs(*s) {
                        let ds = (0..sd.len())
                            .map(|p| {
                                let mut acc = T::zero();
                                for j in p * plane..(p + 1) * plane {
                                    acc = acc + g[j] * xd[j];
                                }
                                acc
                            })
                            .collect();
                        send(*s, ds);
                    }
                    let dx = g.iter().enumerate().map(|(j, &gj)| gj * sd[j / plane]).collect();
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / T::from_usize(labels.len()).expect("batch");
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] = d[i * k + l] - scale;
                    }
                    send(*logits, d);
                }
                Op::Sum(x) => {
                    let len = nodes[x.0].value.numel();
                    send(*x, vec![g[0]; len]);
                }
                Op::Dot { x, coeffs } => {
                    send(*x, coeffs.iter().map(|&c| c * g[0]).collect());
                }
            }
        }
        for (i, g) in leaf_grads {
            let t = &mut self.nodes[i].value;
            let merged = match t.take_grad() {
                Some(prev) => prev.into_iter().zip(g).map(|(a, b)| a + b).collect(),
                None => g,
            };
            t.set_grad(merged)?;
        }
        Ok(())
    }
}
