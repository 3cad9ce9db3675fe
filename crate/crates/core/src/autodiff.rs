//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value plus whatever it needs for the backward rule, so
//! node inputs always precede the node. [`Tape::backward`] walks the nodes in
//! reverse and returns a [`Gradients`] set covering every reachable leaf.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Window};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Log,
    Exp,
    Scale,
    AddScalar,
    ClampMin,
    Sum,
    Mean,
    Softmax,
    Gather,
    Select,
    AddBias,
    Conv2d,
    BatchNorm,
    BatchNormEval,
    GlobalAvgPool,
    GlobalMaxPool,
    LocalAvgPool,
    SpatialSelect,
    Concat,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::ClampMin,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::Gather,
        OpKind::Select,
        OpKind::AddBias,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::BatchNormEval,
        OpKind::GlobalAvgPool,
        OpKind::GlobalMaxPool,
        OpKind::LocalAvgPool,
        OpKind::SpatialSelect,
        OpKind::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ClampMin => "clamp_min",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::Gather => "gather",
            OpKind::Select => "select",
            OpKind::AddBias => "add_bias",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::LocalAvgPool => "local_avg_pool",
            OpKind::SpatialSelect => "spatial_select",
            OpKind::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Scale(Var, T),
    AddScalar(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gather { input: Var, targets: Vec<usize> },
    Select { input: Var, index: usize },
    AddBias(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    GlobalAvgPool(Var),
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    LocalAvgPool { input: Var, window: Window },
    SpatialSelect { input: Var, index: usize },
    Concat(Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Gather { .. } => OpKind::Gather,
            Op::Select { .. } => OpKind::Select,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
            Op::LocalAvgPool { .. } => OpKind::LocalAvgPool,
            Op::SpatialSelect { .. } => OpKind::SpatialSelect,
            Op::Concat(..) => OpKind::Concat,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Gather { input, .. }
            | Op::Select { input, .. }
            | Op::GlobalMaxPool { input, .. }
            | Op::LocalAvgPool { input, .. }
            | Op::SpatialSelect { input, .. } => vec![*input],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. }
            | Op::BatchNormEval { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

/// Append-only record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, usize)>,
    sign_flip: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), sign_flip: None }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Leaves registered with [`Tape::param`], paired with their parameter ids.
    pub fn param_leaves(&self) -> &[(Var, usize)] {
        &self.params
    }

    /// Test fixture: negates every gradient produced by `kind`'s backward rule.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(
            !inputs.iter().all(|i| self.nodes[i.0].value.is_finite()) || value.is_finite(),
            "{} produced a non-finite value from finite inputs",
            op.kind()
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are only propagated towards leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable leaf tied to parameter `id` of some store.
    pub fn param(&mut self, value: Tensor<T>, id: usize) -> Var {
        let v = self.leaf(value, true);
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.numel() == 1 {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::dim(op, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= T::zero() || x.is_nan()) {
            return Err(Error::Domain { op: "log", detail: format!("log of non-positive value {bad}") });
        }
        let v = t.map(|x| x.ln());
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push(v, Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::c(t.numel() as f64));
        self.push(v, Op::Mean(a))
    }

    /// Row-wise softmax of a `[rows × classes]` matrix, shifted by the row
    /// maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::dim("softmax", format!("expected a matrix, got {:?}", t.shape())));
        }
        let cols = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Picks `x[r, targets[r]]` from each row.
    pub fn gather(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim(
                "gather",
                format!("{} targets for input {s:?}", targets.len()),
            ));
        }
        let cols = s[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(Error::Index(format!("target class {bad} out of range for {cols} classes")));
        }
        let data = targets.iter().enumerate().map(|(r, &c)| t.data()[r * cols + c]).collect();
        let v = Tensor::new(&[targets.len()], data)?;
        Ok(self.push(v, Op::Gather { input: a, targets: targets.to_vec() }))
    }

    /// Flat element `index` as a one-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.numel() {
            return Err(Error::Index(format!("element {index} of {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[index]);
        Ok(self.push(v, Op::Select { input: a, index }))
    }

    /// `x[b×n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.shape().len() != 2 || tb.shape() != [ta.shape()[1]] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match {:?}", tb.shape(), ta.shape()),
            ));
        }
        let n = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let v = Tensor::new(ta.shape(), data)?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// Cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]` plus bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel {ks:?} expects {}", xs[1], ks[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {} filters", self.shape(b), ks[0])));
            }
        }
        let geom = ConvGeom::new(xs[1], (xs[2], xs[3]), (ks[2], ks[3]), stride, padding)?;
        let (batch, oc) = (xs[0], ks[0]);
        let (kk, p) = (geom.patch_len(), geom.out_len());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut cols = vec![T::zero(); batch * kk * p];
        let mut out = vec![T::zero(); batch * oc * p];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..batch {
                let col = &mut cols[b * kk * p..(b + 1) * kk * p];
                kernels::im2col(&geom, &x[b * in_len..(b + 1) * in_len], col);
                kernels::gemm_nn(oc, kk, p, k, col, &mut out[b * oc * p..(b + 1) * oc * p], false);
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (i, chunk) in out.chunks_mut(p).enumerate() {
                    let bo = bd[i % oc];
                    chunk.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        }
        let v = Tensor::new(&[batch, oc, geom.oh, geom.ow], out)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, bias, geom, cols }))
    }

    fn check_channel_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::dim(op, format!("expected [B, C, H, W], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                op,
                format!("affine params {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(c)
    }

    fn affine_channels(&self, x: Var, gamma: Var, beta: Var, xhat: &[T]) -> Tensor<T> {
        let xs = self.shape(x);
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                g[ch] * v + bt[ch]
            })
            .collect();
        Tensor::new(xs, data).expect("same shape")
    }

    /// Training-mode batch normalisation over `(B, H, W)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let c = self.check_channel_params("batch_norm", x, gamma, beta)?;
        let xs = self.shape(x).to_vec();
        let (batch, hw) = (xs[0], xs[2] * xs[3]);
        let m = batch * hw;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..batch {
                let base = (b * c + ch) * hw;
                s = s + xd[base..base + hw].iter().copied().sum::<T>();
            }
            mean[ch] = s / T::c(m as f64);
            let mut sq = T::zero();
            for b in 0..batch {
                let base = (b * c + ch) * hw;
                for &v in &xd[base..base + hw] {
                    let d = v - mean[ch];
                    sq = sq + d * d;
                }
            }
            var[ch] = sq / T::c(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let value = self.affine_channels(x, gamma, beta, &xhat);
        let unbias = if m > 1 { T::c(m as f64 / (m - 1) as f64) } else { T::one() };
        let stats = BatchStats { mean, var: var.iter().map(|&v| v * unbias).collect() };
        let v = self.push(value, Op::BatchNorm { input: x, gamma, beta, xhat, inv_std });
        Ok((v, stats))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_channel_params("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm_eval", "running statistics length mismatch"));
        }
        let hw = self.shape(x)[2] * self.shape(x)[3];
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - running_mean[ch]) * inv_std[ch]
            })
            .collect();
        let value = self.affine_channels(x, gamma, beta, &xhat);
        Ok(self.push(value, Op::BatchNormEval { input: x, gamma, beta, xhat, inv_std }))
    }

    fn map_shape4(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(Error::dim(op, format!("expected [B, C, H, W], got {s:?}"))),
        }
    }

    /// Mean over all spatial positions: `[B, C, H, W] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.map_shape4("global_avg_pool", x)?;
        let hw = h * w;
        let n = T::c(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / n)
            .collect();
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Max over all spatial positions; the first maximal position is the one
    /// that receives gradient.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.map_shape4("global_max_pool", x)?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(b * c);
        let mut data = Vec::with_capacity(b * c);
        for plane in self.value(x).data().chunks(hw) {
            let i = crate::tensor::argmax(plane);
            argmax.push(i);
            data.push(plane[i]);
        }
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.push(v, Op::GlobalMaxPool { input: x, argmax }))
    }

    /// Windowed average pooling. Each output cell averages the in-bounds
    /// cells of its window.
    pub fn local_avg_pool(&mut self, x: Var, window: Window) -> Result<Var> {
        let [b, c, h, w] = self.map_shape4("local_avg_pool", x)?;
        let (n1, n2) = (window.out_len(h)?, window.out_len(w)?);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * n1 * n2);
        for plane in xd.chunks(h * w) {
            for oi in 0..n1 {
                let (r0, r1) = window.span(oi, h);
                for oj in 0..n2 {
                    let (c0, c1) = window.span(oj, w);
                    let mut s = T::zero();
                    for r in r0..r1 {
                        for col in c0..c1 {
                            s = s + plane[r * w + col];
                        }
                    }
                    out.push(s / T::c(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let v = Tensor::new(&[b, c, n1, n2], out)?;
        Ok(self.push(v, Op::LocalAvgPool { input: x, window }))
    }

    /// Channel vector at flat spatial position `index`: `[B, C, H, W] → [B, C]`.
    pub fn spatial_select(&mut self, x: Var, index: usize) -> Result<Var> {
        let [b, c, h, w] = self.map_shape4("spatial_select", x)?;
        if index >= h * w {
            return Err(Error::Index(format!("position {index} of a {h}x{w} map")));
        }
        let hw = h * w;
        let data = self.value(x).data().chunks(hw).map(|plane| plane[index]).collect();
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.push(v, Op::SpatialSelect { input: x, index }))
    }

    /// Column-wise concatenation of two `[B, ·]` matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat", format!("cannot join {sa:?} and {sb:?}")));
        }
        let (rows, na, nb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * na..(r + 1) * na]);
            data.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let v = Tensor::new(&[rows, na + nb], data)?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("root {} is not on this tape", root.0)));
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::Contract(format!("backward root must be a scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(rv.shape()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let flip = self.sign_flip == Some(node.op.kind());
            for (input, mut contrib) in self.backward_node(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if flip {
                    contrib.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                kernels::gemm_nt(m, n, k, gd, tb.data(), &mut da, false);
                let mut db = vec![T::zero(); k * n];
                kernels::gemm_tn(k, m, n, ta.data(), gd, &mut db, false);
                vec![
                    (*a, Tensor::new(ta.shape(), da).unwrap()),
                    (*b, Tensor::new(tb.shape(), db).unwrap()),
                ]
            }
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a))), (*b, reduce_to(g, val(*b)))],
            Op::Sub(a, b) => {
                let neg = g.map(|v| -v);
                vec![(*a, reduce_to(g, val(*a))), (*b, reduce_to(&neg, val(*b)))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = broadcast_mul(g, tb);
                let gb = broadcast_mul(g, ta);
                vec![(*a, reduce_to(&ga, ta)), (*b, reduce_to(&gb, tb))]
            }
            Op::Relu(a) => {
                let x = val(*a);
                vec![(*a, zip(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))]
            }
            Op::Log(a) => vec![(*a, zip(g, val(*a), |gv, xv| gv / xv))],
            Op::Exp(a) => vec![(*a, zip(g, &node.value, |gv, y| gv * y))],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ClampMin(a, floor) => {
                vec![(*a, zip(g, val(*a), |gv, xv| if xv > *floor { gv } else { T::zero() }))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), gd[0] / T::c(x.numel() as f64)))]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.shape()[1];
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(gd.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                vec![(*a, Tensor::new(y.shape(), dx).unwrap())]
            }
            Op::Gather { input, targets } => {
                let x = val(*input);
                let cols = x.shape()[1];
                let mut dx = Tensor::zeros(x.shape());
                for (r, &c) in targets.iter().enumerate() {
                    dx.data_mut()[r * cols + c] = gd[r];
                }
                vec![(*input, dx)]
            }
            Op::Select { input, index } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                dx.data_mut()[*index] = gd[0];
                vec![(*input, dx)]
            }
            Op::AddBias(a, bias) => {
                let n = val(*bias).numel();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![(*a, g.clone()), (*bias, Tensor::new(&[n], db).unwrap())]
            }
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let (x, k) = (val(*input), val(*kernel));
                let batch = x.shape()[0];
                let oc = k.shape()[0];
                let (kk, p) = (geom.patch_len(), geom.out_len());
                let in_len = x.numel() / batch;
                let mut dk = vec![T::zero(); k.numel()];
                let need_dx = self.nodes[input.0].requires_grad;
                let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
                let mut dcol = vec![T::zero(); kk * p];
                for b in 0..batch {
                    let gb = &gd[b * oc * p..(b + 1) * oc * p];
                    let col = &cols[b * kk * p..(b + 1) * kk * p];
                    kernels::gemm_nt(oc, p, kk, gb, col, &mut dk, true);
                    if need_dx {
                        kernels::gemm_tn(kk, oc, p, k.data(), gb, &mut dcol, false);
                        kernels::col2im(geom, &dcol, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                }
                let mut out = vec![(*kernel, Tensor::new(k.shape(), dk).unwrap())];
                if need_dx {
                    out.push((*input, Tensor::new(x.shape(), dx).unwrap()));
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); oc];
                    for (i, chunk) in gd.chunks(p).enumerate() {
                        db[i % oc] = db[i % oc] + chunk.iter().copied().sum::<T>();
                    }
                    out.push((*bv, Tensor::new(&[oc], db).unwrap()));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                let xs = val(*input).shape();
                let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = T::c((batch * hw) as f64);
                let gam = val(*gamma).data();
                let (dgamma, dbeta) = channel_affine_grads(gd, xhat, c, hw);
                let mut dx = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    // dxhat = g·γ
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for b in 0..batch {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let d = gd[i] * gam[ch];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat[i];
                        }
                    }
                    let scale = inv_std[ch] / m;
                    for b in 0..batch {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let d = gd[i] * gam[ch];
                            dx[i] = scale * (m * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(xs, dx).unwrap()),
                    (*gamma, Tensor::new(&[c], dgamma).unwrap()),
                    (*beta, Tensor::new(&[c], dbeta).unwrap()),
                ]
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                let xs = val(*input).shape();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let gam = val(*gamma).data();
                let (dgamma, dbeta) = channel_affine_grads(gd, xhat, c, hw);
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / hw) % c;
                        v * gam[ch] * inv_std[ch]
                    })
                    .collect();
                vec![
                    (*input, Tensor::new(xs, dx).unwrap()),
                    (*gamma, Tensor::new(&[c], dgamma).unwrap()),
                    (*beta, Tensor::new(&[c], dbeta).unwrap()),
                ]
            }
            Op::GlobalAvgPool(a) => {
                let xs = val(*a).shape();
                let hw = xs[2] * xs[3];
                let n = T::c(hw as f64);
                let dx = gd.iter().flat_map(|&v| std::iter::repeat(v / n).take(hw)).collect();
                vec![(*a, Tensor::new(xs, dx).unwrap())]
            }
            Op::GlobalMaxPool { input, argmax } => {
                let xs = val(*input).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Tensor::zeros(xs);
                for (plane, (&i, &v)) in argmax.iter().zip(gd).enumerate() {
                    dx.data_mut()[plane * hw + i] = v;
                }
                vec![(*input, dx)]
            }
            Op::LocalAvgPool { input, window } => {
                let xs = val(*input).shape();
                let (h, w) = (xs[2], xs[3]);
                let (n1, n2) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for (pi, gplane) in gd.chunks(n1 * n2).enumerate() {
                    let plane = &mut dd[pi * h * w..(pi + 1) * h * w];
                    for oi in 0..n1 {
                        let (r0, r1) = window.span(oi, h);
                        for oj in 0..n2 {
                            let (c0, c1) = window.span(oj, w);
                            let share = gplane[oi * n2 + oj] / T::c(((r1 - r0) * (c1 - c0)) as f64);
                            for r in r0..r1 {
                                for col in c0..c1 {
                                    plane[r * w + col] = plane[r * w + col] + share;
                                }
                            }
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::SpatialSelect { input, index } => {
                let xs = val(*input).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Tensor::zeros(xs);
                for (plane, &v) in gd.iter().enumerate() {
                    dx.data_mut()[plane * hw + index] = v;
                }
                vec![(*input, dx)]
            }
            Op::Concat(a, b) => {
                let (na, nb) = (val(*a).shape()[1], val(*b).shape()[1]);
                let mut da = Vec::with_capacity(val(*a).numel());
                let mut db = Vec::with_capacity(val(*b).numel());
                for row in gd.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                vec![
                    (*a, Tensor::new(val(*a).shape(), da).unwrap()),
                    (*b, Tensor::new(val(*b).shape(), db).unwrap()),
                ]
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// `g ⊙ other`, where `other` may be a one-element tensor.
fn broadcast_mul<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.numel() == 1 && g.numel() != 1 {
        let c = other.item();
        g.map(|v| v * c)
    } else if g.numel() == 1 && other.numel() != 1 {
        let c = g.item();
        other.map(|v| v * c)
    } else {
        zip(g, other, |x, y| x * y)
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, operand: &Tensor<T>) -> Tensor<T> {
    if g.shape() == operand.shape() {
        g.clone()
    } else {
        Tensor::full(operand.shape(), g.sum())
    }
}

fn channel_affine_grads<T: Scalar>(g: &[T], xhat: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
        let ch = (i / hw) % c;
        dgamma[ch] = dgamma[ch] + gv * xv;
        dbeta[ch] = dbeta[ch] + gv;
    }
    (dgamma, dbeta)
}

/// Result of [`Tape::backward`]: one gradient per reachable node that
/// requires it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when `v` is unreachable.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 0.]));
        let b = tape.constant(t(&[2, 1], &[0., 1.]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_and_log_exp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);

        let h = tape.constant(Tensor::scalar(0.5));
        let e = tape.exp(h);
        let l = tape.log(e).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() <= 1e-12);

        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2, 2], &[0.3, -1., 2., 5.]), true);
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.; 4]);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true);
        let _ = tape.sum(w);
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.wrt(&tape, w).data(), &[0., 0.]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.add(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_broadcasting() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let m = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(m).data(), &[2., 4., 6.]);
        let total = tape.sum(m);
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(s).unwrap().item(), 6.0);
        assert_eq!(g.get(a).unwrap().data(), &[2., 2., 2.]);

        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[1000., 0.]));
        let p = tape.softmax(z).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] >= 0.0 && v[1] < 1e-300);

        let z = tape.constant(Tensor::zeros(&[1, 10]));
        let p = tape.softmax(z).unwrap();
        assert!(tape.value(p).data().iter().all(|&q| (q - 0.1).abs() < 1e-15));
    }

    #[test]
    fn gather_rejects_out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.gather(z, &[0, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn global_pools() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), true);
        let a = tape.global_avg_pool(x).unwrap();
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(a).data(), &[2.5]);
        assert_eq!(tape.value(m).data(), &[4.]);
        let c = tape.concat(a, m).unwrap();
        assert_eq!(tape.value(c).data(), &[2.5, 4.]);
    }

    #[test]
    fn global_max_tie_goes_to_first_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
        let m = tape.global_max_pool(x).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data = Tensor::<f64>::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let mut kd = Tensor::zeros(&[1, 1, 3, 3]);
        kd.data_mut()[4] = 1.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(data.clone());
        let k = tape.constant(kd);
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), &data);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_norm_eval_is_affine_and_repeatable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1, 2], &[1., 3., 5., 7.]));
        let g = tape.constant(t(&[2], &[2., 1.]));
        let b = tape.constant(t(&[2], &[0.5, 0.]));
        let y1 = tape.batch_norm_eval(x, g, b, &[1., 5.], &[4., 1.], 0.0).unwrap();
        let y2 = tape.batch_norm_eval(x, g, b, &[1., 5.], &[4., 1.], 0.0).unwrap();
        assert_eq!(tape.value(y1).data(), &[0.5, 2.5, 0., 2.]);
        assert_eq!(tape.value(y1), tape.value(y2));
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
        assert_eq!(OpKind::from_name("nope"), None);
    }

    use rand::SeedableRng;
}
