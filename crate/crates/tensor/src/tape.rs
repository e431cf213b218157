use std::sync::Arc;

use crate::conv::{self, Geom};
use crate::{Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Forward,
    Transpose,
}

enum Op<T: Element> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: Geom, kind: ConvKind },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor<T>>),
    Scale(Var, T),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Bilinear { x: Var, coords: Var },
    StraightThrough(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Vec<T> },
    BceLogits { logits: Var, targets: Arc<Tensor<T>> },
}

struct Node<T: Element> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Operations append nodes in execution order; [`Tape::backward`] replays
/// their adjoints in reverse. A tape is single-threaded; independent tapes
/// share nothing mutable and may live on different threads.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the leaves that were marked trainable.
#[derive(Debug)]
pub struct Grads<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Running statistics produced by a training-mode batch normalization.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::shape(op, format!("shape {a:?} does not match {b:?}")));
    }
    Ok(())
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Trainable leaves receive gradients from `backward`.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.push_arc(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- convolutions -------------------------------------------------

    /// 2D convolution of `(N,Cin,H,W)` with weight `(Cout,Cin,kh,kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 {
            return Err(TensorError::shape("conv2d", format!("input rank {} (want N,C,H,W)", xs.len())));
        }
        if ws.len() != 4 {
            return Err(TensorError::shape("conv2d", format!("weight rank {} (want Cout,Cin,kh,kw)", ws.len())));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels: input has {} but weight expects {}", xs[1], ws[1]),
            ));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(TensorError::shape("conv2d", format!("kernel size {}x{} must be odd", ws[2], ws[3])));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be at least 1".into()));
        }
        if xs[2] + 2 * padding < ws[2] {
            return Err(TensorError::shape(
                "conv2d",
                format!("height: padded height {} smaller than kernel {}", xs[2] + 2 * padding, ws[2]),
            ));
        }
        if xs[3] + 2 * padding < ws[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!("width: padded width {} smaller than kernel {}", xs[3] + 2 * padding, ws[3]),
            ));
        }
        let geom = Geom {
            c: xs[1],
            d: 1,
            h: xs[2],
            w: xs[3],
            kd: 1,
            kh: ws[2],
            kw: ws[3],
            stride,
            pd: 0,
            ph: padding,
            pw: padding,
            od: 1,
            oh: (xs[2] + 2 * padding - ws[2]) / stride + 1,
            ow: (xs[3] + 2 * padding - ws[3]) / stride + 1,
        };
        self.check_bias("conv2d", b, ws[0])?;
        let out_shape = vec![xs[0], ws[0], geom.oh, geom.ow];
        self.conv_generic(x, w, b, geom, ConvKind::Forward, ws[0], out_shape)
    }

    /// Transposed 2D convolution of `(N,Cin,H,W)` with weight `(Cin,Cout,kh,kw)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("ranks {} and {} (want 4 and 4)", xs.len(), ws.len()),
            ));
        }
        if ws[0] != xs[1] {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("input channels: input has {} but weight expects {}", xs[1], ws[0]),
            ));
        }
        if stride == 0 {
            return Err(TensorError::shape("conv_transpose2d", "stride must be at least 1".into()));
        }
        let full_h = (xs[2] - 1) * stride + ws[2];
        let full_w = (xs[3] - 1) * stride + ws[3];
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("height/width: padding {padding} removes the whole {full_h}x{full_w} output"),
            ));
        }
        let geom = Geom {
            c: ws[1],
            d: 1,
            h: full_h - 2 * padding,
            w: full_w - 2 * padding,
            kd: 1,
            kh: ws[2],
            kw: ws[3],
            stride,
            pd: 0,
            ph: padding,
            pw: padding,
            od: 1,
            oh: xs[2],
            ow: xs[3],
        };
        self.check_bias("conv_transpose2d", b, ws[1])?;
        let out_shape = vec![xs[0], ws[1], geom.h, geom.w];
        self.conv_generic(x, w, b, geom, ConvKind::Transpose, xs[1], out_shape)
    }

    /// Stride-1 3D convolution of `(N,Cin,D,H,W)` with weight `(Cout,Cin,kd,kh,kw)`,
    /// zero padding of half the kernel on every axis (output size = input size).
    pub fn conv3d_same(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(TensorError::shape("conv3d", format!("ranks {} and {} (want 5 and 5)", xs.len(), ws.len())));
        }
        if ws[1] != xs[1] {
            return Err(TensorError::shape(
                "conv3d",
                format!("input channels: input has {} but weight expects {}", xs[1], ws[1]),
            ));
        }
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(TensorError::shape("conv3d", format!("kernel {:?} must be odd", &ws[2..])));
        }
        let geom = Geom {
            c: xs[1],
            d: xs[2],
            h: xs[3],
            w: xs[4],
            kd: ws[2],
            kh: ws[3],
            kw: ws[4],
            stride: 1,
            pd: ws[2] / 2,
            ph: ws[3] / 2,
            pw: ws[4] / 2,
            od: xs[2],
            oh: xs[3],
            ow: xs[4],
        };
        self.check_bias("conv3d", b, ws[0])?;
        let out_shape = vec![xs[0], ws[0], xs[2], xs[3], xs[4]];
        self.conv_generic(x, w, b, geom, ConvKind::Forward, ws[0], out_shape)
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<(), TensorError> {
        if let Some(b) = b {
            if self.value(b).len() != channels {
                return Err(TensorError::shape(
                    op,
                    format!("bias: {} entries for {channels} output channels", self.value(b).len()),
                ));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_generic(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        kind: ConvKind,
        channels: usize,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b).data());
        let n = out_shape[0];
        let per_out: usize = out_shape[1..].iter().product();
        let per_in = xv.len() / n;
        let mut out = vec![T::ZERO; n * per_out];
        for s in 0..n {
            let xs = &xv.data()[s * per_in..(s + 1) * per_in];
            let os = &mut out[s * per_out..(s + 1) * per_out];
            match kind {
                ConvKind::Forward => conv::conv_forward(&geom, channels, xs, wv.data(), bv, os),
                ConvKind::Transpose => conv::conv_transpose_forward(&geom, channels, xs, wv.data(), bv, os),
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(out_shape, out), rg, Op::Conv { x, w, b, geom, kind }))
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise product with a fixed (non-trainable) tensor, e.g. a mask.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor<T>>) -> Result<Var, TensorError> {
        same_shape("mul_const", self.shape(a), c.shape())?;
        let av = self.value(a);
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::MulConst(a, c)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, rg, op)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, T::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::ZERO { x } else { T::ZERO }, Op::Relu(a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_f64(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Mean absolute value: the per-element normalized L1 norm.
    pub fn l1_mean(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.mean(abs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    // ---- channel-axis structure ---------------------------------------

    /// Concatenates along axis 1. All other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "nothing to concatenate".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(TensorError::shape("concat", format!("rank {} has no channel axis", s0.len())));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {s0:?} outside the channel axis"),
                ));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(s));
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::shape(
                "slice_channels",
                format!("channels {start}..{} out of range for shape {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let v = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let smp = v.sample(n);
            data.extend_from_slice(&smp[start * inner..(start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Slice { x, start, len }))
    }

    // ---- sampling -----------------------------------------------------

    /// Bilinear sampling of `(N,C,H,W)` at absolute positions `(N,Ho,Wo,2)`
    /// holding `(x, y)` pairs. Positions outside the image clamp to the border.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var, TensorError> {
        let (xs, cs) = (self.shape(x).to_vec(), self.shape(coords).to_vec());
        if xs.len() != 4 {
            return Err(TensorError::shape("bilinear_sample", format!("input rank {} (want N,C,H,W)", xs.len())));
        }
        if cs.len() != 4 || cs[3] != 2 || cs[0] != xs[0] {
            return Err(TensorError::shape(
                "bilinear_sample",
                format!("coords shape {cs:?} (want [{}, Ho, Wo, 2])", xs[0]),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (cs[1], cs[2]);
        let xv = self.value(x).data();
        let cv = self.value(coords).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for s in 0..n {
            for p in 0..oh * ow {
                let t = BilinearTap::new(cv[(s * oh * ow + p) * 2], cv[(s * oh * ow + p) * 2 + 1], h, w);
                for ch in 0..c {
                    let plane = &xv[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    out[(s * c + ch) * oh * ow + p] = t.blend(plane);
                }
            }
        }
        let rg = self.rg(x) || self.rg(coords);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), rg, Op::Bilinear { x, coords }))
    }

    // ---- estimators and normalization ---------------------------------

    /// Records `value` as the output while routing gradients to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var, TensorError> {
        same_shape("straight_through", self.shape(x), value.shape())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::StraightThrough(x)))
    }

    /// Batch normalization over every axis but the channel axis, using the
    /// batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::shape("batch_norm", format!("rank {} has no channel axis", s.len())));
        }
        let c = s[1];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::shape(
                "batch_norm",
                format!("channels: affine parameters do not have {c} entries"),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let m = s[0] * inner;
        let xv = self.value(x).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for ch in 0..c {
            let mut acc = T::ZERO;
            for n in 0..s[0] {
                acc += xv[(n * c + ch) * inner..(n * c + ch + 1) * inner].iter().copied().sum::<T>();
            }
            mean[ch] = acc / T::from_f64(m as f64);
            let mut acc = T::ZERO;
            for n in 0..s[0] {
                for &v in &xv[(n * c + ch) * inner..(n * c + ch + 1) * inner] {
                    let d = v - mean[ch];
                    acc += d * d;
                }
            }
            var[ch] = acc / T::from_f64(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut out = vec![T::ZERO; xv.len()];
        for n in 0..s[0] {
            for ch in 0..c {
                let base = (n * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Tensor::from_parts(s, out), rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((v, BatchStats { mean, var }))
    }

    /// Fixed per-channel affine map `y = x * scale[c] + shift[c]`, used for
    /// inference-mode batch normalization.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || scale.len() != s[1] || shift.len() != s[1] {
            return Err(TensorError::shape("channel_affine", format!("channels: parameters do not match shape {s:?}")));
        }
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for (i, (o, &v)) in out.iter_mut().zip(xv).enumerate() {
            let ch = (i / inner) % c;
            *o = v * scale[ch] + shift[ch];
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(s, out), rg, Op::ChannelAffine { x, scale }))
    }

    /// Mean binary cross-entropy (in nats) between `sigmoid(logits)` and targets in {0,1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor<T>>) -> Result<Var, TensorError> {
        same_shape("bce_with_logits", self.shape(logits), targets.shape())?;
        let z = self.value(logits).data();
        let mut acc = T::ZERO;
        for (&zi, &ti) in z.iter().zip(targets.data()) {
            acc += zi.max(T::ZERO) - zi * ti + (T::ONE + (-zi.abs()).exp()).ln();
        }
        let loss = acc / T::from_f64(z.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::BceLogits { logits, targets }))
    }

    // ---- reverse pass -------------------------------------------------

    /// Replays adjoints from a scalar `loss`. Gradients of a value used more
    /// than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, TensorError> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                leaves[i] = Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut pending);
        }
        Ok(Grads { grads: leaves })
    }

    fn accumulate(&self, pending: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut pending[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, pending: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = pending[v.0].get_or_insert_with(|| vec![T::ZERO; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, kind } => self.conv_backward(*x, *w, *b, geom, *kind, g, pending),
            Op::Add(a, b) => {
                self.accumulate(pending, *a, g.to_vec());
                self.accumulate(pending, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(pending, *a, g.to_vec());
                self.accumulate(pending, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(pending, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                self.accumulate(pending, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::MulConst(a, c) => {
                self.accumulate(pending, *a, g.iter().zip(c.data()).map(|(&d, &y)| d * y).collect());
            }
            Op::Scale(a, s) => self.accumulate(pending, *a, g.iter().map(|&d| d * *s).collect()),
            Op::Shift(a) | Op::Reshape(a) | Op::StraightThrough(a) => self.accumulate(pending, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(pending, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (T::ONE - s)).collect());
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.accumulate(pending, *a, g.iter().zip(y).map(|(&d, &t)| d * (T::ONE - t * t)).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    pending,
                    *a,
                    g.iter().zip(x).map(|(&d, &v)| if v > T::ZERO { d } else { T::ZERO }).collect(),
                );
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let sign = |v: T| {
                    if v > T::ZERO {
                        T::ONE
                    } else if v < T::ZERO {
                        -T::ONE
                    } else {
                        T::ZERO
                    }
                };
                self.accumulate(pending, *a, g.iter().zip(x).map(|(&d, &v)| d * sign(v)).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(pending, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(pending, *a, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Concat(parts) => {
                let n = out.shape()[0];
                let per_out = out.len() / n;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).len() / n;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(per * n);
                        for s in 0..n {
                            gp.extend_from_slice(&g[s * per_out + offset..s * per_out + offset + per]);
                        }
                        self.accumulate(pending, p, gp);
                    }
                    offset += per;
                }
            }
            Op::Slice { x, start, len } => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[2..].iter().product();
                let (c, n) = (xs[1], xs[0]);
                let (start, len) = (*start, *len);
                self.accumulate_with(pending, *x, |dx| {
                    for s in 0..n {
                        let dst = &mut dx[(s * c + start) * inner..(s * c + start + len) * inner];
                        let src = &g[s * len * inner..(s + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Bilinear { x, coords } => self.bilinear_backward(*x, *coords, g, pending),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x).to_vec();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let m = T::from_f64((s[0] * inner) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut sum_dxhat = vec![T::ZERO; c];
                let mut sum_dxhat_xhat = vec![T::ZERO; c];
                for n in 0..s[0] {
                    for ch in 0..c {
                        let base = (n * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                            let dxh = g[k] * gam[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; g.len()];
                    for n in 0..s[0] {
                        for ch in 0..c {
                            let base = (n * c + ch) * inner;
                            for k in base..base + inner {
                                let dxh = g[k] * gam[ch];
                                dx[k] = inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xhat[k] * sum_dxhat_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(pending, *x, dx);
                }
                self.accumulate(pending, *gamma, dgamma);
                self.accumulate(pending, *beta, dbeta);
            }
            Op::ChannelAffine { x, scale } => {
                let s = self.shape(*x);
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let dx = g.iter().enumerate().map(|(k, &d)| d * scale[(k / inner) % c]).collect();
                self.accumulate(pending, *x, dx);
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::from_f64(z.len() as f64);
                let dz = z.iter().zip(targets.data()).map(|(&zi, &ti)| (zi.sigmoid() - ti) * scale).collect();
                self.accumulate(pending, *logits, dz);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &Geom,
        kind: ConvKind,
        g: &[T],
        pending: &mut [Option<Vec<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.shape()[0];
        let per_in = xv.len() / n;
        let per_out = g.len() / n;
        // Output channels for a forward conv, input channels for a transposed one.
        let channels = wv.shape()[0];
        let mut dx = self.rg(x).then(|| vec![T::ZERO; xv.len()]);
        let mut dw = self.rg(w).then(|| vec![T::ZERO; wv.len()]);
        let mut db = b.filter(|&b| self.rg(b)).map(|b| vec![T::ZERO; self.value(b).len()]);
        for s in 0..n {
            let xs = &xv.data()[s * per_in..(s + 1) * per_in];
            let gs = &g[s * per_out..(s + 1) * per_out];
            let dxs = dx.as_mut().map(|d| &mut d[s * per_in..(s + 1) * per_in]);
            match kind {
                ConvKind::Forward => {
                    conv::conv_backward(geom, channels, xs, wv.data(), gs, dxs, dw.as_deref_mut(), db.as_deref_mut())
                }
                ConvKind::Transpose => conv::conv_transpose_backward(
                    geom,
                    channels,
                    xs,
                    wv.data(),
                    gs,
                    dxs,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                ),
            }
        }
        if let Some(dx) = dx {
            self.accumulate(pending, x, dx);
        }
        if let Some(dw) = dw {
            self.accumulate(pending, w, dw);
        }
        if let (Some(b), Some(db)) = (b, db) {
            self.accumulate(pending, b, db);
        }
    }

    fn bilinear_backward(&self, x: Var, coords: Var, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (cs[1], cs[2]);
        let xv = self.value(x).data();
        let cv = self.value(coords).data();
        let mut dx = self.rg(x).then(|| vec![T::ZERO; xv.len()]);
        let mut dc = self.rg(coords).then(|| vec![T::ZERO; cv.len()]);
        for s in 0..n {
            for p in 0..oh * ow {
                let ci = (s * oh * ow + p) * 2;
                let t = BilinearTap::new(cv[ci], cv[ci + 1], h, w);
                for ch in 0..c {
                    let d = g[(s * c + ch) * oh * ow + p];
                    let base = (s * c + ch) * h * w;
                    if let Some(dx) = dx.as_mut() {
                        t.scatter(&mut dx[base..base + h * w], d);
                    }
                    if let Some(dc) = dc.as_mut() {
                        let (gx, gy) = t.position_grad(&xv[base..base + h * w]);
                        dc[ci] += d * gx;
                        dc[ci + 1] += d * gy;
                    }
                }
            }
        }
        if let Some(dx) = dx {
            self.accumulate(pending, x, dx);
        }
        if let Some(dc) = dc {
            self.accumulate(pending, coords, dc);
        }
    }
}

/// The four taps and weights of one bilinear sample with clamp-to-edge.
struct BilinearTap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    w: usize,
    free_x: bool,
    free_y: bool,
}

impl<T: Element> BilinearTap<T> {
    fn new(sx: T, sy: T, h: usize, w: usize) -> Self {
        let (cx, free_x) = clamp_pos(sx, w);
        let (cy, free_y) = clamp_pos(sy, h);
        let fx = cx.floor();
        let fy = cy.floor();
        let x0 = fx.to_f64() as usize;
        let y0 = fy.to_f64() as usize;
        Self { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), wx: cx - fx, wy: cy - fy, w, free_x, free_y }
    }

    #[inline]
    fn blend(&self, plane: &[T]) -> T {
        let w = self.w;
        let top = plane[self.y0 * w + self.x0] * (T::ONE - self.wx) + plane[self.y0 * w + self.x1] * self.wx;
        let bot = plane[self.y1 * w + self.x0] * (T::ONE - self.wx) + plane[self.y1 * w + self.x1] * self.wx;
        top * (T::ONE - self.wy) + bot * self.wy
    }

    fn scatter(&self, plane: &mut [T], d: T) {
        let w = self.w;
        let (ax, ay) = (T::ONE - self.wx, T::ONE - self.wy);
        plane[self.y0 * w + self.x0] += d * ax * ay;
        plane[self.y0 * w + self.x1] += d * self.wx * ay;
        plane[self.y1 * w + self.x0] += d * ax * self.wy;
        plane[self.y1 * w + self.x1] += d * self.wx * self.wy;
    }

    fn position_grad(&self, plane: &[T]) -> (T, T) {
        let w = self.w;
        let (v00, v01) = (plane[self.y0 * w + self.x0], plane[self.y0 * w + self.x1]);
        let (v10, v11) = (plane[self.y1 * w + self.x0], plane[self.y1 * w + self.x1]);
        let gx = if self.free_x && self.x1 != self.x0 {
            (v01 - v00) * (T::ONE - self.wy) + (v11 - v10) * self.wy
        } else {
            T::ZERO
        };
        let gy = if self.free_y && self.y1 != self.y0 {
            (v10 - v00) * (T::ONE - self.wx) + (v11 - v01) * self.wx
        } else {
            T::ZERO
        };
        (gx, gy)
    }
}

/// Clamps a sample position into `[0, size-1]`; the flag is false when clamping changed it.
fn clamp_pos<T: Element>(v: T, size: usize) -> (T, bool) {
    let hi = T::from_f64((size - 1) as f64);
    if v < T::ZERO {
        (T::ZERO, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}
