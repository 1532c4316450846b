use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise binary operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Batch statistics produced by a training-mode batch norm (biased mean, unbiased variance).
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
    },
    ScalarRhs {
        kind: Elementwise,
        a: Var,
        c: T,
    },
    RSub {
        a: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        la: MatLayout,
        lb: MatLayout,
        batch: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        f: usize,
    },
    Sigmoid {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat0 {
        parts: Vec<Var>,
    },
    Slice0 {
        x: Var,
        offset: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    MixRows {
        rows: Var,
        weights: Var,
        token: Var,
        width: usize,
    },
    Blend {
        mask: Var,
        fg: Var,
        bg: Var,
        channels: usize,
        plane: usize,
    },
    Shift {
        x: Var,
        shifts: Vec<(i64, i64)>,
        planes: usize,
        h: usize,
        w: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Bce {
        p: Var,
        target: Vec<T>,
    },
    ColorJitter {
        x: Var,
        saturation: Vec<T>,
        channels: usize,
        plane: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Differentiation tape.
///
/// Operations are recorded in creation order, which is a topological order by
/// construction. A node requires a gradient iff it is a trainable leaf or one of
/// its inputs requires one; nodes that do not are stored as constants and keep no
/// backward state.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    keyed_leaves: HashMap<u64, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            keyed_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf identified by an external key; repeated calls with the same key
    /// return the same node, so a parameter used twice accumulates one gradient.
    pub fn keyed_leaf(&mut self, key: u64, value: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.keyed_leaves.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), requires_grad, Op::Leaf);
        self.keyed_leaves.insert(key, v);
        v
    }

    pub fn keyed_grad(&self, key: u64) -> Option<&[T]> {
        self.keyed_leaves.get(&key).and_then(|&v| self.grad(v))
    }

    /// Copy of `v`'s value as a new constant (gradient flow stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.node(v).value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("elementwise", va.shape(), vb.shape()));
        }
        if kind == Elementwise::Div && vb.data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero("elementwise div"));
        }
        let f = binary_fn::<T>(kind);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Max)
    }

    /// `a <kind> c` for a scalar constant `c`.
    pub fn elementwise_scalar(&mut self, a: Var, c: T, kind: Elementwise) -> Result<Var> {
        if kind == Elementwise::Div && c.is_zero() {
            return Err(Error::DivisionByZero("elementwise div"));
        }
        let f = binary_fn::<T>(kind);
        let value = self.value(a).map(|x| f(x, c));
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::ScalarRhs { kind, a, c }))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.elementwise_scalar(a, c, Elementwise::Add).expect("infallible")
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.elementwise_scalar(a, c, Elementwise::Mul).expect("infallible")
    }

    pub fn min_scalar(&mut self, a: Var, c: T) -> Var {
        self.elementwise_scalar(a, c, Elementwise::Min).expect("infallible")
    }

    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        self.elementwise_scalar(a, c, Elementwise::Max).expect("infallible")
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() - x);
        let rg = self.rg(a);
        self.push(value, rg, Op::RSub { a })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Clamp into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, rg, Op::Clamp { x, lo, hi })
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product of `[m, k]` and `[k, n]`, or batched `[B, m, k]` x `[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposes of either operand's last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, ra, ca, rb, cb) = match (sa.as_slice(), sb.as_slice()) {
            ([ra, ca], [rb, cb]) => (1, *ra, *ca, *rb, *cb),
            ([ba, ra, ca], [bb, rb, cb]) if ba == bb => (*ba, *ra, *ca, *rb, *cb),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let la = MatLayout::new(ra, ca, ta);
        let lb = MatLayout::new(rb, cb, tb);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    T::one(),
                    &va[i * ra * ca..(i + 1) * ra * ca],
                    la,
                    &vb[i * rb * cb..(i + 1) * rb * cb],
                    lb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            rg,
            Op::Matmul {
                a,
                b,
                la,
                lb,
                batch,
            },
        ))
    }

    /// Adds `bias` (shape `[n]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap();
        if vb.numel() != n {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddBias { x, bias }))
    }

    /// Cross-correlation with zero padding. `x: [B, C, H, W]`, `w: [Cout, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (Ok([batch, c, h, wd]), Ok([cout, cin, kh, kw])) = (
            <[usize; 4]>::try_from(sx.as_slice()),
            <[usize; 4]>::try_from(sw.as_slice()),
        ) else {
            return Err(Error::shape("conv2d", &sx, &sw));
        };
        if c != cin {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            Error::invalid(
                "conv2d",
                format!("output size of {h}x{wd} with kernel {kh}x{kw}, stride {stride}, padding {padding} is not a positive integer"),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![batch, cout, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            },
        ))
    }

    // ---------------------------------------------------------------- spatial

    fn planes_hw(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::invalid(op, format!("needs at least 2 axes, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((s[..s.len() - 2].iter().product(), h, w))
    }

    /// Non-overlapping pooling over the last two axes. Only `stride == k` is supported.
    pub fn pool2d(&mut self, x: Var, k: usize, stride: usize, kind: PoolKind) -> Result<Var> {
        if k == 0 || stride != k {
            return Err(Error::invalid(
                "pool2d",
                format!("only non-overlapping windows are supported (k={k}, stride={stride})"),
            ));
        }
        let (planes, h, w) = self.planes_hw(x, "pool2d")?;
        if h % k != 0 || w % k != 0 {
            return Err(Error::invalid(
                "pool2d",
                format!("spatial size {h}x{w} not divisible by {k}"),
            ));
        }
        let mut shape = self.shape(x).to_vec();
        let nd = shape.len();
        shape[nd - 2] = h / k;
        shape[nd - 1] = w / k;
        let rg = self.rg(x);
        match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), planes, h, w, k);
                let value = Tensor::new(shape, out)?;
                Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
            }
            PoolKind::Avg => {
                let out = kernels::avgpool_forward(self.value(x).data(), planes, h, w, k);
                let value = Tensor::new(shape, out)?;
                Ok(self.push(
                    value,
                    rg,
                    Op::AvgPool {
                        x,
                        k,
                        planes,
                        h,
                        w,
                    },
                ))
            }
        }
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be positive"));
        }
        let (planes, h, w) = self.planes_hw(x, "upsample")?;
        let mut shape = self.shape(x).to_vec();
        let nd = shape.len();
        shape[nd - 2] = h * factor;
        shape[nd - 1] = w * factor;
        let out = kernels::upsample_nearest(self.value(x).data(), planes, h, w, factor);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::Upsample {
                x,
                planes,
                h,
                w,
                f: factor,
            },
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_nearest(x, 2)
    }

    /// Per-sample zero-fill translation: `out[b, .., y, x] = x[b, .., y + dy, x + dx]`.
    pub fn shift(&mut self, x: Var, shifts: &[(i64, i64)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || s[0] != shifts.len() {
            return Err(Error::invalid(
                "shift",
                format!("need one shift per sample of a [B, .., H, W] tensor, got {} for {s:?}", shifts.len()),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[1..s.len() - 2].iter().product();
        let per = planes * h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (b, &(dy, dx)) in shifts.iter().enumerate() {
            kernels::shift_planes(
                &src[b * per..(b + 1) * per],
                &mut out[b * per..(b + 1) * per],
                planes,
                h,
                w,
                dy,
                dx,
            );
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::Shift {
                x,
                shifts: shifts.to_vec(),
                planes,
                h,
                w,
            },
        ))
    }

    /// `mask * fg + (1 - mask) * bg` with a single-channel `[B, 1, H, W]` mask
    /// broadcast over the channels of `[B, C, H, W]` images.
    pub fn blend(&mut self, mask: Var, fg: Var, bg: Var) -> Result<Var> {
        let (sm, sf, sb) = (
            self.shape(mask).to_vec(),
            self.shape(fg).to_vec(),
            self.shape(bg).to_vec(),
        );
        if sf != sb {
            return Err(Error::shape("blend", &sf, &sb));
        }
        if sm.len() != 4 || sf.len() != 4 || sm[1] != 1 || sm[0] != sf[0] || sm[2..] != sf[2..] {
            return Err(Error::shape("blend mask", &sm, &sf));
        }
        let (channels, plane) = (sf[1], sf[2] * sf[3]);
        let (m, f, b) = (
            self.value(mask).data(),
            self.value(fg).data(),
            self.value(bg).data(),
        );
        let mut out = vec![T::zero(); f.len()];
        for s in 0..sf[0] {
            let ms = &m[s * plane..(s + 1) * plane];
            for c in 0..channels {
                let off = (s * channels + c) * plane;
                for (i, &mv) in ms.iter().enumerate() {
                    out[off + i] = mv * f[off + i] + (T::one() - mv) * b[off + i];
                }
            }
        }
        let value = Tensor::new(sf, out)?;
        let rg = self.rg(mask) || self.rg(fg) || self.rg(bg);
        Ok(self.push(
            value,
            rg,
            Op::Blend {
                mask,
                fg,
                bg,
                channels,
                plane,
            },
        ))
    }

    /// Per-sample colour transform of `[B, C, H, W]` images:
    /// saturation scaling around the per-pixel channel mean plus a brightness offset.
    pub fn color_jitter(&mut self, x: Var, brightness: &[T], saturation: &[T]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || brightness.len() != s[0] || saturation.len() != s[0] {
            return Err(Error::invalid(
                "color_jitter",
                format!("need one brightness and saturation per sample of {s:?}"),
            ));
        }
        let (channels, plane) = (s[1], s[2] * s[3]);
        let inv_c = T::one() / T::from_usize(channels).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..s[0] {
            let base = b * channels * plane;
            for p in 0..plane {
                let mean = (0..channels).map(|c| src[base + c * plane + p]).sum::<T>() * inv_c;
                for c in 0..channels {
                    let i = base + c * plane + p;
                    out[i] = mean + saturation[b] * (src[i] - mean) + brightness[b];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::ColorJitter {
                x,
                saturation: saturation.to_vec(),
                channels,
                plane,
            },
        ))
    }

    // ---------------------------------------------------------------- activations

    /// Logistic sigmoid. Outputs are kept strictly inside (0, 1) even where the
    /// exact value rounds to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
        let value = self.value(x).map(|v| sigmoid(v).max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, rg, Op::Sigmoid { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, rg, Op::LeakyRelu { x, slope })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(x);
        self.push(value, rg, Op::Gelu { x })
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
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
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::Softmax { x })
    }

    // ---------------------------------------------------------------- normalization

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, (row, hrow)) in vx.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in hrow.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization of `[B, C, H, W]` per channel.
    ///
    /// In training mode the batch statistics are used and returned so the caller
    /// can update its running estimates; in evaluation mode the supplied running
    /// statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        train: bool,
        eps: T,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("batch_norm2d", format!("expected [B, C, H, W], got {s:?}")));
        }
        let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).numel() != channels
            || self.value(beta).numel() != channels
            || running_mean.len() != channels
            || running_var.len() != channels
        {
            return Err(Error::shape("batch_norm2d", &s, self.shape(gamma)));
        }
        if train && batch < 2 {
            return Err(Error::invalid(
                "batch_norm2d",
                "training mode needs a batch of at least 2",
            ));
        }
        let src = self.value(x).data();
        let mut mean = running_mean.to_vec();
        let mut var = running_var.to_vec();
        let mut stats = None;
        if train {
            let count = T::from_usize(batch * plane).unwrap();
            let mut var_unbiased = vec![T::zero(); channels];
            for c in 0..channels {
                let mut sum = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * plane;
                    sum += src[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = sum / count;
                let mut sq = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * plane;
                    sq += src[off..off + plane]
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq / count;
                var_unbiased[c] = sq / (count - T::one());
            }
            stats = Some(BatchNormStats {
                mean: mean.clone(),
                var_unbiased,
            });
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    let h = (src[i] - mean[c]) * rstd[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + bt[c];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
                batch,
                channels,
                plane,
            },
        );
        Ok((v, stats))
    }

    // ---------------------------------------------------------------- reductions & layout

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let inner = *v.shape().last().unwrap();
        let data: Vec<T> = v.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let mut shape = v.shape()[..v.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data).unwrap();
        let rg = self.rg(x);
        self.push(value, rg, Op::SumLast { x, inner })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let data = kernels::permute(self.value(x).data(), &s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenate along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat0", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat0", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            rg,
            Op::Concat0 {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::invalid("slice0", format!("range {start}..{} out of {}", start + len, s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::Slice0 {
                x,
                offset: start * inner,
            },
        ))
    }

    /// Select rows of `x` viewed as `[R, width]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = s[0];
        let width: usize = s[1..].iter().product();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index set"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// Per-row convex combination `w[r] * token + (1 - w[r]) * rows[r]`
    /// for `rows: [R, d]`, `weights` with `R` elements and `token: [d]`.
    pub fn mix_rows(&mut self, rows: Var, weights: Var, token: Var) -> Result<Var> {
        let s = self.shape(rows).to_vec();
        let width: usize = s[1..].iter().product();
        if self.value(weights).numel() != s[0] {
            return Err(Error::shape("mix_rows weights", &s, self.shape(weights)));
        }
        if self.value(token).numel() != width {
            return Err(Error::shape("mix_rows token", &s, self.shape(token)));
        }
        let (r, w, t) = (
            self.value(rows).data(),
            self.value(weights).data(),
            self.value(token).data(),
        );
        let mut out = vec![T::zero(); r.len()];
        for (i, &wi) in w.iter().enumerate() {
            for j in 0..width {
                out[i * width + j] = wi * t[j] + (T::one() - wi) * r[i * width + j];
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(rows) || self.rg(weights) || self.rg(token);
        Ok(self.push(
            value,
            rg,
            Op::MixRows {
                rows,
                weights,
                token,
                width,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant targets.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(Error::shape("bce", vp.shape(), target.shape()));
        }
        let eps = T::from_f64_lossy(1e-7);
        let n = T::from_usize(vp.numel()).unwrap();
        let loss = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let pc = pv.max(eps).min(T::one() - eps);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .sum::<T>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`. Gradients accumulate into every
    /// node that requires one; call [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut flow: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        flow[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            self.propagate(i, &g, &mut flow);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn take_buf(&self, flow: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(flow[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn put_buf(&self, flow: &mut [Option<Vec<T>>], v: Var, buf: Vec<T>) {
        match &mut flow[v.0] {
            Some(existing) => existing.iter_mut().zip(buf).for_each(|(a, b)| *a += b),
            slot => *slot = Some(buf),
        }
    }

    fn propagate(&self, i: usize, g: &[T], flow: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulate `f(j)` into the incoming gradient of `v` for each index `j`.
        let acc = |flow: &mut [Option<Vec<T>>], v: Var, f: &dyn Fn(usize) -> T| {
            if !self.rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = flow[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            for (j, b) in buf.iter_mut().enumerate() {
                *b += f(j);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                match kind {
                    Elementwise::Add => {
                        acc(flow, *a, &|j| g[j]);
                        acc(flow, *b, &|j| g[j]);
                    }
                    Elementwise::Sub => {
                        acc(flow, *a, &|j| g[j]);
                        acc(flow, *b, &|j| -g[j]);
                    }
                    Elementwise::Mul => {
                        acc(flow, *a, &|j| g[j] * vb[j]);
                        acc(flow, *b, &|j| g[j] * va[j]);
                    }
                    Elementwise::Div => {
                        acc(flow, *a, &|j| g[j] / vb[j]);
                        acc(flow, *b, &|j| -g[j] * va[j] / (vb[j] * vb[j]));
                    }
                    Elementwise::Min => {
                        acc(flow, *a, &|j| if va[j] <= vb[j] { g[j] } else { T::zero() });
                        acc(flow, *b, &|j| if va[j] <= vb[j] { T::zero() } else { g[j] });
                    }
                    Elementwise::Max => {
                        acc(flow, *a, &|j| if va[j] >= vb[j] { g[j] } else { T::zero() });
                        acc(flow, *b, &|j| if va[j] >= vb[j] { T::zero() } else { g[j] });
                    }
                }
            }
            Op::ScalarRhs { kind, a, c } => {
                let va = self.value(*a).data();
                let c = *c;
                match kind {
                    Elementwise::Add | Elementwise::Sub => acc(flow, *a, &|j| g[j]),
                    Elementwise::Mul => acc(flow, *a, &|j| g[j] * c),
                    Elementwise::Div => acc(flow, *a, &|j| g[j] / c),
                    Elementwise::Min => {
                        acc(flow, *a, &|j| if va[j] <= c { g[j] } else { T::zero() })
                    }
                    Elementwise::Max => {
                        acc(flow, *a, &|j| if va[j] >= c { g[j] } else { T::zero() })
                    }
                }
            }
            Op::RSub { a } => acc(flow, *a, &|j| -g[j]),
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                acc(flow, *x, &|j| {
                    if vx[j] >= lo && vx[j] <= hi {
                        g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                la,
                lb,
                batch,
            } => {
                let (m, n) = (
                    if la.transposed { la.cols } else { la.rows },
                    if lb.transposed { lb.rows } else { lb.cols },
                );
                let (sa, sb) = (la.rows * la.cols, lb.rows * lb.cols);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(mut ga) = self.take_buf(flow, *a) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * sb..(i + 1) * sb];
                        let dst = &mut ga[i * sa..(i + 1) * sa];
                        if la.transposed {
                            kernels::gemm(T::one(), bi, *lb, gi, MatLayout::new(m, n, true), T::one(), dst);
                        } else {
                            let lbt = MatLayout::new(lb.rows, lb.cols, !lb.transposed);
                            kernels::gemm(T::one(), gi, MatLayout::new(m, n, false), bi, lbt, T::one(), dst);
                        }
                    }
                    self.put_buf(flow, *a, ga);
                }
                if let Some(mut gb) = self.take_buf(flow, *b) {
                    let gb_var = *b;
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * sa..(i + 1) * sa];
                        let dst = &mut gb[i * sb..(i + 1) * sb];
                        if lb.transposed {
                            kernels::gemm(T::one(), gi, MatLayout::new(m, n, true), ai, *la, T::one(), dst);
                        } else {
                            let lat = MatLayout::new(la.rows, la.cols, !la.transposed);
                            kernels::gemm(T::one(), ai, lat, gi, MatLayout::new(m, n, false), T::one(), dst);
                        }
                    }
                    self.put_buf(flow, gb_var, gb);
                }
            }
            Op::AddBias { x, bias } => {
                acc(flow, *x, &|j| g[j]);
                if let Some(mut gb) = self.take_buf(flow, *bias) {
                    let gb_var = *bias;
                    let n = gb.len();
                    for row in g.chunks(n) {
                        for (d, &v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.put_buf(flow, gb_var, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            } => {
                let mut gx = self.take_buf(flow, *x);
                let mut gw = self.take_buf(flow, *w);
                let mut gb = b.and_then(|b| self.take_buf(flow, b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    *batch,
                    self.value(*w).data(),
                    *cout,
                    geom,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.put_buf(flow, *x, gx);
                }
                if let Some(gw) = gw {
                    self.put_buf(flow, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.put_buf(flow, *b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::AvgPool {
                x,
                k,
                planes,
                h,
                w,
            } => {
                let inv = T::one() / T::from_usize(k * k).unwrap();
                let (oh, ow) = (h / k, w / k);
                let (h, w, k) = (*h, *w, *k);
                let _ = planes;
                acc(flow, *x, &|j| {
                    let p = j / (h * w);
                    let y = (j % (h * w)) / w;
                    let xx = j % w;
                    g[p * oh * ow + (y / k) * ow + xx / k] * inv
                });
            }
            Op::Upsample {
                x,
                planes,
                h,
                w,
                f,
            } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    let back = kernels::upsample_nearest_backward(g, *planes, *h, *w, *f);
                    gx.iter_mut().zip(back).for_each(|(d, v)| *d += v);
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::Sigmoid { x } => acc(flow, *x, &|j| g[j] * out[j] * (T::one() - out[j])),
            Op::LeakyRelu { x, slope } => {
                let vx = self.value(*x).data();
                let s = *slope;
                acc(flow, *x, &|j| if vx[j] > T::zero() { g[j] } else { g[j] * s });
            }
            Op::Gelu { x } => {
                let vx = self.value(*x).data();
                acc(flow, *x, &|j| g[j] * gelu(vx[j]).1);
            }
            Op::Softmax { x } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    let n = *node.value.shape().last().unwrap();
                    for ((yr, gr), dr) in out.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<T>();
                        for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gv - dot);
                        }
                    }
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    for (r, ((hr, gr), dr)) in xhat
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&gv, &gm)| gv * gm).collect();
                        let m1 = dh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dh.iter().zip(hr).map(|(&a, &h)| a * h).sum::<T>() * inv_d;
                        for ((dv, &a), &h) in dr.iter_mut().zip(&dh).zip(hr) {
                            *dv += rstd[r] * (a - m1 - h * m2);
                        }
                    }
                    self.put_buf(flow, gx_var, gx);
                }
                if let Some(mut gg) = self.take_buf(flow, *gamma) {
                    let gg_var = *gamma;
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for ((d, &h), &gv) in gg.iter_mut().zip(hr).zip(gr) {
                            *d += h * gv;
                        }
                    }
                    self.put_buf(flow, gg_var, gg);
                }
                if let Some(mut gb) = self.take_buf(flow, *beta) {
                    let gb_var = *beta;
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                    }
                    self.put_buf(flow, gb_var, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
                batch,
                channels,
                plane,
            } => {
                let gam = self.value(*gamma).data();
                let (batch, channels, plane) = (*batch, *channels, *plane);
                let count = T::from_usize(batch * plane).unwrap();
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gh = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for i in off..off + plane {
                            sum_g[c] += g[i];
                            sum_gh[c] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * plane;
                            let scale = gam[c] * rstd[c];
                            for i in off..off + plane {
                                gx[i] += if *train {
                                    scale * (g[i] - sum_g[c] / count - xhat[i] * sum_gh[c] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.put_buf(flow, gx_var, gx);
                }
                acc(flow, *gamma, &|c| sum_gh[c]);
                acc(flow, *beta, &|c| sum_g[c]);
            }
            Op::Sum { x } => acc(flow, *x, &|_| g[0]),
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(flow, *x, &|_| g[0] / n);
            }
            Op::SumLast { x, inner } => acc(flow, *x, &|j| g[j / inner]),
            Op::Reshape { x } => acc(flow, *x, &|j| g[j]),
            Op::Permute { x, perm } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    let back = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                    gx.iter_mut().zip(back).for_each(|(d, v)| *d += v);
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::Concat0 { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let o = off;
                    acc(flow, p, &|j| g[o + j]);
                    off += n;
                }
            }
            Op::Slice0 { x, offset } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    gx[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::GatherRows { x, idx, width } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*width {
                            gx[i * width + j] += g[r * width + j];
                        }
                    }
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::MixRows {
                rows,
                weights,
                token,
                width,
            } => {
                let (r, w, t) = (
                    self.value(*rows).data(),
                    self.value(*weights).data(),
                    self.value(*token).data(),
                );
                let width = *width;
                acc(flow, *rows, &|j| (T::one() - w[j / width]) * g[j]);
                acc(flow, *weights, &|i| {
                    (0..width)
                        .map(|j| g[i * width + j] * (t[j] - r[i * width + j]))
                        .sum::<T>()
                });
                acc(flow, *token, &|j| {
                    (0..w.len()).map(|i| w[i] * g[i * width + j]).sum::<T>()
                });
            }
            Op::Blend {
                mask,
                fg,
                bg,
                channels,
                plane,
            } => {
                let (m, f, b) = (
                    self.value(*mask).data(),
                    self.value(*fg).data(),
                    self.value(*bg).data(),
                );
                let (channels, plane) = (*channels, *plane);
                let mask_index = |j: usize| (j / (channels * plane)) * plane + j % plane;
                acc(flow, *fg, &|j| m[mask_index(j)] * g[j]);
                acc(flow, *bg, &|j| (T::one() - m[mask_index(j)]) * g[j]);
                acc(flow, *mask, &|i| {
                    let (s, p) = (i / plane, i % plane);
                    (0..channels)
                        .map(|c| {
                            let j = (s * channels + c) * plane + p;
                            g[j] * (f[j] - b[j])
                        })
                        .sum::<T>()
                });
            }
            Op::Shift {
                x,
                shifts,
                planes,
                h,
                w,
            } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    let per = planes * h * w;
                    let mut tmp = vec![T::zero(); per];
                    for (b, &(dy, dx)) in shifts.iter().enumerate() {
                        kernels::shift_planes(&g[b * per..(b + 1) * per], &mut tmp, *planes, *h, *w, -dy, -dx);
                        gx[b * per..(b + 1) * per]
                            .iter_mut()
                            .zip(&tmp)
                            .for_each(|(d, &v)| *d += v);
                    }
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::ColorJitter {
                x,
                saturation,
                channels,
                plane,
            } => {
                if let Some(mut gx) = self.take_buf(flow, *x) {
                    let gx_var = *x;
                    let (channels, plane) = (*channels, *plane);
                    let inv_c = T::one() / T::from_usize(channels).unwrap();
                    for (b, &s) in saturation.iter().enumerate() {
                        let base = b * channels * plane;
                        for p in 0..plane {
                            let gs = (0..channels).map(|c| g[base + c * plane + p]).sum::<T>();
                            for c in 0..channels {
                                let i = base + c * plane + p;
                                gx[i] += s * g[i] + (T::one() - s) * inv_c * gs;
                            }
                        }
                    }
                    self.put_buf(flow, gx_var, gx);
                }
            }
            Op::Bce { p, target } => {
                let vp = self.value(*p).data();
                let eps = T::from_f64_lossy(1e-7);
                let n = T::from_usize(vp.len()).unwrap();
                acc(flow, *p, &|j| {
                    let pc = vp[j].max(eps).min(T::one() - eps);
                    -g[0] * (target[j] / pc - (T::one() - target[j]) / (T::one() - pc)) / n
                });
            }
        }
    }
}

fn binary_fn<T: Scalar>(kind: Elementwise) -> fn(T, T) -> T {
    match kind {
        Elementwise::Add => |a, b| a + b,
        Elementwise::Sub => |a, b| a - b,
        Elementwise::Mul => |a, b| a * b,
        Elementwise::Div => |a, b| a / b,
        // Ties resolve to the first argument.
        Elementwise::Min => |a, b| if a <= b { a } else { b },
        Elementwise::Max => |a, b| if a >= b { a } else { b },
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Scalar>(v: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let value = half * v * (T::one() + t);
    let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
    (value, deriv)
}
