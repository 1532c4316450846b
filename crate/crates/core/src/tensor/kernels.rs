//! Forward and backward kernels behind the graph operations.
//!
//! All kernels work on flat row-major slices and are single threaded, so
//! results are bitwise reproducible for a given input.

use super::Scalar;

/// Row-major matrix view description: `rows x cols`, optionally transposed.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    pub fn new(rows: usize, cols: usize, transposed: bool) -> Self {
        Self {
            rows,
            cols,
            transposed,
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides (row, col) of the logical matrix inside the stored one.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `c` is a dense row-major `m x n`.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(a.len() >= la.rows * la.cols, "gemm lhs buffer");
    assert!(b.len() >= lb.rows * lb.cols, "gemm rhs buffer");
    assert!(c.len() >= m * n, "gemm output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: the asserts above bound every address the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution over one `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the output size is not a positive integer.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let out = |size: usize, k: usize| -> Option<usize> {
            let span = (size + 2 * padding).checked_sub(k)?;
            if stride == 0 || span % stride != 0 {
                return None;
            }
            Some(span / stride + 1)
        };
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: out(height, kh)?,
            out_w: out(width, kw)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one image into a `[C*kh*kw, out_h*out_w]` column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. `input` is `[B, C, H, W]`, `kernel` is `[Cout, C, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    kernel: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let kl = g.patch_len();
    let mut out = vec![T::zero(); batch * cout * ol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * ol]
    };
    for b in 0..batch {
        let img = &input[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * cout * ol..(b + 1) * cout * ol];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(ol).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            kernel,
            MatLayout::new(cout, kl, false),
            cols_ref,
            MatLayout::new(kl, ol, false),
            beta,
            dst,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output buffer is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    kernel: &[T],
    cout: usize,
    g: &ConvGeom,
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let kl = g.patch_len();
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kl * ol }];
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { kl * ol }];
    for b in 0..batch {
        let img = &input[b * in_len..(b + 1) * in_len];
        let dy = &grad_out[b * cout * ol..(b + 1) * cout * ol];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, chunk) in dy.chunks(ol).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            let cols_ref: &[T] = if pointwise {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                dy,
                MatLayout::new(cout, ol, false),
                cols_ref,
                MatLayout::new(kl, ol, true),
                T::one(),
                gk,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let dimg = &mut gi[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(
                    T::one(),
                    kernel,
                    MatLayout::new(cout, kl, true),
                    dy,
                    MatLayout::new(cout, ol, false),
                    T::one(),
                    dimg,
                );
            } else {
                gemm(
                    T::one(),
                    kernel,
                    MatLayout::new(cout, kl, true),
                    dy,
                    MatLayout::new(cout, ol, false),
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, g, dimg);
            }
        }
    }
}

/// Non-overlapping `k x k` max pooling over `[planes, H, W]`.
/// Returns the pooled values and, per output, the flat input index of the winner.
/// Ties go to the first element in row-major order.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                let mut best_v = input[best];
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if input[i] > best_v {
                            best_v = input[i];
                            best = i;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avgpool_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            let row = &input[p * h * w + y * w..p * h * w + (y + 1) * w];
            let orow = &mut out[p * oh * ow + (y / k) * ow..p * oh * ow + (y / k + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                orow[x / k] += v;
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor over `[planes, H, W]`.
pub fn upsample_nearest<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &input[p * h * w + (oy / f) * w..p * h * w + (oy / f + 1) * w];
            let dst = &mut out[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `f x f` block.
pub fn upsample_nearest_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &grad[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            let dst = &mut out[p * h * w + (oy / f) * w..p * h * w + (oy / f + 1) * w];
            for (ox, &g) in src.iter().enumerate() {
                dst[ox / f] += g;
            }
        }
    }
    out
}

/// Axis permutation of a row-major array: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(input: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = input.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Copy the innermost output axis as a strided run.
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut offset = 0usize;
    loop {
        for j in 0..inner {
            out.push(input[offset + j * inner_stride]);
        }
        // Advance the outer multi-index.
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Zero-fill translation of `[C, H, W]` planes: `out[y][x] = in[y + dy][x + dx]`.
pub fn shift_planes<T: Scalar>(
    input: &[T],
    out: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
    dy: i64,
    dx: i64,
) {
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            let sy = y as i64 + dy;
            let dst = &mut out[base + y * w..base + (y + 1) * w];
            if sy < 0 || sy >= h as i64 {
                dst.fill(T::zero());
                continue;
            }
            let src = &input[base + sy as usize * w..base + (sy as usize + 1) * w];
            for (x, d) in dst.iter_mut().enumerate() {
                let sx = x as i64 + dx;
                *d = if sx < 0 || sx >= w as i64 {
                    T::zero()
                } else {
                    src[sx as usize]
                };
            }
        }
    }
}
