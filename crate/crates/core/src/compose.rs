//! Shifts, mask algebra and the construction of the real and fake images the
//! discriminator sees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inpaint::{inpaint_from_tokens, InpaintMode};
use crate::nn::{Mode, Segmenter, SegmenterOutput, TinyMae};
use crate::tensor::{kernels, Graph, PoolKind, Scalar, Tensor, Var};

/// Integer pixel translation; `y_delta[p] = y[p + delta]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shift {
    pub dy: i64,
    pub dx: i64,
}

impl Shift {
    pub fn new(dy: i64, dx: i64) -> Self {
        Self { dy, dx }
    }

    pub fn neg(self) -> Self {
        Self::new(-self.dy, -self.dx)
    }
}

/// Largest shift component for range `delta` on an axis of `size` pixels.
pub fn max_shift(delta: f64, size: usize) -> i64 {
    (delta.max(0.0) * size as f64).floor() as i64
}

/// Shift with both components uniform over `[-floor(delta * size), floor(delta * size)]`.
pub fn sample_shift(delta: f64, h: usize, w: usize, rng: &mut impl Rng) -> Shift {
    let (my, mx) = (max_shift(delta, h), max_shift(delta, w));
    Shift::new(rng.gen_range(-my..=my), rng.gen_range(-mx..=mx))
}

fn pairs(shifts: &[Shift]) -> Vec<(i64, i64)> {
    shifts.iter().map(|s| (s.dy, s.dx)).collect()
}

/// Per-sample zero-fill translation of `[B, .., H, W]`.
pub fn shift_map<T: Scalar>(g: &mut Graph<T>, y: Var, shifts: &[Shift]) -> Result<Var> {
    g.shift(y, &pairs(shifts))
}

/// Zero-fill translation of one tensor whose last two axes are spatial.
pub fn shift_tensor<T: Scalar>(y: &Tensor<T>, shift: Shift) -> Tensor<T> {
    let s = y.shape();
    let (h, w) = if s.len() >= 2 {
        (s[s.len() - 2], s[s.len() - 1])
    } else {
        (1, s[0])
    };
    let planes = y.numel() / (h * w);
    let mut out = vec![T::zero(); y.numel()];
    kernels::shift_planes(y.data(), &mut out, planes, h, w, shift.dy, shift.dx);
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// `1 - (1 - m) * (1 - m_delta)`, evaluated as `m + m_delta * (1 - m)` and
/// bounded below by `m_delta`, so the result is never under either input
/// after rounding.
pub fn union_mask<T: Scalar>(g: &mut Graph<T>, m: Var, m_delta: Var) -> Result<Var> {
    if g.shape(m) != g.shape(m_delta) {
        return Err(Error::shape("union_mask", g.shape(m), g.shape(m_delta)));
    }
    let rest = g.one_minus(m);
    let extra = g.mul(m_delta, rest)?;
    let u = g.add(m, extra)?;
    g.maximum(u, m_delta)
}

/// Non-overlapping `patch x patch` pooling of `[B, 1, H, W]` masks.
pub fn downsample_mask<T: Scalar>(g: &mut Graph<T>, u: Var, patch: usize, kind: PoolKind) -> Result<Var> {
    g.pool2d(u, patch, patch, kind)
}

/// Shifted composite `m_delta * shift(x_check) + (1 - m_delta) * b_hat`.
/// Returns the composite and `m_delta`.
pub fn compose_shifted<T: Scalar>(
    g: &mut Graph<T>,
    x_check: Var,
    m: Var,
    shifts: &[Shift],
    b_hat: Var,
) -> Result<(Var, Var)> {
    let m_delta = shift_map(g, m, shifts)?;
    let fg = shift_map(g, x_check, shifts)?;
    Ok((g.blend(m_delta, fg, b_hat)?, m_delta))
}

/// Copy-paste fake `m_delta * shift(x_check) + (1 - m_delta) * x_check`.
pub fn compose_copy_paste<T: Scalar>(
    g: &mut Graph<T>,
    x_check: Var,
    m: Var,
    shifts: &[Shift],
) -> Result<Var> {
    let m_delta = shift_map(g, m, shifts)?;
    let fg = shift_map(g, x_check, shifts)?;
    g.blend(m_delta, fg, x_check)
}

/// How the shifted foreground source is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftOrder {
    /// Shift the autoencoded image.
    #[default]
    ShiftAfterAutoencode,
    /// Autoencode the shifted input image.
    AutoencodeAfterShift,
}

/// Options for building one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposeOptions {
    pub delta: f64,
    pub inpaint: InpaintMode,
    pub shift_order: ShiftOrder,
    /// Max-pool the union of the mask and its shift (otherwise the mask alone).
    pub union: bool,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            delta: 0.125,
            inpaint: InpaintMode::Full,
            shift_order: ShiftOrder::ShiftAfterAutoencode,
            union: true,
        }
    }
}

/// Frozen-autoencoder quantities of a batch, computed once per image.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    /// Input images `[B, 3, H, W]`.
    pub images: Tensor,
    /// Autoencoded images `[B, 3, H, W]`.
    pub autoencoded: Tensor,
    /// Encoder embeddings `[B * N, d]`.
    pub tokens: Tensor,
    /// Segmenter input features `[B, d, H/p, W/p]`.
    pub features: Tensor,
}

/// Every image of one training step. Only `x_hat_delta` depends on the
/// segmenter's parameters; the other images are built from detached copies.
#[derive(Clone, Debug)]
pub struct CompositeSet {
    pub x_check: Var,
    pub x_check_delta: Var,
    pub b_hat: Var,
    pub x_hat_delta: Var,
    pub x_hat_zero: Var,
    pub x_tilde_delta: Var,
    pub m: Var,
    pub m_delta: Var,
    pub m_hat: Var,
    pub shifts: Vec<Shift>,
}

/// Segment a batch, sample shifts, inpaint and compose all discriminator inputs.
///
/// In [`InpaintMode::Compose`] the raw images stand in for their
/// autoencodings, since that inpainter only reconstructs masked patches.
pub fn build_training_batch(
    g: &mut Graph,
    inputs: &BatchInputs,
    segmenter: &Segmenter,
    mae: &TinyMae,
    opts: &ComposeOptions,
    seg_mode: Mode,
    rng: &mut impl Rng,
) -> Result<(CompositeSet, SegmenterOutput)> {
    let s = inputs.images.shape().to_vec();
    let (batch, h, w) = (s[0], s[2], s[3]);
    let shifts: Vec<Shift> = (0..batch).map(|_| sample_shift(opts.delta, h, w, rng)).collect();
    build_with_shifts(g, inputs, segmenter, mae, opts, seg_mode, shifts)
}

/// [`build_training_batch`] with given shifts.
pub fn build_with_shifts(
    g: &mut Graph,
    inputs: &BatchInputs,
    segmenter: &Segmenter,
    mae: &TinyMae,
    opts: &ComposeOptions,
    seg_mode: Mode,
    shifts: Vec<Shift>,
) -> Result<(CompositeSet, SegmenterOutput)> {
    let images = g.constant(inputs.images.clone());
    let x_check = match opts.inpaint {
        InpaintMode::Full => g.constant(inputs.autoencoded.clone()),
        InpaintMode::Compose => images,
    };
    let features = g.constant(inputs.features.clone());
    let tokens = g.constant(inputs.tokens.clone());

    let seg = segmenter.forward(g, features, seg_mode)?;
    let m = seg.mask;
    let m_delta = shift_map(g, m, &shifts)?;
    let pooled_src = if opts.union {
        union_mask(g, m, m_delta)?
    } else {
        m
    };
    let m_hat = downsample_mask(g, pooled_src, mae.cfg.patch, PoolKind::Max)?;
    let b_hat = inpaint_from_tokens(g, mae, tokens, images, m_hat, opts.inpaint)?;

    let x_check_delta = match (opts.shift_order, opts.inpaint) {
        (ShiftOrder::AutoencodeAfterShift, InpaintMode::Full) => {
            let shifted = shift_map(g, images, &shifts)?;
            let ae = mae.autoencode(g, shifted, Mode::EVAL)?;
            g.detach(ae)
        }
        _ => shift_map(g, x_check, &shifts)?,
    };
    let x_hat_delta = g.blend(m_delta, x_check_delta, b_hat)?;

    let m_det = g.detach(m);
    let m_delta_det = g.detach(m_delta);
    let b_det = g.detach(b_hat);
    let x_hat_zero = g.blend(m_det, x_check, b_det)?;
    let x_tilde_delta = g.blend(m_delta_det, x_check_delta, x_check)?;

    Ok((
        CompositeSet {
            x_check,
            x_check_delta,
            b_hat,
            x_hat_delta,
            x_hat_zero,
            x_tilde_delta,
            m,
            m_delta,
            m_hat,
            shifts,
        },
        seg,
    ))
}
