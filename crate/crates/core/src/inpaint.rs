//! Differentiable background inpainting with a frozen autoencoder, and the
//! comparison between sparse-encoder inpainting and soft masking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, TinyMae};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// How the decoder output becomes the background.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintMode {
    /// Raw decoder output over the whole image.
    #[default]
    Full,
    /// Decoder output only inside masked patches, the input image elsewhere.
    Compose,
}

/// `m[j] * token + (1 - m[j]) * xi[j]` for every row `j` of `xi: [N, d]`.
pub fn soft_mask_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    xi: Var,
    m_hat: Var,
    msk_token: Var,
) -> Result<Var> {
    let rows = g.shape(xi)[0];
    if g.value(m_hat).numel() != rows {
        return Err(Error::shape("soft_mask_embeddings", g.shape(xi), g.shape(m_hat)));
    }
    g.mix_rows(xi, m_hat, msk_token)
}

/// Inpaint from precomputed full-grid embeddings `tokens: [B * N, d]`.
///
/// `images: [B, 3, H, W]` is only read in [`InpaintMode::Compose`];
/// `m_hat: [B, 1, H/p, W/p]`.
pub fn inpaint_from_tokens(
    g: &mut Graph,
    mae: &TinyMae,
    tokens: Var,
    images: Var,
    m_hat: Var,
    mode: InpaintMode,
) -> Result<Var> {
    let gs = mae.cfg.grid();
    let batch = g.shape(images)[0];
    let sm = g.shape(m_hat).to_vec();
    if sm != [batch, 1, gs, gs] {
        return Err(Error::shape("inpaint patch mask", &sm, &[batch, 1, gs, gs]));
    }
    let msk = mae.msk_token.bind(g, !mae.frozen);
    let mixed = soft_mask_embeddings(g, tokens, m_hat, msk)?;
    let decoded = mae.decode(g, mixed, batch, Mode::EVAL)?;
    match mode {
        InpaintMode::Full => Ok(decoded),
        InpaintMode::Compose => {
            let up = g.upsample_nearest(m_hat, mae.cfg.patch)?;
            g.blend(up, decoded, images)
        }
    }
}

/// Encode `images` with every token visible, soft-mask by `m_hat` and decode.
pub fn inpaint_background(
    g: &mut Graph,
    mae: &TinyMae,
    images: Var,
    m_hat: Var,
    mode: InpaintMode,
) -> Result<Var> {
    let enc = mae.encode(g, images, None, Mode::EVAL)?;
    inpaint_from_tokens(g, mae, enc.tokens, images, m_hat, mode)
}

fn visible_set(n: usize, masked: &[usize]) -> Result<Vec<usize>> {
    let mut keep = vec![true; n];
    for &i in masked {
        if i >= n {
            return Err(Error::invalid(
                "default_sparse_inpaint",
                format!("token index {i} out of range for {n} tokens"),
            ));
        }
        keep[i] = false;
    }
    let visible: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if visible.is_empty() {
        return Err(Error::invalid("default_sparse_inpaint", "every token is masked"));
    }
    Ok(visible)
}

fn batch_of(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [3, h, w] => image.clone().reshape([1, 3, *h, *w]),
        [_, 3, _, _] => Ok(image.clone()),
        s => Err(Error::invalid("inpaint", format!("expected an RGB image, got {s:?}"))),
    }
}

/// Standard masked-autoencoder inference: only visible tokens enter the
/// encoder and the MSK token fills every masked slot before decoding.
/// `image: [3, H, W]`; returns the `[3, H, W]` reconstruction.
pub fn default_sparse_inpaint(image: &Tensor, masked: &[usize], mae: &TinyMae) -> Result<Tensor> {
    let x = batch_of(image)?;
    let visible = vec![visible_set(mae.cfg.tokens(), masked)?];
    let mut g = Graph::new();
    let xv = g.constant(x);
    let enc = mae.encode(&mut g, xv, Some(&visible), Mode::EVAL)?;
    let full = mae.fill_masked(&mut g, &enc, &visible, Mode::EVAL)?;
    let y = mae.decode(&mut g, full, 1, Mode::EVAL)?;
    Ok(g.value(y).select0(0))
}

/// Soft-masking inference with a binary patch mask: all tokens are encoded
/// and masked slots are replaced by the MSK token before decoding.
pub fn modified_inpaint(image: &Tensor, masked: &[usize], mae: &TinyMae) -> Result<Tensor> {
    let x = batch_of(image)?;
    let n = mae.cfg.tokens();
    visible_set(n, masked)?;
    let gs = mae.cfg.grid();
    let mut m = vec![0.0f32; n];
    for &i in masked {
        m[i] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mv = g.constant(Tensor::new([1, 1, gs, gs], m)?);
    let y = inpaint_background(&mut g, mae, xv, mv, InpaintMode::Full)?;
    Ok(g.value(y).select0(0))
}

/// Mean ± standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Masked-region reconstruction errors of the two inference paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintReport {
    pub images: usize,
    pub mse_default: MeanStd,
    pub mse_modified: MeanStd,
    /// Error between the two reconstructions themselves.
    pub delta: MeanStd,
}

impl InpaintReport {
    /// `|modified - default| / default` of the mean errors.
    pub fn relative_gap(&self) -> f64 {
        (self.mse_modified.mean - self.mse_default.mean).abs() / self.mse_default.mean
    }

    /// Plain `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "images = {}\nmse_default_mean = {:.6}\nmse_default_std = {:.6}\nmse_modified_mean = {:.6}\nmse_modified_std = {:.6}\ndelta_mean = {:.6}\ndelta_std = {:.6}\n",
            self.images,
            self.mse_default.mean,
            self.mse_default.std,
            self.mse_modified.mean,
            self.mse_modified.std,
            self.delta.mean,
            self.delta.std
        )
    }
}

/// One image of the comparison, kept for rendering.
#[derive(Clone, Debug)]
pub struct InpaintCase {
    pub image: Tensor,
    pub masked: Vec<usize>,
    pub default: Tensor,
    pub modified: Tensor,
}

/// Mean squared error over the pixels of the masked patches.
pub fn masked_mse(a: &Tensor, b: &Tensor, masked: &[usize], patch: usize) -> Result<f64> {
    let [c, h, w] = <[usize; 3]>::try_from(a.shape())
        .map_err(|_| Error::invalid("masked_mse", format!("expected [C, H, W], got {:?}", a.shape())))?;
    if a.shape() != b.shape() {
        return Err(Error::shape("masked_mse", a.shape(), b.shape()));
    }
    if masked.is_empty() {
        return Err(Error::invalid("masked_mse", "no masked patches"));
    }
    let gw = w / patch;
    let mut sum = 0.0f64;
    for &j in masked {
        let (py, px) = (j / gw, j % gw);
        for ch in 0..c {
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    let i = (ch * h + y) * w + x;
                    sum += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                }
            }
        }
    }
    Ok(sum / (masked.len() * c * patch * patch) as f64)
}

/// For every image draw a masking ratio uniformly from `ratio_range`, mask
/// that many random tokens, and compare sparse-encoder inpainting against
/// soft masking on the masked region.
pub fn inpaint_compare(
    mae: &TinyMae,
    images: &[Tensor],
    ratio_range: (f64, f64),
    seed: u64,
) -> Result<(InpaintReport, Vec<InpaintCase>)> {
    if images.is_empty() {
        return Err(Error::invalid("inpaint_compare", "no images"));
    }
    let (lo, hi) = ratio_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::invalid(
            "inpaint_compare",
            format!("ratio range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"),
        ));
    }
    let n = mae.cfg.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut d, mut m, mut delta) = (Vec::new(), Vec::new(), Vec::new());
    let mut cases = Vec::new();
    for image in images {
        let ratio = rng.gen_range(lo..=hi);
        let count = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        let mut masked = sample(&mut rng, n, count).into_vec();
        masked.sort_unstable();
        let def = default_sparse_inpaint(image, &masked, mae)?;
        let modi = modified_inpaint(image, &masked, mae)?;
        d.push(masked_mse(&def, image, &masked, mae.cfg.patch)?);
        m.push(masked_mse(&modi, image, &masked, mae.cfg.patch)?);
        delta.push(masked_mse(&def, &modi, &masked, mae.cfg.patch)?);
        cases.push(InpaintCase {
            image: image.clone(),
            masked,
            default: def,
            modified: modi,
        });
    }
    let report = InpaintReport {
        images: images.len(),
        mse_default: MeanStd::of(&d),
        mse_modified: MeanStd::of(&m),
        delta: MeanStd::of(&delta),
    };
    Ok((report, cases))
}
