//! Mask regularizers, hinge adversarial losses, the binarization ramp and the
//! masked reconstruction loss used to pretrain the autoencoder.
//!
//! Everything here is generic over the tape's scalar type so the losses can be
//! gradient-checked in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, PoolKind, Scalar, Var};

/// Mask-loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub theta_min: f64,
    pub lambda_min: f64,
    pub lambda_bin_max: f64,
    pub ramp_iters: u64,
    /// Also apply the mask losses to the max-pooled patch mask.
    pub pooled_max: bool,
    /// Also apply the mask losses to the average-pooled mask.
    pub pooled_avg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            theta_min: 0.05,
            lambda_min: 100.0,
            lambda_bin_max: 12.5,
            ramp_iters: 2500,
            pooled_max: true,
            pooled_avg: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min > 0.0 && self.theta_min < 1.0) {
            return Err(Error::Config(format!(
                "theta_min must lie in (0, 1), got {}",
                self.theta_min
            )));
        }
        if self.lambda_min < 0.0 || self.lambda_bin_max < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.ramp_iters == 0 {
            return Err(Error::Config("ramp_iters must be at least 1".into()));
        }
        Ok(())
    }
}

fn per_image<T: Scalar>(g: &mut Graph<T>, m: Var) -> Result<(Var, usize)> {
    let s = g.shape(m).to_vec();
    if s.len() < 2 {
        return Err(Error::invalid("mask loss", format!("expected a batch of masks, got {s:?}")));
    }
    let inner: usize = s[1..].iter().product();
    Ok((g.reshape(m, &[s[0], inner])?, inner))
}

/// Mean over the batch of `max(theta - coverage, 0)`, coverage being the mean
/// mask value of each image.
pub fn loss_min<T: Scalar>(g: &mut Graph<T>, m: Var, theta: f64) -> Result<Var> {
    let (flat, inner) = per_image(g, m)?;
    let sums = g.sum_last(flat);
    let coverage = g.mul_scalar(sums, T::one() / T::from_usize(inner).unwrap());
    let deficit = g.neg(coverage);
    let deficit = g.add_scalar(deficit, T::from_f64_lossy(theta));
    let hinge = g.max_scalar(deficit, T::zero());
    Ok(g.mean(hinge))
}

/// Mean of `min(m, 1 - m)` over all pixels of all images.
pub fn loss_bin<T: Scalar>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    per_image(g, m)?;
    let inv = g.one_minus(m);
    let lo = g.minimum(m, inv)?;
    Ok(g.mean(lo))
}

/// Which mask the max-pooled mask losses see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PooledSource {
    /// The union-shifted patch mask fed to the inpainter.
    #[default]
    Union,
    /// Max-pool of the unshifted mask.
    Mask,
}

/// Mask losses evaluated on downsampled masks, split so each part can take
/// its own weight.
#[derive(Clone, Copy, Debug)]
pub struct PooledLosses {
    pub min: Option<Var>,
    pub bin: Option<Var>,
}

/// `L_min + L_bin` on the max-pooled mask `max_pooled` (already at patch
/// resolution) and on the `patch`-average-pooled full-resolution mask `m`.
pub fn pooled_mask_losses<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    max_pooled: Option<Var>,
    patch: usize,
    theta: f64,
    avg: bool,
) -> Result<PooledLosses> {
    let mut sources = Vec::new();
    if let Some(mp) = max_pooled {
        sources.push(mp);
    }
    if avg {
        sources.push(g.pool2d(m, patch, patch, PoolKind::Avg)?);
    }
    let (mut min, mut bin) = (None, None);
    for s in sources {
        let lm = loss_min(g, s, theta)?;
        let lb = loss_bin(g, s)?;
        min = Some(match min {
            Some(acc) => g.add(acc, lm)?,
            None => lm,
        });
        bin = Some(match bin {
            Some(acc) => g.add(acc, lb)?,
            None => lb,
        });
    }
    Ok(PooledLosses { min, bin })
}

fn concat_logits<T: Scalar>(g: &mut Graph<T>, parts: &[Var], what: &str) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::invalid("adversarial loss", format!("no {what} logits")));
    }
    let flat: Vec<Var> = parts
        .iter()
        .map(|&p| {
            let n = g.value(p).numel();
            g.reshape(p, &[n])
        })
        .collect::<Result<_>>()?;
    g.concat0(&flat)
}

/// Hinge discriminator loss `E_real[max(0, 1 - D)] + E_fake[max(0, 1 + D)]`,
/// each expectation the plain mean over all logits of its side.
pub fn loss_adv_d<T: Scalar>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    let r = concat_logits(g, real, "real")?;
    let f = concat_logits(g, fake, "fake")?;
    let r = g.one_minus(r);
    let r = g.max_scalar(r, T::zero());
    let r = g.mean(r);
    let f = g.add_scalar(f, T::one());
    let f = g.max_scalar(f, T::zero());
    let f = g.mean(f);
    g.add(r, f)
}

/// Generator-side loss: negative mean logit of the shifted composites.
pub fn loss_adv_s<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.neg(m)
}

/// `lambda_max * min(iter / ramp_iters, 1)`.
pub fn lambda_bin_ramp(iter: u64, lambda_max: f64, ramp_iters: u64) -> f64 {
    lambda_max * (iter as f64 / ramp_iters.max(1) as f64).min(1.0)
}

/// Components of the segmenter objective.
#[derive(Clone, Copy, Debug)]
pub struct SegmenterLossTerms {
    pub adv: Var,
    pub min: Var,
    pub bin: Var,
    pub pooled: PooledLosses,
}

/// `adv + lambda_min * (L_min + pooled min) + lambda_bin(iter) * (L_bin + pooled bin)`.
pub fn total_segmenter_loss<T: Scalar>(
    g: &mut Graph<T>,
    terms: &SegmenterLossTerms,
    weights: &LossWeights,
    iter: u64,
) -> Result<Var> {
    let lam_bin = lambda_bin_ramp(iter, weights.lambda_bin_max, weights.ramp_iters);
    let mut min = terms.min;
    if let Some(p) = terms.pooled.min {
        min = g.add(min, p)?;
    }
    let mut bin = terms.bin;
    if let Some(p) = terms.pooled.bin {
        bin = g.add(bin, p)?;
    }
    let min = g.mul_scalar(min, T::from_f64_lossy(weights.lambda_min));
    let bin = g.mul_scalar(bin, T::from_f64_lossy(lam_bin));
    let total = g.add(terms.adv, min)?;
    g.add(total, bin)
}

/// Mean squared error over the pixels of masked patches only.
///
/// `pred`, `target`: `[B, C, H, W]`; `masked`: `[B, 1, H/p, W/p]` with 1 on
/// masked patches and 0 elsewhere.
pub fn recon_mse<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    masked: Var,
    patch: usize,
) -> Result<Var> {
    let (sp, st) = (g.shape(pred).to_vec(), g.shape(target).to_vec());
    if sp != st || sp.len() != 4 {
        return Err(Error::shape("recon_mse", &sp, &st));
    }
    let sm = g.shape(masked).to_vec();
    if sm != [sp[0], 1, sp[2] / patch, sp[3] / patch] || sp[2] % patch != 0 || sp[3] % patch != 0 {
        return Err(Error::shape("recon_mse mask", &sm, &sp));
    }
    let count = g.value(masked).data().iter().fold(T::zero(), |a, &v| a + v);
    if count <= T::zero() {
        return Err(Error::invalid("recon_mse", "no masked patches"));
    }
    let up = g.upsample_nearest(masked, patch)?;
    let zeros = g.constant(crate::tensor::Tensor::zeros(sp.clone()));
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let kept = g.blend(up, sq, zeros)?;
    let total = g.sum(kept);
    let denom = count * T::from_usize(sp[1] * patch * patch).unwrap();
    Ok(g.mul_scalar(total, T::one() / denom))
}
