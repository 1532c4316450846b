use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::cache::FeatureCache;
use super::checkpoint::{Checkpoint, RngState};
use super::config::{DiscInput, TrainConfig};
use crate::compose::{build_training_batch, downsample_mask, BatchInputs, CompositeSet};
use crate::error::{CheckpointError, Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::losses::{
    lambda_bin_ramp, loss_adv_d, loss_adv_s, loss_bin, loss_min, pooled_mask_losses, total_segmenter_loss,
    PooledSource, SegmenterLossTerms,
};
use crate::nn::{Discriminator, Mode, Module, Segmenter, TinyMae};
use crate::tensor::{Graph, PoolKind, Tensor, Var};

pub const MOVE_KIND: &str = "move";
pub const SUPERVISED_KIND: &str = "supervised";

/// Loss values of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterLog {
    pub iter: u64,
    pub adv_d: f64,
    pub adv_s: f64,
    pub min: f64,
    pub bin: f64,
    /// Sum of the unweighted pooled min-area and binarization terms.
    pub pooled: f64,
    pub lambda_bin: f64,
}

impl IterLog {
    pub const CSV_HEADER: &'static str = "iter,L_advD,L_advS,L_min,L_bin,pooled,lambda_bin";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.adv_d, self.adv_s, self.min, self.bin, self.pooled, self.lambda_bin
        )
    }
}

fn finite(g: &Graph, v: Var, iter: u64, component: &'static str) -> Result<f64> {
    let x = g.value(v).item() as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            iter: iter as usize,
            component,
        })
    }
}

fn pick(cs: &CompositeSet, which: DiscInput) -> Var {
    match which {
        DiscInput::XCheck => cs.x_check,
        DiscInput::XHatZero => cs.x_hat_zero,
        DiscInput::XHatDelta => cs.x_hat_delta,
        DiscInput::XTildeDelta => cs.x_tilde_delta,
    }
}

/// Segmenter masks `[H, W]` for every cached image, in evaluation mode.
pub fn predict_masks(seg: &Segmenter, cache: &FeatureCache) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(cache.len());
    let idx: Vec<usize> = (0..cache.len()).collect();
    for chunk in idx.chunks(32) {
        let inputs = cache.batch(chunk)?;
        let mut g = Graph::new();
        let f = g.constant(inputs.features);
        let m = seg.forward(&mut g, f, Mode::EVAL)?.mask;
        let masks = g.value(m);
        for b in 0..chunk.len() {
            let t = masks.select0(b);
            let (h, w) = (t.shape()[1], t.shape()[2]);
            out.push(t.reshape([h, w])?);
        }
    }
    Ok(out)
}

/// Alternating discriminator / segmenter training on a frozen autoencoder.
pub struct MoveTrainer {
    pub cfg: TrainConfig,
    pub mae: TinyMae,
    pub seg: Segmenter,
    pub disc: Discriminator,
    pub seg_opt: Adam,
    pub disc_opt: Adam,
    pub rng: ChaCha8Rng,
    pub iter: u64,
}

impl MoveTrainer {
    pub fn new(cfg: TrainConfig, mut mae: TinyMae) -> Result<Self> {
        cfg.validate()?;
        if mae.cfg != cfg.mae {
            return Err(Error::Config(format!(
                "autoencoder checkpoint has {:?} but the configuration expects {:?}",
                mae.cfg, cfg.mae
            )));
        }
        mae.set_frozen(true);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let seg = Segmenter::new(cfg.segmenter.clone(), &mut rng)?;
        let disc = Discriminator::new(cfg.discriminator.clone(), &mut rng)?;
        let seg_opt = Adam::new(cfg.optim.segmenter(), &seg);
        let disc_opt = Adam::new(cfg.optim.discriminator(), &disc);
        Ok(Self {
            cfg,
            mae,
            seg,
            disc,
            seg_opt,
            disc_opt,
            rng,
            iter: 0,
        })
    }

    /// One iteration on a random batch of `cache`.
    pub fn step(&mut self, cache: &FeatureCache) -> Result<IterLog> {
        let b = self.cfg.moves.batch_size.min(cache.len());
        let idx = sample(&mut self.rng, cache.len(), b).into_vec();
        let inputs = cache.batch(&idx)?;
        self.step_on(&inputs)
    }

    fn jitter_draws(&mut self, b: usize) -> Option<(Vec<f32>, Vec<f32>)> {
        let m = &self.cfg.moves;
        if !m.color_aug {
            return None;
        }
        let (br, [s0, s1]) = (m.brightness, m.saturation);
        let mut bright = Vec::with_capacity(b);
        let mut sat = Vec::with_capacity(b);
        for _ in 0..b {
            bright.push(if br > 0.0 { self.rng.gen_range(-br..=br) as f32 } else { 0.0 });
            sat.push(if s1 > s0 { self.rng.gen_range(s0..=s1) as f32 } else { s0 as f32 });
        }
        Some((bright, sat))
    }

    /// One discriminator step followed by one segmenter step on `inputs`.
    pub fn step_on(&mut self, inputs: &BatchInputs) -> Result<IterLog> {
        let iter = self.iter;
        let b = inputs.images.shape()[0];
        let opts = self.cfg.moves.compose_options();
        let mut g = Graph::new();
        let (cs, seg_out) =
            build_training_batch(&mut g, inputs, &self.seg, &self.mae, &opts, Mode::TRAIN, &mut self.rng)?;
        let jitter = self.jitter_draws(b);

        let (reals, fakes) = (self.cfg.moves.real_inputs.clone(), self.cfg.moves.fake_inputs.clone());
        let mut gd = Graph::new();
        let parts: Vec<Var> = reals
            .iter()
            .chain(&fakes)
            .map(|&d| gd.constant(g.value(pick(&cs, d)).clone()))
            .collect();
        let mut all = gd.concat0(&parts)?;
        if let Some((br, sat)) = &jitter {
            let k = parts.len();
            all = gd.color_jitter(all, &br.repeat(k), &sat.repeat(k))?;
        }
        let logits = self.disc.forward(&mut gd, all, Mode::TRAIN)?;
        let nr = reals.len() * b;
        let real = gd.slice0(logits, 0, nr)?;
        let fake = gd.slice0(logits, nr, fakes.len() * b)?;
        let ld = loss_adv_d(&mut gd, &[real], &[fake])?;
        let adv_d = finite(&gd, ld, iter, "discriminator adversarial")?;
        gd.backward(ld)?;
        self.disc_opt.step(&mut self.disc, &gd)?;

        let mut x = cs.x_hat_delta;
        if let Some((br, sat)) = &jitter {
            x = g.color_jitter(x, br, sat)?;
        }
        let logits = self.disc.forward(&mut g, x, Mode::EVAL)?;
        let adv = loss_adv_s(&mut g, logits);
        let w = &self.cfg.loss;
        let min = loss_min(&mut g, cs.m, w.theta_min)?;
        let bin = loss_bin(&mut g, cs.m)?;
        let patch = self.mae.cfg.patch;
        let max_pooled = if w.pooled_max {
            Some(match self.cfg.moves.pooled_source {
                PooledSource::Union => cs.m_hat,
                PooledSource::Mask => downsample_mask(&mut g, cs.m, patch, PoolKind::Max)?,
            })
        } else {
            None
        };
        let pooled = pooled_mask_losses(&mut g, cs.m, max_pooled, patch, w.theta_min, w.pooled_avg)?;
        let terms = SegmenterLossTerms { adv, min, bin, pooled };
        let total = total_segmenter_loss(&mut g, &terms, w, iter)?;

        let adv_s = finite(&g, adv, iter, "segmenter adversarial")?;
        let min_v = finite(&g, min, iter, "minimum area")?;
        let bin_v = finite(&g, bin, iter, "binarization")?;
        let mut pooled_v = 0.0;
        for p in [pooled.min, pooled.bin].into_iter().flatten() {
            pooled_v += finite(&g, p, iter, "pooled mask")?;
        }
        finite(&g, total, iter, "segmenter total")?;
        g.backward(total)?;
        self.seg_opt.step(&mut self.seg, &g)?;
        self.seg.update_running_stats(&seg_out.stats)?;
        self.iter += 1;
        Ok(IterLog {
            iter,
            adv_d,
            adv_s,
            min: min_v,
            bin: bin_v,
            pooled: pooled_v,
            lambda_bin: lambda_bin_ramp(iter, w.lambda_bin_max, w.ramp_iters),
        })
    }

    pub fn predict(&self, cache: &FeatureCache) -> Result<Vec<Tensor>> {
        predict_masks(&self.seg, cache)
    }

    /// Metrics of the current segmenter against ground-truth masks `[H, W]`.
    pub fn validate(&self, cache: &FeatureCache, gts: &[Tensor]) -> Result<MetricsReport> {
        evaluate(&self.predict(cache)?, gts, &self.cfg.eval)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(MOVE_KIND, serde_json::to_value(&self.cfg).expect("serializable"));
        c.add_module(&self.seg);
        c.add_module(&self.disc);
        c.tensors.extend(self.seg_opt.state_tensors("opt.seg"));
        c.tensors.extend(self.disc_opt.state_tensors("opt.disc"));
        c.meta.insert("iter".into(), self.iter.into());
        c.meta.insert("seg_step".into(), self.seg_opt.step.into());
        c.meta.insert("disc_step".into(), self.disc_opt.step.into());
        c.meta.insert("mae_checksum".into(), self.mae.checksum().into());
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    /// Continue from [`MoveTrainer::checkpoint`] output with the same autoencoder.
    pub fn resume(cfg: TrainConfig, mae: TinyMae, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != MOVE_KIND {
            return Err(CheckpointError::Header(format!("expected a move checkpoint, found {}", ckpt.kind)).into());
        }
        if ckpt.meta.get("mae_checksum").and_then(|v| v.as_str()) != Some(mae.checksum().as_str()) {
            return Err(Error::Config("checkpoint was trained with a different autoencoder".into()));
        }
        let mut t = Self::new(cfg, mae)?;
        ckpt.load_module(&mut t.seg)?;
        ckpt.load_module(&mut t.disc)?;
        let lookup = |k: &str| ckpt.get(k).cloned();
        t.seg_opt.load_state("opt.seg", ckpt.meta_u64("seg_step")?, &lookup)?;
        t.disc_opt.load_state("opt.disc", ckpt.meta_u64("disc_step")?, &lookup)?;
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| CheckpointError::Header("missing rng state".into()))?
            .restore()?;
        t.iter = ckpt.meta_u64("iter")?;
        Ok(t)
    }
}

/// Rebuild the segmenter stored in a move or supervised checkpoint, with the
/// configuration it was trained under.
pub fn load_segmenter(ckpt: &Checkpoint) -> Result<(Segmenter, TrainConfig)> {
    if ckpt.kind != MOVE_KIND && ckpt.kind != SUPERVISED_KIND {
        return Err(CheckpointError::Header(format!("{} checkpoints hold no segmenter", ckpt.kind)).into());
    }
    let cfg: TrainConfig =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut seg = Segmenter::new(cfg.segmenter.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_module(&mut seg)?;
    Ok((seg, cfg))
}

/// Segmenter trained directly on ground-truth masks with pixelwise binary
/// cross-entropy; a capacity check for the head on frozen features.
pub struct SupervisedTrainer {
    pub cfg: TrainConfig,
    pub seg: Segmenter,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub iter: u64,
}

impl SupervisedTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let seg = Segmenter::new(cfg.segmenter.clone(), &mut rng)?;
        let s = &cfg.supervised;
        let opt = Adam::new(super::adam::AdamConfig::new(s.lr, s.betas), &seg);
        Ok(Self {
            cfg,
            seg,
            opt,
            rng,
            iter: 0,
        })
    }

    /// One step on a random batch; `gts` are `[H, W]` masks aligned with `cache`.
    pub fn step(&mut self, cache: &FeatureCache, gts: &[Tensor]) -> Result<f64> {
        let b = self.cfg.supervised.batch_size.min(cache.len());
        let idx = sample(&mut self.rng, cache.len(), b).into_vec();
        let inputs = cache.batch(&idx)?;
        let target = Tensor::stack(&idx.iter().map(|&i| gts[i].clone()).collect::<Vec<_>>())?;
        let s = target.shape().to_vec();
        let target = target.reshape([s[0], 1, s[1], s[2]])?;
        let mut g = Graph::new();
        let f = g.constant(inputs.features);
        let out = self.seg.forward(&mut g, f, Mode::TRAIN)?;
        let loss = g.bce_mean(out.mask, &target)?;
        let value = finite(&g, loss, self.iter, "binary cross-entropy")?;
        g.backward(loss)?;
        self.opt.step(&mut self.seg, &g)?;
        self.seg.update_running_stats(&out.stats)?;
        self.iter += 1;
        Ok(value)
    }

    pub fn validate(&self, cache: &FeatureCache, gts: &[Tensor]) -> Result<MetricsReport> {
        evaluate(&predict_masks(&self.seg, cache)?, gts, &self.cfg.eval)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(SUPERVISED_KIND, serde_json::to_value(&self.cfg).expect("serializable"));
        c.add_module(&self.seg);
        c.meta.insert("iter".into(), self.iter.into());
        c
    }
}
