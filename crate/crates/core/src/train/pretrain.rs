use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::inpaint::masked_mse;
use crate::losses::recon_mse;
use crate::nn::{MaeConfig, Mode, TinyMae};
use crate::tensor::{Graph, Tensor};

pub const MAE_KIND: &str = "mae";

/// Random visible-token sets, each sorted, plus the complementary masked sets.
pub fn random_token_split(
    n: usize,
    visible: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut vis = Vec::with_capacity(batch);
    let mut masked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut keep = sample(rng, n, visible).into_vec();
        keep.sort_unstable();
        let mut flags = vec![false; n];
        for &k in &keep {
            flags[k] = true;
        }
        masked.push((0..n).filter(|&i| !flags[i]).collect());
        vis.push(keep);
    }
    (vis, masked)
}

/// Sparse-path reconstructions `[B, 3, H, W]` (clamped) of `images`.
pub fn sparse_reconstruct(mae: &TinyMae, images: &Tensor, visible: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let enc = mae.encode(&mut g, x, Some(visible), Mode::EVAL)?;
    let full = mae.fill_masked(&mut g, &enc, visible, Mode::EVAL)?;
    let out = mae.decode(&mut g, full, enc.batch, Mode::EVAL)?;
    Ok(g.value(out).clone())
}

fn masked_map(masked: &[Vec<usize>], grid: usize) -> Tensor {
    let n = grid * grid;
    let mut data = vec![0.0f32; masked.len() * n];
    for (b, set) in masked.iter().enumerate() {
        for &i in set {
            data[b * n + i] = 1.0;
        }
    }
    Tensor::new([masked.len(), 1, grid, grid], data).expect("consistent shape")
}

fn visible_count(cfg: &MaeConfig, ratio: f64) -> usize {
    let n = cfg.tokens();
    (((1.0 - ratio) * n as f64).round() as usize).clamp(1, n - 1)
}

/// Masked-autoencoder pretraining state.
pub struct MaePretrainer {
    pub cfg: TrainConfig,
    pub mae: TinyMae,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub iter: u64,
    images: Vec<Tensor>,
}

impl MaePretrainer {
    pub fn new(cfg: TrainConfig, images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("pretrain_mae", "no training images"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mae = TinyMae::new(cfg.mae.clone(), &mut rng)?;
        let p = &cfg.pretrain;
        let opt = Adam::new(AdamConfig::new(p.lr, p.betas), &mae);
        Ok(Self {
            cfg,
            mae,
            opt,
            rng,
            iter: 0,
            images,
        })
    }

    /// One optimization step; returns the training loss.
    pub fn step(&mut self) -> Result<f64> {
        let p = &self.cfg.pretrain;
        let b = p.batch_size.min(self.images.len());
        let idx = sample(&mut self.rng, self.images.len(), b).into_vec();
        let batch = Tensor::stack(&idx.iter().map(|&i| self.images[i].clone()).collect::<Vec<_>>())?;
        let n = self.mae.cfg.tokens();
        let keep = visible_count(&self.mae.cfg, p.mask_ratio);
        let (visible, masked) = random_token_split(n, keep, b, &mut self.rng);

        let mut g = Graph::new();
        let x = g.constant(batch);
        let enc = self.mae.encode(&mut g, x, Some(&visible), Mode::TRAIN)?;
        let full = self.mae.fill_masked(&mut g, &enc, &visible, Mode::TRAIN)?;
        let pred = self.mae.decode_raw(&mut g, full, b, Mode::TRAIN)?;
        let mask = g.constant(masked_map(&masked, self.mae.cfg.grid()));
        let loss = recon_mse(&mut g, pred, x, mask, self.mae.cfg.patch)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iter: self.iter as usize,
                component: "reconstruction",
            });
        }
        g.backward(loss)?;
        self.opt.step(&mut self.mae, &g)?;
        self.iter += 1;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        mae_checkpoint(&self.mae, &self.cfg, Some((&self.opt, &self.rng, self.iter)))
    }

    /// Continue from a checkpoint written by [`MaePretrainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, images: Vec<Tensor>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, images)?;
        ckpt.load_module(&mut t.mae)?;
        let iter = ckpt.meta_u64("iter")?;
        let lookup = |k: &str| ckpt.get(k).cloned();
        t.opt.load_state("opt.mae", ckpt.meta_u64("opt_step")?, &lookup)?;
        t.rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::invalid("resume", "checkpoint has no rng state"))?
            .restore()?;
        t.iter = iter;
        Ok(t)
    }
}

/// Serialize an autoencoder, optionally with its optimizer and RNG state.
pub fn mae_checkpoint(mae: &TinyMae, cfg: &TrainConfig, state: Option<(&Adam, &ChaCha8Rng, u64)>) -> Checkpoint {
    let mut c = Checkpoint::new(MAE_KIND, serde_json::to_value(&cfg.mae).expect("serializable"));
    c.add_module(mae);
    if let Some((opt, rng, iter)) = state {
        c.tensors.extend(opt.state_tensors("opt.mae"));
        c.meta.insert("iter".into(), iter.into());
        c.meta.insert("opt_step".into(), opt.step.into());
        c.rng = Some(RngState::capture(rng));
    }
    c
}

/// Rebuild a frozen autoencoder from a checkpoint.
pub fn load_mae(ckpt: &Checkpoint) -> Result<TinyMae> {
    if ckpt.kind != MAE_KIND {
        return Err(Error::invalid("load_mae", format!("expected a mae checkpoint, found {}", ckpt.kind)));
    }
    let cfg: MaeConfig = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| crate::error::CheckpointError::Header(e.to_string()))?;
    let mut mae = TinyMae::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_module(&mut mae)?;
    mae.set_frozen(true);
    Ok(mae)
}

/// Fixed masked-token sets for validation, derived from `seed`.
pub fn validation_masks(cfg: &MaeConfig, count: usize, ratio: f64, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A1D);
    random_token_split(cfg.tokens(), visible_count(cfg, ratio), count, &mut rng)
}

/// Mean masked-patch MSE of sparse-path reconstructions.
pub fn reconstruction_mse(mae: &TinyMae, images: &[Tensor], ratio: f64, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("reconstruction_mse", "no images"));
    }
    let (visible, masked) = validation_masks(&mae.cfg, images.len(), ratio, seed);
    let mut total = 0.0;
    for (start, chunk) in images.chunks(32).enumerate().map(|(i, c)| (i * 32, c)) {
        let rec = sparse_reconstruct(mae, &Tensor::stack(chunk)?, &visible[start..start + chunk.len()])?;
        for (b, img) in chunk.iter().enumerate() {
            total += masked_mse(&rec.select0(b), img, &masked[start + b], mae.cfg.patch)?;
        }
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.mae = MaeConfig {
            img_size: 16,
            patch: 4,
            dim: 16,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        cfg.pretrain.batch_size = 4;
        cfg.pretrain.lr = 3e-3;
        cfg
    }

    fn images(n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|k| Tensor::from_fn([3, 16, 16], |i| 0.3 + 0.2 * (((i % 16) as f32 + k as f32) * 0.4).sin()))
            .collect()
    }

    #[test]
    fn token_split_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v, m) = random_token_split(16, 4, 3, &mut rng);
        for (a, b) in v.iter().zip(&m) {
            let mut all: Vec<usize> = a.iter().chain(b).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..16).collect::<Vec<_>>());
            assert_eq!(a.len(), 4);
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let run = || {
            let mut t = MaePretrainer::new(tiny_cfg(), images(8)).unwrap();
            let first = reconstruction_mse(&t.mae, &images(4), 0.75, 1).unwrap();
            for _ in 0..60 {
                t.step().unwrap();
            }
            let last = reconstruction_mse(&t.mae, &images(4), 0.75, 1).unwrap();
            (first, last, t.checkpoint().to_bytes())
        };
        let (first, last, bytes) = run();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(run().2, bytes);
    }

    #[test]
    fn resume_continues_exactly() {
        let mut a = MaePretrainer::new(tiny_cfg(), images(8)).unwrap();
        for _ in 0..3 {
            a.step().unwrap();
        }
        let ckpt = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        let mut b = MaePretrainer::resume(tiny_cfg(), images(8), &ckpt).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        let mae = load_mae(&ckpt).unwrap();
        assert!(mae.frozen);
        assert_eq!(mae.checksum(), {
            let mut m = TinyMae::new(tiny_cfg().mae, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            ckpt.load_module(&mut m).unwrap();
            m.checksum()
        });
    }
}
