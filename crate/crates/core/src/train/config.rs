use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::compose::{ComposeOptions, ShiftOrder};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::inpaint::InpaintMode;
use crate::losses::{LossWeights, PooledSource};
use crate::nn::{DiscriminatorConfig, MaeConfig, SegmenterConfig};

/// Images a discriminator step can see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// Autoencoded input.
    XCheck,
    /// Zero-shift composite.
    XHatZero,
    /// Shifted composite.
    XHatDelta,
    /// Copy-paste composite.
    XTildeDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub mae_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_data: "data/train".into(),
            val_data: "data/val".into(),
            mae_checkpoint: "runs/mae/mae.ckpt".into(),
            out_dir: "runs/move".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub val_images: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch_size: 32,
            mask_ratio: 0.75,
            lr: 1e-3,
            betas: [0.9, 0.95],
            val_every: 500,
            checkpoint_every: 1000,
            val_images: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub seg_betas: [f64; 2],
    pub disc_betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            seg_betas: [0.9, 0.95],
            disc_betas: [0.0, 0.99],
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn segmenter(&self) -> AdamConfig {
        AdamConfig {
            eps: self.eps,
            ..AdamConfig::new(self.lr, self.seg_betas)
        }
    }

    pub fn discriminator(&self) -> AdamConfig {
        AdamConfig {
            eps: self.eps,
            ..AdamConfig::new(self.lr, self.disc_betas)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoveConfig {
    pub iters: u64,
    pub batch_size: usize,
    /// Maximum shift as a fraction of the image side.
    pub delta: f64,
    pub inpaint: InpaintMode,
    pub shift_order: ShiftOrder,
    pub union: bool,
    pub pooled_source: PooledSource,
    pub real_inputs: Vec<DiscInput>,
    pub fake_inputs: Vec<DiscInput>,
    pub color_aug: bool,
    pub brightness: f64,
    pub saturation: [f64; 2],
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub render_every: u64,
    pub val_images: usize,
    pub train_images: Option<usize>,
    /// Stop once validation IoU reaches this value.
    pub target_iou: Option<f64>,
}

impl Default for MoveConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            batch_size: 16,
            delta: 0.125,
            inpaint: InpaintMode::Full,
            shift_order: ShiftOrder::ShiftAfterAutoencode,
            union: true,
            pooled_source: PooledSource::Union,
            real_inputs: vec![DiscInput::XCheck, DiscInput::XHatZero],
            fake_inputs: vec![DiscInput::XHatDelta, DiscInput::XTildeDelta],
            color_aug: true,
            brightness: 0.2,
            saturation: [0.8, 1.2],
            val_every: 500,
            checkpoint_every: 1000,
            render_every: 0,
            val_images: 64,
            train_images: None,
            target_iou: None,
        }
    }
}

impl MoveConfig {
    pub fn compose_options(&self) -> ComposeOptions {
        ComposeOptions {
            delta: self.delta,
            inpaint: self.inpaint,
            shift_order: self.shift_order,
            union: self.union,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub val_every: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            batch_size: 16,
            lr: 1e-3,
            betas: [0.9, 0.95],
            val_every: 250,
        }
    }
}

/// Everything a run needs. Every section and key is optional in the TOML form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub mae: MaeConfig,
    pub pretrain: PretrainConfig,
    pub segmenter: SegmenterConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    #[serde(rename = "move")]
    pub moves: MoveConfig,
    pub supervised: SupervisedConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.mae.validate()?;
        self.segmenter.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.optim.segmenter().validate()?;
        self.optim.discriminator().validate()?;
        let m = &self.moves;
        if self.segmenter.feat_dim != self.mae.dim || self.segmenter.patch != self.mae.patch {
            return Err(Error::Config(format!(
                "segmenter expects {}-dim features at patch {}, the autoencoder provides {} at patch {}",
                self.segmenter.feat_dim, self.segmenter.patch, self.mae.dim, self.mae.patch
            )));
        }
        if self.discriminator.img_size != self.mae.img_size {
            return Err(Error::Config("discriminator and autoencoder image sizes differ".into()));
        }
        if !(0.0..=0.5).contains(&m.delta) {
            return Err(Error::Config(format!("move.delta must lie in [0, 0.5], got {}", m.delta)));
        }
        if m.batch_size == 0 || self.pretrain.batch_size == 0 || self.supervised.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if m.real_inputs.is_empty() || m.fake_inputs.is_empty() {
            return Err(Error::Config("discriminator needs real and fake inputs".into()));
        }
        if !m.fake_inputs.contains(&DiscInput::XHatDelta) {
            return Err(Error::Config("move.fake_inputs must include x_hat_delta".into()));
        }
        if m.real_inputs.iter().any(|r| m.fake_inputs.contains(r)) {
            return Err(Error::Config("an image set cannot be both real and fake".into()));
        }
        if !(m.saturation[0] > 0.0 && m.saturation[0] <= m.saturation[1]) || m.brightness < 0.0 {
            return Err(Error::Config("invalid colour augmentation ranges".into()));
        }
        let p = &self.pretrain;
        if !(p.mask_ratio > 0.0 && p.mask_ratio < 1.0) {
            return Err(Error::Config(format!("pretrain.mask_ratio must lie in (0, 1), got {}", p.mask_ratio)));
        }
        AdamConfig::new(p.lr, p.betas).validate()?;
        AdamConfig::new(self.supervised.lr, self.supervised.betas).validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold <= 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Write the configuration as `config.toml` into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.optim.lr, 2e-4);
        assert_eq!(c.optim.seg_betas, [0.9, 0.95]);
        assert_eq!(c.optim.disc_betas, [0.0, 0.99]);
        assert_eq!(c.loss.theta_min, 0.05);
        assert_eq!(c.loss.lambda_min, 100.0);
        assert_eq!(c.loss.lambda_bin_max, 12.5);
        assert_eq!(c.loss.ramp_iters, 2500);
        assert_eq!(c.moves.delta, 0.125);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trips() {
        let mut c = TrainConfig::default();
        c.moves.delta = 0.0;
        c.moves.fake_inputs = vec![DiscInput::XHatDelta];
        c.eval.beta_sq = 0.3;
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_toml("[move]\nshift_rnage = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("shift_rnage"), "{err}");
        let err = TrainConfig::from_toml("[move]\nfake_inputs = [\"x_check\"]\n").unwrap_err();
        assert!(err.to_string().contains("x_hat_delta"), "{err}");
    }
}
