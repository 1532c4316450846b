use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv2d, Linear, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Strided convolutional critic architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub img_size: usize,
    /// Output channels of each 4x4 stride-2 convolution.
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            channels: vec![16, 32, 64, 64],
            slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.channels.len();
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator: widths must be positive".into()));
        }
        if self.img_size < div || self.img_size % div != 0 {
            return Err(Error::Config(format!(
                "discriminator: image size {} does not halve {} times",
                self.img_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Maps `[B, 3, H, W]` images to one logit each.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&format!("disc.conv{i}"), cin, c, 4, 2, 1, true, cfg.slope as f32, rng));
            cin = c;
        }
        let side = cfg.img_size >> cfg.channels.len();
        let head = Linear::new("disc.head", cin * side * side, 1, rng);
        Ok(Self { cfg, convs, head })
    }

    /// Logits `[B]`.
    pub fn forward(&self, g: &mut Graph, images: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let size = self.cfg.img_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::shape("discriminator input", &s, &[s[0], 3, size, size]));
        }
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(g, x, mode)?;
            x = g.leaky_relu(x, self.cfg.slope as f32);
        }
        let flat: usize = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[s[0], flat])?;
        let logits = self.head.forward(g, x, mode)?;
        g.reshape(logits, &[s[0]])
    }
}

impl Module for Discriminator {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for c in &self.convs {
            c.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}
