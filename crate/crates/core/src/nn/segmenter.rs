use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Conv2d, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Graph, Var};

/// Upsampling head architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    /// Channels of the input feature grid.
    pub feat_dim: usize,
    /// Pixels per feature cell; must be a power of two.
    pub patch: usize,
    /// Output channels of each upsampling stage; one entry per doubling.
    pub channels: Vec<usize>,
    /// Two convolutions per block instead of one.
    pub deep: bool,
    pub slope: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            feat_dim: 64,
            patch: 8,
            channels: vec![32, 16, 16],
            deep: false,
            slope: 0.01,
        }
    }
}

impl SegmenterConfig {
    pub fn stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return Err(Error::Config(format!(
                "segmenter: patch {} must be a power of two of at least 2",
                self.patch
            )));
        }
        if self.channels.len() != self.stages() {
            return Err(Error::Config(format!(
                "segmenter: patch {} needs {} stage widths, got {}",
                self.patch,
                self.stages(),
                self.channels.len()
            )));
        }
        if self.feat_dim == 0 || self.channels.contains(&0) {
            return Err(Error::Config("segmenter: widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    layers: Vec<(Conv2d, BatchNorm2d)>,
}

impl ConvBlock {
    fn new(prefix: &str, cin: usize, cout: usize, deep: bool, slope: f32, rng: &mut impl Rng) -> Self {
        let n = if deep { 2 } else { 1 };
        let layers = (0..n)
            .map(|i| {
                let c = if i == 0 { cin } else { cout };
                (
                    Conv2d::new(&format!("{prefix}.conv{i}"), c, cout, 3, 1, 1, false, slope, rng),
                    BatchNorm2d::new(&format!("{prefix}.bn{i}"), cout),
                )
            })
            .collect();
        Self { layers }
    }

    fn forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        slope: f32,
        mode: Mode,
        stats: &mut Vec<BatchNormStats<f32>>,
    ) -> Result<Var> {
        for (conv, bn) in &self.layers {
            x = conv.forward(g, x, mode)?;
            let (y, s) = bn.forward(g, x, mode)?;
            stats.extend(s);
            x = g.leaky_relu(y, slope);
        }
        Ok(x)
    }
}

/// Result of a segmenter forward pass.
#[derive(Clone, Debug)]
pub struct SegmenterOutput {
    /// Soft masks `[B, 1, H, W]` in (0, 1).
    pub mask: Var,
    /// Batch statistics of every batch norm in training mode, in layer order.
    pub stats: Vec<BatchNormStats<f32>>,
}

/// Convolutional head mapping a feature grid to a full-resolution soft mask:
/// repeated nearest 2x upsampling and conv blocks, one block at full
/// resolution, then a 1x1 projection and a sigmoid.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub cfg: SegmenterConfig,
    stages: Vec<ConvBlock>,
    last: ConvBlock,
    out: Conv2d,
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.feat_dim;
        let mut stages = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            stages.push(ConvBlock::new(&format!("seg.up{i}"), cin, c, cfg.deep, cfg.slope as f32, rng));
            cin = c;
        }
        let last = ConvBlock::new("seg.last", cin, cin, cfg.deep, cfg.slope as f32, rng);
        let out = Conv2d::new("seg.out", cin, 1, 1, 1, 0, true, 1.0, rng);
        Ok(Self {
            cfg,
            stages,
            last,
            out,
        })
    }

    /// `features: [B, feat_dim, h, w]` to masks `[B, 1, h * patch, w * patch]`.
    pub fn forward(&self, g: &mut Graph, features: Var, mode: Mode) -> Result<SegmenterOutput> {
        let s = g.shape(features);
        if s.len() != 4 || s[1] != self.cfg.feat_dim {
            return Err(Error::shape("segmenter input", s, &[0, self.cfg.feat_dim, 0, 0]));
        }
        let mut stats = Vec::new();
        let mut x = features;
        for block in &self.stages {
            x = g.upsample_nearest2x(x)?;
            x = block.forward(g, x, self.cfg.slope as f32, mode, &mut stats)?;
        }
        x = self.last.forward(g, x, self.cfg.slope as f32, mode, &mut stats)?;
        let logits = self.out.forward(g, x, mode)?;
        Ok(SegmenterOutput {
            mask: g.sigmoid(logits),
            stats,
        })
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchNormStats<f32>]) -> Result<()> {
        let bns: Vec<&mut BatchNorm2d> = self
            .stages
            .iter_mut()
            .chain(std::iter::once(&mut self.last))
            .flat_map(|b| b.layers.iter_mut().map(|(_, bn)| bn))
            .collect();
        if bns.len() != stats.len() {
            return Err(Error::invalid(
                "update_running_stats",
                format!("{} batch norms but {} statistics", bns.len(), stats.len()),
            ));
        }
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }
}

impl Module for Segmenter {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for block in self.stages.iter().chain(std::iter::once(&self.last)) {
            for (conv, bn) in &block.layers {
                conv.visit(f);
                bn.visit(f);
            }
        }
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in self.stages.iter_mut().chain(std::iter::once(&mut self.last)) {
            for (conv, bn) in &mut block.layers {
                conv.visit_mut(f);
                bn.visit_mut(f);
            }
        }
        self.out.visit_mut(f);
    }
}
