//! Parameter containers and the three networks: the tiny masked autoencoder,
//! the upsampling segmenter head and the convolutional discriminator.
//!
//! Models own their weights as [`Param`]s and are bound onto a [`Graph`] at
//! forward time. A parameter appears on the tape as a keyed leaf, so using it
//! several times in one graph accumulates a single gradient.

mod discriminator;
mod layers;
mod mae;
mod segmenter;

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::tensor::{Graph, Tensor, Var};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
pub use mae::{patchify, sincos_pos_embed, unpatchify, MaeConfig, MaeEncoding, TinyMae};
pub use segmenter::{Segmenter, SegmenterConfig, SegmenterOutput};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// A named weight tensor.
///
/// Buffers (batch-norm running statistics) are stored and checkpointed like
/// weights but never receive gradients.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub buffer: bool,
    key: u64,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: self.value.clone(),
            buffer: self.buffer,
            key: fresh_key(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            buffer: false,
            key: fresh_key(),
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            buffer: true,
            ..Self::new(name, value)
        }
    }

    /// Unique tape key of this parameter.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Place the parameter on `g`; it tracks gradients when `grads` is set and
    /// it is not a buffer.
    pub fn bind(&self, g: &mut Graph, grads: bool) -> Var {
        g.keyed_leaf(self.key, &self.value, grads && !self.buffer)
    }

    /// Gradient accumulated on `g`, if the parameter was bound with gradients.
    pub fn grad<'g>(&self, g: &'g Graph) -> Option<&'g [f32]> {
        g.keyed_grad(self.key)
    }
}

/// Forward-pass flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Bind parameters as gradient-tracking leaves.
    pub grads: bool,
    /// Batch norm uses batch statistics.
    pub train: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        grads: true,
        train: true,
    };
    pub const EVAL: Mode = Mode {
        grads: false,
        train: false,
    };
    /// Parameters frozen, but batch statistics still in training mode.
    pub const FROZEN_TRAIN: Mode = Mode {
        grads: false,
        train: true,
    };
}

/// A container of named parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| !p.buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Hex SHA-256 over names and little-endian parameter bytes.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        });
        format!("{:x}", h.finalize())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
