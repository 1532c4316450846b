use crate::compose::BatchInputs;
use crate::error::{Error, Result};
use crate::nn::{Mode, TinyMae};
use crate::tensor::{Graph, Tensor};

const CHUNK: usize = 32;

/// Frozen-autoencoder outputs for a fixed set of images, computed once.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    images: Vec<Tensor>,
    autoencoded: Vec<Tensor>,
    tokens: Vec<Tensor>,
    features: Vec<Tensor>,
}

impl FeatureCache {
    /// `images`: `[3, H, W]` each.
    pub fn build(mae: &TinyMae, images: &[Tensor]) -> Result<Self> {
        let mut cache = Self {
            images: images.to_vec(),
            autoencoded: Vec::with_capacity(images.len()),
            tokens: Vec::with_capacity(images.len()),
            features: Vec::with_capacity(images.len()),
        };
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(chunk)?);
            let enc = mae.encode(&mut g, x, None, Mode::EVAL)?;
            let ae = mae.decode(&mut g, enc.tokens, enc.batch, Mode::EVAL)?;
            let fm = mae.feature_map(&mut g, &enc)?;
            let n = mae.cfg.tokens();
            let tokens = g.value(enc.tokens).clone().reshape([chunk.len(), n, mae.cfg.dim])?;
            for b in 0..chunk.len() {
                cache.autoencoded.push(g.value(ae).select0(b));
                cache.tokens.push(tokens.select0(b));
                cache.features.push(g.value(fm).select0(b));
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<BatchInputs> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(
                "feature cache",
                format!("index {bad} out of range for {} images", self.len()),
            ));
        }
        let pick = |v: &[Tensor]| Tensor::stack(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        let tokens = pick(&self.tokens)?;
        let s = tokens.shape().to_vec();
        Ok(BatchInputs {
            images: pick(&self.images)?,
            autoencoded: pick(&self.autoencoded)?,
            tokens: tokens.reshape([s[0] * s[1], s[2]])?,
            features: pick(&self.features)?,
        })
    }
}
