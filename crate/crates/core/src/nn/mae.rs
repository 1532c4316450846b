use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{join, LayerNorm, Linear, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Architecture of the tiny masked autoencoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub img_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            patch: 8,
            dim: 64,
            enc_depth: 4,
            dec_depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl MaeConfig {
    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("mae: {msg}")));
        if self.patch == 0 || self.img_size == 0 || self.img_size % self.patch != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.img_size, self.patch
            ));
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad(format!("dim {} must be a positive multiple of 4", self.dim));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Fixed 2-D sine-cosine positional embeddings, `[gh * gw, dim]` in row-major
/// grid order. The first half of each vector encodes the column, the second
/// half the row.
pub fn sincos_pos_embed(dim: usize, gh: usize, gw: usize) -> Tensor {
    let quarter = dim / 4;
    let mut data = vec![0.0f32; gh * gw * dim];
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut data[(r * gw + c) * dim..(r * gw + c + 1) * dim];
            for (half, pos) in [(0, c), (1, r)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + i] = a.sin() as f32;
                    row[half * 2 * quarter + quarter + i] = a.cos() as f32;
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], data).expect("consistent shape")
}

fn patch_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = match shape {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(Error::invalid("patchify", format!("expected an image, got {shape:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{h}x{w} is not divisible into {p}x{p} patches"),
        ));
    }
    Ok((b, c, h, w))
}

/// Split `[3, H, W]` (or `[B, 3, H, W]`) into row-major tiles of `p * p * 3`
/// values ordered (row, column, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = patch_dims(image.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    let data = kernels::permute(image.data(), &[b, c, gh, p, gw, p], &[0, 2, 4, 3, 5, 1]);
    let shape = if image.ndim() == 3 {
        vec![gh * gw, p * p * c]
    } else {
        vec![b, gh * gw, p * p * c]
    };
    Tensor::new(shape, data)
}

/// Inverse of [`patchify`] for a `[N, p*p*c]` or `[B, N, p*p*c]` token array.
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, len) = match tokens.shape() {
        [n, len] => (1, *n, *len),
        [b, n, len] => (*b, *n, *len),
        s => return Err(Error::invalid("unpatchify", format!("expected tokens, got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 || n != (h / p) * (w / p) || len % (p * p) != 0 {
        return Err(Error::invalid(
            "unpatchify",
            format!("{n} tokens of {len} values do not tile {h}x{w} with patch {p}"),
        ));
    }
    let c = len / (p * p);
    let data = kernels::permute(
        tokens.data(),
        &[b, h / p, w / p, p, p, c],
        &[0, 5, 1, 3, 2, 4],
    );
    let shape = if tokens.ndim() == 2 {
        vec![c, h, w]
    } else {
        vec![b, c, h, w]
    };
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(&join(prefix, "ln1"), dim),
            qkv: Linear::new(&join(prefix, "qkv"), dim, 3 * dim, rng),
            proj: Linear::new(&join(prefix, "proj"), dim, dim, rng),
            ln2: LayerNorm::new(&join(prefix, "ln2"), dim),
            fc1: Linear::new(&join(prefix, "fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::new(&join(prefix, "fc2"), mlp_ratio * dim, dim, rng),
            heads,
        }
    }

    /// Pre-norm self-attention and MLP over `x: [batch * n, dim]`.
    fn forward(&self, g: &mut Graph, x: Var, batch: usize, n: usize, mode: Mode) -> Result<Var> {
        let dim = g.shape(x)[1];
        let (h, dh) = (self.heads, dim / self.heads);
        let y = self.ln1.forward(g, x, mode)?;
        let qkv = self.qkv.forward(g, y, mode)?;
        let qkv = g.reshape(qkv, &[batch, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = g.slice0(qkv, i, 1)?;
            *part = g.reshape(s, &[batch * h, n, dh])?;
        }
        let [q, k, v] = parts;
        let att = g.matmul_t(q, k, false, true)?;
        let att = g.mul_scalar(att, 1.0 / (dh as f32).sqrt());
        let att = g.softmax(att);
        let o = g.matmul(att, v)?;
        let o = g.reshape(o, &[batch, h, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[batch * n, dim])?;
        let o = self.proj.forward(g, o, mode)?;
        let x = g.add(x, o)?;

        let y = self.ln2.forward(g, x, mode)?;
        let y = self.fc1.forward(g, y, mode)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, y, mode)?;
        g.add(x, y)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.ln1.visit(f);
        self.qkv.visit(f);
        self.proj.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_mut(f);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Encoder output for a batch.
#[derive(Clone, Copy, Debug)]
pub struct MaeEncoding {
    /// Final normalized embeddings ξ, `[batch * per_image, dim]`.
    pub tokens: Var,
    /// Output of the penultimate encoder block, same layout as `tokens`.
    pub features: Var,
    pub batch: usize,
    pub per_image: usize,
}

/// Patch transformer autoencoder used as a differentiable inpainter and as the
/// segmenter's frozen feature extractor.
#[derive(Clone, Debug)]
pub struct TinyMae {
    pub cfg: MaeConfig,
    patch_embed: Linear,
    enc_blocks: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    pub msk_token: Param,
    dec_blocks: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head: Linear,
    pos: Tensor,
    /// When set, parameters are bound without gradients regardless of mode.
    pub frozen: bool,
}

impl TinyMae {
    pub fn new(cfg: MaeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| TransformerBlock::new(&format!("mae.enc.{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| TransformerBlock::new(&format!("mae.dec.{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let normal = Normal::new(0.0f32, 0.02).expect("valid normal");
        let msk = Tensor::from_fn([d], |_| normal.sample(rng));
        Ok(Self {
            patch_embed: Linear::new("mae.patch_embed", cfg.token_len(), d, rng),
            enc_blocks,
            enc_norm: LayerNorm::new("mae.enc_norm", d),
            msk_token: Param::new("mae.msk_token", msk),
            dec_blocks,
            dec_norm: LayerNorm::new("mae.dec_norm", d),
            head: Linear::new("mae.head", d, cfg.token_len(), rng),
            pos: sincos_pos_embed(d, cfg.grid(), cfg.grid()),
            frozen: false,
            cfg,
        })
    }

    fn mode(&self, mode: Mode) -> Mode {
        Mode {
            grads: mode.grads && !self.frozen,
            train: mode.train,
        }
    }

    fn check_images(&self, g: &Graph, images: Var) -> Result<usize> {
        let s = g.shape(images);
        let size = self.cfg.img_size;
        match s {
            [b, 3, h, w] if *h == size && *w == size => Ok(*b),
            _ => Err(Error::shape("mae input", s, &[0, 3, size, size])),
        }
    }

    fn tiled_pos(&self, batch: usize) -> Tensor {
        let mut data = Vec::with_capacity(batch * self.pos.numel());
        for _ in 0..batch {
            data.extend_from_slice(self.pos.data());
        }
        Tensor::new([batch * self.cfg.tokens(), self.cfg.dim], data).expect("consistent shape")
    }

    /// Patchify `[B, 3, H, W]` images on the tape to `[B * N, p * p * 3]`.
    pub fn patchify_var(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let b = self.check_images(g, images)?;
        let (p, gs) = (self.cfg.patch, self.cfg.grid());
        let t = g.reshape(images, &[b, 3, gs, p, gs, p])?;
        let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
        g.reshape(t, &[b * gs * gs, self.cfg.token_len()])
    }

    /// Inverse of [`TinyMae::patchify_var`].
    pub fn unpatchify_var(&self, g: &mut Graph, tokens: Var, batch: usize) -> Result<Var> {
        let (p, gs) = (self.cfg.patch, self.cfg.grid());
        let t = g.reshape(tokens, &[batch, gs, gs, p, p, 3])?;
        let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
        g.reshape(t, &[batch, 3, gs * p, gs * p])
    }

    /// Encode `[B, 3, H, W]` images. With `visible`, each image keeps only the
    /// listed token positions (all lists equally long); positional embeddings
    /// are added before the subset is taken, so they stay keyed to the
    /// original grid index.
    pub fn encode(
        &self,
        g: &mut Graph,
        images: Var,
        visible: Option<&[Vec<usize>]>,
        mode: Mode,
    ) -> Result<MaeEncoding> {
        let mode = self.mode(mode);
        let batch = self.check_images(g, images)?;
        let n = self.cfg.tokens();
        let patches = self.patchify_var(g, images)?;
        let emb = self.patch_embed.forward(g, patches, mode)?;
        let pos = g.constant(self.tiled_pos(batch));
        let mut x = g.add(emb, pos)?;
        let per_image = match visible {
            None => n,
            Some(sets) => {
                if sets.len() != batch {
                    return Err(Error::invalid(
                        "mae_encode",
                        format!("{} visible sets for a batch of {batch}", sets.len()),
                    ));
                }
                let k = sets[0].len();
                let mut flat = Vec::with_capacity(batch * k);
                for (b, set) in sets.iter().enumerate() {
                    if set.len() != k || k == 0 {
                        return Err(Error::invalid(
                            "mae_encode",
                            "visible sets must be non-empty and equally sized",
                        ));
                    }
                    if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                        return Err(Error::invalid(
                            "mae_encode",
                            format!("token index {bad} out of range for {n} tokens"),
                        ));
                    }
                    flat.extend(set.iter().map(|&i| b * n + i));
                }
                x = g.gather_rows(x, &flat)?;
                k
            }
        };
        let depth = self.enc_blocks.len();
        let mut features = x;
        for (i, block) in self.enc_blocks.iter().enumerate() {
            x = block.forward(g, x, batch, per_image, mode)?;
            if i + 2 == depth || depth == 1 {
                features = x;
            }
        }
        let tokens = self.enc_norm.forward(g, x, mode)?;
        Ok(MaeEncoding {
            tokens,
            features,
            batch,
            per_image,
        })
    }

    /// Decoder output before clamping, `[B, 3, H, W]`.
    pub fn decode_raw(&self, g: &mut Graph, tokens: Var, batch: usize, mode: Mode) -> Result<Var> {
        let mode = self.mode(mode);
        let n = self.cfg.tokens();
        let s = g.shape(tokens).to_vec();
        if s != [batch * n, self.cfg.dim] {
            return Err(Error::shape("mae_decode", &s, &[batch * n, self.cfg.dim]));
        }
        let pos = g.constant(self.tiled_pos(batch));
        let mut x = g.add(tokens, pos)?;
        for block in &self.dec_blocks {
            x = block.forward(g, x, batch, n, mode)?;
        }
        let x = self.dec_norm.forward(g, x, mode)?;
        let x = self.head.forward(g, x, mode)?;
        self.unpatchify_var(g, x, batch)
    }

    /// Decode one embedding per grid cell into images clamped to [0, 1].
    pub fn decode(&self, g: &mut Graph, tokens: Var, batch: usize, mode: Mode) -> Result<Var> {
        let raw = self.decode_raw(g, tokens, batch, mode)?;
        Ok(g.clamp(raw, 0.0, 1.0))
    }

    /// Build a full decoder input from a visible-subset encoding by placing the
    /// MSK token at every position missing from `visible`.
    pub fn fill_masked(
        &self,
        g: &mut Graph,
        enc: &MaeEncoding,
        visible: &[Vec<usize>],
        mode: Mode,
    ) -> Result<Var> {
        let mode = self.mode(mode);
        let n = self.cfg.tokens();
        let (batch, k) = (enc.batch, enc.per_image);
        let msk = self.msk_token.bind(g, mode.grads);
        let msk = g.reshape(msk, &[1, self.cfg.dim])?;
        let table = g.concat0(&[enc.tokens, msk])?;
        let msk_row = batch * k;
        let mut idx = vec![msk_row; batch * n];
        for (b, set) in visible.iter().enumerate() {
            for (j, &i) in set.iter().enumerate() {
                idx[b * n + i] = b * k + j;
            }
        }
        g.gather_rows(table, &idx)
    }

    /// Full-image autoencoding: encode every token and decode.
    pub fn autoencode(&self, g: &mut Graph, images: Var, mode: Mode) -> Result<Var> {
        let enc = self.encode(g, images, None, mode)?;
        self.decode(g, enc.tokens, enc.batch, mode)
    }

    /// Penultimate-block features arranged as a `[B, dim, grid, grid]` map.
    pub fn feature_map(&self, g: &mut Graph, enc: &MaeEncoding) -> Result<Var> {
        let gs = self.cfg.grid();
        if enc.per_image != gs * gs {
            return Err(Error::invalid("feature_map", "features need the full token grid"));
        }
        let f = g.reshape(enc.features, &[enc.batch, gs, gs, self.cfg.dim])?;
        g.permute(f, &[0, 3, 1, 2])
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

impl Module for TinyMae {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.patch_embed.visit(f);
        for b in &self.enc_blocks {
            b.visit(f);
        }
        self.enc_norm.visit(f);
        f(&self.msk_token);
        for b in &self.dec_blocks {
            b.visit(f);
        }
        self.dec_norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        for b in &mut self.enc_blocks {
            b.visit_mut(f);
        }
        self.enc_norm.visit_mut(f);
        f(&mut self.msk_token);
        for b in &mut self.dec_blocks {
            b.visit_mut(f);
        }
        self.dec_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}
