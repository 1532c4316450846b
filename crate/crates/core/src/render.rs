//! PNG panels: one row of tiles per sample.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compose::{build_with_shifts, sample_shift};
use crate::error::{Error, Result};
use crate::inpaint::InpaintCase;
use crate::nn::{Mode, Segmenter, TinyMae};
use crate::synthdata::save_rgb_png;
use crate::tensor::{Graph, Tensor};
use crate::train::{FeatureCache, MoveConfig};

pub const GAP: usize = 2;
pub const TRAINING_COLUMNS: usize = 6;
pub const INPAINT_COLUMNS: usize = 4;

fn as_rgb(tile: &Tensor) -> Result<Tensor> {
    let s = tile.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    match tile.numel() / (h * w) {
        3 => tile.clone().reshape([3, h, w]),
        1 => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(tile.data());
            }
            Tensor::new([3, h, w], data)
        }
        _ => Err(Error::invalid("render", format!("cannot show a tile of shape {s:?}"))),
    }
}

/// Tiles side by side on a white background with [`GAP`] pixels between them.
pub fn panel_row(tiles: &[Tensor]) -> Result<Tensor> {
    let tiles: Vec<Tensor> = tiles.iter().map(as_rgb).collect::<Result<_>>()?;
    let first = tiles.first().ok_or_else(|| Error::invalid("render", "no tiles"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if let Some(t) = tiles.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape("render tile", t.shape(), first.shape()));
    }
    let k = tiles.len();
    let width = k * w + (k - 1) * GAP;
    let mut out = vec![1.0f32; 3 * h * width];
    for (i, t) in tiles.iter().enumerate() {
        let x0 = i * (w + GAP);
        for c in 0..3 {
            for y in 0..h {
                let src = &t.data()[(c * h + y) * w..(c * h + y + 1) * w];
                out[(c * h + y) * width + x0..(c * h + y) * width + x0 + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new([3, h, width], out)
}

/// Rows `[x | m | b_hat | x_hat_delta | x_hat_zero | x_tilde_delta]` for the
/// first `count` cached images, with shifts drawn from `seed`.
pub fn training_panels(
    mae: &TinyMae,
    seg: &Segmenter,
    cfg: &MoveConfig,
    cache: &FeatureCache,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let idx: Vec<usize> = (0..count.min(cache.len())).collect();
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = cache.batch(&idx)?;
    let size = inputs.images.shape()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts = idx.iter().map(|_| sample_shift(cfg.delta, size, size, &mut rng)).collect();
    let mut g = Graph::new();
    let (cs, _) = build_with_shifts(&mut g, &inputs, seg, mae, &cfg.compose_options(), Mode::EVAL, shifts)?;
    let mut rows = Vec::with_capacity(idx.len());
    for b in 0..idx.len() {
        let tiles = [
            inputs.images.select0(b),
            g.value(cs.m).select0(b),
            g.value(cs.b_hat).select0(b),
            g.value(cs.x_hat_delta).select0(b),
            g.value(cs.x_hat_zero).select0(b),
            g.value(cs.x_tilde_delta).select0(b),
        ];
        rows.push(panel_row(&tiles)?);
    }
    Ok(rows)
}

/// Input with masked patches greyed out.
pub fn masked_input(image: &Tensor, masked: &[usize], patch: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let gw = w / patch;
    let mut out = image.clone();
    let d = out.data_mut();
    for &j in masked {
        let (py, px) = (j / gw, j % gw);
        for c in 0..3 {
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    d[(c * h + y) * w + x] = 0.5;
                }
            }
        }
    }
    out
}

/// Rows `[input | masked input | default | modified]`.
pub fn inpaint_panels(cases: &[InpaintCase], patch: usize) -> Result<Vec<Tensor>> {
    cases
        .iter()
        .map(|c| {
            panel_row(&[
                c.image.clone(),
                masked_input(&c.image, &c.masked, patch),
                c.default.clone(),
                c.modified.clone(),
            ])
        })
        .collect()
}

/// Write panels as `{prefix}_{i:03}.png` into `dir`.
pub fn save_panels(panels: &[Tensor], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(panels.len());
    for (i, p) in panels.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{i:03}.png"));
        save_rgb_png(p, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
