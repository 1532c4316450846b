//! Procedural scenes with known foreground masks, and their on-disk form.
//!
//! Every scene is a smooth, textured background with one off-statistics
//! foreground shape pasted on top. A sample is fully determined by its seed,
//! which is derived from the dataset seed and the sample index.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Grating,
    Gradient,
    ValueNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub kind: BackgroundKind,
    /// Cycles (grating) or lattice cells (value noise) per image side.
    pub frequency: f32,
    pub phase: f32,
    /// Direction of the grating or gradient, radians.
    pub angle: f32,
    pub palette: [[f32; 3]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundSpec {
    pub shape: ShapeKind,
    /// Center in pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub center: [f32; 2],
    /// Half extents along the shape's own axes.
    pub radii: [f32; 2],
    pub rotation: f32,
    pub color: [f32; 3],
    pub texture_period: f32,
    pub texture_angle: f32,
    pub texture_amplitude: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: BackgroundSpec,
    pub foreground: ForegroundSpec,
    pub seed: u64,
}

/// A scene image `[3, H, W]` in [0, 1] and its binary mask `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub spec: Option<SceneSpec>,
}

impl Sample {
    pub fn coverage(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }
}

/// Foreground placement limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub min_area: f64,
    pub max_area: f64,
    pub margin: usize,
    pub min_contrast: f32,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            min_area: 0.08,
            max_area: 0.35,
            margin: 2,
            min_contrast: 0.25,
        }
    }
}

/// SplitMix64 finalizer of `seed` and `index`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Draw a background description.
pub fn sample_background(rng: &mut impl Rng, kind: BackgroundKind) -> BackgroundSpec {
    let c0 = [0; 3].map(|_: i32| rng.gen_range(0.15..0.85f32));
    let mut c1 = [0; 3].map(|_: i32| rng.gen_range(0.15..0.85f32));
    for _ in 0..64 {
        let diff: f32 = c0.iter().zip(&c1).map(|(a, b)| (a - b).abs()).sum();
        if diff >= 0.45 {
            break;
        }
        c1 = [0; 3].map(|_: i32| rng.gen_range(0.15..0.85f32));
    }
    let frequency = match kind {
        BackgroundKind::Grating => rng.gen_range(1.0..4.0),
        BackgroundKind::Gradient => 1.0,
        BackgroundKind::ValueNoise => rng.gen_range(2..=4) as f32,
    };
    BackgroundSpec {
        kind,
        frequency,
        phase: rng.gen_range(0.0..2.0 * PI),
        angle: rng.gen_range(0.0..2.0 * PI),
        palette: [c0, c1],
    }
}

/// Render a background `[3, size, size]`; values are clamped to [0.1, 0.9].
pub fn render_background(spec: &BackgroundSpec, size: usize, seed: u64) -> Tensor {
    let s = size as f32;
    let (ca, sa) = (spec.angle.cos(), spec.angle.sin());
    let lattice: Vec<f32> = if spec.kind == BackgroundKind::ValueNoise {
        let k = spec.frequency as usize + 1;
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        (0..k * k).map(|_| r.gen_range(0.0..1.0)).collect()
    } else {
        Vec::new()
    };
    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
            let t = match spec.kind {
                BackgroundKind::Grating => {
                    let proj = u * ca + v * sa;
                    0.5 + 0.5 * (2.0 * PI * spec.frequency * proj + spec.phase).sin()
                }
                BackgroundKind::Gradient => {
                    let proj = (u - 0.5) * ca + (v - 0.5) * sa;
                    (proj / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0)
                }
                BackgroundKind::ValueNoise => {
                    let cells = spec.frequency;
                    let k = cells as usize + 1;
                    let (gx, gy) = (u * cells, v * cells);
                    let (ix, iy) = ((gx as usize).min(k - 2), (gy as usize).min(k - 2));
                    let (fx, fy) = (smoothstep(gx - ix as f32), smoothstep(gy - iy as f32));
                    let at = |i: usize, j: usize| lattice[j * k + i];
                    let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
                    let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            };
            for c in 0..3 {
                let [c0, c1] = spec.palette;
                let val = c0[c] + (c1[c] - c0[c]) * t;
                out[(c * size + y) * size + x] = val.clamp(0.1, 0.9);
            }
        }
    }
    Tensor::new([3, size, size], out).expect("consistent shape")
}

/// Draw a random background of a random kind.
pub fn gen_background(rng: &mut impl Rng, size: usize) -> (BackgroundSpec, Tensor) {
    let kind = match rng.gen_range(0..3) {
        0 => BackgroundKind::Grating,
        1 => BackgroundKind::Gradient,
        _ => BackgroundKind::ValueNoise,
    };
    let spec = sample_background(rng, kind);
    let seed = rng.gen();
    let img = render_background(&spec, size, seed);
    (spec, img)
}

fn inside(spec: &ForegroundSpec, px: f32, py: f32) -> bool {
    let (dx, dy) = (px - spec.center[0], py - spec.center[1]);
    let (c, s) = (spec.rotation.cos(), spec.rotation.sin());
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    let [rx, ry] = spec.radii;
    match spec.shape {
        ShapeKind::Ellipse => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
        ShapeKind::Rectangle => u.abs() <= rx && v.abs() <= ry,
        ShapeKind::Triangle => {
            let a = (0.0, -ry);
            let b = (rx, ry);
            let d = (-rx, ry);
            let cross = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
            let (e0, e1, e2) = (cross(a, b), cross(b, d), cross(d, a));
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

/// Rasterize the shape at pixel centers into a binary `[size, size]` mask.
pub fn rasterize(spec: &ForegroundSpec, size: usize) -> Tensor {
    Tensor::from_fn([size, size], |i| {
        let (y, x) = (i / size, i % size);
        if inside(spec, x as f32 + 0.5, y as f32 + 0.5) {
            1.0
        } else {
            0.0
        }
    })
}

/// Textured fill `[3, size, size]` of the foreground colour.
pub fn render_fill(spec: &ForegroundSpec, size: usize) -> Tensor {
    let (c, s) = (spec.texture_angle.cos(), spec.texture_angle.sin());
    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let proj = (x as f32 + 0.5) * c + (y as f32 + 0.5) * s;
            let wave = spec.texture_amplitude * (2.0 * PI * proj / spec.texture_period).sin();
            for ch in 0..3 {
                out[(ch * size + y) * size + x] = (spec.color[ch] + wave).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], out).expect("consistent shape")
}

fn bbox(mask: &Tensor, size: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 0.5 {
            let (y, x) = (i / size, i % size);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    b
}

/// Draw a foreground whose area fraction and margin satisfy `params` and whose
/// colour differs in luminance from `bg_luma` by at least `params.min_contrast`.
pub fn gen_foreground(
    rng: &mut impl Rng,
    size: usize,
    bg_luma: f32,
    params: &GeneratorParams,
) -> Result<(ForegroundSpec, Tensor, Tensor)> {
    let s = size as f32;
    let m = params.margin;
    for _ in 0..1000 {
        let shape = match rng.gen_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let area = rng.gen_range(params.min_area + 0.01..params.max_area - 0.03) as f32 * s * s;
        let aspect: f32 = rng.gen_range(0.6..1.6);
        let unit = match shape {
            ShapeKind::Ellipse => PI,
            ShapeKind::Rectangle => 4.0,
            ShapeKind::Triangle => 2.0,
        };
        let rx = (area * aspect / unit).sqrt();
        let ry = (area / (aspect * unit)).sqrt();
        let reach = rx.max(ry) * if shape == ShapeKind::Rectangle { 1.42 } else { 1.0 };
        let lo = m as f32 + reach;
        let hi = s - m as f32 - reach;
        if lo >= hi {
            continue;
        }
        let center = [
            rng.gen_range(lo..hi).floor() + 0.5,
            rng.gen_range(lo..hi).floor() + 0.5,
        ];
        let rotation = if rng.gen_bool(0.25) {
            0.0
        } else {
            rng.gen_range(0.0..PI)
        };
        let mut color = [0.0f32; 3];
        for _ in 0..64 {
            color = [0; 3].map(|_: i32| rng.gen_range(0.0..1.0f32));
            if (luma(color) - bg_luma).abs() >= params.min_contrast {
                break;
            }
        }
        if (luma(color) - bg_luma).abs() < params.min_contrast {
            let target = if bg_luma < 0.5 { 0.95 } else { 0.05 };
            color = color.map(|c| 0.3 * c + 0.7 * target);
        }
        let spec = ForegroundSpec {
            shape,
            center,
            radii: [rx, ry],
            rotation,
            color,
            texture_period: rng.gen_range(3.0..6.0),
            texture_angle: rng.gen_range(0.0..PI),
            texture_amplitude: rng.gen_range(0.04..0.1),
        };
        let mask = rasterize(&spec, size);
        let frac = mask.data().iter().sum::<f32>() as f64 / (size * size) as f64;
        let Some((x0, y0, x1, y1)) = bbox(&mask, size) else {
            continue;
        };
        let fits = x0 >= m && y0 >= m && x1 + m < size && y1 + m < size;
        if fits && frac >= params.min_area && frac <= params.max_area {
            let fill = render_fill(&spec, size);
            return Ok((spec, mask, fill));
        }
    }
    Err(Error::invalid(
        "gen_foreground",
        format!("no foreground fits a {size}x{size} image with {params:?}"),
    ))
}

/// `fill * mask + bg * (1 - mask)` with the mask as ground truth.
pub fn compose_scene(bg: &Tensor, mask: &Tensor, fill: &Tensor) -> Result<Sample> {
    let [c, h, w] = <[usize; 3]>::try_from(bg.shape())
        .map_err(|_| Error::invalid("compose_scene", format!("expected [3, H, W], got {:?}", bg.shape())))?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("compose_scene mask", mask.shape(), &[h, w]));
    }
    if fill.shape() != bg.shape() {
        return Err(Error::shape("compose_scene fill", fill.shape(), bg.shape()));
    }
    let plane = h * w;
    let mut out = bg.data().to_vec();
    for ch in 0..c {
        for p in 0..plane {
            if mask.data()[p] > 0.5 {
                out[ch * plane + p] = fill.data()[ch * plane + p];
            }
        }
    }
    Ok(Sample {
        image: Tensor::new([c, h, w], out)?,
        mask: mask.clone(),
        spec: None,
    })
}

/// Generate the scene for one seed.
pub fn gen_scene(seed: u64, size: usize, params: &GeneratorParams) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bg_spec, bg) = gen_background(&mut rng, size);
    let plane = size * size;
    let mean: Vec<f32> = (0..3)
        .map(|c| bg.data()[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect();
    let bg_luma = luma([mean[0], mean[1], mean[2]]);
    let (fg_spec, mask, fill) = gen_foreground(&mut rng, size, bg_luma, params)?;
    let mut sample = compose_scene(&bg, &mask, &fill)?;
    sample.spec = Some(SceneSpec {
        background: bg_spec,
        foreground: fg_spec,
        seed,
    });
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator: Option<GeneratorParams>,
    pub entries: Vec<ManifestEntry>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `[3, H, W]` as an 8-bit RGB PNG.
pub fn save_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = <[usize; 3]>::try_from(image.shape()).unwrap_or([0, 0, 0]) else {
        return Err(Error::invalid("save_rgb_png", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let plane = h * w;
    let d = image.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p])])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a `[H, W]` map in [0, 1] as an 8-bit grayscale PNG.
pub fn save_gray_png(map: &Tensor, path: &Path) -> Result<()> {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if map.numel() != h * w {
        return Err(Error::invalid("save_gray_png", format!("expected one plane, got {s:?}")));
    }
    let d = map.data();
    let img: GrayImage =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])]));
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read an RGB PNG into `[3, H, W]` in [0, 1].
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], out)
}

/// Read a grayscale PNG into `[H, W]` in [0, 1].
pub fn load_gray_png(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new([h, w], img.pixels().map(|p| p[0] as f32 / 255.0).collect())
}

/// Read a mask PNG, thresholding at 128.
pub fn load_mask_png(path: &Path) -> Result<Tensor> {
    Ok(load_gray_png(path)?.map(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generate `n` scenes into `out_dir` with `images/`, `masks/` and a manifest.
pub fn gen_dataset(
    n: usize,
    seed: u64,
    size: usize,
    params: &GeneratorParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("gen_dataset", "need at least one sample"));
    }
    create_dir(&out_dir.join("images"))?;
    create_dir(&out_dir.join("masks"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample_seed(seed, i as u64);
        let sample = gen_scene(s, size, params)?;
        let entry = ManifestEntry {
            image: format!("images/{i:05}.png"),
            mask: format!("masks/{i:05}.png"),
            seed: Some(s),
        };
        save_rgb_png(&sample.image, &out_dir.join(&entry.image))?;
        save_gray_png(&sample.mask, &out_dir.join(&entry.mask))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        count: n,
        size,
        seed: Some(seed),
        generator: Some(params.clone()),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Accept either a manifest file or a directory containing one.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "manifest",
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format {
            what: "manifest",
            path,
            msg: format!("version {} is not supported (expected {MANIFEST_VERSION})", m.version),
        });
    }
    if m.count != m.entries.len() {
        return Err(Error::Format {
            what: "manifest",
            path,
            msg: format!("count {} but {} entries", m.count, m.entries.len()),
        });
    }
    Ok(m)
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images stacked as `[B, 3, H, W]` for the given indices.
    pub fn image_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = idx.iter().map(|&i| self.samples[i].image.clone()).collect();
        Tensor::stack(&items)
    }

    /// Masks stacked as `[B, 1, H, W]`.
    pub fn mask_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = idx.iter().map(|&i| self.samples[i].mask.clone()).collect();
        let s = Tensor::stack(&items)?;
        let shape = s.shape().to_vec();
        s.reshape([shape[0], 1, shape[1], shape[2]])
    }
}

/// Load every image and mask listed in a manifest, optionally only the first `limit`.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let take = limit.unwrap_or(manifest.count).min(manifest.count);
    let mut samples = Vec::with_capacity(take);
    for e in &manifest.entries[..take] {
        let ipath = root.join(&e.image);
        let image = load_rgb_png(&ipath)?;
        let mask = load_mask_png(&root.join(&e.mask))?;
        let size = manifest.size;
        if image.shape() != [3, size, size] || mask.shape() != [size, size] {
            return Err(Error::Format {
                what: "dataset sample",
                path: ipath,
                msg: format!(
                    "expected {size}x{size}, got image {:?} and mask {:?}",
                    image.shape(),
                    mask.shape()
                ),
            });
        }
        samples.push(Sample {
            image,
            mask,
            spec: None,
        });
    }
    Ok(Dataset {
        root,
        manifest,
        samples,
    })
}

/// Hex SHA-256 over the manifest and every listed file, in manifest order.
pub fn dataset_checksum(path: &Path) -> Result<String> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut h = Sha256::new();
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    h.update(read(&mpath)?);
    for e in &manifest.entries {
        h.update(read(&root.join(&e.image))?);
        h.update(read(&root.join(&e.mask))?);
    }
    Ok(format!("{:x}", h.finalize()))
}
