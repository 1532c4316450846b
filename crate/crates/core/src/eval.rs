//! Segmentation and single-object discovery metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds swept by [`max_f_beta`]: `i / 255` for `i = 0..=255`.
pub const FBETA_LEVELS: usize = 256;

/// How per-threshold scores are aggregated over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FBetaAveraging {
    /// F computed per image, then averaged.
    #[default]
    PerImage,
    /// Precision and recall averaged over images, then combined.
    MeanPrecisionRecall,
    /// Pixel counts pooled over the whole dataset.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f32,
    pub beta_sq: f64,
    pub averaging: FBetaAveraging,
    pub connectivity: Connectivity,
    pub min_area_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            beta_sq: 0.09,
            averaging: FBetaAveraging::PerImage,
            connectivity: Connectivity::Eight,
            min_area_frac: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

fn plane_dims(m: &Tensor) -> Result<(usize, usize)> {
    let s = m.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::invalid("eval", format!("expected a single [H, W] plane, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.numel() != b.numel() || plane_dims(a)? != plane_dims(b)? {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// 1 where `m >= t`, else 0.
pub fn binarize(m: &Tensor, t: f32) -> Tensor {
    m.map(|v| if v >= t { 1.0 } else { 0.0 })
}

pub fn pixel_accuracy(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("pixel_accuracy", pred, gt)?;
    let hits = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(p, g)| (**p > 0.5) == (**g > 0.5))
        .count();
    Ok(hits as f64 / pred.numel() as f64)
}

/// Intersection over union; 1 when both are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("iou", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p > 0.5, *g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FBetaScore {
    pub score: f64,
    pub threshold: f64,
}

/// Per-level counts of true and predicted positives at or above each threshold,
/// plus the number of ground-truth positives.
fn level_counts(pred: &[f32], gt: &[f32]) -> (Vec<u64>, Vec<u64>, u64) {
    let thresholds: Vec<f32> = (0..FBETA_LEVELS).map(|i| (i as f64 / 255.0) as f32).collect();
    let mut pos_hist = vec![0u64; FBETA_LEVELS];
    let mut all_hist = vec![0u64; FBETA_LEVELS];
    let mut gt_pos = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let positive = g > 0.5;
        gt_pos += positive as u64;
        let passed = thresholds.partition_point(|&t| t <= p);
        if passed > 0 {
            all_hist[passed - 1] += 1;
            pos_hist[passed - 1] += positive as u64;
        }
    }
    for i in (0..FBETA_LEVELS - 1).rev() {
        pos_hist[i] += pos_hist[i + 1];
        all_hist[i] += all_hist[i + 1];
    }
    (pos_hist, all_hist, gt_pos)
}

fn precision_recall(tp: u64, predicted: u64, gt_pos: u64) -> (f64, f64) {
    let precision = if predicted == 0 {
        if gt_pos == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if gt_pos == 0 { 1.0 } else { tp as f64 / gt_pos as f64 };
    (precision, recall)
}

/// Best F-beta over the thresholds `i / 255`, with the threshold attaining it.
pub fn max_f_beta(
    preds: &[Tensor],
    gts: &[Tensor],
    beta_sq: f64,
    averaging: FBetaAveraging,
) -> Result<FBetaScore> {
    if preds.is_empty() {
        return Err(Error::invalid("max_f_beta", "empty dataset"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "max_f_beta",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let mut counts = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        check_pair("max_f_beta", p, g)?;
        counts.push(level_counts(p.data(), g.data()));
    }
    let n = preds.len() as f64;
    let mut best = FBetaScore {
        score: f64::NEG_INFINITY,
        threshold: 0.0,
    };
    for level in 0..FBETA_LEVELS {
        let score = match averaging {
            FBetaAveraging::PerImage => {
                counts
                    .iter()
                    .map(|(tp, pp, gp)| {
                        let (p, r) = precision_recall(tp[level], pp[level], *gp);
                        f_beta(p, r, beta_sq)
                    })
                    .sum::<f64>()
                    / n
            }
            FBetaAveraging::MeanPrecisionRecall => {
                let (mut ps, mut rs) = (0.0, 0.0);
                for (tp, pp, gp) in &counts {
                    let (p, r) = precision_recall(tp[level], pp[level], *gp);
                    ps += p;
                    rs += r;
                }
                f_beta(ps / n, rs / n, beta_sq)
            }
            FBetaAveraging::Pooled => {
                let tp = counts.iter().map(|c| c.0[level]).sum();
                let pp = counts.iter().map(|c| c.1[level]).sum();
                let gp = counts.iter().map(|c| c.2).sum();
                let (p, r) = precision_recall(tp, pp, gp);
                f_beta(p, r, beta_sq)
            }
        };
        if score > best.score {
            best = FBetaScore {
                score,
                threshold: level as f64 / 255.0,
            };
        }
    }
    Ok(best)
}

/// Labels `1..=count` in first-encountered row-major order; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// Pixel count of component `k + 1` at index `k`.
    pub sizes: Vec<usize>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling of a binary mask.
pub fn connected_components(mask: &Tensor, connectivity: Connectivity) -> Result<ComponentLabeling> {
    let (h, w) = plane_dims(mask)?;
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(
            "connected_components",
            format!("mask must be binary, found {v}"),
        ));
    }
    let on = |y: usize, x: usize| mask.data()[y * w + x] == 1.0;
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            let mut push = |v: u32| {
                if v != 0 {
                    neighbours[k] = v;
                    k += 1;
                }
            };
            if x > 0 {
                push(provisional[y * w + x - 1]);
            }
            if y > 0 {
                push(provisional[(y - 1) * w + x]);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        push(provisional[(y - 1) * w + x - 1]);
                    }
                    if x + 1 < w {
                        push(provisional[(y - 1) * w + x + 1]);
                    }
                }
            }
            let label = if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neighbours[0];
                for &n in &neighbours[1..k] {
                    union(&mut parent, first, n);
                }
                first
            };
            provisional[y * w + x] = label;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    for (i, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        let l = remap[root];
        labels[i] = l;
        sizes[l as usize - 1] += 1;
    }
    Ok(ComponentLabeling {
        height: h,
        width: w,
        labels,
        count: sizes.len(),
        sizes,
    })
}

/// Tight boxes of components covering at least `min_area_frac` of the image,
/// largest first.
pub fn components_to_boxes(labeling: &ComponentLabeling, min_area_frac: f64) -> Vec<BBox> {
    let w = labeling.width;
    let mut boxes: Vec<Option<BBox>> = vec![None; labeling.count];
    for (i, &l) in labeling.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (y, x) = (i / w, i % w);
        let b = &mut boxes[l as usize - 1];
        *b = Some(match *b {
            None => BBox { x0: x, y0: y, x1: x, y1: y },
            Some(b) => BBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            },
        });
    }
    let total = (labeling.height * labeling.width) as f64;
    let mut kept: Vec<(usize, BBox)> = boxes
        .into_iter()
        .zip(&labeling.sizes)
        .filter_map(|(b, &size)| b.map(|b| (size, b)))
        .filter(|(size, _)| *size as f64 / total >= min_area_frac)
        .collect();
    kept.sort_by(|a, b| b.0.cmp(&a.0));
    kept.into_iter().map(|(_, b)| b).collect()
}

/// Area IoU of inclusive boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (x0, y0) = (a.x0.max(b.x0), a.y0.max(b.y0));
    let (x1, y1) = (a.x1.min(b.x1), a.y1.min(b.y1));
    if x0 > x1 || y0 > y1 {
        return 0.0;
    }
    let inter = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

/// Largest surviving component box of a soft mask.
pub fn predicted_box(pred: &Tensor, cfg: &EvalConfig) -> Result<Option<BBox>> {
    let labeling = connected_components(&binarize(pred, cfg.threshold), cfg.connectivity)?;
    Ok(components_to_boxes(&labeling, cfg.min_area_frac).into_iter().next())
}

/// Whether the predicted box overlaps any ground-truth box with IoU above 0.5.
pub fn corloc_hit(pred: &Tensor, gt_boxes: &[BBox], cfg: &EvalConfig) -> Result<bool> {
    if gt_boxes.is_empty() {
        return Err(Error::invalid("corloc", "image has no ground-truth box"));
    }
    Ok(match predicted_box(pred, cfg)? {
        Some(b) => gt_boxes.iter().any(|g| box_iou(&b, g) > 0.5),
        None => false,
    })
}

/// Fraction of images whose predicted box localizes an object.
pub fn corloc(preds: &[Tensor], gt_boxes: &[Vec<BBox>], cfg: &EvalConfig) -> Result<f64> {
    if preds.len() != gt_boxes.len() {
        return Err(Error::invalid(
            "corloc",
            format!("{} predictions for {} box lists", preds.len(), gt_boxes.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid("corloc", "empty dataset"));
    }
    let mut hits = 0;
    for (p, g) in preds.iter().zip(gt_boxes) {
        hits += corloc_hit(p, g, cfg)? as usize;
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Boxes of every connected object in a ground-truth mask.
pub fn gt_boxes(gt: &Tensor, connectivity: Connectivity) -> Result<Vec<BBox>> {
    Ok(components_to_boxes(&connected_components(&binarize(gt, 0.5), connectivity)?, 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub acc: f64,
    pub iou: f64,
    pub coverage: f64,
    pub corloc_hit: bool,
    pub predicted_box: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub mean_coverage: f64,
    pub max_f_beta: f64,
    pub max_f_beta_threshold: f64,
    pub corloc: f64,
    pub config: EvalConfig,
    pub per_image: Vec<ImageMetrics>,
}

/// Score soft predictions `[H, W]` against binary ground truth `[H, W]`.
pub fn evaluate(preds: &[Tensor], gts: &[Tensor], cfg: &EvalConfig) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let fb = max_f_beta(preds, gts, cfg.beta_sq, cfg.averaging)?;
    let mut per_image = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let bin = binarize(p, cfg.threshold);
        let gbin = binarize(g, 0.5);
        let boxes = gt_boxes(&gbin, cfg.connectivity)?;
        let predicted_box = predicted_box(p, cfg)?;
        let corloc_hit = match predicted_box {
            Some(b) => boxes.iter().any(|g| box_iou(&b, g) > 0.5),
            None => false,
        };
        per_image.push(ImageMetrics {
            acc: pixel_accuracy(&bin, &gbin)?,
            iou: iou(&bin, &gbin)?,
            coverage: bin.data().iter().map(|&v| v as f64).sum::<f64>() / bin.numel() as f64,
            corloc_hit,
            predicted_box,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        images: per_image.len(),
        mean_acc: mean(|m| m.acc),
        mean_iou: mean(|m| m.iou),
        mean_coverage: mean(|m| m.coverage),
        max_f_beta: fb.score,
        max_f_beta_threshold: fb.threshold,
        corloc: mean(|m| m.corloc_hit as u8 as f64),
        config: cfg.clone(),
        per_image,
    })
}

impl MetricsReport {
    /// `key = value` summary lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "threshold = {}", c.threshold);
        let _ = writeln!(s, "acc = {:.4}", self.mean_acc);
        let _ = writeln!(s, "iou = {:.4}", self.mean_iou);
        let _ = writeln!(s, "coverage = {:.4}", self.mean_coverage);
        let _ = writeln!(s, "max_f_beta = {:.4}", self.max_f_beta);
        let _ = writeln!(s, "max_f_beta_threshold = {:.4}", self.max_f_beta_threshold);
        let _ = writeln!(s, "beta_sq = {}", c.beta_sq);
        let _ = writeln!(s, "f_beta_averaging = {:?}", c.averaging);
        let _ = writeln!(s, "corloc = {:.4}", self.corloc);
        s
    }

    /// One CSV row per image.
    pub fn per_image_csv(&self, names: &[String]) -> String {
        let mut s = String::from("image,acc,iou,coverage,corloc_hit,x0,y0,x1,y1\n");
        for (i, m) in self.per_image.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let b = m
                .predicted_box
                .map(|b| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
                .unwrap_or_else(|| ",,,".into());
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},{},{b}",
                m.acc, m.iou, m.coverage, m.corloc_hit as u8
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, VecDeque};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros([h, w]);
        for &(y, x) in on {
            t.data_mut()[y * w + x] = 1.0;
        }
        t
    }

    #[test]
    fn binarize_examples() {
        assert!(binarize(&Tensor::full([4, 4], 0.5), 0.5).data().iter().all(|&v| v == 1.0));
        let b = grid(3, 3, &[(0, 0), (2, 1)]);
        assert_eq!(binarize(&b, 0.5), b);
        assert!(binarize(&Tensor::zeros([2, 2]), 0.0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn accuracy_and_iou_examples() {
        let gt = Tensor::from_fn([8, 8], |i| if i < 16 { 1.0 } else { 0.0 });
        let inv = gt.map(|v| 1.0 - v);
        assert_eq!(pixel_accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&inv, &gt).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&Tensor::zeros([8, 8]), &gt).unwrap(), 0.75);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(iou(&inv, &gt).unwrap(), 0.0);
        let left = Tensor::from_fn([8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 });
        assert_eq!(iou(&left, &Tensor::ones([8, 8])).unwrap(), 0.5);
        assert_eq!(iou(&Tensor::zeros([2, 2]), &Tensor::zeros([2, 2])).unwrap(), 1.0);
        assert!(iou(&gt, &Tensor::zeros([4, 4])).is_err());
    }

    #[test]
    fn f_beta_formula() {
        let f = f_beta(0.25, 1.0, 0.09);
        assert!((f - 1.09 * 0.25 / (0.09 * 0.25 + 1.0)).abs() < 1e-12);
        assert!((f - 0.2665).abs() < 1e-4);
        for r in [0.1, 0.5, 0.9] {
            assert!((f_beta(r, r, 0.09) - r).abs() < 1e-12);
            assert!((f_beta(r, r, 0.3) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn max_f_beta_perfect_and_empty() {
        let gt = grid(8, 8, &[(1, 1), (1, 2), (2, 2)]);
        for avg in [FBetaAveraging::PerImage, FBetaAveraging::MeanPrecisionRecall, FBetaAveraging::Pooled] {
            let s = max_f_beta(&[gt.clone()], &[gt.clone()], 0.09, avg).unwrap();
            assert_eq!(s.score, 1.0);
            assert!(s.threshold > 0.0);
        }
        assert!(max_f_beta(&[], &[], 0.09, FBetaAveraging::PerImage).is_err());
    }

    fn brute_f_beta(preds: &[Tensor], gts: &[Tensor], beta_sq: f64) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..256 {
            let t = (i as f64 / 255.0) as f32;
            let mut acc = 0.0;
            for (p, g) in preds.iter().zip(gts) {
                let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
                for (&a, &b) in p.data().iter().zip(g.data()) {
                    let pa = a >= t;
                    tp += (pa && b > 0.5) as u8 as f64;
                    pp += pa as u8 as f64;
                    gp += (b > 0.5) as u8 as f64;
                }
                let prec = if pp == 0.0 { if gp == 0.0 { 1.0 } else { 0.0 } } else { tp / pp };
                let rec = if gp == 0.0 { 1.0 } else { tp / gp };
                let d = beta_sq * prec + rec;
                acc += if d == 0.0 { 0.0 } else { (1.0 + beta_sq) * prec * rec / d };
            }
            let s = acc / preds.len() as f64;
            if s > best.0 {
                best = (s, i as f64 / 255.0);
            }
        }
        best
    }

    #[test]
    fn max_f_beta_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let preds: Vec<Tensor> = (0..3)
                .map(|_| Tensor::from_fn([10, 10], |_| (rng.gen_range(0..256) as f32) / 255.0))
                .collect();
            let gts: Vec<Tensor> = (0..3)
                .map(|_| Tensor::from_fn([10, 10], |_| rng.gen_bool(0.3) as u8 as f32))
                .collect();
            let s = max_f_beta(&preds, &gts, 0.09, FBetaAveraging::PerImage).unwrap();
            let (score, t) = brute_f_beta(&preds, &gts, 0.09);
            assert!((s.score - score).abs() < 1e-12);
            assert_eq!(s.threshold, t);
        }
    }

    fn bfs_components(mask: &Tensor, conn: Connectivity) -> BTreeSet<BTreeSet<usize>> {
        let (h, w) = plane_dims(mask).unwrap();
        let mut seen = vec![false; h * w];
        let mut out = BTreeSet::new();
        let offsets: Vec<(i64, i64)> = match conn {
            Connectivity::Four => vec![(0, 1), (1, 0), (0, -1), (-1, 0)],
            Connectivity::Eight => (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
                .filter(|&d| d != (0, 0))
                .collect(),
        };
        for s in 0..h * w {
            if seen[s] || mask.data()[s] != 1.0 {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut q = VecDeque::from([s]);
            seen[s] = true;
            while let Some(p) = q.pop_front() {
                comp.insert(p);
                let (y, x) = ((p / w) as i64, (p % w) as i64);
                for (dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if !seen[n] && mask.data()[n] == 1.0 {
                        seen[n] = true;
                        q.push_back(n);
                    }
                }
            }
            out.insert(comp);
        }
        out
    }

    fn label_sets(l: &ComponentLabeling) -> BTreeSet<BTreeSet<usize>> {
        (1..=l.count as u32)
            .map(|k| l.labels.iter().enumerate().filter(|(_, &v)| v == k).map(|(i, _)| i).collect())
            .collect()
    }

    #[test]
    fn components_examples() {
        let diag = grid(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&diag, Connectivity::Eight).unwrap().count, 1);
        assert_eq!(connected_components(&diag, Connectivity::Four).unwrap().count, 2);
        assert_eq!(connected_components(&Tensor::zeros([5, 5]), Connectivity::Eight).unwrap().count, 0);
        assert!(connected_components(&Tensor::full([2, 2], 0.3), Connectivity::Eight).is_err());
    }

    #[test]
    fn components_match_bfs_oracle() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let density = rng.gen_range(0.2..0.7);
            let m = Tensor::from_fn([32, 32], |_| rng.gen_bool(density) as u8 as f32);
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let l = connected_components(&m, conn).unwrap();
                assert_eq!(label_sets(&l), bfs_components(&m, conn), "seed {seed}");
                let mut first_seen = Vec::new();
                for &v in &l.labels {
                    if v != 0 && !first_seen.contains(&v) {
                        first_seen.push(v);
                    }
                }
                assert_eq!(first_seen, (1..=l.count as u32).collect::<Vec<_>>());
                for (k, &size) in l.sizes.iter().enumerate() {
                    assert_eq!(l.labels.iter().filter(|&&v| v == k as u32 + 1).count(), size);
                }
            }
        }
    }

    #[test]
    fn box_examples() {
        let mut on = Vec::new();
        for y in 5..15 {
            for x in 5..15 {
                on.push((y, x));
            }
        }
        on.extend([(40, 40), (40, 41), (41, 40), (41, 41), (42, 40), (42, 41)]);
        let l = connected_components(&grid(64, 64, &on), Connectivity::Eight).unwrap();
        let boxes = components_to_boxes(&l, 0.01);
        assert_eq!(boxes, vec![BBox { x0: 5, y0: 5, x1: 14, y1: 14 }]);
        assert_eq!(components_to_boxes(&l, 0.0).len(), 2);
        let empty = connected_components(&Tensor::zeros([8, 8]), Connectivity::Eight).unwrap();
        assert!(components_to_boxes(&empty, 0.01).is_empty());

        let a = BBox { x0: 0, y0: 0, x1: 9, y1: 9 };
        let b = BBox { x0: 5, y0: 5, x1: 14, y1: 14 };
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox { x0: 10, y0: 0, x1: 12, y1: 3 }), 0.0);
        assert!((box_iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn corloc_examples() {
        let cfg = EvalConfig::default();
        let mut on = Vec::new();
        for y in 0..10 {
            for x in 0..10 {
                on.push((y, x));
            }
        }
        let gt = grid(32, 32, &on);
        let boxes = gt_boxes(&gt, Connectivity::Eight).unwrap();
        assert!(corloc_hit(&gt, &boxes, &cfg).unwrap());
        assert!(!corloc_hit(&Tensor::zeros([32, 32]), &boxes, &cfg).unwrap());
        let shifted: Vec<(usize, usize)> = on.iter().map(|&(y, x)| (y + 5, x + 5)).collect();
        assert!(!corloc_hit(&grid(32, 32, &shifted), &boxes, &cfg).unwrap());
        assert!(corloc_hit(&gt, &[], &cfg).is_err());
        assert_eq!(corloc(&[gt.clone(), Tensor::zeros([32, 32])], &[boxes.clone(), boxes], &cfg).unwrap(), 0.5);
    }

    #[test]
    fn report_aggregates() {
        let gt = grid(16, 16, &[(3, 3), (3, 4), (4, 3), (4, 4)]);
        let r = evaluate(&[gt.clone(), gt.clone()], &[gt.clone(), gt], &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_acc, 1.0);
        assert_eq!(r.max_f_beta, 1.0);
        assert!(r.to_text().contains("iou = 1.0000"));
        assert_eq!(r.per_image_csv(&[]).lines().count(), 3);
    }

    proptest! {
        #[test]
        fn max_f_beta_is_invariant_to_monotone_rescaling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels: Vec<u32> = (0..64).map(|_| rng.gen_range(0..128)).collect();
            let gt = Tensor::from_fn([8, 8], |_| rng.gen_bool(0.4) as u8 as f32);
            let a = Tensor::new([8, 8], levels.iter().map(|&l| l as f32 / 255.0).collect()).unwrap();
            let b = Tensor::new([8, 8], levels.iter().map(|&l| (2 * l) as f32 / 255.0).collect()).unwrap();
            let sa = max_f_beta(&[a], &[gt.clone()], 0.09, FBetaAveraging::PerImage).unwrap();
            let sb = max_f_beta(&[b], &[gt], 0.09, FBetaAveraging::PerImage).unwrap();
            prop_assert!((sa.score - sb.score).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn([6, 7], |_| rng.gen_bool(0.5) as u8 as f32);
            let b = Tensor::from_fn([6, 7], |_| rng.gen_bool(0.5) as u8 as f32);
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(pixel_accuracy(&a, &b).unwrap(), pixel_accuracy(&b, &a).unwrap());
        }

        #[test]
        fn corloc_ignores_sub_threshold_changes(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = EvalConfig::default();
            let mut on = Vec::new();
            let (y0, x0) = (rng.gen_range(0..10), rng.gen_range(0..10));
            for y in y0..y0 + 8 {
                for x in x0..x0 + 6 {
                    on.push((y, x));
                }
            }
            let gt = grid(24, 24, &on);
            let boxes = gt_boxes(&gt, Connectivity::Eight).unwrap();
            let noisy = gt.map(|v| if v == 1.0 { 0.9 } else { 0.0 });
            let mut noisy2 = noisy.clone();
            for v in noisy2.data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(0.0..0.49);
                }
            }
            prop_assert_eq!(corloc_hit(&noisy, &boxes, &cfg).unwrap(), corloc_hit(&noisy2, &boxes, &cfg).unwrap());
        }
    }
}
