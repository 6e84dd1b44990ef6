//! Threshold-free evaluation metrics: ROC AUC at image and pixel level and
//! the per-region-overlap (PRO) score.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::finch::UnionFind;
use crate::tensor::FeatureTensor;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_PRO_THRESHOLDS: usize = 200;

/// Binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    /// Reads a one-channel tensor whose values are exactly 0 or 1.
    pub fn from_tensor(t: &FeatureTensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::Shape(format!(
                "mask must have one channel, got {}",
                t.channels()
            )));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::Invalid(format!(
                    "mask value {v} at index {i} is not 0 or 1"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(t.height(), t.width(), data)
    }

    pub fn to_tensor(&self) -> FeatureTensor {
        let data = self
            .data
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        FeatureTensor::new(self.height, self.width, 1, data).expect("mask shape is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 8-connected foreground regions as lists of flat pixel indices.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let (h, w) = (self.height, self.width);
        let mut uf = UnionFind::new(h * w);
        for y in 0..h {
            for x in 0..w {
                if !self.data[y * w + x] {
                    continue;
                }
                // forward neighbours: E, SW, S, SE
                let forward = [(0isize, 1isize), (1, -1), (1, 0), (1, 1)];
                for (dy, dx) in forward {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < h as isize && nx >= 0 && nx < w as isize {
                        let j = ny as usize * w + nx as usize;
                        if self.data[j] {
                            uf.union(y * w + x, j);
                        }
                    }
                }
            }
        }
        let mut slot = vec![usize::MAX; h * w];
        let mut regions: Vec<Vec<usize>> = Vec::new();
        for (i, &fg) in self.data.iter().enumerate() {
            if fg {
                let root = uf.find(i);
                if slot[root] == usize::MAX {
                    slot[root] = regions.len();
                    regions.push(Vec::new());
                }
                regions[slot[root]].push(i);
            }
        }
        regions
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut wins = 0f64;
    let mut negatives_below = 0usize;
    let mut start = 0;
    while start < order.len() {
        let value = scores[order[start]];
        let mut end = start;
        let (mut pos, mut neg) = (0usize, 0usize);
        while end < order.len() && scores[order[end]] == value {
            if labels[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        wins += pos as f64 * negatives_below as f64 + 0.5 * pos as f64 * neg as f64;
        negatives_below += neg;
        start = end;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

fn check_pairs(maps: &[&FeatureTensor], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (k, (m, g)) in maps.iter().zip(masks).enumerate() {
        if m.channels() != 1 || m.height() != g.height || m.width() != g.width {
            return Err(Error::Shape(format!(
                "image {k}: map {}x{}x{} vs mask {}x{}",
                m.height(),
                m.width(),
                m.channels(),
                g.height,
                g.width
            )));
        }
    }
    Ok(())
}

/// AUROC over the pooled pixels of all images.
pub fn pixel_auroc(maps: &[&FeatureTensor], masks: &[Mask]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f64))
        .collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.data.iter().copied()).collect();
    auroc(&scores, &labels)
}

/// Outcome of [`pro_score`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProScore {
    pub score: f64,
    /// FPR up to which the curve was integrated; below the requested limit
    /// only when no threshold reached it.
    pub integrated_to: f64,
    pub regions: usize,
}

/// Area under a piecewise-linear curve from FPR 0 to `limit`, divided by the
/// integration length. Points must be ordered by non-decreasing FPR.
pub fn normalized_area(points: &[(f64, f64)], limit: f64) -> (f64, f64) {
    let mut area = 0.0;
    let mut reached = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            reached = limit;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
        reached = x1;
    }
    if reached <= 0.0 {
        return (0.0, 0.0);
    }
    (area / reached, reached)
}

/// Per-region overlap integrated over `[0, fpr_limit]` and normalized.
///
/// Pixels with score `>= t` are predicted anomalous. Thresholds are drawn
/// from quantiles of the normal-pixel scores so that `n_thresholds` operating
/// points cover the integration range evenly; each is paired with the value
/// just above it so the curve keeps the overlap gained before the FPR step.
pub fn pro_score(
    maps: &[&FeatureTensor],
    masks: &[Mask],
    fpr_limit: f64,
    n_thresholds: usize,
) -> Result<ProScore> {
    check_pairs(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Invalid(format!(
            "FPR limit {fpr_limit} outside (0, 1]"
        )));
    }
    if n_thresholds == 0 {
        return Err(Error::Invalid("need at least one threshold".into()));
    }
    let mut regions: Vec<Vec<f32>> = Vec::new();
    let mut negatives: Vec<f32> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let values = map.data();
        for region in mask.regions() {
            let mut s: Vec<f32> = region.iter().map(|&i| values[i]).collect();
            s.sort_unstable_by(|a, b| b.total_cmp(a));
            regions.push(s);
        }
        negatives.extend(
            values
                .iter()
                .zip(&mask.data)
                .filter(|(_, &fg)| !fg)
                .map(|(&v, _)| v),
        );
    }
    if regions.is_empty() {
        return Err(Error::Metric(
            "PRO needs at least one ground-truth region".into(),
        ));
    }
    if negatives.is_empty() {
        return Err(Error::Metric("PRO needs at least one normal pixel".into()));
    }
    negatives.sort_unstable_by(|a, b| b.total_cmp(a));
    let n_neg = negatives.len();

    let mut chosen: Vec<usize> = (1..=n_thresholds)
        .map(|j| {
            let want = (j as f64 * fpr_limit * n_neg as f64 / n_thresholds as f64).ceil() as usize;
            want.clamp(1, n_neg) - 1
        })
        .collect();
    chosen.dedup();
    let mut thresholds = vec![negatives[0].next_up()];
    for &idx in &chosen {
        let v = negatives[idx];
        thresholds.push(v.next_up());
        thresholds.push(v);
    }
    thresholds.dedup();

    let above = |sorted_desc: &[f32], t: f32| sorted_desc.partition_point(|&s| s >= t);
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fpr = above(&negatives, t) as f64 / n_neg as f64;
        let pro = regions
            .iter()
            .map(|r| above(r, t) as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    let (score, reached) = normalized_area(&curve, fpr_limit);
    if reached < fpr_limit {
        log::warn!("PRO curve only reached FPR {reached:.4} < {fpr_limit}; normalized over the achieved range");
    }
    Ok(ProScore {
        score,
        integrated_to: reached,
        regions: regions.len(),
    })
}

/// Evaluation summary for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro_score: f64,
    pub n_images: usize,
    pub n_anomalous_images: usize,
    pub n_pixels: usize,
    pub n_anomalous_pixels: usize,
    pub n_regions: usize,
    pub sigma: f64,
    pub output_size: (usize, usize),
    pub pro_thresholds: usize,
    pub fpr_limit: f64,
    pub pro_integrated_to: f64,
}

impl EvalReport {
    /// Flat `key=value` text, metrics with four decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "category={}", self.category);
        let _ = writeln!(out, "image_auroc={:.4}", self.image_auroc);
        let _ = writeln!(out, "pixel_auroc={:.4}", self.pixel_auroc);
        let _ = writeln!(out, "pro_score={:.4}", self.pro_score);
        let _ = writeln!(out, "n_images={}", self.n_images);
        let _ = writeln!(out, "n_anomalous_images={}", self.n_anomalous_images);
        let _ = writeln!(out, "n_pixels={}", self.n_pixels);
        let _ = writeln!(out, "n_anomalous_pixels={}", self.n_anomalous_pixels);
        let _ = writeln!(out, "n_regions={}", self.n_regions);
        let _ = writeln!(out, "sigma={}", self.sigma);
        let _ = writeln!(out, "gaussian_truncation=3sigma");
        let _ = writeln!(out, "gaussian_border=reflect");
        let _ = writeln!(
            out,
            "output_size={}x{}",
            self.output_size.0, self.output_size.1
        );
        let _ = writeln!(out, "pro_thresholds={}", self.pro_thresholds);
        let _ = writeln!(out, "pro_connectivity=8");
        let _ = writeln!(out, "fpr_limit={}", self.fpr_limit);
        let _ = writeln!(out, "pro_integrated_to={:.4}", self.pro_integrated_to);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
