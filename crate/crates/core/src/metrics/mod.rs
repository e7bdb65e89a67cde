//! Segmentation scores: foreground ARI and mean best overlap, at video level
//! (all frames scored jointly) and image level (per frame, then averaged).

mod report;

pub use report::{read_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("label field shapes differ: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
    #[error("no foreground pixels; the score is undefined")]
    NoForeground,
    #[error("no ground-truth masks")]
    NoGroundTruth,
    #[error("cannot upsample {n} patches to {h}x{w} with patch size {patch}")]
    Upsample {
        n: usize,
        h: usize,
        w: usize,
        patch: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Video,
    Image,
}

/// Integer labels over `[T, H, W]`. Ground truth uses 0 for background;
/// predictions have no background id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl LabelField {
    pub fn new(t: usize, h: usize, w: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), t * h * w, "label count must equal t*h*w");
        Self { t, h, w, labels }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        let plane = self.h * self.w;
        &self.labels[t * plane..(t + 1) * plane]
    }
}

/// Nearest-neighbor block expansion of `[T, N]` patch labels to `[T, H, W]`.
pub fn upsample_labels(
    patch_labels: &[usize],
    t: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<LabelField, MetricError> {
    let err = MetricError::Upsample {
        n: patch_labels.len() / t.max(1),
        h,
        w,
        patch,
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(err);
    }
    let (gh, gw) = (h / patch, w / patch);
    if patch_labels.len() != t * gh * gw {
        return Err(err);
    }
    let mut labels = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                labels.push(patch_labels[(f * gh + y / patch) * gw + x / patch] as u32);
            }
        }
    }
    Ok(LabelField::new(t, h, w, labels))
}

/// Adjusted Rand Index from the contingency table of two labelings, using
/// exact integer pair counts. Returns 1 when the index is degenerate (both
/// labelings trivial), following the usual convention.
pub fn adjusted_rand_index(pred: &[u32], gt: &[u32]) -> f64 {
    assert_eq!(pred.len(), gt.len());
    let n = pred.len() as i128;
    let mut table: HashMap<(u32, u32), i128> = HashMap::new();
    let mut rows: HashMap<u32, i128> = HashMap::new();
    let mut cols: HashMap<u32, i128> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *table.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
    }
    let pairs = |c: i128| c * (c - 1) / 2;
    let index: i128 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: i128 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: i128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    // ARI = (index - a*b/total) / ((a+b)/2 - a*b/total), scaled by 2*total.
    let num = 2 * total * index - 2 * sum_a * sum_b;
    let den = total * (sum_a + sum_b) - 2 * sum_a * sum_b;
    if den == 0 {
        return 1.0;
    }
    num as f64 / den as f64
}

fn check_shapes(a: &LabelField, b: &LabelField) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::Shape(a.dims(), b.dims()));
    }
    Ok(())
}

fn foreground(pred: &[u32], gt: &[u32]) -> (Vec<u32>, Vec<u32>) {
    pred.iter()
        .zip(gt)
        .filter(|(_, &g)| g != 0)
        .map(|(&p, &g)| (p, g))
        .unzip()
}

/// ARI restricted to pixels whose ground-truth id is non-zero.
pub fn fg_ari(pred: &LabelField, gt: &LabelField, level: Level) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    match level {
        Level::Video => {
            let (p, g) = foreground(&pred.labels, &gt.labels);
            if g.is_empty() {
                return Err(MetricError::NoForeground);
            }
            Ok(adjusted_rand_index(&p, &g))
        }
        Level::Image => {
            let scores: Vec<f64> = (0..gt.t)
                .filter_map(|t| {
                    let (p, g) = foreground(pred.frame(t), gt.frame(t));
                    (!g.is_empty()).then(|| adjusted_rand_index(&p, &g))
                })
                .collect();
            if scores.is_empty() {
                return Err(MetricError::NoForeground);
            }
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}

/// A boolean mask over `[T, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BoolMask {
    fn frame(&self, t: usize) -> &[bool] {
        let plane = self.h * self.w;
        &self.data[t * plane..(t + 1) * plane]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// One hard mask per distinct id, in ascending id order. Id 0 is skipped
/// when `skip_background` is set.
pub fn masks_from_labels(field: &LabelField, skip_background: bool) -> Vec<(u32, BoolMask)> {
    let mut ids: Vec<u32> = field.labels.clone();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .filter(|&id| !(skip_background && id == 0))
        .map(|id| {
            let data = field.labels.iter().map(|&l| l == id).collect();
            (
                id,
                BoolMask {
                    t: field.t,
                    h: field.h,
                    w: field.w,
                    data,
                },
            )
        })
        .collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mean_best_overlap<'a>(
    pred: impl Iterator<Item = &'a [bool]> + Clone,
    gt: impl Iterator<Item = &'a [bool]>,
) -> Option<f64> {
    let best: Vec<f64> = gt
        .filter(|g| g.iter().any(|&b| b))
        .map(|g| pred.clone().map(|p| iou(p, g)).fold(0.0, f64::max))
        .collect();
    (!best.is_empty()).then(|| best.iter().sum::<f64>() / best.len() as f64)
}

/// Mean over ground-truth masks of the best IoU with any predicted mask.
/// A predicted mask may serve as the best match for several objects.
pub fn mbo(pred: &[BoolMask], gt: &[BoolMask], level: Level) -> Result<f64, MetricError> {
    let Some(first) = gt.first() else {
        return Err(MetricError::NoGroundTruth);
    };
    let dims = [first.t, first.h, first.w];
    for m in pred.iter().chain(gt) {
        if [m.t, m.h, m.w] != dims {
            return Err(MetricError::Shape(dims, [m.t, m.h, m.w]));
        }
    }
    match level {
        Level::Video => mean_best_overlap(
            pred.iter().map(|m| m.data.as_slice()),
            gt.iter().map(|m| m.data.as_slice()),
        )
        .ok_or(MetricError::NoGroundTruth),
        Level::Image => {
            let scores: Vec<f64> = (0..first.t)
                .filter_map(|t| {
                    mean_best_overlap(pred.iter().map(|m| m.frame(t)), gt.iter().map(|m| m.frame(t)))
                })
                .collect();
            if scores.is_empty() {
                return Err(MetricError::NoGroundTruth);
            }
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}

/// [`mbo`] on hard masks derived from label fields (gt background excluded).
pub fn mbo_from_labels(pred: &LabelField, gt: &LabelField, level: Level) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let p: Vec<BoolMask> = masks_from_labels(pred, false).into_iter().map(|(_, m)| m).collect();
    let g: Vec<BoolMask> = masks_from_labels(gt, true).into_iter().map(|(_, m)| m).collect();
    mbo(&p, &g, level)
}
