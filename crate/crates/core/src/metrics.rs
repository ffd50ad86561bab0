//! Saliency / segmentation evaluation metrics.
//!
//! Predictions are `[0, 1]` maps and ground truths are binary maps of the same
//! size. Structure measure, enhanced-alignment measure and weighted F-measure
//! follow the community evaluation toolkits, including their degenerate
//! ground-truth rules.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{math, Error, Result};

/// Small constant guarding divisions, as in the reference evaluators.
pub const EPS: f64 = f64::EPSILON;

/// A single-channel `height x width` map in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(shape_err!(
                "{}x{} map needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Complement `1 - v` of every value.
    pub fn inverted(&self) -> Self {
        self.map(|v| 1.0 - v)
    }
}

fn check_pair(pred: &GrayMap, gt: &GrayMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    if pred.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation("prediction values must lie in [0, 1]".into()));
    }
    if gt.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("ground truth must be binary".into()));
    }
    Ok(())
}

/// Rescale a prediction to `[0, 1]` by its own min and max when it leaves
/// that range; otherwise return it unchanged.
pub fn normalize_prediction(pred: &GrayMap) -> GrayMap {
    let (lo, hi) = pred
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo >= 0.0 && hi <= 1.0 {
        return pred.clone();
    }
    let span = hi - lo;
    if span <= 0.0 {
        return pred.map(|_| 0.0);
    }
    pred.map(|v| (v - lo) / span)
}

/// Mean absolute error.
pub fn mae(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| libm::fabs(p - g))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Structure measure: `alpha * object + (1 - alpha) * region`, clamped at 0.
pub fn s_measure(pred: &GrayMap, gt: &GrayMap, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = gt.mean();
    let score = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        alpha * object_similarity(pred, gt) + (1.0 - alpha) * region_similarity(pred, gt)
    };
    Ok(score.max(0.0))
}

fn object_similarity(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let u = gt.mean();
    let fg: Vec<f64> = pred.data.iter().zip(&gt.data).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// `2 x / (x^2 + 1 + sigma + eps)` over the values inside one region.
fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        math::sqrt(values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// Ground-truth centroid as 1-based `(x, y)`, rounded half to even.
fn centroid(gt: &GrayMap) -> (usize, usize) {
    let area: f64 = gt.data.iter().sum();
    if area == 0.0 {
        return (
            math::round_half_even(gt.width as f64 / 2.0) as usize,
            math::round_half_even(gt.height as f64 / 2.0) as usize,
        );
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..gt.height {
        for x in 0..gt.width {
            let g = gt.at(y, x);
            sx += g * x as f64;
            sy += g * y as f64;
        }
    }
    (
        math::round_half_even(sx / area) as usize + 1,
        math::round_half_even(sy / area) as usize + 1,
    )
}

fn region_similarity(pred: &GrayMap, gt: &GrayMap) -> f64 {
    let (cx, cy) = centroid(gt);
    let (h, w) = (gt.height, gt.width);
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    quads
        .iter()
        .zip(weights)
        .map(|((rows, cols), wt)| {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for y in rows.clone() {
                for x in cols.clone() {
                    p.push(pred.at(y, x));
                    g.push(gt.at(y, x));
                }
            }
            if p.is_empty() {
                0.0
            } else {
                wt * ssim(&p, &g)
            }
        })
        .sum()
}

/// Single-window structural similarity used inside the region term.
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if pred.len() > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x) * (p - x);
            sy += (g - y) * (g - y);
            sxy += (p - x) * (g - y);
        }
        sx /= n - 1.0;
        sy /= n - 1.0;
        sxy /= n - 1.0;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Enhanced-alignment measure with the adaptive threshold
/// `min(2 * mean(pred), 1)`.
pub fn e_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let threshold = (2.0 * pred.mean()).min(1.0);
    let fm: Vec<f64> = pred.data.iter().map(|&p| (p >= threshold) as u8 as f64).collect();
    let n = fm.len() as f64;
    let gt_mean = gt.mean();
    let enhanced: f64 = if gt_mean == 0.0 {
        fm.iter().map(|v| 1.0 - v).sum()
    } else if gt_mean == 1.0 {
        fm.iter().sum()
    } else {
        let fm_mean = fm.iter().sum::<f64>() / n;
        fm.iter()
            .zip(&gt.data)
            .map(|(f, g)| {
                let a = f - fm_mean;
                let b = g - gt_mean;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    Ok(enhanced / n)
}

/// Weighted F-measure, `beta^2 = 1`. Returns `(score, empty_gt)`; an empty
/// ground truth scores 0 and is flagged.
pub fn weighted_f(pred: &GrayMap, gt: &GrayMap) -> Result<(f64, bool)> {
    check_pair(pred, gt)?;
    if gt.data.iter().all(|&g| g == 0.0) {
        return Ok((0.0, true));
    }
    let (h, w) = (gt.height, gt.width);
    let (dist, nearest) = nearest_foreground(gt);
    let err: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(p, g)| libm::fabs(p - g)).collect();
    // background errors take the value of their nearest foreground pixel
    let et: Vec<f64> = (0..h * w)
        .map(|i| if gt.data[i] == 0.0 { err[nearest[i]] } else { err[i] })
        .collect();
    let kernel = gaussian_kernel(7, 5.0);
    let ea = filter_same_zero(&et, h, w, &kernel, 7);
    let beta2 = 1.0;
    let (mut tp, mut fp, mut fg_err, mut fg_count) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let g = gt.data[i];
        let min_e = if g == 1.0 && ea[i] < err[i] { ea[i] } else { err[i] };
        let importance = if g == 0.0 {
            2.0 - math::exp(math::ln(0.5) / 5.0 * dist[i])
        } else {
            1.0
        };
        let ew = min_e * importance;
        if g == 1.0 {
            tp += 1.0;
            fg_err += ew;
            fg_count += 1.0;
        } else {
            fp += ew;
        }
    }
    let tpw = tp - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = tpw / (tpw + fp + EPS);
    Ok(((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS), false))
}

/// Normalized `size x size` Gaussian with standard deviation `sigma`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - c;
            let x = (i % size) as f64 - c;
            math::exp(-(x * x + y * y) / (2.0 * sigma * sigma))
        })
        .collect();
    let max = k.iter().copied().fold(0.0, f64::max);
    for v in &mut k {
        if *v < f64::EPSILON * max {
            *v = 0.0;
        }
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Same-size 2-D correlation with zero padding outside the image.
fn filter_same_zero(src: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kernel[((ky + r) * size as isize + kx + r) as usize] * src[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Euclidean distance from every pixel to the nearest foreground pixel, and
/// that pixel's linear index. Ties resolve to the smallest `(row, col)`.
///
/// Distances come from a separable exact transform; the nearest index is then
/// found among the integer offsets at exactly that squared distance.
pub fn nearest_foreground(gt: &GrayMap) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (gt.height, gt.width);
    let sq = squared_edt(gt);
    let mut dist = vec![0.0; h * w];
    let mut nearest = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d2 = sq[i];
            dist[i] = math::sqrt(d2 as f64);
            if d2 == 0 {
                nearest[i] = i;
                continue;
            }
            let r = isqrt(d2) as isize;
            'search: for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let rest = d2 - (dy * dy) as u64;
                let dx = isqrt(rest);
                if dx * dx != rest {
                    continue;
                }
                for dx in [-(dx as isize), dx as isize] {
                    let xx = x as isize + dx;
                    if xx >= 0 && xx < w as isize && gt.at(yy as usize, xx as usize) == 1.0 {
                        nearest[i] = yy as usize * w + xx as usize;
                        break 'search;
                    }
                }
            }
        }
    }
    (dist, nearest)
}

fn isqrt(v: u64) -> u64 {
    let mut r = libm::sqrt(v as f64) as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Exact squared Euclidean distance transform (lower envelope of parabolas,
/// per column then per row). Requires at least one foreground pixel.
fn squared_edt(gt: &GrayMap) -> Vec<u64> {
    let (h, w) = (gt.height, gt.width);
    const INF: u64 = u64::MAX / 4;
    let mut col = vec![INF; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt.at(y, x) == 1.0 {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = ((y - l) * (y - l)) as u64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if gt.at(y, x) == 1.0 {
                last = Some(y);
            }
            if let Some(l) = last {
                let d = ((l - y) * (l - y)) as u64;
                col[y * w + x] = col[y * w + x].min(d);
            }
        }
    }
    let mut out = vec![0u64; h * w];
    let mut f = vec![0i128; w];
    let mut v = vec![0usize; w];
    let mut z = vec![0f64; w + 1];
    for y in 0..h {
        for x in 0..w {
            f[x] = col[y * w + x] as i128;
        }
        let mut k = 0usize;
        let mut started = false;
        for q in 0..w {
            if f[q] >= INF as i128 {
                continue;
            }
            if !started {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                started = true;
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as i128) - (f[p] + (p * p) as i128)) as f64 / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    // k == 0 and z[0] is -inf, cannot happen
                    unreachable!();
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
        if !started {
            for x in 0..w {
                out[y * w + x] = INF;
            }
            continue;
        }
        let mut k = 0;
        for q in 0..w {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dx = q as i128 - p as i128;
            out[y * w + q] = (dx * dx + f[p]) as u64;
        }
    }
    out
}

/// Overlap metrics of a thresholded prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMetrics {
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    /// Both prediction and ground truth are empty; dice and IoU are 1 by convention.
    pub empty: bool,
}

pub fn region_metrics(pred: &GrayMap, gt: &GrayMap, threshold: f64) -> Result<RegionMetrics> {
    check_pair(pred, gt)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p >= threshold, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / pred.len() as f64;
    if tp + fp + fn_ == 0 {
        return Ok(RegionMetrics {
            dice: 1.0,
            iou: 1.0,
            f1: 1.0,
            acc,
            empty: true,
        });
    }
    let iou = tp as f64 / (tp + fp + fn_) as f64;
    // equals 2TP / (2TP + FP + FN); written via IoU so the identity is exact
    let dice = 2.0 * iou / (1.0 + iou);
    Ok(RegionMetrics {
        dice,
        iou,
        f1: dice,
        acc,
        empty: false,
    })
}

/// All metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub image_id: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_w_beta: f64,
    pub mae: f64,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    /// Notes on degenerate inputs (empty ground truth and the like).
    pub flags: Vec<String>,
}

impl MetricRecord {
    pub const COLUMNS: [&'static str; 9] = [
        "image_id", "s_alpha", "e_phi", "f_w_beta", "mae", "dice", "iou", "f1", "acc",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.s_alpha,
            self.e_phi,
            self.f_w_beta,
            self.mae,
            self.dice,
            self.iou,
            self.f1,
            self.acc,
        ]
    }
}

/// Evaluate one prediction. Out-of-range predictions are min-max normalized first.
pub fn evaluate_pair(image_id: &str, pred: &GrayMap, gt: &GrayMap) -> Result<MetricRecord> {
    let pred = normalize_prediction(pred);
    let mut flags = Vec::new();
    let (f_w_beta, empty) = weighted_f(&pred, gt)?;
    if empty {
        flags.push("empty ground truth: weighted F set to 0".into());
    }
    let region = region_metrics(&pred, gt, 0.5)?;
    if region.empty {
        flags.push("empty prediction and ground truth: dice and IoU set to 1".into());
    }
    Ok(MetricRecord {
        image_id: image_id.into(),
        s_alpha: s_measure(&pred, gt, 0.5)?,
        e_phi: e_measure(&pred, gt)?,
        f_w_beta,
        mae: mae(&pred, gt)?,
        dice: region.dice,
        iou: region.iou,
        f1: region.f1,
        acc: region.acc,
        flags,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<MetricRecord>,
    pub aggregate: MetricRecord,
}

impl MetricReport {
    /// Arithmetic mean of every column.
    pub fn from_records(per_image: Vec<MetricRecord>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Validation("no images to aggregate".into()));
        }
        let n = per_image.len() as f64;
        let mut sums = [0.0; 8];
        for r in &per_image {
            for (s, v) in sums.iter_mut().zip(r.values()) {
                *s += v;
            }
        }
        let m = sums.map(|s| s / n);
        let aggregate = MetricRecord {
            image_id: "AGGREGATE".into(),
            s_alpha: m[0],
            e_phi: m[1],
            f_w_beta: m[2],
            mae: m[3],
            dice: m[4],
            iou: m[5],
            f1: m[6],
            acc: m[7],
            flags: Vec::new(),
        };
        Ok(Self { per_image, aggregate })
    }

    /// Plain-text summary of the aggregate row.
    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        format!(
            "images: {}\nS_alpha: {:.4}\nE_phi: {:.4}\nF_w_beta: {:.4}\nMAE: {:.4}\nDice: {:.4}\nIoU: {:.4}\nF1: {:.4}\nAcc: {:.4}\n",
            self.per_image.len(),
            a.s_alpha,
            a.e_phi,
            a.f_w_beta,
            a.mae,
            a.dice,
            a.iou,
            a.f1,
            a.acc
        )
    }
}
