//! Boundary-weighted BCE + IoU loss, summed over every supervised map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::decoder::DecoderOutputs;
use crate::error::shape_err;
use crate::{math, ops, Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Side of the box filter that locates boundaries; must be odd.
    pub weight_kernel: usize,
    /// Extra weight given to pixels whose neighbourhood disagrees with them.
    pub weight_gain: f64,
    /// Additive smoothing of the IoU ratio.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weight_kernel: 31,
            weight_gain: 5.0,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "loss.weight_kernel must be odd, got {}",
                self.weight_kernel
            )));
        }
        if !(self.weight_gain >= 0.0) || !(self.smooth > 0.0) {
            return Err(Error::Config("loss.weight_gain must be >= 0 and loss.smooth > 0".into()));
        }
        Ok(())
    }
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("ground truth must be binary; threshold it first".into()));
    }
    Ok(())
}

/// `1 + gain * |box_mean(gt) - gt|`, where the box mean over a `k x k`
/// window only counts pixels inside the image.
///
/// Computed as `|count_fg - gt * count| / count` on integer counts, so the
/// weights are exactly invariant under `gt -> 1 - gt`.
pub fn pixel_weights(gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_binary(gt)?;
    let (b, c, h, w) = gt.dims4()?;
    if c != 1 {
        return Err(shape_err!("ground truth must have one channel, got {}", c));
    }
    let r = cfg.weight_kernel / 2;
    let mut out = vec![0.0; gt.numel()];
    // integral image with a zero border row/column
    let mut integral = vec![0u64; (h + 1) * (w + 1)];
    for bi in 0..b {
        let plane = &gt.data()[bi * h * w..(bi + 1) * h * w];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += plane[y * w + x] as u64;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let ones = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                    - integral[y0 * (w + 1) + x1]
                    - integral[y1 * (w + 1) + x0];
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let g = plane[y * w + x];
                let diff = libm::fabs(ones as f64 - g * count) / count;
                out[bi * h * w + y * w + x] = 1.0 + cfg.weight_gain * diff;
            }
        }
    }
    Tensor::new(gt.shape(), out)
}

fn check_aligned(logits: &Var, gt: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let (b, c, h, w) = logits.value().dims4()?;
    if c != 1 || gt.shape() != logits.shape() || weights.shape() != logits.shape() {
        return Err(shape_err!(
            "logits {:?}, ground truth {:?} and weights {:?} must be aligned single-channel maps",
            logits.shape(),
            gt.shape(),
            weights.shape()
        ));
    }
    Ok((b, h * w))
}

/// Binary cross-entropy from logits, stable for large magnitudes.
pub fn bce_with_logits(x: f64, g: f64) -> f64 {
    x.max(0.0) - x * g + math::ln_1p(math::exp(-libm::fabs(x)))
}

/// Per image `sum(w * bce) / sum(w)`, averaged over the batch.
pub fn weighted_bce(logits: &Var, gt: &Tensor, weights: &Tensor) -> Result<Var> {
    let (b, n) = check_aligned(logits, gt, weights)?;
    let x = logits.value().data();
    let (g, w) = (gt.data(), weights.data());
    let mut total = 0.0;
    let mut wsum = Vec::with_capacity(b);
    for bi in 0..b {
        let r = bi * n..(bi + 1) * n;
        let ws: f64 = w[r.clone()].iter().sum();
        let s: f64 = r.map(|i| w[i] * bce_with_logits(x[i], g[i])).sum();
        total += s / ws;
        wsum.push(ws);
    }
    let value = Tensor::scalar(total / b as f64);
    let (gt, weights) = (gt.clone(), weights.clone());
    Ok(Var::from_op(value, &[logits], move |p, _, up| {
        let x = p[0].value().data();
        let k = up.item() / b as f64;
        let d = Tensor::from_fn(p[0].shape(), |i| {
            k * weights.data()[i] * (math::sigmoid(x[i]) - gt.data()[i]) / wsum[i / n]
        });
        vec![Some(d)]
    }))
}

/// Per image `1 - (sum(w p g) + s) / (sum(w (p + g - p g)) + s)` with
/// `p = sigmoid(logits)`, averaged over the batch.
pub fn weighted_iou(logits: &Var, gt: &Tensor, weights: &Tensor, smooth: f64) -> Result<Var> {
    let (b, n) = check_aligned(logits, gt, weights)?;
    let x = logits.value().data();
    let (g, w) = (gt.data(), weights.data());
    let mut total = 0.0;
    let mut sums = Vec::with_capacity(b);
    for bi in 0..b {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in bi * n..(bi + 1) * n {
            let p = math::sigmoid(x[i]);
            inter += w[i] * p * g[i];
            union += w[i] * (p + g[i] - p * g[i]);
        }
        total += 1.0 - (inter + smooth) / (union + smooth);
        sums.push((inter + smooth, union + smooth));
    }
    let value = Tensor::scalar(total / b as f64);
    let (gt, weights) = (gt.clone(), weights.clone());
    Ok(Var::from_op(value, &[logits], move |p, _, up| {
        let x = p[0].value().data();
        let k = up.item() / b as f64;
        let d = Tensor::from_fn(p[0].shape(), |i| {
            let (num, den) = sums[i / n];
            let (g, w) = (gt.data()[i], weights.data()[i]);
            let s = math::sigmoid(x[i]);
            // d/dp of -(num / den)
            let dp = -(w * g * den - num * w * (1.0 - g)) / (den * den);
            k * dp * s * (1.0 - s)
        });
        vec![Some(d)]
    }))
}

/// Weighted BCE + weighted IoU of one map.
pub fn map_loss(logits: &Var, gt: &Tensor, weights: &Tensor, cfg: &LossConfig) -> Result<Var> {
    ops::add(
        &weighted_bce(logits, gt, weights)?,
        &weighted_iou(logits, gt, weights, cfg.smooth)?,
    )
}

/// Sum of the per-map losses, with every map resized to the ground truth.
pub struct TotalLoss {
    pub total: Var,
    pub per_map: Vec<f64>,
}

pub fn total_loss(outputs: &DecoderOutputs, gt: &Tensor, cfg: &LossConfig) -> Result<TotalLoss> {
    let weights = pixel_weights(gt, cfg)?;
    let (_, _, h, w) = gt.dims4()?;
    let mut total: Option<Var> = None;
    let mut per_map = Vec::with_capacity(outputs.len());
    for map in &outputs.maps {
        let map = ops::resize_bilinear(map, (h, w))?;
        let l = map_loss(&map, gt, &weights, cfg)?;
        per_map.push(l.value().item());
        total = Some(match total {
            None => l,
            Some(t) => ops::add(&t, &l)?,
        });
    }
    let total = total.ok_or_else(|| shape_err!("no output maps to supervise"))?;
    Ok(TotalLoss { total, per_map })
}
