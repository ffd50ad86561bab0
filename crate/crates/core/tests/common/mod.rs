//! Independent reference implementations used by the integration tests.
//!
//! Everything here works on plain `Vec<f64>` with explicit loops and shares
//! no code with the library beyond its public data types.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Half-pixel bilinear resize of one `h x w` plane (align-corners off).
pub fn bilinear_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let axis = |out: usize, inp: usize, i: usize| -> (usize, usize, f64) {
        let scale = inp as f64 / out as f64;
        let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        let (y0, y1, ly) = axis(ho, h, y);
        for x in 0..wo {
            let (x0, x1, lx) = axis(wo, w, x);
            let v = |yy: usize, xx: usize| src[yy * w + xx];
            out[y * wo + x] = (1.0 - ly) * ((1.0 - lx) * v(y0, x0) + lx * v(y0, x1))
                + ly * ((1.0 - lx) * v(y1, x0) + lx * v(y1, x1));
        }
    }
    out
}

/// Guidance oracle for one batch item. `m` is `hg x wg`, `f` is `c x hb x wb`.
/// Returns `(relation c x c, enhanced c x hg x wg)`.
pub fn dgm_oracle(
    m: &[f64],
    f: &[f64],
    c: usize,
    (hb, wb): (usize, usize),
    (hg, wg): (usize, usize),
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = hg * wg;
    // F0: every channel resized to the guide size
    let mut f0 = Vec::with_capacity(c * n);
    for ch in 0..c {
        f0.extend(bilinear_plane(&f[ch * hb * wb..(ch + 1) * hb * wb], hb, wb, hg, wg));
    }
    // M0: the map copied to every channel; G[p][j] = M0[j][p]
    let m0 = |_ch: usize, p: usize| m[p];
    let mut r = vec![0.0; c * c];
    for i in 0..c {
        let mut logits = vec![0.0; c];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..n {
                acc += f0[i * n + p] * m0(j, p);
            }
            *l = acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..c {
            r[i * c + j] = (logits[j] - max).exp() / z;
        }
    }
    let mut e = vec![0.0; c * n];
    for i in 0..c {
        for p in 0..n {
            let mut a = 0.0;
            for j in 0..c {
                a += r[i * c + j] * f0[j * n + p];
            }
            e[i * n + p] = beta * a + f0[i * n + p];
        }
    }
    (r, e)
}

/// `theta * P * E - epsilon * (1 - P) * E`, element by element.
/// `m` is `h x w`, `e` is `c x h x w`.
pub fn dem_oracle(e: &[f64], m: &[f64], c: usize, hw: usize, theta: f64, epsilon: f64) -> Vec<f64> {
    let mut d = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            let prob = 1.0 / (1.0 + (-m[p]).exp());
            let v = e[ch * hw + p];
            d[ch * hw + p] = theta * (prob * v) - epsilon * ((1.0 - prob) * v);
        }
    }
    d
}

/// Receptive field along one axis found by marking every input pixel that can
/// reach the centre output through the chain `(kernel, stride, dilation)`.
pub fn reachability_rf(chain: &[(usize, usize, usize)]) -> usize {
    let size = 401usize;
    // pick the output whose footprint lands near the middle of the input
    let jump: usize = chain.iter().map(|c| c.1).product();
    let centre = size / 2 / jump;
    let mut mask = vec![vec![false; size]; size];
    mask[centre][centre] = true;
    for &(k, s, d) in chain.iter().rev() {
        let r = (k / 2) as isize * d as isize;
        let mut next = vec![vec![false; size]; size];
        for y in 0..size {
            for x in 0..size {
                if !mask[y][x] {
                    continue;
                }
                for ty in 0..k as isize {
                    for tx in 0..k as isize {
                        let yy = (y * s) as isize - r + ty * d as isize;
                        let xx = (x * s) as isize - r + tx * d as isize;
                        if (0..size as isize).contains(&yy) && (0..size as isize).contains(&xx) {
                            next[yy as usize][xx as usize] = true;
                        }
                    }
                }
            }
        }
        mask = next;
    }
    let rows: Vec<usize> = (0..size).filter(|&y| mask[y].iter().any(|&b| b)).collect();
    let cols: Vec<usize> = (0..size).filter(|&x| (0..size).any(|y| mask[y][x])).collect();
    let extent_y = rows.last().unwrap() - rows.first().unwrap() + 1;
    let extent_x = cols.last().unwrap() - cols.first().unwrap() + 1;
    assert_eq!(extent_y, extent_x);
    extent_y
}

const EPS: f64 = f64::EPSILON;

pub fn mae_oracle(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += (pred[y * w + x] - gt[y * w + x]).abs();
        }
    }
    total / (h * w) as f64
}

/// `(dice, iou, acc)` by set counting.
pub fn region_oracle(pred: &[f64], gt: &[f64], threshold: f64) -> (f64, f64, f64) {
    let p: Vec<bool> = pred.iter().map(|&v| v >= threshold).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v == 1.0).collect();
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
    let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count() as f64;
    let agree = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64;
    let (ps, gs) = (p.iter().filter(|&&b| b).count() as f64, g.iter().filter(|&&b| b).count() as f64);
    if union == 0.0 {
        return (1.0, 1.0, agree / p.len() as f64);
    }
    (2.0 * inter / (ps + gs), inter / union, agree / p.len() as f64)
}

/// Enhanced alignment with the adaptive threshold, averaged over all pixels.
pub fn e_measure_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let thr = (2.0 * pred.iter().sum::<f64>() / n).min(1.0);
    let fm: Vec<f64> = pred.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect();
    let gt_fg = gt.iter().sum::<f64>();
    if gt_fg == 0.0 {
        return fm.iter().filter(|&&v| v == 0.0).count() as f64 / n;
    }
    if gt_fg == n {
        return fm.iter().filter(|&&v| v == 1.0).count() as f64 / n;
    }
    let mf = fm.iter().sum::<f64>() / n;
    let mg = gt_fg / n;
    let mut total = 0.0;
    for i in 0..pred.len() {
        let a = fm[i] - mf;
        let b = gt[i] - mg;
        let xi = 2.0 * a * b / (a * a + b * b + EPS);
        total += (1.0 + xi).powi(2) / 4.0;
    }
    total / n
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_ddof1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn round_half_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    }
}

/// Structure measure transcribed from the reference evaluator.
pub fn s_measure_oracle(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let y = mean(gt);
    if y == 0.0 {
        return 1.0 - mean(pred);
    }
    if y == 1.0 {
        return mean(pred);
    }
    let s_object = |vals: Vec<f64>| {
        let x = mean(&vals);
        2.0 * x / (x * x + 1.0 + std_ddof1(&vals) + EPS)
    };
    let fg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 1.0).map(|i| pred[i]).collect();
    let bg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 0.0).map(|i| 1.0 - pred[i]).collect();
    let object = y * s_object(fg) + (1.0 - y) * s_object(bg);

    // centroid from the coordinates of foreground pixels
    let coords: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| gt[i] == 1.0)
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let cy = round_half_even(coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64) as usize + 1;
    let cx = round_half_even(coords.iter().map(|c| c.1).sum::<f64>() / coords.len() as f64) as usize + 1;
    let area = (h * w) as f64;
    let ssim = |y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for yy in y0..y1 {
            for xx in x0..x1 {
                p.push(pred[yy * w + xx]);
                g.push(gt[yy * w + xx]);
            }
        }
        if p.is_empty() {
            return 0.0;
        }
        // a single pixel has no spread
        let n1 = (p.len() as f64 - 1.0).max(1.0);
        let (mx, my) = (mean(&p), mean(&g));
        let sx = p.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n1;
        let sy = g.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n1;
        let sxy = p.iter().zip(&g).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n1;
        let alpha = 4.0 * mx * my * sxy;
        let beta = (mx * mx + my * my) * (sx + sy);
        if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * ssim(0, cy, 0, cx) + w2 * ssim(0, cy, cx, w) + w3 * ssim(cy, h, 0, cx) + w4 * ssim(cy, h, cx, w);
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Weighted F-measure transcribed from the reference evaluator, with a
/// brute-force nearest-foreground search (first minimum in row-major order)
/// and a direct zero-padded 7x7 Gaussian correlation.
pub fn weighted_f_oracle(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    if gt.iter().all(|&g| g == 0.0) {
        return 0.0;
    }
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    let mut dist = vec![0.0; h * w];
    let mut et = e.clone();
    for i in 0..h * w {
        if gt[i] == 1.0 {
            continue;
        }
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, 0usize);
        for j in 0..h * w {
            if gt[j] != 1.0 {
                continue;
            }
            let (yy, xx) = ((j / w) as i64, (j % w) as i64);
            let d2 = (y - yy).pow(2) + (x - xx).pow(2);
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        dist[i] = (best.0 as f64).sqrt();
        et[i] = e[best.1];
    }
    // 7x7 Gaussian, sigma 5, normalized
    let mut k = [[0.0f64; 7]; 7];
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
        }
    }
    let ks: f64 = k.iter().flatten().sum();
    let mut ea = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for a in 0..7i64 {
                for b in 0..7i64 {
                    let (yy, xx) = (y + a - 3, x + b - 3);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += k[a as usize][b as usize] / ks * et[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            ea[(y * w as i64 + x) as usize] = acc;
        }
    }
    let mut fg_sum = 0.0;
    let mut fg_n = 0.0;
    let mut fp = 0.0;
    for i in 0..h * w {
        if gt[i] == 1.0 {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            fg_sum += m;
            fg_n += 1.0;
        } else {
            let b = 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp();
            fp += e[i] * b;
        }
    }
    let tpw = fg_n - fg_sum;
    let recall = 1.0 - fg_sum / fg_n;
    let precision = tpw / (tpw + fp + EPS);
    2.0 * recall * precision / (recall + precision + EPS)
}

/// A random binary map holding one or two axis-aligned blobs, never empty or full.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    loop {
        let mut m = vec![0.0; h * w];
        for _ in 0..rng.gen_range(1..=2) {
            let (y0, x0) = (rng.gen_range(0..h - 2), rng.gen_range(0..w - 2));
            let (y1, x1) = (rng.gen_range(y0 + 2..=h), rng.gen_range(x0 + 2..=w));
            for y in y0..y1 {
                for x in x0..x1 {
                    m[y * w + x] = 1.0;
                }
            }
        }
        let s: f64 = m.iter().sum();
        if s >= 2.0 && s <= (h * w - 2) as f64 {
            return m;
        }
    }
}
