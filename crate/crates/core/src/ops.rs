//! Differentiable tensor operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::shape_err;
use crate::kernels::{self, ConvGeom};
use crate::math;
use crate::{Result, Tensor};

fn same_shape(a: &Var, b: &Var) -> Result<()> {
    a.value().expect_same_shape(b.value())
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b)?;
    let v = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(v, &[a, b], |_, _, g| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b)?;
    let v = a.value().zip_map(b.value(), |x, y| x - y)?;
    Ok(Var::from_op(v, &[a, b], |_, _, g| {
        vec![Some(g.clone()), Some(g.scale(-1.0))]
    }))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b)?;
    let v = a.value().zip_map(b.value(), |x, y| x * y)?;
    Ok(Var::from_op(v, &[a, b], |p, _, g| {
        vec![
            p[0].requires_grad()
                .then(|| g.zip_map(p[1].value(), |g, y| g * y).unwrap()),
            p[1].requires_grad()
                .then(|| g.zip_map(p[0].value(), |g, x| g * x).unwrap()),
        ]
    }))
}

/// `scale * x + shift` with constant coefficients.
pub fn affine(x: &Var, scale: f64, shift: f64) -> Var {
    let v = x.value().map(|t| scale * t + shift);
    Var::from_op(v, &[x], move |_, _, g| vec![Some(g.scale(scale))])
}

/// Multiply every element of `x` by a one-element variable.
pub fn scalar_mul(s: &Var, x: &Var) -> Result<Var> {
    if s.value().numel() != 1 {
        return Err(shape_err!("scalar_mul expects a one-element scale, got {:?}", s.shape()));
    }
    let k = s.value().item();
    let v = x.value().scale(k);
    Ok(Var::from_op(v, &[s, x], |p, _, g| {
        let k = p[0].value().item();
        let ds = p[0].requires_grad().then(|| {
            let dot: f64 = g.data().iter().zip(p[1].value().data()).map(|(a, b)| a * b).sum();
            Tensor::new(p[0].shape(), vec![dot]).unwrap()
        });
        vec![ds, p[1].requires_grad().then(|| g.scale(k))]
    }))
}

/// Multiply `[B,C,H,W]` features by a `[B,1,H,W]` map broadcast over channels.
pub fn mul_channel_broadcast(map: &Var, x: &Var) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4()?;
    if map.shape() != [b, 1, h, w] {
        return Err(shape_err!(
            "map {:?} cannot broadcast over features {:?}",
            map.shape(),
            x.shape()
        ));
    }
    let hw = h * w;
    let m = map.value().data();
    let mut out = x.value().clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= m[(i / (c * hw)) * hw + i % hw];
    }
    Ok(Var::from_op(out, &[map, x], move |p, _, g| {
        let m = p[0].value().data();
        let xv = p[1].value().data();
        let dmap = p[0].requires_grad().then(|| {
            let mut d = vec![0.0; b * hw];
            for (i, (&gv, &xv)) in g.data().iter().zip(xv).enumerate() {
                d[(i / (c * hw)) * hw + i % hw] += gv * xv;
            }
            Tensor::new(&[b, 1, h, w], d).unwrap()
        });
        let dx = p[1].requires_grad().then(|| {
            let mut d = g.clone();
            for (i, v) in d.data_mut().iter_mut().enumerate() {
                *v *= m[(i / (c * hw)) * hw + i % hw];
            }
            d
        });
        vec![dmap, dx]
    }))
}

/// Repeat a `[B,1,H,W]` map across `channels`.
pub fn repeat_channels(map: &Var, channels: usize) -> Result<Var> {
    let (b, c, h, w) = map.value().dims4()?;
    if c != 1 {
        return Err(shape_err!("repeat_channels expects one channel, got {}", c));
    }
    let hw = h * w;
    let src = map.value().data();
    let mut data = Vec::with_capacity(b * channels * hw);
    for bi in 0..b {
        for _ in 0..channels {
            data.extend_from_slice(&src[bi * hw..(bi + 1) * hw]);
        }
    }
    let v = Tensor::new(&[b, channels, h, w], data)?;
    Ok(Var::from_op(v, &[map], move |_, _, g| {
        let mut d = vec![0.0; b * hw];
        for (i, &gv) in g.data().iter().enumerate() {
            d[(i / (channels * hw)) * hw + i % hw] += gv;
        }
        vec![Some(Tensor::new(&[b, 1, h, w], d).unwrap())]
    }))
}

pub fn relu(x: &Var) -> Var {
    let v = x.value().map(|t| t.max(0.0));
    Var::from_op(v, &[x], |p, _, g| {
        vec![Some(
            g.zip_map(p[0].value(), |g, x| if x > 0.0 { g } else { 0.0 })
                .unwrap(),
        )]
    })
}

pub fn sigmoid(x: &Var) -> Var {
    let v = x.value().map(math::sigmoid);
    Var::from_op(v, &[x], |_, out, g| {
        vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)).unwrap())]
    })
}

pub fn sum(x: &Var) -> Var {
    let v = Tensor::scalar(x.value().sum());
    Var::from_op(v, &[x], |p, _, g| {
        vec![Some(Tensor::full(p[0].shape(), g.item()))]
    })
}

pub fn mean(x: &Var) -> Var {
    let n = x.value().numel() as f64;
    let v = Tensor::scalar(x.value().sum() / n);
    Var::from_op(v, &[x], move |p, _, g| {
        vec![Some(Tensor::full(p[0].shape(), g.item() / n))]
    })
}

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    let v = x.value().clone().reshape(shape)?;
    Ok(Var::from_op(v, &[x], |p, _, g| {
        vec![Some(g.clone().reshape(p[0].shape()).unwrap())]
    }))
}

/// Concatenate rank-4 tensors along the channel axis.
pub fn concat_channels(xs: &[&Var]) -> Result<Var> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
    let (b, _, h, w) = first.value().dims4()?;
    let mut chans = Vec::with_capacity(xs.len());
    for x in xs {
        let (xb, xc, xh, xw) = x.value().dims4()?;
        if (xb, xh, xw) != (b, h, w) {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?}",
                x.shape(),
                first.shape()
            ));
        }
        chans.push(xc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for (x, &c) in xs.iter().zip(&chans) {
            data.extend_from_slice(&x.value().data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    let v = Tensor::new(&[b, total, h, w], data)?;
    Ok(Var::from_op(v, xs, move |p, _, g| {
        let mut offset = 0;
        let mut out = Vec::with_capacity(p.len());
        for (x, &c) in p.iter().zip(&chans) {
            if !x.requires_grad() {
                out.push(None);
                offset += c;
                continue;
            }
            let mut d = Vec::with_capacity(b * c * hw);
            for bi in 0..b {
                let start = (bi * total + offset) * hw;
                d.extend_from_slice(&g.data()[start..start + c * hw]);
            }
            out.push(Some(Tensor::new(&[b, c, h, w], d).unwrap()));
            offset += c;
        }
        out
    }))
}

/// Bilinear resize of a rank-4 tensor with half-pixel centers (corners not aligned).
pub fn resize_bilinear(x: &Var, size: (usize, usize)) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4()?;
    if size.0 == 0 || size.1 == 0 {
        return Err(shape_err!("cannot resize to {:?}", size));
    }
    if (h, w) == size {
        return Ok(x.clone());
    }
    let data = kernels::resize_bilinear_forward(x.value().data(), b * c, (h, w), size);
    let v = Tensor::new(&[b, c, size.0, size.1], data)?;
    Ok(Var::from_op(v, &[x], move |_, _, g| {
        let d = kernels::resize_bilinear_backward(g.data(), b * c, (h, w), size);
        vec![Some(Tensor::new(&[b, c, h, w], d).unwrap())]
    }))
}

/// Resize by an exact integer factor in either direction; a non-integer
/// ratio is a shape error.
pub fn resize_to_integer_ratio(x: &Var, size: (usize, usize)) -> Result<Var> {
    let (_, _, h, w) = x.value().dims4()?;
    let ok = |a: usize, b: usize| a > 0 && b > 0 && (a % b == 0 || b % a == 0);
    let ratio_h = (h.max(size.0), h.min(size.0));
    let ratio_w = (w.max(size.1), w.min(size.1));
    if !ok(h, size.0) || !ok(w, size.1) || ratio_h.0 / ratio_h.1 != ratio_w.0 / ratio_w.1 {
        return Err(shape_err!(
            "non-integer resize ratio from {}x{} to {}x{}",
            h,
            w,
            size.0,
            size.1
        ));
    }
    resize_bilinear(x, size)
}

/// Parameters of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

pub fn conv_output_size(input: usize, kernel: usize, args: Conv2dArgs) -> Option<usize> {
    let span = args.dilation * (kernel - 1) + 1;
    (input + 2 * args.padding)
        .checked_sub(span)
        .map(|v| v / args.stride + 1)
}

/// Convolution of `x [B,Cin,H,W]` with `weight [Cout,Cin,k,k]` and optional `bias [Cout]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, args: Conv2dArgs) -> Result<Var> {
    let (b, c_in, h, w) = x.value().dims4()?;
    let (c_out, wc, kh, kw) = weight.value().dims4()?;
    if wc != c_in {
        return Err(shape_err!(
            "convolution expects {} input channels, got {}",
            wc,
            c_in
        ));
    }
    if kh != kw {
        return Err(shape_err!("only square kernels are supported, got {}x{}", kh, kw));
    }
    if args.stride == 0 || args.dilation == 0 {
        return Err(shape_err!("stride and dilation must be at least 1"));
    }
    if let Some(bias) = bias {
        if bias.shape() != [c_out] {
            return Err(shape_err!("bias shape {:?} for {} outputs", bias.shape(), c_out));
        }
    }
    let (h_out, w_out) = match (conv_output_size(h, kh, args), conv_output_size(w, kw, args)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(shape_err!(
                "input {}x{} too small for kernel {} with dilation {}",
                h,
                w,
                kh,
                args.dilation
            ))
        }
    };
    let geom = ConvGeom {
        c_in,
        c_out,
        kernel: kh,
        stride: args.stride,
        padding: args.padding,
        dilation: args.dilation,
        h,
        w,
        h_out,
        w_out,
    };
    let data = kernels::conv2d_forward(
        x.value().data(),
        b,
        weight.value().data(),
        bias.map(|v| v.value().data()),
        &geom,
    );
    let v = Tensor::new(&[b, c_out, h_out, w_out], data)?;
    let mut parents: Vec<&Var> = vec![x, weight];
    if let Some(bias) = bias {
        parents.push(bias);
    }
    Ok(Var::from_op(v, &parents, move |p, _, g| {
        let (dx, dw, db) = kernels::conv2d_backward(
            p[0].value().data(),
            b,
            p[1].value().data(),
            g.data(),
            &geom,
            p[0].requires_grad(),
        );
        let mut out = vec![
            dx.map(|d| Tensor::new(p[0].shape(), d).unwrap()),
            Some(Tensor::new(p[1].shape(), dw).unwrap()),
        ];
        if p.len() == 3 {
            out.push(Some(Tensor::new(&[c_out], db).unwrap()));
        }
        out
    }))
}

/// Batched matrix product `op(a) * op(b)` on `[B, rows, cols]` tensors, where
/// `op` transposes the last two axes when the matching flag is set.
pub fn bmm(a: &Var, ta: bool, b: &Var, tb: bool) -> Result<Var> {
    let (ba, ar, ac) = a.value().dims3()?;
    let (bb, br, bc) = b.value().dims3()?;
    let inner_a = if ta { ar } else { ac };
    let inner_b = if tb { bc } else { br };
    if ba != bb || inner_a != inner_b {
        return Err(shape_err!(
            "bmm of {:?}{} and {:?}{}",
            a.shape(),
            if ta { "^T" } else { "" },
            b.shape(),
            if tb { "^T" } else { "" }
        ));
    }
    let (data, m, n) = kernels::bmm(a.value().data(), (ar, ac), ta, b.value().data(), (br, bc), tb, ba);
    let v = Tensor::new(&[ba, m, n], data)?;
    Ok(Var::from_op(v, &[a, b], move |p, _, g| {
        let av = p[0].value().data();
        let bv = p[1].value().data();
        let gd = g.data();
        let da = p[0].requires_grad().then(|| {
            let (d, _, _) = if ta {
                kernels::bmm(bv, (br, bc), tb, gd, (m, n), true, ba)
            } else {
                kernels::bmm(gd, (m, n), false, bv, (br, bc), !tb, ba)
            };
            Tensor::new(&[ba, ar, ac], d).unwrap()
        });
        let db = p[1].requires_grad().then(|| {
            let (d, _, _) = if tb {
                kernels::bmm(gd, (m, n), true, av, (ar, ac), ta, ba)
            } else {
                kernels::bmm(av, (ar, ac), !ta, gd, (m, n), false, ba)
            };
            Tensor::new(&[bb, br, bc], d).unwrap()
        });
        vec![da, db]
    }))
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Var) -> Result<Var> {
    let cols = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err!("softmax of a rank-0 tensor"))?;
    let v = Tensor::new(x.shape(), kernels::softmax_rows(x.value().data(), cols))?;
    Ok(Var::from_op(v, &[x], move |_, y, g| {
        let mut d = vec![0.0; g.numel()];
        for ((yr, gr), dr) in y
            .data()
            .chunks(cols)
            .zip(g.data().chunks(cols))
            .zip(d.chunks_mut(cols))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::new(y.shape(), d).unwrap())]
    }))
}

/// Per-channel statistics of `[B,C,H,W]`: `(mean, biased variance)`.
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += d[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            v += d[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .iter()
                .map(|t| (t - m) * (t - m))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / n;
    }
    Ok((mean, var))
}

/// Batch normalization with given per-channel statistics:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// With `batch_stats` set, `mean`/`var` are treated as functions of `x` and
/// differentiated through; otherwise they are constants (inference mode).
pub fn batch_norm(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
    batch_stats: bool,
) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(shape_err!("batch norm parameters do not match {} channels", c));
    }
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
    let gm = gamma.value().data();
    let bt = beta.value().data();
    let xd = x.value().data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let t = (xd[i] - mean[ci]) * inv_std[ci];
                xhat[i] = t;
                out[i] = gm[ci] * t + bt[ci];
            }
        }
    }
    let v = Tensor::new(x.shape(), out)?;
    Ok(Var::from_op(v, &[x, gamma, beta], move |p, _, g| {
        let gd = g.data();
        let gm = p[1].value().data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    dgamma[ci] += gd[i] * xhat[i];
                    dbeta[ci] += gd[i];
                }
            }
        }
        let dx = p[0].requires_grad().then(|| {
            let n = (b * hw) as f64;
            let mut dx = vec![0.0; gd.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let k = gm[ci] * inv_std[ci];
                    for i in base..base + hw {
                        dx[i] = if batch_stats {
                            k * (gd[i] - dbeta[ci] / n - xhat[i] * dgamma[ci] / n)
                        } else {
                            k * gd[i]
                        };
                    }
                }
            }
            Tensor::new(p[0].shape(), dx).unwrap()
        });
        vec![
            dx,
            Some(Tensor::new(&[c], dgamma).unwrap()),
            Some(Tensor::new(&[c], dbeta).unwrap()),
        ]
    }))
}
