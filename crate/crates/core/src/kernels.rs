//! Raw numeric kernels shared by the differentiable ops.

#![allow(unsafe_code)]

use alloc::vec;
use alloc::vec::Vec;

/// Upper bound on the scratch buffer used by im2col, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Row/column strides of a row-major `rows x cols` matrix, optionally viewed
/// transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    /// A stored `rows x cols` row-major matrix, seen as its transpose if `t`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, t: bool) -> Self {
        if t {
            Self {
                data,
                rows: cols,
                cols: rows,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `out = beta * out + a * b`, where `out` is row-major with row stride `out_rs`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], out_rs: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for v in &mut out[r * out_rs..r * out_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs out of bounds");
    assert!((m - 1) * out_rs + n <= out.len(), "gemm output out of bounds");
    assert!(out_rs >= n);
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            out_rs as isize,
            1,
        );
    }
}

/// Batched `op(a) * op(b)` for row-major `[batch, rows, cols]` operands.
pub(crate) fn bmm(
    a: &[f64],
    a_dims: (usize, usize),
    ta: bool,
    b: &[f64],
    b_dims: (usize, usize),
    tb: bool,
    batch: usize,
) -> (Vec<f64>, usize, usize) {
    let a_len = a_dims.0 * a_dims.1;
    let b_len = b_dims.0 * b_dims.1;
    let m = if ta { a_dims.1 } else { a_dims.0 };
    let n = if tb { b_dims.0 } else { b_dims.1 };
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let av = MatView::new(&a[i * a_len..(i + 1) * a_len], a_dims.0, a_dims.1, ta);
        let bv = MatView::new(&b[i * b_len..(i + 1) * b_len], b_dims.0, b_dims.1, tb);
        gemm(av, bv, &mut out[i * m * n..(i + 1) * m * n], n, 0.0);
    }
    (out, m, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.patch().max(1)).clamp(1, self.pixels().max(1))
    }
}

/// Output columns `ox` in `[lo, hi)` whose tap `ox * stride + offset` lands
/// inside `[0, size)`.
fn valid_span(offset: isize, stride: usize, size: usize, n_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let hi = if offset >= size as isize {
        0
    } else {
        ((size as isize - offset + s - 1) / s) as usize
    };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Calls `f(row, dst_range, src_row_start, ox_lo, ox_hi, dx)` for every
/// output-row segment of the pixel range `[p0, p1)` and kernel tap.
fn for_each_segment(
    g: &ConvGeom,
    p0: usize,
    p1: usize,
    mut f: impl FnMut(usize, usize, usize, Option<usize>, (usize, usize), isize),
) {
    let k = g.kernel;
    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            let dy = (ky * g.dilation) as isize - g.padding as isize;
            let dx = (kx * g.dilation) as isize - g.padding as isize;
            let (xlo, xhi) = valid_span(dx, g.stride, g.w, g.w_out);
            let mut p = p0;
            while p < p1 {
                let oy = p / g.w_out;
                let ox0 = p % g.w_out;
                let ox1 = (ox0 + (p1 - p)).min(g.w_out);
                let iy = (oy * g.stride) as isize + dy;
                let src = (iy >= 0 && (iy as usize) < g.h).then(|| iy as usize * g.w);
                f(tap, p - p0, ox1 - ox0, src, (ox0, ox1).max_span(xlo, xhi), dx);
                p += ox1 - ox0;
            }
        }
    }
}

trait Span {
    /// `(ox0, ox1, lo, hi)` with the valid part clamped into the segment.
    fn max_span(self, lo: usize, hi: usize) -> (usize, usize);
}

impl Span for (usize, usize) {
    fn max_span(self, lo: usize, hi: usize) -> (usize, usize) {
        let (a, b) = self;
        let l = lo.clamp(a, b);
        let h = hi.clamp(l, b);
        (l - a, h - a)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, p0: usize, p1: usize, col: &mut [f64]) {
    let np = p1 - p0;
    let taps = g.kernel * g.kernel;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let rows = &mut col[ci * taps * np..(ci + 1) * taps * np];
        for_each_segment(g, p0, p1, |tap, off, len, src, (vlo, vhi), dx| {
            let dst = &mut rows[tap * np + off..tap * np + off + len];
            let Some(base) = src else {
                dst.fill(0.0);
                return;
            };
            let ox0 = (p0 + off) % g.w_out;
            dst[..vlo].fill(0.0);
            dst[vhi..].fill(0.0);
            if vlo == vhi {
                return;
            }
            let first = (base as isize + ((ox0 + vlo) * g.stride) as isize + dx) as usize;
            if g.stride == 1 {
                dst[vlo..vhi].copy_from_slice(&plane[first..first + (vhi - vlo)]);
            } else {
                for (i, d) in dst[vlo..vhi].iter_mut().enumerate() {
                    *d = plane[first + i * g.stride];
                }
            }
        });
    }
}

fn col2im(col: &[f64], g: &ConvGeom, p0: usize, p1: usize, dx_img: &mut [f64]) {
    let np = p1 - p0;
    let taps = g.kernel * g.kernel;
    for ci in 0..g.c_in {
        let plane = &mut dx_img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let rows = &col[ci * taps * np..(ci + 1) * taps * np];
        for_each_segment(g, p0, p1, |tap, off, len, src, (vlo, vhi), dx| {
            let Some(base) = src else { return };
            if vlo == vhi {
                return;
            }
            let srcs = &rows[tap * np + off..tap * np + off + len];
            let ox0 = (p0 + off) % g.w_out;
            let first = (base as isize + ((ox0 + vlo) * g.stride) as isize + dx) as usize;
            for (i, &v) in srcs[vlo..vhi].iter().enumerate() {
                plane[first + i * g.stride] += v;
            }
        });
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let (k, np) = (g.patch(), g.pixels());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * np;
    let mut out = vec![0.0; batch * out_len];
    let wv = MatView::new(weight, g.c_out, k, false);
    let chunk = g.chunk();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * chunk]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm(wv, MatView::new(xb, k, np, false), ob, np, 0.0);
        } else {
            let mut p0 = 0;
            while p0 < np {
                let p1 = (p0 + chunk).min(np);
                let c = &mut col[..k * (p1 - p0)];
                im2col(xb, g, p0, p1, c);
                gemm(wv, MatView::new(c, k, p1 - p0, false), &mut ob[p0..], np, 0.0);
                p0 = p1;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * np..(co + 1) * np] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (k, np) = (g.patch(), g.pixels());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * np;
    let mut dw = vec![0.0; g.c_out * k];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if want_input {
        Some(vec![0.0; batch * in_len])
    } else {
        None
    };
    let chunk = g.chunk();
    let mut col = vec![0.0; k * chunk];
    let mut dcol = vec![0.0; k * chunk];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += gb[co * np..(co + 1) * np].iter().sum::<f64>();
        }
        if g.is_pointwise() {
            // dW += dY * X^T ; dX = W^T * dY
            gemm(
                MatView::new(gb, g.c_out, np, false),
                MatView::new(xb, k, np, true),
                &mut dw,
                k,
                1.0,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    MatView::new(weight, g.c_out, k, true),
                    MatView::new(gb, g.c_out, np, false),
                    &mut dx[b * in_len..(b + 1) * in_len],
                    np,
                    0.0,
                );
            }
            continue;
        }
        let mut p0 = 0;
        while p0 < np {
            let p1 = (p0 + chunk).min(np);
            let n = p1 - p0;
            let gchunk = MatView {
                data: &gb[p0..],
                rows: g.c_out,
                cols: n,
                rs: np as isize,
                cs: 1,
            };
            let c = &mut col[..k * n];
            im2col(xb, g, p0, p1, c);
            gemm(gchunk, MatView::new(c, k, n, true), &mut dw, k, 1.0);
            if let Some(dx) = dx.as_mut() {
                let dc = &mut dcol[..k * n];
                gemm(MatView::new(weight, g.c_out, k, true), gchunk, dc, n, 0.0);
                col2im(dc, g, p0, p1, &mut dx[b * in_len..(b + 1) * in_len]);
            }
            p0 = p1;
        }
    }
    (dx, dw, db)
}

/// Per-axis sampling table for bilinear resizing with half-pixel centers.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (ho, wo) {
        return x.to_vec();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(
    g: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (ho, wo) {
        return g.to_vec();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Row-wise softmax over the last dimension of a `[rows, cols]` buffer.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = libm::exp(s - max);
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
