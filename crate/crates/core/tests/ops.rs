mod common;

use common::*;
use dad_core::autograd::Var;
use dad_core::ops::{self, Conv2dArgs};
use dad_core::Tensor;
use rand::Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// Direct seven-loop convolution with zero padding.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    co: usize,
    k: usize,
    bias: Option<&[f64]>,
    a: Conv2dArgs,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * a.padding - a.dilation * (k - 1) - 1) / a.stride + 1;
    let wo = (w + 2 * a.padding - a.dilation * (k - 1) - 1) / a.stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * a.stride + ky * a.dilation) as isize - a.padding as isize;
                                let ix = (xx * a.stride + kx * a.dilation) as isize - a.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((o * ci + c) * k + ky) * k + kx]
                                    * x[((n * ci + c) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Check `d sum(probe * f(x)) / dx` against central differences on a few entries.
fn check_grad(x0: &Tensor, f: &dyn Fn(&Var) -> Var, seed: u64) {
    let mut r = rng(seed);
    let leaf = Var::leaf(x0.clone());
    let y = f(&leaf);
    let probe = Tensor::from_fn(y.shape(), |_| r.gen_range(-1.0..1.0));
    let obj = |v: &Var| ops::sum(&ops::mul(&f(v), &Var::constant(probe.clone())).unwrap());
    let g = obj(&leaf).backward().get(&leaf).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let picks: Vec<usize> = (0..6).map(|_| r.gen_range(0..x0.numel())).collect();
    for i in picks {
        let h = 1e-6;
        let mut up = x0.clone();
        up.data_mut()[i] += h;
        let mut down = x0.clone();
        down.data_mut()[i] -= h;
        let fd = (obj(&Var::constant(up)).value().item() - obj(&Var::constant(down)).value().item()) / (2.0 * h);
        let a = g.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-4, "entry {i}: analytic {a} numeric {fd}");
    }
}

#[test]
fn convolution_matches_direct_loops() {
    let mut r = rng(31);
    for _ in 0..25 {
        let (b, ci, co) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
        let k = [1usize, 3, 5][r.gen_range(0..3)];
        let a = Conv2dArgs {
            stride: r.gen_range(1..3),
            dilation: r.gen_range(1..4),
            padding: r.gen_range(0..5),
        };
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        if h + 2 * a.padding < a.dilation * (k - 1) + 1 || w + 2 * a.padding < a.dilation * (k - 1) + 1 {
            continue;
        }
        let x = uniform(&mut r, b * ci * h * w, -1.0, 1.0);
        let wt = uniform(&mut r, co * ci * k * k, -1.0, 1.0);
        let bias = uniform(&mut r, co, -1.0, 1.0);
        let (want, ho, wo) = conv_oracle(&x, (b, ci, h, w), &wt, co, k, Some(&bias), a);
        let got = ops::conv2d(
            &Var::constant(t(&[b, ci, h, w], x.clone())),
            &Var::constant(t(&[co, ci, k, k], wt.clone())),
            Some(&Var::constant(t(&[co], bias.clone()))),
            a,
        )
        .unwrap();
        assert_eq!(got.shape(), [b, co, ho, wo]);
        assert!(got.value().max_abs_diff(&t(&[b, co, ho, wo], want)) < 1e-12);

        let xt = t(&[b, ci, h, w], x);
        let wv = Var::constant(t(&[co, ci, k, k], wt.clone()));
        check_grad(&xt, &|v| ops::conv2d(v, &wv, None, a).unwrap(), 1);
        let xv = Var::constant(xt.clone());
        check_grad(&t(&[co, ci, k, k], wt), &|v| ops::conv2d(&xv, v, None, a).unwrap(), 2);
        let wv2 = wv.clone();
        check_grad(&t(&[co], bias), &|v| ops::conv2d(&xv, &wv2, Some(v), a).unwrap(), 3);
    }
}

#[test]
fn bilinear_resize_matches_oracle_and_gradient() {
    let mut r = rng(32);
    for _ in 0..20 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let (ho, wo) = (r.gen_range(1..17), r.gen_range(1..17));
        let x = uniform(&mut r, 2 * h * w, -1.0, 1.0);
        let got = ops::resize_bilinear(&Var::constant(t(&[1, 2, h, w], x.clone())), (ho, wo)).unwrap();
        let mut want = bilinear_plane(&x[..h * w], h, w, ho, wo);
        want.extend(bilinear_plane(&x[h * w..], h, w, ho, wo));
        assert!(got.value().max_abs_diff(&t(&[1, 2, ho, wo], want)) < 1e-12);
        check_grad(&t(&[1, 2, h, w], x), &|v| ops::resize_bilinear(v, (ho, wo)).unwrap(), 4);
    }
    // only exact integer ratios are accepted by the ratio-checked variant
    let x = Var::constant(Tensor::zeros(&[1, 1, 4, 6]));
    assert!(ops::resize_to_integer_ratio(&x, (8, 12)).is_ok());
    assert!(ops::resize_to_integer_ratio(&x, (2, 3)).is_ok());
    assert!(ops::resize_to_integer_ratio(&x, (6, 9)).is_err());
    assert!(ops::resize_to_integer_ratio(&x, (8, 18)).is_err());
}

#[test]
fn matmul_softmax_and_normalization_gradients() {
    let mut r = rng(33);
    let a = t(&[2, 3, 4], uniform(&mut r, 24, -1.0, 1.0));
    let b = t(&[2, 4, 5], uniform(&mut r, 40, -1.0, 1.0));
    let bt = t(&[2, 5, 4], uniform(&mut r, 40, -1.0, 1.0));
    let at = t(&[2, 4, 3], uniform(&mut r, 24, -1.0, 1.0));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let lhs = if ta { at.clone() } else { a.clone() };
        let rhs = if tb { bt.clone() } else { b.clone() };
        let (lv, rv) = (Var::constant(lhs.clone()), Var::constant(rhs.clone()));
        check_grad(&lhs, &|v| ops::bmm(v, ta, &rv, tb).unwrap(), 5);
        check_grad(&rhs, &|v| ops::bmm(&lv, ta, v, tb).unwrap(), 6);
        let out = ops::bmm(&lv, ta, &rv, tb).unwrap();
        assert_eq!(out.shape(), [2, 3, 5]);
        let at_l = |n: usize, i: usize, k: usize| if ta { lhs.data()[(n * 4 + k) * 3 + i] } else { lhs.data()[(n * 3 + i) * 4 + k] };
        let at_r = |n: usize, k: usize, j: usize| if tb { rhs.data()[(n * 5 + j) * 4 + k] } else { rhs.data()[(n * 4 + k) * 5 + j] };
        for (n, i, j) in [(0, 0, 0), (1, 2, 3), (1, 1, 4)] {
            let want: f64 = (0..4).map(|k| at_l(n, i, k) * at_r(n, k, j)).sum();
            assert!((out.value().data()[(n * 3 + i) * 5 + j] - want).abs() < 1e-12);
        }
    }
    let x = t(&[2, 3, 5], uniform(&mut r, 30, -3.0, 3.0));
    check_grad(&x, &|v| ops::softmax_last(v).unwrap(), 7);

    let x = t(&[3, 2, 4, 3], uniform(&mut r, 72, -2.0, 2.0));
    let gamma = Var::constant(t(&[2], vec![1.3, -0.7]));
    let beta = Var::constant(t(&[2], vec![0.2, 0.5]));
    check_grad(
        &x,
        &|v| {
            let (mean, var) = ops::channel_stats(v.value()).unwrap();
            ops::batch_norm(v, &gamma, &beta, mean, var, 1e-5, true).unwrap()
        },
        8,
    );
    check_grad(&x, &|v| ops::batch_norm(v, &gamma, &beta, vec![0.1, -0.2], vec![0.8, 1.5], 1e-5, false).unwrap(), 9);
}

#[test]
fn elementwise_and_layout_gradients() {
    let mut r = rng(34);
    let x = t(&[2, 3, 4, 4], uniform(&mut r, 96, -2.0, 2.0));
    let m = t(&[2, 1, 4, 4], uniform(&mut r, 32, -2.0, 2.0));
    let xv = Var::constant(x.clone());
    let mv = Var::constant(m.clone());
    check_grad(&x, &|v| ops::mul_channel_broadcast(&mv, v).unwrap(), 10);
    check_grad(&m, &|v| ops::mul_channel_broadcast(v, &xv).unwrap(), 11);
    check_grad(&m, &|v| ops::repeat_channels(v, 5).unwrap(), 12);
    check_grad(&x, &|v| ops::sigmoid(v), 13);
    check_grad(&x, &|v| ops::relu(&ops::affine(v, 1.0, 0.1)), 14);
    check_grad(&x, &|v| ops::concat_channels(&[&xv, v, &mv]).unwrap(), 15);
    let s = t(&[], vec![0.7]);
    check_grad(&s, &|v| ops::scalar_mul(v, &xv).unwrap(), 16);
}
