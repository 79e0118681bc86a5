use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{grad_check, grad_check_params};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution, independent of im2col/GEMM.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let [n, cin, h, wd] = x.dims4();
    let [cout, _, k, _] = w.dims4();
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    for s in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += w.at4(co, ci, ky, kx) * x.at4(s, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    let off = out.offset4(s, co, y, xx);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn conv_once(x: Tensor, w: Tensor, b: Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, w, b) = (t.input(x), t.input(w), t.input(b));
    let y = t.conv2d(x, w, b, 1).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_all_ones_center_is_nine() {
    let y = conv_once(
        Tensor::ones(&[1, 1, 3, 3]),
        Tensor::ones(&[1, 1, 3, 3]),
        Tensor::zeros(&[1]),
    );
    assert_eq!(y.at4(0, 0, 1, 1), 9.0);
    assert_eq!(y.at4(0, 0, 0, 0), 4.0);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut rng(1));
    let mut w = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        let off = w.offset4(c, c, 1, 1);
        w.data_mut()[off] = 1.0;
    }
    let y = conv_once(x.clone(), w, Tensor::zeros(&[3]));
    assert!(y.max_abs_diff(&x) < 1e-12);
}

#[test]
fn conv_matches_naive_loops() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let want = naive_conv(&x, &w, b.data());
        let got = conv_once(x, w, b);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.input(Tensor::ones(&[1, 2, 4, 4]));
    let w = t.input(Tensor::ones(&[1, 3, 3, 3]));
    let b = t.input(Tensor::zeros(&[1]));
    let err = t.conv2d(x, w, b, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let w2 = t.input(Tensor::ones(&[1, 2, 3, 3]));
    assert!(t.conv2d(x, w2, b, 0).is_err());
}

#[test]
fn relu_values_and_subgradient() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let loss = t.sum(y);
    let g = t.backward(loss, &mut ParamSet::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[2], vec![-0.5, 0.5]).unwrap());
    let y = t.relu(x);
    let loss = t.sum(y);
    let g = t.backward(loss, &mut ParamSet::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[4], vec![0.0, 40.0, -800.0, 800.0]).unwrap());
    let y = t.sigmoid(x);
    let v = t.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert_eq!(v[2], 0.0);
    assert_eq!(v[3], 1.0);
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let x = Tensor::randn(&[2, 3, 4, 4], 2.5, &mut rng(7)).map(|v| v + 1.5);
    let mut t = Tape::new();
    let xv = t.input(x);
    let g = t.input(Tensor::ones(&[3]));
    let b = t.input(Tensor::zeros(&[3]));
    let mut stats = RunningStats::new(3);
    let y = t.batch_norm(xv, g, b, &mut stats, Mode::Train).unwrap();
    let yv = t.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| (0..16).map(move |p| (n, p)))
            .map(|(n, p)| yv.at4(n, c, p / 4, p % 4))
            .collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
    assert_eq!(stats.updates, 1);
    assert!(stats.mean.iter().all(|m| *m != 0.0));
}

#[test]
fn batch_norm_constant_channel_maps_to_zero() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[2, 1, 3, 3], 4.2));
    let g = t.input(Tensor::ones(&[1]));
    let b = t.input(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    let y = t.batch_norm(x, g, b, &mut stats, Mode::Train).unwrap();
    assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn batch_norm_eval_uses_initial_stats_before_training() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[1, 2, 2, 2], 3.0));
    let g = t.input(Tensor::ones(&[2]));
    let b = t.input(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let y = t.batch_norm(x, g, b, &mut stats, Mode::Eval).unwrap();
    let expect = 3.0 / (1.0 + RunningStats::DEFAULT_EPS).sqrt();
    assert!(t.value(y).data().iter().all(|v| (v - expect).abs() < 1e-12));
    assert_eq!(stats.updates, 0);
}

#[test]
fn dice_loss_limits() {
    let target = Tensor::new(&[1, 1, 2, 4], vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
    let mut t = Tape::new();
    let p = t.input(target.clone());
    let l = t.dice_loss(p, &target, 1.0).unwrap();
    let bound = 1.0 / (2.0 * 4.0 + 1.0);
    assert!(t.value(l).data()[0].abs() <= bound);

    let inverted = target.map(|v| 1.0 - v);
    let mut t = Tape::new();
    let p = t.input(inverted);
    let l = t.dice_loss(p, &target, 1.0).unwrap();
    assert!(t.value(l).data()[0] > 0.85);
}

#[test]
fn broadcast_mul_replicates_across_channels() {
    let a = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng(3));
    let m = Tensor::randn(&[2, 4, 4], 1.0, &mut rng(4));
    let mut t = Tape::new();
    let av = t.input(a.clone());
    let mv = t.input(m.clone());
    let y = t.mul(av, mv).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..16 {
                let (h, w) = (p / 4, p % 4);
                assert_eq!(
                    t.value(y).at4(n, c, h, w),
                    a.at4(n, c, h, w) * m.data()[n * 16 + p]
                );
            }
        }
    }
    let bad = t.input(Tensor::ones(&[2, 5, 4]));
    assert!(t.mul(av, bad).is_err());
}

#[test]
fn identity_elementwise_and_product_rule() {
    let a = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(5));
    let b = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(6));
    let mut t = Tape::new();
    let av = t.input(a.clone());
    let one = t.constant(Tensor::ones(a.shape()));
    let zero = t.constant(Tensor::zeros(a.shape()));
    let p = t.mul(av, one).unwrap();
    let s = t.add(p, zero).unwrap();
    assert_eq!(t.value(s), &a);

    let mut t = Tape::new();
    let av = t.input(a);
    let bv = t.input(b.clone());
    let p = t.mul(av, bv).unwrap();
    let l = t.sum(p);
    let g = t.backward(l, &mut ParamSet::new()).unwrap();
    assert_eq!(g.get(av).unwrap(), &b);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.input(Tensor::ones(&[3]));
    let c = t.constant(Tensor::full(&[3], 2.0));
    let p = t.mul(a, c).unwrap();
    let l = t.sum(p);
    let g = t.backward(l, &mut ParamSet::new()).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(a).unwrap().data(), &[2.0; 3]);
}

#[test]
fn backward_accumulates_into_parameters() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap());
    for round in 1..=2 {
        let mut t = Tape::new();
        let wv = t.param(&params, w);
        let xv = t.constant(x.clone());
        let p = t.mul(wv, xv).unwrap();
        let l = t.sum(p);
        t.backward(l, &mut params).unwrap();
        let expect = x.map(|v| v * round as f64);
        assert_eq!(params.get(w).grad, expect);
    }
    params.zero_grad();
    assert!(params.get(w).grad.data().iter().all(|v| *v == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let a = t.input(Tensor::ones(&[2]));
    assert!(t.backward(a, &mut ParamSet::new()).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng(11));
    let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng(12));
    let grad_for = |alpha: f64| {
        let mut params = ParamSet::new();
        let wid = params.add("w", w.clone());
        let bid = params.add("b", Tensor::zeros(&[2]));
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let wv = t.param(&params, wid);
        let bv = t.param(&params, bid);
        let y = t.conv2d(xv, wv, bv, 1).unwrap();
        let s = t.sigmoid(y);
        let l = t.sum(s);
        let l = t.scale(l, alpha);
        t.backward(l, &mut params).unwrap();
        params.get(wid).grad.clone()
    };
    let g1 = grad_for(1.0);
    let g3 = grad_for(-3.0);
    assert!(g1.map(|v| -3.0 * v).max_abs_diff(&g3) < 1e-12);
}

#[test]
fn pool_upsample_concat_shapes() {
    let mut t = Tape::new();
    let x = t.input(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
    let p = t.avg_pool2(x).unwrap();
    assert_eq!(t.value(p).shape(), &[1, 2, 2, 2]);
    assert_eq!(t.value(p).at4(0, 0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    let u = t.upsample2(p).unwrap();
    assert_eq!(t.value(u).shape(), &[1, 2, 4, 4]);
    assert_eq!(t.value(u).at4(0, 1, 3, 3), t.value(p).at4(0, 1, 1, 1));
    let c = t.concat(x, u).unwrap();
    assert_eq!(t.value(c).shape(), &[1, 4, 4, 4]);
    assert_eq!(t.value(c).at4(0, 3, 0, 0), t.value(u).at4(0, 1, 0, 0));
}

// Finite-difference checks.

const STEP: f64 = 1e-5;

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(21);
    let inputs = [
        Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r),
        Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    let rep = grad_check("conv2d", |t, v| t.conv2d(v[0], v[1], v[2], 1), &inputs, STEP, 1e-6).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn gradcheck_batch_norm_train_and_eval() {
    let mut r = rng(22);
    let inputs = [
        Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r),
        Tensor::uniform(&[3], 0.5, 1.5, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    let rep = grad_check(
        "batch_norm/train",
        |t, v| {
            let mut stats = RunningStats::new(3);
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train)
        },
        &inputs,
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    let rep = grad_check(
        "batch_norm/eval",
        |t, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            stats.updates = 1;
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval)
        },
        &inputs,
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn gradcheck_sigmoid_and_dice() {
    let mut r = rng(23);
    let x = Tensor::randn(&[1, 1, 4, 4], 2.0, &mut r);
    let rep = grad_check("sigmoid", |t, v| Ok(t.sigmoid(v[0])), &[x.clone()], STEP, 1e-6).unwrap();
    assert!(rep.passed(), "{rep:?}");
    let target = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let p = Tensor::uniform(&[1, 1, 4, 4], 0.05, 0.95, &mut r);
    let rep = grad_check("dice_loss", |t, v| t.dice_loss(v[0], &target, 1.0), &[p], STEP, 1e-6).unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn gradcheck_elementwise_with_broadcast() {
    let mut r = rng(24);
    let a = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
    let c = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let rep = grad_check(
        "elementwise",
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            let s = t.add(m, v[2])?;
            let s2 = t.add(s, v[1])?;
            let p = t.mul(s2, v[2])?;
            Ok(t.scale(p, 0.7))
        },
        &[a, b, c],
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn gradcheck_layout_ops() {
    let mut r = rng(25);
    let a = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r);
    let rep = grad_check(
        "pool/upsample/concat",
        |t, v| {
            let p = t.avg_pool2(v[0])?;
            let u = t.upsample2(p)?;
            t.concat(u, v[1])
        },
        &[a, b],
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

/// Offsets whose sample positions sit well inside a pixel cell.
fn fractional_offsets(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::from_fn(shape, |_| {
        let whole: i32 = r.gen_range(-1..=1);
        let frac: f64 = r.gen_range(0.2..0.8);
        whole as f64 + frac
    })
}

#[test]
fn gradcheck_deform_conv() {
    let mut r = rng(26);
    let inputs = [
        Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r),
        fractional_offsets(&[1, 18, 5, 5], &mut r),
        Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r),
        Tensor::randn(&[3], 1.0, &mut r),
    ];
    let rep = grad_check(
        "deform_conv2d",
        |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3]),
        &inputs,
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert_eq!(rep.skipped, 0);
}

#[test]
fn deform_conv_with_zero_offsets_equals_conv() {
    let mut r = rng(27);
    let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.input(x), t.input(w), t.input(b));
    let off = t.input(Tensor::zeros(&[2, 18, 6, 5]));
    let c = t.conv2d(xv, wv, bv, 1).unwrap();
    let d = t.deform_conv2d(xv, off, wv, bv).unwrap();
    assert_eq!(t.value(c), t.value(d));
}

#[test]
fn deform_conv_rejects_bad_offset_field() {
    let mut t = Tape::new();
    let x = t.input(Tensor::ones(&[1, 1, 4, 4]));
    let w = t.input(Tensor::ones(&[1, 1, 3, 3]));
    let b = t.input(Tensor::zeros(&[1]));
    let off = t.input(Tensor::zeros(&[1, 16, 4, 4]));
    assert!(t.deform_conv2d(x, off, w, b).is_err());
    let mut nan = Tensor::zeros(&[1, 18, 4, 4]);
    nan.data_mut()[3] = f64::NAN;
    let off = t.input(nan);
    assert!(matches!(
        t.deform_conv2d(x, off, w, b),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn gradcheck_params_small_network() {
    let mut r = rng(28);
    let mut params = ParamSet::new();
    let w1 = params.add("w1", Tensor::randn(&[2, 1, 3, 3], 0.5, &mut r));
    let b1 = params.add("b1", Tensor::randn(&[2], 0.1, &mut r));
    let g = params.add("g", Tensor::ones(&[2]));
    let be = params.add("be", Tensor::zeros(&[2]));
    let x = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut r);
    let target = Tensor::from_fn(&[1, 2, 6, 6], |i| (i % 2) as f64);
    let rep = grad_check_params(
        "tiny-net",
        &params,
        |t, p| {
            let xv = t.constant(x.clone());
            let (w1, b1, g, be) = (t.param(p, w1), t.param(p, b1), t.param(p, g), t.param(p, be));
            let y = t.conv2d(xv, w1, b1, 1)?;
            let mut stats = RunningStats::new(2);
            let y = t.batch_norm(y, g, be, &mut stats, Mode::Train)?;
            let y = t.relu(y);
            let y = t.sigmoid(y);
            t.dice_loss(y, &target, 1.0)
        },
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn relu_propagates_nan() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(&[2], vec![f64::NAN, -1.0]).unwrap());
    let y = t.relu(x);
    assert!(t.value(y).data()[0].is_nan());
    assert_eq!(t.value(y).data()[1], 0.0);
}
