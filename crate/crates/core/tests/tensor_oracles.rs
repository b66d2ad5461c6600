//! Tensor kernels checked against naive nested loops and central finite
//! differences.

use bevtrack::tensor::{kernels, Adam, ParamGrads, ParamStore, Tape, Tensor, Var};
use bevtrack::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(&[co, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(&[co, y, xx], acc);
            }
        }
    }
    out
}

fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let s = x.shape();
    let (cin, t, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (ot, oh, ow) = (t - kt + 1, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
    let mut out = Tensor::zeros(&[cout, ot, oh, ow]);
    for co in 0..cout {
        for to in 0..ot {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for dt in 0..kt {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y + ky) as isize - pad as isize;
                                    let ix = (xx + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(&[co, ci, dt, ky, kx])
                                            * x.at(&[ci, to + dt, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                    }
                    out.set(&[co, to, y, xx], acc);
                }
            }
        }
    }
    out
}

fn naive_maxpool(x: &Tensor, k: usize, s: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x.at(&[ci, y * s + dy, xx * s + dx]));
                    }
                }
                out.set(&[ci, y, xx], m);
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_trivial_cases() {
    let x = Tensor::full(&[1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let out = kernels::conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(out.at(&[0, 1, 1]), 9.0);
    assert_eq!(out.at(&[0, 0, 0]), 4.0);

    let x = Tensor::full(&[1, 1, 1], 3.0);
    let w = Tensor::full(&[1, 1, 1, 1], -2.0);
    let out = kernels::conv2d(&x, &w, &Tensor::full(&[1], 0.5), 1, 0).unwrap();
    assert_eq!(out.data(), &[-5.5]);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
        if (5 + 2 * pad - 3) % stride != 0 {
            continue;
        }
        let fast = kernels::conv2d(&x, &w, &b, stride, pad).unwrap();
        assert!(max_abs_diff(&fast, &naive_conv2d(&x, &w, &b, stride, pad)) < 1e-12);
    }
}

#[test]
fn conv2d_shape_errors_name_dimension() {
    let x = Tensor::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    let err = kernels::conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
    assert!(err.to_string().contains("C_in"), "{err}");
    let w = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(kernels::conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
    let w = Tensor::zeros(&[1, 2, 3, 3]);
    let err = kernels::conv2d(&x, &w, &Tensor::zeros(&[1]), 2, 1).unwrap_err();
    assert!(err.to_string().contains("H"), "{err}");
}

#[test]
fn conv3d_collapses_time_and_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 5, 4, 6], &mut rng);
    let w1 = random(&[3, 2, 3, 3, 3], &mut rng);
    let b1 = random(&[3], &mut rng);
    let y = kernels::conv3d(&x, &w1, &b1, 1).unwrap();
    assert_eq!(y.shape(), &[3, 3, 4, 6]);
    assert!(max_abs_diff(&y, &naive_conv3d(&x, &w1, &b1, 1)) < 1e-12);
    let w2 = random(&[2, 3, 3, 3, 3], &mut rng);
    let z = kernels::conv3d(&y, &w2, &Tensor::zeros(&[2]), 1).unwrap();
    assert_eq!(z.shape(), &[2, 1, 4, 6]);
    assert!(max_abs_diff(&z, &naive_conv3d(&y, &w2, &Tensor::zeros(&[2]), 1)) < 1e-12);
    assert!(matches!(
        kernels::conv3d(&z, &w2, &Tensor::zeros(&[2]), 1),
        Err(Error::InsufficientTemporal { got: 1, kernel: 3, .. }) | Err(Error::Shape { .. })
    ));
}

#[test]
fn conv3d_zero_input_gives_bias() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[2, 1, 3, 3, 3], &mut rng);
    let b = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
    let y = kernels::conv3d(&x, &w, &b, 1).unwrap();
    assert!(y.data()[..16].iter().all(|&v| v == 0.25));
    assert!(y.data()[16..].iter().all(|&v| v == -1.5));
}

#[test]
fn conv3d_rejects_short_history() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
    assert!(matches!(
        kernels::conv3d(&x, &w, &Tensor::zeros(&[1]), 1),
        Err(Error::InsufficientTemporal { got: 2, kernel: 3, .. })
    ));
}

#[test]
fn temporal_group_conv_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 2, 3, 3], &mut rng);
    let one_hot = Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    let y = kernels::temporal_group_conv(&x, &one_hot).unwrap();
    assert_eq!(y.data(), &x.data()[3 * 18..]);
    let mean = kernels::temporal_group_conv(&x, &Tensor::full(&[4], 0.25)).unwrap();
    for c in 0..18 {
        let m: f64 = (0..4).map(|t| x.data()[t * 18 + c]).sum::<f64>() / 4.0;
        assert!((mean.data()[c] - m).abs() < 1e-12);
    }
    let w = random(&[4], &mut rng);
    let y = kernels::temporal_group_conv(&x, &w).unwrap();
    for c in 0..18 {
        let s: f64 = (0..4).map(|t| w.data()[t] * x.data()[t * 18 + c]).sum();
        assert!((y.data()[c] - s).abs() < 1e-12);
    }
    assert!(kernels::temporal_group_conv(&x, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn maxpool_cases() {
    let c = Tensor::full(&[2, 4, 4], 1.5);
    let (y, _) = kernels::maxpool2d(&c, 2, 2).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.5));

    let ramp = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let (y, arg) = kernels::maxpool2d(&ramp, 2, 2).unwrap();
    assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    assert_eq!(arg, vec![5, 7, 13, 15]);

    let (_, arg) = kernels::maxpool2d(&Tensor::full(&[1, 2, 2], 3.0), 2, 2).unwrap();
    assert_eq!(arg, vec![0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 7, 6], &mut rng);
    let (y, _) = kernels::maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(y.shape(), &[3, 3, 3]);
    assert!(max_abs_diff(&y, &naive_maxpool(&x, 2, 2)) < 1e-12);
}

#[test]
fn activations() {
    assert_eq!(kernels::sigmoid(0.0), 0.5);
    for x in [-700.0, 700.0, -30.0, 30.0] {
        let s = kernels::sigmoid(x);
        assert!(s.is_finite() && (0.0..=1.0).contains(&s));
    }
    assert!(kernels::sigmoid(-30.0) > 0.0 && kernels::sigmoid(30.0) < 1.0);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn bce_cases() {
    let mut tape = Tape::new();
    let p = tape.input(Tensor::new(vec![1], vec![0.5]).unwrap());
    let l = tape.bce_loss(p, &[1.0], &[true]).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    let e = tape.bce_loss(p, &[1.0], &[false]).unwrap();
    assert_eq!(tape.value(e).item(), 0.0);

    let near = tape.input(Tensor::new(vec![2], vec![1.0 - 1e-12, 1e-12]).unwrap());
    let l = tape.bce_loss(near, &[1.0, 0.0], &[true, true]).unwrap();
    assert!(tape.value(l).item() < 1e-10);

    let bad = tape.input(Tensor::new(vec![2], vec![0.3, 1.0]).unwrap());
    assert!(matches!(
        tape.bce_loss(bad, &[1.0, 1.0], &[true, true]),
        Err(Error::ProbabilityRange { index: 1, .. })
    ));
}

#[test]
fn bce_with_logits_agrees_with_bce() {
    let z = [-3.0, -0.2, 0.0, 1.7, 4.0];
    let q = [0.0, 1.0, 1.0, 0.0, 1.0];
    let mask = [true, true, false, true, true];
    let mut tape = Tape::new();
    let zv = tape.input(Tensor::new(vec![5], z.to_vec()).unwrap());
    let p = tape.sigmoid(zv).unwrap();
    let a = tape.bce_loss(p, &q, &mask).unwrap();
    let b = tape.bce_with_logits(zv, &q, &mask).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);
}

#[test]
fn smooth_l1_values() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![3], vec![0.5, 2.0, 0.0]).unwrap());
    for (i, expected) in [0.125, 1.5, 0.0].into_iter().enumerate() {
        let mut mask = [false; 3];
        mask[i] = true;
        let l = tape.smooth_l1(x, &[0.0; 3], &mask).unwrap();
        assert_eq!(tape.value(l).item(), expected);
    }
}

#[test]
fn backward_square_sum() {
    let mut store = ParamStore::new();
    let id = store
        .add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let sq = tape.mul(p, p).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap().for_params(&store);
    assert_eq!(g.get(id).data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_constant_graph_and_misuse() {
    let mut store = ParamStore::new();
    let id = store.add("unused", Tensor::full(&[2], 1.0)).unwrap();
    let mut tape = Tape::new();
    let c = tape.input(Tensor::full(&[2], 3.0));
    let l = tape.sum(c).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(grads.for_params(&store).get(id).data().iter().all(|&v| v == 0.0));
    assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));

    let mut other = Tape::new();
    assert!(matches!(other.backward(l), Err(Error::ForeignVariable)));
    let v = other.input(Tensor::full(&[2], 1.0));
    assert!(matches!(other.backward(v), Err(Error::NonScalarLoss(_))));
}

/// Central-difference check of `d loss / d input` for a graph builder.
fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = vals.iter().map(|v| t.input(v.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (n, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[n].shape()));
        for k in 0..inputs[n].len() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradient_conv2d_relu_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random(&[2, 5, 5], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    for (stride, pad) in [(1, 1), (2, 1)] {
        let err = fd_check(&inputs, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            let r = t.relu(c).unwrap();
            let sq = t.mul(r, r).unwrap();
            t.sum(sq).unwrap()
        });
        assert!(err < 1e-4, "stride {stride}: {err}");
    }
}

#[test]
fn gradient_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random(&[2, 4, 4, 3], &mut rng),
        random(&[2, 2, 3, 3, 3], &mut rng),
        random(&[2], &mut rng),
    ];
    let err = fd_check(&inputs, |t, v| {
        let c = t.conv3d(v[0], v[1], v[2], 1).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradient_temporal_and_pool_and_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(&[3, 2, 4, 4], &mut rng), random(&[3], &mut rng)];
    let err = fd_check(&inputs, |t, v| {
        let c = t.temporal_group_conv(v[0], v[1]).unwrap();
        let p = t.maxpool2d(c, 2, 2).unwrap();
        let s = t.sigmoid(p).unwrap();
        let s = t.scale(s, 3.0).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum(sq).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradient_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = random(&[6], &mut rng);
    let pred = Tensor::from_fn(&[6], |i| [0.3, -2.5, 1.7, 0.05, -0.6, 3.0][i]);
    let q = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let mask = [true, true, false, true, true, true];
    let target = [0.0, 0.0, 0.0, 0.3, 0.2, 0.1];
    let err = fd_check(&[logits, pred], |t, v| {
        let p = t.sigmoid(v[0]).unwrap();
        let a = t.bce_loss(p, &q, &mask).unwrap();
        let b = t.bce_with_logits(v[0], &q, &mask).unwrap();
        let c = t.smooth_l1(v[1], &target, &mask).unwrap();
        let ab = t.add(a, b).unwrap();
        let abc = t.add(ab, c).unwrap();
        let r = t.reshape(abc, &[1]).unwrap();
        t.scale(r, 0.5).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    let mut opt = Adam::new(&store, 1e-3);
    let zero = ParamGrads::zeros_like(&store);
    opt.step(&mut store, &zero);
    assert_eq!(store.get(id).data(), &[1.0, -1.0]);
}

/// Two steps evaluated by hand from the update rule.
#[test]
fn adam_hand_steps() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(1.0)).unwrap();
    let lr = 0.1;
    let mut opt = Adam::new(&store, lr);
    let grad_with = |g: f64, store: &ParamStore| {
        let mut t = Tape::new();
        let p = t.param(store, id);
        let s = t.scale(p, g).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap().for_params(store)
    };
    // step 1, g = 2: m = 0.2, v = 0.004, m_hat = 2, v_hat = 4 -> delta = -0.1 * 2 / (2 + 1e-8)
    let g = grad_with(2.0, &store);
    opt.step(&mut store, &g);
    let p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((store.get(id).item() - p1).abs() < 1e-15);
    assert!((store.get(id).item() - 0.9).abs() < 1e-8);
    // step 2, g = -1: m = 0.9*0.2 - 0.1 = 0.08, v = 0.999*0.004 + 0.001 = 0.004996
    let g = grad_with(-1.0, &store);
    opt.step(&mut store, &g);
    let m_hat = 0.08 / (1.0 - 0.81);
    let v_hat = 0.004996 / (1.0 - 0.999f64 * 0.999);
    let p2 = p1 - lr * m_hat / (v_hat.sqrt() + 1e-8);
    assert!(
        (store.get(id).item() - p2).abs() < 1e-12,
        "{} vs {p2}",
        store.get(id).item()
    );
}

#[test]
fn forward_backward_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random(&[2, 6, 6], &mut rng);
    let w = random(&[2, 2, 3, 3], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.input(x.clone()), t.input(w.clone()), t.input(Tensor::zeros(&[2])));
        let c = t.conv2d(xv, wv, bv, 1, 1).unwrap();
        let p = t.maxpool2d(c, 2, 2).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item().to_bits(), g.wrt(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn constant_inputs_get_no_gradient_and_change_nothing_else() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 3, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let run = |constant: bool| {
        let mut t = Tape::new();
        let xv = if constant {
            t.constant(x.clone())
        } else {
            t.input(x.clone())
        };
        let (wv, bv) = (t.input(w.clone()), t.input(Tensor::zeros(&[3])));
        let c = t.conv3d(xv, wv, bv, 1).unwrap();
        let sq = t.mul(c, c).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        (g.wrt(xv).is_some(), g.wrt(wv).unwrap().clone())
    };
    let (with_x, gw) = run(false);
    let (const_x, gw_const) = run(true);
    assert!(with_x && !const_x);
    assert_eq!(gw, gw_const);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    use bevtrack::tensor::{decode_checkpoint, encode_checkpoint};
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::new();
    store.add("a.weight", random(&[2, 3, 3, 3], &mut rng)).unwrap();
    store
        .add("a.bias", Tensor::new(vec![2], vec![-0.0, f64::MIN_POSITIVE]).unwrap())
        .unwrap();
    let bytes = encode_checkpoint(&store, "{\"meta\":1}");
    let (back, meta) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(meta, "{\"meta\":1}");
    assert_eq!(encode_checkpoint(&back, &meta), bytes);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_agrees_with_naive_on_random_shapes(
        cin in 1usize..4, cout in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), pad in 0usize..2, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let b = random(&[cout], &mut rng);
        let fast = kernels::conv2d(&x, &wt, &b, 1, pad).unwrap();
        prop_assert!(max_abs_diff(&fast, &naive_conv2d(&x, &wt, &b, 1, pad)) < 1e-12);
    }

    #[test]
    fn conv3d_agrees_with_naive_on_random_shapes(
        cin in 1usize..4, t in 3usize..5, h in 2usize..8, w in 2usize..8, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[cin, t, h, w], &mut rng);
        let wt = random(&[2, cin, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let fast = kernels::conv3d(&x, &wt, &b, 1).unwrap();
        prop_assert!(max_abs_diff(&fast, &naive_conv3d(&x, &wt, &b, 1)) < 1e-12);
    }

    #[test]
    fn maxpool_agrees_with_naive(c in 1usize..4, h in 2usize..9, w in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng);
        let (y, _) = kernels::maxpool2d(&x, 2, 2).unwrap();
        prop_assert!(max_abs_diff(&y, &naive_maxpool(&x, 2, 2)) < 1e-12);
    }
}
