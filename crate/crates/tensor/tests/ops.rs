use std::sync::Arc;

use ivc_tensor::gradcheck;
use ivc_tensor::{conv_lstm_cell, ConvLstmWeights, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Direct nested-loop convolution used as the reference.
fn reference_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution.
fn reference_conv_transpose2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let fh = (h - 1) * stride + kh;
    let fw = (wd - 1) * stride + kw;
    let mut full = vec![0.0; n * cout * fh * fw];
    for s in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((s * cin + ci) * h + y) * wd + xx];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                full[((s * cout + co) * fh + y * stride + ky) * fw + xx * stride + kx] +=
                                    v * w.data()[((ci * cout + co) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (fh - 2 * pad, fw - 2 * pad);
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n * cout {
        for y in 0..oh {
            for xx in 0..ow {
                out[(s * oh + y) * ow + xx] = full[(s * fh + y + pad) * fw + xx + pad];
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12)).fold(0.0, f64::max)
}

fn leaf<T: ivc_tensor::Element>(tape: &mut Tape<T>, t: Tensor<T>, rg: bool) -> Var {
    tape.leaf(Arc::new(t), rg)
}

#[test]
fn conv2d_sum_of_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 9.0);
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut tape = Tape::<f32>::new();
    let input = Tensor::uniform(&[2, 1, 5, 6], 1.0, &mut rng(3));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let x = tape.constant(input.clone());
    let w = tape.constant(k);
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv2d_matches_direct_loops() {
    let x = rand_t(&[2, 3, 8, 8], 1);
    let w = rand_t(&[4, 3, 3, 3], 2);
    let b = rand_t(&[4], 3);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = reference_conv2d(&x, &w, b.data(), stride, pad);
        assert!(max_rel(tape.value(y), &want) < 1e-5, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv2d_reports_the_offending_dimension() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");

    let w = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");

    let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(tape.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn conv_transpose2d_overlap_sums() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
    let want = reference_conv_transpose2d(&Tensor::ones(&[1, 1, 2, 2]), &Tensor::ones(&[1, 1, 2, 2]), 2, 0);
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    assert_eq!(tape.value(y), &want);
    // Stride equals kernel: no overlap, every output cell receives one tap.
    assert!(tape.value(y).data().iter().all(|&v| v == 1.0));

    // Stride 1, 2x2 kernel: overlaps of 1, 2 and 4.
    let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
}

#[test]
fn conv_transpose2d_matches_scatter_reference() {
    let x = rand_t(&[2, 3, 4, 5], 11);
    let w = rand_t(&[3, 2, 3, 3], 12);
    for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (3, 1)] {
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv_transpose2d(xv, wv, None, stride, pad).unwrap();
        assert!(max_rel(tape.value(y), &reference_conv_transpose2d(&x, &w, stride, pad)) < 1e-9);
    }
}

#[test]
fn conv_transpose2d_identity_kernel_is_identity() {
    let input = rand_t(&[1, 2, 3, 4], 5);
    let mut k = Tensor::zeros(&[2, 2, 1, 1]);
    k.data_mut()[0] = 1.0;
    k.data_mut()[3] = 1.0;
    let mut tape = Tape::<f64>::new();
    let (x, w) = (tape.constant(input.clone()), tape.constant(k));
    let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_transpose2d_input_gradient_is_conv2d_of_upstream() {
    let x = rand_t(&[1, 3, 4, 4], 21);
    let w = rand_t(&[3, 2, 3, 3], 22);
    let upstream = rand_t(&[1, 2, 7, 7], 23);
    let mut tape = Tape::<f64>::new();
    let xv = leaf(&mut tape, x, true);
    let wv = leaf(&mut tape, w.clone(), false);
    let y = tape.conv_transpose2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), upstream.shape());
    let u = tape.constant(upstream.clone());
    let prod = tape.mul(y, u).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut t2 = Tape::<f64>::new();
    let (uv, wv) = (t2.constant(upstream), t2.constant(w));
    let want = t2.conv2d(uv, wv, None, 2, 1).unwrap();
    assert!(max_rel(grads.get(xv).unwrap(), t2.value(want)) < 1e-9);
}

fn adjoint_gap(x: &Tensor<f64>, y: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> f64 {
    gradcheck::adjoint_gap(x, y, w, stride, pad).unwrap()
}

#[test]
fn conv_and_transpose_are_adjoint() {
    // Sizes chosen so (H + 2p - k) is divisible by the stride.
    let x = rand_t(&[2, 3, 9, 7], 31);
    let w = rand_t(&[4, 3, 3, 3], 32);
    let y = rand_t(&[2, 4, 5, 4], 33);
    assert!(adjoint_gap(&x, &y, &w, 2, 1) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds_on_random_shapes(
        cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, oh in 1usize..5, ow in 1usize..5, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let h = (oh - 1) * stride + k - 2 * pad;
        let wdt = (ow - 1) * stride + k - 2 * pad;
        prop_assume!(h > 0 && wdt > 0);
        let x = rand_t(&[1, cin, h, wdt], seed);
        let w = rand_t(&[cout, cin, k, k], seed ^ 1);
        let y = rand_t(&[1, cout, oh, ow], seed ^ 2);
        prop_assert!(adjoint_gap(&x, &y, &w, stride, pad) < 1e-5);
    }

    #[test]
    fn identity_coordinates_sample_exactly(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let input = Tensor::<f32>::uniform(&[1, 2, h, w], 3.0, &mut rng(seed));
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(input.clone());
        let c = tape.constant(identity_grid(h, w, 0.0, 0.0));
        let y = tape.bilinear_sample(x, c).unwrap();
        prop_assert_eq!(tape.value(y), &input);
    }
}

fn identity_grid<T: ivc_tensor::Element>(h: usize, w: usize, dx: f64, dy: f64) -> Tensor<T> {
    Tensor::from_fn(&[1, h, w, 2], |i| {
        let (p, axis) = (i / 2, i % 2);
        let v = if axis == 0 { (p % w) as f64 + dx } else { (p / w) as f64 + dy };
        T::from_f64(v)
    })
}

#[test]
fn bilinear_on_a_ramp_is_linear() {
    let (h, w) = (3, 6);
    let ramp = Tensor::<f64>::from_fn(&[1, 1, h, w], |i| (i % w) as f64);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(ramp);
    let c = tape.constant(identity_grid(h, w, 0.5, 0.0));
    let y = tape.bilinear_sample(x, c).unwrap();
    let out = tape.value(y).data();
    for row in 0..h {
        for col in 0..w - 1 {
            assert_eq!(out[row * w + col], col as f64 + 0.5);
        }
        // Past the last column the sample clamps to the border value.
        assert_eq!(out[row * w + w - 1], (w - 1) as f64);
    }
}

#[test]
fn bilinear_integer_shift_clamps_border() {
    let (h, w) = (2, 4);
    let input = Tensor::<f32>::from_fn(&[1, 1, h, w], |i| i as f32);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input);
    // Sample one pixel to the left: output shifts right by one.
    let c = tape.constant(identity_grid(h, w, -1.0, 0.0));
    let y = tape.bilinear_sample(x, c).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 2.0, 4.0, 4.0, 5.0, 6.0]);
}

fn lstm_weights(tape: &mut Tape<f64>, vars: &[Var], stride: usize) -> ConvLstmWeights {
    let _ = tape;
    ConvLstmWeights { input: vars[0], hidden: vars[1], bias: vars[2], stride }
}

#[test]
fn lstm_with_zero_weights_and_state_outputs_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_t(&[1, 2, 3, 3], 4));
    let h = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let c = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let wx = tape.constant(Tensor::zeros(&[12, 2, 3, 3]));
    let wh = tape.constant(Tensor::zeros(&[12, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[12]));
    let wts = lstm_weights(&mut tape, &[wx, wh, b], 1);
    let (h2, c2) = conv_lstm_cell(&mut tape, x, (h, c), &wts).unwrap();
    assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_pixel_matches_scalar_arithmetic() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (x, h, c) = (0.7, -0.3, 0.4);
    let wx = [0.5, -1.0, 0.25, 2.0];
    let wh = [0.1, 0.3, -0.7, 0.9];
    let b = [0.05, 1.0, -0.2, 0.0];
    let pre: Vec<f64> = (0..4).map(|g| wx[g] * x + wh[g] * h + b[g]).collect();
    let (i, f, o, g) = (sig(pre[0]), sig(pre[1]), sig(pre[2]), pre[3].tanh());
    let c_want = f * c + i * g;
    let h_want = o * c_want.tanh();

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::full(&[1, 1, 1, 1], x));
    let hv = tape.constant(Tensor::full(&[1, 1, 1, 1], h));
    let cv = tape.constant(Tensor::full(&[1, 1, 1, 1], c));
    let wxv = tape.constant(Tensor::new(&[4, 1, 1, 1], wx.to_vec()).unwrap());
    let whv = tape.constant(Tensor::new(&[4, 1, 1, 1], wh.to_vec()).unwrap());
    let bv = tape.constant(Tensor::new(&[4], b.to_vec()).unwrap());
    let wts = lstm_weights(&mut tape, &[wxv, whv, bv], 1);
    let (h2, c2) = conv_lstm_cell(&mut tape, xv, (hv, cv), &wts).unwrap();
    assert!((tape.value(c2).item() - c_want).abs() < 1e-12);
    assert!((tape.value(h2).item() - h_want).abs() < 1e-12);
}

#[test]
fn lstm_three_unrolled_steps_match_finite_differences() {
    let inputs = vec![
        rand_t(&[1, 2, 4, 4], 41),
        Tensor::uniform(&[12, 2, 3, 3], 0.4, &mut rng(42)),
        Tensor::uniform(&[12, 3, 3, 3], 0.4, &mut rng(43)),
        Tensor::uniform(&[12], 0.4, &mut rng(44)),
    ];
    let report = gradcheck::check(&inputs, 1e-6, 1e-6, |tape, v| {
        let wts = ConvLstmWeights { input: v[1], hidden: v[2], bias: v[3], stride: 2 };
        let mut h = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let mut c = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        for _ in 0..3 {
            (h, c) = conv_lstm_cell(tape, v[0], (h, c), &wts)?;
        }
        let sq = tape.mul(h, h)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = leaf(&mut tape, Tensor::uniform(&[2, 3], 1.0, &mut rng(1)), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_l1_is_sign_with_zero_at_ties() {
    let mut tape = Tape::<f32>::new();
    let x = leaf(&mut tape, Tensor::new(&[4], vec![1.0, 2.0, 3.0, -1.0]).unwrap(), true);
    let y = tape.constant(Tensor::new(&[4], vec![0.5, 2.0, 4.0, -1.5]).unwrap());
    let d = tape.sub(x, y).unwrap();
    let a = tape.abs(d);
    let l = tape.sum(a);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, -1.0, 1.0]);
}

#[test]
fn gradients_accumulate_over_repeated_use() {
    let mut tape = Tape::<f64>::new();
    let x = leaf(&mut tape, Tensor::new(&[2], vec![3.0, -2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let both = tape.add(sq, x).unwrap();
    let l = tape.sum(both);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0, -3.0]);
}

#[test]
fn backward_on_detached_or_non_scalar_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(Tensor::ones(&[3]));
    let s = tape.sum(c);
    assert_eq!(tape.backward(s).unwrap_err(), TensorError::Detached);
    let x = leaf(&mut tape, Tensor::ones(&[3]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn composite_graph_matches_finite_differences() {
    let inputs = vec![rand_t(&[2, 2, 5, 5], 51), rand_t(&[3, 2, 3, 3], 52), rand_t(&[3], 53)];
    let r = gradcheck::check(&inputs, 1e-6, 1e-6, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

/// Every differentiable operation, each through a small random graph.
#[test]
fn every_operation_passes_finite_difference_checks() {
    let results = gradcheck::operation_suite().unwrap();
    assert!(results.len() >= 9);
    for (name, r) in results {
        println!("{name}: max rel err {:.2e} over {} entries", r.max_rel_err, r.checked);
        assert!(r.max_rel_err < 1e-3, "{name}: {r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut tape = Tape::<f32>::new();
    let x = leaf(&mut tape, Tensor::new(&[3], vec![0.2, -0.7, 0.0]).unwrap(), true);
    let y = tape.straight_through(x, Tensor::new(&[3], vec![1.0, -1.0, 1.0]).unwrap()).unwrap();
    let s = tape.sum(y);
    assert_eq!(tape.value(s).item(), 1.0);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn forward_passes_are_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform(&[2, 4, 9, 9], 1.0, &mut rng(7)));
        let w = tape.constant(Tensor::uniform(&[6, 4, 3, 3], 1.0, &mut rng(8)));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.tanh(y);
        tape.value(y).clone()
    };
    assert_eq!(
        run().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        run().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
