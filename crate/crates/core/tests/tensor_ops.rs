use hrvq::exec;
use hrvq::seeded_rng;
use hrvq::tensor::kernels::{conv2d_forward, conv2d_transpose_forward, matmul};
use hrvq::tensor::{AdamConfig, AdamState, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

mod common;
use common::random;

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = x.dims4("x").unwrap();
    let [o, _, k, _] = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize] as f64;
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx] as f64;
                                s += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

fn naive_conv_transpose(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [b, ic_n, h, wd] = x.dims4("x").unwrap();
    let [_, oc_n, k, _] = w.dims4("w").unwrap();
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0f64; b * oc_n * oh * ow];
    for bi in 0..b {
        for ic in 0..ic_n {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((bi * ic_n + ic) * h + y) * wd + xx] as f64;
                    for oc in 0..oc_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xx * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ic * oc_n + oc) * k + ky) * k + kx] as f64;
                                out[((bi * oc_n + oc) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol * (1.0 + w.abs()), "element {i}: {g} vs {w}");
    }
}

#[test]
fn conv_matches_naive_oracle() {
    for (i, &(x, w, s, p)) in [
        ([2, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ([1, 2, 5, 5], [3, 2, 3, 3], 2, 1),
        ([2, 1, 8, 8], [2, 1, 4, 4], 2, 3),
        ([1, 3, 4, 4], [2, 3, 1, 1], 1, 0),
    ]
    .iter()
    .enumerate()
    {
        let (xt, wt) = (random(&x, 10 + i as u64), random(&w, 20 + i as u64));
        let got = conv2d_forward(&xt, &wt, s, p).unwrap();
        assert_close(got.data(), &naive_conv(&xt, &wt, s, p), 1e-6);
    }
}

#[test]
fn transposed_conv_matches_naive_oracle_and_is_the_adjoint() {
    for (i, &(x, w, s, p)) in [([2, 4, 3, 3], [4, 2, 4, 4], 2, 1), ([1, 2, 5, 5], [2, 3, 3, 3], 1, 1), ([1, 2, 5, 5], [2, 1, 4, 4], 2, 3)]
        .iter()
        .enumerate()
    {
        let (yt, wt) = (random(&x, 30 + i as u64), random(&w, 40 + i as u64));
        let up = conv2d_transpose_forward(&yt, &wt, s, p).unwrap();
        assert_close(up.data(), &naive_conv_transpose(&yt, &wt, s, p), 1e-6);
        // <conv(u, w), y> == <u, conv_transpose(y, w)>
        let u = random(up.shape(), 50 + i as u64);
        let down = conv2d_forward(&u, &wt, s, p).unwrap();
        assert_eq!(down.shape(), yt.shape());
        let lhs: f64 = down.data().iter().zip(yt.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = u.data().iter().zip(up.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn bad_geometry_is_a_shape_error() {
    let x = random(&[1, 2, 6, 6], 1);
    assert!(conv2d_forward(&x, &random(&[3, 3, 3, 3], 2), 1, 1).is_err());
    assert!(conv2d_forward(&x, &random(&[3, 2, 3, 3], 2), 2, 1).is_err());
    assert!(conv2d_forward(&x, &random(&[3, 2, 9, 9], 2), 1, 0).is_err());
    assert!(conv2d_transpose_forward(&x, &random(&[3, 2, 3, 3], 2), 1, 1).is_err());
    assert!(matmul(&random(&[2, 3], 1), &random(&[4, 2], 2)).is_err());
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let (x, w) = (random(&[4, 3, 9, 9], 5), random(&[5, 3, 3, 3], 6));
    let was = exec::is_parallel();
    exec::set_parallel(true);
    let a = conv2d_forward(&x, &w, 1, 1).unwrap();
    let at = conv2d_transpose_forward(&a, &w, 1, 1).unwrap();
    exec::set_parallel(false);
    let b = conv2d_forward(&x, &w, 1, 1).unwrap();
    let bt = conv2d_transpose_forward(&b, &w, 1, 1).unwrap();
    exec::set_parallel(was);
    assert_eq!(a, b);
    assert_eq!(at, bt);
}

#[test]
fn every_op_passes_gradcheck() {
    for (name, err) in common::ops::op_corpus() {
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn stop_gradient_branches_contribute_exactly_zero() {
    let (a, b) = (random(&[2, 3], 1), random(&[2, 3], 2));
    let mut g = Graph::new();
    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
    let s = g.stop_gradient(va).unwrap();
    let p = g.mul(s, vb).unwrap();
    let root = g.sum(p).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(grads.get(va).is_none());
    assert_eq!(grads.get(vb).unwrap(), a.data());

    // Straight-through: the quantized operand never receives gradient and
    // the continuous one receives the upstream gradient unchanged.
    let mut g = Graph::new();
    let (vc, vq) = (g.param(a.clone()), g.param(b.clone()));
    let st = g.straight_through(vc, vq).unwrap();
    assert_eq!(g.value(st), &b);
    let w = g.constant(Tensor::full([2, 3], 3.0));
    let p = g.mul(st, w).unwrap();
    let root = g.sum(p).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(grads.get(vq).is_none());
    assert_eq!(grads.get(vc).unwrap(), &[3.0; 6]);
}

#[test]
fn tape_is_single_use_and_root_must_be_scalar() {
    let mut g = Graph::new();
    let a = g.param(random(&[2, 2], 1));
    assert!(g.backward(a).is_err());
    let mut g = Graph::new();
    let a = g.param(random(&[2, 2], 1));
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(hrvq::Error::TapeReused)));
}

#[test]
fn adam_matches_reference_update() {
    let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut params = vec![random(&[4], 1)];
    let mut state = AdamState::new(cfg, &params);
    let (mut m, mut v) = (vec![0.0f64; 4], vec![0.0f64; 4]);
    let mut reference: Vec<f64> = params[0].data().iter().map(|&x| x as f64).collect();
    for step in 1..=5 {
        let grad: Vec<f32> = (0..4).map(|j| ((step * 7 + j * 3) % 5) as f32 - 2.0).collect();
        state.apply(&mut params, &["w".into()], &[grad.clone()]).unwrap();
        for j in 0..4 {
            let gj = grad[j] as f64;
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let mh = m[j] / (1.0 - 0.9f64.powi(step as i32));
            let vh = v[j] / (1.0 - 0.999f64.powi(step as i32));
            reference[j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for (j, &p) in params[0].data().iter().enumerate() {
            assert!((p as f64 - reference[j]).abs() < 1e-6, "step {step} element {j}: {p} vs {}", reference[j]);
        }
    }
    assert_eq!(state.step, 5);
}

#[test]
fn adam_rejects_non_finite_gradients_without_side_effects() {
    let mut params = vec![random(&[3], 1)];
    let mut state = AdamState::new(AdamConfig::default(), &params);
    let before = (params.clone(), state.clone());
    let err = state.apply(&mut params, &["w".into()], &[vec![0.0, f32::NAN, 1.0]]);
    assert!(matches!(err, Err(hrvq::Error::NonFinite(_))));
    assert_eq!((params, state), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_agrees_with_oracle_on_random_geometry(
        b in 1usize..3, c in 1usize..4, o in 1usize..4, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, extra in 0usize..4, seed in any::<u64>(),
    ) {
        let side = k + stride * extra;
        prop_assume!((2 * pad) % stride == 0);
        let x = random(&[b, c, side, side], seed);
        let w = random(&[o, c, k, k], seed ^ 1);
        let got = conv2d_forward(&x, &w, stride, pad).unwrap();
        let want = naive_conv(&x, &w, stride, pad);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() <= 1e-6 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let (x, w) = (random(&[m, k], seed), random(&[k, n], seed ^ 7));
        let got = matmul(&x, &w).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| x.data()[i * k + t] as f64 * w.data()[t * n + j] as f64).sum();
                prop_assert!((got.data()[i * n + j] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_channels_rows_sum_to_one(b in 1usize..3, v in 2usize..6, s in 1usize..4, seed in any::<u64>()) {
        let logits = Tensor::from_fn([b, v, s, s], {
            let mut rng = seeded_rng(seed);
            move |_| rng.random_range(-20.0f32..20.0)
        });
        let p = hrvq::tensor::softmax_channels(&logits).unwrap();
        for bi in 0..b {
            for pos in 0..s * s {
                let total: f32 = (0..v).map(|k| p.data()[(bi * v + k) * s * s + pos]).sum();
                prop_assert!((total - 1.0).abs() < 1e-5);
            }
        }
    }
}
