//! Analytic gradients against central finite differences (f64), and the
//! convolution kernel against a direct six-loop oracle.

use autodiff::check::{op_suite, penalty_parameter_errors, random, worst_error};
use autodiff::{Conv2dConfig, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn every_op_matches_finite_differences() {
    let results = op_suite(2024);
    assert!(results.len() >= 30);
    for (name, err) in results {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn double_backprop_penalty_matches_finite_differences() {
    for (k, err) in penalty_parameter_errors(2024).into_iter().enumerate() {
        assert!(err < 1e-3, "parameter {k}: relative error {err:e}");
    }
}

fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize, dil: usize) -> Vec<f32> {
    let [n, c, h, wd] = x.dims4("oracle").unwrap();
    let [o, _, kh, kw] = w.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_convolution_oracle() {
    let mut r = rng();
    let x: Tensor<f32> = random(&[2, 3, 8, 8], &mut r).cast();
    for (stride, pad, dil, k) in [(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1), (2, 2, 1, 5)] {
        let w: Tensor<f32> = random(&[4, 3, k, k], &mut r).cast();
        let y = autodiff::kernels::conv2d(&x, &w, Conv2dConfig::new(stride, pad, dil)).unwrap();
        let oracle = naive_conv(&x, &w, stride, pad, dil);
        assert_eq!(y.numel(), oracle.len());
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad} dil {dil}: {a} vs {b}");
        }
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut r = rng();
    let x = random(&[1, 2, 4, 4], &mut r);
    let w = random(&[2, 2, 3, 3], &mut r);
    let (a, b) = (0.7, -1.3);
    let grad_of = |combine: &dyn Fn(&mut Tape<f64>, Var, Var) -> Var| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let y = t.conv2d(xv, wv, Conv2dConfig::same(3, 1)).unwrap();
        let f = {
            let l = t.leaky_relu(y, 0.1).unwrap();
            t.sum(l).unwrap()
        };
        let g = {
            let sq = t.square(y).unwrap();
            t.mean(sq).unwrap()
        };
        let out = combine(&mut t, f, g);
        let gw = t.grad(out, &[wv], false).unwrap()[0];
        t.value(gw).clone()
    };
    let gf = grad_of(&|_, f, _| f);
    let gg = grad_of(&|_, _, g| g);
    let combined = grad_of(&|t, f, g| {
        let af = t.scale(f, a).unwrap();
        let bg = t.scale(g, b).unwrap();
        t.add(af, bg).unwrap()
    });
    for i in 0..combined.numel() {
        let expected = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - expected).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_replay_bit_identically() {
    let run = || {
        let mut r = rng();
        let mut t = Tape::<f32>::new();
        let x = t.leaf(random(&[2, 3, 8, 8], &mut r).cast());
        let w = t.leaf(random(&[4, 3, 3, 3], &mut r).cast());
        let y = t.conv2d(x, w, Conv2dConfig::new(2, 1, 1)).unwrap();
        let y = t.elu(y).unwrap();
        let s = t.mean(y).unwrap();
        let g = t.grad(s, &[x, w], false).unwrap();
        (t.value(g[0]).clone(), t.value(g[1]).clone())
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_hold_over_random_shapes(
        n in 1usize..3, c in 1usize..3, o in 1usize..3,
        h in 3usize..7, w in 3usize..7, stride in 1usize..3, dil in 1usize..3, seed in 0u64..1000,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = Conv2dConfig::new(stride, dil, dil);
        let x = random(&[n, c, h, w], &mut r);
        let k = random(&[o, c, 3, 3], &mut r);
        let err = worst_error(&[x, k], &move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], cfg).unwrap();
            t.leaky_relu(y, 0.1).unwrap()
        });
        prop_assert!(err < TOL);
    }
}
