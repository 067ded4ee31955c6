//! Analytic gradients against central finite differences, in `f64`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Conv2dConfig, Resampler, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// Builds an expression from leaf variables.
pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.5..2.0))
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both
/// are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// `sum(build(inputs) * r)` for a fixed random `r`, so every output element
/// contributes with a distinct weight.
fn weighted_loss(tape: &mut Tape<f64>, inputs: &[Tensor<f64>], build: &Build, seed: u64) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Rc::new(random(tape.shape(y), &mut rng));
    let weighted = tape.mask_scale(y, r).expect("weights share the output shape");
    (tape.sum(weighted).expect("sum of a tensor"), vars)
}

/// Relative error of the gradient with respect to each input.
pub fn gradient_errors(inputs: &[Tensor<f64>], build: &Build) -> Vec<f64> {
    let seed = 99;
    let value = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let (l, _) = weighted_loss(&mut tape, inputs, build, seed);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let (l, vars) = weighted_loss(&mut tape, inputs, build, seed);
    let grads = tape.grad(l, &vars, false).expect("gradient of a scalar");
    grads
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let analytic = tape.value(*g).data().to_vec();
            let numeric: Vec<f64> = (0..inputs[k].numel())
                .map(|i| {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += STEP;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= STEP;
                    (value(&plus) - value(&minus)) / (2.0 * STEP)
                })
                .collect();
            relative_error(&analytic, &numeric)
        })
        .collect()
}

/// Worst input error of one expression.
pub fn worst_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    gradient_errors(inputs, build).into_iter().fold(0.0, f64::max)
}

/// Every differentiable operation, each on random inputs, with its worst
/// relative gradient error.
pub fn op_suite(seed: u64) -> Vec<(String, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build| {
        out.push((name.to_string(), worst_error(&inputs, build)));
    };

    let s = [2, 3, 2, 2];
    let (a, b) = (random(&s, &mut r), random(&s, &mut r));
    run("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap());
    run("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap());
    run("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap());
    run("div", vec![a.clone(), positive(&s, &mut r)], &|t, v| t.div(v[0], v[1]).unwrap());
    run("square", vec![a.clone()], &|t, v| t.square(v[0]).unwrap());
    run("affine", vec![a.clone()], &|t, v| t.affine(v[0], -1.7, 0.3).unwrap());
    run("scale", vec![a.clone()], &|t, v| t.scale(v[0], 2.5).unwrap());
    run("neg", vec![a.clone()], &|t, v| t.neg(v[0]).unwrap());
    run("abs", vec![a.clone()], &|t, v| t.abs(v[0]).unwrap());
    run("sqrt", vec![positive(&s, &mut r)], &|t, v| t.sqrt(v[0]).unwrap());
    run("leaky_relu", vec![a.clone()], &|t, v| t.leaky_relu(v[0], 0.1).unwrap());
    run("elu", vec![a.clone()], &|t, v| t.elu(v[0]).unwrap());
    run("tanh", vec![a.clone()], &|t, v| t.tanh(v[0]).unwrap());
    let mask = Rc::new(random(&s, &mut r));
    run("mask_scale", vec![a], &move |t, v| t.mask_scale(v[0], mask.clone()).unwrap());

    let x = random(&[3, 2, 2, 3], &mut r);
    run("sum", vec![x.clone()], &|t, v| t.sum(v[0]).unwrap());
    run("mean", vec![x.clone()], &|t, v| t.mean(v[0]).unwrap());
    run("abs_sum", vec![x.clone()], &|t, v| t.abs_sum(v[0]).unwrap());
    run("sum_per_sample", vec![x], &|t, v| t.sum_per_sample(v[0]).unwrap());

    for (cfg, k, label) in [
        (Conv2dConfig::same(3, 1), 3, "conv2d 3x3"),
        (Conv2dConfig::new(2, 1, 1), 3, "conv2d stride 2"),
        (Conv2dConfig::same(3, 2), 3, "conv2d dilation 2"),
        (Conv2dConfig::new(1, 0, 1), 1, "conv2d 1x1"),
        (Conv2dConfig::new(2, 0, 1), 2, "conv2d 2x2 stride 2"),
    ] {
        let x = random(&[2, 2, 5, 6], &mut r);
        let w = random(&[3, 2, k, k], &mut r);
        run(label, vec![x, w], &move |t, v| t.conv2d(v[0], v[1], cfg).unwrap());
    }

    run("bias_add", vec![random(&[2, 3, 2, 2], &mut r), random(&[3], &mut r)], &|t, v| {
        t.bias_add(v[0], v[1]).unwrap()
    });
    run("matmul", vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)], &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    run("transpose", vec![random(&[3, 4], &mut r)], &|t, v| t.transpose(v[0]).unwrap());
    run("reshape", vec![random(&[2, 3, 2, 2], &mut r)], &|t, v| t.reshape(v[0], &[2, 12]).unwrap());
    run(
        "linear",
        vec![random(&[2, 5], &mut r), random(&[3, 5], &mut r), random(&[3], &mut r)],
        &|t, v| t.linear(v[0], v[1], v[2]).unwrap(),
    );

    let x = random(&[2, 2, 4, 6], &mut r);
    run("upsample2", vec![x.clone()], &|t, v| t.upsample2(v[0]).unwrap());
    run("concat", vec![x.clone(), random(&[2, 3, 4, 6], &mut r)], &|t, v| {
        t.concat(&[v[0], v[1]]).unwrap()
    });
    run("slice_channels", vec![random(&[2, 4, 3, 3], &mut r)], &|t, v| {
        t.slice_channels(v[0], 1, 2).unwrap()
    });
    run("crop", vec![x.clone()], &|t, v| t.crop(v[0], 1, 2, 2, 3).unwrap());
    let map = Rc::new(Resampler {
        input_hw: (4, 6),
        output_hw: (2, 2),
        samples: vec![
            vec![(0, 0, 0.5), (0, 7, 0.5), (1, 3, 1.0), (2, 10, 0.25), (2, 11, 0.75), (3, 23, 1.0)],
            vec![(0, 5, 1.0), (1, 6, 0.3), (1, 12, 0.7), (3, 17, 1.0)],
        ],
    });
    run("resample", vec![x], &move |t, v| t.resample(v[0], map.clone()).unwrap());

    // d/dw of ||d(sum crop(upsample(conv(x, w))))/dx||^2 runs every
    // recorded backward through a second differentiation.
    run(
        "second order conv/upsample/crop",
        vec![random(&[1, 2, 5, 5], &mut r), random(&[2, 2, 3, 3], &mut r)],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], Conv2dConfig::new(2, 1, 2)).unwrap();
            let up = t.upsample2(y).unwrap();
            let c = t.crop(up, 1, 0, 3, 4).unwrap();
            let s = t.sum(c).unwrap();
            let g = t.grad(s, &[v[0]], true).unwrap()[0];
            t.square(g).unwrap()
        },
    );
    out
}

/// Two stride-2 convs with leaky activations and a linear head.
pub fn small_critic(t: &mut Tape<f64>, x: Var, p: &[Var]) -> Var {
    let h = t.conv2d(x, p[0], Conv2dConfig::new(2, 1, 1)).unwrap();
    let h = t.bias_add(h, p[1]).unwrap();
    let h = t.leaky_relu(h, 0.2).unwrap();
    let h = t.conv2d(h, p[2], Conv2dConfig::new(2, 1, 1)).unwrap();
    let h = t.leaky_relu(h, 0.2).unwrap();
    let n = t.shape(h)[0];
    let k = t.shape(h)[1..].iter().product();
    let flat = t.reshape(h, &[n, k]).unwrap();
    t.linear(flat, p[3], p[4]).unwrap()
}

/// `sum over samples of (||d critic / d x|| - 1)^2` through a recorded backward.
pub fn penalty(t: &mut Tape<f64>, x: Var, p: &[Var]) -> Var {
    let d = small_critic(t, x, p);
    let s = t.sum(d).unwrap();
    let g = t.grad(s, &[x], true).unwrap()[0];
    let sq = t.square(g).unwrap();
    let per = t.sum_per_sample(sq).unwrap();
    let norm = t.sqrt(per).unwrap();
    let centered = t.affine(norm, 1.0, -1.0).unwrap();
    let c2 = t.square(centered).unwrap();
    t.sum(c2).unwrap()
}

/// Relative error of the penalty's parameter gradients on an `8x8`,
/// two-sample input.
pub fn penalty_parameter_errors(seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 1, 8, 8], &mut r);
    let params = vec![
        random(&[2, 1, 3, 3], &mut r),
        random(&[2], &mut r),
        random(&[2, 2, 3, 3], &mut r),
        random(&[1, 8], &mut r),
        random(&[1], &mut r),
    ];
    let eval = |params: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let pv: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let l = penalty(&mut t, xv, &pv);
        t.value(l).item()
    };
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let pv: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
    let l = penalty(&mut t, xv, &pv);
    let grads = t.grad(l, &pv, false).unwrap();
    grads
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let analytic = t.value(*g).data().to_vec();
            let numeric: Vec<f64> = (0..params[k].numel())
                .map(|i| {
                    let mut plus = params.clone();
                    plus[k].data_mut()[i] += STEP;
                    let mut minus = params.clone();
                    minus[k].data_mut()[i] -= STEP;
                    (eval(&plus) - eval(&minus)) / (2.0 * STEP)
                })
                .collect();
            relative_error(&analytic, &numeric)
        })
        .collect()
}
