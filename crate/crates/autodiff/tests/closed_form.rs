use std::rc::Rc;

use autodiff::{Adam, AdamConfig, Conv2dConfig, Params, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn affine_critic_penalty_has_closed_form_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 12;
    let lambda = 10.0;
    let x = Tensor::from_fn(&[1, k], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[1, k], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::from_fn(&[1], |_| rng.gen_range(-1.0..1.0));
    let keep: Vec<f64> = (0..k).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();

    let mut t: Tape<f64> = Tape::new();
    let xv = t.leaf(x.clone());
    let wv = t.leaf(w.clone());
    let bv = t.leaf(b);
    let d = t.linear(xv, wv, bv).unwrap();
    let out = t.sum(d).unwrap();
    let gx = t.grad(out, &[xv], true).unwrap()[0];
    assert_eq!(t.value(gx).data(), w.data());

    let masked = t.mask_scale(gx, Rc::new(Tensor::new(&[1, k], keep.clone()).unwrap())).unwrap();
    let sq = t.square(masked).unwrap();
    let s = t.sum(sq).unwrap();
    let norm = t.sqrt(s).unwrap();
    let gap = t.affine(norm, 1.0, -1.0).unwrap();
    let gap2 = t.square(gap).unwrap();
    let penalty = t.scale(gap2, lambda).unwrap();
    let gw = t.grad(penalty, &[wv], false).unwrap()[0];

    let wb: Vec<f64> = w.data().iter().zip(&keep).map(|(a, m)| a * m).collect();
    let n = wb.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((t.value(penalty).item() - lambda * (n - 1.0).powi(2)).abs() < 1e-12);
    for (i, got) in t.value(gw).data().iter().enumerate() {
        let want = 2.0 * lambda * (n - 1.0) * wb[i] / n;
        assert!((got - want).abs() < 1e-12, "element {i}: {got} vs {want}");
    }
}

fn train(steps: usize) -> Params<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = Params::new();
    params.push("conv.weight", Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen_range(-0.3..0.3)));
    params.push("conv.bias", Tensor::zeros(&[4]));
    let x = Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(-1.0..1.0f32));
    let target = Tensor::from_fn(&[2, 4, 6, 6], |_| rng.gen_range(-1.0..1.0f32));
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &params);
    for _ in 0..steps {
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        let xv = t.leaf(x.clone());
        let y = t.conv2d(xv, vars[0], Conv2dConfig::same(3, 1)).unwrap();
        let y = t.bias_add(y, vars[1]).unwrap();
        let y = t.leaky_relu(y, 0.2).unwrap();
        let tv = t.leaf(target.clone());
        let diff = t.sub(y, tv).unwrap();
        let loss = t.abs_sum(diff).unwrap();
        let grads = t.grad(loss, &vars, false).unwrap();
        let grads: Vec<_> = grads.iter().map(|g| t.value(*g).clone()).collect();
        adam.step(&mut params, &grads).unwrap();
    }
    params
}

#[test]
fn adam_training_is_bit_reproducible_over_100_steps() {
    let a = train(100);
    let b = train(100);
    let bits = |p: &Params<f32>| -> Vec<u32> {
        p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&train(0)));
}
