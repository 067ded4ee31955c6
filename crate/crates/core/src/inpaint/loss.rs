//! Adversarial and reconstruction objectives.

use std::collections::VecDeque;
use std::rc::Rc;

use autodiff::{Scalar, Tape, Tensor, Var};

use crate::raster::{Image, Mask, Plane};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_GAMMA: f64 = 0.99;
/// Weight of pixels outside the holes in the discounted L1.
pub const KNOWN_WEIGHT: f64 = 1.0;

/// A critic as a differentiable map `[N, 3, H, W] -> [N, 1]`.
pub type CriticFn<'a, T> = dyn Fn(&mut Tape<T>, Var) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: Var,
    /// `E[D(fake)] - E[D(real)]`.
    pub adversarial: Var,
    pub penalty: Var,
}

/// Per-sample constant broadcast over everything but the batch axis.
fn per_sample<T: Scalar>(shape: &[usize], values: &[T]) -> Tensor<T> {
    let inner: usize = shape[1..].iter().product();
    Tensor::from_fn(shape, |i| values[i / inner])
}

/// WGAN loss with a gradient penalty on `x̂ = u·real + (1-u)·fake`, the
/// gradient restricted by `penalty_mask` (1 inside the holes). `real` and
/// `fake` are constants for this loss; `u` holds one draw per sample.
pub fn wgan_gp_loss<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &CriticFn<'_, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    penalty_mask: &Tensor<T>,
    u: &[T],
    lambda: T,
) -> Result<CriticLoss> {
    let shape = real.shape().to_vec();
    if fake.shape() != shape.as_slice() || penalty_mask.shape() != shape.as_slice() {
        return Err(Error::dimension("real, fake and mask must share a shape"));
    }
    if u.len() != shape[0] {
        return Err(Error::dimension(format!("{} interpolation draws for {} samples", u.len(), shape[0])));
    }
    let r = tape.leaf(real.clone());
    let f = tape.leaf(fake.clone());
    let d_real = critic(tape, r)?;
    let d_fake = critic(tape, f)?;
    let m_real = tape.mean(d_real)?;
    let m_fake = tape.mean(d_fake)?;
    let adversarial = tape.sub(m_fake, m_real)?;

    let uu = per_sample(&shape, u);
    let mixed = Tensor::from_fn(&shape, |i| uu.data()[i] * real.data()[i] + (T::one() - uu.data()[i]) * fake.data()[i]);
    let x_hat = tape.leaf(mixed);
    let d_hat = critic(tape, x_hat)?;
    let s = tape.sum(d_hat)?;
    let g = tape.grad(s, &[x_hat], true)?[0];
    let masked = tape.mask_scale(g, Rc::new(penalty_mask.clone()))?;
    let sq = tape.square(masked)?;
    let per = tape.sum_per_sample(sq)?;
    let norm = tape.sqrt(per)?;
    let gap = tape.affine(norm, T::one(), -T::one())?;
    let gap2 = tape.square(gap)?;
    let mean_gap = tape.mean(gap2)?;
    let penalty = tape.scale(mean_gap, lambda)?;
    let total = tape.add(adversarial, penalty)?;
    Ok(CriticLoss {
        total,
        adversarial,
        penalty,
    })
}

/// `-E[D(fake)]`.
pub fn adversarial_gen_loss<T: Scalar>(tape: &mut Tape<T>, critic: &CriticFn<'_, T>, fake: Var) -> Result<Var> {
    let d = critic(tape, fake)?;
    let m = tape.mean(d)?;
    Ok(tape.neg(m)?)
}

/// 4-connected distance (no wrap) from each pixel to the nearest pixel
/// outside `holes`; 0 outside. With no known pixel at all every distance is
/// `width + height`.
pub fn hole_distance(holes: &Mask) -> Plane<usize> {
    let (w, h) = holes.dims();
    let mut dist = Plane::filled(w, h, usize::MAX);
    let mut queue = VecDeque::new();
    for (i, &hole) in holes.data().iter().enumerate() {
        if !hole {
            dist.data_mut()[i] = 0;
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return Plane::filled(w, h, w + h);
    }
    while let Some(i) = queue.pop_front() {
        let (u, v) = (i % w, i / w);
        let d = dist.data()[i] + 1;
        let next = [
            (u > 0).then(|| i - 1),
            (u + 1 < w).then(|| i + 1),
            (v > 0).then(|| i - w),
            (v + 1 < h).then(|| i + w),
        ];
        for j in next.into_iter().flatten() {
            if dist.data()[j] == usize::MAX {
                dist.data_mut()[j] = d;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// `M`: `gamma^l` inside the holes, [`KNOWN_WEIGHT`] elsewhere.
pub fn discount_mask(holes: &Mask, gamma: f64) -> Result<Plane<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let dist = hole_distance(holes);
    let mut out = Plane::filled(holes.width(), holes.height(), KNOWN_WEIGHT);
    for (i, &hole) in holes.data().iter().enumerate() {
        if hole {
            out.data_mut()[i] = gamma.powi(dist.data()[i] as i32);
        }
    }
    Ok(out)
}

/// Mean over pixels of `M` times the channel-summed absolute error.
pub fn discounted_l1(prediction: &Image, target: &Image, holes: &Mask, gamma: f64) -> Result<f64> {
    if prediction.dims() != target.dims() || !prediction.same_dims(holes) {
        return Err(Error::dimension("prediction, target and mask must share a size"));
    }
    let m = discount_mask(holes, gamma)?;
    let total: f64 = prediction
        .pixels()
        .iter()
        .zip(target.pixels())
        .zip(m.data())
        .map(|((p, q), &wgt)| wgt * (0..3).map(|c| (p[c] as f64 - q[c] as f64).abs()).sum::<f64>())
        .sum();
    Ok(total / m.data().len() as f64)
}

/// `[N, 3, H, W]` weight tensor for [`discounted_l1_var`].
pub fn discount_tensor<T: Scalar>(holes: &[Mask], gamma: f64) -> Result<Tensor<T>> {
    let first = holes.first().ok_or_else(|| Error::dimension("empty batch"))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(holes.len() * 3 * w * h);
    for m in holes {
        let d = discount_mask(m, gamma)?;
        if d.dims() != (w, h) {
            return Err(Error::dimension("hole masks differ in size"));
        }
        for _ in 0..3 {
            data.extend(d.data().iter().map(|&v| T::from_f64(v)));
        }
    }
    Ok(Tensor::new(&[holes.len(), 3, h, w], data)?)
}

/// Tape version of [`discounted_l1`], averaged over the batch as well.
pub fn discounted_l1_var<T: Scalar>(tape: &mut Tape<T>, prediction: Var, target: &Tensor<T>, weights: Rc<Tensor<T>>) -> Result<Var> {
    let shape = tape.shape(prediction).to_vec();
    if target.shape() != shape.as_slice() || weights.shape() != shape.as_slice() {
        return Err(Error::dimension("prediction, target and weights must share a shape"));
    }
    let pixels = shape[0] * shape[2] * shape[3];
    let t = tape.leaf(target.clone());
    let diff = tape.sub(prediction, t)?;
    let a = tape.abs(diff)?;
    let weighted = tape.mask_scale(a, weights)?;
    let s = tape.sum(weighted)?;
    Ok(tape.scale(s, T::one() / T::from_f64(pixels as f64))?)
}
