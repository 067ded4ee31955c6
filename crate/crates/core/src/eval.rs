//! Reconstruction and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::raster::{Image, Mask, Plane};
use crate::{Error, Result};

/// Reported PSNR for identical inputs.
pub const PSNR_EXACT: f64 = 99.0;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dimension(format!("images {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_EXACT
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Squared and absolute error sums over selected pixels, and the number of
/// channel values summed.
fn error_sums(a: &Image, b: &Image, mask: Option<&Mask>) -> (f64, f64, usize) {
    let (mut sq, mut abs, mut n) = (0.0f64, 0.0f64, 0usize);
    for (i, (p, q)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            sq += d * d;
            abs += d.abs();
        }
        n += 3;
    }
    (sq, abs, n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (sq, _, n) = error_sums(a, b, None);
    if n == 0 {
        return Err(Error::UndefinedMetric("empty image".into()));
    }
    Ok(psnr_from_mse(sq / n as f64))
}

/// PSNR restricted to the pixels of `mask`.
pub fn psnr_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    check(a, b)?;
    if !a.same_dims(mask) {
        return Err(Error::dimension("mask size differs from the images"));
    }
    let (sq, _, n) = error_sums(a, b, Some(mask));
    if n == 0 {
        return Err(Error::UndefinedMetric("empty mask".into()));
    }
    Ok(psnr_from_mse(sq / n as f64))
}

pub fn l1_percent(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (_, abs, n) = error_sums(a, b, None);
    if n == 0 {
        return Err(Error::UndefinedMetric("empty image".into()));
    }
    Ok(abs / n as f64 * 100.0)
}

/// Intersection over union per class in `classes` that occurs in `gt`,
/// averaged.
pub fn mean_iou(pred: &Plane<u8>, gt: &Plane<u8>, classes: &[u8]) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dimension("label maps differ in size"));
    }
    let mut total = 0.0;
    let mut present = 0;
    for &c in classes {
        let (mut inter, mut union, mut in_gt) = (0usize, 0usize, false);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            in_gt |= g == c;
            inter += (p == c && g == c) as usize;
            union += (p == c || g == c) as usize;
        }
        if in_gt {
            total += inter as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::UndefinedMetric("none of the classes occurs in the ground truth".into()));
    }
    Ok(total / present as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    /// `None` when there are no holes.
    pub psnr_holes_db: Option<f64>,
    pub l1_percent: f64,
    pub mean_iou: Option<f64>,
    pub pixels: usize,
    pub hole_pixels: usize,
}

impl MetricReport {
    pub fn compare(pred: &Image, gt: &Image, holes: Option<&Mask>) -> Result<Self> {
        let hole_pixels = holes.map_or(0, Mask::count);
        Ok(Self {
            psnr_db: psnr(pred, gt)?,
            psnr_holes_db: match holes {
                Some(m) if hole_pixels > 0 => Some(psnr_masked(pred, gt, m)?),
                _ => None,
            },
            l1_percent: l1_percent(pred, gt)?,
            mean_iou: None,
            pixels: pred.width() * pred.height(),
            hole_pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(16, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn identical_images() {
        let a = random_image(0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_EXACT);
        assert_eq!(l1_percent(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_closed_forms() {
        let a = Image::filled(8, 4, [0.25; 3]);
        let b = Image::filled(8, 4, [0.75; 3]);
        let c = Image::filled(8, 4, [0.5; 3]);
        // 0.25 and 0.5 are exact in binary, so the error is exactly 0.25.
        assert_eq!(l1_percent(&a, &c).unwrap(), 25.0);
        assert!((psnr(&b, &c).unwrap() - 10.0 * 16f64.log10()).abs() < 1e-12);
        let d = Image::filled(8, 4, [0.6; 3]);
        let e = Image::filled(8, 4, [0.5; 3]);
        assert!((psnr(&d, &e).unwrap() - 20.0).abs() < 1e-5);
        assert!((l1_percent(&d, &e).unwrap() - 10.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_and_l1_match_two_pass_oracles() {
        let (a, b) = (random_image(1), random_image(2));
        let diffs: Vec<f64> = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .flat_map(|(p, q)| (0..3).map(move |c| p[c] as f64 - q[c] as f64))
            .collect();
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let mae = diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert!((l1_percent(&a, &b).unwrap() - 100.0 * mae).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::filled(8, 4, [0.0; 3]);
        let b = Image::filled(4, 2, [0.0; 3]);
        assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(l1_percent(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn iou_cases() {
        let ones = Plane::filled(4, 4, 1u8);
        assert_eq!(mean_iou(&ones, &ones, &[1]).unwrap(), 1.0);
        let zeros = Plane::filled(4, 4, 0u8);
        assert_eq!(mean_iou(&zeros, &ones, &[1]).unwrap(), 0.0);
        let checker = Plane::from_fn(4, 4, |u, v| ((u + v) % 2) as u8);
        assert_eq!(mean_iou(&checker, &ones, &[1]).unwrap(), 0.5);
        assert!(matches!(mean_iou(&ones, &ones, &[2]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn masked_psnr_ignores_unmasked_pixels() {
        let a = Image::filled(4, 2, [0.5; 3]);
        let mut b = a.clone();
        b.set(0, 0, [0.0; 3]);
        let mut m = Mask::filled(4, 2, false);
        m.set(3, 1, true);
        assert_eq!(psnr_masked(&a, &b, &m).unwrap(), PSNR_EXACT);
        assert!(psnr(&a, &b).unwrap() < PSNR_EXACT);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_permutation_invariant(s1 in 0u64..1000, s2 in 0u64..1000, shift in 1usize..127) {
            let (a, b) = (random_image(s1), random_image(s2 + 1000));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert_eq!(l1_percent(&a, &b).unwrap(), l1_percent(&b, &a).unwrap());
            let perm = |img: &Image| {
                let mut px = img.pixels().to_vec();
                px.rotate_left(shift);
                Image::from_vec(16, 8, px).unwrap()
            };
            prop_assert!((psnr(&perm(&a), &perm(&b)).unwrap() - psnr(&a, &b).unwrap()).abs() < 1e-9);
            prop_assert!((l1_percent(&perm(&a), &perm(&b)).unwrap() - l1_percent(&a, &b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn iou_is_invariant_under_relabeling(data in prop::collection::vec(0u8..4, 64), pdata in prop::collection::vec(0u8..4, 64)) {
            let gt = Plane::from_vec(8, 8, data).unwrap();
            let pred = Plane::from_vec(8, 8, pdata).unwrap();
            let relabel = |p: &Plane<u8>| p.map(|&c| [2u8, 0, 3, 1][c as usize]);
            if let Ok(a) = mean_iou(&pred, &gt, &[0, 1, 2, 3]) {
                let b = mean_iou(&relabel(&pred), &relabel(&gt), &[0, 1, 2, 3]).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
