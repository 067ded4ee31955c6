//! Deterministic multi-view hole filling.

use crate::raster::{Image, Mask};
use crate::reprojection::RemovalReprojection;
use crate::{Error, Result};

/// Order in which the neighbors `[t-2, t-1, t+1, t+2]` are consulted.
pub const PRIORITY: [usize; 4] = [1, 2, 0, 3];

pub const DIFFUSION_TOLERANCE: f32 = 1e-4;
pub const DIFFUSION_MAX_SWEEPS: usize = 200_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeFill {
    pub rgb: Image,
    /// Hole pixels no view covered, filled by diffusion.
    pub residual: Mask,
    pub sweeps: usize,
}

pub fn composite_fill(holed: &Image, holes: &Mask, reprojections: &[RemovalReprojection]) -> Result<CompositeFill> {
    if !holed.same_dims(holes) {
        return Err(Error::dimension("hole mask does not match the image"));
    }
    if reprojections.len() != 4 {
        return Err(Error::dimension(format!("expected 4 reprojections, got {}", reprojections.len())));
    }
    if reprojections
        .iter()
        .any(|r| !r.rgb.same_dims(holes) || !r.valid.same_dims(holes))
    {
        return Err(Error::dimension("reprojection does not match the hole mask"));
    }
    let mut rgb = holed.clone();
    let mut residual = Mask::filled(holes.width(), holes.height(), false);
    for (i, &hole) in holes.data().iter().enumerate() {
        if !hole {
            continue;
        }
        match PRIORITY.iter().map(|&k| &reprojections[k]).find(|r| r.valid.data()[i]) {
            Some(r) => rgb.pixels_mut()[i] = r.rgb.pixels()[i],
            None => residual.data_mut()[i] = true,
        }
    }
    let sweeps = diffuse(&mut rgb, &residual);
    Ok(CompositeFill { rgb, residual, sweeps })
}

fn neighbors(u: usize, v: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let cand = [
        (u > 0).then(|| v * w + u - 1),
        (u + 1 < w).then(|| v * w + u + 1),
        (v > 0).then(|| (v - 1) * w + u),
        (v + 1 < h).then(|| (v + 1) * w + u),
    ];
    cand.into_iter().flatten()
}

/// Fills `unknown` pixels by repeated in-place averaging of their 4-neighbors
/// (no wrap) until no value moves by [`DIFFUSION_TOLERANCE`] or more.
///
/// Unknown pixels start at the mean of the known pixels bordering them.
/// Returns the number of sweeps.
pub fn diffuse(image: &mut Image, unknown: &Mask) -> usize {
    let (w, h) = image.dims();
    let todo: Vec<usize> = (0..w * h).filter(|&i| unknown.data()[i]).collect();
    if todo.is_empty() {
        return 0;
    }
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for i in 0..w * h {
        if unknown.data()[i] {
            continue;
        }
        if neighbors(i % w, i / w, w, h).any(|j| unknown.data()[j]) {
            let p = image.pixels()[i];
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return 0;
    }
    let start = sum.map(|s| (s / n as f64) as f32);
    let px = image.pixels_mut();
    for &i in &todo {
        px[i] = start;
    }
    for sweep in 1..=DIFFUSION_MAX_SWEEPS {
        let mut change = 0.0f32;
        for &i in &todo {
            let mut acc = [0.0f32; 3];
            let mut k = 0.0f32;
            for j in neighbors(i % w, i / w, w, h) {
                for c in 0..3 {
                    acc[c] += px[j][c];
                }
                k += 1.0;
            }
            let next = acc.map(|a| a / k);
            for c in 0..3 {
                change = change.max((next[c] - px[i][c]).abs());
            }
            px[i] = next;
        }
        if change < DIFFUSION_TOLERANCE {
            return sweep;
        }
    }
    DIFFUSION_MAX_SWEEPS
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reprojection(rgb: Image, valid: Mask) -> RemovalReprojection {
        RemovalReprojection {
            rgb,
            valid,
            source_index: 0,
            target_index: 2,
        }
    }

    fn empty(w: usize, h: usize) -> RemovalReprojection {
        reprojection(Image::filled(w, h, [0.0; 3]), Mask::filled(w, h, false))
    }

    #[test]
    fn covered_hole_takes_the_first_neighbor() {
        let (w, h) = (6, 4);
        let base = Image::from_fn(w, h, |u, v| [u as f32 / 8.0, v as f32 / 8.0, 0.3]);
        let holes = Mask::from_fn(w, h, |u, v| (1..4).contains(&u) && (1..3).contains(&v));
        let holed = base.with_holes(&holes).unwrap();
        let fill = Image::from_fn(w, h, |u, v| if *holes.get(u, v) { [0.9, 0.1, 0.2] } else { [0.0; 3] });
        let mut reps = vec![empty(w, h), reprojection(fill.clone(), holes.clone()), empty(w, h), empty(w, h)];
        reps[0] = reprojection(Image::filled(w, h, [0.5; 3]), holes.clone());
        let out = composite_fill(&holed, &holes, &reps).unwrap();
        for v in 0..h {
            for u in 0..w {
                let want = if *holes.get(u, v) { fill.get(u, v) } else { holed.get(u, v) };
                assert_eq!(out.rgb.get(u, v), want);
            }
        }
        assert_eq!(out.residual.count(), 0);
    }

    #[test]
    fn priority_is_previous_next_then_two_back_two_ahead() {
        let (w, h) = (4, 1);
        let holes = Mask::filled(w, h, true);
        let holed = Image::filled(w, h, [0.0; 3]);
        let only = |u0: usize| Mask::from_fn(w, h, |u, _| u >= u0);
        let reps = vec![
            reprojection(Image::filled(w, h, [0.1; 3]), only(0)),
            reprojection(Image::filled(w, h, [0.2; 3]), only(3)),
            reprojection(Image::filled(w, h, [0.3; 3]), only(2)),
            reprojection(Image::filled(w, h, [0.4; 3]), only(0)),
        ];
        let out = composite_fill(&holed, &holes, &reps).unwrap();
        let got: Vec<f32> = out.rgb.pixels().iter().map(|p| p[0]).collect();
        assert_eq!(got, [0.1, 0.1, 0.3, 0.2]);
    }

    #[test]
    fn uncovered_square_diffuses_to_uniform_boundary() {
        let (w, h) = (5, 5);
        let holes = Mask::from_fn(w, h, |u, v| (1..4).contains(&u) && (1..4).contains(&v));
        let holed = Image::filled(w, h, [0.5; 3]).with_holes(&holes).unwrap();
        let reps: Vec<_> = (0..4).map(|_| empty(w, h)).collect();
        let out = composite_fill(&holed, &holes, &reps).unwrap();
        assert_eq!(out.residual, holes);
        for p in out.rgb.pixels() {
            assert!((p[0] - 0.5).abs() < 1e-4 && (p[2] - 0.5).abs() < 1e-4);
        }

        // Independent check: Jacobi averaging from zero reaches the same fixed point.
        let mut grid = vec![0.5f64; 25];
        for v in 1..4 {
            for u in 1..4 {
                grid[v * 5 + u] = 0.0;
            }
        }
        for _ in 0..500 {
            let prev = grid.clone();
            for v in 1..4 {
                for u in 1..4 {
                    let i = v * 5 + u;
                    grid[i] = (prev[i - 1] + prev[i + 1] + prev[i - 5] + prev[i + 5]) / 4.0;
                }
            }
        }
        for v in 1..4 {
            for u in 1..4 {
                assert!((grid[v * 5 + u] - 0.5).abs() < 1e-9);
                assert!((out.rgb.get(u, v)[1] as f64 - grid[v * 5 + u]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn diffusion_approaches_the_linear_interpolant() {
        // Left edge 0, right edge 1: the harmonic fill is linear in u.
        let (w, h) = (7, 3);
        let holes = Mask::from_fn(w, h, |u, _| u > 0 && u + 1 < w);
        let holed = Image::from_fn(w, h, |u, _| if u == 0 { [0.0; 3] } else { [1.0; 3] })
            .with_holes(&holes)
            .unwrap();
        let reps: Vec<_> = (0..4).map(|_| empty(w, h)).collect();
        let out = composite_fill(&holed, &holes, &reps).unwrap();
        for v in 0..h {
            for u in 0..w {
                let want = u as f32 / (w - 1) as f32;
                assert!((out.rgb.get(u, v)[0] - want).abs() < 5e-3, "({u},{v})");
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_dimension_errors() {
        let holes = Mask::filled(4, 2, false);
        let holed = Image::filled(4, 2, [0.0; 3]);
        let reps: Vec<_> = (0..3).map(|_| empty(4, 2)).collect();
        assert!(matches!(composite_fill(&holed, &holes, &reps), Err(Error::Dimension(_))));
        let reps: Vec<_> = (0..4).map(|_| empty(3, 2)).collect();
        assert!(matches!(composite_fill(&holed, &holes, &reps), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn fill_stays_within_contributing_values(
            seed in any::<u64>(),
            w in 3usize..9,
            h in 3usize..7,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let holes = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.5));
            let base = Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            let holed = base.with_holes(&holes).unwrap();
            let reps: Vec<_> = (0..4)
                .map(|_| {
                    let valid = Mask::from_fn(w, h, |u, v| *holes.get(u, v) && rng.gen_bool(0.3));
                    let rgb = Image::from_fn(w, h, |u, v| {
                        if *valid.get(u, v) { [rng.gen(), rng.gen(), rng.gen()] } else { [0.0; 3] }
                    });
                    reprojection(rgb, valid)
                })
                .collect();
            let out = composite_fill(&holed, &holes, &reps).unwrap();
            for c in 0..3 {
                let mut lo = f32::INFINITY;
                let mut hi = f32::NEG_INFINITY;
                for i in 0..w * h {
                    let mut take = |x: f32| { lo = lo.min(x); hi = hi.max(x); };
                    if !holes.data()[i] {
                        take(holed.pixels()[i][c]);
                    }
                    for r in &reps {
                        if r.valid.data()[i] {
                            take(r.rgb.pixels()[i][c]);
                        }
                    }
                }
                for (i, p) in out.rgb.pixels().iter().enumerate() {
                    if !holes.data()[i] {
                        prop_assert_eq!(p[c], holed.pixels()[i][c]);
                    }
                    if lo.is_finite() {
                        prop_assert!(p[c] >= lo - 1e-6 && p[c] <= hi + 1e-6);
                    }
                }
            }
        }
    }
}
