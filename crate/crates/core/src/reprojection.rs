//! Depth-guarded inverse warping of neighbor panoramas into a target view.

use crate::geometry::{pixel_to_world, world_to_pixel, PanoramaView, Vec3};
use crate::raster::{Image, Mask};
use crate::sequence::Sequence;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.2;

/// Frame offsets of the four neighbors, in output order.
pub const NEIGHBOR_OFFSETS: [i64; 4] = [-2, -1, 1, 2];

/// A neighbor warped into the target viewpoint. Rejected pixels carry the
/// target's own color.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectedView {
    pub rgb: Image,
    pub valid: Mask,
    pub source_index: usize,
    pub target_index: usize,
}

/// A neighbor warped into the target's holes, with the neighbor's own moving
/// objects rejected. Zero wherever nothing was accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct RemovalReprojection {
    pub rgb: Image,
    pub valid: Mask,
    pub source_index: usize,
    pub target_index: usize,
}

/// Result of warping one target pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub color: [f32; 3],
    /// Source pixel used for the depth test.
    pub source_pixel: (usize, usize),
    pub target_point: Vec3,
    pub source_point: Vec3,
}

fn check_pair(src: &PanoramaView, dst: &PanoramaView, epsilon: f64) -> Result<()> {
    if src.grid != dst.grid {
        return Err(Error::dimension(format!(
            "source grid {:?} differs from target grid {:?}",
            src.grid, dst.grid
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Warps target pixel `(u, v)`: returns the bilinear source color when the
/// source surface at the (nearest) projected pixel lies within `epsilon` of
/// the target surface point.
pub fn correspond(src: &PanoramaView, dst: &PanoramaView, u: usize, v: usize, epsilon: f64) -> Option<Correspondence> {
    let target_point = pixel_to_world(dst, u, v)?;
    let (x, y, _) = world_to_pixel(src, &target_point).ok()?;
    let source_pixel = src.grid.nearest_pixel(x, y);
    let source_point = pixel_to_world(src, source_pixel.0, source_pixel.1)?;
    ((target_point - source_point).norm() < epsilon).then(|| Correspondence {
        color: src.rgb.sample_bilinear(x, y),
        source_pixel,
        target_point,
        source_point,
    })
}

pub fn reproject_guarded(src: &PanoramaView, dst: &PanoramaView, epsilon: f64) -> Result<ReprojectedView> {
    check_pair(src, dst, epsilon)?;
    let (w, h) = (dst.grid.width, dst.grid.height);
    let mut rgb = dst.rgb.clone();
    let mut valid = Mask::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if let Some(c) = correspond(src, dst, u, v, epsilon) {
                rgb.set(u, v, c.color);
                valid.set(u, v, true);
            }
        }
    }
    Ok(ReprojectedView {
        rgb,
        valid,
        source_index: src.frame_index,
        target_index: dst.frame_index,
    })
}

pub fn reproject_with_removal(
    src: &PanoramaView,
    dst: &PanoramaView,
    epsilon: f64,
    src_moving_mask: &Mask,
    hole_mask: &Mask,
) -> Result<RemovalReprojection> {
    check_pair(src, dst, epsilon)?;
    let (w, h) = (dst.grid.width, dst.grid.height);
    if src_moving_mask.dims() != (w, h) || hole_mask.dims() != (w, h) {
        return Err(Error::dimension("masks do not match the view grid"));
    }
    let mut rgb = Image::filled(w, h, [0.0; 3]);
    let mut valid = Mask::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            if !*hole_mask.get(u, v) {
                continue;
            }
            if let Some(c) = correspond(src, dst, u, v, epsilon) {
                if !*src_moving_mask.get(c.source_pixel.0, c.source_pixel.1) {
                    rgb.set(u, v, c.color);
                    valid.set(u, v, true);
                }
            }
        }
    }
    Ok(RemovalReprojection {
        rgb,
        valid,
        source_index: src.frame_index,
        target_index: dst.frame_index,
    })
}

/// Frame indices `[t-2, t-1, t+1, t+2]`, all of which must be in `frames`.
pub fn neighbor_set(frames: &[usize], t: usize) -> Result<[usize; 4]> {
    let wanted = NEIGHBOR_OFFSETS.map(|d| t as i64 + d);
    let missing: Vec<i64> = wanted
        .iter()
        .copied()
        .filter(|&f| f < 0 || !frames.contains(&(f as usize)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Boundary { t, missing });
    }
    Ok(wanted.map(|f| f as usize))
}

/// The four neighbor views of frame `t`, in [`NEIGHBOR_OFFSETS`] order.
pub fn neighbor_views(seq: &Sequence, t: usize) -> Result<[&PanoramaView; 4]> {
    let ids = neighbor_set(&seq.frame_indices(), t)?;
    Ok([seq.view(ids[0])?, seq.view(ids[1])?, seq.view(ids[2])?, seq.view(ids[3])?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EquirectGrid, Pose};
    use crate::raster::DepthMap;

    fn view(frame: usize) -> PanoramaView {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let rgb = Image::from_fn(16, 8, |u, v| [u as f32 / 16.0, v as f32 / 8.0, 0.5]);
        let depth = DepthMap::from_fn(16, 8, |u, v| if v == 0 { -1.0 } else { 1.0 + (u + v) as f32 * 0.1 });
        PanoramaView::new(frame, Pose::identity(), grid, rgb, depth).unwrap()
    }

    #[test]
    fn identical_views_reproduce_the_source() {
        let a = view(0);
        let out = reproject_guarded(&a, &a, DEFAULT_EPSILON).unwrap();
        assert_eq!(out.rgb, a.rgb);
        for v in 0..8 {
            for u in 0..16 {
                assert_eq!(*out.valid.get(u, v), v != 0, "sky pixels have no depth");
            }
        }
    }

    #[test]
    fn empty_hole_mask_gives_empty_output() {
        let a = view(0);
        let none = Mask::filled(16, 8, false);
        let out = reproject_with_removal(&a, &a, DEFAULT_EPSILON, &none, &none).unwrap();
        assert!(out.rgb.pixels().iter().all(|p| *p == [0.0; 3]));
        assert_eq!(out.valid.count(), 0);
    }

    #[test]
    fn moving_source_pixels_are_rejected() {
        let a = view(0);
        let all = Mask::filled(16, 8, true);
        let mut moving = Mask::filled(16, 8, false);
        moving.set(5, 3, true);
        let out = reproject_with_removal(&a, &a, DEFAULT_EPSILON, &moving, &all).unwrap();
        assert!(!*out.valid.get(5, 3));
        assert_eq!(out.rgb.get(5, 3), [0.0; 3]);
        assert!(*out.valid.get(6, 3));
    }

    #[test]
    fn mismatched_grids_and_bad_epsilon_are_rejected() {
        let a = view(0);
        let grid = EquirectGrid::new(8, 4).unwrap();
        let b = PanoramaView::new(1, Pose::identity(), grid, Image::filled(8, 4, [0.0; 3]), DepthMap::filled(8, 4, 1.0))
            .unwrap();
        assert!(matches!(reproject_guarded(&a, &b, 0.2), Err(Error::Dimension(_))));
        assert!(matches!(reproject_guarded(&a, &a, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn neighbor_sets() {
        let frames: Vec<usize> = (0..5).collect();
        assert_eq!(neighbor_set(&frames, 2).unwrap(), [0, 1, 3, 4]);
        assert!(matches!(neighbor_set(&frames, 1), Err(Error::Boundary { .. })));
        let frames: Vec<usize> = (0..=10).collect();
        assert_eq!(neighbor_set(&frames, 5).unwrap(), [3, 4, 6, 7]);
    }
}
