//! Equirectangular camera model and rigid poses.
//!
//! Camera frame: x right, y forward, z up. Pixel `(u, v)` has its center at
//! continuous coordinates `(u + 0.5, v + 0.5)`; azimuth grows with `u` from
//! `-π` at the left edge, elevation falls with `v` from `+π/2` at the top.
//! Depth is the Euclidean range along the pixel ray, `-1` where no surface
//! was hit.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::raster::{DepthMap, Image};
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

pub const SKY_DEPTH: f32 = -1.0;

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self {
            position,
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a `[w, x, y, z]` quaternion, normalizing it.
    pub fn from_wxyz(position: [f64; 3], q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 || position.iter().any(|p| !p.is_finite()) {
            return Err(Error::format(format!("degenerate pose {position:?} / {q:?}")));
        }
        Ok(Self {
            position: Vec3::from(position),
            rotation: UnitQuaternion::from_quaternion(quat),
        })
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            position: -(rotation * self.position),
            rotation,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            position: self.position + self.rotation * other.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.rotation * p
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(p - self.position))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquirectGrid {
    pub width: usize,
    pub height: usize,
}

impl EquirectGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        let grid = Self { width, height };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid of the given height, twice as wide.
    pub fn with_height(height: usize) -> Result<Self> {
        Self::new(2 * height, height)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width, self.height);
        if w != 2 * h || h < 2 || w % 2 != 0 || h % 2 != 0 {
            return Err(Error::config(format!(
                "grid {w}x{h}: need width = 2 * height with both even and at least 2"
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Unit ray through continuous coordinates `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> Vec3 {
        let phi = TAU * x / self.width as f64 - PI;
        let theta = FRAC_PI_2 - PI * y / self.height as f64;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Vec3::new(ct * sp, ct * cp, st)
    }

    /// Continuous coordinates of a camera-frame direction (any length > 0).
    pub fn direction_to_pixel(&self, d: &Vec3) -> (f64, f64) {
        let r = d.norm();
        let phi = d.x.atan2(d.y);
        let theta = (d.z / r).clamp(-1.0, 1.0).asin();
        let mut x = (phi + PI) / TAU * self.width as f64;
        if x >= self.width as f64 {
            x -= self.width as f64;
        }
        if x < 0.0 {
            x += self.width as f64;
        }
        let y = (FRAC_PI_2 - theta) / PI * self.height as f64;
        (x, y)
    }

    /// The pixel containing continuous coordinates `(x, y)`: columns wrap,
    /// rows clamp.
    pub fn nearest_pixel(&self, x: f64, y: f64) -> (usize, usize) {
        let u = (x.floor() as i64).rem_euclid(self.width as i64) as usize;
        let v = (y.floor() as i64).clamp(0, self.height as i64 - 1) as usize;
        (u, v)
    }
}

/// Unit camera-frame ray through the center of pixel `(u, v)`.
pub fn pixel_to_ray(grid: &EquirectGrid, u: usize, v: usize) -> Result<Vec3> {
    if u >= grid.width || v >= grid.height {
        return Err(Error::Domain {
            u,
            v,
            width: grid.width,
            height: grid.height,
        });
    }
    Ok(grid.ray(u as f64 + 0.5, v as f64 + 0.5))
}

/// One capture: color, range map and pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PanoramaView {
    pub frame_index: usize,
    pub pose: Pose,
    pub grid: EquirectGrid,
    pub rgb: Image,
    pub depth: DepthMap,
}

impl PanoramaView {
    pub fn new(frame_index: usize, pose: Pose, grid: EquirectGrid, rgb: Image, depth: DepthMap) -> Result<Self> {
        grid.validate()?;
        if rgb.dims() != (grid.width, grid.height) || depth.dims() != (grid.width, grid.height) {
            return Err(Error::dimension(format!(
                "frame {frame_index}: rgb {:?} / depth {:?} vs grid {}x{}",
                rgb.dims(),
                depth.dims(),
                grid.width,
                grid.height
            )));
        }
        if let Some(bad) = rgb.pixels().iter().flatten().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::format(format!("frame {frame_index}: color {bad} outside [0, 1]")));
        }
        if let Some(bad) = depth.data().iter().find(|&&d| !(d > 0.0 || d == SKY_DEPTH) || !d.is_finite()) {
            return Err(Error::format(format!("frame {frame_index}: depth {bad} is neither > 0 nor -1")));
        }
        Ok(Self {
            frame_index,
            pose,
            grid,
            rgb,
            depth,
        })
    }

    pub fn depth_at(&self, u: usize, v: usize) -> Option<f64> {
        let d = *self.depth.get(u, v);
        (d > 0.0).then_some(d as f64)
    }
}

/// World point seen at pixel `(u, v)`, or `None` where depth is invalid.
pub fn pixel_to_world(view: &PanoramaView, u: usize, v: usize) -> Option<Vec3> {
    let range = view.depth_at(u, v)?;
    let ray = view.grid.ray(u as f64 + 0.5, v as f64 + 0.5);
    Some(view.pose.position + view.pose.rotation * (ray * range))
}

/// Continuous pixel coordinates and range of world point `p`.
pub fn world_to_pixel(view: &PanoramaView, p: &Vec3) -> Result<(f64, f64, f64)> {
    project(&view.pose, &view.grid, p)
}

/// [`world_to_pixel`] without a full view.
pub fn project(pose: &Pose, grid: &EquirectGrid, p: &Vec3) -> Result<(f64, f64, f64)> {
    let local = pose.inverse_transform_point(p);
    let range = local.norm();
    if range < 1e-12 {
        return Err(Error::Singularity);
    }
    let (x, y) = grid.direction_to_pixel(&local);
    Ok((x, y, range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(grid: EquirectGrid, pose: Pose, depth: f32) -> PanoramaView {
        PanoramaView::new(
            0,
            pose,
            grid,
            Image::filled(grid.width, grid.height, [0.5; 3]),
            DepthMap::filled(grid.width, grid.height, depth),
        )
        .unwrap()
    }

    #[test]
    fn ray_of_small_grid_matches_convention() {
        let grid = EquirectGrid::new(4, 2).unwrap();
        let d = pixel_to_ray(&grid, 1, 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d - Vec3::new(-0.5, 0.5, h)).norm() < 1e-5);
    }

    #[test]
    fn seam_center_ray_points_forward() {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let d = grid.ray(8.0, 4.0);
        assert!(d.x.abs() < 1e-12 && d.z.abs() < 1e-12 && d.y > 0.999);
    }

    #[test]
    fn out_of_range_pixel_is_a_domain_error() {
        let grid = EquirectGrid::new(4, 2).unwrap();
        assert!(matches!(pixel_to_ray(&grid, 4, 0), Err(Error::Domain { .. })));
        assert!(matches!(pixel_to_ray(&grid, 0, 2), Err(Error::Domain { .. })));
    }

    #[test]
    fn grid_shape_is_validated() {
        assert!(EquirectGrid::new(6, 2).is_err());
        assert!(EquirectGrid::new(6, 3).is_err());
        assert!(EquirectGrid::new(2, 1).is_err());
        assert!(EquirectGrid::new(8, 4).is_ok());
    }

    #[test]
    fn every_pixel_ray_round_trips() {
        let grid = EquirectGrid::new(16, 8).unwrap();
        for v in 0..8 {
            for u in 0..16 {
                let d = pixel_to_ray(&grid, u, v).unwrap();
                let (x, y) = grid.direction_to_pixel(&d);
                let back = grid.ray(x, y);
                assert!((back - d).norm() < 1e-9, "({u}, {v})");
            }
        }
    }

    #[test]
    fn point_straight_ahead_projects_to_the_center() {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let v = view(grid, Pose::identity(), 2.0);
        let (x, y, r) = world_to_pixel(&v, &Vec3::new(0.0, 2.0, 0.0)).unwrap();
        assert_eq!((x, y), (8.0, 4.0));
        assert!((r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn depth_along_forward_ray_gives_point_ahead() {
        // No pixel center lies exactly on +y; the continuous center column does.
        let grid = EquirectGrid::new(4, 2).unwrap();
        let ray = grid.ray(2.0, 1.0);
        assert!((ray - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let p = Pose::identity().transform_point(&(ray * 2.0));
        assert!((p - Vec3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        let q = Pose::from_translation(Vec3::new(5.0, 0.0, 0.0)).transform_point(&(ray * 2.0));
        assert!((q - Vec3::new(5.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn point_west_of_the_seam_maps_near_column_zero() {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let v = view(grid, Pose::identity(), 1.0);
        let (x, _, _) = world_to_pixel(&v, &Vec3::new(-1e-3, -1.0, 0.0)).unwrap();
        assert!(x < 0.01, "{x}");
        let (x, _, _) = world_to_pixel(&v, &Vec3::new(1e-3, -1.0, 0.0)).unwrap();
        assert!(x > 15.99 && x < 16.0, "{x}");
    }

    #[test]
    fn projecting_the_camera_center_is_singular() {
        let grid = EquirectGrid::new(16, 8).unwrap();
        let v = view(grid, Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)), 1.0);
        assert!(matches!(world_to_pixel(&v, &Vec3::new(1.0, 2.0, 3.0)), Err(Error::Singularity)));
    }

    #[test]
    fn invalid_depth_yields_no_point() {
        let grid = EquirectGrid::new(8, 4).unwrap();
        let v = view(grid, Pose::identity(), SKY_DEPTH);
        assert!(pixel_to_world(&v, 3, 1).is_none());
    }

    #[test]
    fn view_rejects_bad_depth_and_color() {
        let grid = EquirectGrid::new(8, 4).unwrap();
        let rgb = Image::filled(8, 4, [0.5; 3]);
        let depth = DepthMap::filled(8, 4, 0.0);
        assert!(PanoramaView::new(0, Pose::identity(), grid, rgb.clone(), depth).is_err());
        let bright = Image::filled(8, 4, [1.5, 0.0, 0.0]);
        assert!(PanoramaView::new(0, Pose::identity(), grid, bright, DepthMap::filled(8, 4, 1.0)).is_err());
        assert!(PanoramaView::new(0, Pose::identity(), grid, rgb, DepthMap::filled(4, 4, 1.0)).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-10.0f64..10.0),
            prop::array::uniform4(-1.0f64..1.0),
        )
            .prop_filter_map("degenerate quaternion", |(p, q)| {
                let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
                (n > 0.1).then(|| Pose::from_wxyz(p, q).unwrap())
            })
    }

    proptest! {
        #[test]
        fn quaternion_is_unit_and_inverse_composes_to_identity(pose in arb_pose()) {
            prop_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
            let id = pose.compose(&pose.inverse());
            prop_assert!(id.position.norm() < 1e-9);
            prop_assert!(id.rotation.angle() < 1e-9 || (id.rotation.angle() - TAU).abs() < 1e-9);
        }

        #[test]
        fn rays_are_unit_norm(h in 1usize..32, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let grid = EquirectGrid::with_height(2 * h).unwrap();
            let d = grid.ray(x * grid.width as f64, y * grid.height as f64);
            prop_assert!((d.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pixel_world_pixel_round_trip(pose in arb_pose(), h in 1usize..16, depth in 0.1f32..50.0) {
            let grid = EquirectGrid::with_height(2 * h).unwrap();
            let v = view(grid, pose, depth);
            for row in 0..grid.height {
                for u in 0..grid.width {
                    let p = pixel_to_world(&v, u, row).unwrap();
                    let (x, y, r) = world_to_pixel(&v, &p).unwrap();
                    let dx = (x - (u as f64 + 0.5) + grid.width as f64 / 2.0).rem_euclid(grid.width as f64)
                        - grid.width as f64 / 2.0;
                    prop_assert!(dx.abs() < 1e-6 && (y - (row as f64 + 0.5)).abs() < 1e-6);
                    prop_assert!((r - depth as f64).abs() < 1e-6 * depth as f64 + 1e-9);
                }
            }
        }

        #[test]
        fn projection_is_rotation_equivariant(
            pose in arb_pose(), spin in arb_pose(), p in prop::array::uniform3(-20.0f64..20.0)
        ) {
            let grid = EquirectGrid::new(16, 8).unwrap();
            let p = Vec3::from(p);
            prop_assume!((p - pose.position).norm() > 0.1);
            let (x0, y0, _) = project(&pose, &grid, &p).unwrap();
            let turned = Pose { position: spin.rotation * pose.position, rotation: spin.rotation * pose.rotation };
            let (x1, y1, _) = project(&turned, &grid, &(spin.rotation * p)).unwrap();
            let dx = (x1 - x0 + 8.0).rem_euclid(16.0) - 8.0;
            prop_assert!(dx.abs() < 1e-6 && (y1 - y0).abs() < 1e-6);
        }
    }
}
