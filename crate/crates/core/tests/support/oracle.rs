//! Explicit per-pixel guarded warp for translation-only poses.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use panoscrub::geometry::PanoramaView;

pub struct Warp {
    pub rgb: Vec<[f32; 3]>,
    pub valid: Vec<bool>,
}

fn ray(w: usize, h: usize, x: f64, y: f64) -> [f64; 3] {
    let phi = TAU * x / w as f64 - PI;
    let theta = FRAC_PI_2 - PI * y / h as f64;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [ct * sp, ct * cp, st]
}

fn point(view: &PanoramaView, u: usize, v: usize) -> Option<[f64; 3]> {
    let d = *view.depth.get(u, v);
    if d <= 0.0 {
        return None;
    }
    let r = ray(view.grid.width, view.grid.height, u as f64 + 0.5, v as f64 + 0.5);
    let c = view.pose.position;
    let d = d as f64;
    Some([c.x + r[0] * d, c.y + r[1] * d, c.z + r[2] * d])
}

fn snap(x: f64) -> (f64, f64) {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        (r, 0.0)
    } else {
        (x.floor(), x - x.floor())
    }
}

fn bilinear(view: &PanoramaView, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = (view.grid.width as i64, view.grid.height as i64);
    let (x0, fx) = snap(x - 0.5);
    let (y0, fy) = snap(y - 0.5);
    let cols = [(x0 as i64).rem_euclid(w), (x0 as i64 + 1).rem_euclid(w)];
    let rows = [(y0 as i64).clamp(0, h - 1), (y0 as i64 + 1).clamp(0, h - 1)];
    let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let mut acc = [0.0f64; 3];
    for (k, wgt) in weights.iter().enumerate() {
        let p = view.rgb.get(cols[k % 2] as usize, rows[k / 2] as usize);
        for c in 0..3 {
            acc[c] += wgt * p[c] as f64;
        }
    }
    [acc[0] as f32, acc[1] as f32, acc[2] as f32]
}

/// Continuous source coordinates of world point `p`.
pub fn to_pixel(view: &PanoramaView, p: [f64; 3]) -> (f64, f64) {
    let c = view.pose.position;
    let d = [p[0] - c.x, p[1] - c.y, p[2] - c.z];
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let phi = d[0].atan2(d[1]);
    let theta = (d[2] / r).clamp(-1.0, 1.0).asin();
    let w = view.grid.width as f64;
    let mut x = (phi + PI) / TAU * w;
    if x >= w {
        x -= w;
    }
    if x < 0.0 {
        x += w;
    }
    (x, (FRAC_PI_2 - theta) / PI * view.grid.height as f64)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Guarded warp of `src` into `dst`. Panics on rotated poses.
pub fn guarded(src: &PanoramaView, dst: &PanoramaView, epsilon: f64) -> Warp {
    for view in [src, dst] {
        assert_eq!(view.pose.wxyz(), [1.0, 0.0, 0.0, 0.0], "oracle handles translations only");
    }
    let (w, h) = (dst.grid.width, dst.grid.height);
    let mut rgb = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let accepted = point(dst, u, v).and_then(|p| {
                let (x, y) = to_pixel(src, p);
                let su = (x.floor() as i64).rem_euclid(w as i64) as usize;
                let sv = (y.floor() as i64).clamp(0, h as i64 - 1) as usize;
                let q = point(src, su, sv)?;
                (dist(p, q) < epsilon).then(|| bilinear(src, x, y))
            });
            valid.push(accepted.is_some());
            rgb.push(accepted.unwrap_or_else(|| dst.rgb.get(u, v)));
        }
    }
    Warp { rgb, valid }
}
