//! Row-major image and scalar-plane containers.

use crate::{Error, Result};

pub type Rgb = [f32; 3];

/// Generic single-channel raster, row-major, `data[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Mask = Plane<bool>;
pub type DepthMap = Plane<f32>;

impl<T: Clone> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dimension(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `w`x`h` window whose top-left corner is `(u0, v0)`.
    pub fn crop(&self, u0: usize, v0: usize, w: usize, h: usize) -> Result<Self> {
        if u0 + w > self.width || v0 + h > self.height {
            return Err(Error::dimension(format!(
                "window {w}x{h} at ({u0}, {v0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |u, v| self.get(u0 + u, v0 + v).clone()))
    }
}

impl Plane<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if !self.same_dims(other) {
            return Err(Error::dimension("mask union of different sizes"));
        }
        Ok(Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Bounding box `(u0, v0, w, h)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
        for v in 0..self.height {
            for u in 0..self.width {
                if *self.get(u, v) {
                    u0 = u0.min(u);
                    v0 = v0.min(v);
                    u1 = u1.max(u);
                    v1 = v1.max(v);
                }
            }
        }
        (u0 != usize::MAX).then(|| (u0, v0, u1 - u0 + 1, v1 - v0 + 1))
    }

    /// Chebyshev dilation by `radius` pixels, wrapping horizontally.
    pub fn dilate(&self, radius: usize) -> Mask {
        let (w, h) = (self.width, self.height);
        let r = radius as isize;
        let mut rows = Plane::filled(w, h, false);
        for v in 0..h {
            for u in 0..w {
                if *self.get(u, v) {
                    for du in -r..=r {
                        let uu = (u as isize + du).rem_euclid(w as isize) as usize;
                        rows.set(uu, v, true);
                    }
                }
            }
        }
        let mut out = Plane::filled(w, h, false);
        for v in 0..h {
            for u in 0..w {
                if *rows.get(u, v) {
                    let lo = v.saturating_sub(radius);
                    let hi = (v + radius).min(h - 1);
                    for vv in lo..=hi {
                        out.set(u, vv, true);
                    }
                }
            }
        }
        out
    }
}

impl Plane<f32> {
    /// Bilinear sample at continuous coordinates where pixel `(u, v)` is
    /// centered on `(u + 0.5, v + 0.5)`; wraps horizontally, clamps vertically.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let taps = bilinear_taps(self.width, self.height, x, y);
        let mut acc = 0.0f64;
        for (idx, wgt) in taps {
            acc += wgt * self.data[idx] as f64;
        }
        acc as f32
    }
}

/// The four `(flat index, weight)` taps of a bilinear lookup, ordered
/// top-left, top-right, bottom-left, bottom-right.
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xs = x - 0.5;
    let ys = y - 0.5;
    let (x0, fx) = split(xs);
    let (y0, fy) = split(ys);
    let w = width as i64;
    let h = height as i64;
    let c0 = (x0 as i64).rem_euclid(w) as usize;
    let c1 = (x0 as i64 + 1).rem_euclid(w) as usize;
    let r0 = (y0 as i64).clamp(0, h - 1) as usize;
    let r1 = (y0 as i64 + 1).clamp(0, h - 1) as usize;
    [
        (r0 * width + c0, (1.0 - fx) * (1.0 - fy)),
        (r0 * width + c1, fx * (1.0 - fy)),
        (r1 * width + c0, (1.0 - fx) * fy),
        (r1 * width + c1, fx * fy),
    ]
}

/// Integer part and fraction, with fractions within 1e-9 of a whole number
/// snapped so that lookups at pixel centers reproduce pixels exactly.
fn split(x: f64) -> (f64, f64) {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        (r, 0.0)
    } else {
        let f = x.floor();
        (f, x - f)
    }
}

/// RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<Rgb>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Rgb {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: Rgb) {
        self.data[v * self.width + u] = value;
    }

    pub fn same_dims<T>(&self, other: &Plane<T>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample; same conventions as [`Plane::sample_bilinear`].
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Rgb {
        let taps = bilinear_taps(self.width, self.height, x, y);
        let mut acc = [0.0f64; 3];
        for (idx, wgt) in taps {
            let p = self.data[idx];
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
        }
        [acc[0] as f32, acc[1] as f32, acc[2] as f32]
    }

    pub fn crop(&self, u0: usize, v0: usize, w: usize, h: usize) -> Result<Self> {
        if u0 + w > self.width || v0 + h > self.height {
            return Err(Error::dimension(format!(
                "window {w}x{h} at ({u0}, {v0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |u, v| self.get(u0 + u, v0 + v)))
    }

    /// Copy with masked pixels set to zero.
    pub fn with_holes(&self, mask: &Mask) -> Result<Self> {
        if !self.same_dims(mask) {
            return Err(Error::dimension("image and mask sizes differ"));
        }
        let mut out = self.clone();
        for (p, &m) in out.data.iter_mut().zip(mask.data()) {
            if m {
                *p = [0.0; 3];
            }
        }
        Ok(out)
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p.map(quantize)).collect(),
        }
    }

    /// Planar `[3, height, width]` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.data.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = p[c];
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::dimension("planar buffer length"));
        }
        Ok(Self {
            width,
            height,
            data: (0..n).map(|i| [planar[i], planar[n + i], planar[2 * n + i]]).collect(),
        })
    }
}

pub fn quantize(x: f32) -> f32 {
    to_byte(x) as f32 / 255.0
}

pub fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_pixel_center_is_exact() {
        let p = Plane::from_fn(4, 3, |u, v| (u * 10 + v) as f32);
        for v in 0..3 {
            for u in 0..4 {
                assert_eq!(p.sample_bilinear(u as f64 + 0.5, v as f64 + 0.5), *p.get(u, v));
            }
        }
    }

    #[test]
    fn bilinear_wraps_horizontally_and_clamps_vertically() {
        let p = Plane::from_fn(4, 2, |u, _| u as f32);
        assert!((p.sample_bilinear(0.0, 1.0) - 1.5).abs() < 1e-6);
        assert_eq!(p.sample_bilinear(1.5, -3.0), 1.0);
    }

    #[test]
    fn dilation_wraps_across_the_seam() {
        let mut m = Mask::filled(8, 4, false);
        m.set(0, 1, true);
        let d = m.dilate(1);
        assert!(*d.get(7, 0) && *d.get(1, 2) && !*d.get(2, 1) && !*d.get(0, 3));
        assert_eq!(d.count(), 9);
    }

    #[test]
    fn quantize_is_idempotent() {
        for k in 0..=255u8 {
            let x = k as f32 / 255.0;
            assert_eq!(quantize(x), x);
            assert_eq!(to_byte(x), k);
        }
    }
}
