//! Analytic ray-cast street scenes with exact depth, instance ids and
//! motion labels.
//!
//! The world is a checkered ground plane (z = 0) inside an optional street
//! canyon of façade walls, populated with axis-aligned boxes. The camera
//! travels along +y at fixed height; frame `k` sits at
//! `y = (k - (frames - 1) / 2) * spacing`. Boxes move by `velocity` per frame.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, EquirectGrid, PanoramaView, Pose, Vec3, SKY_DEPTH};
use crate::moving::ObjectClass;
use crate::raster::{DepthMap, Image, Mask, Plane, Rgb};
use crate::sequence::{InstanceLabel, Sequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    /// Center at frame 0, meters.
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub albedo: Rgb,
    /// Meters per frame.
    pub velocity: [f64; 3],
    pub class: ObjectClass,
}

impl BoxSpec {
    pub fn is_moving(&self) -> bool {
        self.velocity.iter().any(|&v| v != 0.0)
    }

    pub fn center_at(&self, frame: usize) -> Vec3 {
        Vec3::from(self.center) + Vec3::from(self.velocity) * frame as f64
    }

    fn bounds_at(&self, frame: usize) -> (Vec3, Vec3) {
        let c = self.center_at(frame);
        let h = Vec3::from(self.size) * 0.5;
        (c - h, c + h)
    }
}

/// Façade walls at `x = ±half_width` and `y = ±half_length`, up to `height`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Street {
    pub half_width: f64,
    pub half_length: f64,
    pub height: f64,
}

/// Which surfaces the depth channel records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Depth of the static world only: range scans are not taken at the
    /// instant of the color exposure, so moving objects are absent from them.
    StaticMap,
    /// Depth of exactly what the color image shows.
    Synchronized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: EquirectGrid,
    pub frames: usize,
    pub spacing: f64,
    pub camera_height: f64,
    pub checker_size: f64,
    pub ground_colors: [Rgb; 2],
    pub wall_colors: [Rgb; 2],
    pub sky_color: Rgb,
    pub street: Option<Street>,
    pub boxes: Vec<BoxSpec>,
    pub depth_mode: DepthMode,
    pub seed: u64,
}

impl SceneSpec {
    /// Empty open scene with the default capture path.
    pub fn new(grid: EquirectGrid) -> Self {
        Self {
            grid,
            frames: 5,
            spacing: 5.0,
            camera_height: 2.0,
            checker_size: 2.0,
            ground_colors: [[0.46, 0.46, 0.44], [0.52, 0.52, 0.50]],
            wall_colors: [[0.60, 0.56, 0.52], [0.54, 0.51, 0.47]],
            sky_color: [0.62, 0.74, 0.90],
            street: None,
            boxes: Vec::new(),
            depth_mode: DepthMode::StaticMap,
            seed: 0,
        }
    }

    pub fn camera_position(&self, frame: usize) -> Vec3 {
        let offset = frame as f64 - (self.frames as f64 - 1.0) / 2.0;
        Vec3::new(0.0, offset * self.spacing, self.camera_height)
    }

    pub fn pose(&self, frame: usize) -> Pose {
        Pose::from_translation(self.camera_position(frame))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.frames == 0 || !(self.spacing >= 0.0) || !(self.camera_height > 0.0) || !(self.checker_size > 0.0) {
            return Err(Error::config("frames, spacing, camera height and checker size must be positive"));
        }
        if self.boxes.len() > u8::MAX as usize {
            return Err(Error::config("at most 255 boxes fit an 8-bit instance raster"));
        }
        if let Some(s) = self.street {
            if !(s.half_width > 0.0 && s.height > 0.0) {
                return Err(Error::config("street walls need positive extent"));
            }
            let last = self.camera_position(self.frames - 1).y;
            if s.half_length <= last.abs().max(self.camera_position(0).y.abs()) {
                return Err(Error::config("capture path leaves the street"));
            }
        }
        let (start, end) = (self.camera_position(0), self.camera_position(self.frames - 1));
        for (i, b) in self.boxes.iter().enumerate() {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::config(format!("box {i} has a non-positive size")));
            }
            if b.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config(format!("box {i} albedo outside [0, 1]")));
            }
            for k in 0..self.frames {
                let (lo, hi) = b.bounds_at(k);
                if segment_hits_box(&start, &end, &(lo.add_scalar(-0.25)), &(hi.add_scalar(0.25))) {
                    return Err(Error::config(format!("box {i} crosses the camera path at frame {k}")));
                }
            }
        }
        Ok(())
    }

    /// Nearest surface along a ray from `origin` at `frame`; boxes for which
    /// `include` is false are ignored.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, frame: usize, include: impl Fn(usize) -> bool) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, surface: Surface| {
            if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.range) {
                best = Some(Hit { range: t, surface });
            }
        };
        if dir.z < 0.0 {
            consider(-origin.z / dir.z, Surface::Ground);
        }
        if let Some(s) = self.street {
            for (axis, sign) in [(0usize, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
                let plane = sign * if axis == 0 { s.half_width } else { s.half_length };
                if dir[axis] * sign <= 0.0 {
                    continue;
                }
                let t = (plane - origin[axis]) / dir[axis];
                let p = origin + dir * t;
                let other = 1 - axis;
                let extent = if other == 0 { s.half_width } else { s.half_length };
                if p.z >= 0.0 && p.z <= s.height && p[other].abs() <= extent {
                    consider(t, Surface::Wall { axis, sign: sign > 0.0 });
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !include(i) {
                continue;
            }
            let (lo, hi) = b.bounds_at(frame);
            if let Some((t, face)) = ray_box(origin, dir, &lo, &hi) {
                consider(t, Surface::Box { index: i, face });
            }
        }
        best
    }

    fn shade(&self, origin: &Vec3, dir: &Vec3, hit: Option<&Hit>) -> Rgb {
        let Some(hit) = hit else {
            return self.sky_color;
        };
        let p = origin + dir * hit.range;
        match hit.surface {
            Surface::Ground => {
                let cell = (p.x / self.checker_size).floor() as i64 + (p.y / self.checker_size).floor() as i64;
                self.ground_colors[cell.rem_euclid(2) as usize]
            }
            Surface::Wall { axis, .. } => {
                let along = if axis == 0 { p.y } else { p.x };
                let cell = (along / 3.0).floor() as i64 + (p.z / 2.5).floor() as i64;
                let c = self.wall_colors[cell.rem_euclid(2) as usize];
                let f = if axis == 0 { 1.0 } else { 0.85 };
                c.map(|v| v * f)
            }
            Surface::Box { index, face } => {
                let f = FACE_BRIGHTNESS[face.0 * 2 + face.1 as usize];
                self.boxes[index].albedo.map(|v| v * f)
            }
            Surface::Sky => self.sky_color,
        }
    }

    /// Distance from `p` to the nearest surface present at `frame`.
    pub fn surface_distance(&self, p: &Vec3, frame: usize, include: impl Fn(usize) -> bool) -> f64 {
        let mut best = p.z.abs();
        if let Some(s) = self.street {
            if p.z >= -1e-9 && p.z <= s.height + 1e-9 {
                if p.y.abs() <= s.half_length {
                    best = best.min((p.x.abs() - s.half_width).abs());
                }
                if p.x.abs() <= s.half_width {
                    best = best.min((p.y.abs() - s.half_length).abs());
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if include(i) {
                let (lo, hi) = b.bounds_at(frame);
                best = best.min(box_surface_distance(p, &lo, &hi));
            }
        }
        best
    }
}

/// Per-face brightness, indexed by `axis * 2 + positive`.
const FACE_BRIGHTNESS: [f32; 6] = [0.80, 0.86, 0.72, 0.92, 0.60, 1.00];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Ground,
    Wall { axis: usize, sign: bool },
    /// Face as `(axis, outward normal positive)`.
    Box { index: usize, face: (usize, bool) },
    Sky,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub surface: Surface,
}

/// Entry distance and face of a ray hitting an axis-aligned box from outside.
pub fn ray_box(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, (usize, bool))> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = (0, false);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t0 = (lo[a] - origin[a]) / dir[a];
        let t1 = (hi[a] - origin[a]) / dir[a];
        let (enter, exit, positive) = if t0 < t1 { (t0, t1, false) } else { (t1, t0, true) };
        if enter > t_near {
            t_near = enter;
            face = (a, positive);
        }
        t_far = t_far.min(exit);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, face))
}

fn box_surface_distance(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut outside = 0.0f64;
    let mut inside = f64::INFINITY;
    for a in 0..3 {
        let d = (lo[a] - p[a]).max(p[a] - hi[a]);
        if d > 0.0 {
            outside += d * d;
        }
        inside = inside.min(-d);
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside.max(0.0)
    }
}

fn segment_hits_box(a: &Vec3, b: &Vec3, lo: &Vec3, hi: &Vec3) -> bool {
    let inside = |p: &Vec3| (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]);
    if inside(a) || inside(b) {
        return true;
    }
    let d = b - a;
    let len = d.norm();
    if len == 0.0 {
        return false;
    }
    ray_box(a, &(d / len), lo, hi).is_some_and(|(t, _)| t <= len)
}

/// A rendered sequence together with the scene that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub spec: SceneSpec,
    pub sequence: Sequence,
}

impl RenderedSequence {
    pub fn motion_labels(&self) -> Vec<bool> {
        self.spec.boxes.iter().map(BoxSpec::is_moving).collect()
    }

    /// Pixels of box `index` at `frame`.
    pub fn instance_mask(&self, frame: usize, index: usize) -> Result<Mask> {
        self.sequence.mask_of(frame, &[index as u32 + 1])
    }
}

pub fn instance_id(box_index: usize) -> u32 {
    box_index as u32 + 1
}

/// Renders every frame of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<RenderedSequence> {
    spec.validate()?;
    let grid = spec.grid;
    let moving: Vec<bool> = spec.boxes.iter().map(BoxSpec::is_moving).collect();
    let any_moving = moving.iter().any(|&m| m);
    let mut views = Vec::with_capacity(spec.frames);
    let mut clean = Vec::with_capacity(spec.frames);
    let mut instances = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let origin = spec.camera_position(k);
        let mut rgb = Image::filled(grid.width, grid.height, spec.sky_color);
        let mut still = Image::filled(grid.width, grid.height, spec.sky_color);
        let mut depth = DepthMap::filled(grid.width, grid.height, SKY_DEPTH);
        let mut ids = Plane::filled(grid.width, grid.height, 0u8);
        for v in 0..grid.height {
            for u in 0..grid.width {
                let dir = grid.ray(u as f64 + 0.5, v as f64 + 0.5);
                let full = spec.cast(&origin, &dir, k, |_| true);
                let fixed = if any_moving {
                    spec.cast(&origin, &dir, k, |i| !moving[i])
                } else {
                    full
                };
                rgb.set(u, v, spec.shade(&origin, &dir, full.as_ref()));
                still.set(u, v, spec.shade(&origin, &dir, fixed.as_ref()));
                if let Some(Hit {
                    surface: Surface::Box { index, .. },
                    ..
                }) = full
                {
                    ids.set(u, v, instance_id(index) as u8);
                }
                let depth_hit = match spec.depth_mode {
                    DepthMode::StaticMap => fixed,
                    DepthMode::Synchronized => full,
                };
                if let Some(h) = depth_hit {
                    depth.set(u, v, h.range as f32);
                }
            }
        }
        views.push(PanoramaView::new(k, spec.pose(k), grid, rgb.quantized(), depth)?);
        clean.push(still.quantized());
        instances.push(ids);
    }
    let labels: BTreeMap<u32, InstanceLabel> = spec
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            (
                instance_id(i),
                InstanceLabel {
                    class: b.class,
                    is_moving: b.is_moving(),
                },
            )
        })
        .collect();
    let sequence = Sequence {
        views,
        instances: Some(instances),
        labels,
        clean: Some(clean),
    };
    sequence.validate()?;
    Ok(RenderedSequence {
        spec: spec.clone(),
        sequence,
    })
}

/// Parameters of a randomized suite of street scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub count: usize,
    pub grid: EquirectGrid,
    pub depth_mode: DepthMode,
}

impl SuiteConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            count: 50,
            grid: EquirectGrid { width: 128, height: 64 },
            depth_mode: DepthMode::StaticMap,
        }
    }
}

/// The 50-sequence reference suite at 64x128.
pub fn standard_suite(seed: u64) -> Result<Vec<RenderedSequence>> {
    suite(&SuiteConfig::standard(seed))
}

pub fn suite(config: &SuiteConfig) -> Result<Vec<RenderedSequence>> {
    config.grid.validate()?;
    (0..config.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let mut spec = random_street(&mut rng, config.grid)?;
            spec.seed = config.seed;
            spec.depth_mode = config.depth_mode;
            generate(&spec)
        })
        .collect()
}

/// A street canyon with 1-3 moving and 1-3 static boxes placed near the
/// middle frame, footprints separated by at least a meter in every frame.
pub fn random_street(rng: &mut ChaCha8Rng, grid: EquirectGrid) -> Result<SceneSpec> {
    let n_moving = rng.gen_range(1..=3);
    let n_static = rng.gen_range(1..=3);
    for _ in 0..100 {
        if let Some(spec) = try_street(rng, grid, n_moving, n_static) {
            return Ok(spec);
        }
    }
    Err(Error::config("could not place the boxes in the street"))
}

fn try_street(rng: &mut ChaCha8Rng, grid: EquirectGrid, n_moving: usize, n_static: usize) -> Option<SceneSpec> {
    let mut spec = SceneSpec::new(grid);
    spec.street = Some(Street {
        half_width: 9.0,
        half_length: 45.0,
        height: 12.0,
    });
    let mut hues: Vec<f64> = Vec::new();
    for k in 0..n_moving + n_static {
        let is_moving = k < n_moving;
        let mut accepted = None;
        for _ in 0..200 {
            let candidate = random_box(rng, is_moving, &spec, &hues);
            let clear = spec.boxes.iter().all(|other| separated(&spec, other, &candidate));
            spec.boxes.push(candidate);
            let ok = clear && spec.validate().is_ok();
            let candidate = spec.boxes.pop()?;
            if ok {
                accepted = Some(candidate);
                break;
            }
        }
        let b = accepted?;
        hues.push(hue_of(&b.albedo));
        spec.boxes.push(b);
    }
    Some(spec)
}

fn random_box(rng: &mut ChaCha8Rng, is_moving: bool, spec: &SceneSpec, hues: &[f64]) -> BoxSpec {
    let size = [rng.gen_range(1.5..2.5), rng.gen_range(2.0..4.5), rng.gen_range(1.6..2.8)];
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let x = side * rng.gen_range(3.0..6.0);
    let y_mid = rng.gen_range(-10.0..10.0);
    let mid = (spec.frames - 1) / 2;
    let velocity = if is_moving {
        let speed = rng.gen_range(0.5..3.0);
        let heading = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI } + rng.gen_range(-0.25..0.25);
        [speed * heading.sin(), speed * heading.cos(), 0.0]
    } else {
        [0.0; 3]
    };
    let center = [
        x - velocity[0] * mid as f64,
        y_mid - velocity[1] * mid as f64,
        size[2] / 2.0,
    ];
    let mut hue = rng.gen_range(0.0..360.0);
    for _ in 0..16 {
        if hues.iter().all(|h| hue_gap(*h, hue) > 40.0) {
            break;
        }
        hue = rng.gen_range(0.0..360.0);
    }
    let albedo = hsv(hue, rng.gen_range(0.75..1.0), rng.gen_range(0.75..1.0));
    let footprint = size[0] * size[1];
    let class = if !is_moving && rng.gen_bool(0.3) {
        ObjectClass::Other
    } else if footprint > 7.0 {
        ObjectClass::MotorizedVehicle
    } else if size[1] > 2.5 {
        ObjectClass::TwoWheeler
    } else {
        ObjectClass::Pedestrian
    };
    BoxSpec {
        center,
        size,
        albedo,
        velocity,
        class,
    }
}

/// True when the footprints of `a` and `b` stay a meter apart in every frame.
fn separated(spec: &SceneSpec, a: &BoxSpec, b: &BoxSpec) -> bool {
    (0..spec.frames).all(|k| {
        let (alo, ahi) = a.bounds_at(k);
        let (blo, bhi) = b.bounds_at(k);
        (0..2).any(|i| alo[i] > bhi[i] + 1.0 || blo[i] > ahi[i] + 1.0)
    })
}

fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

fn hue_of(c: &Rgb) -> f64 {
    let (r, g, b) = (c[0] as f64, c[1] as f64, c[2] as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    h.rem_euclid(360.0)
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Ids of instances at `frame` that are at least `min_pixels` large and
/// whose `margin`-pixel neighborhood touches neither another box nor the
/// ghost of a moving box: the pixels at `frame` whose static surface shows
/// that box when looked up in a neighbor view.
pub fn clear_margin_ids(
    seq: &RenderedSequence,
    frame: usize,
    neighbors: &[usize],
    min_pixels: usize,
    margin: usize,
) -> Result<Vec<u32>> {
    let s = &seq.sequence;
    let view = s.view(frame)?;
    let raster = s.instance_raster(frame)?;
    let grid = view.grid;
    let n_boxes = seq.spec.boxes.len();
    let moving = seq.motion_labels();
    let mut ghosts: Vec<Mask> = vec![Mask::filled(grid.width, grid.height, false); n_boxes];
    for &nb in neighbors {
        let other = s.view(nb)?;
        let other_ids = s.instance_raster(nb)?;
        for v in 0..grid.height {
            for u in 0..grid.width {
                let Some(p) = crate::geometry::pixel_to_world(view, u, v) else {
                    continue;
                };
                let Ok((x, y, _)) = project(&other.pose, &grid, &p) else {
                    continue;
                };
                let (su, sv) = grid.nearest_pixel(x, y);
                let id = *other_ids.get(su, sv) as usize;
                if id != 0 && moving[id - 1] {
                    ghosts[id - 1].set(u, v, true);
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n_boxes {
        let id = instance_id(i);
        let own = raster.map(|&r| r as u32 == id);
        if own.count() < min_pixels {
            continue;
        }
        let zone = own.dilate(margin);
        let crowded = (0..grid.pixels()).any(|p| {
            if !zone.data()[p] {
                return false;
            }
            let r = raster.data()[p] as u32;
            let other_box = r != 0 && r != id;
            let ghost = (0..n_boxes).any(|j| j != i && ghosts[j].data()[p]);
            other_box || ghost
        });
        if !crowded {
            out.push(id);
        }
    }
    Ok(out)
}
