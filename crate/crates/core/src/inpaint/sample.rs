//! Training tiles with object-shaped holes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::raster::{Image, Mask};
use crate::reprojection::{neighbor_views, reproject_with_removal};
use crate::sequence::Sequence;
use crate::{Error, Result};

pub const MIN_SIDE_FRACTION: f64 = 0.25;
pub const MAX_SIDE_FRACTION: f64 = 0.75;
pub const MAX_PLACEMENT_TRIES: usize = 64;
/// Smallest instance mask accepted into a [`SilhouettePool`].
pub const MIN_SILHOUETTE_PIXELS: usize = 12;

/// Object outlines, each cropped to its bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouettePool {
    pub shapes: Vec<Mask>,
}

impl SilhouettePool {
    pub fn new(shapes: Vec<Mask>) -> Result<Self> {
        if shapes.is_empty() || shapes.iter().any(|s| s.count() == 0) {
            return Err(Error::config("silhouette pool needs at least one non-empty shape"));
        }
        Ok(Self { shapes })
    }

    /// Every labeled instance of every frame, skipping tiny ones and ones
    /// cut by the panorama seam.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> Result<Self> {
        let mut shapes = Vec::new();
        for seq in seqs {
            let Some(rasters) = &seq.instances else { continue };
            for raster in rasters {
                let mut ids: Vec<u8> = raster.data().iter().copied().filter(|&i| i != 0).collect();
                ids.sort_unstable();
                ids.dedup();
                for id in ids {
                    let mask = raster.map(|&v| v == id);
                    let Some((u0, v0, w, h)) = mask.bounding_box() else { continue };
                    if mask.count() < MIN_SILHOUETTE_PIXELS || w > raster.width() / 2 {
                        continue;
                    }
                    shapes.push(mask.crop(u0, v0, w, h)?);
                }
            }
        }
        Self::new(shapes)
    }
}

/// Nearest-neighbor rescale so the longer side becomes `side`, then cropped
/// to the bounding box of what survived.
pub fn scale_silhouette(shape: &Mask, side: usize) -> Option<Mask> {
    let (w, h) = shape.dims();
    let s = side as f64 / w.max(h) as f64;
    let nw = ((w as f64 * s).round() as usize).max(1);
    let nh = ((h as f64 * s).round() as usize).max(1);
    let scaled = Mask::from_fn(nw, nh, |x, y| {
        let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        *shape.get(sx, sy)
    });
    let (u0, v0, bw, bh) = scaled.bounding_box()?;
    scaled.crop(u0, v0, bw, bh).ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Ground truth tile `I_t`.
    pub target: Image,
    /// `B_t^h`.
    pub holes: Mask,
    /// `I_t^h`, zero inside the holes.
    pub holed: Image,
    /// Removal reprojections from `t-2, t-1, t+1, t+2`, zero outside the holes.
    pub reprojections: Vec<Image>,
    /// Interpolation draw for the gradient penalty.
    pub u: f64,
}

impl TrainingSample {
    pub fn dims(&self) -> (usize, usize) {
        self.target.dims()
    }

    /// Planar `[16, H, W]` generator input.
    pub fn generator_input(&self) -> Vec<f32> {
        generator_input(&self.holed, &self.holes, &self.reprojections)
    }
}

pub fn generator_input(holed: &Image, holes: &Mask, reprojections: &[Image]) -> Vec<f32> {
    let mut out = holed.to_planar();
    out.extend(holes.data().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    for r in reprojections {
        out.extend(r.to_planar());
    }
    out
}

/// Picks a silhouette, rescales it so its bounding box spans 25-75% of the
/// tile side, drops it at a uniform position inside a random `tile`-sized
/// window of frame `t` and builds the generator inputs. The ground truth is
/// the clean render when the sequence has one.
pub fn make_training_sample(
    seq: &Sequence,
    t: usize,
    tile: usize,
    pool: &SilhouettePool,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let view = seq.view(t)?;
    let (w, h) = (view.grid.width, view.grid.height);
    if tile == 0 || tile > w || tile > h {
        return Err(Error::config(format!("tile {tile} does not fit a {w}x{h} panorama")));
    }
    let neighbors = neighbor_views(seq, t)?;
    let (left, top) = (rng.gen_range(0..=w - tile), rng.gen_range(0..=h - tile));

    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let shape = &pool.shapes[rng.gen_range(0..pool.shapes.len())];
        let frac = rng.gen_range(MIN_SIDE_FRACTION..=MAX_SIDE_FRACTION);
        let Some(s) = scale_silhouette(shape, (frac * tile as f64).round() as usize) else { continue };
        let side = s.width().max(s.height()) as f64 / tile as f64;
        if !(MIN_SIDE_FRACTION..=MAX_SIDE_FRACTION).contains(&side) {
            continue;
        }
        let x = rng.gen_range(0..=tile - s.width());
        let y = rng.gen_range(0..=tile - s.height());
        placed = Some((s, x, y));
        break;
    }
    let (shape, x, y) = placed.ok_or_else(|| {
        Error::config(format!("no silhouette fits a {tile}px tile after {MAX_PLACEMENT_TRIES} tries"))
    })?;
    let holes_full = Mask::from_fn(w, h, |u, v| {
        let (du, dv) = (u.wrapping_sub(left + x), v.wrapping_sub(top + y));
        du < shape.width() && dv < shape.height() && *shape.get(du, dv)
    });

    let base = seq.clean(t).unwrap_or(&view.rgb);
    let target = base.crop(left, top, tile, tile)?;
    let holes = holes_full.crop(left, top, tile, tile)?;
    let holed = target.with_holes(&holes)?;
    let moving = seq.moving_ids();
    let mut reprojections = Vec::with_capacity(4);
    for src in neighbors {
        let src_moving = if seq.instances.is_some() {
            seq.mask_of(src.frame_index, &moving)?
        } else {
            Mask::filled(w, h, false)
        };
        let r = reproject_with_removal(src, view, epsilon, &src_moving, &holes_full)?;
        reprojections.push(r.rgb.crop(left, top, tile, tile)?);
    }
    Ok(TrainingSample {
        target,
        holes,
        holed,
        reprojections,
        u: rng.gen(),
    })
}

/// `count` samples from random interior frames of random sequences.
pub fn make_dataset(
    seqs: &[Sequence],
    count: usize,
    tile: usize,
    pool: &SilhouettePool,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    let interior: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let frames = s.frame_indices();
            frames
                .iter()
                .filter(|&&t| neighbor_views(s, t).is_ok())
                .map(|&t| (i, t))
                .collect::<Vec<_>>()
        })
        .collect();
    if interior.is_empty() {
        return Err(Error::config("no frame has all four neighbors"));
    }
    (0..count)
        .map(|_| {
            let (i, t) = interior[rng.gen_range(0..interior.len())];
            make_training_sample(&seqs[i], t, tile, pool, epsilon, rng)
        })
        .collect()
}
