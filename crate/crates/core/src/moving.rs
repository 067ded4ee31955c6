//! Moving-object scores from feature differences against depth-guarded
//! neighbor reprojections, and per-instance moving/static verdicts.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::features::{extract, FeatureBank};
use crate::raster::{Image, Mask, Plane};
use crate::reprojection::{neighbor_views, reproject_guarded};
use crate::sequence::Sequence;
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.7;
pub const DEFAULT_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectClass {
    Pedestrian,
    TwoWheeler,
    MotorizedVehicle,
    RecordingVehicle,
    Other,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Pedestrian,
        ObjectClass::TwoWheeler,
        ObjectClass::MotorizedVehicle,
        ObjectClass::RecordingVehicle,
        ObjectClass::Other,
    ];

    /// Label-raster code, `1..=5`; `0` is background.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }
}

/// A segmented object: flat pixel indices (`v * width + u`).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub id: u32,
    pub class: ObjectClass,
    pub pixels: Vec<usize>,
}

impl ObjectInstance {
    pub fn new(id: u32, class: ObjectClass, pixels: Vec<usize>) -> Self {
        Self { id, class, pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Coarse per-cell scores and the normalized full-resolution mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMask {
    pub raw: Plane<f32>,
    pub stride: usize,
    pub full: Plane<f32>,
}

impl ScoreMask {
    /// Bilinear upsample by `stride` (horizontal wrap), then min-max
    /// normalization; a constant map normalizes to zeros.
    pub fn from_raw(raw: Plane<f32>, stride: usize) -> Self {
        let (w, h) = (raw.width() * stride, raw.height() * stride);
        let s = stride as f64;
        let up = Plane::from_fn(w, h, |x, y| raw.sample_bilinear((x as f64 + 0.5) / s, (y as f64 + 0.5) / s));
        let lo = up.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = up.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let full = if hi > lo {
            let span = hi - lo;
            up.map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        } else {
            up.map(|_| 0.0)
        };
        Self { raw, stride, full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingVerdict {
    pub frame: usize,
    pub instance_id: u32,
    pub class: ObjectClass,
    pub mean_score: f64,
    pub is_moving: bool,
    pub tau: f64,
}

/// Raw score map from a target image and its warped neighbors: mean over
/// neighbors of the per-cell channel-summed absolute feature difference.
pub fn raw_score(bank: &FeatureBank, target: &Image, warped: &[Image], block: usize) -> Result<Plane<f32>> {
    if warped.is_empty() {
        return Err(Error::config("no warped neighbors to compare against"));
    }
    let reference = extract(bank, target, block)?;
    let (w, h) = (reference.width(), reference.height());
    let mut acc = vec![0.0f32; w * h];
    for img in warped {
        let diff = reference.l1_difference(&extract(bank, img, block)?)?;
        for (a, d) in acc.iter_mut().zip(diff) {
            *a += d;
        }
    }
    let n = warped.len() as f32;
    Plane::from_vec(w, h, acc.into_iter().map(|v| v / n).collect())
}

/// Guarded reprojections of the four neighbors of `t` into `t`.
pub fn warped_neighbors(seq: &Sequence, t: usize, epsilon: f64) -> Result<Vec<Image>> {
    let target = seq.view(t)?;
    neighbor_views(seq, t)?
        .iter()
        .map(|src| Ok(reproject_guarded(src, target, epsilon)?.rgb))
        .collect()
}

pub fn score_moving(seq: &Sequence, t: usize, bank: &FeatureBank, block: usize, epsilon: f64) -> Result<ScoreMask> {
    let stride = bank.stride(block)?;
    let warped = warped_neighbors(seq, t, epsilon)?;
    let raw = raw_score(bank, &seq.view(t)?.rgb, &warped, block)?;
    Ok(ScoreMask::from_raw(raw, stride))
}

/// Mean normalized score over each instance, compared strictly with `tau`.
pub fn classify_objects(score: &ScoreMask, instances: &[ObjectInstance], tau: f64, frame: usize) -> Result<Vec<MovingVerdict>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n = score.full.data().len();
    instances
        .iter()
        .map(|inst| {
            if inst.pixels.is_empty() {
                return Err(Error::Consistency(format!("instance {} has no pixels", inst.id)));
            }
            let mut sum = 0.0f64;
            for &p in &inst.pixels {
                if p >= n {
                    return Err(Error::dimension(format!("instance {} pixel {p} outside the image", inst.id)));
                }
                sum += score.full.data()[p] as f64;
            }
            let mean_score = sum / inst.pixels.len() as f64;
            Ok(MovingVerdict {
                frame,
                instance_id: inst.id,
                class: inst.class,
                mean_score,
                is_moving: mean_score > tau,
                tau,
            })
        })
        .collect()
}

/// Union of the pixels of instances judged moving.
pub fn moving_mask(verdicts: &[MovingVerdict], instances: &[ObjectInstance], width: usize, height: usize) -> Result<Mask> {
    let by_id: BTreeMap<u32, &ObjectInstance> = instances.iter().map(|i| (i.id, i)).collect();
    if by_id.len() != instances.len() || verdicts.len() != instances.len() {
        return Err(Error::Consistency(format!(
            "{} verdicts for {} instances ({} distinct ids)",
            verdicts.len(),
            instances.len(),
            by_id.len()
        )));
    }
    let mut mask = Mask::filled(width, height, false);
    for v in verdicts {
        let inst = by_id
            .get(&v.instance_id)
            .ok_or_else(|| Error::Consistency(format!("verdict for unknown instance {}", v.instance_id)))?;
        if v.is_moving {
            for &p in &inst.pixels {
                if p >= width * height {
                    return Err(Error::dimension(format!("instance {} pixel {p} outside the image", inst.id)));
                }
                mask.data_mut()[p] = true;
            }
        }
    }
    Ok(mask)
}

/// 4-connected components of equal nonzero label; columns wrap when `wrap`
/// is set (full panoramas). Returns `(label, pixels)` in scan order.
pub fn connected_components(labels: &Plane<u8>, wrap: bool) -> Vec<(u8, Vec<usize>)> {
    let (w, h) = labels.dims();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let label = labels.data()[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (u, v) = (p % w, p / w);
            let mut next = Vec::with_capacity(4);
            if u > 0 {
                next.push(p - 1);
            } else if wrap {
                next.push(p + w - 1);
            }
            if u + 1 < w {
                next.push(p + 1);
            } else if wrap {
                next.push(p + 1 - w);
            }
            if v > 0 {
                next.push(p - w);
            }
            if v + 1 < h {
                next.push(p + w);
            }
            for q in next {
                if !seen[q] && labels.data()[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push((label, pixels));
    }
    out
}

/// Instances from a semantic raster of [`ObjectClass::code`] values; ids
/// are assigned from 1 in scan order.
pub fn instances_from_semantic(labels: &Plane<u8>, wrap: bool) -> Result<Vec<ObjectInstance>> {
    connected_components(labels, wrap)
        .into_iter()
        .enumerate()
        .map(|(k, (code, pixels))| {
            let class = ObjectClass::from_code(code).ok_or_else(|| Error::format(format!("unknown class code {code}")))?;
            Ok(ObjectInstance::new(k as u32 + 1, class, pixels))
        })
        .collect()
}

/// A scene scored at one block, with ground-truth motion per instance.
#[derive(Clone, Debug)]
pub struct ScoredScene {
    pub score: ScoreMask,
    pub instances: Vec<ObjectInstance>,
    pub truth: Vec<bool>,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block: usize,
    pub stride: usize,
    pub tau: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Object-level accuracy of each `tau` over pre-scored scenes.
pub fn tabulate(block: usize, stride: usize, scenes: &[ScoredScene], taus: &[f64]) -> Result<Vec<SweepRow>> {
    taus.iter()
        .map(|&tau| {
            let (mut correct, mut total) = (0, 0);
            for s in scenes {
                let verdicts = classify_objects(&s.score, &s.instances, tau, s.frame)?;
                for (v, &truth) in verdicts.iter().zip(&s.truth) {
                    total += 1;
                    correct += (v.is_moving == truth) as usize;
                }
            }
            if total == 0 {
                return Err(Error::UndefinedMetric("no labeled instances to classify".into()));
            }
            Ok(SweepRow {
                block,
                stride,
                tau,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
        })
        .collect()
}

/// Labeled instances of `seq` at `t` with their motion labels.
pub fn labeled_instances(seq: &Sequence, t: usize) -> Result<(Vec<ObjectInstance>, Vec<bool>)> {
    let instances = seq.instances_at(t)?;
    let truth = instances.iter().map(|i| seq.labels[&i.id].is_moving).collect();
    Ok((instances, truth))
}

/// Accuracy per block (and per tau) over labeled sequences, each scored at
/// its frame `t`. Neighbor reprojections are shared across blocks.
pub fn block_sweep(
    scenes: &[(&Sequence, usize)],
    bank: &FeatureBank,
    taus: &[f64],
    blocks: &[usize],
    epsilon: f64,
) -> Result<Vec<SweepRow>> {
    let mut prepared = Vec::with_capacity(scenes.len());
    for &(seq, t) in scenes {
        let warped = warped_neighbors(seq, t, epsilon)?;
        let (instances, truth) = labeled_instances(seq, t)?;
        prepared.push((seq.view(t)?.rgb.clone(), warped, instances, truth, t));
    }
    let mut rows = Vec::new();
    for &block in blocks {
        let stride = bank.stride(block)?;
        let scored = prepared
            .iter()
            .map(|(target, warped, instances, truth, t)| {
                Ok(ScoredScene {
                    score: ScoreMask::from_raw(raw_score(bank, target, warped, block)?, stride),
                    instances: instances.clone(),
                    truth: truth.clone(),
                    frame: *t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(tabulate(block, stride, &scored, taus)?);
    }
    Ok(rows)
}
