//! Detection, hole filling and scoring chained over the frames of a sequence.

use serde::{Deserialize, Serialize};

use crate::eval::{psnr, MetricReport};
use crate::features::FeatureBank;
use crate::inpaint::{composite_fill, CompositeFill};
use crate::moving::{classify_objects, moving_mask, score_moving, MovingVerdict, ObjectInstance, ScoreMask};
use crate::raster::{Image, Mask};
use crate::reprojection::{neighbor_set, neighbor_views, reproject_with_removal, RemovalReprojection};
use crate::sequence::Sequence;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub block: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            tau: crate::moving::DEFAULT_TAU,
            epsilon: crate::reprojection::DEFAULT_EPSILON,
            block: crate::moving::DEFAULT_BLOCK,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub score: ScoreMask,
    pub instances: Vec<ObjectInstance>,
    pub verdicts: Vec<MovingVerdict>,
    pub holes: Mask,
}

impl Detection {
    pub fn moving_ids(&self) -> Vec<u32> {
        self.verdicts.iter().filter(|v| v.is_moving).map(|v| v.instance_id).collect()
    }
}

/// Scores frame `t`, classifies its labeled instances and builds the hole mask.
pub fn detect(seq: &Sequence, t: usize, bank: &FeatureBank, config: &DetectConfig) -> Result<Detection> {
    let score = score_moving(seq, t, bank, config.block, config.epsilon)?;
    let instances = seq.instances_at(t)?;
    let verdicts = classify_objects(&score, &instances, config.tau, t)?;
    let grid = seq.view(t)?.grid;
    let holes = moving_mask(&verdicts, &instances, grid.width, grid.height)?;
    Ok(Detection {
        score,
        instances,
        verdicts,
        holes,
    })
}

/// Instance ids at `t` that touch the hole mask.
pub fn ids_under(seq: &Sequence, t: usize, holes: &Mask) -> Result<Vec<u32>> {
    if seq.instances.is_none() {
        return Ok(Vec::new());
    }
    let raster = seq.instance_raster(t)?;
    let mut ids: Vec<u32> = raster
        .data()
        .iter()
        .zip(holes.data())
        .filter(|&(&id, &h)| h && id != 0)
        .map(|(&id, _)| id as u32)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// The four neighbors warped into the holes of `t`, with the instances
/// `removed` masked out of each source view.
pub fn removal_reprojections(
    seq: &Sequence,
    t: usize,
    holes: &Mask,
    removed: &[u32],
    epsilon: f64,
) -> Result<Vec<RemovalReprojection>> {
    let dst = seq.view(t)?;
    neighbor_views(seq, t)?
        .into_iter()
        .map(|src| {
            let src_mask = if seq.instances.is_some() {
                seq.mask_of(src.frame_index, removed)?
            } else {
                Mask::filled(dst.grid.width, dst.grid.height, false)
            };
            reproject_with_removal(src, dst, epsilon, &src_mask, holes)
        })
        .collect()
}

/// Composite fill of frame `t` with holes over `holes`.
pub fn composite_frame(seq: &Sequence, t: usize, holes: &Mask, removed: &[u32], epsilon: f64) -> Result<CompositeFill> {
    let holed = seq.view(t)?.rgb.with_holes(holes)?;
    let reps = removal_reprojections(seq, t, holes, removed, epsilon)?;
    composite_fill(&holed, holes, &reps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub instances: usize,
    pub moving_detected: usize,
    /// Fraction of verdicts agreeing with the motion labels.
    pub verdict_accuracy: Option<f64>,
    pub hole_pixels: usize,
    /// Hole pixels no reprojection covered.
    pub residual_pixels: usize,
    /// Whole-image PSNR of the composite against the clean render.
    pub psnr_db: Option<f64>,
    pub psnr_holes_db: Option<f64>,
    pub l1_percent: Option<f64>,
    /// Whole-image PSNR with the holes left black.
    pub baseline_psnr_db: Option<f64>,
    pub beats_baseline: Option<bool>,
    pub verdicts: Vec<MovingVerdict>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub report: FrameReport,
    pub detection: Detection,
    pub fill: CompositeFill,
}

/// Detect, composite and score one interior frame.
pub fn run_frame(seq: &Sequence, t: usize, bank: &FeatureBank, config: &DetectConfig) -> Result<FrameOutput> {
    let detection = detect(seq, t, bank, config)?;
    let fill = composite_frame(seq, t, &detection.holes, &detection.moving_ids(), config.epsilon)?;
    let truth: Vec<Option<bool>> = detection
        .verdicts
        .iter()
        .map(|v| seq.labels.get(&v.instance_id).map(|l| l.is_moving == v.is_moving))
        .collect();
    let verdict_accuracy = if truth.is_empty() || truth.iter().any(Option::is_none) {
        None
    } else {
        Some(truth.iter().filter(|c| **c == Some(true)).count() as f64 / truth.len() as f64)
    };
    let hole_pixels = detection.holes.count();
    let mut report = FrameReport {
        frame: t,
        instances: detection.instances.len(),
        moving_detected: detection.moving_ids().len(),
        verdict_accuracy,
        hole_pixels,
        residual_pixels: fill.residual.count(),
        psnr_db: None,
        psnr_holes_db: None,
        l1_percent: None,
        baseline_psnr_db: None,
        beats_baseline: None,
        verdicts: detection.verdicts.clone(),
    };
    if let Some(gt) = seq.clean(t) {
        let metrics = MetricReport::compare(&fill.rgb, gt, Some(&detection.holes))?;
        let baseline = psnr(&seq.view(t)?.rgb.with_holes(&detection.holes)?, gt)?;
        report.psnr_db = Some(metrics.psnr_db);
        report.psnr_holes_db = metrics.psnr_holes_db;
        report.l1_percent = Some(metrics.l1_percent);
        report.baseline_psnr_db = Some(baseline);
        report.beats_baseline = (hole_pixels > 0).then_some(metrics.psnr_db > baseline);
    }
    Ok(FrameOutput {
        report,
        detection,
        fill,
    })
}

/// Frames of `seq` that have all four neighbors.
pub fn interior_frames(seq: &Sequence) -> Vec<usize> {
    let frames = seq.frame_indices();
    frames.iter().copied().filter(|&t| neighbor_set(&frames, t).is_ok()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub frames: Vec<FrameReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub composited_frames: usize,
    pub frames_beating_baseline: usize,
    pub mean_psnr_db: Option<f64>,
    pub mean_l1_percent: Option<f64>,
    pub verdict_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: DetectConfig,
    pub sequences: Vec<SequenceReport>,
    pub summary: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl PipelineReport {
    pub fn new(config: DetectConfig, sequences: Vec<SequenceReport>) -> Self {
        let frames: Vec<&FrameReport> = sequences.iter().flat_map(|s| &s.frames).collect();
        // Pooled over instances rather than averaged over frames.
        let (correct, total) = frames
            .iter()
            .filter_map(|f| f.verdict_accuracy.map(|a| (a * f.instances as f64, f.instances)))
            .fold((0.0, 0usize), |(c, n), (a, k)| (c + a, n + k));
        let verdict_accuracy = (total > 0).then(|| correct / total as f64);
        let summary = Summary {
            frames: frames.len(),
            composited_frames: frames.iter().filter(|f| f.hole_pixels > 0).count(),
            frames_beating_baseline: frames.iter().filter(|f| f.beats_baseline == Some(true)).count(),
            mean_psnr_db: mean(frames.iter().filter_map(|f| f.psnr_db)),
            mean_l1_percent: mean(frames.iter().filter_map(|f| f.l1_percent)),
            verdict_accuracy,
        };
        Self {
            config,
            sequences,
            summary,
        }
    }
}

/// Runs every interior frame of `seq`.
pub fn run_sequence(name: &str, seq: &Sequence, bank: &FeatureBank, config: &DetectConfig) -> Result<(SequenceReport, Vec<FrameOutput>)> {
    let outputs = interior_frames(seq)
        .into_iter()
        .map(|t| run_frame(seq, t, bank, config))
        .collect::<Result<Vec<_>>>()?;
    let report = SequenceReport {
        name: name.to_string(),
        frames: outputs.iter().map(|o| o.report.clone()).collect(),
    };
    Ok((report, outputs))
}

/// Whole-image composite for holes given as an external mask.
pub fn fill_with_mask(seq: &Sequence, t: usize, holes: &Mask, epsilon: f64) -> Result<(Image, Mask)> {
    let removed = ids_under(seq, t, holes)?;
    let fill = composite_frame(seq, t, holes, &removed, epsilon)?;
    Ok((fill.rgb, fill.residual))
}
