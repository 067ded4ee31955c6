//! On-disk sequence layout.
//!
//! ```text
//! <dir>/frame_<k>/rgb.ppm | rgb.png   8-bit color
//!                 depth.pfm           little-endian float map, meters, -1 for sky
//!                 meta.json           frame_index, position_m, rotation_quat [w,x,y,z], grid
//!                 instances.pgm       optional 8-bit instance ids, 0 = background
//!                 clean.ppm           optional render without moving objects
//! <dir>/labels.json                   optional {id: {class, is_moving}}
//! ```
//!
//! A per-frame `labels.json` is also accepted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{EquirectGrid, PanoramaView, Pose};
use crate::raster::{to_byte, DepthMap, Image, Mask, Plane};
use crate::sequence::{InstanceLabel, Sequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: usize,
    pub position_m: [f64; 3],
    pub rotation_quat: [f64; 4],
    pub grid: EquirectGrid,
}

pub fn frame_dir(root: &Path, frame: usize) -> PathBuf {
    root.join(format!("frame_{frame}"))
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        Some("png") => Ok(ImageFormat::Png),
        _ => Err(Error::format(format!("{}: expected a .ppm, .pgm or .png file", path.display()))),
    }
}

fn encoder_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = img.dims();
    let bytes = img.pixels().iter().flat_map(|p| p.map(to_byte)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::dimension("rgb buffer"))?;
    buf.save_with_format(path, format_of(path)?).map_err(|e| encoder_error(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let fmt = format_of(path)?;
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, fmt)
        .map_err(|e| encoder_error(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0.map(|b| b as f32 / 255.0)).collect();
    Image::from_vec(w, h, data)
}

pub fn write_gray(path: &Path, plane: &Plane<u8>) -> Result<()> {
    let (w, h) = plane.dims();
    let buf = GrayImage::from_raw(w as u32, h as u32, plane.data().to_vec())
        .ok_or_else(|| Error::dimension("gray buffer"))?;
    buf.save_with_format(path, format_of(path)?).map_err(|e| encoder_error(path, e))
}

pub fn read_gray(path: &Path) -> Result<Plane<u8>> {
    let fmt = format_of(path)?;
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, fmt)
        .map_err(|e| encoder_error(path, e))?;
    if img.color().channel_count() != 1 {
        return Err(Error::format(format!("{}: expected a single-channel raster", path.display())));
    }
    let img = img.to_luma8();
    Plane::from_vec(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Masks are stored as 0/255 rasters; any nonzero value reads as set.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_gray(path, &mask.map(|&b| if b { 255 } else { 0 }))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.map(|&v| v != 0))
}

/// Single-channel portable float map, little-endian, rows bottom to top.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend_from_slice(&depth.get(u, v).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::format(format!("{}: {what}", path.display()));
    // Header tokens: kind, width, height, scale.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    pos += 1;
    match fields[0] {
        "Pf" => {}
        "PF" => return Err(bad("color float maps are not depth maps")),
        _ => return Err(bad("not a portable float map")),
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 4 * w * h {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * w * h, body.len())));
    }
    let mut depth = DepthMap::filled(w, h, 0.0);
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        depth.set(k % w, h - 1 - k / w, v);
    }
    Ok(depth)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir)?;
    for (k, view) in seq.views.iter().enumerate() {
        let fd = frame_dir(dir, view.frame_index);
        fs::create_dir_all(&fd)?;
        write_image(&fd.join("rgb.ppm"), &view.rgb)?;
        write_pfm(&fd.join("depth.pfm"), &view.depth)?;
        let meta = FrameMeta {
            frame_index: view.frame_index,
            position_m: view.pose.position.into(),
            rotation_quat: view.pose.wxyz(),
            grid: view.grid,
        };
        write_json(&fd.join("meta.json"), &meta)?;
        if let Some(inst) = &seq.instances {
            write_gray(&fd.join("instances.pgm"), &inst[k])?;
        }
        if let Some(clean) = &seq.clean {
            write_image(&fd.join("clean.ppm"), &clean[k])?;
        }
    }
    if seq.instances.is_some() {
        write_json(&dir.join("labels.json"), &seq.labels)?;
    }
    Ok(())
}

fn find(fd: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| fd.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(k) = name.strip_prefix("frame_").and_then(|k| k.parse::<usize>().ok()) {
            if path.is_dir() {
                frames.push((k, path));
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::format(format!("{}: no frame_<k> directories", dir.display())));
    }
    frames.sort();

    let mut views = Vec::with_capacity(frames.len());
    let mut instances = Vec::new();
    let mut clean = Vec::new();
    let mut labels: BTreeMap<u32, InstanceLabel> = BTreeMap::new();
    for (k, fd) in &frames {
        let meta: FrameMeta = read_json(&fd.join("meta.json"))?;
        if meta.frame_index != *k {
            return Err(Error::format(format!(
                "{}: meta.json says frame {}",
                fd.display(),
                meta.frame_index
            )));
        }
        meta.grid.validate()?;
        let rgb_path = find(fd, "rgb", &["ppm", "png"])
            .ok_or_else(|| Error::format(format!("{}: missing rgb.ppm / rgb.png", fd.display())))?;
        let rgb = read_image(&rgb_path)?;
        let depth = read_pfm(&fd.join("depth.pfm"))?;
        let pose = Pose::from_wxyz(meta.position_m, meta.rotation_quat)?;
        views.push(PanoramaView::new(meta.frame_index, pose, meta.grid, rgb, depth)?);
        if let Some(p) = find(fd, "instances", &["pgm", "png"]) {
            instances.push(read_gray(&p)?);
        }
        if let Some(p) = find(fd, "clean", &["ppm", "png"]) {
            clean.push(read_image(&p)?);
        }
        let per_frame = fd.join("labels.json");
        if per_frame.is_file() {
            labels.extend(read_json::<BTreeMap<u32, InstanceLabel>>(&per_frame)?);
        }
    }
    let shared = dir.join("labels.json");
    if shared.is_file() {
        labels.extend(read_json::<BTreeMap<u32, InstanceLabel>>(&shared)?);
    }
    let n = views.len();
    let partial = |len: usize, what: &str| -> Result<bool> {
        match len {
            0 => Ok(false),
            l if l == n => Ok(true),
            _ => Err(Error::format(format!("{what} present for only {len} of {n} frames"))),
        }
    };
    let seq = Sequence {
        instances: partial(instances.len(), "instances")?.then_some(instances),
        clean: partial(clean.len(), "clean renders")?.then_some(clean),
        views,
        labels,
    };
    seq.validate()?;
    Ok(seq)
}

/// Subdirectories of `dir` that hold a sequence, sorted by name.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && is_sequence_dir(&path)? {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Whether `dir` holds `frame_*` subdirectories.
pub fn is_sequence_dir(dir: &Path) -> Result<bool> {
    for entry in fs::read_dir(dir)? {
        if entry?.file_name().to_string_lossy().starts_with("frame_") {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::EquirectGrid;
    use crate::synth::{suite, SuiteConfig};

    fn scene() -> Sequence {
        let config = SuiteConfig {
            count: 1,
            grid: EquirectGrid::new(32, 16).unwrap(),
            ..SuiteConfig::standard(2)
        };
        suite(&config).unwrap().remove(0).sequence
    }

    #[test]
    fn sequences_round_trip() {
        let seq = scene();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.labels, seq.labels);
        assert_eq!(back.instances, seq.instances);
        assert_eq!(back.clean, seq.clean);
        for (a, b) in back.views.iter().zip(&seq.views) {
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.grid, b.grid);
            assert!((a.pose.position - b.pose.position).norm() < 1e-12);
        }
    }

    #[test]
    fn pfm_is_little_endian_bottom_up() {
        let depth = DepthMap::from_fn(3, 2, |u, v| (u + 10 * v) as f32 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_pfm(&path, &depth).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // First stored row is the bottom one (v = 1).
        assert_eq!(&bytes[header.len()..header.len() + 4], &9.0f32.to_le_bytes());
        assert_eq!(read_pfm(&path).unwrap(), depth);
    }

    #[test]
    fn big_endian_pfm_reads_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_be_bytes());
        fs::write(&path, bytes).unwrap();
        let d = read_pfm(&path).unwrap();
        assert_eq!(d.data(), &[2.5, -1.0]);
    }

    #[test]
    fn truncated_pfm_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        fs::write(&path, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format(_))));
    }

    #[test]
    fn png_frames_and_unnormalized_quaternions_load() {
        let seq = scene();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let fd = frame_dir(dir.path(), 0);
        let rgb = read_image(&fd.join("rgb.ppm")).unwrap();
        fs::remove_file(fd.join("rgb.ppm")).unwrap();
        write_image(&fd.join("rgb.png"), &rgb).unwrap();
        let mut meta: FrameMeta = read_json(&fd.join("meta.json")).unwrap();
        meta.rotation_quat = [2.0, 0.0, 0.0, 0.0];
        write_json(&fd.join("meta.json"), &meta).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.views[0].rgb, seq.views[0].rgb);
        assert_eq!(back.views[0].pose.wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_in_frames_is_rejected() {
        let seq = scene();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        fs::remove_dir_all(frame_dir(dir.path(), 2)).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn masks_round_trip() {
        let mask = Mask::from_fn(5, 3, |u, v| (u + v) % 2 == 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }
}
