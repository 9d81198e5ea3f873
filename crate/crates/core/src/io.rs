//! Readers and writers for the on-disk artifacts.
//!
//! Frames are numbered by their line in `poses.txt`; per-frame rasters are
//! named `{index:06}.png` (see [`frame_stem`]). Floats in text files are
//! written in Rust's shortest round-trip form, so writing and re-reading a
//! value is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::annotate::{AgentClass, AnnotationImage, BaseWidths, DetectionBox, SurfaceClass, TrackPoint, Tracklet};
use crate::error::{Error, Result};
use crate::fuse::{PredictionImage, SurfaceMap, BELIEF_K};
use crate::geometry::{Calibration, CameraIntrinsics, DepthImage, RigidTransform};
use crate::grid::{ClassGrid, GridSpec};
use crate::mesh::SemanticMesh;
use crate::plan::Path as GridPath;

pub const TRACKLET_HEADER: &str = "track_id,agent_class,timestamp,x,y,z";
pub const DETECTION_HEADER: &str = "track_id,agent_class,timestamp,u_min,v_min,u_max,v_max";
pub const TMAP_MAGIC: &[u8; 4] = b"TMAP";
pub const TMAP_VERSION: u16 = 1;
pub const PROB_MAGIC: &[u8; 4] = b"TPRB";

pub fn frame_stem(index: usize) -> String {
    format!("{index:06}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("expected a finite number, got {s:?}")))
}

/// Non-empty lines that are not `#` comments, with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn write_calibration(path: &Path, calib: &Calibration) -> Result<()> {
    let k = &calib.intrinsics;
    let mut s = String::new();
    let _ = writeln!(s, "fx {}\nfy {}\ncx {}\ncy {}", k.fx, k.fy, k.cx, k.cy);
    let _ = writeln!(s, "width {}\nheight {}", k.width, k.height);
    let m = calib.base_to_cam.to_row_major();
    let row: Vec<String> = m.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(s, "base_to_cam {}", row.join(" "));
    write_text(path, &s)
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    let text = read_text(path)?;
    let mut values: BTreeMap<&str, (usize, Vec<&str>)> = BTreeMap::new();
    for (n, line) in content_lines(&text) {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        if !matches!(key, "fx" | "fy" | "cx" | "cy" | "width" | "height" | "base_to_cam") {
            return Err(parse_err(path, n, format!("unknown key {key:?}")));
        }
        if values.insert(key, (n, it.collect())).is_some() {
            return Err(parse_err(path, n, format!("duplicate key {key:?}")));
        }
    }
    let scalar = |key: &str| -> Result<f64> {
        let (n, v) = values.get(key).ok_or_else(|| parse_err(path, 0, format!("missing key {key:?}")))?;
        match v.as_slice() {
            [x] => parse_f64(path, *n, x),
            _ => Err(parse_err(path, *n, format!("{key} takes one value"))),
        }
    };
    let size = |key: &str| -> Result<usize> {
        let (n, v) = values.get(key).ok_or_else(|| parse_err(path, 0, format!("missing key {key:?}")))?;
        match v.as_slice() {
            [x] => x.parse().map_err(|_| parse_err(path, *n, format!("{key} must be a non-negative integer"))),
            _ => Err(parse_err(path, *n, format!("{key} takes one value"))),
        }
    };
    let intrinsics = CameraIntrinsics::new(scalar("fx")?, scalar("fy")?, scalar("cx")?, scalar("cy")?, size("width")?, size("height")?)?;
    let (n, m) = values
        .get("base_to_cam")
        .ok_or_else(|| parse_err(path, 0, "missing key \"base_to_cam\""))?;
    if m.len() != 16 {
        return Err(parse_err(path, *n, format!("base_to_cam needs 16 values, got {}", m.len())));
    }
    let mut mat = [0.0; 16];
    for (dst, s) in mat.iter_mut().zip(m) {
        *dst = parse_f64(path, *n, s)?;
    }
    Ok(Calibration {
        intrinsics,
        base_to_cam: RigidTransform::from_row_major(&mat)?,
    })
}

/// Writes `timestamp tx ty tz qx qy qz qw`, one pose per line.
pub fn write_poses(path: &Path, poses: &[(f64, RigidTransform)]) -> Result<()> {
    let mut s = String::new();
    for (t, pose) in poses {
        let p = pose.translation();
        let [w, x, y, z] = pose.quaternion();
        let _ = writeln!(s, "{t} {} {} {} {x} {y} {z} {w}", p.x, p.y, p.z);
    }
    write_text(path, &s)
}

/// Reads body-in-world poses; quaternions are normalised on ingest and
/// timestamps must be strictly increasing.
pub fn read_poses(path: &Path) -> Result<Vec<(f64, RigidTransform)>> {
    let text = read_text(path)?;
    let mut poses: Vec<(f64, RigidTransform)> = Vec::new();
    for (n, line) in content_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(path, n, format!("expected 8 fields, got {}", fields.len())));
        }
        let v = fields
            .iter()
            .map(|f| parse_f64(path, n, f))
            .collect::<Result<Vec<f64>>>()?;
        if poses.last().is_some_and(|(t, _)| v[0] <= *t) {
            return Err(parse_err(path, n, "timestamps must be strictly increasing"));
        }
        let pose = RigidTransform::from_quaternion([v[7], v[4], v[5], v[6]], [v[1], v[2], v[3]])
            .map_err(|e| parse_err(path, n, e.to_string()))?;
        poses.push((v[0], pose));
    }
    Ok(poses)
}

fn check_header(path: &Path, text: &str, header: &str) -> Result<()> {
    let first = text.lines().next().unwrap_or_default().trim();
    let norm: String = first.chars().filter(|c| !c.is_whitespace()).collect();
    if norm != header {
        return Err(parse_err(path, 1, format!("expected header {header:?}, got {first:?}")));
    }
    Ok(())
}

fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    content_lines(text).skip(1).map(|(n, l)| (n, l.split(',').map(str::trim).collect()))
}

fn parse_agent(path: &Path, n: usize, s: &str) -> Result<AgentClass> {
    AgentClass::parse(s).ok_or_else(|| parse_err(path, n, format!("unknown agent class {s:?}")))
}

fn parse_id(path: &Path, n: usize, s: &str) -> Result<u64> {
    s.parse().map_err(|_| parse_err(path, n, format!("bad track id {s:?}")))
}

pub fn write_tracklets(path: &Path, tracklets: &[Tracklet]) -> Result<()> {
    let mut s = format!("{TRACKLET_HEADER}\n");
    for t in tracklets {
        for p in &t.points {
            let q = p.position;
            let _ = writeln!(s, "{},{},{},{},{},{}", t.id, t.agent_class.name(), p.timestamp, q.x, q.y, q.z);
        }
    }
    write_text(path, &s)
}

/// Groups rows by track id (ascending). Rows of a track are sorted by
/// timestamp; duplicate timestamps are rejected.
pub fn read_tracklets(path: &Path, widths: &BaseWidths) -> Result<Vec<Tracklet>> {
    let text = read_text(path)?;
    check_header(path, &text, TRACKLET_HEADER)?;
    let mut tracks: BTreeMap<u64, (AgentClass, Vec<TrackPoint>)> = BTreeMap::new();
    for (n, row) in csv_rows(&text) {
        if row.len() != 6 {
            return Err(parse_err(path, n, format!("expected 6 columns, got {}", row.len())));
        }
        let id = parse_id(path, n, row[0])?;
        let class = parse_agent(path, n, row[1])?;
        let timestamp = parse_f64(path, n, row[2])?;
        let position = Point3::new(parse_f64(path, n, row[3])?, parse_f64(path, n, row[4])?, parse_f64(path, n, row[5])?);
        let entry = tracks.entry(id).or_insert((class, Vec::new()));
        if entry.0 != class {
            return Err(parse_err(path, n, format!("track {id} changes class")));
        }
        entry.1.push(TrackPoint { timestamp, position });
    }
    tracks
        .into_iter()
        .map(|(id, (class, mut points))| {
            points.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            Tracklet::new(id, class, points, widths.for_class(class))
        })
        .collect()
}

pub fn write_detections(path: &Path, boxes: &[DetectionBox]) -> Result<()> {
    let mut s = format!("{DETECTION_HEADER}\n");
    for b in boxes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            b.track_id,
            b.agent_class.name(),
            b.timestamp,
            b.u_min,
            b.v_min,
            b.u_max,
            b.v_max
        );
    }
    write_text(path, &s)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionBox>> {
    let text = read_text(path)?;
    check_header(path, &text, DETECTION_HEADER)?;
    let mut out = Vec::new();
    for (n, row) in csv_rows(&text) {
        if row.len() != 7 {
            return Err(parse_err(path, n, format!("expected 7 columns, got {}", row.len())));
        }
        let v: Vec<f64> = row[2..].iter().map(|s| parse_f64(path, n, s)).collect::<Result<_>>()?;
        if v[1] > v[3] || v[2] > v[4] {
            return Err(parse_err(path, n, "box minimum exceeds maximum"));
        }
        out.push(DetectionBox {
            track_id: parse_id(path, n, row[0])?,
            agent_class: parse_agent(path, n, row[1])?,
            timestamp: v[0],
            u_min: v[1],
            v_min: v[2],
            u_max: v[3],
            v_max: v[4],
        });
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// 16-bit PNG in millimeters; 0 marks invalid pixels. Depths beyond
/// 65.535 m saturate.
pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let data: Vec<u16> = depth
        .values
        .iter()
        .map(|&d| if d > 0.0 { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(depth.width as u32, depth.height as u32, data)
        .ok_or_else(|| Error::Format("depth buffer size".into()))?;
    save(path, &img)
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(Error::Format(format!("{}: depth must be a 16-bit single-channel PNG", path.display())));
    }
    let img = img.into_luma16();
    Ok(DepthImage {
        width: img.width() as usize,
        height: img.height() as usize,
        values: img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect(),
    })
}

/// 8-bit class-index raster.
pub fn write_class_png(path: &Path, ann: &AnnotationImage) -> Result<()> {
    let data = ann.data.iter().map(|c| c.index()).collect();
    let img = GrayImage::from_raw(ann.width as u32, ann.height as u32, data)
        .ok_or_else(|| Error::Format("class buffer size".into()))?;
    save(path, &img)
}

pub fn read_class_png(path: &Path) -> Result<AnnotationImage> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Format(format!("{}: class raster must be an 8-bit single-channel PNG", path.display())));
    }
    let img = img.into_luma8();
    let data = img
        .pixels()
        .map(|p| {
            SurfaceClass::from_index(p.0[0])
                .ok_or_else(|| Error::Format(format!("{}: invalid class index {}", path.display(), p.0[0])))
        })
        .collect::<Result<_>>()?;
    Ok(AnnotationImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    })
}

/// Colour visualisation of a class raster.
pub fn write_color_png(path: &Path, ann: &AnnotationImage) -> Result<()> {
    let data = ann.data.iter().flat_map(|c| c.color()).collect();
    let img = RgbImage::from_raw(ann.width as u32, ann.height as u32, data)
        .ok_or_else(|| Error::Format("colour buffer size".into()))?;
    save(path, &img)
}

/// Writes a mask as `{stem}.png` plus `{stem}_color.png`.
pub fn write_mask(dir: &Path, stem: &str, ann: &AnnotationImage) -> Result<()> {
    write_class_png(&dir.join(format!("{stem}.png")), ann)?;
    write_color_png(&dir.join(format!("{stem}_color.png")), ann)
}

/// Writes a prediction as a class raster `{stem}.png` and a 16-bit
/// confidence raster `{stem}_conf.png`. Uniform pixels are stored as
/// Unknown. The encoding is exact for vectors with one peak and uniform
/// residual mass (up to 16-bit quantisation of the peak).
pub fn write_prediction_pngs(dir: &Path, stem: &str, pred: &PredictionImage) -> Result<()> {
    let n = pred.width * pred.height;
    let mut classes = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for p in pred.probs.chunks_exact(BELIEF_K) {
        let max = p.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let min = p.iter().cloned().fold(f32::INFINITY, f32::min);
        if max == min {
            classes.push(SurfaceClass::Unknown.index());
            conf.push(0u16);
        } else {
            let k = p.iter().position(|&v| v == max).unwrap_or(0);
            classes.push(SurfaceClass::from_belief_index(k).index());
            conf.push((max as f64 * 65535.0).round() as u16);
        }
    }
    let (w, h) = (pred.width as u32, pred.height as u32);
    let cls = GrayImage::from_raw(w, h, classes).ok_or_else(|| Error::Format("prediction buffer size".into()))?;
    let cf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, conf).ok_or_else(|| Error::Format("confidence buffer size".into()))?;
    save(&dir.join(format!("{stem}.png")), &cls)?;
    save(&dir.join(format!("{stem}_conf.png")), &cf)
}

/// K-channel float prediction: magic `TPRB`, u32 width, u32 height, u8 K,
/// then `width·height·K` little-endian f32, pixel-interleaved.
pub fn write_prob(path: &Path, pred: &PredictionImage) -> Result<()> {
    ensure_parent(path)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(PROB_MAGIC)?;
    out.write_all(&(pred.width as u32).to_le_bytes())?;
    out.write_all(&(pred.height as u32).to_le_bytes())?;
    out.write_all(&[BELIEF_K as u8])?;
    for v in &pred.probs {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_prob(path: &Path) -> Result<PredictionImage> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 13 || &bytes[..4] != PROB_MAGIC {
        return Err(bad("not a TPRB file"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes[12] as usize != BELIEF_K {
        return Err(bad(&format!("expected {BELIEF_K} channels, got {}", bytes[12])));
    }
    let body = &bytes[13..];
    if body.len() != w * h * BELIEF_K * 4 {
        return Err(bad("truncated or oversized body"));
    }
    let probs = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    PredictionImage::new(w, h, probs)
}

/// Reads `{stem}.prob` when present, otherwise `{stem}.png` with
/// `{stem}_conf.png` (8- or 16-bit).
pub fn read_prediction(dir: &Path, stem: &str) -> Result<PredictionImage> {
    let prob = dir.join(format!("{stem}.prob"));
    if prob.exists() {
        return read_prob(&prob);
    }
    let classes = read_class_png(&dir.join(format!("{stem}.png")))?;
    let conf_path = dir.join(format!("{stem}_conf.png"));
    let conf_img = open_image(&conf_path)?;
    let conf: Vec<f32> = match conf_img.color() {
        image::ColorType::L8 => conf_img.into_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        image::ColorType::L16 => conf_img.into_luma16().pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        _ => return Err(Error::Format(format!("{}: confidence must be single-channel", conf_path.display()))),
    };
    PredictionImage::from_class_confidence(classes.width, classes.height, &classes.data, &conf)
}

/// Writes a class grid as `{stem}.png` (grid row `j` is image row `j`),
/// `{stem}_color.png` and the georeference `{stem}.json`.
pub fn write_class_grid(dir: &Path, stem: &str, grid: &ClassGrid) -> Result<()> {
    let ann = AnnotationImage {
        width: grid.spec.width,
        height: grid.spec.height,
        data: grid.classes.clone(),
    };
    write_mask(dir, stem, &ann)?;
    let json = serde_json::to_string_pretty(&grid.spec).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&dir.join(format!("{stem}.json")), &(json + "\n"))
}

pub fn read_class_grid(dir: &Path, stem: &str) -> Result<ClassGrid> {
    let json_path = dir.join(format!("{stem}.json"));
    let spec: GridSpec = serde_json::from_str(&read_text(&json_path)?)
        .map_err(|e| parse_err(&json_path, e.line(), e.to_string()))?;
    let spec = GridSpec::new(spec.origin_x, spec.origin_y, spec.resolution, spec.width, spec.height)?;
    let ann = read_class_png(&dir.join(format!("{stem}.png")))?;
    if (ann.width, ann.height) != (spec.width, spec.height) {
        return Err(Error::DimensionMismatch {
            expected: (spec.width, spec.height),
            got: (ann.width, ann.height),
        });
    }
    Ok(ClassGrid {
        spec,
        classes: ann.data,
    })
}

/// Binary map file: `TMAP`, u16 version, header (origin_x f64, origin_y
/// f64, resolution f64, width u32, height u32, K u8), then per cell in
/// row-major order K × f32 log-odds, u32 count, f32 elevation sum. All
/// little-endian.
pub fn write_tmap(path: &Path, map: &SurfaceMap) -> Result<()> {
    ensure_parent(path)?;
    let g = &map.grid;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(TMAP_MAGIC)?;
    out.write_all(&TMAP_VERSION.to_le_bytes())?;
    out.write_all(&g.origin_x.to_le_bytes())?;
    out.write_all(&g.origin_y.to_le_bytes())?;
    out.write_all(&g.resolution.to_le_bytes())?;
    out.write_all(&(g.width as u32).to_le_bytes())?;
    out.write_all(&(g.height as u32).to_le_bytes())?;
    out.write_all(&[BELIEF_K as u8])?;
    let (h, counts, z) = (map.log_odds(), map.counts(), map.elevation_sums());
    for cell in 0..g.len() {
        for v in &h[cell * BELIEF_K..(cell + 1) * BELIEF_K] {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        out.write_all(&counts[cell].to_le_bytes())?;
        out.write_all(&(z[cell] as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tmap(path: &Path) -> Result<SurfaceMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    const HEADER: usize = 4 + 2 + 24 + 8 + 1;
    if bytes.len() < HEADER || &bytes[..4] != TMAP_MAGIC {
        return Err(bad("not a TMAP file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TMAP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (ox, oy, res) = (f64_at(6), f64_at(14), f64_at(22));
    let (w, h) = (u32_at(30) as usize, u32_at(34) as usize);
    let k = bytes[38] as usize;
    if k != BELIEF_K {
        return Err(bad(format!("expected K = {BELIEF_K}, got {k}")));
    }
    let record = 4 * k + 8;
    if bytes.len() != HEADER + w * h * record {
        return Err(bad("body size does not match the header".into()));
    }
    let grid = GridSpec::new(ox, oy, res, w, h)?;
    let mut log_odds = Vec::with_capacity(w * h * k);
    let mut counts = Vec::with_capacity(w * h);
    let mut z = Vec::with_capacity(w * h);
    for cell in 0..w * h {
        let o = HEADER + cell * record;
        log_odds.extend((0..k).map(|c| f32_at(o + 4 * c) as f64));
        counts.push(u32_at(o + 4 * k));
        z.push(f32_at(o + 4 * k + 4) as f64);
    }
    SurfaceMap::from_parts(grid, log_odds, counts, z)
}

/// ASCII mesh: header `mesh <vertices> <faces>`, then one `x y z` line per
/// vertex and one `a b c class` line per face.
pub fn write_mesh(path: &Path, mesh: &SemanticMesh) -> Result<()> {
    let mut s = format!("mesh {} {}\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for (f, c) in mesh.faces.iter().zip(&mesh.face_classes) {
        let _ = writeln!(s, "{} {} {} {}", f[0], f[1], f[2], c.index());
    }
    write_text(path, &s)
}

pub fn read_mesh(path: &Path) -> Result<SemanticMesh> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (n, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty mesh file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let (nv, nf) = match h.as_slice() {
        ["mesh", a, b] => (
            a.parse::<usize>().map_err(|_| parse_err(path, n, "bad vertex count"))?,
            b.parse::<usize>().map_err(|_| parse_err(path, n, "bad face count"))?,
        ),
        _ => return Err(parse_err(path, n, "expected header `mesh <vertices> <faces>`")),
    };
    let mut vertices = Vec::with_capacity(nv);
    let mut faces = Vec::with_capacity(nf);
    let mut classes = Vec::with_capacity(nf);
    for _ in 0..nv {
        let (n, l) = lines.next().ok_or_else(|| parse_err(path, 0, "missing vertex lines"))?;
        let v: Vec<f64> = l.split_whitespace().map(|s| parse_f64(path, n, s)).collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(parse_err(path, n, "vertex needs 3 coordinates"));
        }
        vertices.push(Point3::new(v[0], v[1], v[2]));
    }
    for _ in 0..nf {
        let (n, l) = lines.next().ok_or_else(|| parse_err(path, 0, "missing face lines"))?;
        let v: Vec<u32> = l
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| parse_err(path, n, format!("bad index {s:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(parse_err(path, n, "face needs 3 indices and a class"));
        }
        let class = u8::try_from(v[3])
            .ok()
            .and_then(SurfaceClass::from_index)
            .ok_or_else(|| parse_err(path, n, format!("bad class {}", v[3])))?;
        faces.push([v[0], v[1], v[2]]);
        classes.push(class);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(path, n, "trailing data after the declared faces"));
    }
    SemanticMesh::new(vertices, faces, classes)
}

/// Path as text: a `# cost` comment, then one `x y` world coordinate per
/// line (cell centres, start to goal).
pub fn write_path(path: &Path, p: &GridPath, spec: &GridSpec) -> Result<()> {
    let mut s = format!("# cost {}\n", p.cost);
    for (x, y) in p.world_points(spec) {
        let _ = writeln!(s, "{x} {y}");
    }
    write_text(path, &s)
}

/// Colour map raster with the path cells drawn in white.
pub fn write_path_overlay(path: &Path, map: &ClassGrid, p: &GridPath) -> Result<()> {
    let s = &map.spec;
    let mut img = RgbImage::from_raw(s.width as u32, s.height as u32, map.classes.iter().flat_map(|c| c.color()).collect())
        .ok_or_else(|| Error::Format("overlay buffer size".into()))?;
    for &(i, j) in &p.cells {
        img.put_pixel(i as u32, j as u32, image::Rgb([255, 255, 255]));
    }
    save(path, &img)
}

/// Standard layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn calib(&self) -> PathBuf {
        self.root.join("calib.txt")
    }
    pub fn poses(&self) -> PathBuf {
        self.root.join("poses.txt")
    }
    pub fn tracklets(&self) -> PathBuf {
        self.root.join("tracklets.csv")
    }
    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.csv")
    }
    pub fn depth(&self, frame: usize) -> PathBuf {
        self.root.join("depth").join(format!("{}.png", frame_stem(frame)))
    }
    pub fn pred_dir(&self) -> PathBuf {
        self.root.join("pred")
    }
    pub fn gt_dir(&self) -> PathBuf {
        self.root.join("gt")
    }
}
