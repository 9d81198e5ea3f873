//! End-to-end stages over run directories, plus the in-memory building
//! blocks they share with tests and benchmarks.
//!
//! A run directory holds `calib.txt`, `poses.txt`, `tracklets.csv`,
//! `detections.csv`, `depth/`, and optionally `pred/`, `gt/` and
//! `gt_bev.*`. Frame `k` is line `k` of `poses.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    build_ribbon, compose_annotation, label_obstacles, rasterize_ribbon, tracklet_ribbon, AgentClass, AnnotationImage,
    DetectionBox, LidarPoint, PixelSet, Ribbon, TrackPoint, Tracklet,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluate::{class_metrics, compare_bev, confusion, coverage_fraction, weighted_cross_entropy, ConfusionMatrix, MetricsReport};
use crate::exec::Execution;
use crate::fuse::{finalize_map, frame_delta, FinalizedMap, PredictionImage, SurfaceMap};
use crate::geometry::{densify_depth, fit_ground_plane, Calibration, CameraView, DepthImage, GroundPlane, PixelPoint, RigidTransform};
use crate::grid::{ClassGrid, GridSpec};
use crate::io::{self, frame_stem, RunLayout};
use crate::mesh::{render_mesh, taubin_smooth, triangulate_map, SemanticMesh};
use crate::plan::{astar, gaussian_smooth, map_to_costmap, Costmap, Path as GridPath};
use crate::raster::NEAR_PLANE;
use crate::sim::{generate_world, prediction_oracle, simulate_run, SimRun};

/// Detections are matched to the pose with the nearest timestamp within
/// this many seconds.
pub const TIMESTAMP_TOLERANCE: f64 = 1e-3;

/// Pixel stride used when sampling depth points for the ground-plane fit.
const PLANE_SAMPLE_STRIDE: usize = 4;

/// One camera frame ready for annotation and fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub base_to_world: RigidTransform,
    /// Densified depth.
    pub depth: DepthImage,
    pub detections: Vec<DetectionBox>,
}

/// Frames of a simulated run, with depth densified as the file-based
/// stages would.
pub fn frames_from_sim(cfg: &PipelineConfig, sim: &SimRun, exec: Execution) -> Result<Vec<Frame>> {
    let frames: Vec<Result<Frame>> = exec.map_range(sim.frames.len(), |k| {
        let f = &sim.frames[k];
        Ok(Frame {
            index: k,
            timestamp: f.timestamp,
            base_to_world: f.base_to_world,
            depth: densify_depth(&f.depth, cfg.geometry.densify_radius)?,
            detections: f.detections.clone(),
        })
    });
    frames.into_iter().collect()
}

/// Seeded RANSAC ground plane from a subsample of the frame's depth points.
/// Falls back to a horizontal plane through the pose's ground point when
/// the fit fails.
pub fn frame_ground_plane(cfg: &PipelineConfig, calib: &Calibration, frame: &Frame) -> GroundPlane {
    let view = CameraView::new(&frame.base_to_world, calib);
    let mut points = Vec::new();
    for y in (0..frame.depth.height).step_by(PLANE_SAMPLE_STRIDE) {
        for x in (0..frame.depth.width).step_by(PLANE_SAMPLE_STRIDE) {
            if let Some(d) = frame.depth.get(x, y) {
                if let Ok(p) = view.backproject(&PixelPoint::center_of(x, y), d) {
                    points.push(p);
                }
            }
        }
    }
    let mut ransac = cfg.geometry.ransac;
    ransac.seed = ransac.seed.wrapping_add(frame.index as u64);
    fit_ground_plane(&points, &ransac).unwrap_or_else(|e| {
        let z = frame.base_to_world.translation().z - cfg.annotate.ego_base_height;
        warn!("frame {}: ground plane fit failed ({e}); using z = {z}", frame.index);
        GroundPlane::horizontal(z)
    })
}

/// Ego ground trajectory from the poses, dilated with the ego base width.
pub fn ego_tracklet(cfg: &PipelineConfig, poses: &[(f64, RigidTransform)]) -> Result<Tracklet> {
    let points = poses
        .iter()
        .map(|(t, pose)| {
            let p = pose.translation();
            TrackPoint {
                timestamp: *t,
                position: Point3::new(p.x, p.y, p.z - cfg.annotate.ego_base_height),
            }
        })
        .collect();
    Tracklet::new(0, AgentClass::Ego, points, cfg.annotate.widths.ego)
}

/// D0 annotation of one frame and the same annotation with ego evidence
/// only (no tracklets).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub d0: AnnotationImage,
    pub ego_only: AnnotationImage,
}

fn ribbons_of(tracklets: &[Tracklet], class: AgentClass) -> Vec<Ribbon> {
    tracklets
        .iter()
        .filter(|t| t.agent_class == class)
        .filter_map(|t| match tracklet_ribbon(t) {
            Ok(r) => Some(r),
            Err(e) => {
                warn!("track {}: skipped ({e})", t.id);
                None
            }
        })
        .collect()
}

fn rasterize_all(ribbons: &[Ribbon], view: &CameraView) -> Result<PixelSet> {
    let (w, h) = view.intrinsics.size();
    let mut set = PixelSet::empty(w, h);
    for r in ribbons {
        set.union_with(&rasterize_ribbon(r, view, NEAR_PLANE))?;
    }
    Ok(set)
}

pub fn annotate_frames(
    cfg: &PipelineConfig,
    calib: &Calibration,
    frames: &[Frame],
    tracklets: &[Tracklet],
    exec: Execution,
) -> Result<Vec<FrameAnnotation>> {
    let poses: Vec<(f64, RigidTransform)> = frames.iter().map(|f| (f.timestamp, f.base_to_world)).collect();
    let ego: Vec<Ribbon> = if poses.len() >= 2 {
        let t = ego_tracklet(cfg, &poses)?;
        vec![build_ribbon(&t.positions(), t.base_width / 2.0, AgentClass::Ego)?]
    } else {
        warn!("fewer than two poses; no ego evidence");
        Vec::new()
    };
    let peds = ribbons_of(tracklets, AgentClass::Pedestrian);
    let vehicles = ribbons_of(tracklets, AgentClass::Vehicle);
    let (w, h) = calib.intrinsics.size();
    let out: Vec<Result<FrameAnnotation>> = exec.map(frames, |f| {
        let view = CameraView::new(&f.base_to_world, calib);
        let plane = frame_ground_plane(cfg, calib, f);
        let mut points = Vec::with_capacity(f.depth.valid_count());
        for y in 0..f.depth.height {
            for x in 0..f.depth.width {
                if let Some(d) = f.depth.get(x, y) {
                    let pixel = PixelPoint::center_of(x, y);
                    points.push(LidarPoint {
                        position: view.backproject(&pixel, d)?,
                        pixel,
                    });
                }
            }
        }
        let obstacles = label_obstacles(&points, &plane, &f.detections, w, h, &cfg.annotate.obstacles);
        let ego_set = rasterize_all(&ego, &view)?;
        let empty = PixelSet::empty(w, h);
        Ok(FrameAnnotation {
            d0: compose_annotation(&ego_set, &rasterize_all(&peds, &view)?, &rasterize_all(&vehicles, &view)?, &obstacles)?,
            ego_only: compose_annotation(&ego_set, &empty, &empty, &obstacles)?,
        })
    });
    out.into_iter().collect()
}

/// Map grid covering every pose with `cfg.map.margin` meters to spare.
pub fn map_grid<'a>(cfg: &PipelineConfig, poses: impl IntoIterator<Item = &'a RigidTransform>) -> Result<GridSpec> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poses {
        let t = p.translation();
        x0 = x0.min(t.x);
        y0 = y0.min(t.y);
        x1 = x1.max(t.x);
        y1 = y1.max(t.y);
    }
    if !x0.is_finite() {
        return Err(Error::InvalidArgument("no poses to size the map".into()));
    }
    let m = cfg.map.margin;
    GridSpec::covering(x0 - m, y0 - m, x1 + m, y1 + m, cfg.fuse.resolution)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FuseStats {
    pub frames: usize,
    pub frames_skipped: usize,
    pub points_fused: usize,
    pub points_rejected: usize,
    pub points_outside: usize,
}

/// Fuses frames into `map`. Per-frame deltas are computed with `exec` and
/// applied in frame order; frames entirely outside the map are skipped.
pub fn fuse_frames(
    cfg: &PipelineConfig,
    map: &mut SurfaceMap,
    calib: &Calibration,
    frames: &[Frame],
    preds: &[PredictionImage],
    exec: Execution,
) -> Result<FuseStats> {
    if frames.len() != preds.len() {
        return Err(Error::InvalidArgument(format!("{} frames but {} predictions", frames.len(), preds.len())));
    }
    let grid = map.grid;
    let deltas = exec.map_range(frames.len(), |k| {
        let f = &frames[k];
        let view = CameraView::new(&f.base_to_world, calib);
        let plane = frame_ground_plane(cfg, calib, f);
        frame_delta(&grid, &preds[k], &f.depth, &view, &plane, &cfg.fuse)
    });
    let mut stats = FuseStats::default();
    for (f, d) in frames.iter().zip(deltas) {
        stats.frames += 1;
        match d {
            Ok((delta, s)) => {
                map.apply_delta(&delta)?;
                stats.points_fused += s.fused;
                stats.points_rejected += s.rejected;
                stats.points_outside += s.out_of_bounds;
            }
            Err(Error::FrameOutsideMap) => {
                warn!("frame {}: no point falls inside the map; skipped", f.index);
                stats.frames_skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

/// Triangulated and smoothed map surface; `None` when the map has no
/// observed cell.
pub fn build_mesh(cfg: &PipelineConfig, map: &FinalizedMap) -> Result<Option<SemanticMesh>> {
    if map.observed_cells() == 0 {
        return Ok(None);
    }
    let mesh = triangulate_map(map, cfg.mesh.max_edge_cells)?;
    if cfg.mesh.iterations == 0 {
        return Ok(Some(mesh));
    }
    Ok(Some(taubin_smooth(&mesh, cfg.mesh.lambda, cfg.mesh.mu, cfg.mesh.iterations)?))
}

/// D1 masks: the mesh rendered from every pose. Without a mesh every
/// mask is Unknown.
pub fn render_frames(mesh: Option<&SemanticMesh>, calib: &Calibration, poses: &[RigidTransform], exec: Execution) -> Vec<AnnotationImage> {
    let (w, h) = calib.intrinsics.size();
    exec.map(poses, |pose| match mesh {
        Some(m) => render_mesh(m, &CameraView::new(pose, calib), NEAR_PLANE).labels,
        None => AnnotationImage::unknown(w, h),
    })
}

/// Costmap (smoothed when `sigma > 0`) and optimal path between two world
/// points.
pub fn plan_route(cfg: &PipelineConfig, raster: &ClassGrid, start: [f64; 2], goal: [f64; 2]) -> Result<(Costmap, GridPath)> {
    let mut cm = map_to_costmap(raster, &cfg.plan.costs)?;
    if cfg.plan.sigma > 0.0 {
        cm = gaussian_smooth(&cm, cfg.plan.sigma)?;
    }
    let cell = |p: [f64; 2], what: &str| {
        raster
            .spec
            .cell_of(p[0], p[1])
            .ok_or_else(|| Error::InvalidEndpoint(format!("{what} ({}, {}) lies outside the map", p[0], p[1])))
    };
    let path = astar(&cm, cell(start, "start")?, cell(goal, "goal")?)?;
    Ok((cm, path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text + "\n")?;
    Ok(())
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Run directory contents needed by the downstream stages.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub calib: Calibration,
    pub poses: Vec<(f64, RigidTransform)>,
    pub frames: Vec<Frame>,
    pub tracklets: Vec<Tracklet>,
}

fn nearest_frame(poses: &[(f64, RigidTransform)], t: f64) -> Option<usize> {
    let k = poses.partition_point(|(pt, _)| *pt < t);
    [k.checked_sub(1), Some(k)]
        .into_iter()
        .flatten()
        .filter(|&i| i < poses.len())
        .min_by(|&a, &b| (poses[a].0 - t).abs().total_cmp(&(poses[b].0 - t).abs()))
        .filter(|&i| (poses[i].0 - t).abs() <= TIMESTAMP_TOLERANCE)
}

/// Reads calibration and poses only.
pub fn load_poses(run: &Path) -> Result<(Calibration, Vec<(f64, RigidTransform)>)> {
    let layout = RunLayout::new(run);
    Ok((io::read_calibration(&layout.calib())?, io::read_poses(&layout.poses())?))
}

pub fn load_run(cfg: &PipelineConfig, run: &Path, exec: Execution) -> Result<LoadedRun> {
    let layout = RunLayout::new(run);
    let (calib, poses) = load_poses(run)?;
    let tracklets = io::read_tracklets(&layout.tracklets(), &cfg.annotate.widths)?;
    let mut per_frame: Vec<Vec<DetectionBox>> = vec![Vec::new(); poses.len()];
    for d in io::read_detections(&layout.detections())? {
        match nearest_frame(&poses, d.timestamp) {
            Some(k) => per_frame[k].push(d),
            None => warn!("detection of track {} at t = {} matches no pose; ignored", d.track_id, d.timestamp),
        }
    }
    let frames = collect(exec.map_range(poses.len(), |k| {
        let raw = io::read_depth_png(&layout.depth(k))?;
        if raw.size() != calib.intrinsics.size() {
            return Err(Error::DimensionMismatch {
                expected: calib.intrinsics.size(),
                got: raw.size(),
            });
        }
        Ok(Frame {
            index: k,
            timestamp: poses[k].0,
            base_to_world: poses[k].1,
            depth: densify_depth(&raw, cfg.geometry.densify_radius)?,
            detections: per_frame[k].clone(),
        })
    }))?;
    Ok(LoadedRun {
        calib,
        poses,
        frames,
        tracklets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub frames: usize,
    pub tracklets: usize,
    pub detections: usize,
}

/// Simulates a run and writes it in the ingestion formats, together with
/// oracle predictions (`pred/`), per-pixel truth (`gt/`) and the BEV truth
/// (`gt_bev.*`).
pub fn cmd_simulate(cfg: &PipelineConfig, out: &Path) -> Result<SimulateSummary> {
    let exec = cfg.execution;
    let world = generate_world(&cfg.world)?;
    let sim = simulate_run(&world, &cfg.run, cfg.seed, exec)?;
    let layout = RunLayout::new(out);
    fs::create_dir_all(out)?;
    io::write_calibration(&layout.calib(), &sim.calib)?;
    let poses: Vec<(f64, RigidTransform)> = sim.frames.iter().map(|f| (f.timestamp, f.base_to_world)).collect();
    io::write_poses(&layout.poses(), &poses)?;
    io::write_tracklets(&layout.tracklets(), &sim.tracklets)?;
    let detections: Vec<DetectionBox> = sim.frames.iter().flat_map(|f| f.detections.iter().copied()).collect();
    io::write_detections(&layout.detections(), &detections)?;
    io::write_class_grid(out, "gt_bev", &world.raster)?;
    collect(exec.map_range(sim.frames.len(), |k| {
        let f = &sim.frames[k];
        let stem = frame_stem(k);
        io::write_depth_png(&layout.depth(k), &f.depth)?;
        io::write_mask(&layout.gt_dir(), &stem, &f.truth)?;
        let pred = prediction_oracle(&f.truth, &cfg.oracle, cfg.seed, k as u64)?;
        io::write_prediction_pngs(&layout.pred_dir(), &stem, &pred)
    }))?;
    let summary = SimulateSummary {
        frames: sim.frames.len(),
        tracklets: sim.tracklets.len(),
        detections: detections.len(),
    };
    info!("simulated {} frames, {} tracklets, {} detections", summary.frames, summary.tracklets, summary.detections);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCoverage {
    pub frame: usize,
    pub ego_only: f64,
    pub d0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub frames: usize,
    pub mean_coverage_ego_only: f64,
    pub mean_coverage_d0: f64,
    pub per_frame: Vec<FrameCoverage>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Writes one D0 mask per frame and `coverage.json`.
pub fn cmd_annotate(cfg: &PipelineConfig, run: &Path, out: &Path) -> Result<AnnotateSummary> {
    let exec = cfg.execution;
    let loaded = load_run(cfg, run, exec)?;
    let ann = annotate_frames(cfg, &loaded.calib, &loaded.frames, &loaded.tracklets, exec)?;
    fs::create_dir_all(out)?;
    collect(exec.map_range(ann.len(), |k| io::write_mask(out, &frame_stem(k), &ann[k].d0)))?;
    let per_frame: Vec<FrameCoverage> = ann
        .iter()
        .enumerate()
        .map(|(k, a)| FrameCoverage {
            frame: k,
            ego_only: coverage_fraction(&a.ego_only),
            d0: coverage_fraction(&a.d0),
        })
        .collect();
    let summary = AnnotateSummary {
        frames: ann.len(),
        mean_coverage_ego_only: mean(per_frame.iter().map(|c| c.ego_only)),
        mean_coverage_d0: mean(per_frame.iter().map(|c| c.d0)),
        per_frame,
    };
    write_json(&out.join("coverage.json"), &summary)?;
    info!("annotated {} frames, mean D0 coverage {:.3}", summary.frames, summary.mean_coverage_d0);
    Ok(summary)
}

/// A run directory and the directory holding its predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunInput {
    pub run: PathBuf,
    pub pred: PathBuf,
}

impl RunInput {
    /// Predictions default to `<run>/pred`.
    pub fn new(run: impl Into<PathBuf>, pred: Option<PathBuf>) -> Self {
        let run = run.into();
        let pred = pred.unwrap_or_else(|| RunLayout::new(&run).pred_dir());
        Self { run, pred }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub grid: GridSpec,
    pub observed_cells: usize,
    pub runs: Vec<FuseStats>,
}

/// Fuses every run into one map; writes `map.tmap` and the finalised
/// raster `map.png` / `map.json` / `map_color.png`, plus `fuse.json`.
pub fn cmd_fuse(cfg: &PipelineConfig, runs: &[RunInput], out: &Path) -> Result<FuseSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("fuse needs at least one run".into()));
    }
    let exec = cfg.execution;
    let mut all_poses = Vec::new();
    for r in runs {
        all_poses.extend(load_poses(&r.run)?.1.into_iter().map(|p| p.1));
    }
    let grid = map_grid(cfg, &all_poses)?;
    let mut map = SurfaceMap::new(grid);
    let mut stats = Vec::new();
    for r in runs {
        let loaded = load_run(cfg, &r.run, exec)?;
        let preds = collect(exec.map_range(loaded.frames.len(), |k| {
            let p = io::read_prediction(&r.pred, &frame_stem(k))?;
            if p.size() != loaded.calib.intrinsics.size() {
                return Err(Error::DimensionMismatch {
                    expected: loaded.calib.intrinsics.size(),
                    got: p.size(),
                });
            }
            Ok(p)
        }))?;
        stats.push(fuse_frames(cfg, &mut map, &loaded.calib, &loaded.frames, &preds, exec)?);
    }
    fs::create_dir_all(out)?;
    let tmap = out.join("map.tmap");
    io::write_tmap(&tmap, &map)?;
    // Finalise from the stored map so that `render` sees the same classes.
    let finalized = finalize_map(&io::read_tmap(&tmap)?);
    io::write_class_grid(out, "map", &finalized.raster)?;
    let summary = FuseSummary {
        grid,
        observed_cells: finalized.observed_cells(),
        runs: stats,
    };
    write_json(&out.join("fuse.json"), &summary)?;
    info!("fused map with {} observed cells", summary.observed_cells);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderCoverage {
    pub frame: usize,
    pub d0: Option<f64>,
    pub d1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    pub frames: usize,
    pub mesh_vertices: usize,
    pub mesh_faces: usize,
    pub mean_coverage_d0: Option<f64>,
    pub mean_coverage_d1: f64,
    /// Frames where D1 labels at least as many pixels as D0.
    pub frames_d1_ge_d0: Option<usize>,
    pub per_frame: Vec<RenderCoverage>,
}

/// Triangulates, smooths and renders the map into every frame of the run.
/// Writes `mesh.txt`, one D1 mask per frame and `coverage.json`.
pub fn cmd_render(cfg: &PipelineConfig, tmap: &Path, run: &Path, d0: Option<&Path>, out: &Path) -> Result<RenderSummary> {
    let exec = cfg.execution;
    let finalized = finalize_map(&io::read_tmap(tmap)?);
    let mesh = build_mesh(cfg, &finalized)?;
    let (calib, poses) = load_poses(run)?;
    let transforms: Vec<RigidTransform> = poses.iter().map(|p| p.1).collect();
    let masks = render_frames(mesh.as_ref(), &calib, &transforms, exec);
    fs::create_dir_all(out)?;
    let empty = SemanticMesh::new(Vec::new(), Vec::new(), Vec::new())?;
    io::write_mesh(&out.join("mesh.txt"), mesh.as_ref().unwrap_or(&empty))?;
    collect(exec.map_range(masks.len(), |k| io::write_mask(out, &frame_stem(k), &masks[k])))?;
    let d0_cov: Option<Vec<f64>> = match d0 {
        Some(dir) => Some(collect(exec.map_range(masks.len(), |k| {
            Ok(coverage_fraction(&io::read_class_png(&dir.join(format!("{}.png", frame_stem(k))))?))
        }))?),
        None => None,
    };
    let per_frame: Vec<RenderCoverage> = masks
        .iter()
        .enumerate()
        .map(|(k, m)| RenderCoverage {
            frame: k,
            d0: d0_cov.as_ref().map(|c| c[k]),
            d1: coverage_fraction(m),
        })
        .collect();
    let summary = RenderSummary {
        frames: masks.len(),
        mesh_vertices: mesh.as_ref().map_or(0, |m| m.vertices.len()),
        mesh_faces: mesh.as_ref().map_or(0, |m| m.faces.len()),
        mean_coverage_d0: d0_cov.as_ref().map(|c| mean(c.iter().copied())),
        mean_coverage_d1: mean(per_frame.iter().map(|c| c.d1)),
        frames_d1_ge_d0: d0_cov.as_ref().map(|_| per_frame.iter().filter(|c| c.d0.is_some_and(|d| c.d1 >= d)).count()),
        per_frame,
    };
    write_json(&out.join("coverage.json"), &summary)?;
    info!("rendered {} frames, mean D1 coverage {:.3}", summary.frames, summary.mean_coverage_d1);
    Ok(summary)
}

/// Optional label sources for `eval`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalInputs {
    pub pred: Option<PathBuf>,
    pub d0: Option<PathBuf>,
    pub d1: Option<PathBuf>,
    /// Directory holding the fused `map.png` / `map.json`.
    pub map: Option<PathBuf>,
}

/// Scores every supplied label source against the run's per-pixel truth
/// (`gt/`) and the fused map against `gt_bev.*`. Writes `metrics.json` and
/// `metrics.txt`.
pub fn cmd_eval(cfg: &PipelineConfig, run: &Path, inputs: &EvalInputs, out: &Path) -> Result<MetricsReport> {
    let exec = cfg.execution;
    let layout = RunLayout::new(run);
    let (_, poses) = load_poses(run)?;
    let n = poses.len();
    let gt = collect(exec.map_range(n, |k| io::read_class_png(&layout.gt_dir().join(format!("{}.png", frame_stem(k))))))?;
    let masks = |dir: &Option<PathBuf>| -> Result<Option<Vec<AnnotationImage>>> {
        match dir {
            Some(d) => Ok(Some(collect(
                exec.map_range(n, |k| io::read_class_png(&d.join(format!("{}.png", frame_stem(k))))),
            )?)),
            None => Ok(None),
        }
    };
    let score = |labels: &[AnnotationImage]| -> Result<_> {
        let mut cm = ConfusionMatrix::default();
        for (l, g) in labels.iter().zip(&gt) {
            cm.add(&confusion(l, g)?);
        }
        Ok(class_metrics(&cm))
    };
    let d0 = masks(&inputs.d0)?;
    let d1 = masks(&inputs.d1)?;
    let preds: Option<Vec<PredictionImage>> = match &inputs.pred {
        Some(d) => Some(collect(exec.map_range(n, |k| io::read_prediction(d, &frame_stem(k))))?),
        None => None,
    };
    let pred_labels: Option<Vec<AnnotationImage>> = preds.as_ref().map(|ps| {
        ps.iter()
            .map(|p| {
                let mut a = AnnotationImage::unknown(p.width, p.height);
                for y in 0..p.height {
                    for x in 0..p.width {
                        a.set(x, y, p.argmax_class(x, y));
                    }
                }
                a
            })
            .collect()
    });
    let loss_d1 = match (&preds, &d1) {
        (Some(p), Some(t)) => {
            let losses = collect(p.iter().zip(t).map(|(p, t)| weighted_cross_entropy(p, t, &cfg.eval.weights)).collect())?;
            Some(mean(losses.into_iter()))
        }
        _ => None,
    };
    let bev = match &inputs.map {
        Some(dir) => {
            let map = io::read_class_grid(dir, "map")?;
            let truth = io::read_class_grid(run, "gt_bev")?;
            Some(compare_bev(&map, &truth)?)
        }
        None => None,
    };
    let report = MetricsReport {
        frames: n,
        prediction: pred_labels.as_deref().map(score).transpose()?,
        d0: d0.as_deref().map(score).transpose()?,
        d1: d1.as_deref().map(score).transpose()?,
        coverage_d0: d0.as_ref().map(|m| mean(m.iter().map(coverage_fraction))),
        coverage_d1: d1.as_ref().map(|m| mean(m.iter().map(coverage_fraction))),
        loss_d1,
        bev,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    fs::write(out.join("metrics.txt"), report.to_table())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub cost: f64,
    pub cells: usize,
}

/// Plans on the fused map in `map_dir`. Start and goal come from the
/// configuration, or else from the first and last pose of `run`. Writes
/// `path.txt`, `path.png` and `plan.json`.
pub fn cmd_plan(cfg: &PipelineConfig, map_dir: &Path, run: Option<&Path>, out: &Path) -> Result<PlanSummary> {
    let raster = io::read_class_grid(map_dir, "map")?;
    let from_run = |first: bool| -> Result<[f64; 2]> {
        let run = run.ok_or_else(|| Error::InvalidEndpoint("no start/goal configured and no run given".into()))?;
        let (_, poses) = load_poses(run)?;
        let pose = if first { poses.first() } else { poses.last() };
        let t = pose.ok_or_else(|| Error::InvalidEndpoint("run has no poses".into()))?.1.translation();
        Ok([t.x, t.y])
    };
    let start = match cfg.plan.start {
        Some(s) => s,
        None => from_run(true)?,
    };
    let goal = match cfg.plan.goal {
        Some(g) => g,
        None => from_run(false)?,
    };
    let (_, path) = plan_route(cfg, &raster, start, goal)?;
    fs::create_dir_all(out)?;
    io::write_path(&out.join("path.txt"), &path, &raster.spec)?;
    io::write_path_overlay(&out.join("path.png"), &raster, &path)?;
    let summary = PlanSummary {
        start,
        goal,
        cost: path.cost,
        cells: path.cells.len(),
    };
    write_json(&out.join("plan.json"), &summary)?;
    info!("planned a path of {} cells, cost {:.3}", summary.cells, summary.cost);
    Ok(summary)
}
