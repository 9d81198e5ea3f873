//! Log-odds aggregation of per-pixel class predictions into a bird's-eye
//! view surface map.
//!
//! Each map cell holds a belief vector `h` over the four surface classes
//! (Unknown is the absence of belief, not a class). Beliefs start at the
//! uniform prior `h0` and every observation `p` adds `l(p) - h0`, where
//! `l(p)_k = log(p_k / (1 - p_k))`. Finalisation applies a softmax and takes
//! the arg-max.
//!
//! Because updates are pure additions, frames can be turned into sparse
//! [`MapDelta`]s independently and merged afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotate::SurfaceClass;
use crate::error::{check_dims, Error, Result};
use crate::geometry::{CameraView, DepthImage, GroundPlane, PixelPoint};
use crate::grid::{ClassGrid, GridSpec};

/// Number of classes carried in a belief vector.
pub const BELIEF_K: usize = SurfaceClass::BELIEF.len();

pub const DEFAULT_EPS: f64 = 1e-6;

/// A probability vector over the belief classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("probabilities must lie in [0, 1]: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBelief {
    pub log_odds: Vec<f64>,
    pub count: u32,
    pub elevation_sum: f64,
}

/// The uniform prior: every component is `log((1/K) / (1 - 1/K))`.
pub fn uniform_belief(k: usize) -> Result<PatchBelief> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least two classes, got {k}")));
    }
    let p = 1.0 / k as f64;
    Ok(PatchBelief {
        log_odds: vec![logit(p); k],
        count: 0,
        elevation_sum: 0.0,
    })
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse observation model: component-wise log odds with `p` clamped to
/// `[eps, 1 - eps]`.
pub fn logodds_from_probs(p: &[f64], eps: f64) -> Vec<f64> {
    p.iter().map(|&v| logit(v.clamp(eps, 1.0 - eps))).collect()
}

/// `h + (l - h0)`, with the observation count incremented.
pub fn update_belief(h: &PatchBelief, l: &[f64], h0: &PatchBelief) -> Result<PatchBelief> {
    let k = h.log_odds.len();
    check_dims((k, 1), (l.len(), 1))?;
    check_dims((k, 1), (h0.log_odds.len(), 1))?;
    Ok(PatchBelief {
        log_odds: h
            .log_odds
            .iter()
            .zip(l)
            .zip(&h0.log_odds)
            .map(|((h, l), h0)| h + (l - h0))
            .collect(),
        count: h.count + 1,
        elevation_sum: h.elevation_sum,
    })
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEstimate {
    pub class: SurfaceClass,
    pub probabilities: Vec<f64>,
    /// The arg-max was tied.
    pub low_confidence: bool,
}

pub fn finalize_patch(h: &PatchBelief) -> PatchEstimate {
    let probabilities = softmax(&h.log_odds);
    if h.count == 0 {
        return PatchEstimate {
            class: SurfaceClass::Unknown,
            probabilities,
            low_confidence: true,
        };
    }
    let k = argmax(&probabilities);
    let tied = probabilities
        .iter()
        .enumerate()
        .any(|(i, &p)| i != k && p == probabilities[k]);
    PatchEstimate {
        class: SurfaceClass::from_belief_index(k),
        probabilities,
        low_confidence: tied,
    }
}

/// Per-pixel class probabilities of one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionImage {
    pub width: usize,
    pub height: usize,
    /// `width × height × BELIEF_K`, pixel-interleaved.
    pub probs: Vec<f32>,
}

impl PredictionImage {
    pub fn new(width: usize, height: usize, probs: Vec<f32>) -> Result<Self> {
        check_dims((width * height * BELIEF_K, 1), (probs.len(), 1))?;
        Ok(Self { width, height, probs })
    }

    /// Expands a class raster plus a confidence raster: the predicted class
    /// gets `confidence`, the remaining mass is spread uniformly. Unknown
    /// pixels become the uniform distribution.
    pub fn from_class_confidence(
        width: usize,
        height: usize,
        classes: &[SurfaceClass],
        confidence: &[f32],
    ) -> Result<Self> {
        check_dims((width * height, 1), (classes.len(), 1))?;
        check_dims((width * height, 1), (confidence.len(), 1))?;
        let mut probs = Vec::with_capacity(width * height * BELIEF_K);
        for (c, &conf) in classes.iter().zip(confidence) {
            probs.extend_from_slice(&peaked(*c, conf));
        }
        Ok(Self { width, height, probs })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * BELIEF_K;
        &self.probs[i..i + BELIEF_K]
    }

    pub fn argmax_class(&self, x: usize, y: usize) -> SurfaceClass {
        let p = self.pixel(x, y);
        let mut best = 0;
        for k in 1..BELIEF_K {
            if p[k] > p[best] {
                best = k;
            }
        }
        SurfaceClass::from_belief_index(best)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Probability vector with `confidence` on `class` and the rest spread
/// uniformly; uniform for `Unknown`.
pub fn peaked(class: SurfaceClass, confidence: f32) -> [f32; BELIEF_K] {
    match class.belief_index() {
        Some(k) => {
            let conf = confidence.clamp(0.0, 1.0);
            let rest = (1.0 - conf) / (BELIEF_K - 1) as f32;
            let mut v = [rest; BELIEF_K];
            v[k] = conf;
            v
        }
        None => [1.0 / BELIEF_K as f32; BELIEF_K],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    /// Map cell size in meters.
    pub resolution: f64,
    /// Probability clamp for the inverse observation model.
    pub eps: f64,
    /// Points within this distance of the ground plane update the map.
    pub ground_band: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            resolution: 0.25,
            eps: DEFAULT_EPS,
            ground_band: 0.20,
        }
    }
}

/// Global BEV map of patch beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMap {
    pub grid: GridSpec,
    h0: Vec<f64>,
    /// `grid.len() × BELIEF_K`, cell-interleaved.
    log_odds: Vec<f64>,
    counts: Vec<u32>,
    elevation_sum: Vec<f64>,
}

impl SurfaceMap {
    pub fn new(grid: GridSpec) -> Self {
        let h0 = uniform_belief(BELIEF_K).expect("BELIEF_K >= 2").log_odds;
        let log_odds = h0.iter().copied().cycle().take(grid.len() * BELIEF_K).collect();
        Self {
            grid,
            h0,
            log_odds,
            counts: vec![0; grid.len()],
            elevation_sum: vec![0.0; grid.len()],
        }
    }

    /// Rebuilds a map from raw per-cell arrays (used by the map file reader).
    pub fn from_parts(grid: GridSpec, log_odds: Vec<f64>, counts: Vec<u32>, elevation_sum: Vec<f64>) -> Result<Self> {
        check_dims((grid.len() * BELIEF_K, 1), (log_odds.len(), 1))?;
        check_dims((grid.len(), 1), (counts.len(), 1))?;
        check_dims((grid.len(), 1), (elevation_sum.len(), 1))?;
        let mut m = Self::new(grid);
        m.log_odds = log_odds;
        m.counts = counts;
        m.elevation_sum = elevation_sum;
        Ok(m)
    }

    pub fn prior(&self) -> &[f64] {
        &self.h0
    }

    pub fn belief(&self, cell: usize) -> PatchBelief {
        PatchBelief {
            log_odds: self.log_odds[cell * BELIEF_K..(cell + 1) * BELIEF_K].to_vec(),
            count: self.counts[cell],
            elevation_sum: self.elevation_sum[cell],
        }
    }

    pub fn log_odds(&self) -> &[f64] {
        &self.log_odds
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn elevation_sums(&self) -> &[f64] {
        &self.elevation_sum
    }

    pub fn observed_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Adds one observation (log odds `l`, point elevation `z`) to a cell.
    pub fn observe(&mut self, cell: usize, l: &[f64], z: f64) {
        let h = &mut self.log_odds[cell * BELIEF_K..(cell + 1) * BELIEF_K];
        for k in 0..BELIEF_K {
            h[k] += l[k] - self.h0[k];
        }
        self.counts[cell] += 1;
        self.elevation_sum[cell] += z;
    }

    pub fn apply_delta(&mut self, delta: &MapDelta) -> Result<()> {
        check_dims((self.grid.width, self.grid.height), (delta.grid.width, delta.grid.height))?;
        for (&cell, d) in &delta.cells {
            let h = &mut self.log_odds[cell * BELIEF_K..(cell + 1) * BELIEF_K];
            for k in 0..BELIEF_K {
                h[k] += d.dh[k];
            }
            self.counts[cell] += d.count;
            self.elevation_sum[cell] += d.z_sum;
        }
        Ok(())
    }

    /// Merges another map over the same grid: beliefs add relative to the
    /// shared prior, counts and elevation sums add.
    pub fn merge(&mut self, other: &SurfaceMap) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        for (i, (a, b)) in self.log_odds.iter_mut().zip(&other.log_odds).enumerate() {
            *a += b - other.h0[i % BELIEF_K];
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.elevation_sum.iter_mut().zip(&other.elevation_sum) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellDelta {
    pub dh: [f64; BELIEF_K],
    pub count: u32,
    pub z_sum: f64,
}

/// Sparse per-frame contribution to a [`SurfaceMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapDelta {
    pub grid: GridSpec,
    pub cells: BTreeMap<usize, CellDelta>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FrameStats {
    /// Pixels with a valid depth.
    pub candidates: usize,
    pub fused: usize,
    /// Off-ground points not predicted as obstacles.
    pub rejected: usize,
    pub out_of_bounds: usize,
}

/// Computes the contribution of one frame without touching the map.
///
/// Each pixel with a valid depth is backprojected; the point updates its
/// cell when it lies within `ground_band` of the ground plane or when the
/// prediction's arg-max is Obstacle.
pub fn frame_delta(
    grid: &GridSpec,
    pred: &PredictionImage,
    depth: &DepthImage,
    view: &CameraView,
    plane: &GroundPlane,
    cfg: &FuseConfig,
) -> Result<(MapDelta, FrameStats)> {
    check_dims(depth.size(), pred.size())?;
    check_dims(view.intrinsics.size(), pred.size())?;
    let h0 = uniform_belief(BELIEF_K)?.log_odds;
    let mut cells: BTreeMap<usize, CellDelta> = BTreeMap::new();
    let mut stats = FrameStats::default();
    let mut p64 = [0.0f64; BELIEF_K];
    for y in 0..depth.height {
        for x in 0..depth.width {
            let Some(d) = depth.get(x, y) else { continue };
            stats.candidates += 1;
            let p = view.backproject(&PixelPoint::center_of(x, y), d)?;
            let near_ground = (p.z - plane.height_at(p.x, p.y)).abs() <= cfg.ground_band;
            if !near_ground && pred.argmax_class(x, y) != SurfaceClass::Obstacle {
                stats.rejected += 1;
                continue;
            }
            let Some((i, j)) = grid.cell_of(p.x, p.y) else {
                stats.out_of_bounds += 1;
                continue;
            };
            for (dst, &src) in p64.iter_mut().zip(pred.pixel(x, y)) {
                *dst = src as f64;
            }
            let l = logodds_from_probs(&p64, cfg.eps);
            let entry = cells.entry(grid.index(i, j)).or_insert(CellDelta {
                dh: [0.0; BELIEF_K],
                count: 0,
                z_sum: 0.0,
            });
            for k in 0..BELIEF_K {
                entry.dh[k] += l[k] - h0[k];
            }
            entry.count += 1;
            entry.z_sum += p.z;
            stats.fused += 1;
        }
    }
    if stats.out_of_bounds > 0 && stats.out_of_bounds + stats.rejected == stats.candidates {
        return Err(Error::FrameOutsideMap);
    }
    Ok((MapDelta { grid: *grid, cells }, stats))
}

/// Fuses one frame into the map. `FrameOutsideMap` leaves the map untouched.
pub fn accumulate_frame(
    map: &mut SurfaceMap,
    pred: &PredictionImage,
    depth: &DepthImage,
    view: &CameraView,
    plane: &GroundPlane,
    cfg: &FuseConfig,
) -> Result<FrameStats> {
    let (delta, stats) = frame_delta(&map.grid, pred, depth, view, plane, cfg)?;
    map.apply_delta(&delta)?;
    Ok(stats)
}

/// Finalised semantic BEV map.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedMap {
    pub raster: ClassGrid,
    /// Mean elevation of contributing points; `None` for unobserved cells.
    pub elevation: Vec<Option<f64>>,
    pub counts: Vec<u32>,
}

impl FinalizedMap {
    pub fn observed_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn finalize_map(map: &SurfaceMap) -> FinalizedMap {
    let n = map.grid.len();
    let mut raster = ClassGrid::filled(map.grid, SurfaceClass::Unknown);
    let mut elevation = vec![None; n];
    for cell in 0..n {
        let b = map.belief(cell);
        if b.count == 0 {
            continue;
        }
        raster.classes[cell] = finalize_patch(&b).class;
        elevation[cell] = Some(b.elevation_sum / b.count as f64);
    }
    FinalizedMap {
        raster,
        elevation,
        counts: map.counts.clone(),
    }
}
