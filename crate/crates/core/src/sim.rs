//! Synthetic street world and sensor simulation with exact ground truth.
//!
//! The world is a semantic raster: a road band along x with crossings, a
//! sidewalk on each side, walls beyond the sidewalks and a few box
//! obstacles near the walls. The ego walks a route on legal surfaces while
//! pedestrians and vehicles follow sidewalk and lane centrelines. Depth and
//! per-pixel truth come from ray casting against the raster.

use std::f64::consts::PI;

use nalgebra::{Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotate::{AgentClass, AnnotationImage, BaseWidths, DetectionBox, SurfaceClass, TrackPoint, Tracklet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fuse::{peaked, PredictionImage, BELIEF_K};
use crate::geometry::{Calibration, CameraIntrinsics, CameraView, DepthImage, PixelPoint, RigidTransform, WorldPoint};
use crate::grid::{ClassGrid, GridSpec};
use crate::raster::NEAR_PLANE;

/// Obstacle faces sit this far inside their cell so that surface points
/// bin into the obstacle cell.
const FACE_INSET: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    /// Set from the pipeline seed; not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Extent along the street (x), centred on the origin.
    pub length: f64,
    /// Extent across the street (y), centred on the origin.
    pub width: f64,
    pub resolution: f64,
    pub road_width: f64,
    pub sidewalk_width: f64,
    pub crossings: usize,
    pub crossing_width: f64,
    /// Number of 2×2-cell box obstacles placed near the walls.
    pub obstacles: usize,
    pub obstacle_height: f64,
    /// Height of the walls bounding the sidewalks.
    pub wall_height: f64,
    /// Amplitude of the terrain `A·sin(2πx/λ)·cos(2πy/λ)`; 0 is flat.
    pub terrain_amplitude: f64,
    pub terrain_wavelength: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 40.0,
            width: 24.0,
            resolution: 0.25,
            road_width: 7.0,
            sidewalk_width: 4.0,
            crossings: 2,
            crossing_width: 4.0,
            obstacles: 12,
            obstacle_height: 0.8,
            wall_height: 2.0,
            terrain_amplitude: 0.0,
            terrain_wavelength: 20.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("width", self.width),
            ("resolution", self.resolution),
            ("road_width", self.road_width),
            ("sidewalk_width", self.sidewalk_width),
            ("crossing_width", self.crossing_width),
            ("obstacle_height", self.obstacle_height),
            ("wall_height", self.wall_height),
            ("terrain_wavelength", self.terrain_wavelength),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InfeasibleLayout(format!("{name} must be positive, got {v}")));
            }
        }
        if self.road_width + 2.0 * self.sidewalk_width > self.width {
            return Err(Error::InfeasibleLayout(format!(
                "road ({}) plus two sidewalks ({}) exceed the world width {}",
                self.road_width, self.sidewalk_width, self.width
            )));
        }
        if self.crossings as f64 * self.crossing_width > self.length {
            return Err(Error::InfeasibleLayout(format!(
                "{} crossings of width {} do not fit along {}",
                self.crossings, self.crossing_width, self.length
            )));
        }
        if !self.terrain_amplitude.is_finite() {
            return Err(Error::InfeasibleLayout("terrain amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn crossing_centers(&self) -> Vec<f64> {
        let n = self.crossings as f64;
        (0..self.crossings)
            .map(|k| -self.length / 2.0 + self.length * (k as f64 + 0.5) / n)
            .collect()
    }

    /// Lane centrelines: `[right-hand lane heading +x, lane heading -x]`.
    pub fn lane_y(&self) -> [f64; 2] {
        [-self.road_width / 4.0, self.road_width / 4.0]
    }

    /// Distance of the sidewalk centrelines from the street axis.
    pub fn sidewalk_y(&self) -> f64 {
        self.road_width / 2.0 + self.sidewalk_width / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthWorld {
    pub spec: WorldSpec,
    pub raster: ClassGrid,
    /// Obstacle height above the terrain per cell; 0 for surface cells.
    pub heights: Vec<f64>,
}

/// Result of a ray cast: ray parameter, cell and class of the surface hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub cell: (usize, usize),
    pub class: SurfaceClass,
}

pub fn generate_world(spec: &WorldSpec) -> Result<GroundTruthWorld> {
    spec.validate()?;
    let res = spec.resolution;
    let w = (spec.length / res).round() as usize;
    let h = (spec.width / res).round() as usize;
    let grid = GridSpec::new(-(w as f64) * res / 2.0, -(h as f64) * res / 2.0, res, w, h)?;
    let mut raster = ClassGrid::filled(grid, SurfaceClass::Unknown);
    let mut heights = vec![0.0; grid.len()];
    let crossings = spec.crossing_centers();
    let half_road = spec.road_width / 2.0;
    let outer = half_road + spec.sidewalk_width;
    for j in 0..h {
        for i in 0..w {
            let (x, y) = grid.cell_center(i, j);
            let class = if y.abs() < half_road {
                if crossings.iter().any(|c| (x - c).abs() < spec.crossing_width / 2.0) {
                    SurfaceClass::Crossing
                } else {
                    SurfaceClass::Road
                }
            } else if y.abs() < outer {
                SurfaceClass::Pedestrian
            } else {
                heights[grid.index(i, j)] = spec.wall_height;
                SurfaceClass::Obstacle
            };
            raster.set(i, j, class);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.obstacles {
        attempts += 1;
        if attempts > 1000 * spec.obstacles.max(1) {
            return Err(Error::InfeasibleLayout(format!(
                "placed only {placed} of {} obstacles",
                spec.obstacles
            )));
        }
        // Footprint: 2×2 cells, at most two cells away from the wall.
        let away = rng.random_range(0..3usize);
        let rows = if rng.random_bool(0.5) {
            let Some((_, edge)) = grid.cell_of(0.0, outer - res / 2.0) else { continue };
            (edge - away - 1)..=(edge - away)
        } else {
            let Some((_, edge)) = grid.cell_of(0.0, -outer + res / 2.0) else { continue };
            (edge + away)..=(edge + away + 1)
        };
        let i0 = rng.random_range(4..w.saturating_sub(5).max(5));
        let cells: Vec<(usize, usize)> = (i0..i0 + 2).flat_map(|i| rows.clone().map(move |j| (i, j))).collect();
        // Keep clear of crossings and leave a one-cell margin to other obstacles.
        let clear = cells.iter().all(|&(i, j)| {
            let (x, _) = grid.cell_center(i, j);
            raster.get(i, j) == SurfaceClass::Pedestrian
                && crossings.iter().all(|c| (x - c).abs() > spec.crossing_width / 2.0 + 1.5)
                && (i - 1..=i + 1).all(|a| {
                    (j - 1..=j + 1).all(|b| raster.get(a, b) != SurfaceClass::Obstacle || is_wall(spec, &grid, a, b))
                })
        });
        if !clear {
            continue;
        }
        for (i, j) in cells {
            raster.set(i, j, SurfaceClass::Obstacle);
            heights[grid.index(i, j)] = spec.obstacle_height;
        }
        placed += 1;
    }
    Ok(GroundTruthWorld {
        spec: spec.clone(),
        raster,
        heights,
    })
}

fn is_wall(spec: &WorldSpec, grid: &GridSpec, i: usize, j: usize) -> bool {
    grid.cell_center(i, j).1.abs() >= spec.road_width / 2.0 + spec.sidewalk_width
}

impl GroundTruthWorld {
    pub fn grid(&self) -> &GridSpec {
        &self.raster.spec
    }

    pub fn terrain_height(&self, x: f64, y: f64) -> f64 {
        let a = self.spec.terrain_amplitude;
        if a == 0.0 {
            return 0.0;
        }
        let k = 2.0 * PI / self.spec.terrain_wavelength;
        a * (k * x).sin() * (k * y).cos()
    }

    pub fn class_at(&self, x: f64, y: f64) -> SurfaceClass {
        self.raster.class_at(x, y)
    }

    /// First surface hit along `o + t·d` for `t ∈ [0, t_max]`.
    pub fn raycast(&self, o: &WorldPoint, d: &Vector3<f64>, t_max: f64) -> Option<Hit> {
        let g = self.grid();
        let res = g.resolution;
        let (gx, gy) = ((o.x - g.origin_x) / res, (o.y - g.origin_y) / res);
        let (dx, dy) = (d.x / res, d.y / res);
        let (w, h) = (g.width as f64, g.height as f64);
        let (mut t0, mut t1) = (0.0f64, t_max);
        for (p, v, hi) in [(gx, dx, w), (gy, dy, h)] {
            if v == 0.0 {
                if p < 0.0 || p > hi {
                    return None;
                }
            } else {
                let (a, b) = ((0.0 - p) / v, (hi - p) / v);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t0 >= t1 {
            return None;
        }
        let start_cell = |p: f64, v: f64, n: usize| -> isize {
            let c = if v < 0.0 { p.ceil() - 1.0 } else { p.floor() };
            (c as isize).clamp(0, n as isize - 1)
        };
        let mut i = start_cell(gx + dx * t0, dx, g.width);
        let mut j = start_cell(gy + dy * t0, dy, g.height);
        let (si, sj) = (dx.signum() as isize, dy.signum() as isize);
        let next = |c: isize, p: f64, v: f64| -> f64 {
            if v > 0.0 {
                ((c + 1) as f64 - p) / v
            } else if v < 0.0 {
                (c as f64 - p) / v
            } else {
                f64::INFINITY
            }
        };
        let mut t_in = t0;
        loop {
            let (nx, ny) = (next(i, gx, dx), next(j, gy, dy));
            let t_out = nx.min(ny).min(t1);
            if let Some(hit) = self.hit_in_cell(i as usize, j as usize, o, d, t_in, t_out) {
                return Some(hit);
            }
            if t_out >= t1 {
                return None;
            }
            if nx < ny {
                i += si;
            } else {
                j += sj;
            }
            if i < 0 || j < 0 || i >= g.width as isize || j >= g.height as isize {
                return None;
            }
            t_in = t_out;
        }
    }

    fn hit_in_cell(&self, i: usize, j: usize, o: &WorldPoint, d: &Vector3<f64>, a: f64, b: f64) -> Option<Hit> {
        let g = self.grid();
        let idx = g.index(i, j);
        let class = self.raster.classes[idx];
        let hit = |t: f64| Some(Hit { t, cell: (i, j), class });
        let height = self.heights[idx];
        if height > 0.0 {
            let x0 = g.origin_x + i as f64 * g.resolution;
            let y0 = g.origin_y + j as f64 * g.resolution;
            let (cx, cy) = g.cell_center(i, j);
            let top = self.terrain_height(cx, cy) + height;
            let lo = Point3::new(x0 + FACE_INSET, y0 + FACE_INSET, f64::NEG_INFINITY);
            let hi = Point3::new(x0 + g.resolution - FACE_INSET, y0 + g.resolution - FACE_INSET, top);
            if let Some((te, tx)) = ray_box(o, d, &lo, &hi) {
                let t = te.max(a);
                if t <= tx && t <= b {
                    return hit(t);
                }
            }
        }
        if self.spec.terrain_amplitude == 0.0 {
            if d.z < 0.0 {
                let t = -o.z / d.z;
                if t >= a && t <= b {
                    return hit(t);
                }
            }
            return None;
        }
        let f = |t: f64| o.z + t * d.z - self.terrain_height(o.x + t * d.x, o.y + t * d.y);
        if f(a) <= 0.0 {
            return hit(a);
        }
        if f(b) > 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (a, b);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hit(hi)
    }
}

/// Slab test of `o + t·d` against an axis-aligned box; returns the entry
/// and exit parameters when they overlap `t ≥ 0`.
pub fn ray_box(o: &WorldPoint, d: &Vector3<f64>, lo: &WorldPoint, hi: &WorldPoint) -> Option<(f64, f64)> {
    let (mut te, mut tx) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        te = te.max(a.min(b));
        tx = tx.min(a.max(b));
    }
    (te <= tx).then_some((te, tx))
}

/// Piecewise-linear path with arc-length parametrisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("a path needs at least one point".into()));
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let l = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cumulative.push(cumulative.last().unwrap() + l);
        }
        Ok(Self { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Position and unit tangent at arc length `s` (clamped to the path).
    /// At a vertex the tangent of the following segment is used.
    pub fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.clamp(0.0, self.length());
        let n = self.points.len();
        let mut k = 0;
        while k + 2 < n && self.cumulative[k + 1] <= s {
            k += 1;
        }
        if n == 1 {
            return (self.points[0], [1.0, 0.0]);
        }
        let (a, b) = (self.points[k], self.points[k + 1]);
        let len = self.cumulative[k + 1] - self.cumulative[k];
        if len == 0.0 {
            return (a, [1.0, 0.0]);
        }
        let u = (s - self.cumulative[k]) / len;
        let tan = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        ([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])], tan)
    }
}

/// A simulated traffic participant moving along a jittered centreline.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: u64,
    pub class: AgentClass,
    pub path: Polyline,
    /// Lateral offsets at knots spaced `knot_spacing` apart along the path.
    pub offsets: Vec<f64>,
    pub knot_spacing: f64,
    pub speed: f64,
    /// Time at which the agent is at the start of its path.
    pub t0: f64,
    /// Bounding volume `[length along x, width along y, height]`.
    pub size: [f64; 3],
}

impl Agent {
    fn offset_at(&self, s: f64) -> f64 {
        let u = s / self.knot_spacing;
        let k = (u.floor() as usize).min(self.offsets.len() - 1);
        let k1 = (k + 1).min(self.offsets.len() - 1);
        let f = (u - k as f64).clamp(0.0, 1.0);
        self.offsets[k] * (1.0 - f) + self.offsets[k1] * f
    }

    /// Ground position at time `t`, or `None` while the agent is off its path.
    pub fn position_at(&self, world: &GroundTruthWorld, t: f64) -> Option<WorldPoint> {
        let s = (t - self.t0) * self.speed;
        if s < 0.0 || s > self.path.length() {
            return None;
        }
        let ([x, y], [tx, ty]) = self.path.sample(s);
        let off = self.offset_at(s);
        let (x, y) = (x - ty * off, y + tx * off);
        Some(Point3::new(x, y, world.terrain_height(x, y)))
    }

    pub fn bounding_box(&self, ground: &WorldPoint) -> (WorldPoint, WorldPoint) {
        let [sx, sy, sz] = self.size;
        (
            Point3::new(ground.x - sx / 2.0, ground.y - sy / 2.0, ground.z),
            Point3::new(ground.x + sx / 2.0, ground.y + sy / 2.0, ground.z + sz),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    /// Ego waypoints in world meters.
    pub route: Vec<[f64; 2]>,
    /// Number of frames; by default the route length at `ego_speed`.
    pub frames: Option<usize>,
    pub fps: f64,
    pub ego_speed: f64,
    pub camera_height: f64,
    /// Downward camera pitch in degrees.
    pub pitch_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub pedestrians: usize,
    pub vehicles: usize,
    /// Fraction of pedestrians whose path crosses the street.
    pub crossing_fraction: f64,
    pub pedestrian_speed: [f64; 2],
    pub vehicle_speed: [f64; 2],
    pub jitter_sigma: f64,
    pub jitter_clamp: f64,
    pub knot_spacing: f64,
    pub max_range: f64,
    pub detection_range: f64,
    /// Render agents into depth and truth images (as obstacles).
    pub agents_in_depth: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            route: vec![[-17.0, -5.5], [-10.0, -5.5], [-10.0, 5.5], [12.0, 5.5]],
            frames: None,
            fps: 2.0,
            ego_speed: 1.2,
            camera_height: 1.2,
            pitch_deg: 15.0,
            image_width: 160,
            image_height: 120,
            focal: 100.0,
            pedestrians: 8,
            vehicles: 8,
            crossing_fraction: 0.5,
            pedestrian_speed: [1.0, 1.5],
            vehicle_speed: [3.0, 5.0],
            jitter_sigma: 0.1,
            jitter_clamp: 0.3,
            knot_spacing: 2.0,
            max_range: 60.0,
            detection_range: 30.0,
            agents_in_depth: false,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fps", self.fps),
            ("ego_speed", self.ego_speed),
            ("camera_height", self.camera_height),
            ("focal", self.focal),
            ("knot_spacing", self.knot_spacing),
            ("max_range", self.max_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.route.is_empty() {
            return Err(Error::InvalidArgument("route needs at least one waypoint".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidArgument("image size must be non-zero".into()));
        }
        for r in [self.pedestrian_speed, self.vehicle_speed] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::InvalidArgument(format!("speed range {r:?} must be positive and ordered")));
            }
        }
        if !(0.0..=1.0).contains(&self.crossing_fraction) {
            return Err(Error::InvalidArgument("crossing_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Camera rig: pitched down about the base y axis, mounted at
    /// `camera_height` above the base origin.
    pub fn calibration(&self) -> Result<Calibration> {
        let p = self.pitch_deg.to_radians();
        let z = Vector3::new(p.cos(), 0.0, -p.sin());
        let x = Vector3::new(0.0, -1.0, 0.0);
        let y = z.cross(&x);
        let rot = Rotation3::from_basis_unchecked(&[x, y, z]);
        let cam_to_base = RigidTransform::from_parts(
            UnitQuaternion::from_rotation_matrix(&rot),
            Vector3::new(0.0, 0.0, self.camera_height),
        );
        let intrinsics = CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )?;
        Ok(Calibration {
            intrinsics,
            base_to_cam: cam_to_base.inverse(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub timestamp: f64,
    pub base_to_world: RigidTransform,
    pub depth: DepthImage,
    /// Class of the surface seen through each pixel.
    pub truth: AnnotationImage,
    pub detections: Vec<DetectionBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub calib: Calibration,
    pub frames: Vec<SimFrame>,
    pub tracklets: Vec<Tracklet>,
    pub agents: Vec<Agent>,
}

fn jitter_offsets(rng: &mut ChaCha8Rng, len: f64, run: &RunSpec) -> Vec<f64> {
    let n = (len / run.knot_spacing).ceil() as usize + 1;
    let normal = Normal::new(0.0, run.jitter_sigma.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|_| normal.sample(rng).clamp(-run.jitter_clamp, run.jitter_clamp))
        .collect()
}

/// Distance kept between a vehicle's bumper and a walker on the road.
const YIELD_CLEARANCE: f64 = 3.0;

/// A walker on the road around `x` between `t_in` and `t_out`.
#[derive(Debug, Clone, Copy)]
struct RoadOccupancy {
    x: f64,
    t_in: f64,
    t_out: f64,
}

fn ego_occupancy(world: &GroundTruthWorld, poses: &[(f64, RigidTransform)], fps: f64) -> Vec<RoadOccupancy> {
    let mut out = Vec::new();
    let mut open: Option<(f64, f64, f64)> = None;
    for (t, pose) in poses {
        let p = pose.translation();
        let on_road = matches!(world.class_at(p.x, p.y), SurfaceClass::Road | SurfaceClass::Crossing);
        open = match (open, on_road) {
            (None, true) => Some((*t, *t, p.x)),
            (Some((t_in, _, x)), true) => Some((t_in, *t, x)),
            (Some((t_in, t_out, x)), false) => {
                out.push((t_in, t_out, x));
                None
            }
            (None, false) => None,
        };
    }
    out.extend(open);
    let half = 0.5 / fps;
    out.into_iter()
        .map(|(t_in, t_out, x)| RoadOccupancy {
            x,
            t_in: t_in - half,
            t_out: t_out + half,
        })
        .collect()
}

/// Delays a vehicle until no walker occupies the road near its path while
/// it passes.
fn yield_to(vehicle: &mut Agent, zones: &[RoadOccupancy]) {
    let pts = vehicle.path.points();
    let x_start = pts[0][0];
    let dir = (pts[pts.len() - 1][0] - x_start).signum();
    let clear = 0.5 * vehicle.size[0] + YIELD_CLEARANCE;
    for _ in 0..=zones.len() {
        let mut moved = false;
        for z in zones {
            let s = dir * (z.x - x_start);
            let enter = vehicle.t0 + (s - clear) / vehicle.speed;
            let exit = vehicle.t0 + (s + clear) / vehicle.speed;
            if enter < z.t_out && exit > z.t_in {
                vehicle.t0 += z.t_out - enter;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

fn make_agents(
    world: &GroundTruthWorld,
    run: &RunSpec,
    poses: &[(f64, RigidTransform)],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Agent>> {
    let duration = poses.last().map_or(0.0, |p| p.0);
    let spec = &world.spec;
    let x_end = spec.length / 2.0 - 0.5;
    let yc = spec.sidewalk_y();
    let crossings = spec.crossing_centers();
    let n_cross = (run.pedestrians as f64 * run.crossing_fraction).round() as usize;
    let mut agents = Vec::new();
    let mut zones = ego_occupancy(world, poses, run.fps);
    for k in 0..run.pedestrians {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let points = if k < n_cross && !crossings.is_empty() {
            let xc = crossings[rng.random_range(0..crossings.len())];
            let before = (xc - dir * rng.random_range(6.0..12.0)).clamp(-x_end, x_end);
            let after = (xc + dir * rng.random_range(6.0..12.0)).clamp(-x_end, x_end);
            vec![[before, side * yc], [xc, side * yc], [xc, -side * yc], [after, -side * yc]]
        } else {
            vec![[-dir * x_end, side * yc], [dir * x_end, side * yc]]
        };
        let path = Polyline::new(points.clone())?;
        let speed = rng.random_range(run.pedestrian_speed[0]..=run.pedestrian_speed[1]);
        let travel = path.length() / speed;
        let t0 = rng.random_range(-0.5 * travel..(duration - 0.5 * travel).max(-0.5 * travel + 1e-3));
        if points.len() == 4 {
            let s_in = (points[1][0] - points[0][0]).abs() + yc - 0.5 * spec.road_width;
            zones.push(RoadOccupancy {
                x: points[1][0],
                t_in: t0 + s_in / speed,
                t_out: t0 + (s_in + spec.road_width) / speed,
            });
        }
        agents.push(Agent {
            id: k as u64 + 1,
            class: AgentClass::Pedestrian,
            offsets: jitter_offsets(rng, path.length(), run),
            path,
            knot_spacing: run.knot_spacing,
            speed,
            t0,
            size: [0.5, 0.5, 1.7],
        });
    }
    let lanes = spec.lane_y();
    for m in 0..run.vehicles {
        let (y, dir) = if m % 2 == 0 { (lanes[0], 1.0) } else { (lanes[1], -1.0) };
        let path = Polyline::new(vec![[-dir * x_end, y], [dir * x_end, y]])?;
        let speed = rng.random_range(run.vehicle_speed[0]..=run.vehicle_speed[1]);
        let travel = path.length() / speed;
        let t_mid = duration * (m as f64 + rng.random_range(0.0..1.0)) / run.vehicles as f64;
        let mut vehicle = Agent {
            id: (run.pedestrians + m) as u64 + 1,
            class: AgentClass::Vehicle,
            offsets: jitter_offsets(rng, path.length(), run),
            path,
            knot_spacing: run.knot_spacing,
            speed,
            t0: t_mid - 0.5 * travel,
            size: [4.0, 2.0, 1.5],
        };
        yield_to(&mut vehicle, &zones);
        agents.push(vehicle);
    }
    Ok(agents)
}

/// Ego poses along the route: level base frames, x axis along the current
/// route segment.
pub fn ego_poses(world: &GroundTruthWorld, run: &RunSpec) -> Result<Vec<(f64, RigidTransform)>> {
    let route = Polyline::new(run.route.clone())?;
    let step = run.ego_speed / run.fps;
    let n = run.frames.unwrap_or((route.length() / step).floor() as usize + 1);
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let ([x, y], [tx, ty]) = route.sample(k as f64 * step);
        let class = world.class_at(x, y);
        if !matches!(class, SurfaceClass::Pedestrian | SurfaceClass::Crossing) {
            return Err(Error::RouteOffSurface { x, y });
        }
        let yaw = ty.atan2(tx);
        let pose = RigidTransform::from_parts(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, world.terrain_height(x, y)),
        );
        poses.push((k as f64 / run.fps, pose));
    }
    Ok(poses)
}

fn detect(
    world: &GroundTruthWorld,
    run: &RunSpec,
    view: &CameraView,
    agent: &Agent,
    ground: &WorldPoint,
    t: f64,
    others: &[(u64, WorldPoint, WorldPoint)],
) -> Option<DetectionBox> {
    let (lo, hi) = agent.bounding_box(ground);
    let k = &view.intrinsics;
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in 0..8 {
        let p = Point3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        let q = view.to_camera(&p);
        if q.z <= NEAR_PLANE {
            return None;
        }
        let px = k.project_camera(&q);
        u0 = u0.min(px.u);
        v0 = v0.min(px.v);
        u1 = u1.max(px.u);
        v1 = v1.max(px.v);
    }
    let centre = Point3::new(ground.x, ground.y, ground.z + agent.size[2] / 2.0);
    let qc = view.to_camera(&centre);
    if qc.z > run.detection_range || !k.contains(&k.project_camera(&qc)) {
        return None;
    }
    let (w, h) = (k.width as f64, k.height as f64);
    let det = DetectionBox {
        track_id: agent.id,
        agent_class: agent.class,
        timestamp: t,
        u_min: u0.clamp(0.0, w),
        v_min: v0.clamp(0.0, h),
        u_max: u1.clamp(0.0, w),
        v_max: v1.clamp(0.0, h),
    };
    // The agent must be the first surface seen through the box centre pixel.
    let (px, py) = det.center().pixel_index()?;
    if px >= k.width || py >= k.height {
        return None;
    }
    let o = view.origin();
    let dir = view.ray_direction(&PixelPoint::center_of(px, py));
    let (t_self, _) = ray_box(&o, &dir, &lo, &hi)?;
    if world.raycast(&o, &dir, t_self).is_some_and(|hit| hit.t < t_self) {
        return None;
    }
    let blocked = others
        .iter()
        .filter(|(id, _, _)| *id != agent.id)
        .any(|(_, lo, hi)| ray_box(&o, &dir, lo, hi).is_some_and(|(te, _)| te < t_self));
    (!blocked).then_some(det)
}

fn render_frame(
    world: &GroundTruthWorld,
    run: &RunSpec,
    calib: &Calibration,
    agents: &[Agent],
    t: f64,
    pose: &RigidTransform,
) -> SimFrame {
    let view = CameraView::new(pose, calib);
    let (w, h) = calib.intrinsics.size();
    let origin = view.origin();
    let active: Vec<(&Agent, WorldPoint)> = agents.iter().filter_map(|a| a.position_at(world, t).map(|g| (a, g))).collect();
    let boxes: Vec<(u64, WorldPoint, WorldPoint)> = active
        .iter()
        .map(|(a, g)| {
            let (lo, hi) = a.bounding_box(g);
            (a.id, lo, hi)
        })
        .collect();
    let mut depth = DepthImage::invalid(w, h);
    let mut truth = AnnotationImage::unknown(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = view.ray_direction(&PixelPoint::center_of(x, y));
            let t_max = run.max_range / d.norm();
            let mut best = world.raycast(&origin, &d, t_max).map(|hit| (hit.t, hit.class));
            for (_, lo, hi) in boxes.iter().filter(|_| run.agents_in_depth) {
                if let Some((te, _)) = ray_box(&origin, &d, lo, hi) {
                    if te > 0.0 && te <= t_max && best.is_none_or(|(bt, _)| te < bt) {
                        best = Some((te, SurfaceClass::Obstacle));
                    }
                }
            }
            if let Some((t, class)) = best {
                depth.set(x, y, t);
                truth.set(x, y, class);
            }
        }
    }
    let detections = active
        .iter()
        .filter_map(|(a, g)| detect(world, run, &view, a, g, t, &boxes))
        .collect();
    SimFrame {
        timestamp: t,
        base_to_world: *pose,
        depth,
        truth,
        detections,
    }
}

/// Simulates one recording run. Frames are rendered independently and
/// collected in order; tracklets hold each agent's true ground position at
/// the frames where it was detected.
pub fn simulate_run(world: &GroundTruthWorld, run: &RunSpec, seed: u64, exec: Execution) -> Result<SimRun> {
    run.validate()?;
    let calib = run.calibration()?;
    let poses = ego_poses(world, run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let agents = make_agents(world, run, &poses, &mut rng)?;
    let frames = exec.map(&poses, |(t, pose)| render_frame(world, run, &calib, &agents, *t, pose));
    let widths = BaseWidths::default();
    let mut tracklets = Vec::new();
    for a in &agents {
        let points: Vec<TrackPoint> = frames
            .iter()
            .filter(|f| f.detections.iter().any(|d| d.track_id == a.id))
            .filter_map(|f| {
                a.position_at(world, f.timestamp).map(|position| TrackPoint {
                    timestamp: f.timestamp,
                    position,
                })
            })
            .collect();
        if points.len() >= 2 {
            tracklets.push(Tracklet::new(a.id, a.class, points, widths.for_class(a.class))?);
        }
    }
    Ok(SimRun {
        calib,
        frames,
        tracklets,
        agents,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Probability that a pixel's vector is peaked on the true class.
    pub accuracy: f64,
    /// Mass on the peak class; defaults to `accuracy`.
    pub confidence: Option<f64>,
    /// Replace the vector by one peaked on a random wrong class with
    /// probability `1 - accuracy`.
    pub resample: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.7,
            confidence: None,
            resample: true,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let chance = 1.0 / BELIEF_K as f64;
        for (name, v) in [("accuracy", self.accuracy), ("confidence", self.confidence.unwrap_or(self.accuracy))] {
            if !(chance..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("oracle {name} must lie in [{chance}, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Noisy per-pixel class probabilities derived from the true classes.
/// Unknown truth yields the uniform distribution. Deterministic in
/// `(seed, stream)`.
pub fn prediction_oracle(truth: &AnnotationImage, cfg: &OracleConfig, seed: u64, stream: u64) -> Result<PredictionImage> {
    cfg.validate()?;
    let conf = cfg.confidence.unwrap_or(cfg.accuracy) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut probs = Vec::with_capacity(truth.data.len() * BELIEF_K);
    for &c in &truth.data {
        let class = match c.belief_index() {
            Some(k) if cfg.resample && !rng.random_bool(cfg.accuracy) => {
                let mut wrong = rng.random_range(0..BELIEF_K - 1);
                if wrong >= k {
                    wrong += 1;
                }
                SurfaceClass::from_belief_index(wrong)
            }
            _ => c,
        };
        probs.extend_from_slice(&peaked(class, conf));
    }
    PredictionImage::new(truth.width, truth.height, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{tracklet_from_detections, BoxObservation};
    use crate::geometry::GroundPlane;

    fn small_run() -> RunSpec {
        RunSpec {
            route: vec![[-12.0, -5.5], [-10.0, -5.5], [-10.0, 5.5], [-6.0, 5.5]],
            image_width: 80,
            image_height: 60,
            focal: 50.0,
            ..RunSpec::default()
        }
    }

    #[test]
    fn layout_bands() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let g = world.grid();
        assert_eq!((g.width, g.height), (160, 96));
        let mut counts = [0usize; 5];
        for j in 0..g.height {
            for i in 0..g.width {
                let (_, y) = g.cell_center(i, j);
                let c = world.raster.get(i, j);
                counts[c.index() as usize] += 1;
                if c == SurfaceClass::Crossing || c == SurfaceClass::Road {
                    assert!(y.abs() < 3.5);
                }
                if c == SurfaceClass::Pedestrian {
                    assert!((3.5..7.5).contains(&y.abs()));
                }
            }
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[SurfaceClass::Crossing.index() as usize], 2 * 16 * 28);
        let boxes = world.heights.iter().filter(|&&h| h == 0.8).count();
        assert_eq!(boxes, 12 * 4);
    }

    #[test]
    fn no_crossings_means_no_crossing_cells() {
        let world = generate_world(&WorldSpec { crossings: 0, ..WorldSpec::default() }).unwrap();
        assert!(world.raster.classes.iter().all(|&c| c != SurfaceClass::Crossing));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_world(&WorldSpec { seed: 3, ..WorldSpec::default() }).unwrap();
        let b = generate_world(&WorldSpec { seed: 3, ..WorldSpec::default() }).unwrap();
        let c = generate_world(&WorldSpec { seed: 4, ..WorldSpec::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn infeasible_layouts_are_rejected() {
        let too_wide = WorldSpec { road_width: 20.0, ..WorldSpec::default() };
        assert!(matches!(generate_world(&too_wide), Err(Error::InfeasibleLayout(_))));
        let crowded = WorldSpec { crossings: 20, ..WorldSpec::default() };
        assert!(matches!(generate_world(&crowded), Err(Error::InfeasibleLayout(_))));
        let bad = WorldSpec { resolution: 0.0, ..WorldSpec::default() };
        assert!(matches!(generate_world(&bad), Err(Error::InfeasibleLayout(_))));
    }

    #[test]
    fn route_must_stay_on_legal_surfaces() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let run = RunSpec { route: vec![[-15.0, -5.5], [-15.0, 0.0]], ..RunSpec::default() };
        assert!(matches!(simulate_run(&world, &run, 0, Execution::Sequential), Err(Error::RouteOffSurface { .. })));
    }

    #[test]
    fn static_ego_sees_constant_depth() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let run = RunSpec {
            route: vec![[0.0, -5.5]],
            frames: Some(4),
            pedestrians: 0,
            vehicles: 0,
            ..small_run()
        };
        let sim = simulate_run(&world, &run, 1, Execution::Sequential).unwrap();
        assert_eq!(sim.frames.len(), 4);
        assert!(sim.frames.windows(2).all(|w| w[0].depth == w[1].depth && w[0].truth == w[1].truth));
        assert!(sim.tracklets.is_empty());
        assert!(sim.frames[0].depth.valid_count() > 0);
    }

    #[test]
    fn flat_ground_depth_matches_closed_form() {
        let world = generate_world(&WorldSpec { obstacles: 0, ..WorldSpec::default() }).unwrap();
        let run = RunSpec { route: vec![[-5.0, -5.5], [5.0, -5.5]], pedestrians: 0, vehicles: 0, ..RunSpec::default() };
        let sim = simulate_run(&world, &run, 0, Execution::Sequential).unwrap();
        let mut checked = 0;
        for f in sim.frames.iter().step_by(3) {
            let view = CameraView::new(&f.base_to_world, &sim.calib);
            let o = view.origin();
            for y in 0..f.depth.height {
                for x in 0..f.depth.width {
                    let Some(d) = f.depth.get(x, y) else { continue };
                    let dir = view.ray_direction(&PixelPoint::center_of(x, y));
                    if dir.z >= 0.0 {
                        continue;
                    }
                    let t = -o.z / dir.z;
                    let p = o + dir * t;
                    if world.class_at(p.x, p.y) == SurfaceClass::Obstacle || f.truth.get(x, y) == SurfaceClass::Obstacle {
                        continue;
                    }
                    assert!((d - t).abs() < 1e-6, "pixel ({x}, {y}): {d} vs {t}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn wall_hits_report_the_obstacle_cell() {
        let world = generate_world(&WorldSpec { obstacles: 0, ..WorldSpec::default() }).unwrap();
        let o = Point3::new(0.1, 5.0, 1.0);
        let hit = world.raycast(&o, &Vector3::new(0.0, 1.0, 0.0), 100.0).unwrap();
        assert!((hit.t - (2.5 + FACE_INSET)).abs() < 1e-12);
        assert_eq!(hit.class, SurfaceClass::Obstacle);
        // Above the wall the ray leaves the world.
        let over = world.raycast(&Point3::new(0.1, 5.0, 2.5), &Vector3::new(0.0, 1.0, 0.0), 100.0);
        assert!(over.is_none());
    }

    #[test]
    fn terrain_hits_lie_on_the_surface() {
        let world = generate_world(&WorldSpec { terrain_amplitude: 0.3, obstacles: 0, ..WorldSpec::default() }).unwrap();
        let o = Point3::new(-3.0, -5.5, 1.5);
        for k in 0..20 {
            let d = Vector3::new(1.0, 0.05 * k as f64 - 0.5, -0.2);
            let hit = world.raycast(&o, &d, 200.0).unwrap();
            let p = o + d * hit.t;
            if hit.class != SurfaceClass::Obstacle {
                assert!((p.z - world.terrain_height(p.x, p.y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn agents_stay_on_legal_surfaces() {
        for seed in 0..5 {
            let world = generate_world(&WorldSpec { seed, ..WorldSpec::default() }).unwrap();
            let sim = simulate_run(&world, &small_run(), seed, Execution::Parallel).unwrap();
            for a in &sim.agents {
                let legal: &[SurfaceClass] = match a.class {
                    AgentClass::Pedestrian => &[SurfaceClass::Pedestrian, SurfaceClass::Crossing],
                    _ => &[SurfaceClass::Road, SurfaceClass::Crossing],
                };
                let t_end = a.t0 + a.path.length() / a.speed;
                let mut t = a.t0;
                while t <= t_end {
                    let p = a.position_at(&world, t).unwrap();
                    assert!(legal.contains(&world.class_at(p.x, p.y)), "agent {} at {p:?}", a.id);
                    t += 0.1;
                }
            }
        }
    }

    #[test]
    fn crossing_pedestrians_touch_the_crossing_band() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let run = RunSpec { pedestrians: 4, crossing_fraction: 1.0, vehicles: 0, ..RunSpec::default() };
        let sim = simulate_run(&world, &run, 2, Execution::Sequential).unwrap();
        for a in &sim.agents {
            let steps = (a.path.length() / 0.1) as usize;
            let on_crossing = (0..steps).any(|k| {
                let p = a.position_at(&world, a.t0 + k as f64 * 0.1 / a.speed).unwrap();
                world.class_at(p.x, p.y) == SurfaceClass::Crossing
            });
            assert!(on_crossing, "agent {}", a.id);
        }
    }

    #[test]
    fn detections_cover_their_agents() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let sim = simulate_run(&world, &RunSpec::default(), 5, Execution::Parallel).unwrap();
        let mut n = 0;
        for f in &sim.frames {
            let view = CameraView::new(&f.base_to_world, &sim.calib);
            for d in &f.detections {
                let a = sim.agents.iter().find(|a| a.id == d.track_id).unwrap();
                let g = a.position_at(&world, f.timestamp).unwrap();
                let c = view.project(&Point3::new(g.x, g.y, g.z + a.size[2] / 2.0)).unwrap().pixel;
                assert!(c.u >= d.u_min && c.u <= d.u_max && c.v >= d.v_min && c.v <= d.v_max);
                n += 1;
            }
        }
        assert!(n > 20, "only {n} detections");
        assert!(sim.tracklets.iter().any(|t| t.agent_class == AgentClass::Vehicle));
        assert!(sim.tracklets.iter().any(|t| t.agent_class == AgentClass::Pedestrian));
    }

    #[test]
    fn lifted_detections_track_agents() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let run = RunSpec { agents_in_depth: true, ..RunSpec::default() };
        let sim = simulate_run(&world, &run, 5, Execution::Parallel).unwrap();
        let plane = GroundPlane::horizontal(0.0);
        let (mut checked, mut good) = (0, 0);
        for tr in &sim.tracklets {
            let obs: Vec<(&SimFrame, &DetectionBox)> = sim
                .frames
                .iter()
                .filter_map(|f| f.detections.iter().find(|d| d.track_id == tr.id).map(|d| (f, d)))
                .collect();
            let views: Vec<BoxObservation> = obs
                .iter()
                .map(|(f, d)| BoxObservation { detection: d, depth: &f.depth, base_to_world: &f.base_to_world })
                .collect();
            let (lifted, _) = tracklet_from_detections(tr.id, tr.agent_class, &views, &sim.calib, &plane, &BaseWidths::default()).unwrap();
            for p in &lifted.points {
                let q = tr.points.iter().find(|q| q.timestamp == p.timestamp).unwrap();
                let err = ((p.position.x - q.position.x).powi(2) + (p.position.y - q.position.y).powi(2)).sqrt();
                // The box centre ray meets the agent's front face, not its axis.
                let limit = match tr.agent_class {
                    AgentClass::Vehicle => 2.5,
                    _ => 0.5,
                };
                good += (err < limit) as usize;
                checked += 1;
            }
        }
        assert!(checked > 40, "only {checked} lifted points");
        // Boxes clipped by the image border may put the centre off the agent.
        assert!(good * 20 >= checked * 19, "{good} of {checked} within tolerance");
    }

    #[test]
    fn simulation_is_deterministic_across_modes() {
        let world = generate_world(&WorldSpec::default()).unwrap();
        let a = simulate_run(&world, &small_run(), 9, Execution::Sequential).unwrap();
        let b = simulate_run(&world, &small_run(), 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_behaviour() {
        let mut truth = AnnotationImage::unknown(40, 40);
        for (k, c) in truth.data.iter_mut().enumerate() {
            *c = SurfaceClass::ALL[k % 5];
        }
        let exact = prediction_oracle(&truth, &OracleConfig { accuracy: 1.0, ..OracleConfig::default() }, 0, 0).unwrap();
        for (k, &c) in truth.data.iter().enumerate() {
            let p = &exact.probs[k * BELIEF_K..(k + 1) * BELIEF_K];
            match c.belief_index() {
                Some(b) => assert_eq!(p[b], 1.0),
                None => assert!(p.iter().all(|&v| v == 0.25)),
            }
        }
        let cfg = OracleConfig { accuracy: 0.8, ..OracleConfig::default() };
        let a = prediction_oracle(&truth, &cfg, 3, 7).unwrap();
        assert_eq!(a, prediction_oracle(&truth, &cfg, 3, 7).unwrap());
        assert_ne!(a, prediction_oracle(&truth, &cfg, 3, 8).unwrap());
        let (mut right, mut total) = (0, 0);
        for y in 0..40 {
            for x in 0..40 {
                let c = truth.get(x, y);
                if c != SurfaceClass::Unknown {
                    total += 1;
                    right += (a.argmax_class(x, y) == c) as usize;
                }
            }
        }
        let acc = right as f64 / total as f64;
        assert!((acc - 0.8).abs() < 0.04, "{acc}");
        assert!(prediction_oracle(&truth, &OracleConfig { accuracy: 0.1, ..cfg }, 0, 0).is_err());
    }
}
