//! Sparse pixel annotations from the ego-trajectory, tracklets and obstacle
//! evidence.
//!
//! Trajectories are dilated laterally into ribbons of planar ground quads,
//! which are projected into each camera frame. Pixels covered by both
//! pedestrian evidence (ego plus pedestrian tracklets) and vehicle evidence
//! form the crossing set. Obstacles come from depth points more than a fixed
//! height above the ground plane plus the current frame's detection boxes.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::geometry::{Calibration, CameraView, DepthImage, GroundPlane, PixelPoint, RigidTransform, WorldPoint};
use crate::raster::rasterize_camera_polygon;

/// Surface classes with their raster encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum SurfaceClass {
    #[default]
    Unknown = 0,
    Road = 1,
    Pedestrian = 2,
    Crossing = 3,
    Obstacle = 4,
}

impl SurfaceClass {
    pub const ALL: [SurfaceClass; 5] = [
        SurfaceClass::Unknown,
        SurfaceClass::Road,
        SurfaceClass::Pedestrian,
        SurfaceClass::Crossing,
        SurfaceClass::Obstacle,
    ];

    /// Classes carried in a belief vector, in belief-index order.
    pub const BELIEF: [SurfaceClass; 4] = [
        SurfaceClass::Road,
        SurfaceClass::Pedestrian,
        SurfaceClass::Crossing,
        SurfaceClass::Obstacle,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Position in a belief vector; `None` for `Unknown`.
    pub fn belief_index(self) -> Option<usize> {
        (self != SurfaceClass::Unknown).then(|| self as usize - 1)
    }

    pub fn from_belief_index(k: usize) -> Self {
        Self::BELIEF[k]
    }

    /// Visualisation colour.
    pub fn color(self) -> [u8; 3] {
        match self {
            SurfaceClass::Unknown => [0, 0, 0],
            SurfaceClass::Road => [0, 0, 255],
            SurfaceClass::Pedestrian => [255, 255, 0],
            SurfaceClass::Crossing => [0, 255, 0],
            SurfaceClass::Obstacle => [255, 0, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SurfaceClass::Unknown => "unknown",
            SurfaceClass::Road => "road",
            SurfaceClass::Pedestrian => "pedestrian",
            SurfaceClass::Crossing => "crossing",
            SurfaceClass::Obstacle => "obstacle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Pedestrian,
    Vehicle,
    Ego,
}

impl AgentClass {
    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Vehicle => "vehicle",
            AgentClass::Ego => "ego",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pedestrian" | "person" => Some(AgentClass::Pedestrian),
            "vehicle" | "car" => Some(AgentClass::Vehicle),
            "ego" => Some(AgentClass::Ego),
            _ => None,
        }
    }
}

/// Object base widths used to dilate trajectories, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseWidths {
    pub pedestrian: f64,
    pub vehicle: f64,
    pub ego: f64,
}

impl Default for BaseWidths {
    fn default() -> Self {
        Self {
            pedestrian: 0.5,
            vehicle: 2.0,
            ego: 0.6,
        }
    }
}

impl BaseWidths {
    pub fn for_class(&self, class: AgentClass) -> f64 {
        match class {
            AgentClass::Pedestrian => self.pedestrian,
            AgentClass::Vehicle => self.vehicle,
            AgentClass::Ego => self.ego,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub timestamp: f64,
    pub position: WorldPoint,
}

/// Time-ordered ground-plane trajectory of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub agent_class: AgentClass,
    pub points: Vec<TrackPoint>,
    pub base_width: f64,
}

impl Tracklet {
    pub fn new(id: u64, agent_class: AgentClass, points: Vec<TrackPoint>, base_width: f64) -> Result<Self> {
        if !(base_width > 0.0) {
            return Err(Error::InvalidTracklet(format!("track {id}: base width must be positive")));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::InvalidTracklet(format!(
                "track {id}: timestamps not strictly increasing at {}",
                w[1].timestamp
            )));
        }
        Ok(Self {
            id,
            agent_class,
            points,
            base_width,
        })
    }

    pub fn positions(&self) -> Vec<WorldPoint> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// Pixel-space detection of a tracked agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub track_id: u64,
    pub agent_class: AgentClass,
    pub timestamp: f64,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl DetectionBox {
    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }

    /// Whether pixel `(x, y)`'s centre lies inside the box.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }
}

/// One detection of a track together with the frame data needed to lift it.
#[derive(Debug, Clone, Copy)]
pub struct BoxObservation<'a> {
    pub detection: &'a DetectionBox,
    /// Densified depth of the frame.
    pub depth: &'a DepthImage,
    pub base_to_world: &'a RigidTransform,
}

/// Lifts a track's box centres to the ground: each centre pixel is
/// backprojected with its depth and dropped vertically onto `plane`.
///
/// Frames without a valid depth at the box centre are skipped; the number
/// of skipped frames is returned alongside the tracklet.
pub fn tracklet_from_detections(
    track_id: u64,
    agent_class: AgentClass,
    observations: &[BoxObservation<'_>],
    calib: &Calibration,
    plane: &GroundPlane,
    widths: &BaseWidths,
) -> Result<(Tracklet, usize)> {
    let mut obs: Vec<&BoxObservation> = observations.iter().collect();
    obs.sort_by(|a, b| a.detection.timestamp.total_cmp(&b.detection.timestamp));
    let mut points: Vec<TrackPoint> = Vec::with_capacity(obs.len());
    let mut skipped = 0;
    for o in obs {
        let center = o.detection.center();
        let depth = center
            .pixel_index()
            .filter(|&(x, y)| x < o.depth.width && y < o.depth.height)
            .and_then(|(x, y)| o.depth.get(x, y));
        let Some(depth) = depth else {
            skipped += 1;
            continue;
        };
        if points.last().is_some_and(|p| p.timestamp >= o.detection.timestamp) {
            skipped += 1;
            continue;
        }
        let view = CameraView::new(o.base_to_world, calib);
        let p = view.backproject(&center, depth)?;
        let ground = Point3::new(p.x, p.y, plane.height_at(p.x, p.y));
        points.push(TrackPoint {
            timestamp: o.detection.timestamp,
            position: ground,
        });
    }
    if points.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let tracklet = Tracklet::new(track_id, agent_class, points, widths.for_class(agent_class))?;
    Ok((tracklet, skipped))
}

/// A planar ground patch spanned by one trajectory segment.
pub type Quad = [WorldPoint; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Ribbon {
    pub quads: Vec<Quad>,
    pub source: AgentClass,
    /// Zero-length segments that produced no quad.
    pub skipped_segments: usize,
}

/// Dilates a polyline laterally by `half_width` on each side, one quad per
/// segment. The offset is horizontal and perpendicular to the segment's
/// ground-plane direction.
pub fn build_ribbon(points: &[WorldPoint], half_width: f64, source: AgentClass) -> Result<Ribbon> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    if !(half_width > 0.0) {
        return Err(Error::InvalidArgument(format!("ribbon half width must be positive, got {half_width}")));
    }
    let mut quads = Vec::with_capacity(points.len() - 1);
    let mut skipped = 0;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let len = dx.hypot(dy);
        if !(len > 1e-9) {
            skipped += 1;
            continue;
        }
        let off = Vector3::new(-dy / len, dx / len, 0.0) * half_width;
        quads.push([a + off, a - off, b - off, b + off]);
    }
    Ok(Ribbon {
        quads,
        source,
        skipped_segments: skipped,
    })
}

/// Builds the ribbon of a tracklet using half its base width.
pub fn tracklet_ribbon(t: &Tracklet) -> Result<Ribbon> {
    build_ribbon(&t.positions(), 0.5 * t.base_width, t.agent_class)
}

/// Set of pixels of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl PixelSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_mask(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims((width * height, 1), (bits.len(), 1))?;
        Ok(Self { width, height, bits })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn insert(&mut self, x: usize, y: usize) {
        self.bits[y * self.width + x] = true;
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn contains_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn len(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn union_with(&mut self, other: &PixelSet) -> Result<()> {
        check_dims(self.size(), other.size())?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn union(&self, other: &PixelSet) -> Result<PixelSet> {
        let mut out = self.clone();
        out.union_with(other)?;
        Ok(out)
    }

    pub fn intersection(&self, other: &PixelSet) -> Result<PixelSet> {
        check_dims(self.size(), other.size())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }
}

/// Projects every quad of the ribbon into the view and fills it. Quads
/// behind the camera vanish; quads crossing the near plane are clipped.
pub fn rasterize_ribbon(ribbon: &Ribbon, view: &CameraView, near: f64) -> PixelSet {
    let k = &view.intrinsics;
    let mut set = PixelSet::empty(k.width, k.height);
    for quad in &ribbon.quads {
        let cam: Vec<Vector3<f64>> = quad.iter().map(|p| view.to_camera(p)).collect();
        rasterize_camera_polygon(&cam, k, near, |x, y, _| set.insert(x, y));
    }
    set
}

/// Crossing evidence: pixels used by both pedestrians and vehicles.
pub fn derive_crossing(pedestrian: &PixelSet, vehicle: &PixelSet) -> Result<PixelSet> {
    pedestrian.intersection(vehicle)
}

/// A depth point together with its projection into the current image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: WorldPoint,
    pub pixel: PixelPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleConfig {
    /// Points strictly higher than this above the ground plane are obstacles.
    pub height_threshold: f64,
    /// Radius in pixels of the disk splatted around each obstacle point.
    pub splat_radius: usize,
}

impl Default for ObstacleConfig {
    fn default() -> Self {
        Self {
            height_threshold: 0.20,
            splat_radius: 2,
        }
    }
}

/// Obstacle pixels: splatted points above the height threshold plus every
/// pixel inside the frame's detection boxes.
pub fn label_obstacles(
    points: &[LidarPoint],
    plane: &GroundPlane,
    boxes: &[DetectionBox],
    width: usize,
    height: usize,
    cfg: &ObstacleConfig,
) -> PixelSet {
    let mut set = PixelSet::empty(width, height);
    let r = cfg.splat_radius as isize;
    for p in points {
        if !(plane.signed_distance(&p.position) > cfg.height_threshold) {
            continue;
        }
        let Some((cx, cy)) = p.pixel.pixel_index() else {
            continue;
        };
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    set.insert(x as usize, y as usize);
                }
            }
        }
    }
    for b in boxes {
        let x0 = (b.u_min - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.v_min - 0.5).ceil().max(0.0) as usize;
        let x1 = (b.u_max - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (b.v_max - 0.5).floor().min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                set.insert(x, y);
            }
        }
    }
    set
}

/// Per-pixel class raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<SurfaceClass>,
}

impl AnnotationImage {
    pub fn unknown(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![SurfaceClass::Unknown; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> SurfaceClass {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: SurfaceClass) {
        self.data[y * self.width + x] = c;
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&c| c != SurfaceClass::Unknown).count()
    }
}

/// Class of one pixel given its membership in the four evidence sets.
///
/// Precedence: Obstacle, then Crossing (pedestrian and vehicle evidence
/// together), then Pedestrian or Road, then Unknown.
pub fn resolve_class(ego: bool, pedestrian: bool, vehicle: bool, obstacle: bool) -> SurfaceClass {
    let ped = ego || pedestrian;
    if obstacle {
        SurfaceClass::Obstacle
    } else if ped && vehicle {
        SurfaceClass::Crossing
    } else if ped {
        SurfaceClass::Pedestrian
    } else if vehicle {
        SurfaceClass::Road
    } else {
        SurfaceClass::Unknown
    }
}

/// Assembles the D0 annotation of one frame.
pub fn compose_annotation(
    ego: &PixelSet,
    pedestrian: &PixelSet,
    vehicle: &PixelSet,
    obstacle: &PixelSet,
) -> Result<AnnotationImage> {
    let size = ego.size();
    for s in [pedestrian, vehicle, obstacle] {
        check_dims(size, s.size())?;
    }
    let ped_evidence = ego.union(pedestrian)?;
    let crossing = derive_crossing(&ped_evidence, vehicle)?;
    let mut img = AnnotationImage::unknown(size.0, size.1);
    for (i, px) in img.data.iter_mut().enumerate() {
        *px = if obstacle.contains_index(i) {
            SurfaceClass::Obstacle
        } else if crossing.contains_index(i) {
            SurfaceClass::Crossing
        } else if ped_evidence.contains_index(i) {
            SurfaceClass::Pedestrian
        } else if vehicle.contains_index(i) {
            SurfaceClass::Road
        } else {
            SurfaceClass::Unknown
        };
    }
    Ok(img)
}
