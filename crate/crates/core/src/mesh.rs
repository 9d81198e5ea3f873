//! Semantic surface mesh: Delaunay triangulation of observed map cells,
//! Taubin smoothing and flat-shaded software rendering into camera views.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::annotate::{AnnotationImage, SurfaceClass};
use crate::error::{Error, Result};
use crate::fuse::FinalizedMap;
use crate::geometry::{CameraView, WorldPoint};
use crate::raster::rasterize_camera_polygon;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMesh {
    pub vertices: Vec<WorldPoint>,
    pub faces: Vec<[u32; 3]>,
    pub face_classes: Vec<SurfaceClass>,
}

impl SemanticMesh {
    pub fn new(vertices: Vec<WorldPoint>, faces: Vec<[u32; 3]>, face_classes: Vec<SurfaceClass>) -> Result<Self> {
        if faces.len() != face_classes.len() {
            return Err(Error::Format(format!(
                "{} faces but {} face classes",
                faces.len(),
                face_classes.len()
            )));
        }
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Format(format!("face {f:?} references a vertex out of range (have {n})")));
        }
        Ok(Self {
            vertices,
            faces,
            face_classes,
        })
    }

    pub fn face_vertices(&self, f: usize) -> [WorldPoint; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// One-ring neighbour lists, sorted and deduplicated.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut ring = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                ring[a as usize].push(b);
                ring[b as usize].push(a);
            }
        }
        for r in &mut ring {
            r.sort_unstable();
            r.dedup();
        }
        ring
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Faces with an edge longer than this many cell sizes are dropped.
    pub max_edge_cells: f64,
    pub lambda: f64,
    pub mu: f64,
    pub iterations: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            max_edge_cells: 3.0,
            lambda: 0.5,
            mu: -0.53,
            iterations: 10,
        }
    }
}

struct CellVertex {
    pos: Point2<f64>,
    id: u32,
}

impl HasPosition for CellVertex {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// Majority class of three labels; with three distinct labels the lowest
/// class index wins.
pub fn majority_class(c: [SurfaceClass; 3]) -> SurfaceClass {
    if c[0] == c[1] || c[0] == c[2] {
        c[0]
    } else if c[1] == c[2] {
        c[1]
    } else {
        *c.iter().min_by_key(|c| c.index()).expect("three labels")
    }
}

/// Triangulates the centres of all observed cells in the plane, lifts them
/// to their mean elevation and drops faces with an edge longer than
/// `max_edge_cells × resolution`.
pub fn triangulate_map(map: &FinalizedMap, max_edge_cells: f64) -> Result<SemanticMesh> {
    let spec = map.raster.spec;
    let mut vertices = Vec::new();
    let mut classes = Vec::new();
    let mut sites = Vec::new();
    for (cell, z) in map.elevation.iter().enumerate() {
        let Some(z) = *z else { continue };
        let (i, j) = spec.coords(cell);
        let (x, y) = spec.cell_center(i, j);
        sites.push(CellVertex {
            pos: Point2::new(x, y),
            id: vertices.len() as u32,
        });
        vertices.push(Point3::new(x, y, z));
        classes.push(map.raster.classes[cell]);
    }
    if vertices.len() < 3 {
        return Err(Error::TooFewPatches { got: vertices.len() });
    }
    let dt = DelaunayTriangulation::<CellVertex>::bulk_load(sites)
        .map_err(|e| Error::DegenerateCloud(format!("triangulation failed: {e:?}")))?;
    let max_len2 = (max_edge_cells * spec.resolution).powi(2);
    let mut faces = Vec::new();
    let mut face_classes = Vec::new();
    for face in dt.inner_faces() {
        let ids = face.vertices().map(|v| v.data().id);
        let p = ids.map(|i| vertices[i as usize]);
        let too_long = (0..3).any(|k| {
            let (a, b) = (p[k], p[(k + 1) % 3]);
            (a.x - b.x).powi(2) + (a.y - b.y).powi(2) > max_len2
        });
        if too_long || (p[1] - p[0]).cross(&(p[2] - p[0])).norm() <= 1e-12 {
            continue;
        }
        faces.push(ids);
        face_classes.push(majority_class(ids.map(|i| classes[i as usize])));
    }
    SemanticMesh::new(vertices, faces, face_classes)
}

/// Uniform umbrella Laplacian: mean of the one-ring minus the vertex.
/// Isolated vertices get zero.
pub fn umbrella_laplacian(vertices: &[WorldPoint], ring: &[Vec<u32>]) -> Vec<Vector3<f64>> {
    vertices
        .iter()
        .zip(ring)
        .map(|(v, r)| {
            if r.is_empty() {
                return Vector3::zeros();
            }
            let sum = r.iter().fold(Vector3::zeros(), |acc, &n| acc + vertices[n as usize].coords);
            sum / r.len() as f64 - v.coords
        })
        .collect()
}

/// Taubin λ|μ smoothing with a uniform Laplacian. Topology and face
/// classes are untouched.
pub fn taubin_smooth(mesh: &SemanticMesh, lambda: f64, mu: f64, iterations: usize) -> Result<SemanticMesh> {
    if !(lambda > 0.0 && mu < -lambda) {
        return Err(Error::InvalidArgument(format!(
            "Taubin weights need lambda > 0 and mu < -lambda, got lambda={lambda}, mu={mu}"
        )));
    }
    let ring = mesh.neighbors();
    let mut v = mesh.vertices.clone();
    for _ in 0..iterations {
        for w in [lambda, mu] {
            let l = umbrella_laplacian(&v, &ring);
            for (p, d) in v.iter_mut().zip(&l) {
                *p += d * w;
            }
        }
    }
    Ok(SemanticMesh {
        vertices: v,
        faces: mesh.faces.clone(),
        face_classes: mesh.face_classes.clone(),
    })
}

/// Dense label image rendered from a mesh, with its depth buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedLabelImage {
    pub labels: AnnotationImage,
    /// Camera-frame depth per pixel; `f64::INFINITY` where nothing was drawn.
    pub depth: Vec<f64>,
}

/// Flat-shaded depth-buffered rendering. The nearest face wins; on equal
/// depth the face drawn first (lower index) is kept.
pub fn render_mesh(mesh: &SemanticMesh, view: &CameraView, near: f64) -> RenderedLabelImage {
    let (w, h) = view.intrinsics.size();
    let mut labels = AnnotationImage::unknown(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let cam: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| view.to_camera(p)).collect();
    for (f, class) in mesh.faces.iter().zip(&mesh.face_classes) {
        let tri = f.map(|i| cam[i as usize]);
        if tri.iter().all(|p| p.z < near) {
            continue;
        }
        rasterize_camera_polygon(&tri, &view.intrinsics, near, |x, y, z| {
            let i = y * w + x;
            if z < depth[i] {
                depth[i] = z;
                labels.data[i] = *class;
            }
        });
    }
    RenderedLabelImage { labels, depth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuse::{finalize_map, logodds_from_probs, peaked, SurfaceMap, DEFAULT_EPS};
    use crate::geometry::{Calibration, CameraIntrinsics, PixelPoint, RigidTransform};
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn map_with_cells(spec: GridSpec, cells: &[(usize, usize, SurfaceClass)]) -> FinalizedMap {
        let mut m = SurfaceMap::new(spec);
        for &(i, j, c) in cells {
            let p = peaked(c, 0.9).map(|v| v as f64);
            m.observe(spec.index(i, j), &logodds_from_probs(&p, DEFAULT_EPS), 0.0);
        }
        finalize_map(&m)
    }

    #[test]
    fn three_cells_give_one_triangle() {
        let spec = GridSpec::new(0.0, 0.0, 1.0, 4, 4).unwrap();
        let m = map_with_cells(spec, &[(0, 0, SurfaceClass::Road), (1, 0, SurfaceClass::Road), (0, 1, SurfaceClass::Crossing)]);
        let mesh = triangulate_map(&m, 3.0).unwrap();
        assert_eq!(mesh.faces.len(), 1);
        assert_eq!(mesh.face_classes, vec![SurfaceClass::Road]);
        let m2 = map_with_cells(spec, &[(0, 0, SurfaceClass::Road), (1, 0, SurfaceClass::Road)]);
        assert!(matches!(triangulate_map(&m2, 3.0), Err(Error::TooFewPatches { got: 2 })));
    }

    #[test]
    fn faces_are_counter_clockwise_and_non_degenerate() {
        let spec = GridSpec::new(0.0, 0.0, 1.0, 10, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells: Vec<_> = (0..60)
            .map(|_| (rng.random_range(0..10), rng.random_range(0..10), SurfaceClass::Road))
            .collect();
        let mesh = triangulate_map(&map_with_cells(spec, &cells), 3.0).unwrap();
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_vertices(f);
            assert!((b - a).cross(&(c - a)).z > 0.0);
        }
    }

    #[test]
    fn regular_grid_face_count() {
        for n in [2usize, 3, 5, 12] {
            let spec = GridSpec::new(0.0, 0.0, 0.25, n, n).unwrap();
            let cells: Vec<_> = (0..n * n).map(|k| (k % n, k / n, SurfaceClass::Pedestrian)).collect();
            let mesh = triangulate_map(&map_with_cells(spec, &cells), 3.0).unwrap();
            assert_eq!(mesh.faces.len(), 2 * (n - 1) * (n - 1), "n = {n}");
        }
    }

    #[test]
    fn distant_clusters_stay_disconnected() {
        let spec = GridSpec::new(0.0, 0.0, 1.0, 20, 4).unwrap();
        let mut cells = Vec::new();
        for j in 0..3 {
            for i in 0..3 {
                cells.push((i, j, SurfaceClass::Road));
                cells.push((i + 10, j, SurfaceClass::Crossing));
            }
        }
        let mesh = triangulate_map(&map_with_cells(spec, &cells), 3.0).unwrap();
        assert_eq!(mesh.faces.len(), 16);
        for f in 0..mesh.faces.len() {
            let xs = mesh.face_vertices(f).map(|p| p.x < 5.0);
            assert!(xs.iter().all(|&l| l == xs[0]));
            let want = if xs[0] { SurfaceClass::Road } else { SurfaceClass::Crossing };
            assert_eq!(mesh.face_classes[f], want);
        }
    }

    #[test]
    fn majority_vote_and_ties() {
        use SurfaceClass::*;
        assert_eq!(majority_class([Road, Crossing, Road]), Road);
        assert_eq!(majority_class([Crossing, Obstacle, Obstacle]), Obstacle);
        assert_eq!(majority_class([Obstacle, Crossing, Pedestrian]), Pedestrian);
    }

    /// n×n flat grid with every quad split along the same diagonal.
    fn flat_grid(n: usize, h: f64) -> SemanticMesh {
        let mut v = Vec::new();
        for j in 0..n {
            for i in 0..n {
                v.push(Point3::new(i as f64 * h, j as f64 * h, 1.5));
            }
        }
        let mut f = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = (j * n + i) as u32;
                let b = a + 1;
                let c = a + n as u32;
                f.push([a, b, c + 1]);
                f.push([a, c + 1, c]);
            }
        }
        let k = f.len();
        SemanticMesh::new(v, f, vec![SurfaceClass::Road; k]).unwrap()
    }

    #[test]
    fn flat_mesh_is_a_fixed_point() {
        let n = 7;
        let mesh = flat_grid(n, 0.25);
        assert_eq!(taubin_smooth(&mesh, 0.5, -0.53, 0).unwrap(), mesh);
        let one = taubin_smooth(&mesh, 0.5, -0.53, 1).unwrap();
        // Vertices whose two-ring is interior see a symmetric ring in both passes.
        for j in 2..n - 2 {
            for i in 2..n - 2 {
                let k = j * n + i;
                assert!((one.vertices[k] - mesh.vertices[k]).norm() < 1e-12);
            }
        }
        let ten = taubin_smooth(&mesh, 0.5, -0.53, 10).unwrap();
        assert!(ten.vertices.iter().all(|p| (p.z - 1.5).abs() < 1e-12));
        assert_eq!(ten.faces, mesh.faces);
        assert_eq!(ten.face_classes, mesh.face_classes);
        assert!(taubin_smooth(&mesh, 0.5, -0.4, 1).is_err());
    }

    /// Mean |L| over vertices off the grid border, and mean |L·n| over all
    /// vertices. On an open grid the border Laplacian has an in-plane part
    /// even without noise, so the full norm there does not measure roughness.
    fn roughness(m: &SemanticMesh, n: usize) -> (f64, f64) {
        let l = umbrella_laplacian(&m.vertices, &m.neighbors());
        let mut interior = 0.0;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                interior += l[j * n + i].norm();
            }
        }
        let normal = l.iter().map(|d| d.z.abs()).sum::<f64>() / l.len() as f64;
        (interior / ((n - 2) * (n - 2)) as f64, normal)
    }

    fn bbox_diagonal(m: &SemanticMesh) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &m.vertices {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        (hi - lo).norm()
    }

    #[test]
    fn noisy_plane_smooths_without_shrinking() {
        let mut mesh = flat_grid(50, 0.25);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for p in &mut mesh.vertices {
            p.z += noise.sample(&mut rng);
        }
        let before = roughness(&mesh, 50);
        let smooth = taubin_smooth(&mesh, 0.5, -0.53, 10).unwrap();
        let after = roughness(&smooth, 50);
        assert!(after.0 < 0.25 * before.0, "interior mean |L| {} -> {}", before.0, after.0);
        assert!(after.1 < 0.25 * before.1, "mean |L.n| {} -> {}", before.1, after.1);
        let shrink = 1.0 - bbox_diagonal(&smooth) / bbox_diagonal(&mesh);
        assert!(shrink < 0.02, "bounding-box shrink {shrink}");
    }

    fn view_at_origin(w: usize, h: usize) -> CameraView {
        let calib = Calibration {
            intrinsics: CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            base_to_cam: RigidTransform::identity(),
        };
        CameraView::new(&RigidTransform::identity(), &calib)
    }

    #[test]
    fn mesh_behind_camera_renders_nothing() {
        let v = vec![Point3::new(-1.0, -1.0, -5.0), Point3::new(1.0, -1.0, -5.0), Point3::new(0.0, 1.0, -5.0)];
        let mesh = SemanticMesh::new(v, vec![[0, 1, 2]], vec![SurfaceClass::Road]).unwrap();
        let r = render_mesh(&mesh, &view_at_origin(40, 30), 0.1);
        assert_eq!(r.labels.labeled_count(), 0);
        assert!(r.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn frustum_filling_triangle() {
        let v = vec![Point3::new(-100.0, -100.0, 5.0), Point3::new(100.0, -100.0, 5.0), Point3::new(0.0, 100.0, 5.0)];
        let mesh = SemanticMesh::new(v, vec![[0, 1, 2]], vec![SurfaceClass::Road]).unwrap();
        let r = render_mesh(&mesh, &view_at_origin(40, 30), 0.1);
        assert!(r.labels.data.iter().all(|&c| c == SurfaceClass::Road));
        assert!(r.depth.iter().all(|d| (d - 5.0).abs() < 1e-9));
    }

    /// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
    fn ray_triangle(o: &Vector3<f64>, d: &Vector3<f64>, t: [Vector3<f64>; 3]) -> Option<f64> {
        let e1 = t[1] - t[0];
        let e2 = t[2] - t[0];
        let p = d.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let s = o - t[0];
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = d.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > 0.0).then_some(t)
    }

    #[test]
    fn render_matches_ray_cast_oracle() {
        let (w, h) = (160, 120);
        let view = view_at_origin(w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mut agree, mut total) = (0usize, 0usize);
        for _ in 0..5 {
            let mut verts = Vec::new();
            let mut faces = Vec::new();
            let mut classes = Vec::new();
            for f in 0..50u32 {
                let c = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..12.0));
                for _ in 0..3 {
                    let d = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0));
                    verts.push(Point3::from(c + d));
                }
                faces.push([3 * f, 3 * f + 1, 3 * f + 2]);
                classes.push(SurfaceClass::from_belief_index(rng.random_range(0..4)));
            }
            let mesh = SemanticMesh::new(verts, faces, classes).unwrap();
            let r = render_mesh(&mesh, &view, 0.1);
            for y in 0..h {
                for x in 0..w {
                    let dir = view.intrinsics.unproject(&PixelPoint::center_of(x, y));
                    let mut best: Option<(f64, usize)> = None;
                    for f in 0..mesh.faces.len() {
                        let tri = mesh.face_vertices(f).map(|p| p.coords);
                        if let Some(t) = ray_triangle(&Vector3::zeros(), &dir, tri) {
                            if best.is_none_or(|(bt, _)| t < bt) {
                                best = Some((t, f));
                            }
                        }
                    }
                    let i = y * w + x;
                    total += 1;
                    let ok = match best {
                        None => r.labels.data[i] == SurfaceClass::Unknown,
                        Some((t, f)) => {
                            r.labels.data[i] == mesh.face_classes[f] && (r.depth[i] - t).abs() < 1e-6
                        }
                    };
                    agree += ok as usize;
                }
            }
        }
        let frac = agree as f64 / total as f64;
        assert!(frac >= 0.995, "agreement {frac}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = flat_grid(20, 0.25);
        let calib = Calibration {
            intrinsics: CameraIntrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60).unwrap(),
            base_to_cam: RigidTransform::from_quaternion([0.0, 1.0, 0.0, 0.0], [2.0, 2.0, 5.0]).unwrap().inverse(),
        };
        let view = CameraView::new(&RigidTransform::identity(), &calib);
        let a = render_mesh(&mesh, &view, 0.1);
        let b = render_mesh(&mesh, &view, 0.1);
        assert_eq!(a, b);
        assert!(a.labels.labeled_count() > 0);
        for (d, c) in a.depth.iter().zip(&a.labels.data) {
            assert_eq!(d.is_finite(), *c != SurfaceClass::Unknown);
        }
    }
}
