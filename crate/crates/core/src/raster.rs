//! Scan conversion shared by ribbon labelling and mesh rendering.
//!
//! A pixel belongs to a triangle when its centre `(x + 0.5, y + 0.5)` lies
//! inside it. Centres exactly on an edge are assigned with the top-left
//! rule, so two triangles sharing an edge never both claim a pixel.

use nalgebra::Vector3;

use crate::geometry::CameraIntrinsics;

/// Default near-plane distance in meters.
pub const NEAR_PLANE: f64 = 0.1;

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Whether an edge `a → b` of a positively oriented triangle (image y
/// pointing down) is a top or a left edge.
#[inline]
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

#[inline]
fn covers(e: f64, top_left: bool) -> bool {
    e > 0.0 || (e == 0.0 && top_left)
}

/// Calls `f(x, y, barycentric)` for each pixel of a `width × height` image
/// whose centre is covered by the triangle. Degenerate triangles cover
/// nothing.
pub fn rasterize_triangle<F>(tri: [(f64, f64); 3], width: usize, height: usize, mut f: F)
where
    F: FnMut(usize, usize, [f64; 3]),
{
    let [p0, mut p1, mut p2] = tri;
    let mut area = edge(p0, p1, p2);
    if !area.is_finite() || area == 0.0 {
        return;
    }
    let mut swapped = false;
    if area < 0.0 {
        std::mem::swap(&mut p1, &mut p2);
        area = -area;
        swapped = true;
    }
    let min_x = p0.0.min(p1.0).min(p2.0);
    let max_x = p0.0.max(p1.0).max(p2.0);
    let min_y = p0.1.min(p1.1).min(p2.1);
    let max_y = p0.1.max(p1.1).max(p2.1);
    if max_x < 0.0 || max_y < 0.0 || min_x > width as f64 || min_y > height as f64 {
        return;
    }
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor().min(width as f64 - 1.0)).max(-1.0);
    let y1 = ((max_y - 0.5).floor().min(height as f64 - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let tl0 = is_top_left(p1, p2);
    let tl1 = is_top_left(p2, p0);
    let tl2 = is_top_left(p0, p1);
    for y in y0..=y1 {
        let py = y as f64 + 0.5;
        for x in x0..=x1 {
            let p = (x as f64 + 0.5, py);
            let e0 = edge(p1, p2, p);
            let e1 = edge(p2, p0, p);
            let e2 = edge(p0, p1, p);
            if covers(e0, tl0) && covers(e1, tl1) && covers(e2, tl2) {
                let (b0, b1, b2) = (e0 / area, e1 / area, e2 / area);
                let bary = if swapped { [b0, b2, b1] } else { [b0, b1, b2] };
                f(x, y, bary);
            }
        }
    }
}

/// Sutherland–Hodgman clip of a camera-frame polygon against `z ≥ near`.
pub fn clip_near(poly: &[Vector3<f64>], near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let cur_in = cur.z >= near;
        let next_in = next.z >= near;
        if cur_in {
            out.push(cur);
        }
        if cur_in != next_in {
            let t = (near - cur.z) / (next.z - cur.z);
            let mut p = cur + (next - cur) * t;
            p.z = near;
            out.push(p);
        }
    }
    out
}

/// Clips a convex camera-frame polygon at the near plane, projects it and
/// calls `f(x, y, depth)` for every covered pixel, where `depth` is the
/// perspective-correct camera-frame z at the pixel centre.
pub fn rasterize_camera_polygon<F>(poly: &[Vector3<f64>], k: &CameraIntrinsics, near: f64, mut f: F)
where
    F: FnMut(usize, usize, f64),
{
    if poly.iter().all(|p| p.z < near) {
        return;
    }
    let clipped;
    let verts: &[Vector3<f64>] = if poly.iter().all(|p| p.z >= near) {
        poly
    } else {
        clipped = clip_near(poly, near);
        &clipped
    };
    if verts.len() < 3 {
        return;
    }
    let px: Vec<(f64, f64)> = verts
        .iter()
        .map(|p| {
            let q = k.project_camera(p);
            (q.u, q.v)
        })
        .collect();
    let inv_z: Vec<f64> = verts.iter().map(|p| 1.0 / p.z).collect();
    for i in 1..verts.len() - 1 {
        let idx = [0, i, i + 1];
        rasterize_triangle([px[0], px[i], px[i + 1]], k.width, k.height, |x, y, b| {
            let iz = b[0] * inv_z[idx[0]] + b[1] * inv_z[idx[1]] + b[2] * inv_z[idx[2]];
            f(x, y, 1.0 / iz);
        });
    }
}
