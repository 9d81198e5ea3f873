//! Geo-referenced 2-D grids shared by the surface map, the simulator world
//! and the planner.
//!
//! Cell `(i, j)` covers `[origin_x + i·res, origin_x + (i+1)·res)` in x and
//! likewise in y. Storage is row-major with `j` as the row index.

use serde::{Deserialize, Serialize};

use crate::annotate::SurfaceClass;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        resolution: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        if !(origin_x.is_finite() && origin_y.is_finite()) {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            resolution,
            width,
            height,
        })
    }

    /// Smallest grid aligned to multiples of `resolution` that covers the
    /// box `[min_x, max_x] × [min_y, max_y]`.
    pub fn covering(min_x: f64, min_y: f64, max_x: f64, max_y: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !(max_x >= min_x && max_y >= min_y) {
            return Err(Error::InvalidArgument(format!(
                "cannot cover box [{min_x}, {max_x}] x [{min_y}, {max_y}] at resolution {resolution}"
            )));
        }
        let i0 = (min_x / resolution).floor();
        let j0 = (min_y / resolution).floor();
        let i1 = (max_x / resolution).floor();
        let j1 = (max_y / resolution).floor();
        Self::new(
            i0 * resolution,
            j0 * resolution,
            resolution,
            (i1 - i0) as usize + 1,
            (j1 - j0) as usize + 1,
        )
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.width && j < self.height);
        j * self.width + i
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// Cell containing the world point, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin_x) / self.resolution).floor();
        let fj = ((y - self.origin_y) / self.resolution).floor();
        if fi < 0.0 || fj < 0.0 || !fi.is_finite() || !fj.is_finite() {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + (i as f64 + 0.5) * self.resolution,
            self.origin_y + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn max_x(&self) -> f64 {
        self.origin_x + self.width as f64 * self.resolution
    }

    pub fn max_y(&self) -> f64 {
        self.origin_y + self.height as f64 * self.resolution
    }
}

/// A semantic bird's-eye-view raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    pub spec: GridSpec,
    pub classes: Vec<SurfaceClass>,
}

impl ClassGrid {
    pub fn filled(spec: GridSpec, class: SurfaceClass) -> Self {
        Self {
            spec,
            classes: vec![class; spec.len()],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> SurfaceClass {
        self.classes[self.spec.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, class: SurfaceClass) {
        let idx = self.spec.index(i, j);
        self.classes[idx] = class;
    }

    /// Class at a world position; `Unknown` outside the grid.
    pub fn class_at(&self, x: f64, y: f64) -> SurfaceClass {
        match self.spec.cell_of(x, y) {
            Some((i, j)) => self.get(i, j),
            None => SurfaceClass::Unknown,
        }
    }

    /// Nearest-neighbour resampling onto another grid. Target cells whose
    /// centre lies outside `self` become `Unknown`.
    pub fn resample_onto(&self, target: &GridSpec) -> ClassGrid {
        let mut out = ClassGrid::filled(*target, SurfaceClass::Unknown);
        for j in 0..target.height {
            for i in 0..target.width {
                let (x, y) = target.cell_center(i, j);
                out.set(i, j, self.class_at(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn covering_grid_is_aligned_and_contains_box() {
        let g = GridSpec::covering(-3.1, 2.0, 4.9, 2.3, 0.25).unwrap();
        assert_eq!(g.origin_x, -3.25);
        assert_eq!(g.origin_y, 2.0);
        assert!(g.cell_of(-3.1, 2.0).is_some());
        assert!(g.cell_of(4.9, 2.3).is_some());
    }

    #[test]
    fn outside_points_have_no_cell() {
        let g = GridSpec::new(0.0, 0.0, 1.0, 4, 3).unwrap();
        assert_eq!(g.cell_of(-0.01, 1.0), None);
        assert_eq!(g.cell_of(4.0, 1.0), None);
        assert_eq!(g.cell_of(3.99, 2.99), Some((3, 2)));
        assert!(GridSpec::new(0.0, 0.0, 0.0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn world_cell_center_round_trip(x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let g = GridSpec::new(-60.0, -60.0, 0.25, 480, 480).unwrap();
            let (i, j) = g.cell_of(x, y).unwrap();
            let (cx, cy) = g.cell_center(i, j);
            prop_assert_eq!(g.cell_of(cx, cy), Some((i, j)));
            prop_assert_eq!(g.coords(g.index(i, j)), (i, j));
        }
    }
}
