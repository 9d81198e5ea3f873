//! Costmaps from semantic maps, Gaussian smoothing and A* routing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::annotate::SurfaceClass;
use crate::error::{Error, Result};
use crate::grid::{ClassGrid, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Keyword {
    Impassable,
}

/// Cost of entering a cell of some class. In configuration files a number
/// or the string `"impassable"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "CostRepr", into = "CostRepr")]
pub enum TraversalCost {
    Finite(f64),
    Impassable,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CostRepr {
    Number(f64),
    Word(Keyword),
}

impl From<CostRepr> for TraversalCost {
    fn from(r: CostRepr) -> Self {
        match r {
            CostRepr::Number(v) => TraversalCost::Finite(v),
            CostRepr::Word(Keyword::Impassable) => TraversalCost::Impassable,
        }
    }
}

impl From<TraversalCost> for CostRepr {
    fn from(c: TraversalCost) -> Self {
        match c {
            TraversalCost::Finite(v) => CostRepr::Number(v),
            TraversalCost::Impassable => CostRepr::Word(Keyword::Impassable),
        }
    }
}

impl TraversalCost {
    pub fn value(self) -> f64 {
        match self {
            TraversalCost::Finite(v) => v,
            TraversalCost::Impassable => IMPASSABLE,
        }
    }
}

/// Impassable sentinel stored in a [`Costmap`].
pub const IMPASSABLE: f64 = f64::INFINITY;

/// Per-class traversal costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostTable(pub BTreeMap<SurfaceClass, TraversalCost>);

impl Default for CostTable {
    fn default() -> Self {
        Self(BTreeMap::from([
            (SurfaceClass::Unknown, TraversalCost::Finite(100.0)),
            (SurfaceClass::Road, TraversalCost::Finite(100.0)),
            (SurfaceClass::Pedestrian, TraversalCost::Finite(1.0)),
            (SurfaceClass::Crossing, TraversalCost::Finite(5.0)),
            (SurfaceClass::Obstacle, TraversalCost::Impassable),
        ]))
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        for c in SurfaceClass::ALL {
            match self.0.get(&c) {
                None => return Err(Error::MissingClassCost(c)),
                Some(TraversalCost::Finite(v)) if !(v.is_finite() && *v >= 0.0) => {
                    return Err(Error::InvalidArgument(format!("cost for {} must be finite and >= 0, got {v}", c.name())));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn cost(&self, c: SurfaceClass) -> Result<f64> {
        self.0.get(&c).map(|t| t.value()).ok_or(Error::MissingClassCost(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub spec: GridSpec,
    /// Row-major; [`IMPASSABLE`] marks cells that cannot be entered.
    pub costs: Vec<f64>,
}

impl Costmap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[self.spec.index(i, j)]
    }

    pub fn is_passable(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_finite()
    }

    pub fn min_passable_cost(&self) -> Option<f64> {
        self.costs.iter().copied().filter(|c| c.is_finite()).reduce(f64::min)
    }
}

pub fn map_to_costmap(raster: &ClassGrid, table: &CostTable) -> Result<Costmap> {
    table.validate()?;
    let lut: Vec<f64> = SurfaceClass::ALL.iter().map(|&c| table.cost(c)).collect::<Result<_>>()?;
    Ok(Costmap {
        spec: raster.spec,
        costs: raster.classes.iter().map(|c| lut[c.index() as usize]).collect(),
    })
}

/// Mirrors an out-of-range index back into `0..n` (edge sample repeated).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Sampled Gaussian weights for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

fn convolve_axis(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![IMPASSABLE; src.len()];
    for j in 0..h {
        for i in 0..w {
            let idx = j * w + i;
            if !src[idx].is_finite() {
                continue;
            }
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &wk) in kernel.iter().enumerate() {
                let off = k as isize - r;
                let n = if horizontal {
                    j * w + reflect(i as isize + off, w)
                } else {
                    reflect(j as isize + off, h) * w + i
                };
                let v = src[n];
                if v.is_finite() {
                    acc += wk * v;
                    norm += wk;
                }
            }
            out[idx] = acc / norm;
        }
    }
    out
}

/// Separable Gaussian smoothing with reflective borders. Impassable cells
/// are left out of every kernel sum (weights renormalised) and stay
/// impassable.
pub fn gaussian_smooth(cm: &Costmap, sigma_cells: f64) -> Result<Costmap> {
    if !(sigma_cells > 0.0 && sigma_cells.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_cells}")));
    }
    let kernel = gaussian_kernel(sigma_cells);
    let (w, h) = (cm.spec.width, cm.spec.height);
    let tmp = convolve_axis(&cm.costs, w, h, &kernel, true);
    let costs = convolve_axis(&tmp, w, h, &kernel, false);
    Ok(Costmap { spec: cm.spec, costs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Cells `(i, j)` from start to goal.
    pub cells: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Path {
    pub fn world_points(&self, spec: &GridSpec) -> Vec<(f64, f64)> {
        self.cells.iter().map(|&(i, j)| spec.cell_center(i, j)).collect()
    }
}

/// Cost of stepping between two 8-neighbours: Euclidean step length in
/// cells times the mean of both cell costs.
pub fn step_cost(cm: &Costmap, a: (usize, usize), b: (usize, usize)) -> f64 {
    let diagonal = a.0 != b.0 && a.1 != b.1;
    let len = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
    len * 0.5 * (cm.get(a.0, a.1) + cm.get(b.0, b.1))
}

const MOVES: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Passable 8-neighbours of a cell. Diagonal moves are not allowed to cut
/// the corner of an impassable cell.
pub fn neighbors(cm: &Costmap, (i, j): (usize, usize)) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (w, h) = (cm.spec.width as isize, cm.spec.height as isize);
    MOVES.iter().filter_map(move |&(di, dj)| {
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= w || nj >= h {
            return None;
        }
        let n = (ni as usize, nj as usize);
        if !cm.is_passable(n.0, n.1) {
            return None;
        }
        if di != 0 && dj != 0 && !(cm.is_passable(n.0, j) && cm.is_passable(i, n.1)) {
            return None;
        }
        Some(n)
    })
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    steps: u32,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap on (f, steps, index).
        other
            .f
            .total_cmp(&self.f)
            .then(other.steps.cmp(&self.steps))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost 8-connected path. Among equal-cost paths fewer steps win,
/// then the lower-indexed predecessor.
pub fn astar(cm: &Costmap, start: (usize, usize), goal: (usize, usize)) -> Result<Path> {
    let spec = &cm.spec;
    for (name, (i, j)) in [("start", start), ("goal", goal)] {
        if i >= spec.width || j >= spec.height {
            return Err(Error::InvalidEndpoint(format!("{name} ({i}, {j}) is outside the {}x{} map", spec.width, spec.height)));
        }
        if !cm.is_passable(i, j) {
            return Err(Error::InvalidEndpoint(format!("{name} ({i}, {j}) is impassable")));
        }
    }
    let min_cost = cm.min_passable_cost().unwrap_or(0.0);
    let heuristic = |(i, j): (usize, usize)| {
        let dx = i as f64 - goal.0 as f64;
        let dy = j as f64 - goal.1 as f64;
        (dx * dx + dy * dy).sqrt() * min_cost
    };
    let n = spec.len();
    let mut g = vec![f64::INFINITY; n];
    let mut steps = vec![u32::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let s = spec.index(start.0, start.1);
    let t = spec.index(goal.0, goal.1);
    g[s] = 0.0;
    steps[s] = 0;
    let mut open = BinaryHeap::new();
    open.push(Open { f: heuristic(start), steps: 0, index: s });
    while let Some(Open { index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        if index == t {
            break;
        }
        let cur = spec.coords(index);
        for nb in neighbors(cm, cur) {
            let ni = spec.index(nb.0, nb.1);
            let ng = g[index] + step_cost(cm, cur, nb);
            let ns = steps[index] + 1;
            let better = ng < g[ni] || (ng == g[ni] && (ns < steps[ni] || (ns == steps[ni] && index < parent[ni])));
            if better {
                g[ni] = ng;
                steps[ni] = ns;
                parent[ni] = index;
                closed[ni] = false;
                open.push(Open { f: ng + heuristic(nb), steps: ns, index: ni });
            }
        }
    }
    if !g[t].is_finite() {
        return Err(Error::NoPath);
    }
    let mut cells = vec![goal];
    let mut cur = t;
    while cur != s {
        cur = parent[cur];
        cells.push(spec.coords(cur));
    }
    cells.reverse();
    Ok(Path { cells, cost: g[t] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn costmap(w: usize, h: usize, costs: Vec<f64>) -> Costmap {
        Costmap { spec: GridSpec::new(0.0, 0.0, 1.0, w, h).unwrap(), costs }
    }

    /// Plain Dijkstra over the same neighbourhood and step-cost rule.
    fn dijkstra(cm: &Costmap, start: (usize, usize), goal: (usize, usize)) -> Option<f64> {
        let n = cm.spec.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[cm.spec.index(start.0, start.1)] = 0.0;
        loop {
            let mut best = None;
            for k in 0..n {
                if !done[k] && dist[k].is_finite() && best.is_none_or(|b: usize| dist[k] < dist[b]) {
                    best = Some(k);
                }
            }
            let k = best?;
            if k == cm.spec.index(goal.0, goal.1) {
                return Some(dist[k]);
            }
            done[k] = true;
            let c = cm.spec.coords(k);
            for nb in neighbors(cm, c) {
                let ni = cm.spec.index(nb.0, nb.1);
                let d = dist[k] + step_cost(cm, c, nb);
                if d < dist[ni] {
                    dist[ni] = d;
                }
            }
        }
    }

    #[test]
    fn costmap_lookup() {
        let spec = GridSpec::new(0.0, 0.0, 1.0, 5, 1).unwrap();
        let raster = ClassGrid { spec, classes: SurfaceClass::ALL.to_vec() };
        let cm = map_to_costmap(&raster, &CostTable::default()).unwrap();
        assert_eq!(cm.costs, vec![100.0, 100.0, 1.0, 5.0, IMPASSABLE]);
        let ped = ClassGrid::filled(spec, SurfaceClass::Pedestrian);
        assert!(map_to_costmap(&ped, &CostTable::default()).unwrap().costs.iter().all(|&c| c == 1.0));
        let mut partial = CostTable::default();
        partial.0.remove(&SurfaceClass::Crossing);
        assert!(matches!(map_to_costmap(&ped, &partial), Err(Error::MissingClassCost(SurfaceClass::Crossing))));
    }

    #[test]
    fn cost_table_toml_round_trip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Wrap {
            costs: CostTable,
        }
        let w = Wrap { costs: CostTable::default() };
        let text = toml::to_string(&w).unwrap();
        assert!(text.contains("obstacle = \"impassable\""), "{text}");
        assert_eq!(toml::from_str::<Wrap>(&text).unwrap(), w);
        assert!(toml::from_str::<Wrap>("[costs]\nroad = \"blocked\"").is_err());
    }

    #[test]
    fn uniform_costmap_is_unchanged_by_smoothing() {
        let cm = costmap(13, 9, vec![3.5; 117]);
        let s = gaussian_smooth(&cm, 1.7).unwrap();
        assert!(s.costs.iter().all(|c| (c - 3.5).abs() < 1e-9));
        assert!(gaussian_smooth(&cm, 0.0).is_err());
    }

    #[test]
    fn spike_becomes_sampled_gaussian() {
        let (w, h) = (31, 31);
        let mut costs = vec![0.0; w * h];
        costs[15 * w + 15] = 1.0;
        let sigma = 2.0;
        let s = gaussian_smooth(&costmap(w, h, costs), sigma).unwrap();
        let r = (3.0 * sigma).ceil() as i64;
        let z: f64 = (-r..=r)
            .flat_map(|a| (-r..=r).map(move |b| (a, b)))
            .map(|(a, b)| (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp())
            .sum();
        for j in 0..h {
            for i in 0..w {
                let (dx, dy) = (i as i64 - 15, j as i64 - 15);
                let want = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / z
                } else {
                    0.0
                };
                assert!((s.get(i, j) - want).abs() < 1e-6, "({i}, {j})");
            }
        }
    }

    #[test]
    fn impassable_cells_survive_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let costs: Vec<f64> = (0..400)
            .map(|_| if rng.random_bool(0.2) { IMPASSABLE } else { rng.random_range(1.0..10.0) })
            .collect();
        let cm = costmap(20, 20, costs);
        let s = gaussian_smooth(&cm, 1.3).unwrap();
        for (a, b) in cm.costs.iter().zip(&s.costs) {
            assert_eq!(a.is_finite(), b.is_finite());
            if b.is_finite() {
                assert!((1.0..=10.0).contains(b));
            }
        }
    }

    #[test]
    fn trivial_and_straight_paths() {
        let cm = costmap(10, 10, vec![2.0; 100]);
        let p = astar(&cm, (3, 4), (3, 4)).unwrap();
        assert_eq!(p.cells, vec![(3, 4)]);
        assert_eq!(p.cost, 0.0);
        let p = astar(&cm, (0, 0), (9, 9)).unwrap();
        assert_eq!(p.cells, (0..10).map(|k| (k, k)).collect::<Vec<_>>());
        assert!((p.cost - 9.0 * std::f64::consts::SQRT_2 * 2.0).abs() < 1e-12);
        let p = astar(&cm, (0, 2), (7, 2)).unwrap();
        assert_eq!(p.cells.len(), 8);
        assert!(p.cells.iter().all(|c| c.1 == 2));
    }

    #[test]
    fn endpoint_and_reachability_errors() {
        let mut costs = vec![1.0; 25];
        for j in 0..5 {
            costs[j * 5 + 2] = IMPASSABLE;
        }
        let cm = costmap(5, 5, costs);
        assert!(matches!(astar(&cm, (0, 0), (4, 4)), Err(Error::NoPath)));
        assert!(matches!(astar(&cm, (2, 0), (4, 4)), Err(Error::InvalidEndpoint(_))));
        assert!(matches!(astar(&cm, (0, 0), (5, 0)), Err(Error::InvalidEndpoint(_))));
    }

    #[test]
    fn no_corner_cutting() {
        // Diagonal (0,0)->(1,1) is blocked because (1,0) is impassable.
        let mut costs = vec![1.0; 9];
        costs[1] = IMPASSABLE;
        let cm = costmap(3, 3, costs);
        let p = astar(&cm, (0, 0), (2, 0)).unwrap();
        for w in p.cells.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.0 != b.0 && a.1 != b.1 {
                assert!(cm.is_passable(b.0, a.1) && cm.is_passable(a.0, b.1));
            }
        }
    }

    fn check_path(cm: &Costmap, p: &Path, start: (usize, usize), goal: (usize, usize)) {
        assert_eq!(p.cells.first(), Some(&start));
        assert_eq!(p.cells.last(), Some(&goal));
        let mut sum = 0.0;
        for w in p.cells.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1 && a != b);
            sum += step_cost(cm, a, b);
        }
        assert_eq!(sum, p.cost);
    }

    #[test]
    fn astar_matches_dijkstra_on_random_maps() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let costs: Vec<f64> = (0..900)
                .map(|_| if rng.random_bool(0.15) { IMPASSABLE } else { rng.random_range(1.0..10.0) })
                .collect();
            let cm = costmap(30, 30, costs);
            let pick = |rng: &mut ChaCha8Rng| loop {
                let c = (rng.random_range(0..30), rng.random_range(0..30));
                if cm.is_passable(c.0, c.1) {
                    break c;
                }
            };
            let (s, t) = (pick(&mut rng), pick(&mut rng));
            match (astar(&cm, s, t), dijkstra(&cm, s, t)) {
                (Ok(p), Some(d)) => {
                    assert_eq!(p.cost, d, "seed {seed}");
                    check_path(&cm, &p, s, t);
                }
                (Err(Error::NoPath), None) => {}
                (a, d) => panic!("seed {seed}: astar {a:?}, dijkstra {d:?}"),
            }
        }
    }

    #[test]
    fn smoothing_centres_paths_in_corridors() {
        // L-shaped corridor seven cells wide in a high-cost field.
        let (w, h) = (40, 40);
        let mut costs = vec![100.0; w * h];
        let corridor = |i: usize, j: usize| ((5..12).contains(&j) && (5..35).contains(&i)) || ((28..35).contains(&i) && (5..35).contains(&j));
        for j in 0..h {
            for i in 0..w {
                if corridor(i, j) {
                    costs[j * w + i] = 1.0;
                }
            }
        }
        let cm = costmap(w, h, costs);
        let outer = |i: usize, j: usize| {
            corridor(i, j) && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(di, dj)| !corridor((i as isize + di) as usize, (j as isize + dj) as usize))
        };
        let smooth = gaussian_smooth(&cm, 1.0).unwrap();
        let p = astar(&smooth, (6, 8), (31, 33)).unwrap();
        assert!(p.cells.iter().all(|&(i, j)| corridor(i, j) && !outer(i, j)), "{:?}", p.cells);
    }
}
