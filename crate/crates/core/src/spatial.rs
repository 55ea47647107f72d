//! Exact nearest-neighbor queries over 3D point sets.
//!
//! Small sets are scanned linearly. Above [`GRID_THRESHOLD`] points a uniform
//! grid is built; queries visit cells in growing Chebyshev rings and stop once
//! no unvisited cell can hold a closer point, so results are identical to the
//! linear scan, including the lowest-index tie-break.

use nalgebra::Vector3;

/// Point count above which the grid accelerator is used.
pub const GRID_THRESHOLD: usize = 5000;

/// Index of the closest point and its squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

fn closer(candidate: Neighbor, best: Option<Neighbor>) -> bool {
    match best {
        None => true,
        Some(b) => candidate.dist_sq < b.dist_sq || (candidate.dist_sq == b.dist_sq && candidate.index < b.index),
    }
}

pub fn nearest_brute_force(points: &[Vector3<f64>], query: &Vector3<f64>) -> Option<Neighbor> {
    let mut best: Option<Neighbor> = None;
    for (index, p) in points.iter().enumerate() {
        let cand = Neighbor { index, dist_sq: (p - query).norm_squared() };
        if closer(cand, best) {
            best = Some(cand);
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Grid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `order`, one per cell plus a sentinel.
    starts: Vec<usize>,
    /// Point indices sorted by cell, ascending index within a cell.
    order: Vec<usize>,
}

impl Grid {
    fn build(points: &[Vector3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let volume = extent.iter().map(|e| e.max(1e-9)).product::<f64>();
        // Roughly two points per cell.
        let mut cell = (2.0 * volume / points.len() as f64).cbrt();
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let cell = cell.max(extent.amax() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).min(1 << 16));
        let mut grid = Grid { origin: lo, cell, dims, starts: Vec::new(), order: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cell_of: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_coords(p))).collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_coords(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let k = ((p[a] - self.origin[a]) / self.cell).floor();
            if k <= 0.0 {
                0
            } else {
                (k as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distance from `q` along axis `a` to the slab of cells with index `k`.
    fn slab_distance(&self, q: &Vector3<f64>, a: usize, k: usize) -> f64 {
        let lo = self.origin[a] + k as f64 * self.cell;
        let hi = lo + self.cell;
        (lo - q[a]).max(q[a] - hi).max(0.0)
    }

    fn nearest(&self, points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<Neighbor> {
        let center = self.cell_coords(q);
        let mut best: Option<Neighbor> = None;
        let max_ring = *self.dims.iter().max().unwrap_or(&1);
        for ring in 0..=max_ring {
            let r = ring as isize;
            let range = |a: usize| {
                let c = center[a] as isize;
                ((c - r).max(0) as usize)..=((c + r).min(self.dims[a] as isize - 1) as usize)
            };
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let on_shell = [x, y, z].iter().zip(center.iter()).any(|(&k, &c)| (k as isize - c as isize).abs() == r);
                        if !on_shell {
                            continue;
                        }
                        let flat = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[flat]..self.starts[flat + 1]] {
                            let cand = Neighbor { index: i, dist_sq: (points[i] - q).norm_squared() };
                            if closer(cand, best) {
                                best = Some(cand);
                            }
                        }
                    }
                }
            }
            // Lower bound on the distance to any cell in the next ring.
            let next = r + 1;
            let mut bound = f64::INFINITY;
            for (a, &ca) in center.iter().enumerate() {
                let c = ca as isize;
                for k in [c - next, c + next] {
                    if k >= 0 && (k as usize) < self.dims[a] {
                        bound = bound.min(self.slab_distance(q, a, k as usize));
                    }
                }
            }
            if !bound.is_finite() {
                break;
            }
            if let Some(b) = best {
                if b.dist_sq < bound * bound {
                    break;
                }
            }
        }
        best
    }
}

/// Nearest-neighbor index over a fixed point set.
#[derive(Debug, Clone)]
pub struct NearestNeighbors<'a> {
    points: &'a [Vector3<f64>],
    grid: Option<Grid>,
}

impl<'a> NearestNeighbors<'a> {
    /// Picks linear scan or grid according to [`GRID_THRESHOLD`].
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let grid = (points.len() > GRID_THRESHOLD).then(|| Grid::build(points));
        NearestNeighbors { points, grid }
    }

    /// Always builds the grid (used to cross-check it against the scan).
    pub fn with_grid(points: &'a [Vector3<f64>]) -> Self {
        let grid = (!points.is_empty()).then(|| Grid::build(points));
        NearestNeighbors { points, grid }
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbor> {
        match &self.grid {
            Some(g) => g.nearest(self.points, q),
            None => nearest_brute_force(self.points, q),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
