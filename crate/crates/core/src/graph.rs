//! k-nearest-neighbor graphs over 2-D pillar positions.
//!
//! [`build_knn`] buckets positions into a uniform grid and searches rings of
//! cells outward from each query; [`knn_bruteforce`] sorts every pairwise
//! distance. Both share the distance function and the `(distance, index)`
//! ordering, so they agree exactly, ties included.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("need at least 2 vertices to build a neighbor graph, got {0}")]
    TooFewVertices(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("position {0} is not finite")]
    NonFinite(usize),
}

/// Per-vertex neighbor lists, `k` entries each, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    k: usize,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
    padded: Vec<bool>,
}

impl NeighborGraph {
    /// Builds a graph from explicit lists. Used for hand-made instances.
    pub fn from_lists(k: usize, neighbors: Vec<usize>, distances: Vec<f64>) -> Self {
        assert!(k >= 1 && neighbors.len().is_multiple_of(k) && neighbors.len() == distances.len());
        let n = neighbors.len() / k;
        Self {
            k,
            neighbors,
            distances,
            padded: vec![false; n],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.padded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.padded.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// True when vertex `i` has fewer than `k` distinct neighbors and its list
    /// was filled by repeating the nearest one.
    pub fn is_padded(&self, i: usize) -> bool {
        self.padded[i]
    }

    /// Returns a copy whose neighbor order for vertex `i` is `perm[i]`
    /// (distances permuted consistently).
    pub fn permuted(&self, perms: &[Vec<usize>]) -> NeighborGraph {
        let mut out = self.clone();
        for (i, perm) in perms.iter().enumerate() {
            for (slot, &src) in perm.iter().enumerate() {
                out.neighbors[i * self.k + slot] = self.neighbors[i * self.k + src];
                out.distances[i * self.k + slot] = self.distances[i * self.k + src];
            }
        }
        out
    }
}

#[inline]
pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

fn validate(positions: &[[f64; 2]], k: usize) -> Result<(), GraphError> {
    if positions.len() < 2 {
        return Err(GraphError::TooFewVertices(positions.len()));
    }
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if let Some(i) = positions
        .iter()
        .position(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(GraphError::NonFinite(i));
    }
    Ok(())
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Pads a sorted candidate list up to `k` by repeating its first entry at the
/// front, which keeps distances non-decreasing.
fn finish(mut best: Vec<(f64, usize)>, k: usize) -> (Vec<(f64, usize)>, bool) {
    if best.len() >= k {
        best.truncate(k);
        return (best, false);
    }
    let nearest = best[0];
    let missing = k - best.len();
    best.splice(0..0, std::iter::repeat_n(nearest, missing));
    (best, true)
}

fn assemble(k: usize, rows: Vec<(Vec<(f64, usize)>, bool)>) -> NeighborGraph {
    let n = rows.len();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    let mut padded = Vec::with_capacity(n);
    for (row, pad) in rows {
        for (d, j) in row {
            neighbors.push(j);
            distances.push(d);
        }
        padded.push(pad);
    }
    NeighborGraph {
        k,
        neighbors,
        distances,
        padded,
    }
}

/// Exhaustive O(N² log N) reference.
pub fn knn_bruteforce(positions: &[[f64; 2]], k: usize) -> Result<NeighborGraph, GraphError> {
    validate(positions, k)?;
    let rows = (0..positions.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &p)| (distance(positions[i], p), j))
                .collect();
            all.sort_by(by_distance_then_index);
            finish(all, k)
        })
        .collect();
    Ok(assemble(k, rows))
}

/// Uniform bucket grid in compressed (CSR) form.
struct SpatialHash {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl SpatialHash {
    fn new(positions: &[[f64; 2]], k: usize) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in positions {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = [(hi[0] - lo[0]).max(1e-9), (hi[1] - lo[1]).max(1e-9)];
        // about k points per bucket on uniform data
        let n = positions.len() as f64;
        let mut cell = (extent[0] * extent[1] * k.max(2) as f64 / n).sqrt();
        let max_side = 4096.0;
        cell = cell
            .max(extent[0] / max_side)
            .max(extent[1] / max_side)
            .max(f64::MIN_POSITIVE);
        let nx = ((extent[0] / cell).floor() as usize + 1).max(1);
        let ny = ((extent[1] / cell).floor() as usize + 1).max(1);

        let bucket_of = |p: &[f64; 2]| -> usize {
            let bx = (((p[0] - lo[0]) / cell) as usize).min(nx - 1);
            let by = (((p[1] - lo[1]) / cell) as usize).min(ny - 1);
            by * nx + bx
        };
        let mut counts = vec![0usize; nx * ny + 1];
        let buckets: Vec<usize> = positions.iter().map(bucket_of).collect();
        for &b in &buckets {
            counts[b + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; positions.len()];
        for (i, &b) in buckets.iter().enumerate() {
            items[fill[b]] = i;
            fill[b] += 1;
        }
        Self {
            origin: lo,
            cell,
            nx,
            ny,
            starts: counts,
            items,
        }
    }

    fn bucket_coords(&self, p: [f64; 2]) -> (usize, usize) {
        (
            (((p[0] - self.origin[0]) / self.cell) as usize).min(self.nx - 1),
            (((p[1] - self.origin[1]) / self.cell) as usize).min(self.ny - 1),
        )
    }

    fn bucket(&self, bx: usize, by: usize) -> &[usize] {
        let b = by * self.nx + bx;
        &self.items[self.starts[b]..self.starts[b + 1]]
    }

    fn query(&self, positions: &[[f64; 2]], i: usize, k: usize) -> Vec<(f64, usize)> {
        let q = positions[i];
        let (cx, cy) = self.bucket_coords(q);
        let max_ring = self.nx.max(self.ny);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(4 * k + 8);
        let visit = |bx: usize, by: usize, best: &mut Vec<(f64, usize)>| {
            for &j in self.bucket(bx, by) {
                if j != i {
                    best.push((distance(q, positions[j]), j));
                }
            }
        };
        for ring in 0..=max_ring {
            let (x0, x1) = (cx as isize - ring as isize, cx as isize + ring as isize);
            let (y0, y1) = (cy as isize - ring as isize, cy as isize + ring as isize);
            for by in y0..=y1 {
                if by < 0 || by >= self.ny as isize {
                    continue;
                }
                if by == y0 || by == y1 {
                    for bx in x0.max(0)..=x1.min(self.nx as isize - 1) {
                        visit(bx as usize, by as usize, &mut best);
                    }
                } else {
                    for bx in [x0, x1] {
                        if bx >= 0 && bx < self.nx as isize {
                            visit(bx as usize, by as usize, &mut best);
                        }
                        if x0 == x1 {
                            break;
                        }
                    }
                }
            }
            best.sort_by(by_distance_then_index);
            best.truncate(k);
            // anything outside rings 0..=ring is at least ring * cell away
            if best.len() == k && best[k - 1].0 < ring as f64 * self.cell * (1.0 - 1e-9) {
                break;
            }
        }
        best
    }
}

/// Spatial-hash k-NN; identical output to [`knn_bruteforce`].
pub fn build_knn(positions: &[[f64; 2]], k: usize) -> Result<NeighborGraph, GraphError> {
    validate(positions, k)?;
    let hash = SpatialHash::new(positions, k);
    let rows = (0..positions.len())
        .into_par_iter()
        .map(|i| finish(hash.query(positions, i, k), k))
        .collect();
    Ok(assemble(k, rows))
}
