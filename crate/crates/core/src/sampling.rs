//! Reproducible samplers for cubes and cell-union subsets `E ⊆ Q`.
//!
//! Every sampled set is described by a small serializable spec so a report
//! witness can be re-materialized exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lattice::{box_cells, DyadicCube, Grid};
use crate::measures::LatticeMeasure;
use crate::rng::substream;

/// Which measure's density drives a greedy subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sigma,
    Omega,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsetKind {
    Empty,
    Whole,
    /// Each cell of the cube kept independently with probability `p`.
    Random { p: f64, seed: u64 },
    /// A dyadic descendant of the cube.
    Subcube { level: u32, index: Vec<i64> },
    /// The `k` cells of largest (or smallest) density of the given measure.
    Greedy { k: usize, role: Role, descending: bool },
    /// Explicit cell list (used for sign sets and other derived subsets).
    Cells { cells: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub cube: String,
    #[serde(flatten)]
    pub kind: SubsetKind,
}

impl Subset {
    pub fn new(cube: &DyadicCube, kind: SubsetKind) -> Self {
        Subset { cube: cube.token(), kind }
    }

    pub fn cube(&self) -> DyadicCube {
        DyadicCube::parse_token(&self.cube).expect("subset cube token written by us")
    }

    /// Cells of the subset, sorted ascending.
    pub fn cells(&self, grid: &Grid, sigma: &LatticeMeasure, omega: &LatticeMeasure) -> Vec<usize> {
        let q = self.cube();
        let qcells = || box_cells(grid, &grid.cube_box(&q));
        let mut out: Vec<usize> = match &self.kind {
            SubsetKind::Empty => Vec::new(),
            SubsetKind::Whole => qcells().collect(),
            SubsetKind::Random { p, seed } => {
                let mut rng = substream(*seed, "subset-random");
                let mut cells: Vec<usize> = qcells().collect();
                cells.sort_unstable();
                cells.into_iter().filter(|_| rng.gen::<f64>() < *p).collect()
            }
            SubsetKind::Subcube { level, index } => {
                let sub = grid.cube(*level, index);
                box_cells(grid, &grid.cube_box(&sub)).collect()
            }
            SubsetKind::Greedy { k, role, descending } => {
                let mu = match role {
                    Role::Sigma => sigma,
                    Role::Omega => omega,
                };
                let mut cells: Vec<usize> = qcells().collect();
                cells.sort_unstable();
                let d = mu.density();
                cells.sort_by(|&a, &b| {
                    let o = d[a].partial_cmp(&d[b]).unwrap_or(std::cmp::Ordering::Equal);
                    if *descending {
                        o.reverse()
                    } else {
                        o
                    }
                });
                cells.truncate(*k);
                cells
            }
            SubsetKind::Cells { cells } => cells.clone(),
        };
        out.sort_unstable();
        out
    }
}

/// Uniformly sampled cubes with levels in `[min_level, max_level]` that lie in
/// the root. Deduplicated and sorted for determinism.
pub fn sample_cubes(grid: &Grid, count: usize, min_level: u32, max_level: u32, seed: u64) -> Vec<DyadicCube> {
    let mut rng = substream(seed, "cubes");
    let max_level = max_level.min(grid.depth());
    let min_level = min_level.min(max_level);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let level = rng.gen_range(min_level..=max_level);
        let k = 1i64 << level;
        let idx: Vec<i64> = (0..grid.n()).map(|_| rng.gen_range(0..k)).collect();
        out.push(grid.cube(level, &idx));
    }
    out.sort();
    out.dedup();
    out
}

/// The standard mix of subsets of `q`: the whole cube, random cell unions,
/// random dyadic subcubes, and greedy density-extremal unions for both measures.
pub fn standard_subsets(grid: &Grid, q: &DyadicCube, random_count: usize, seed: u64) -> Vec<Subset> {
    let mut rng = substream(seed, &format!("subsets/{}", q.token()));
    let mut out = vec![Subset::new(q, SubsetKind::Whole)];
    let ncells = grid.cube_box(q).volume_cells() as usize;
    for _ in 0..random_count {
        let p = rng.gen_range(0.05..0.95);
        out.push(Subset::new(q, SubsetKind::Random { p, seed: rng.gen() }));
    }
    if q.level < grid.depth() {
        let levels: Vec<u32> = (q.level + 1..=grid.depth()).collect();
        for _ in 0..random_count.max(1) {
            let level = *levels.choose(&mut rng).expect("nonempty");
            let d = level - q.level;
            let idx: Vec<i64> = (0..grid.n())
                .map(|a| (q.index[a] << d) + rng.gen_range(0..(1i64 << d)))
                .collect();
            out.push(Subset::new(q, SubsetKind::Subcube { level, index: idx }));
        }
    }
    let mut ks: Vec<usize> = [64usize, 16, 4, 2]
        .iter()
        .map(|&f| (ncells / f).max(1))
        .collect();
    ks.dedup();
    for &k in &ks {
        if k >= ncells {
            continue;
        }
        for role in [Role::Sigma, Role::Omega] {
            for descending in [true, false] {
                out.push(Subset::new(q, SubsetKind::Greedy { k, role, descending }));
            }
        }
    }
    out
}
