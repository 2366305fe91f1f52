//! Dyadic cube geometry on a bounded root cube.
//!
//! All positions are kept in integer units of the finest lattice cell, so
//! containment, tiling and distance questions are answered exactly. Physical
//! coordinates only appear when a kernel or polynomial is evaluated.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{DyadError, Result};

pub const MAX_DIM: usize = 3;

/// Hard cap on lattice size (2^24 cells) so a typo in `L` cannot eat the machine.
pub const MAX_CELL_BITS: u32 = 24;

/// A dyadic cube of a (possibly shifted) grid.
///
/// `shift` is the grid shift in finest cells; cubes of different grids never
/// compare equal even if they happen to cover the same cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DyadicCube {
    pub level: u32,
    pub index: [i64; MAX_DIM],
    pub shift: [i64; MAX_DIM],
    pub n: u8,
}

impl DyadicCube {
    pub fn dim(&self) -> usize {
        self.n as usize
    }

    /// Text token `level:i0,i1,...,s<shift>` with the shift written per axis
    /// and separated by dots, e.g. `3:1,2,s0.0`.
    pub fn token(&self) -> String {
        let n = self.dim();
        let mut s = format!("{}:", self.level);
        for a in 0..n {
            s.push_str(&self.index[a].to_string());
            s.push(',');
        }
        s.push('s');
        let sh: Vec<String> = (0..n).map(|a| self.shift[a].to_string()).collect();
        s.push_str(&sh.join("."));
        s
    }

    pub fn parse_token(tok: &str) -> Result<Self> {
        let bad = || DyadError::Parse(format!("bad cube token '{tok}'"));
        let (lev, rest) = tok.split_once(':').ok_or_else(bad)?;
        let level: u32 = lev.trim().parse().map_err(|_| bad())?;
        let parts: Vec<&str> = rest.split(',').collect();
        let (shift_tok, idx_toks) = parts.split_last().ok_or_else(bad)?;
        let n = idx_toks.len();
        if n == 0 || n > MAX_DIM {
            return Err(bad());
        }
        let shift_tok = shift_tok.strip_prefix('s').ok_or_else(bad)?;
        let shifts: Vec<&str> = shift_tok.split('.').collect();
        if shifts.len() != n {
            return Err(bad());
        }
        let mut index = [0i64; MAX_DIM];
        let mut shift = [0i64; MAX_DIM];
        for a in 0..n {
            index[a] = idx_toks[a].trim().parse().map_err(|_| bad())?;
            shift[a] = shifts[a].trim().parse().map_err(|_| bad())?;
        }
        Ok(DyadicCube { level, index, shift, n: n as u8 })
    }
}

impl From<DyadicCube> for String {
    fn from(q: DyadicCube) -> String {
        q.token()
    }
}

impl TryFrom<String> for DyadicCube {
    type Error = DyadError;
    fn try_from(s: String) -> Result<Self> {
        DyadicCube::parse_token(&s)
    }
}

impl fmt::Display for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

/// Half-open axis-parallel box `[lo, hi)` in finest-cell units, measured from
/// the root origin. Boxes may stick out of the root; masses clip them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IBox {
    pub n: u8,
    pub lo: [i64; MAX_DIM],
    pub hi: [i64; MAX_DIM],
}

impl IBox {
    pub fn dim(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        (0..self.dim()).any(|a| self.hi[a] <= self.lo[a])
    }

    pub fn volume_cells(&self) -> i64 {
        if self.is_empty() {
            return 0;
        }
        (0..self.dim()).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn contains_box(&self, other: &IBox) -> bool {
        other.is_empty()
            || (0..self.dim()).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    pub fn contains_cell(&self, c: &[i64]) -> bool {
        (0..self.dim()).all(|a| self.lo[a] <= c[a] && c[a] < self.hi[a])
    }

    pub fn intersect(&self, other: &IBox) -> IBox {
        let mut out = *self;
        for a in 0..self.dim() {
            out.lo[a] = self.lo[a].max(other.lo[a]);
            out.hi[a] = self.hi[a].min(other.hi[a]);
        }
        out
    }

    pub fn disjoint(&self, other: &IBox) -> bool {
        self.intersect(other).is_empty()
    }

    /// Grow by `k` cells on every side (k may be negative).
    pub fn grow(&self, k: i64) -> IBox {
        let mut out = *self;
        for a in 0..self.dim() {
            out.lo[a] -= k;
            out.hi[a] += k;
        }
        out
    }
}

/// Goodness and corona-separation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessParams {
    pub r: u32,
    pub epsilon: f64,
    pub tau: u32,
    pub rho: u32,
}

impl Default for GoodnessParams {
    fn default() -> Self {
        GoodnessParams { r: 4, epsilon: 0.25, tau: 3, rho: 8 }
    }
}

impl GoodnessParams {
    pub fn new(r: u32, epsilon: f64) -> Result<Self> {
        let p = GoodnessParams { r, epsilon, ..Default::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(DyadError::BadParameter("goodness r must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(DyadError::BadParameter("goodness epsilon must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// A dyadic grid of depth `L` over a root cube, optionally shifted by a
/// whole number of finest cells per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    depth: u32,
    origin: [f64; MAX_DIM],
    side: f64,
    shift: [i64; MAX_DIM],
}

impl Grid {
    pub fn new(n: usize, depth: u32, origin: &[f64], side: f64) -> Result<Self> {
        if n == 0 || n > MAX_DIM {
            return Err(DyadError::BadParameter(format!("dimension {n} not in 1..={MAX_DIM}")));
        }
        if n as u32 * depth > MAX_CELL_BITS {
            return Err(DyadError::BadParameter(format!(
                "lattice 2^({n}*{depth}) exceeds the 2^{MAX_CELL_BITS} cell cap"
            )));
        }
        if origin.len() != n {
            return Err(DyadError::BadParameter("root origin has wrong dimension".into()));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(DyadError::BadParameter("root side must be positive".into()));
        }
        let mut o = [0.0; MAX_DIM];
        o[..n].copy_from_slice(origin);
        Ok(Grid { n, depth, origin: o, side, shift: [0; MAX_DIM] })
    }

    /// Unit root `[0,1)^n`.
    pub fn unit(n: usize, depth: u32) -> Result<Self> {
        Grid::new(n, depth, &vec![0.0; n], 1.0)
    }

    pub fn shifted(&self, shift: &[i64]) -> Result<Grid> {
        if shift.len() != self.n {
            return Err(DyadError::BadParameter("shift has wrong dimension".into()));
        }
        let mut g = self.clone();
        let m = self.cells_per_axis();
        for a in 0..self.n {
            if shift[a] < 0 || shift[a] >= m {
                return Err(DyadError::BadParameter(format!(
                    "shift {} outside [0, {m}) finest cells",
                    shift[a]
                )));
            }
            g.shift[a] = shift[a];
        }
        Ok(g)
    }

    /// Uniform random shift quantized to finest cells.
    pub fn random_shift<R: rand::Rng>(&self, rng: &mut R) -> Grid {
        let m = self.cells_per_axis();
        let s: Vec<i64> = (0..self.n).map(|_| rng.gen_range(0..m)).collect();
        self.shifted(&s).expect("shift drawn in range")
    }

    /// Same root and depth, no shift.
    pub fn base(&self) -> Grid {
        let mut g = self.clone();
        g.shift = [0; MAX_DIM];
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn depth(&self) -> u32 {
        self.depth
    }
    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.n]
    }
    pub fn side(&self) -> f64 {
        self.side
    }
    pub fn shift(&self) -> &[i64] {
        &self.shift[..self.n]
    }
    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s != 0)
    }

    pub fn cells_per_axis(&self) -> i64 {
        1i64 << self.depth
    }
    pub fn cell_count(&self) -> usize {
        1usize << (self.n as u32 * self.depth)
    }
    pub fn cell_side(&self) -> f64 {
        self.side / self.cells_per_axis() as f64
    }
    pub fn cell_volume(&self) -> f64 {
        self.cell_side().powi(self.n as i32)
    }
    pub fn cell_diameter(&self) -> f64 {
        self.cell_side() * (self.n as f64).sqrt()
    }

    /// Row-major linear index (axis 0 slowest).
    pub fn cell_index(&self, c: &[i64]) -> usize {
        let m = self.cells_per_axis();
        let mut idx = 0i64;
        for a in 0..self.n {
            idx = idx * m + c[a];
        }
        idx as usize
    }

    pub fn cell_coords(&self, idx: usize) -> [i64; MAX_DIM] {
        let m = self.cells_per_axis();
        let mut c = [0i64; MAX_DIM];
        let mut r = idx as i64;
        for a in (0..self.n).rev() {
            c[a] = r % m;
            r /= m;
        }
        c
    }

    pub fn cell_center(&self, idx: usize) -> [f64; MAX_DIM] {
        let c = self.cell_coords(idx);
        let h = self.cell_side();
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.n {
            x[a] = self.origin[a] + (c[a] as f64 + 0.5) * h;
        }
        x
    }

    /// Physical coordinate of a lattice point given in cell units.
    pub fn point(&self, a: usize, cells: f64) -> f64 {
        self.origin[a] + cells * self.cell_side()
    }

    /// Cell containing the physical point `x`, if inside the root.
    pub fn cell_of_point(&self, x: &[f64]) -> Option<usize> {
        let h = self.cell_side();
        let m = self.cells_per_axis();
        let mut c = [0i64; MAX_DIM];
        for a in 0..self.n {
            let t = ((x[a] - self.origin[a]) / h).floor();
            if !(t >= 0.0 && t < m as f64) {
                return None;
            }
            c[a] = t as i64;
        }
        Some(self.cell_index(&c))
    }

    pub fn root_box(&self) -> IBox {
        let mut b = IBox { n: self.n as u8, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for a in 0..self.n {
            b.hi[a] = self.cells_per_axis();
        }
        b
    }

    pub fn cell_box(&self, idx: usize) -> IBox {
        let c = self.cell_coords(idx);
        let mut b = IBox { n: self.n as u8, lo: c, hi: c };
        for a in 0..self.n {
            b.hi[a] += 1;
        }
        b
    }

    pub fn cube(&self, level: u32, index: &[i64]) -> DyadicCube {
        let mut i = [0i64; MAX_DIM];
        i[..self.n].copy_from_slice(&index[..self.n]);
        DyadicCube { level, index: i, shift: self.shift, n: self.n as u8 }
    }

    /// The level-0 cube of this grid (the root itself when unshifted).
    pub fn top(&self) -> DyadicCube {
        self.cube(0, &[0; MAX_DIM])
    }

    pub fn side_cells(&self, q: &DyadicCube) -> i64 {
        1i64 << (self.depth - q.level)
    }

    pub fn side_of(&self, q: &DyadicCube) -> f64 {
        self.side / (1u64 << q.level) as f64
    }

    pub fn volume_of(&self, q: &DyadicCube) -> f64 {
        self.side_of(q).powi(self.n as i32)
    }

    pub fn cube_box(&self, q: &DyadicCube) -> IBox {
        let s = self.side_cells(q);
        let mut b = IBox { n: self.n as u8, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for a in 0..self.n {
            b.lo[a] = q.index[a] * s + q.shift[a];
            b.hi[a] = b.lo[a] + s;
        }
        b
    }

    pub fn center_of(&self, q: &DyadicCube) -> [f64; MAX_DIM] {
        let b = self.cube_box(q);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.n {
            x[a] = self.point(a, 0.5 * (b.lo[a] + b.hi[a]) as f64);
        }
        x
    }

    /// True when the cube lies entirely inside the root box.
    pub fn in_root(&self, q: &DyadicCube) -> bool {
        self.root_box().contains_box(&self.cube_box(q))
    }

    pub fn children(&self, q: &DyadicCube) -> Result<Vec<DyadicCube>> {
        if q.level >= self.depth {
            return Err(DyadError::LevelOverflow { level: q.level, depth: self.depth });
        }
        let n = self.n;
        let mut out = Vec::with_capacity(1 << n);
        for i in 0..(1usize << n) {
            let mut c = *q;
            c.level += 1;
            for a in 0..n {
                let bit = ((i >> (n - 1 - a)) & 1) as i64;
                c.index[a] = 2 * q.index[a] + bit;
            }
            out.push(c);
        }
        Ok(out)
    }

    /// Position of `child` among `children(parent(child))`.
    pub fn child_position(&self, child: &DyadicCube) -> usize {
        let n = self.n;
        let mut i = 0usize;
        for a in 0..n {
            i = (i << 1) | (child.index[a] & 1) as usize;
        }
        i
    }

    pub fn parent(&self, q: &DyadicCube) -> Option<DyadicCube> {
        if q.level == 0 {
            return None;
        }
        let mut p = *q;
        p.level -= 1;
        for a in 0..self.n {
            p.index[a] = q.index[a].div_euclid(2);
        }
        Some(p)
    }

    /// Ancestor at `level` (which must not exceed `q.level`).
    pub fn ancestor_at(&self, q: &DyadicCube, level: u32) -> DyadicCube {
        debug_assert!(level <= q.level);
        let d = q.level - level;
        let mut p = *q;
        p.level = level;
        for a in 0..self.n {
            p.index[a] = q.index[a] >> d;
        }
        p
    }

    /// Strict ancestors from the parent up to level 0.
    pub fn ancestors(&self, q: &DyadicCube) -> Vec<DyadicCube> {
        (0..q.level).rev().map(|l| self.ancestor_at(q, l)).collect()
    }

    /// `b ⊆ a` for cubes of the same grid.
    pub fn contains(&self, a: &DyadicCube, b: &DyadicCube) -> bool {
        a.shift == b.shift && b.level >= a.level && self.ancestor_at(b, a.level) == *a
    }

    pub fn cubes_at_level(&self, level: u32) -> Vec<DyadicCube> {
        let k = 1i64 << level;
        let total = 1usize << (self.n as u32 * level);
        (0..total)
            .map(|mut r| {
                let mut idx = [0i64; MAX_DIM];
                for a in (0..self.n).rev() {
                    idx[a] = (r as i64) % k;
                    r /= k as usize;
                }
                self.cube(level, &idx)
            })
            .collect()
    }

    /// Every cube of levels `0..=max_level`, coarse to fine.
    pub fn all_cubes(&self, max_level: u32) -> Vec<DyadicCube> {
        (0..=max_level.min(self.depth)).flat_map(|l| self.cubes_at_level(l)).collect()
    }

    /// Descendants of `q` down to `max_level` (including `q`), coarse to fine.
    pub fn descendants(&self, q: &DyadicCube, max_level: u32) -> Vec<DyadicCube> {
        let mut out = vec![*q];
        let mut frontier = vec![*q];
        let mut level = q.level;
        while level < max_level.min(self.depth) {
            let mut next = Vec::with_capacity(frontier.len() << self.n);
            for c in &frontier {
                next.extend(self.children(c).expect("level checked"));
            }
            out.extend_from_slice(&next);
            frontier = next;
            level += 1;
        }
        out
    }

    /// The concentric dilate `tQ` as a cell box; errors when it is not cell aligned.
    pub fn dilate(&self, q: &DyadicCube, t: f64) -> Result<IBox> {
        let s = self.side_cells(q);
        let grow2 = (t - 1.0) * s as f64; // total growth per axis, both sides
        let half = grow2 / 2.0;
        if !(t > 0.0) || half.fract() != 0.0 {
            return Err(DyadError::MisalignedCube(format!("{t}*{} is not cell aligned", q.token())));
        }
        Ok(self.cube_box(q).grow(half as i64))
    }

    /// Distance from the closed cube `q` to the boundary of `anc` in cell units.
    /// `q ⊆ anc` is assumed, so this is the gap to the nearest face.
    pub fn boundary_gap_cells(&self, q: &DyadicCube, anc: &DyadicCube) -> i64 {
        let bq = self.cube_box(q);
        let bi = self.cube_box(anc);
        (0..self.n)
            .map(|a| (bq.lo[a] - bi.lo[a]).min(bi.hi[a] - bq.hi[a]))
            .min()
            .unwrap_or(0)
    }

    /// (r,ε)-goodness: bad iff some ancestor I with ℓ(I) ≥ 2^r ℓ(Q) has
    /// dist(Q,∂I) < 2√n ℓ(Q)^ε ℓ(I)^{1-ε}. Ancestors run up to the grid's
    /// level-0 cube, which keeps the test translation equivariant.
    pub fn is_good(&self, q: &DyadicCube, p: &GoodnessParams) -> bool {
        if q.level < p.r {
            return true;
        }
        let lq = self.side_cells(q) as f64;
        let c = 2.0 * (self.n as f64).sqrt();
        for level in 0..=(q.level - p.r) {
            let anc = self.ancestor_at(q, level);
            let gap = self.boundary_gap_cells(q, &anc) as f64;
            let ratio = (1u64 << (q.level - level)) as f64;
            // gap/ℓ(Q) is an exact rational; compare against the scaled bound.
            if gap / lq < c * ratio.powf(1.0 - p.epsilon) {
                return false;
            }
        }
        true
    }

    /// Cell box of `3Q` extended by one cell on each low face. The cube and its
    /// dilates are half-open, so a point on a low face is interior to the
    /// union of Ω's cells only if the neighbouring cell belongs to Ω too.
    fn interior_probe_box(&self, b: &IBox) -> IBox {
        let mut e = *b;
        for a in 0..self.n {
            e.lo[a] -= 1;
        }
        e
    }

    /// Whitney decomposition of the interior of a union of finest cells:
    /// maximal dyadic cubes with 3Q ⊆ Ω.
    pub fn whitney(&self, open: &CellSet) -> Vec<DyadicCube> {
        let sat = open.counts();
        let inside = |b: &IBox| -> bool {
            let e = self.interior_probe_box(b);
            self.root_box().contains_box(&e) && sat.sum(&e) as i64 == e.volume_cells()
        };
        let mut out = Vec::new();
        let mut stack = vec![self.top()];
        while let Some(q) = stack.pop() {
            let b3 = self.dilate(&q, 3.0).expect("odd dilates are aligned");
            if inside(&b3) {
                out.push(q);
            } else if q.level < self.depth {
                // only descend where Ω is present at all
                if sat.sum(&self.cube_box(&q)) > 0.0 {
                    let mut ch = self.children(&q).expect("level checked");
                    ch.reverse();
                    stack.extend(ch);
                }
            }
        }
        out.sort();
        out
    }

    /// Whether `3Q ⊆ Ω` in the same half-open sense used by [`Grid::whitney`].
    pub fn triple_inside(&self, q: &DyadicCube, open: &CellSet) -> bool {
        let b3 = self.dilate(q, 3.0).expect("odd dilates are aligned");
        let e = self.interior_probe_box(&b3);
        if !self.root_box().contains_box(&e) {
            return false;
        }
        box_cells(self, &e).all(|c| open.get(c))
    }

    /// Whether `9Q` meets the complement of Ω (the outside of the root counts
    /// as complement).
    pub fn nonuple_meets_complement(&self, q: &DyadicCube, open: &CellSet) -> bool {
        let b9 = self.dilate(q, 9.0).expect("odd dilates are aligned");
        let e = self.interior_probe_box(&b9);
        if !self.root_box().contains_box(&e) {
            return true;
        }
        box_cells(self, &e).any(|c| !open.get(c))
    }
}

/// Iterate over the linear indices of the cells of a box clipped to the root.
pub fn box_cells<'a>(grid: &'a Grid, b: &IBox) -> impl Iterator<Item = usize> + 'a {
    let clip = b.intersect(&grid.root_box());
    let n = grid.n();
    let empty = clip.is_empty();
    let total: i64 = if empty { 0 } else { clip.volume_cells() };
    (0..total).map(move |mut r| {
        let mut c = [0i64; MAX_DIM];
        for a in (0..n).rev() {
            let w = clip.hi[a] - clip.lo[a];
            c[a] = clip.lo[a] + r % w;
            r /= w;
        }
        grid.cell_index(&c)
    })
}

/// A set of finest cells, e.g. an open region for Whitney or a subset `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSet {
    grid: Grid,
    bits: Vec<bool>,
}

impl CellSet {
    pub fn empty(grid: &Grid) -> Self {
        CellSet { grid: grid.base(), bits: vec![false; grid.cell_count()] }
    }

    pub fn full(grid: &Grid) -> Self {
        CellSet { grid: grid.base(), bits: vec![true; grid.cell_count()] }
    }

    pub fn from_cells(grid: &Grid, cells: impl IntoIterator<Item = usize>) -> Self {
        let mut s = CellSet::empty(grid);
        for c in cells {
            s.bits[c] = true;
        }
        s
    }

    pub fn from_box(grid: &Grid, b: &IBox) -> Self {
        CellSet::from_cells(grid, box_cells(grid, b))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn get(&self, c: usize) -> bool {
        self.bits[c]
    }
    pub fn set(&mut self, c: usize, v: bool) {
        self.bits[c] = v;
    }
    pub fn len(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn counts(&self) -> SummedArea {
        let v: Vec<f64> = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        SummedArea::new(&self.grid, &v)
    }
}

/// n-dimensional summed-area table over per-cell values.
#[derive(Clone, Debug)]
pub struct SummedArea {
    n: usize,
    m: i64,
    table: Vec<f64>,
}

impl SummedArea {
    pub fn new(grid: &Grid, values: &[f64]) -> Self {
        let n = grid.n();
        let m = grid.cells_per_axis();
        let w = (m + 1) as usize;
        let size = w.pow(n as u32);
        let mut table = vec![0.0; size];
        // scatter values at offset +1 on every axis
        for (idx, &v) in values.iter().enumerate() {
            let c = grid.cell_coords(idx);
            let mut t = 0usize;
            for a in 0..n {
                t = t * w + (c[a] + 1) as usize;
            }
            table[t] = v;
        }
        // running sums along each axis in turn
        let mut stride = 1usize;
        for _ in 0..n {
            for i in 0..size {
                if (i / stride) % w != 0 {
                    table[i] += table[i - stride];
                }
            }
            stride *= w;
        }
        SummedArea { n, m, table }
    }

    fn at(&self, c: &[i64]) -> f64 {
        let w = (self.m + 1) as usize;
        let mut t = 0usize;
        for a in 0..self.n {
            t = t * w + c[a] as usize;
        }
        self.table[t]
    }

    /// Sum over the cells of `b` clipped to the root.
    pub fn sum(&self, b: &IBox) -> f64 {
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for a in 0..self.n {
            lo[a] = b.lo[a].clamp(0, self.m);
            hi[a] = b.hi[a].clamp(0, self.m);
            if hi[a] <= lo[a] {
                return 0.0;
            }
        }
        let mut total = 0.0;
        for corner in 0..(1usize << self.n) {
            let mut c = [0i64; MAX_DIM];
            let mut sign = 1.0;
            for a in 0..self.n {
                if (corner >> a) & 1 == 1 {
                    c[a] = hi[a];
                } else {
                    c[a] = lo[a];
                    sign = -sign;
                }
            }
            total += sign * self.at(&c);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_bisect_interval() {
        let g = Grid::unit(1, 4).unwrap();
        let ch = g.children(&g.top()).unwrap();
        assert_eq!(ch.len(), 2);
        assert_eq!(g.cube_box(&ch[0]).lo[0], 0);
        assert_eq!(g.cube_box(&ch[0]).hi[0], 8);
        assert_eq!(g.cube_box(&ch[1]).lo[0], 8);
        assert_eq!(g.cube_box(&ch[1]).hi[0], 16);
    }

    #[test]
    fn child_counts_by_dimension() {
        for n in 1..=3 {
            let g = Grid::unit(n, 3).unwrap();
            let ch = g.children(&g.top()).unwrap();
            assert_eq!(ch.len(), 1 << n);
            for (i, c) in ch.iter().enumerate() {
                assert_eq!(g.parent(c).unwrap(), g.top());
                assert_eq!(g.child_position(c), i);
            }
            let vol: i64 = ch.iter().map(|c| g.cube_box(c).volume_cells()).sum();
            assert_eq!(vol, g.cube_box(&g.top()).volume_cells());
        }
    }

    #[test]
    fn level_overflow_at_depth() {
        let g = Grid::unit(1, 2).unwrap();
        let leaf = g.cube(2, &[1]);
        assert!(matches!(g.children(&leaf), Err(DyadError::LevelOverflow { .. })));
    }

    #[test]
    fn token_round_trip() {
        let g = Grid::unit(2, 5).unwrap().shifted(&[3, 7]).unwrap();
        let q = g.cube(3, &[1, 6]);
        let t = q.token();
        assert_eq!(t, "3:1,6,s3.7");
        assert_eq!(DyadicCube::parse_token(&t).unwrap(), q);
        assert!(DyadicCube::parse_token("3:1,6").is_err());
    }

    #[test]
    fn boundary_touching_cube_is_bad() {
        let g = Grid::unit(1, 10).unwrap();
        let p = GoodnessParams::new(2, 0.4).unwrap();
        for k in 2..=10 {
            assert!(!g.is_good(&g.cube(k, &[0]), &p));
        }
    }

    #[test]
    fn vacuous_goodness_when_r_exceeds_level() {
        let g = Grid::unit(1, 10).unwrap();
        let p = GoodnessParams::new(9, 0.4).unwrap();
        assert!(g.is_good(&g.cube(5, &[0]), &p));
    }

    #[test]
    fn dilates_are_concentric() {
        let g = Grid::unit(2, 6).unwrap();
        let q = g.cube(3, &[2, 5]);
        let b = g.dilate(&q, 3.0).unwrap();
        let c = g.cube_box(&q);
        for a in 0..2 {
            assert_eq!(b.hi[a] - b.lo[a], 3 * (c.hi[a] - c.lo[a]));
            assert_eq!(b.lo[a] + b.hi[a], c.lo[a] + c.hi[a]);
        }
        assert!(g.dilate(&g.cube(6, &[0, 0]), 2.0).is_err());
    }

    #[test]
    fn summed_area_matches_direct_sum() {
        let g = Grid::unit(2, 3).unwrap();
        let v: Vec<f64> = (0..g.cell_count()).map(|i| (i * 7 % 5) as f64).collect();
        let sat = SummedArea::new(&g, &v);
        let b = IBox { n: 2, lo: [1, 2, 0], hi: [5, 7, 0] };
        let direct: f64 = box_cells(&g, &b).map(|c| v[c]).sum();
        assert_eq!(sat.sum(&b), direct);
        let outside = IBox { n: 2, lo: [-3, -3, 0], hi: [20, 20, 0] };
        assert_eq!(sat.sum(&outside), v.iter().sum::<f64>());
    }
}
