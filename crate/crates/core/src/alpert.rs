//! Weighted Alpert wavelets on a lattice measure.
//!
//! The measure is treated as atomic: each finest cell carries its mass at the
//! cell center. Every inner product below is therefore a finite sum, and the
//! orthogonality, moment and telescoping identities hold to rounding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DyadError, Result};
use crate::lattice::{box_cells, DyadicCube, Grid, MAX_DIM};
use crate::measures::LatticeMeasure;
use crate::rng::substream;

/// Gram eigenvalues below this fraction of the largest count as lost dimension.
pub const GRAM_TOLERANCE: f64 = 1e-12;

/// Multi-indices β with |β| < κ, degree-major, then lexicographic descending.
pub fn monomials(n: usize, kappa: usize) -> Vec<[u32; MAX_DIM]> {
    let mut out = Vec::new();
    for deg in 0..kappa as u32 {
        let mut level = Vec::new();
        let mut b = [0u32; MAX_DIM];
        fill(n, 0, deg, &mut b, &mut level);
        out.extend(level);
    }
    out
}

fn fill(n: usize, a: usize, rest: u32, b: &mut [u32; MAX_DIM], out: &mut Vec<[u32; MAX_DIM]>) {
    if a == n - 1 {
        b[a] = rest;
        out.push(*b);
        return;
    }
    for k in (0..=rest).rev() {
        b[a] = k;
        fill(n, a + 1, rest - k, b, out);
    }
    b[a] = 0;
}

/// Values of the centered, scaled monomials `((x − c_Q)/ℓ(Q))^β` at `x`.
fn monomial_values(grid: &Grid, q: &DyadicCube, betas: &[[u32; MAX_DIM]], x: &[f64], out: &mut [f64]) {
    let n = grid.n();
    let c = grid.center_of(q);
    let l = grid.side_of(q);
    let mut u = [0.0; MAX_DIM];
    for a in 0..n {
        u[a] = (x[a] - c[a]) / l;
    }
    for (slot, b) in out.iter_mut().zip(betas) {
        let mut v = 1.0;
        for a in 0..n {
            v *= u[a].powi(b[a] as i32);
        }
        *slot = v;
    }
}

/// A function on `cube` that is a polynomial of degree < κ on each child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePoly {
    pub cube: DyadicCube,
    pub kappa: usize,
    /// `coeffs[child * M + β]`, M the number of monomials
    pub coeffs: Vec<f64>,
}

impl PiecewisePoly {
    fn monomial_count(&self) -> usize {
        self.coeffs.len() >> self.cube.dim()
    }

    /// Value at a point; zero outside the cube.
    pub fn eval(&self, grid: &Grid, x: &[f64]) -> f64 {
        let n = grid.n();
        let q = &self.cube;
        let Some(cell) = grid.cell_of_point(x) else { return 0.0 };
        let b = grid.cube_box(q);
        let cc = grid.cell_coords(cell);
        if !b.contains_cell(&cc) {
            return 0.0;
        }
        let half = grid.side_cells(q) / 2;
        let mut child = 0usize;
        for a in 0..n {
            child = (child << 1) | ((cc[a] - b.lo[a]) >= half.max(1)) as usize;
        }
        let m = self.monomial_count();
        let betas = monomials(n, self.kappa);
        let mut mv = vec![0.0; m];
        monomial_values(grid, q, &betas, x, &mut mv);
        self.coeffs[child * m..(child + 1) * m].iter().zip(&mv).map(|(c, v)| c * v).sum()
    }

    /// Values at the centers of the cube's cells, in `box_cells` order, paired with the cell index.
    pub fn cell_values(&self, grid: &Grid) -> Vec<(usize, f64)> {
        let cells = CubeCells::new(grid, &self.cube, self.kappa);
        cells.evaluate(&self.coeffs)
    }

    /// Sup of |P| over the cube's cell centers (the atoms of the lattice measure).
    pub fn sup_on_cells(&self, grid: &Grid, mu: &LatticeMeasure) -> f64 {
        self.cell_values(grid)
            .iter()
            .filter(|(c, _)| mu.cell_mass(*c) > 0.0)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max)
    }
}

/// Cells of a cube with their child slot and monomial values.
struct CubeCells {
    m: usize,
    cells: Vec<usize>,
    child: Vec<usize>,
    mono: Vec<f64>,
}

impl CubeCells {
    fn new(grid: &Grid, q: &DyadicCube, kappa: usize) -> Self {
        let n = grid.n();
        let betas = monomials(n, kappa);
        let m = betas.len();
        let b = grid.cube_box(q);
        let half = (grid.side_cells(q) / 2).max(1);
        let cells: Vec<usize> = box_cells(grid, &b).collect();
        let mut child = Vec::with_capacity(cells.len());
        let mut mono = vec![0.0; cells.len() * m];
        for (k, &c) in cells.iter().enumerate() {
            let cc = grid.cell_coords(c);
            let mut ch = 0usize;
            for a in 0..n {
                ch = (ch << 1) | ((cc[a] - b.lo[a]) >= half) as usize;
            }
            child.push(ch);
            let x = grid.cell_center(c);
            monomial_values(grid, q, &betas, &x[..n], &mut mono[k * m..(k + 1) * m]);
        }
        CubeCells { m, cells, child, mono }
    }

    fn evaluate(&self, coeffs: &[f64]) -> Vec<(usize, f64)> {
        let m = self.m;
        self.cells
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let blk = &coeffs[self.child[k] * m..(self.child[k] + 1) * m];
                (c, blk.iter().zip(&self.mono[k * m..(k + 1) * m]).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

/// Orthonormal basis (in the μ inner product) of V ⊖ W for one cube.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlpertBasis {
    pub cube: DyadicCube,
    pub kappa: usize,
    pub functions: Vec<PiecewisePoly>,
    pub dim: usize,
    pub gram_tolerance: f64,
    /// |Q|_μ = 0; the basis is empty
    pub zero_mass: bool,
}

// Inner product in coefficient space.
fn g_inner(g: &[f64], d: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        if a[i] == 0.0 {
            continue;
        }
        let row = &g[i * d..(i + 1) * d];
        s += a[i] * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    s
}

/// Ordered Gram–Schmidt with one reorthogonalization pass. Returns the
/// orthonormal vectors produced from `candidates[skip..]`, dropping those whose
/// residual falls under the rank cutoff.
fn gram_schmidt(g: &[f64], d: usize, candidates: &[Vec<f64>], skip: usize) -> Vec<Vec<f64>> {
    let scale = candidates.iter().map(|v| g_inner(g, d, v, v)).fold(0.0, f64::max);
    if scale <= 0.0 {
        return Vec::new();
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for (k, v) in candidates.iter().enumerate() {
        let mut w = v.clone();
        for _ in 0..2 {
            for e in &basis {
                let c = g_inner(g, d, e, &w);
                for i in 0..d {
                    w[i] -= c * e[i];
                }
            }
        }
        let nn = g_inner(g, d, &w, &w);
        if nn <= GRAM_TOLERANCE * scale {
            continue;
        }
        let inv = 1.0 / nn.sqrt();
        w.iter_mut().for_each(|x| *x *= inv);
        basis.push(w.clone());
        if k >= skip {
            out.push(w);
        }
    }
    out
}

/// Block-diagonal Gram matrix of V = span{1_{Q'} m^β} in coefficient space.
fn gram_v(cc: &CubeCells, mu: &LatticeMeasure, children: usize) -> Vec<f64> {
    let m = cc.m;
    let d = children * m;
    let mut g = vec![0.0; d * d];
    for (k, &c) in cc.cells.iter().enumerate() {
        let w = mu.cell_mass(c);
        if w == 0.0 {
            continue;
        }
        let off = cc.child[k] * m;
        let mv = &cc.mono[k * m..(k + 1) * m];
        for i in 0..m {
            for j in 0..m {
                g[(off + i) * d + off + j] += w * mv[i] * mv[j];
            }
        }
    }
    g
}

/// Weighted Alpert basis for `q` of order `kappa`.
pub fn build_alpert(mu: &LatticeMeasure, q: &DyadicCube, kappa: usize) -> Result<AlpertBasis> {
    let grid = mu.grid();
    if kappa == 0 {
        return Err(DyadError::BadParameter("kappa must be >= 1".into()));
    }
    if q.level >= grid.depth() {
        return Err(DyadError::LevelOverflow { level: q.level, depth: grid.depth() });
    }
    let n = grid.n();
    let children = 1usize << n;
    let cc = CubeCells::new(grid, q, kappa);
    let m = cc.m;
    let d = children * m;
    let mass: f64 = cc.cells.iter().map(|&c| mu.cell_mass(c)).sum();
    let empty = AlpertBasis { cube: *q, kappa, functions: Vec::new(), dim: 0, gram_tolerance: GRAM_TOLERANCE, zero_mass: true };
    if mass <= 0.0 {
        return Ok(empty);
    }
    let g = gram_v(&cc, mu, children);
    // W first (polynomials on Q), then V child-major, degree-major
    let mut cand: Vec<Vec<f64>> = Vec::with_capacity(m + d);
    for b in 0..m {
        let mut w = vec![0.0; d];
        for ch in 0..children {
            w[ch * m + b] = 1.0;
        }
        cand.push(w);
    }
    for k in 0..d {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        cand.push(v);
    }
    let vecs = gram_schmidt(&g, d, &cand, m);
    let functions: Vec<PiecewisePoly> = vecs.into_iter().map(|coeffs| PiecewisePoly { cube: *q, kappa, coeffs }).collect();
    Ok(AlpertBasis { dim: functions.len(), functions, zero_mass: false, ..empty })
}

impl AlpertBasis {
    /// `(cell, value)` tables of each basis function on the cube's cells.
    pub fn tables(&self, grid: &Grid) -> Vec<Vec<(usize, f64)>> {
        if self.functions.is_empty() {
            return Vec::new();
        }
        let cc = CubeCells::new(grid, &self.cube, self.kappa);
        self.functions.iter().map(|h| cc.evaluate(&h.coeffs)).collect()
    }

    /// Text export: cube token, function index, child index, multi-index, coefficient.
    pub fn to_table(&self, n: usize) -> String {
        let betas = monomials(n, self.kappa);
        let m = betas.len();
        let mut s = String::new();
        for (a, h) in self.functions.iter().enumerate() {
            for (k, c) in h.coeffs.iter().enumerate() {
                let b = &betas[k % m];
                let bi: Vec<String> = b[..n].iter().map(|v| v.to_string()).collect();
                writeln!(s, "{}\t{a}\t{}\t{}\t{c:e}", self.cube.token(), k / m, bi.join(",")).unwrap();
            }
        }
        s
    }

    /// Linear combination Σ c_a h_a.
    pub fn combine(&self, coeffs: &[f64]) -> PiecewisePoly {
        let d = self.functions.first().map_or(0, |h| h.coeffs.len());
        let mut out = vec![0.0; d];
        for (h, c) in self.functions.iter().zip(coeffs) {
            for (o, v) in out.iter_mut().zip(&h.coeffs) {
                *o += c * v;
            }
        }
        PiecewisePoly { cube: self.cube, kappa: self.kappa, coeffs: out }
    }
}

/// Coefficients `⟨f, h_a⟩_μ` of the cube's Alpert projection.
pub fn project_delta(basis: &AlpertBasis, f: &[f64], mu: &LatticeMeasure) -> Vec<f64> {
    basis
        .tables(mu.grid())
        .iter()
        .map(|t| t.iter().map(|&(c, v)| f[c] * v * mu.cell_mass(c)).sum())
        .collect()
}

/// `△_{Q;κ} f` sampled on the cells of Q.
pub fn delta_values(basis: &AlpertBasis, f: &[f64], mu: &LatticeMeasure) -> Vec<(usize, f64)> {
    let coeffs = project_delta(basis, f, mu);
    if basis.functions.is_empty() {
        return box_cells(mu.grid(), &mu.grid().cube_box(&basis.cube)).map(|c| (c, 0.0)).collect();
    }
    basis.combine(&coeffs).cell_values(mu.grid())
}

/// `𝔼_{Q;κ} f`: μ-orthogonal projection onto polynomials of degree < κ on Q,
/// returned with identical blocks on every child.
pub fn project_e(mu: &LatticeMeasure, q: &DyadicCube, kappa: usize, f: &[f64]) -> Result<PiecewisePoly> {
    let grid = mu.grid();
    if kappa == 0 {
        return Err(DyadError::BadParameter("kappa must be >= 1".into()));
    }
    let n = grid.n();
    let cc = CubeCells::new(grid, q, kappa);
    let m = cc.m;
    let mass: f64 = cc.cells.iter().map(|&c| mu.cell_mass(c)).sum();
    if mass <= 0.0 {
        return Err(DyadError::ZeroMassCube(q.token()));
    }
    // Gram of the monomials on Q and the moments of f
    let mut g = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for (k, &c) in cc.cells.iter().enumerate() {
        let w = mu.cell_mass(c);
        if w == 0.0 {
            continue;
        }
        let mv = &cc.mono[k * m..(k + 1) * m];
        for i in 0..m {
            rhs[i] += w * f[c] * mv[i];
            for j in 0..m {
                g[i * m + j] += w * mv[i] * mv[j];
            }
        }
    }
    let cand: Vec<Vec<f64>> = (0..m).map(|b| { let mut e = vec![0.0; m]; e[b] = 1.0; e }).collect();
    let onb = gram_schmidt(&g, m, &cand, 0);
    let mut poly = vec![0.0; m];
    for e in &onb {
        let c: f64 = e.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        for i in 0..m {
            poly[i] += c * e[i];
        }
    }
    let children = 1usize << n;
    let mut coeffs = Vec::with_capacity(children * m);
    for _ in 0..children {
        coeffs.extend_from_slice(&poly);
    }
    Ok(PiecewisePoly { cube: *q, kappa, coeffs })
}

/// Full Alpert expansion of `f` below `top`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveletExpansion {
    pub top: DyadicCube,
    pub kappa: usize,
    /// `𝔼_{top;κ} f`
    pub base: PiecewisePoly,
    pub coefficients: BTreeMap<DyadicCube, Vec<f64>>,
    #[serde(skip)]
    bases: BTreeMap<DyadicCube, AlpertBasis>,
}

/// All Alpert bases for the cubes of `top`'s tree above the finest level.
pub fn build_tree(mu: &LatticeMeasure, top: &DyadicCube, kappa: usize) -> Result<BTreeMap<DyadicCube, AlpertBasis>> {
    let grid = mu.grid();
    if top.level >= grid.depth() {
        return Ok(BTreeMap::new());
    }
    let cubes = grid.descendants(top, grid.depth() - 1);
    let bases: Vec<Result<(DyadicCube, AlpertBasis)>> =
        cubes.par_iter().map(|q| build_alpert(mu, q, kappa).map(|b| (*q, b))).collect();
    bases.into_iter().collect()
}

pub fn expand(mu: &LatticeMeasure, kappa: usize, f: &[f64], top: &DyadicCube) -> Result<WaveletExpansion> {
    let bases = build_tree(mu, top, kappa)?;
    expand_with(mu, kappa, f, top, bases)
}

/// As [`expand`], reusing prebuilt bases.
pub fn expand_with(
    mu: &LatticeMeasure,
    kappa: usize,
    f: &[f64],
    top: &DyadicCube,
    bases: BTreeMap<DyadicCube, AlpertBasis>,
) -> Result<WaveletExpansion> {
    let base = project_e(mu, top, kappa, f)?;
    let coefficients = bases.iter().map(|(q, b)| (*q, project_delta(b, f, mu))).collect();
    Ok(WaveletExpansion { top: *top, kappa, base, coefficients, bases })
}

impl WaveletExpansion {
    pub fn bases(&self) -> &BTreeMap<DyadicCube, AlpertBasis> {
        &self.bases
    }

    /// `Σ_a c_a h_a` for the cubes accepted by `keep`, plus the base projection
    /// when `with_base`. Cell values over the whole lattice.
    pub fn partial(&self, grid: &Grid, with_base: bool, keep: impl Fn(&DyadicCube) -> bool) -> Vec<f64> {
        let mut out = vec![0.0; grid.cell_count()];
        if with_base {
            for (c, v) in self.base.cell_values(grid) {
                out[c] += v;
            }
        }
        for (q, b) in &self.bases {
            if !keep(q) || b.functions.is_empty() {
                continue;
            }
            let coeffs = &self.coefficients[q];
            for (c, v) in b.combine(coeffs).cell_values(grid) {
                out[c] += v;
            }
        }
        out
    }

    pub fn reconstruct(&self, grid: &Grid) -> Vec<f64> {
        self.partial(grid, true, |_| true)
    }

    /// `‖𝔼_top f‖² + Σ_Q Σ_a c_a²`.
    pub fn energy(&self, mu: &LatticeMeasure) -> f64 {
        let base: f64 = self.base.cell_values(mu.grid()).iter().map(|&(c, v)| v * v * mu.cell_mass(c)).sum();
        base + self.coefficients.values().flatten().map(|c| c * c).sum::<f64>()
    }
}

/// `max |⟨h_a, h_b⟩_μ − δ_ab|` over the basis.
pub fn gram_residual(basis: &AlpertBasis, mu: &LatticeMeasure) -> f64 {
    let t = basis.tables(mu.grid());
    let mut worst: f64 = 0.0;
    for (a, ta) in t.iter().enumerate() {
        for (b, tb) in t.iter().enumerate().skip(a) {
            let ip: f64 = ta.iter().zip(tb).map(|(&(c, x), &(_, y))| x * y * mu.cell_mass(c)).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((ip - target).abs());
        }
    }
    worst
}

/// `max |∫ h_a m_Q^β dμ|` over the basis and |β| < κ, with scaled monomials.
pub fn moment_residual(basis: &AlpertBasis, mu: &LatticeMeasure) -> f64 {
    let grid = mu.grid();
    let n = grid.n();
    let c = grid.center_of(&basis.cube);
    let l = grid.side_of(&basis.cube);
    let betas = monomials(n, basis.kappa);
    let mut worst: f64 = 0.0;
    for t in basis.tables(grid) {
        for b in &betas {
            let m: f64 = t
                .iter()
                .map(|&(cell, v)| {
                    let x = grid.cell_center(cell);
                    let mono: f64 = (0..n).map(|a| ((x[a] - c[a]) / l).powi(b[a] as i32)).product();
                    v * mono * mu.cell_mass(cell)
                })
                .sum();
            worst = worst.max(m.abs());
        }
    }
    worst
}

/// Max over the charged cells of Q of
/// `|Σ_{Q⊊I⊆P} △_I f − (𝔼_Q f − 𝔼_P f)|`.
pub fn telescoping_check(mu: &LatticeMeasure, kappa: usize, p: &DyadicCube, q: &DyadicCube, f: &[f64]) -> Result<f64> {
    let grid = mu.grid();
    if !(grid.contains(p, q) && q.level > p.level) {
        return Err(DyadError::PreconditionViolated(format!("{} is not strictly inside {}", q.token(), p.token())));
    }
    let eq = project_e(mu, q, kappa, f)?;
    let ep = project_e(mu, p, kappa, f)?;
    let mut lhs = vec![0.0; grid.cell_count()];
    let mut i = grid.parent(q).expect("q is below p");
    loop {
        let b = build_alpert(mu, &i, kappa)?;
        for (c, v) in delta_values(&b, f, mu) {
            lhs[c] += v;
        }
        if i == *p {
            break;
        }
        i = grid.parent(&i).expect("p is an ancestor");
    }
    let epv: BTreeMap<usize, f64> = ep.cell_values(grid).into_iter().collect();
    Ok(eq
        .cell_values(grid)
        .into_iter()
        .filter(|(c, _)| mu.cell_mass(*c) > 0.0)
        .map(|(c, v)| (lhs[c] - (v - epv[&c])).abs())
        .fold(0.0, f64::max))
}

/// `(‖𝔼_Q f‖_∞ / E_Q|f|, ‖𝔼_Q f‖²_∞ |Q|_μ / ‖𝔼_Q f‖²_{L²(μ)})`, sup over charged cells.
pub fn sup_norm_diag(mu: &LatticeMeasure, q: &DyadicCube, kappa: usize, f: &[f64]) -> Result<(f64, f64)> {
    let grid = mu.grid();
    let mass = mu.cube_mass(q);
    if mass <= 0.0 {
        return Err(DyadError::ZeroMassCube(q.token()));
    }
    let avg_abs: f64 = box_cells(grid, &grid.cube_box(q)).map(|c| f[c].abs() * mu.cell_mass(c)).sum::<f64>() / mass;
    if avg_abs <= 0.0 {
        return Err(DyadError::ZeroAverage);
    }
    let e = project_e(mu, q, kappa, f)?;
    let vals = e.cell_values(grid);
    let sup = vals.iter().filter(|(c, _)| mu.cell_mass(*c) > 0.0).map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let l2: f64 = vals.iter().map(|&(c, v)| v * v * mu.cell_mass(c)).sum();
    let second = if l2 > 0.0 { sup * sup * mass / l2 } else { 1.0 };
    Ok((sup / avg_abs, second))
}

/// Divergence threshold above which the nondegeneracy constant is flagged.
pub const NONDEGENERACY_FLAG: f64 = 1e6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub c_hat: f64,
    pub witness: Option<String>,
    pub cubes: usize,
    pub polys_per_cube: usize,
    /// c_hat above [`NONDEGENERACY_FLAG`] (or infinite)
    pub flagged: bool,
}

/// Grid of points (closed cube, scaled coordinates in [−½, ½]) used for sup_Q |P|.
fn sup_grid(n: usize) -> Vec<[f64; MAX_DIM]> {
    let k = match n {
        1 => 65,
        2 => 17,
        _ => 9,
    };
    let total = (k as usize).pow(n as u32);
    (0..total)
        .map(|mut r| {
            let mut u = [0.0; MAX_DIM];
            for a in 0..n {
                u[a] = -0.5 + (r % k) as f64 / (k - 1) as f64;
                r /= k;
            }
            u
        })
        .collect()
}

fn eval_scaled(coeffs: &[f64], betas: &[[u32; MAX_DIM]], u: &[f64], n: usize) -> f64 {
    coeffs
        .iter()
        .zip(betas)
        .map(|(c, b)| c * (0..n).map(|a| u[a].powi(b[a] as i32)).product::<f64>())
        .sum()
}

/// `|Q|_μ / ∫_Q |P|² dμ` for a polynomial (coefficients in scaled monomials)
/// normalized to sup over the closed cube = 1. `None` when |Q|_μ = 0.
pub fn nondegeneracy_ratio(mu: &LatticeMeasure, q: &DyadicCube, kappa: usize, coeffs: &[f64]) -> Option<f64> {
    let grid = mu.grid();
    let n = grid.n();
    let betas = monomials(n, kappa);
    let mass = mu.cube_mass(q);
    if mass <= 0.0 {
        return None;
    }
    let sup = sup_grid(n).iter().map(|u| eval_scaled(coeffs, &betas, u, n).abs()).fold(0.0, f64::max);
    if sup <= 0.0 {
        return None;
    }
    let c = grid.center_of(q);
    let l = grid.side_of(q);
    let mut integral = 0.0;
    for cell in box_cells(grid, &grid.cube_box(q)) {
        let w = mu.cell_mass(cell);
        if w == 0.0 {
            continue;
        }
        let x = grid.cell_center(cell);
        let mut u = [0.0; MAX_DIM];
        for a in 0..n {
            u[a] = (x[a] - c[a]) / l;
        }
        let v = eval_scaled(coeffs, &betas, &u, n) / sup;
        integral += v * v * w;
    }
    Some(crate::measures::safe_ratio(mass, integral))
}

/// Sampled nondegeneracy constant over `cubes`: for each cube, `P ≡ 1`, the
/// linear polynomials vanishing at the heaviest cell, and `poly_samples`
/// random coefficient vectors.
pub fn nondegeneracy_constant(
    mu: &LatticeMeasure,
    kappa: usize,
    cubes: &[DyadicCube],
    poly_samples: usize,
    seed: u64,
) -> NondegeneracyReport {
    let grid = mu.grid();
    let n = grid.n();
    let betas = monomials(n, kappa);
    let m = betas.len();
    let results: Vec<(f64, String)> = cubes
        .par_iter()
        .map(|q| {
            let mut rng = substream(seed, &format!("nondeg/{}", q.token()));
            let mut polys: Vec<Vec<f64>> = Vec::new();
            let mut one = vec![0.0; m];
            one[0] = 1.0;
            polys.push(one);
            if kappa >= 2 {
                // heaviest charged cell, in scaled coordinates
                let heavy = box_cells(grid, &grid.cube_box(q))
                    .max_by(|&a, &b| mu.cell_mass(a).partial_cmp(&mu.cell_mass(b)).unwrap().then(b.cmp(&a)));
                if let Some(h) = heavy {
                    let x = grid.cell_center(h);
                    let c = grid.center_of(q);
                    let l = grid.side_of(q);
                    for a in 0..n {
                        let z = (x[a] - c[a]) / l;
                        let mut p = vec![0.0; m];
                        p[0] = -z;
                        let lin = betas.iter().position(|b| b[a] == 1 && b.iter().sum::<u32>() == 1).expect("linear monomial");
                        p[lin] = 1.0;
                        polys.push(p);
                    }
                }
            }
            for _ in 0..poly_samples {
                polys.push((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            let mut best = (0.0f64, String::new());
            for (k, p) in polys.iter().enumerate() {
                if let Some(r) = nondegeneracy_ratio(mu, q, kappa, p) {
                    if r > best.0 {
                        best = (r, format!("{} poly#{k}", q.token()));
                    }
                }
            }
            best
        })
        .collect();
    let mut c_hat = 0.0f64;
    let mut witness = None;
    for (r, w) in results {
        if r > c_hat {
            c_hat = r;
            witness = Some(w);
        }
    }
    NondegeneracyReport {
        c_hat,
        witness,
        cubes: cubes.len(),
        polys_per_cube: poly_samples,
        flagged: !(c_hat <= NONDEGENERACY_FLAG),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 3);
        assert_eq!(monomials(2, 3).len(), 6);
        assert_eq!(monomials(3, 2).len(), 4);
        assert_eq!(monomials(2, 2)[0], [0, 0, 0]);
    }

    #[test]
    fn haar_on_unit_interval() {
        let g = Grid::unit(1, 4).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let b = build_alpert(&mu, &g.top(), 1).unwrap();
        assert_eq!(b.dim, 1);
        let t = &b.tables(&g)[0];
        for &(c, v) in t {
            let want = if c < 8 { 1.0 } else { -1.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_sided_measure_has_no_haar_function() {
        let g = Grid::unit(1, 4).unwrap();
        let d: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let mu = LatticeMeasure::from_density(&g, d).unwrap();
        assert_eq!(build_alpert(&mu, &g.top(), 1).unwrap().dim, 0);
    }

    #[test]
    fn kappa_two_lebesgue_dimension() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        assert_eq!(build_alpert(&mu, &g.top(), 2).unwrap().dim, 2);
        assert_eq!(build_alpert(&mu, &g.top(), 3).unwrap().dim, 3);
    }

    #[test]
    fn project_e_of_square() {
        // best linear fit of x² on [0,1) in the midpoint-rule measure
        let g = Grid::unit(1, 8).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let f: Vec<f64> = (0..256).map(|i| g.cell_center(i)[0].powi(2)).collect();
        let e = project_e(&mu, &g.top(), 2, &f).unwrap();
        for x in [0.1, 0.5, 0.9] {
            assert!((e.eval(&g, &[x]) - (x - 1.0 / 6.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_has_zero_wavelet_coefficients() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = crate::measures::cascade(&g, 0.3, 1).unwrap();
        let b = build_alpert(&mu, &g.top(), 2).unwrap();
        for c in project_delta(&b, &vec![3.0; 32], &mu) {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn lebesgue_nondegeneracy_linear() {
        let g = Grid::unit(1, 6).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        // 2x − 1 on [0,1) is 2u in scaled coordinates
        let r = nondegeneracy_ratio(&mu, &g.top(), 2, &[0.0, 2.0]).unwrap();
        let nn = 64.0f64;
        assert!((r - 3.0 / (1.0 - 1.0 / (nn * nn))).abs() < 1e-9);
        assert_eq!(nondegeneracy_ratio(&mu, &g.top(), 2, &[1.0, 0.0]), Some(1.0));
    }
}
