//! Fractional CZ kernels, truncations, and their lattice discretizations,
//! plus the maximal, fractional-integral and Poisson operators.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DyadError, Result};
use crate::lattice::{box_cells, DyadicCube, Grid, MAX_DIM};
use crate::measures::LatticeMeasure;
use crate::rng::substream;

/// Default cap on dense matrix entries.
pub const DEFAULT_MATRIX_BUDGET: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    /// 1/(x−y), n = 1
    Hilbert,
    /// (x_j − y_j)/|x−y|^{n+1−α}
    Riesz { component: usize },
    /// |x−y|^{α−n}
    FracInt,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub alpha: f64,
    pub n: usize,
}

impl KernelSpec {
    pub fn hilbert() -> Self {
        KernelSpec { kind: KernelKind::Hilbert, alpha: 0.0, n: 1 }
    }

    pub fn frac_int(n: usize, alpha: f64) -> Self {
        KernelSpec { kind: KernelKind::FracInt, alpha, n }
    }

    pub fn zero(n: usize) -> Self {
        KernelSpec { kind: KernelKind::Zero, alpha: 0.0, n }
    }

    /// `hilbert`, `riesz:j[:alpha]`, `fracint:alpha`, `zero`.
    pub fn parse(s: &str, n: usize) -> Result<Self> {
        let bad = || DyadError::BadParameter(format!("bad kernel spec '{s}'"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let k = match parts[0] {
            "hilbert" => KernelSpec::hilbert(),
            "zero" => KernelSpec::zero(n),
            "fracint" => KernelSpec::frac_int(n, num(1)?),
            "riesz" => {
                let j = num(1)? as usize;
                let alpha = if parts.len() > 2 { num(2)? } else { 0.0 };
                KernelSpec { kind: KernelKind::Riesz { component: j }, alpha, n }
            }
            _ => return Err(bad()),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < self.n as f64) {
            return Err(DyadError::BadParameter(format!("kernel alpha {} outside [0, n)", self.alpha)));
        }
        match self.kind {
            KernelKind::Hilbert if self.n != 1 => Err(DyadError::BadParameter("the Hilbert kernel needs n = 1".into())),
            KernelKind::Hilbert if self.alpha != 0.0 => Err(DyadError::BadParameter("the Hilbert kernel has alpha = 0".into())),
            KernelKind::Riesz { component } if component >= self.n => {
                Err(DyadError::BadParameter(format!("riesz component {component} >= n")))
            }
            KernelKind::FracInt if self.alpha == 0.0 => {
                Err(DyadError::BadParameter("fracint needs alpha > 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            KernelKind::Hilbert => "hilbert".into(),
            KernelKind::Riesz { component } => format!("riesz:{component}:{}", self.alpha),
            KernelKind::FracInt => format!("fracint:{}", self.alpha),
            KernelKind::Zero => "zero".into(),
        }
    }

    /// Size constant C_CZ: every built-in kernel satisfies |K| ≤ |x−y|^{α−n}.
    pub fn czc(&self) -> f64 {
        match self.kind {
            KernelKind::Zero => 0.0,
            _ => 1.0,
        }
    }

    pub fn is_antisymmetric(&self) -> bool {
        matches!(self.kind, KernelKind::Hilbert | KernelKind::Riesz { .. } | KernelKind::Zero)
    }

    /// K(x, y); zero on the diagonal.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.n;
        let mut d2 = 0.0;
        for a in 0..n {
            d2 += (x[a] - y[a]) * (x[a] - y[a]);
        }
        if d2 == 0.0 {
            return 0.0;
        }
        let nf = n as f64;
        match self.kind {
            KernelKind::Hilbert => 1.0 / (x[0] - y[0]),
            KernelKind::Riesz { component } => (x[component] - y[component]) / d2.sqrt().powf(nf + 1.0 - self.alpha),
            KernelKind::FracInt => d2.sqrt().powf(self.alpha - nf),
            KernelKind::Zero => 0.0,
        }
    }

    /// Vector form used by the ellipticity probe: the largest component modulus.
    fn eval_vector_abs(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Riesz { .. } => (0..self.n)
                .map(|j| {
                    let k = KernelSpec { kind: KernelKind::Riesz { component: j }, ..*self };
                    k.eval(x, y).abs()
                })
                .fold(0.0, f64::max),
            _ => self.eval(x, y).abs(),
        }
    }

    /// K^*(x, y) = K(y, x).
    pub fn eval_adjoint(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval(y, x)
    }
}

/// C² smoothstep t³(10 − 15t + 6t²) on [0,1].
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Ramp width as a fraction of each radius.
pub const RAMP_WIDTH: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    /// inner radius, physical units
    pub delta: f64,
    /// outer radius, physical units
    pub r: f64,
    /// smooth ramps when true, sharp annulus `δ < |x−y| < R` otherwise
    pub smooth: bool,
}

impl TruncationSpec {
    pub fn smooth(delta: f64, r: f64) -> Self {
        TruncationSpec { delta, r, smooth: true }
    }
    pub fn rough(delta: f64, r: f64) -> Self {
        TruncationSpec { delta, r, smooth: false }
    }

    /// Multiplier applied to K at distance `d`. `R ≤ δ` gives the zero operator.
    pub fn weight(&self, d: f64) -> f64 {
        if self.r <= self.delta || d <= self.delta || d >= self.r {
            return 0.0;
        }
        if !self.smooth {
            return 1.0;
        }
        let inner = smoothstep((d - self.delta) / (self.delta * RAMP_WIDTH));
        let outer = smoothstep((self.r - d) / (self.r * RAMP_WIDTH));
        inner * outer
    }
}

/// A truncated kernel realized on lattice cells: `T_σ f(x_i) = Σ_j K(x_i,y_j) w_ij f_j |cell_j|_σ`.
#[derive(Clone, Debug)]
pub struct DiscretizedOperator {
    kernel: KernelSpec,
    trunc: TruncationSpec,
    grid: Grid,
    /// truncated kernel values, row-major (target, source), diagonal zero
    k: Vec<f64>,
    /// source measure cell masses
    sigma: Vec<f64>,
    adjoint: bool,
}

impl DiscretizedOperator {
    pub fn build(kernel: &KernelSpec, trunc: &TruncationSpec, sigma: &LatticeMeasure, budget: usize) -> Result<Self> {
        kernel.validate()?;
        let grid = sigma.grid().clone();
        if kernel.n != grid.n() {
            return Err(DyadError::BadParameter("kernel and lattice dimensions differ".into()));
        }
        let cells = grid.cell_count();
        let entries = cells.saturating_mul(cells);
        if entries > budget {
            return Err(DyadError::BudgetExceeded { entries, budget });
        }
        if trunc.r > trunc.delta && trunc.delta < 2.0 * grid.cell_diameter() * (1.0 - 1e-12) {
            return Err(DyadError::PreconditionViolated(format!(
                "delta={} must be at least two cell diameters ({})",
                trunc.delta,
                2.0 * grid.cell_diameter()
            )));
        }
        let centers: Vec<[f64; MAX_DIM]> = (0..cells).map(|i| grid.cell_center(i)).collect();
        let n = grid.n();
        let mut k = vec![0.0; entries];
        k.par_chunks_mut(cells).enumerate().for_each(|(i, row)| {
            let x = &centers[i];
            for (j, slot) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                let y = &centers[j];
                let d = (0..n).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt();
                let w = trunc.weight(d);
                if w != 0.0 {
                    *slot = w * kernel.eval(x, y);
                }
            }
        });
        Ok(DiscretizedOperator { kernel: *kernel, trunc: *trunc, grid, k, sigma: sigma.masses().to_vec(), adjoint: false })
    }

    /// The adjoint `T*_ω`: kernel K^*(x,y) = K(y,x) with source measure ω.
    pub fn adjoint(&self, omega: &LatticeMeasure) -> Result<Self> {
        if omega.grid() != &self.grid {
            return Err(DyadError::PreconditionViolated("measures live on different lattices".into()));
        }
        let m = self.grid.cell_count();
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                k[j * m + i] = self.k[i * m + j];
            }
        }
        Ok(DiscretizedOperator {
            kernel: self.kernel,
            trunc: self.trunc,
            grid: self.grid.clone(),
            k,
            sigma: omega.masses().to_vec(),
            adjoint: !self.adjoint,
        })
    }

    /// The same kernel and truncation over a different source measure.
    pub fn with_source(&self, sigma: &LatticeMeasure) -> Self {
        DiscretizedOperator { sigma: sigma.masses().to_vec(), ..self.clone() }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    pub fn truncation(&self) -> &TruncationSpec {
        &self.trunc
    }
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn size(&self) -> usize {
        self.sigma.len()
    }
    pub fn is_adjoint(&self) -> bool {
        self.adjoint
    }
    pub fn source_masses(&self) -> &[f64] {
        &self.sigma
    }

    /// Truncated kernel value between cells (target `i`, source `j`).
    pub fn kernel_entry(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.size() + j]
    }

    /// Matrix entry including the source mass.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel_entry(i, j) * self.sigma[j]
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let m = self.size();
        let fs: Vec<f64> = f.iter().zip(&self.sigma).map(|(a, b)| a * b).collect();
        self.k.par_chunks(m).map(|row| row.iter().zip(&fs).map(|(k, v)| k * v).sum()).collect()
    }

    /// `⟨T_σ f, g⟩_ω`.
    pub fn bilinear(&self, f: &[f64], g: &[f64], omega: &LatticeMeasure) -> f64 {
        let tf = self.apply(f);
        tf.iter().zip(g).zip(omega.masses()).map(|((a, b), w)| a * b * w).sum()
    }

    /// `D_ω^{1/2} K D_σ^{1/2}` as a dense row-major matrix; its spectral norm is
    /// the L²(σ) → L²(ω) norm. Zero-mass cells contribute zero rows/columns.
    pub fn weighted_matrix(&self, omega: &LatticeMeasure) -> Vec<f64> {
        let m = self.size();
        let so: Vec<f64> = omega.masses().iter().map(|v| v.sqrt()).collect();
        let ss: Vec<f64> = self.sigma.iter().map(|v| v.sqrt()).collect();
        let mut b = vec![0.0; m * m];
        b.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for j in 0..m {
                row[j] = so[i] * self.k[i * m + j] * ss[j];
            }
        });
        b
    }
}

// ---- maximal truncation, M^α, I_α ---------------------------------------------

fn dist(x: &[f64], y: &[f64], n: usize) -> f64 {
    (0..n).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt()
}

/// `T_♭ (fσ)(x) = max_{(ε,R) in ladder} |∫_{ε<|x−y|<R} K(x,y) f dσ|` at the center
/// of cell `x`. A lower bound for the supremum over all truncations.
pub fn maximal_truncation(kernel: &KernelSpec, sigma: &LatticeMeasure, f: &[f64], x: usize, ladder: &[(f64, f64)]) -> Result<f64> {
    if ladder.is_empty() {
        return Err(DyadError::EmptyLadder);
    }
    let g = sigma.grid();
    let floor = 2.0 * g.cell_diameter() * (1.0 - 1e-12);
    if let Some(&(e, _)) = ladder.iter().find(|(e, _)| *e < floor) {
        return Err(DyadError::PreconditionViolated(format!("ladder radius {e} below two cell diameters")));
    }
    let xc = g.cell_center(x);
    let n = g.n();
    let terms: Vec<(f64, f64)> = (0..g.cell_count())
        .filter(|&j| j != x && f[j] != 0.0)
        .map(|j| {
            let y = g.cell_center(j);
            (dist(&xc, &y, n), kernel.eval(&xc, &y) * f[j] * sigma.cell_mass(j))
        })
        .collect();
    Ok(ladder
        .iter()
        .map(|&(e, r)| {
            let t = TruncationSpec::rough(e, r);
            terms.iter().map(|&(d, v)| t.weight(d) * v).sum::<f64>().abs()
        })
        .fold(0.0, f64::max))
}

/// `M^α(fσ)` at every cell: max over the dyadic cubes containing the cell of
/// `|Q|^{α/n−1} ∫_Q |f| dσ`.
pub fn frac_maximal_all(sigma: &LatticeMeasure, f: &[f64], alpha: f64) -> Vec<f64> {
    frac_maximal_all_shifted(sigma, f, alpha, &[])
}

/// As [`frac_maximal_all`], additionally maximizing over the cubes of the given
/// shifted grids (shifts in cells). Shifted cubes are clipped to the root for
/// the integral but keep their full volume, so values stay lower bounds.
pub fn frac_maximal_all_shifted(sigma: &LatticeMeasure, f: &[f64], alpha: f64, shifts: &[Vec<i64>]) -> Vec<f64> {
    let g = sigma.grid();
    let n = g.n();
    let abs_mass: Vec<f64> = f.iter().zip(sigma.masses()).map(|(v, m)| v.abs() * m).collect();
    let mut grids = vec![g.clone()];
    for s in shifts {
        if let Ok(sg) = g.shifted(s) {
            grids.push(sg);
        }
    }
    let abs_measure = crate::lattice::SummedArea::new(g, &abs_mass);
    let mut best = vec![0.0f64; g.cell_count()];
    for gr in &grids {
        for level in 0..=g.depth() {
            let vol = g.side().powi(n as i32) * 0.5f64.powi((level as usize * n) as i32);
            let factor = vol.powf(alpha / n as f64 - 1.0);
            let side = 1i64 << (g.depth() - level);
            let shift = gr.shift();
            // each cell's containing cube at this level, via integer division
            let vals: Vec<f64> = (0..g.cell_count())
                .into_par_iter()
                .map(|c| {
                    let cc = g.cell_coords(c);
                    let mut idx = [0i64; MAX_DIM];
                    for a in 0..n {
                        let s = shift.get(a).copied().unwrap_or(0);
                        idx[a] = (cc[a] - s).div_euclid(side);
                    }
                    let q = gr.cube(level, &idx[..n]);
                    factor * abs_measure.sum(&gr.cube_box(&q))
                })
                .collect();
            for (b, v) in best.iter_mut().zip(vals) {
                *b = b.max(v);
            }
        }
    }
    best
}

/// `M^α(fσ)` at one cell.
pub fn frac_maximal(sigma: &LatticeMeasure, f: &[f64], x: usize, alpha: f64) -> f64 {
    let g = sigma.grid();
    let n = g.n();
    let coords = g.cell_coords(x);
    let mut best: f64 = 0.0;
    for level in 0..=g.depth() {
        let side = 1i64 << (g.depth() - level);
        let idx: Vec<i64> = (0..n).map(|a| coords[a] / side).collect();
        let q = g.cube(level, &idx);
        let s: f64 = box_cells(g, &g.cube_box(&q)).map(|c| f[c].abs() * sigma.cell_mass(c)).sum();
        best = best.max(g.volume_of(&q).powf(alpha / n as f64 - 1.0) * s);
    }
    best
}

/// `∫_cell |x − y|^{α−n} dy` for `x` in the cell `[a, b)^n`: closed form for
/// n = 1, 4ⁿ-subcell midpoint rule otherwise.
pub fn cell_potential_at(grid: &Grid, cell: usize, x: &[f64], alpha: f64) -> f64 {
    let n = grid.n();
    let h = grid.cell_side();
    let lo: Vec<f64> = (0..n).map(|a| grid.point(a, grid.cell_coords(cell)[a] as f64)).collect();
    if n == 1 {
        let (l, r) = (x[0] - lo[0], lo[0] + h - x[0]);
        return (l.max(0.0).powf(alpha) + r.max(0.0).powf(alpha)) / alpha;
    }
    let sub = h / 4.0;
    let mut s = 0.0;
    for k in 0..(1usize << (2 * n)) {
        let mut d2 = 0.0;
        for a in 0..n {
            let off = (k >> (2 * a)) & 3;
            let y = lo[a] + (off as f64 + 0.5) * sub;
            d2 += (x[a] - y).powi(2);
        }
        if d2 > 0.0 {
            s += d2.sqrt().powf(alpha - n as f64);
        }
    }
    s * sub.powi(n as i32)
}

/// Self-cell potential at a cell center.
pub fn self_cell_potential(grid: &Grid, alpha: f64) -> f64 {
    let c = grid.cell_center(0);
    cell_potential_at(grid, 0, &c[..grid.n()], alpha)
}

/// `I_α ν(x) = ∫ |x−y|^{α−n} dν(y)` for a (signed) cell-mass vector `nu`.
/// The cell containing `x` contributes density × the exact cell integral.
pub fn frac_integral(grid: &Grid, nu: &[f64], x: &[f64], alpha: f64) -> f64 {
    let n = grid.n();
    let home = grid.cell_of_point(x);
    let mut s = 0.0;
    for (j, &m) in nu.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        if Some(j) == home {
            s += m / grid.cell_volume() * cell_potential_at(grid, j, x, alpha);
        } else {
            let y = grid.cell_center(j);
            s += m * dist(x, &y, n).powf(alpha - n as f64);
        }
    }
    s
}

/// `I_α ν` at every cell center.
pub fn frac_integral_all(grid: &Grid, nu: &[f64], alpha: f64) -> Vec<f64> {
    let n = grid.n();
    let selfp = self_cell_potential(grid, alpha) / grid.cell_volume();
    let centers: Vec<[f64; MAX_DIM]> = (0..grid.cell_count()).map(|i| grid.cell_center(i)).collect();
    let support: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] != 0.0).collect();
    (0..grid.cell_count())
        .into_par_iter()
        .map(|i| {
            let x = &centers[i];
            support
                .iter()
                .map(|&j| {
                    if i == j {
                        nu[j] * selfp
                    } else {
                        nu[j] * dist(x, &centers[j], n).powf(alpha - n as f64)
                    }
                })
                .sum()
        })
        .collect()
}

// ---- Poisson integrals --------------------------------------------------------

/// Reproducing Poisson integral `𝒫^α(Q, μ)` over the root (tail truncated).
pub fn poisson(grid: &Grid, mu: &[f64], q: &DyadicCube, alpha: f64) -> f64 {
    let n = grid.n();
    let l = grid.side_of(q);
    let c = grid.center_of(q);
    mu.iter()
        .enumerate()
        .filter(|(_, m)| **m != 0.0)
        .map(|(j, m)| {
            let d = dist(&grid.cell_center(j), &c, n);
            (l / ((l + d) * (l + d))).powf(n as f64 - alpha) * m
        })
        .sum()
}

/// `P_m^α(Q, μ) = ∫ ℓ^m / (ℓ + |y − c_Q|)^{n+m−α} dμ` over the root.
pub fn poisson_m(grid: &Grid, mu: &[f64], q: &DyadicCube, alpha: f64, m: u32) -> f64 {
    let n = grid.n();
    let l = grid.side_of(q);
    let c = grid.center_of(q);
    let e = n as f64 + m as f64 - alpha;
    let lm = l.powi(m as i32);
    mu.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| lm / (l + dist(&grid.cell_center(j), &c, n)).powf(e) * v)
        .sum()
}

/// `min |K(x, x+tu)| t^{n−α}` over a t ladder and sampled unit directions.
pub fn ellipticity_probe(kernel: &KernelSpec, t_ladder: &[f64], directions: usize, seed: u64) -> f64 {
    let n = kernel.n;
    let mut rng = substream(seed, "ellipticity");
    let x = [0.0; MAX_DIM];
    let mut dirs: Vec<[f64; MAX_DIM]> = Vec::new();
    if n == 1 {
        dirs.push([1.0, 0.0, 0.0]);
        dirs.push([-1.0, 0.0, 0.0]);
    } else {
        for _ in 0..directions.max(1) {
            let mut u = [0.0; MAX_DIM];
            let mut norm = 0.0;
            while norm < 1e-6 {
                for v in u.iter_mut().take(n) {
                    *v = rng.gen_range(-1.0..1.0);
                }
                norm = u[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            u.iter_mut().for_each(|v| *v /= norm);
            dirs.push(u);
        }
    }
    let mut c = f64::INFINITY;
    for &t in t_ladder {
        for u in &dirs {
            let mut y = [0.0; MAX_DIM];
            for a in 0..n {
                y[a] = x[a] + t * u[a];
            }
            c = c.min(kernel.eval_vector_abs(&x[..n], &y[..n]) * t.powf(n as f64 - kernel.alpha));
        }
    }
    if c.is_finite() {
        c
    } else {
        0.0
    }
}

/// `P_m(J, σ1_{K∖I}) / [(ℓJ/ℓI)^{m−ε(n+m−α)} P_m(I, σ1_{K∖I})]`; `None` when both
/// sides vanish.
pub fn poisson_decay_check(
    grid: &Grid,
    j: &DyadicCube,
    i: &DyadicCube,
    k: &DyadicCube,
    sigma: &LatticeMeasure,
    m: u32,
    epsilon: f64,
    alpha: f64,
) -> Result<Option<f64>> {
    if !(grid.contains(k, i) && grid.contains(i, j)) {
        return Err(DyadError::PreconditionViolated("need J ⊆ I ⊆ K".into()));
    }
    let n = grid.n() as f64;
    let gap = grid.boundary_gap_cells(j, i) as f64 * grid.cell_side();
    let bound = 2.0 * n.sqrt() * grid.side_of(j).powf(epsilon) * grid.side_of(i).powf(1.0 - epsilon);
    if !(gap > bound) {
        return Err(DyadError::PreconditionViolated(format!(
            "dist(J,∂I)={gap} does not exceed {bound}"
        )));
    }
    let ib = grid.cube_box(i);
    let kb = grid.cube_box(k);
    let mut nu = vec![0.0; grid.cell_count()];
    for c in box_cells(grid, &kb) {
        if !ib.contains_cell(&grid.cell_coords(c)) {
            nu[c] = sigma.cell_mass(c);
        }
    }
    let num = poisson_m(grid, &nu, j, alpha, m);
    let ratio = grid.side_of(j) / grid.side_of(i);
    let den = ratio.powf(m as f64 - epsilon * (n + m as f64 - alpha)) * poisson_m(grid, &nu, i, alpha, m);
    if num == 0.0 && den == 0.0 {
        return Ok(None);
    }
    Ok(Some(crate::measures::safe_ratio(num, den)))
}
