//! Lattice measures: a nonnegative density per finest cell, plus the
//! estimators for doubling, A∞, C_q, relative capacity and comparability.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DyadError, Result};
use crate::lattice::{box_cells, CellSet, DyadicCube, Grid, IBox, SummedArea, MAX_DIM};
use crate::rng::substream;
use crate::sampling::{sample_cubes, standard_subsets, Subset};

/// Above this many cells in 2Q the capacity LP is replaced by a constant
/// feasible candidate.
pub const CAP_LP_CELLS: usize = 512;

#[derive(Clone, Debug)]
pub struct LatticeMeasure {
    grid: Grid,
    density: Vec<f64>,
    mass: Vec<f64>,
    sat: SummedArea,
    // masses of unshifted dyadic cubes, per level, built bottom-up so that a
    // parent is bit-for-bit the sum of its children
    pyramid: Vec<Vec<f64>>,
}

impl LatticeMeasure {
    pub fn from_density(grid: &Grid, density: Vec<f64>) -> Result<Self> {
        let grid = grid.base();
        if density.len() != grid.cell_count() {
            return Err(DyadError::BadParameter(format!(
                "expected {} densities, got {}",
                grid.cell_count(),
                density.len()
            )));
        }
        if let Some(d) = density.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(DyadError::BadParameter(format!("density {d} is not a finite nonnegative real")));
        }
        let vol = grid.cell_volume();
        let mass: Vec<f64> = density.iter().map(|d| d * vol).collect();
        let sat = SummedArea::new(&grid, &mass);
        let pyramid = build_pyramid(&grid, &mass);
        let mu = LatticeMeasure { grid, density, mass, sat, pyramid };
        if !(mu.total() > 0.0) {
            return Err(DyadError::DegenerateMeasure("total mass is zero".into()));
        }
        Ok(mu)
    }

    pub fn lebesgue(grid: &Grid) -> Self {
        LatticeMeasure::from_density(grid, vec![1.0; grid.cell_count()]).expect("unit density")
    }

    /// The measure with density multiplied by `lambda > 0`.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        LatticeMeasure::from_density(&self.grid, self.density.iter().map(|d| d * lambda).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn density(&self) -> &[f64] {
        &self.density
    }
    pub fn masses(&self) -> &[f64] {
        &self.mass
    }
    pub fn cell_mass(&self, c: usize) -> f64 {
        self.mass[c]
    }
    pub fn total(&self) -> f64 {
        self.pyramid[0][0]
    }

    /// `|Q|_μ`. Unshifted cubes read the dyadic pyramid (exactly additive);
    /// shifted cubes are clipped to the root and read the summed-area table.
    pub fn cube_mass(&self, q: &DyadicCube) -> f64 {
        if q.shift.iter().all(|&s| s == 0) && q.level <= self.grid.depth() {
            let k = 1i64 << q.level;
            if (0..self.grid.n()).all(|a| q.index[a] >= 0 && q.index[a] < k) {
                let mut i = 0i64;
                for a in 0..self.grid.n() {
                    i = i * k + q.index[a];
                }
                return self.pyramid[q.level as usize][i as usize];
            }
        }
        self.box_mass(&self.grid.cube_box(q))
    }

    /// Mass of a cell box, clipped to the root.
    pub fn box_mass(&self, b: &IBox) -> f64 {
        self.sat.sum(b)
    }

    /// Mass of a physical box `[lo, hi)`; errors unless it is cell aligned.
    pub fn physical_box_mass(&self, lo: &[f64], hi: &[f64]) -> Result<f64> {
        let g = &self.grid;
        let mut b = IBox { n: g.n() as u8, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
        for a in 0..g.n() {
            for (src, dst) in [(lo[a], &mut b.lo[a]), (hi[a], &mut b.hi[a])] {
                let t = (src - g.origin()[a]) / g.cell_side();
                let r = t.round();
                if (t - r).abs() > 1e-9 * t.abs().max(1.0) {
                    return Err(DyadError::MisalignedCube(format!("coordinate {src} is not on the lattice")));
                }
                *dst = r as i64;
            }
        }
        Ok(self.box_mass(&b))
    }

    /// `|tQ|_μ`; errors when `tQ` is not cell aligned.
    pub fn dilated_mass(&self, q: &DyadicCube, t: f64) -> Result<f64> {
        Ok(self.box_mass(&self.grid.dilate(q, t)?))
    }

    pub fn set_mass(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.mass[c]).sum()
    }

    pub fn cellset_mass(&self, set: &CellSet) -> f64 {
        set.cells().map(|c| self.mass[c]).sum()
    }

    /// Average of `f` over `q` with respect to this measure; `None` on zero mass.
    pub fn average(&self, q: &DyadicCube, f: &[f64]) -> Option<f64> {
        let m = self.cube_mass(q);
        if m <= 0.0 {
            return None;
        }
        let s: f64 = box_cells(&self.grid, &self.grid.cube_box(q)).map(|c| f[c] * self.mass[c]).sum();
        Some(s / m)
    }

    /// `∫ f² dμ`.
    pub fn l2_norm_sq(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.mass).map(|(v, m)| v * v * m).sum()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.mass).map(|((a, b), m)| a * b * m).sum()
    }

    // ---- file format -------------------------------------------------------

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::with_capacity(self.density.len() * 20 + 64);
        s.push_str("DYADMEAS 1\n");
        write!(s, "{} {}", g.n(), g.depth()).unwrap();
        for o in g.origin() {
            write!(s, " {o}").unwrap();
        }
        writeln!(s, " {}", g.side()).unwrap();
        for d in &self.density {
            // Display for f64 is the shortest string that round-trips exactly
            writeln!(s, "{d}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| DyadError::Parse(format!("measure file: {m}"));
        if lines.next().map(str::trim) != Some("DYADMEAS 1") {
            return Err(bad("missing 'DYADMEAS 1' header"));
        }
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing geometry line"))?.split_whitespace().collect();
        if head.len() < 4 {
            return Err(bad("geometry line too short"));
        }
        let n: usize = head[0].parse().map_err(|_| bad("bad n"))?;
        let depth: u32 = head[1].parse().map_err(|_| bad("bad L"))?;
        if head.len() != n + 3 {
            return Err(bad("geometry line needs n, L, n origin coordinates and the side"));
        }
        let origin: Vec<f64> = head[2..2 + n]
            .iter()
            .map(|t| t.parse().map_err(|_| bad("bad origin")))
            .collect::<Result<_>>()?;
        let side: f64 = head[2 + n].parse().map_err(|_| bad("bad side"))?;
        let grid = Grid::new(n, depth, &origin, side)?;
        let density: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(&format!("bad density '{l}'"))))
            .collect::<Result<_>>()?;
        LatticeMeasure::from_density(&grid, density)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::report::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LatticeMeasure::from_text(&std::fs::read_to_string(path)?)
    }
}

fn build_pyramid(grid: &Grid, mass: &[f64]) -> Vec<Vec<f64>> {
    let n = grid.n();
    let depth = grid.depth();
    let mut levels: Vec<Vec<f64>> = vec![Vec::new(); depth as usize + 1];
    levels[depth as usize] = mass.to_vec();
    for level in (0..depth).rev() {
        let k = 1i64 << level;
        let kc = k * 2;
        let count = 1usize << (n as u32 * level);
        let finer = &levels[level as usize + 1];
        let mut cur = vec![0.0; count];
        for (i, slot) in cur.iter_mut().enumerate() {
            let mut idx = [0i64; MAX_DIM];
            let mut r = i as i64;
            for a in (0..n).rev() {
                idx[a] = r % k;
                r /= k;
            }
            // children in the same order as Grid::children
            let mut s = 0.0;
            for ch in 0..(1usize << n) {
                let mut j = 0i64;
                for a in 0..n {
                    let bit = ((ch >> (n - 1 - a)) & 1) as i64;
                    j = j * kc + 2 * idx[a] + bit;
                }
                s += finer[j as usize];
            }
            *slot = s;
        }
        levels[level as usize] = cur;
    }
    levels
}

// ---- generators -------------------------------------------------------------

/// Measure families understood by [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MeasureSpec {
    Lebesgue,
    /// density |x − c·(1,…,1)|^a, a ≥ 0, sampled at cell midpoints
    Power { a: f64, c: f64 },
    /// random doubling cascade; every dyadic child carries at least `p0` of its parent
    Cascade { p0: f64, seed: u64 },
    /// density 1 on one cell and `background` elsewhere
    OneHot { cell: Option<usize>, background: f64 },
    /// constant multiple of another family
    Scaled { factor: f64, inner: Box<MeasureSpec> },
    FromFile { path: String },
}

impl MeasureSpec {
    /// Parses `lebesgue`, `power:a[:c]`, `cascade:p0[:seed]`, `onehot[:cell[:background]]`,
    /// `scaled:factor:<spec>`, `file:path`. Spaces work as separators too, and
    /// `seed=7` style keys are accepted for the cascade seed.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || DyadError::BadParameter(format!("bad measure spec '{s}'"));
        if let Some(rest) = s.strip_prefix("scaled:") {
            let (f, inner) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(MeasureSpec::Scaled {
                factor: f.parse().map_err(|_| bad())?,
                inner: Box::new(MeasureSpec::parse(inner)?),
            });
        }
        if let Some(p) = s.strip_prefix("file:").or_else(|| s.strip_prefix("from-file ")) {
            return Ok(MeasureSpec::FromFile { path: p.trim().to_string() });
        }
        let parts: Vec<&str> = s.split([':', ' ']).filter(|t| !t.is_empty()).collect();
        let num = |i: usize, default: Option<f64>| -> Result<f64> {
            match parts.get(i) {
                Some(t) => {
                    let t = t.rsplit('=').next().unwrap_or(t);
                    t.parse().map_err(|_| bad())
                }
                None => default.ok_or_else(bad),
            }
        };
        let spec = match parts.first().copied() {
            Some("lebesgue") => MeasureSpec::Lebesgue,
            Some("power") => MeasureSpec::Power { a: num(1, None)?, c: num(2, Some(0.0))? },
            Some("cascade") => MeasureSpec::Cascade { p0: num(1, None)?, seed: num(2, Some(0.0))? as u64 },
            Some("onehot") => MeasureSpec::OneHot {
                cell: parts.get(1).map(|_| num(1, None)).transpose()?.map(|v| v as usize),
                background: num(2, Some(0.0))?,
            },
            _ => return Err(bad()),
        };
        Ok(spec)
    }

    pub fn label(&self) -> String {
        match self {
            MeasureSpec::Lebesgue => "lebesgue".into(),
            MeasureSpec::Power { a, c } => format!("power:{a}:{c}"),
            MeasureSpec::Cascade { p0, seed } => format!("cascade:{p0}:{seed}"),
            MeasureSpec::OneHot { cell, background } => match cell {
                Some(c) => format!("onehot:{c}:{background}"),
                None => format!("onehot::{background}"),
            },
            MeasureSpec::Scaled { factor, inner } => format!("scaled:{factor}:{}", inner.label()),
            MeasureSpec::FromFile { path } => format!("file:{path}"),
        }
    }
}

/// Builds a measure of the given family on `grid`.
pub fn generate(spec: &MeasureSpec, grid: &Grid) -> Result<LatticeMeasure> {
    match spec {
        MeasureSpec::Lebesgue => Ok(LatticeMeasure::lebesgue(grid)),
        MeasureSpec::Power { a, c } => {
            if !(*a >= 0.0 && a.is_finite()) {
                return Err(DyadError::BadParameter(format!("power exponent {a} must be >= 0")));
            }
            let n = grid.n();
            let d: Vec<f64> = (0..grid.cell_count())
                .map(|i| {
                    let x = grid.cell_center(i);
                    let r = (0..n).map(|k| (x[k] - c).powi(2)).sum::<f64>().sqrt();
                    if *a == 0.0 {
                        1.0
                    } else {
                        r.powf(*a)
                    }
                })
                .collect();
            LatticeMeasure::from_density(grid, d)
        }
        MeasureSpec::Cascade { p0, seed } => cascade(grid, *p0, *seed),
        MeasureSpec::OneHot { cell, background } => {
            if !(*background >= 0.0) {
                return Err(DyadError::BadParameter("one-hot background must be >= 0".into()));
            }
            let hot = match cell {
                Some(c) => *c,
                None => {
                    let mid = vec![grid.cells_per_axis() / 2; grid.n()];
                    grid.cell_index(&mid)
                }
            };
            if hot >= grid.cell_count() {
                return Err(DyadError::BadParameter(format!("hot cell {hot} outside the lattice")));
            }
            let mut d = vec![*background; grid.cell_count()];
            d[hot] = 1.0;
            LatticeMeasure::from_density(grid, d)
        }
        MeasureSpec::Scaled { factor, inner } => {
            if !(*factor > 0.0) {
                return Err(DyadError::BadParameter("scale factor must be positive".into()));
            }
            generate(inner, grid)?.scaled(*factor)
        }
        MeasureSpec::FromFile { path } => {
            let mu = LatticeMeasure::load(Path::new(path))?;
            if mu.grid() != &grid.base() {
                return Err(DyadError::BadParameter(format!("measure file {path} does not match the configured lattice")));
            }
            Ok(mu)
        }
    }
}

/// Amplitude of the interior perturbation in the cascade for a given `p0`.
pub fn cascade_amplitude(n: usize, p0: f64) -> f64 {
    0.75 * (1.0 - (1u64 << n) as f64 * p0)
}

/// Random doubling cascade.
///
/// Mass is redistributed two levels at a time: a cube is cut into 4^n
/// grandchildren, those touching the cube's boundary keep the uniform share
/// 4^{-n}, and only the 2^n central grandchildren are perturbed by factors
/// (1 + ρ_i) with Σρ_i = 0 and |ρ_i| ≤ r. Since boundary pieces are never
/// perturbed, neighbours across a coarse boundary inherit the ratio of their
/// parents, which is what keeps the measure doubling and not merely dyadic
/// doubling. With r = ¾(1 − 2^n p0) every dyadic child keeps at least `p0` of
/// its parent.
pub fn cascade(grid: &Grid, p0: f64, seed: u64) -> Result<LatticeMeasure> {
    let n = grid.n();
    let cap = 1.0 / (1u64 << n) as f64;
    if !(p0 > 0.0 && p0 <= cap) {
        return Err(DyadError::BadParameter(format!("cascade p0={p0} must lie in (0, 2^-n]")));
    }
    let r = cascade_amplitude(n, p0);
    let mut rng = substream(seed, "cascade");
    let depth = grid.depth();
    // masses per level, row-major at that level
    let mut level = 0u32;
    let mut cur = vec![1.0f64];
    let quarter = 0.25f64.powi(n as i32);
    while level + 2 <= depth {
        let k = 1usize << level;
        let k4 = 4 * k;
        let mut next = vec![0.0; cur.len() << (2 * n)];
        for (i, &m) in cur.iter().enumerate() {
            let mut idx = [0usize; MAX_DIM];
            let mut t = i;
            for a in (0..n).rev() {
                idx[a] = t % k;
                t /= k;
            }
            let count = 1usize << n;
            let mut u: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = u.iter().sum::<f64>() / count as f64;
            u.iter_mut().for_each(|v| *v -= mean);
            let umax = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let s: f64 = rng.gen_range(0.0..1.0);
            let rho: Vec<f64> = u.iter().map(|v| if umax > 0.0 { r * s * v / umax } else { 0.0 }).collect();
            for g in 0..(1usize << (2 * n)) {
                let mut j = 0usize;
                let mut interior = true;
                let mut central = 0usize;
                for a in 0..n {
                    let off = (g >> (2 * (n - 1 - a))) & 3;
                    j = j * k4 + 4 * idx[a] + off;
                    if off == 0 || off == 3 {
                        interior = false;
                    } else {
                        central = (central << 1) | (off - 1);
                    }
                }
                next[j] = if interior { m * quarter * (1.0 + rho[central]) } else { m * quarter };
            }
        }
        cur = next;
        level += 2;
    }
    if level < depth {
        // odd depth: split the last level uniformly
        let k = 1usize << level;
        let k2 = 2 * k;
        let half = 0.5f64.powi(n as i32);
        let mut next = vec![0.0; cur.len() << n];
        for (i, &m) in cur.iter().enumerate() {
            let mut idx = [0usize; MAX_DIM];
            let mut t = i;
            for a in (0..n).rev() {
                idx[a] = t % k;
                t /= k;
            }
            for ch in 0..(1usize << n) {
                let mut j = 0usize;
                for a in 0..n {
                    j = j * k2 + 2 * idx[a] + ((ch >> (n - 1 - a)) & 1);
                }
                next[j] = m * half;
            }
        }
        cur = next;
    }
    let total_volume = grid.side().powi(n as i32);
    let vol = grid.cell_volume();
    let density: Vec<f64> = cur.iter().map(|m| m * total_volume / vol).collect();
    LatticeMeasure::from_density(grid, density)
}

// ---- doubling ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoublingReport {
    pub c_doub: f64,
    pub theta: f64,
    /// (β, γ) with β = ½ and γ = min |½Q|_μ / |Q|_μ over the sweep
    pub beta_gamma: (f64, f64),
    pub witness: Option<String>,
    pub cubes_swept: usize,
    /// true when not every cell offset could be visited
    pub lower_bound: bool,
}

/// Sweep cap on the number of cube positions visited by [`doubling_report`].
const DOUBLING_SWEEP_CAP: usize = 4_000_000;

/// Doubling constant over every cell-aligned cube of dyadic side (≥ 2 cells,
/// so that 2Q stays aligned) with 2Q inside the root, at every cell offset
/// (thinned uniformly if the count would exceed the sweep cap).
pub fn doubling_report(mu: &LatticeMeasure) -> Result<DoublingReport> {
    let g = mu.grid();
    let n = g.n();
    let m = g.cells_per_axis();
    let mut c_doub: f64 = 1.0;
    let mut gamma: f64 = 1.0;
    let mut witness = None;
    let mut swept = 0usize;
    let mut thinned = false;
    let mut any_mass = false;
    let mut s = 2i64;
    while 2 * s <= m {
        let span = m - 2 * s + 1; // positions per axis with 2Q inside
        let mut stride = 1i64;
        while (((span + stride - 1) / stride) as usize).pow(n as u32) > DOUBLING_SWEEP_CAP / g.depth() as usize {
            stride *= 2;
            thinned = true;
        }
        let per = ((span + stride - 1) / stride) as usize;
        let total = per.pow(n as u32);
        let results: Vec<(f64, f64, bool, IBox)> = (0..total)
            .into_par_iter()
            .map(|mut r| {
                let mut b = IBox { n: n as u8, lo: [0; MAX_DIM], hi: [0; MAX_DIM] };
                for a in (0..n).rev() {
                    b.lo[a] = s / 2 + (r % per) as i64 * stride;
                    b.hi[a] = b.lo[a] + s;
                    r /= per;
                }
                let q = mu.box_mass(&b);
                let d = mu.box_mass(&b.grow(s / 2));
                let half = if s >= 4 { mu.box_mass(&b.grow(-s / 4)) } else { f64::NAN };
                let ratio = if q > 0.0 {
                    d / q
                } else if d > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NAN
                };
                let hg = if q > 0.0 && !half.is_nan() { half / q } else { f64::NAN };
                (ratio, hg, d > 0.0, b)
            })
            .collect();
        for (ratio, hg, nonzero, b) in results {
            swept += 1;
            any_mass |= nonzero;
            if ratio > c_doub {
                c_doub = ratio;
                witness = Some(format!("box lo={:?} side={s} cells", &b.lo[..n]));
            }
            if hg < gamma {
                gamma = hg;
            }
        }
        s *= 2;
    }
    if !any_mass {
        return Err(DyadError::DegenerateMeasure("every interior cube has zero mass".into()));
    }
    Ok(DoublingReport {
        c_doub,
        theta: c_doub.log2(),
        beta_gamma: (0.5, gamma),
        witness,
        cubes_swept: swept,
        lower_bound: thinned,
    })
}

// ---- envelope fits ----------------------------------------------------------

/// Default cap on the constant when fitting `y ≤ C x^ε`.
pub const ENVELOPE_C_CAP: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub c: f64,
    pub epsilon: f64,
    pub samples: usize,
    /// some sample had x = 0 < y, so no power envelope exists
    pub unbounded: bool,
}

/// Fits `y ≤ C x^ε` for samples with `x ∈ [0,1]`: ε is the largest exponent in
/// (0,1] whose tight constant C(ε) = max y/x^ε stays ≤ `c_cap`, and C is that
/// tight constant, so the envelope holds on every sample by construction.
pub fn fit_envelope(samples: &[(f64, f64)], c_cap: f64) -> EnvelopeFit {
    let pts: Vec<(f64, f64)> = samples.iter().copied().filter(|&(_, y)| y > 0.0).collect();
    if pts.iter().any(|&(x, _)| x <= 0.0) {
        return EnvelopeFit { c: f64::INFINITY, epsilon: 0.0, samples: samples.len(), unbounded: true };
    }
    let c_of = |e: f64| pts.iter().map(|&(x, y)| y / x.powf(e)).fold(0.0f64, f64::max);
    if pts.is_empty() {
        return EnvelopeFit { c: 0.0, epsilon: 1.0, samples: samples.len(), unbounded: false };
    }
    if c_of(1.0) <= c_cap {
        return EnvelopeFit { c: c_of(1.0), epsilon: 1.0, samples: samples.len(), unbounded: false };
    }
    if c_of(0.0) > c_cap {
        return EnvelopeFit { c: c_of(0.0), epsilon: 0.0, samples: samples.len(), unbounded: false };
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if c_of(mid) <= c_cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    EnvelopeFit { c: c_of(lo), epsilon: lo, samples: samples.len(), unbounded: false }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 8 {
        return Err(DyadError::InsufficientSamples { got: samples, need: 8 });
    }
    Ok(())
}

/// Shared `(E, Q)` sample family: `cube_count` cubes and the standard subset mix.
pub fn subset_samples(grid: &Grid, cube_count: usize, seed: u64) -> Vec<Subset> {
    let cubes = sample_cubes(grid, cube_count, 0, grid.depth().saturating_sub(1), seed);
    let per = 4;
    cubes.iter().flat_map(|q| standard_subsets(grid, q, per, seed)).collect()
}

/// A∞ fit: `|E|_ω/|Q|_ω ≤ C (|E|/|Q|)^ε` over sampled subsets.
pub fn a_infinity_fit(omega: &LatticeMeasure, samples: usize, seed: u64) -> Result<EnvelopeFit> {
    check_samples(samples)?;
    let g = omega.grid();
    let leb = LatticeMeasure::lebesgue(g);
    let subsets = subset_samples(g, samples, seed);
    let pts: Vec<(f64, f64)> = subsets
        .par_iter()
        .filter_map(|s| {
            let q = s.cube();
            let qw = omega.cube_mass(&q);
            if qw <= 0.0 {
                return None;
            }
            let cells = s.cells(g, omega, omega);
            let x = leb.set_mass(&cells) / leb.cube_mass(&q);
            Some((x, omega.set_mass(&cells) / qw))
        })
        .collect();
    Ok(fit_envelope(&pts, ENVELOPE_C_CAP))
}

/// C_q fit: `|E|_σ / ∫ (M1_Q)^q dσ ≤ C (|E|/|Q|)^ε`, the integral over the root.
pub fn cq_constant(sigma: &LatticeMeasure, q_exp: f64, samples: usize, seed: u64) -> Result<EnvelopeFit> {
    check_samples(samples)?;
    if !(q_exp > 1.0) {
        return Err(DyadError::BadParameter("C_q needs q > 1".into()));
    }
    let g = sigma.grid();
    let leb = LatticeMeasure::lebesgue(g);
    let subsets = subset_samples(g, samples, seed);
    let mut cubes: Vec<DyadicCube> = subsets.iter().map(|s| s.cube()).collect();
    cubes.sort();
    cubes.dedup();
    let denoms: std::collections::HashMap<DyadicCube, f64> = cubes
        .par_iter()
        .map(|q| {
            let ind: Vec<f64> = (0..g.cell_count())
                .map(|c| if g.cube_box(q).contains_cell(&g.cell_coords(c)) { 1.0 } else { 0.0 })
                .collect();
            let m = crate::operators::frac_maximal_all(&leb, &ind, 0.0);
            let den: f64 = m.iter().zip(sigma.masses()).map(|(v, s)| v.powf(q_exp) * s).sum();
            (*q, den)
        })
        .collect();
    let pts: Vec<(f64, f64)> = subsets
        .iter()
        .filter_map(|s| {
            let q = s.cube();
            let den = denoms[&q];
            if den <= 0.0 {
                return None;
            }
            let cells = s.cells(g, sigma, sigma);
            Some((leb.set_mass(&cells) / leb.cube_mass(&q), sigma.set_mass(&cells) / den))
        })
        .collect();
    Ok(fit_envelope(&pts, ENVELOPE_C_CAP))
}

// ---- relative capacity --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityBounds {
    pub lower: f64,
    pub upper: f64,
    /// the LP was too large and the constant-density candidate was used
    pub lp_too_large: bool,
}

/// Default normalization `c` of the capacity lower bound: with
/// λ = (diam 2Q)^{α−n}, summing the constraint `I_α h ≥ λ` over `E` and
/// bounding `sup_y ∫_E |x−y|^{α−n} dx` by the same integral over a ball of
/// volume |E| gives `∫h ≥ (α/n) v_n^{α/n−1} (2√n)^{α−n} (|E|/|Q|)^{1−α/n}`,
/// v_n the unit-ball volume.
pub fn capacity_lower_constant(n: usize, alpha: f64) -> f64 {
    let nf = n as f64;
    let vn = std::f64::consts::PI.powf(nf / 2.0) / gamma_half_integer(n + 2);
    (alpha / nf) * vn.powf(alpha / nf - 1.0) * (2.0 * nf.sqrt()).powf(alpha - nf)
}

// Γ(k/2) for integer k ≥ 1.
fn gamma_half_integer(k: usize) -> f64 {
    match k {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (k as f64 / 2.0 - 1.0) * gamma_half_integer(k - 2),
    }
}

/// Relative α-capacity of `E ⊆ Q` (E given as finest cells).
///
/// The upper bound solves the discretized problem
/// `min Σ h_j |cell_j|` over `h ≥ 0` on the cells of 2Q subject to
/// `I_α h(x_i) ≥ (diam 2Q)^{α−n}` at the centers of E's cells. The lower bound
/// is `c (|E|/|Q|)^{1−α/n}` with `c` from [`capacity_lower_constant`] unless
/// overridden.
pub fn relative_capacity(
    grid: &Grid,
    e: &[usize],
    q: &DyadicCube,
    alpha: f64,
    lower_constant: Option<f64>,
) -> Result<CapacityBounds> {
    let n = grid.n();
    let nf = n as f64;
    if !(alpha > 0.0 && alpha < nf) {
        return Err(DyadError::BadParameter(format!("capacity needs alpha in (0, {n})")));
    }
    let b2 = grid.dilate(q, 2.0)?;
    if !grid.root_box().contains_box(&b2) {
        return Err(DyadError::PreconditionViolated(format!("2Q of {} leaves the root", q.token())));
    }
    let qb = grid.cube_box(q);
    if let Some(c) = e.iter().find(|&&c| !qb.contains_cell(&grid.cell_coords(c))) {
        return Err(DyadError::PreconditionViolated(format!("cell {c} of E is outside Q")));
    }
    if e.is_empty() {
        return Ok(CapacityBounds { lower: 0.0, upper: 0.0, lp_too_large: false });
    }
    let c = lower_constant.unwrap_or_else(|| capacity_lower_constant(n, alpha));
    let frac = e.len() as f64 / qb.volume_cells() as f64;
    let lower = c * frac.powf(1.0 - alpha / nf);

    let diam2q = 2.0 * grid.side_of(q) * nf.sqrt();
    let vars: Vec<usize> = box_cells(grid, &b2).collect();
    let vol = grid.cell_volume();
    // kernel scaled so the right-hand side is 1: k_ij = (diam 2Q)^{n−α} K(x_i,y_j);
    // variables u_j = h_j |cell|, objective Σ u_j
    let scale = diam2q.powf(nf - alpha);
    let self_term = crate::operators::self_cell_potential(grid, alpha) / vol;
    let row = |i: usize| -> Vec<f64> {
        let xi = grid.cell_center(i);
        vars.iter()
            .map(|&j| {
                if j == i {
                    scale * self_term
                } else {
                    let yj = grid.cell_center(j);
                    let d = (0..n).map(|a| (xi[a] - yj[a]).powi(2)).sum::<f64>().sqrt();
                    scale * d.powf(alpha - nf)
                }
            })
            .collect()
    };
    if vars.len() > CAP_LP_CELLS {
        // constant h on 2Q scaled to satisfy the worst constraint
        let worst = e.iter().map(|&i| row(i).iter().sum::<f64>()).fold(f64::INFINITY, f64::min);
        let u = 1.0 / worst;
        return Ok(CapacityBounds { lower, upper: u * vars.len() as f64, lp_too_large: true });
    }
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let v: Vec<minilp::Variable> = vars.iter().map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for &i in e {
        let r = row(i);
        let terms: Vec<(minilp::Variable, f64)> = v.iter().copied().zip(r).collect();
        lp.add_constraint(&terms[..], ComparisonOp::Ge, 1.0);
    }
    let sol = lp
        .solve()
        .map_err(|err| DyadError::PreconditionViolated(format!("capacity LP failed: {err}")))?;
    Ok(CapacityBounds { lower, upper: sol.objective(), lp_too_large: false })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AInfinityAlphaReport {
    /// (capacity upper bound, |E|_ω / |2Q|_ω) per sample
    pub points: Vec<(f64, f64)>,
    /// monotone envelope η̂: for each sorted capacity t, the max ratio over samples with capacity ≤ t
    pub envelope: Vec<(f64, f64)>,
    /// η̂ at the 10th percentile of capacities is at most half of its maximum
    pub decays: bool,
}

/// Envelope report for the A∞^α condition (no pass/fail: the gauge η is unspecified).
pub fn a_infinity_alpha_check(omega: &LatticeMeasure, alpha: f64, samples: usize, seed: u64) -> Result<AInfinityAlphaReport> {
    let g = omega.grid();
    let mut rng = substream(seed, "ainf-alpha");
    // cubes whose double stays in the root and whose 2Q has ≤ CAP_LP_CELLS cells
    let mut min_level = 1u32;
    while min_level < g.depth() && (2i64 << (g.depth() - min_level)).pow(g.n() as u32) as usize > CAP_LP_CELLS {
        min_level += 1;
    }
    let mut jobs = Vec::new();
    let mut tries = 0;
    while jobs.len() < samples && tries < 100 * samples.max(1) {
        tries += 1;
        let level = rng.gen_range(min_level..=g.depth().saturating_sub(1).max(min_level));
        let k = 1i64 << level;
        let idx: Vec<i64> = (0..g.n()).map(|_| rng.gen_range(0..k)).collect();
        let q = g.cube(level, &idx);
        let Ok(b2) = g.dilate(&q, 2.0) else { continue };
        if !g.root_box().contains_box(&b2) {
            continue;
        }
        let subs = standard_subsets(g, &q, 1, rng.gen());
        let pick = subs[rng.gen_range(0..subs.len())].clone();
        jobs.push((q, pick, b2));
    }
    let mut points: Vec<(f64, f64)> = jobs
        .par_iter()
        .filter_map(|(q, s, b2)| {
            let cells = s.cells(g, omega, omega);
            let cap = relative_capacity(g, &cells, q, alpha, None).ok()?;
            let den = omega.box_mass(b2);
            let y = if den > 0.0 { omega.set_mass(&cells) / den } else { 0.0 };
            Some((cap.upper, y))
        })
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut envelope = Vec::with_capacity(points.len());
    let mut best = 0.0f64;
    for &(t, y) in &points {
        best = best.max(y);
        envelope.push((t, best));
    }
    let decays = match envelope.last() {
        Some(&(_, top)) if top > 0.0 => {
            let k = envelope.len() / 10;
            envelope[k].1 <= 0.5 * top
        }
        _ => true,
    };
    Ok(AInfinityAlphaReport { points, envelope, decays })
}

// ---- comparability ------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparabilityReport {
    /// fit of |E|_σ/|Q|_σ ≤ C (|E|_ω/|Q|_ω)^ε
    pub sigma_by_omega: EnvelopeFit,
    /// fit of |E|_ω/|Q|_ω ≤ C (|E|_σ/|Q|_σ)^ε
    pub omega_by_sigma: EnvelopeFit,
    /// max over sampled families F of ‖F‖_Car(σ)/‖F‖_Car(ω), and the reverse
    pub carleson_ratio: (f64, f64),
    pub families: usize,
    pub comparable: bool,
}

/// Exponent below which a fitted envelope is treated as no envelope at all.
pub const COMPARABILITY_MIN_EPSILON: f64 = 0.05;
/// Ceiling on sampled Carleson-norm ratios for a comparable pair.
pub const COMPARABILITY_CARLESON_CEILING: f64 = 10.0;

pub fn comparability_report(sigma: &LatticeMeasure, omega: &LatticeMeasure, grid_samples: usize, seed: u64) -> Result<ComparabilityReport> {
    let g = sigma.grid();
    if g != omega.grid() {
        return Err(DyadError::PreconditionViolated("measures live on different lattices".into()));
    }
    let subsets = subset_samples(g, grid_samples.max(8), seed);
    let pairs: Vec<(f64, f64)> = subsets
        .par_iter()
        .filter_map(|s| {
            let q = s.cube();
            let (qs, qw) = (sigma.cube_mass(&q), omega.cube_mass(&q));
            if qs <= 0.0 && qw <= 0.0 {
                return None;
            }
            let cells = s.cells(g, sigma, omega);
            let rs = if qs > 0.0 { sigma.set_mass(&cells) / qs } else { 0.0 };
            let rw = if qw > 0.0 { omega.set_mass(&cells) / qw } else { 0.0 };
            // a cube charged by only one measure breaks comparability outright
            Some(match (qs > 0.0, qw > 0.0) {
                (true, true) => (rs, rw),
                (true, false) => (1.0, 0.0),
                _ => (0.0, 1.0),
            })
        })
        .collect();
    let s_by_w: Vec<(f64, f64)> = pairs.iter().map(|&(rs, rw)| (rw, rs)).collect();
    let w_by_s: Vec<(f64, f64)> = pairs.iter().map(|&(rs, rw)| (rs, rw)).collect();
    let sigma_by_omega = fit_envelope(&s_by_w, ENVELOPE_C_CAP);
    let omega_by_sigma = fit_envelope(&w_by_s, ENVELOPE_C_CAP);

    let families = crate::corona::sample_families(g, sigma, omega, grid_samples.max(8), seed);
    let mut fwd: f64 = 0.0;
    let mut rev: f64 = 0.0;
    for fam in &families {
        let cs = crate::corona::carleson_norm(fam, sigma);
        let cw = crate::corona::carleson_norm(fam, omega);
        fwd = fwd.max(safe_ratio(cs, cw));
        rev = rev.max(safe_ratio(cw, cs));
    }
    let comparable = !sigma_by_omega.unbounded
        && !omega_by_sigma.unbounded
        && sigma_by_omega.epsilon >= COMPARABILITY_MIN_EPSILON
        && omega_by_sigma.epsilon >= COMPARABILITY_MIN_EPSILON
        && fwd <= COMPARABILITY_CARLESON_CEILING
        && rev <= COMPARABILITY_CARLESON_CEILING;
    Ok(ComparabilityReport {
        sigma_by_omega,
        omega_by_sigma,
        carleson_ratio: (fwd, rev),
        families: families.len(),
        comparable,
    })
}

/// `a / b` with the conventions 0/0 = 0 and a/0 = +∞ for a > 0.
pub fn safe_ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lebesgue_cube_masses() {
        let g = Grid::unit(1, 6).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        assert_eq!(mu.cube_mass(&g.cube(2, &[1])), 0.25);
        assert_eq!(mu.cube_mass(&g.top()), mu.total());
        assert_eq!(mu.total(), 1.0);
    }

    #[test]
    fn pyramid_is_exactly_additive() {
        let g = Grid::unit(2, 4).unwrap();
        let mu = cascade(&g, 0.2, 3).unwrap();
        for q in g.all_cubes(3) {
            let s: f64 = g.children(&q).unwrap().iter().map(|c| mu.cube_mass(c)).sum();
            assert_eq!(s, mu.cube_mass(&q));
        }
    }

    #[test]
    fn power_zero_is_lebesgue() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = generate(&MeasureSpec::parse("power 0 0").unwrap(), &g).unwrap();
        assert!(mu.density().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(MeasureSpec::parse("power:0.5:0").unwrap(), MeasureSpec::Power { a: 0.5, c: 0.0 });
        assert_eq!(MeasureSpec::parse("cascade 0.3 seed=7").unwrap(), MeasureSpec::Cascade { p0: 0.3, seed: 7 });
        assert!(MeasureSpec::parse("gaussian").is_err());
        let g = Grid::unit(1, 4).unwrap();
        assert!(generate(&MeasureSpec::Power { a: -0.5, c: 0.0 }, &g).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let g = Grid::new(1, 6, &[-1.0], 2.0).unwrap();
        let mu = generate(&MeasureSpec::Power { a: 0.5, c: 0.0 }, &g).unwrap();
        let back = LatticeMeasure::from_text(&mu.to_text()).unwrap();
        assert_eq!(back.density(), mu.density());
        assert_eq!(back.grid(), mu.grid());
    }

    #[test]
    fn lebesgue_doubling_is_two_to_the_n() {
        for (n, l) in [(1, 6), (2, 4)] {
            let g = Grid::unit(n, l).unwrap();
            let r = doubling_report(&LatticeMeasure::lebesgue(&g)).unwrap();
            assert_eq!(r.c_doub, (1 << n) as f64);
            assert_eq!(r.theta, n as f64);
        }
    }

    #[test]
    fn one_hot_is_not_doubling() {
        let g = Grid::unit(1, 6).unwrap();
        let mu = generate(&MeasureSpec::OneHot { cell: None, background: 0.0 }, &g).unwrap();
        assert!(doubling_report(&mu).unwrap().c_doub.is_infinite());
    }

    #[test]
    fn envelope_fit_lebesgue_like() {
        let pts = vec![(0.5, 0.5), (0.25, 0.25), (1.0, 1.0)];
        let f = fit_envelope(&pts, ENVELOPE_C_CAP);
        assert_eq!((f.c, f.epsilon), (1.0, 1.0));
        let f = fit_envelope(&[(0.0, 0.3)], ENVELOPE_C_CAP);
        assert!(f.unbounded);
    }

    #[test]
    fn insufficient_samples() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        assert!(matches!(a_infinity_fit(&mu, 7, 0), Err(DyadError::InsufficientSamples { .. })));
    }

    #[test]
    fn capacity_empty_set() {
        let g = Grid::unit(1, 6).unwrap();
        let q = g.cube(2, &[1]);
        let c = relative_capacity(&g, &[], &q, 0.5, None).unwrap();
        assert_eq!((c.lower, c.upper), (0.0, 0.0));
    }
}
