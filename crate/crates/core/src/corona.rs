//! Stopping forests, Carleson norms and embeddings, corona form splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::alpert::{build_alpert, expand, monomials, project_delta};
use crate::error::{DyadError, Result};
use crate::lattice::{box_cells, DyadicCube, Grid, MAX_DIM};
use crate::measures::{fit_envelope, safe_ratio, EnvelopeFit, LatticeMeasure, ENVELOPE_C_CAP};
use crate::operators::{DiscretizedOperator, KernelKind, KernelSpec};
use crate::rng::substream;

pub const DEFAULT_GAMMA: f64 = 4.0;
pub const DEFAULT_TAU: u32 = 3;

fn abs_average(mu: &LatticeMeasure, q: &DyadicCube, f: &[f64]) -> Option<f64> {
    let g = mu.grid();
    let (mut s, mut m) = (0.0, 0.0);
    for c in box_cells(g, &g.cube_box(q)) {
        let w = mu.cell_mass(c);
        s += f[c].abs() * w;
        m += w;
    }
    (m > 0.0).then(|| s / m)
}

// ---- stopping forests ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StoppingForest {
    pub top: DyadicCube,
    pub gamma: f64,
    /// stopping cubes, sorted (parents before children)
    pub members: Vec<DyadicCube>,
    /// `α_𝓕(F) = 𝔼_F^μ|f|`
    pub alpha: BTreeMap<DyadicCube, f64>,
    /// `π_𝓕` restricted to members; the top has none
    pub parent: BTreeMap<DyadicCube, DyadicCube>,
    /// Carleson norm of the members
    pub carleson: f64,
    /// `max(4, carleson)`
    pub c0: f64,
    /// `Σ α(F)²|F|_μ / ‖f‖²`
    pub quasi_orthogonality: f64,
    /// stopping properties (1) through (4), verified by enumeration
    pub properties: [bool; 4],
}

impl StoppingForest {
    pub fn is_member(&self, q: &DyadicCube) -> bool {
        self.alpha.contains_key(q)
    }

    /// `π_𝓕 I`: the smallest stopping cube containing I.
    pub fn owner(&self, grid: &Grid, i: &DyadicCube) -> Option<DyadicCube> {
        if !grid.contains(&self.top, i) {
            return None;
        }
        let mut q = *i;
        loop {
            if self.is_member(&q) {
                return Some(q);
            }
            q = grid.parent(&q)?;
        }
    }

    /// `𝔠_𝓕(F)`
    pub fn children(&self, f: &DyadicCube) -> Vec<DyadicCube> {
        self.parent.iter().filter(|(_, p)| *p == f).map(|(c, _)| *c).collect()
    }

    /// `𝒞_𝓕(F)` down to the finest level.
    pub fn corona(&self, grid: &Grid, f: &DyadicCube) -> Vec<DyadicCube> {
        grid.descendants(f, grid.depth()).into_iter().filter(|i| self.owner(grid, i) == Some(*f)).collect()
    }

    /// Indented token tree with α values.
    pub fn to_tree_text(&self) -> String {
        let mut s = String::new();
        let depth = |q: &DyadicCube| {
            let mut d = 0;
            let mut c = *q;
            while let Some(p) = self.parent.get(&c) {
                d += 1;
                c = *p;
            }
            d
        };
        let mut order: Vec<DyadicCube> = Vec::new();
        fn visit(f: &StoppingForest, q: DyadicCube, out: &mut Vec<DyadicCube>) {
            out.push(q);
            for c in f.children(&q) {
                visit(f, c, out);
            }
        }
        visit(self, self.top, &mut order);
        for q in order {
            writeln!(s, "{}{} {:e}", "  ".repeat(depth(&q)), q.token(), self.alpha[&q]).unwrap();
        }
        s
    }
}

/// Γ-Calderón–Zygmund stopping cubes for `f` relative to `mu`, below `top`.
pub fn cz_stopping(mu: &LatticeMeasure, f: &[f64], gamma: f64, top: &DyadicCube) -> Result<StoppingForest> {
    let grid = mu.grid();
    if !(gamma >= 4.0) {
        return Err(DyadError::BadParameter(format!("gamma = {gamma} must be >= 4")));
    }
    let top_avg = abs_average(mu, top, f).ok_or_else(|| DyadError::ZeroMassCube(top.token()))?;
    let mut alpha = BTreeMap::new();
    let mut parent = BTreeMap::new();
    alpha.insert(*top, top_avg);
    let mut stack = vec![*top];
    while let Some(a) = stack.pop() {
        let threshold = gamma * alpha[&a];
        let mut scan: Vec<DyadicCube> = if a.level < grid.depth() { grid.children(&a)? } else { Vec::new() };
        while let Some(i) = scan.pop() {
            match abs_average(mu, &i, f) {
                Some(v) if v > threshold => {
                    alpha.insert(i, v);
                    parent.insert(i, a);
                    stack.push(i);
                }
                _ => {
                    if i.level < grid.depth() {
                        scan.extend(grid.children(&i)?);
                    }
                }
            }
        }
    }
    let members: Vec<DyadicCube> = alpha.keys().copied().collect();
    let carleson = carleson_norm(&members, mu);
    let f2 = mu.l2_norm_sq(f);
    let sum3: f64 = alpha.iter().map(|(q, a)| a * a * mu.cube_mass(q)).sum();
    let quasi = safe_ratio(sum3, f2);
    let mut forest = StoppingForest {
        top: *top,
        gamma,
        members,
        alpha,
        parent,
        carleson,
        c0: carleson.max(4.0),
        quasi_orthogonality: quasi,
        properties: [true; 4],
    };
    forest.properties = verify_properties(&forest, mu, f);
    Ok(forest)
}

fn verify_properties(forest: &StoppingForest, mu: &LatticeMeasure, f: &[f64]) -> [bool; 4] {
    let grid = mu.grid();
    let p1 = grid.descendants(&forest.top, grid.depth()).iter().all(|i| {
        let owner = forest.owner(grid, i).expect("inside top");
        match abs_average(mu, i, f) {
            Some(v) if !forest.is_member(i) => v <= forest.gamma * forest.alpha[&owner] * (1.0 + 1e-12),
            _ => true,
        }
    });
    let p2 = forest.carleson <= forest.c0;
    // classical embedding with c_F = |F|_μ, whose Carleson norm is `carleson`
    let p3 = forest.quasi_orthogonality <= 4.0 * forest.carleson * (1.0 + 1e-12);
    let p4 = forest.parent.iter().all(|(c, p)| forest.alpha[p] <= forest.alpha[c]);
    [p1, p2, p3, p4]
}

/// `max_F Σ_{F'⊆F} |F'|_μ / |F|_μ` over members of `family` with positive mass.
pub fn carleson_norm(family: &[DyadicCube], mu: &LatticeMeasure) -> f64 {
    let grid = mu.grid();
    let fam: BTreeSet<DyadicCube> = family.iter().copied().collect();
    let masses: BTreeMap<DyadicCube, f64> = fam.iter().map(|q| (*q, mu.cube_mass(q))).collect();
    fam.iter()
        .filter(|f| masses[*f] > 0.0)
        .map(|f| {
            let s: f64 = fam.iter().filter(|g| grid.contains(f, g)).map(|g| masses[g]).sum();
            s / masses[f]
        })
        .fold(0.0, f64::max)
}

/// Level-k stopping descendants' mass against `|F|_μ`, fitted as `C·(2^{−k})^δ`.
pub fn carleson_decay_fit(forest: &StoppingForest, mu: &LatticeMeasure) -> EnvelopeFit {
    let mut samples = Vec::new();
    for f in &forest.members {
        let mf = mu.cube_mass(f);
        if mf <= 0.0 {
            continue;
        }
        let mut gen = vec![*f];
        let mut k = 0;
        while !gen.is_empty() {
            k += 1;
            gen = gen.iter().flat_map(|g| forest.children(g)).collect();
            let m: f64 = gen.iter().map(|g| mu.cube_mass(g)).sum();
            samples.push((0.5f64.powi(k), (m / mf).min(1.0)));
        }
    }
    fit_envelope(&samples, ENVELOPE_C_CAP)
}

/// Random nonnegative test functions: lognormal-like noise with sparse spikes.
pub fn random_function(grid: &Grid, seed: u64, label: &str) -> Vec<f64> {
    let mut rng = substream(seed, label);
    let spikes = rng.gen_range(0..4usize);
    let mut f: Vec<f64> = (0..grid.cell_count()).map(|_| (rng.gen_range(-2.0f64..2.0)).exp()).collect();
    for _ in 0..spikes {
        let c = rng.gen_range(0..f.len());
        f[c] *= rng.gen_range(10.0..1000.0);
    }
    f
}

/// Stopping families from CZ forests of random functions against each measure,
/// alternating, plus random sparse families of sampled cubes.
pub fn sample_families(grid: &Grid, sigma: &LatticeMeasure, omega: &LatticeMeasure, count: usize, seed: u64) -> Vec<Vec<DyadicCube>> {
    let top = grid.top();
    (0..count)
        .filter_map(|k| {
            let label = format!("family/{k}");
            match k % 3 {
                0 | 1 => {
                    let mu = if k % 3 == 0 { sigma } else { omega };
                    let f = random_function(grid, seed, &label);
                    cz_stopping(mu, &f, DEFAULT_GAMMA, &top).ok().map(|fo| fo.members)
                }
                _ => {
                    let mut rng = substream(seed, &label);
                    let size = rng.gen_range(2..16usize);
                    let mut fam = vec![top];
                    for _ in 0..size {
                        let level = rng.gen_range(1..=grid.depth());
                        let idx: Vec<i64> = (0..grid.n()).map(|_| rng.gen_range(0..(1i64 << level))).collect();
                        fam.push(grid.cube(level, &idx));
                    }
                    fam.sort();
                    fam.dedup();
                    Some(fam)
                }
            }
        })
        .collect()
}

// ---- Carleson embeddings ---------------------------------------------------------

/// `max_J Σ_{I⊆J} c_I / |J|_σ`, J over all ancestors of the support.
pub fn sequence_carleson_norm(grid: &Grid, c: &BTreeMap<DyadicCube, f64>, sigma: &LatticeMeasure) -> f64 {
    let mut tops: BTreeMap<DyadicCube, f64> = BTreeMap::new();
    for (i, v) in c {
        let mut q = Some(*i);
        while let Some(j) = q {
            *tops.entry(j).or_insert(0.0) += v;
            q = grid.parent(&j);
        }
    }
    tops.iter().map(|(j, s)| safe_ratio(*s, sigma.cube_mass(j))).fold(0.0, f64::max)
}

/// Random Carleson sequence: sparse cubes with `c_I = u_I·|I|_σ`.
pub fn random_carleson_sequence(grid: &Grid, sigma: &LatticeMeasure, seed: u64, label: &str) -> BTreeMap<DyadicCube, f64> {
    let mut rng = substream(seed, label);
    let p: f64 = rng.gen_range(0.05..0.8);
    let mut c = BTreeMap::new();
    for q in grid.all_cubes(grid.depth()) {
        if rng.gen::<f64>() < p {
            c.insert(q, rng.gen::<f64>() * sigma.cube_mass(&q));
        }
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingReport {
    pub max_ratio: f64,
    pub carleson_norm: f64,
    pub samples: usize,
    pub worst_sample: Option<usize>,
}

/// `max Σ c_I (𝔼_I^σ f)² / (‖f‖²_σ ‖c‖_Car)` over the sample functions.
pub fn carleson_embedding_check(grid: &Grid, c: &BTreeMap<DyadicCube, f64>, sigma: &LatticeMeasure, f_samples: &[Vec<f64>]) -> EmbeddingReport {
    let norm = sequence_carleson_norm(grid, c, sigma);
    let ratios: Vec<f64> = f_samples
        .par_iter()
        .map(|f| {
            let lhs: f64 = c
                .iter()
                .map(|(i, v)| match sigma.average(i, f) {
                    Some(a) => v * a * a,
                    None => 0.0,
                })
                .sum();
            safe_ratio(lhs, sigma.l2_norm_sq(f) * norm)
        })
        .collect();
    let mut best = (0.0, None);
    for (k, r) in ratios.iter().enumerate() {
        if *r > best.0 {
            best = (*r, Some(k));
        }
    }
    EmbeddingReport { max_ratio: best.0, carleson_norm: norm, samples: f_samples.len(), worst_sample: best.1 }
}

#[derive(Clone, Debug, Serialize)]
pub struct BilinearCet {
    pub lhs: f64,
    /// `C' = max_J Σ_{I⊆J} a_I / √(|J|_σ|J|_ω)`
    pub c_prime: f64,
    pub norm_f: f64,
    pub norm_g: f64,
    /// `lhs / (C'‖f‖‖g‖)`
    pub c_fit: f64,
    pub pass: bool,
}

fn sup_averages(mu: &LatticeMeasure, f: &[f64], cubes: impl Iterator<Item = DyadicCube>) -> BTreeMap<DyadicCube, f64> {
    let grid = mu.grid();
    cubes
        .map(|i| {
            let mut best: f64 = 0.0;
            let mut q = Some(i);
            while let Some(l) = q {
                if let Some(a) = abs_average(mu, &l, f) {
                    best = best.max(a);
                }
                q = grid.parent(&l);
            }
            (i, best)
        })
        .collect()
}

/// Bilinear Carleson embedding: plain averages, or sup-over-ancestor averages of
/// |f|, |g| when `use_sup_averages`. Passes iff `c_fit ≤ ceiling`.
pub fn bilinear_cet_check(
    sigma: &LatticeMeasure,
    omega: &LatticeMeasure,
    a: &BTreeMap<DyadicCube, f64>,
    f: &[f64],
    g: &[f64],
    use_sup_averages: bool,
    ceiling: f64,
) -> BilinearCet {
    let grid = sigma.grid();
    let lhs: f64 = if use_sup_averages {
        let sf = sup_averages(sigma, f, a.keys().copied());
        let sg = sup_averages(omega, g, a.keys().copied());
        a.iter().map(|(i, v)| v * sf[i] * sg[i]).sum()
    } else {
        a.iter()
            .map(|(i, v)| match (sigma.average(i, f), omega.average(i, g)) {
                (Some(x), Some(y)) => v * x * y,
                _ => 0.0,
            })
            .sum()
    };
    let mut tops: BTreeMap<DyadicCube, f64> = BTreeMap::new();
    for (i, v) in a {
        let mut q = Some(*i);
        while let Some(j) = q {
            *tops.entry(j).or_insert(0.0) += v;
            q = grid.parent(&j);
        }
    }
    let c_prime = tops
        .iter()
        .map(|(j, s)| safe_ratio(*s, (sigma.cube_mass(j) * omega.cube_mass(j)).sqrt()))
        .fold(0.0, f64::max);
    let norm_f = sigma.l2_norm_sq(f).sqrt();
    let norm_g = omega.l2_norm_sq(g).sqrt();
    let c_fit = safe_ratio(lhs, c_prime * norm_f * norm_g);
    BilinearCet { lhs, c_prime, norm_f, norm_g, c_fit, pass: c_fit <= ceiling }
}

/// Chain probe for the converse direction: `a_I = √(|I|_σ|I|_ω)` on the cubes
/// containing `cell`, with f, g equal to `|I_k|^{−1/2}` on the shells
/// `I_k ∖ I_{k+1}` of the respective measure. Stays bounded for comparable
/// pairs and grows with depth when one measure concentrates.
pub fn chain_probe(sigma: &LatticeMeasure, omega: &LatticeMeasure, cell: usize) -> BilinearCet {
    let grid = sigma.grid();
    let coords = grid.cell_coords(cell);
    let chain: Vec<DyadicCube> = (0..=grid.depth())
        .map(|k| {
            let idx: Vec<i64> = (0..grid.n()).map(|a| coords[a] >> (grid.depth() - k)).collect();
            grid.cube(k, &idx)
        })
        .collect();
    let shell_fn = |mu: &LatticeMeasure| {
        let mut f = vec![0.0; grid.cell_count()];
        for q in &chain {
            let m = mu.cube_mass(q);
            let v = if m > 0.0 { m.powf(-0.5) } else { 0.0 };
            for c in box_cells(grid, &grid.cube_box(q)) {
                f[c] = v; // deeper cubes overwrite
            }
        }
        f
    };
    let f = shell_fn(sigma);
    let g = shell_fn(omega);
    let a: BTreeMap<DyadicCube, f64> = chain.iter().map(|q| (*q, (sigma.cube_mass(q) * omega.cube_mass(q)).sqrt())).collect();
    bilinear_cet_check(sigma, omega, &a, &f, &g, false, f64::INFINITY)
}

// ---- parallel corona -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    Near,
    Disjoint,
    Far,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairValue {
    pub a: DyadicCube,
    pub b: DyadicCube,
    pub class: PairClass,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoronaSplit {
    pub pairs: Vec<PairValue>,
    pub near: f64,
    pub disjoint: f64,
    pub far: f64,
    /// `⟨T_σ f, g⟩_ω` computed directly
    pub full: f64,
    pub forest_sizes: (usize, usize),
}

impl CoronaSplit {
    pub fn total(&self) -> f64 {
        self.near + self.disjoint + self.far
    }

    pub fn relative_error(&self) -> f64 {
        let d = (self.total() - self.full).abs();
        if self.full == 0.0 {
            d
        } else {
            d / self.full.abs()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("A,B,class,value\n");
        for p in &self.pairs {
            let class = match p.class {
                PairClass::Near => "near",
                PairClass::Disjoint => "disjoint",
                PairClass::Far => "far",
            };
            writeln!(s, "{},{},{class},{:e}", p.a.token(), p.b.token(), p.value).unwrap();
        }
        s
    }
}

pub fn classify(grid: &Grid, fa: &StoppingForest, fb: &StoppingForest, a: &DyadicCube, b: &DyadicCube) -> PairClass {
    if grid.contains(a, b) && fa.owner(grid, b) == Some(*a) {
        return PairClass::Near;
    }
    if grid.contains(b, a) && fb.owner(grid, a) == Some(*b) {
        return PairClass::Near;
    }
    if grid.cube_box(a).disjoint(&grid.cube_box(b)) {
        PairClass::Disjoint
    } else {
        PairClass::Far
    }
}

/// Splits `⟨T_σ f, g⟩_ω` over corona pairs of the CZ forests of f (σ) and g (ω).
/// The polynomial projection onto the top cube rides with the top corona, so
/// the pair values sum to the full form.
pub fn parallel_corona_split(
    op: &DiscretizedOperator,
    sigma: &LatticeMeasure,
    omega: &LatticeMeasure,
    f: &[f64],
    g: &[f64],
    kappa1: usize,
    kappa2: usize,
    gamma: f64,
) -> Result<CoronaSplit> {
    let grid = sigma.grid();
    let top = grid.top();
    let fa = cz_stopping(sigma, f, gamma, &top)?;
    let fb = cz_stopping(omega, g, gamma, &top)?;
    let ef = expand(sigma, kappa1, f, &top)?;
    let eg = expand(omega, kappa2, g, &top)?;
    let owners_a: BTreeMap<DyadicCube, DyadicCube> =
        ef.coefficients.keys().map(|q| (*q, fa.owner(grid, q).expect("inside top"))).collect();
    let owners_b: BTreeMap<DyadicCube, DyadicCube> =
        eg.coefficients.keys().map(|q| (*q, fb.owner(grid, q).expect("inside top"))).collect();
    let tf: Vec<Vec<f64>> = fa
        .members
        .par_iter()
        .map(|a| op.apply(&ef.partial(grid, *a == top, |q| owners_a[q] == *a)))
        .collect();
    let pg: Vec<Vec<f64>> = fb.members.par_iter().map(|b| eg.partial(grid, *b == top, |q| owners_b[q] == *b)).collect();
    let mut pairs = Vec::with_capacity(fa.members.len() * fb.members.len());
    for (a, t) in fa.members.iter().zip(&tf) {
        for (b, p) in fb.members.iter().zip(&pg) {
            pairs.push(PairValue { a: *a, b: *b, class: classify(grid, &fa, &fb, a, b), value: omega.inner(t, p) });
        }
    }
    let sum_of = |c: PairClass| pairs.iter().filter(|p| p.class == c).map(|p| p.value).sum::<f64>();
    Ok(CoronaSplit {
        near: sum_of(PairClass::Near),
        disjoint: sum_of(PairClass::Disjoint),
        far: sum_of(PairClass::Far),
        full: op.bilinear(f, g, omega),
        forest_sizes: (fa.members.len(), fb.members.len()),
        pairs,
    })
}

// ---- shifted coronas -------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ShiftedCoronas {
    pub tau: u32,
    pub coronas: BTreeMap<DyadicCube, Vec<DyadicCube>>,
    /// cubes within τ levels of the top, owned by no shifted corona
    pub excluded: Vec<DyadicCube>,
    /// cubes lying in two or more literal shifted coronas
    pub literal_overlaps: usize,
    /// cubes below the top's τ levels missed by every literal shifted corona
    pub literal_uncovered: usize,
}

fn in_top_levels(j: &DyadicCube, e: &DyadicCube, tau: u32) -> bool {
    j.level >= e.level && j.level - e.level <= tau
}

/// τ-shifted coronas: a cube J within τ levels of its owner F goes to the
/// 𝓕-parent of F (or is excluded when F is the top); otherwise it stays with F.
/// The literal set formula, with the top levels of every 𝓕-child adopted, is
/// also evaluated and its overlaps counted.
pub fn shifted_corona(forest: &StoppingForest, grid: &Grid, tau: u32) -> Result<ShiftedCoronas> {
    if tau < 1 {
        return Err(DyadError::BadParameter("tau must be >= 1".into()));
    }
    let mut coronas: BTreeMap<DyadicCube, Vec<DyadicCube>> = forest.members.iter().map(|f| (*f, Vec::new())).collect();
    let mut excluded = Vec::new();
    let universe = grid.descendants(&forest.top, grid.depth());
    let mut literal_count: BTreeMap<DyadicCube, usize> = BTreeMap::new();
    for j in &universe {
        let owner = forest.owner(grid, j).expect("inside top");
        if in_top_levels(j, &owner, tau) {
            match forest.parent.get(&owner) {
                Some(p) => coronas.get_mut(p).expect("member").push(*j),
                None => excluded.push(*j),
            }
        } else {
            coronas.get_mut(&owner).expect("member").push(*j);
        }
        // literal: [𝒞(F) ∖ N(F)] for F = owner, plus N(F') for every member F' whose
        // 𝓕-parent exists
        let mut hits = usize::from(!in_top_levels(j, &owner, tau));
        for fp in forest.members.iter().filter(|fp| forest.parent.contains_key(*fp)) {
            if grid.contains(fp, j) && in_top_levels(j, fp, tau) {
                hits += 1;
            }
        }
        literal_count.insert(*j, hits);
    }
    let literal_overlaps = literal_count.values().filter(|&&h| h > 1).count();
    let literal_uncovered = literal_count
        .iter()
        .filter(|(j, h)| **h == 0 && !in_top_levels(j, &forest.top, tau))
        .count();
    Ok(ShiftedCoronas { tau, coronas, excluded, literal_overlaps, literal_uncovered })
}

// ---- Monotonicity diagnostic -----------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityDiag {
    pub lhs: f64,
    pub phi_sq: f64,
    pub psi_sq: f64,
    pub m_j: Vec<f64>,
    /// `None` when both sides vanish
    pub ratio: Option<f64>,
}

/// Smoothness margin δ in `P_{κ+δ}`.
pub const MONOTONICITY_DELTA: f64 = 0.5;

fn falling(p: f64, k: u32) -> f64 {
    (0..k).map(|i| p - i as f64).product()
}

/// `∂_x^β K(x, y)`: closed form in one dimension, central differences
/// (step = half a cell) otherwise.
pub fn kernel_derivative(kernel: &KernelSpec, beta: &[u32; MAX_DIM], x: &[f64], y: &[f64], step: f64) -> f64 {
    let n = kernel.n;
    if n == 1 {
        let u = x[0] - y[0];
        if u == 0.0 {
            return 0.0;
        }
        let k = beta[0];
        let (p, odd) = match kernel.kind {
            KernelKind::Hilbert => (-1.0, true),
            KernelKind::Riesz { .. } => (kernel.alpha - 1.0, true),
            KernelKind::FracInt => (kernel.alpha - 1.0, false),
            KernelKind::Zero => return 0.0,
        };
        let mag = falling(p, k) * u.abs().powf(p - k as f64);
        return if u > 0.0 {
            mag
        } else {
            // g(u) = ±(−u)^p for u < 0
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            if odd {
                -s * mag
            } else {
                s * mag
            }
        };
    }
    // tensor product of central differences
    let mut total = 0.0;
    let mut counts = [0u32; MAX_DIM];
    loop {
        let mut coeff = 1.0;
        let mut xp = [0.0; MAX_DIM];
        for a in 0..n {
            let k = beta[a];
            let i = counts[a];
            coeff *= binom(k, i) * if i % 2 == 0 { 1.0 } else { -1.0 } / step.powi(k as i32);
            xp[a] = x[a] + (k as f64 / 2.0 - i as f64) * step;
        }
        total += coeff * kernel.eval(&xp[..n], y);
        let mut a = 0;
        loop {
            if a == n {
                return total;
            }
            counts[a] += 1;
            if counts[a] <= beta[a] {
                break;
            }
            counts[a] = 0;
            a += 1;
        }
    }
}

fn binom(k: u32, i: u32) -> f64 {
    (0..i).fold(1.0, |acc, j| acc * (k - j) as f64 / (j + 1) as f64)
}

/// `m_J^κ`: minimizer over the closed cube of `∫_J |x − m|^{2κ} dω`, by cyclic
/// golden-section over coordinates (the objective is convex), started at c_J.
pub fn moment_center(omega: &LatticeMeasure, j: &DyadicCube, kappa: u32) -> [f64; MAX_DIM] {
    let grid = omega.grid();
    let n = grid.n();
    let cells: Vec<([f64; MAX_DIM], f64)> = box_cells(grid, &grid.cube_box(j))
        .map(|c| (grid.cell_center(c), omega.cell_mass(c)))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let c = grid.center_of(j);
    let l = grid.side_of(j);
    let obj = |m: &[f64; MAX_DIM]| -> f64 {
        cells
            .iter()
            .map(|(x, w)| {
                let d2: f64 = (0..n).map(|a| (x[a] - m[a]).powi(2)).sum();
                d2.powi(kappa as i32) * w
            })
            .sum()
    };
    let mut m = c;
    if cells.is_empty() {
        return m;
    }
    let tol = 1e-6 * l;
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    for _sweep in 0..50 {
        let before = m;
        for a in 0..n {
            let (mut lo, mut hi) = (c[a] - l / 2.0, c[a] + l / 2.0);
            while hi - lo > tol {
                let x1 = hi - gr * (hi - lo);
                let x2 = lo + gr * (hi - lo);
                let mut m1 = m;
                let mut m2 = m;
                m1[a] = x1;
                m2[a] = x2;
                if obj(&m1) <= obj(&m2) {
                    hi = x2;
                } else {
                    lo = x1;
                }
            }
            let cand = 0.5 * (lo + hi);
            let mut mc = m;
            mc[a] = cand;
            // ties go to the center
            if obj(&mc) < obj(&m) {
                m = mc;
            }
        }
        if (0..n).all(|a| (m[a] - before[a]).abs() <= tol) {
            break;
        }
    }
    m
}

/// `‖△_{J;κ}^ω T μ‖² / (Φ_κ² + Ψ_κ²)` for a signed measure `mu` (cell masses)
/// supported off 2J.
pub fn monotonicity_diag(kernel: &KernelSpec, mu: &[f64], omega: &LatticeMeasure, j: &DyadicCube, kappa: usize) -> Result<MonotonicityDiag> {
    let grid = omega.grid();
    let n = grid.n();
    let two_j = grid.dilate(j, 2.0)?;
    for (c, v) in mu.iter().enumerate() {
        if *v != 0.0 && two_j.contains_cell(&grid.cell_coords(c)) {
            return Err(DyadError::SupportViolation(format!("cell {c} lies in 2{}", j.token())));
        }
    }
    let support: Vec<(usize, f64)> = mu.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
    let basis = build_alpert(omega, j, kappa)?;
    let jcells: Vec<usize> = box_cells(grid, &grid.cube_box(j)).collect();
    let mut tmu = vec![0.0; grid.cell_count()];
    for &x in &jcells {
        let xc = grid.cell_center(x);
        tmu[x] = support.iter().map(|&(y, v)| kernel.eval(&xc[..n], &grid.cell_center(y)[..n]) * v).sum();
    }
    let lhs: f64 = project_delta(&basis, &tmu, omega).iter().map(|c| c * c).sum();

    let k = kappa as u32;
    let m = moment_center(omega, j, k);
    let step = 0.5 * grid.cell_side();
    let mut phi_sq = 0.0;
    for beta in monomials(n, kappa + 1).into_iter().filter(|b| b[..n].iter().sum::<u32>() == k) {
        let d: f64 = support
            .iter()
            .map(|&(y, v)| kernel_derivative(kernel, &beta, &m[..n], &grid.cell_center(y)[..n], step) * v)
            .sum();
        let xb: Vec<f64> = (0..grid.cell_count())
            .map(|c| {
                let x = grid.cell_center(c);
                (0..n).map(|a| x[a].powi(beta[a] as i32)).product()
            })
            .collect();
        let proj: f64 = project_delta(&basis, &xb, omega).iter().map(|c| c * c).sum();
        phi_sq += d * d * proj;
    }
    let l = grid.side_of(j);
    let cj = grid.center_of(j);
    let order = kappa as f64 + MONOTONICITY_DELTA;
    let p: f64 = support
        .iter()
        .map(|&(y, v)| {
            let yc = grid.cell_center(y);
            let d = (0..n).map(|a| (yc[a] - cj[a]).powi(2)).sum::<f64>().sqrt();
            l.powf(order) / (l + d).powf(order + n as f64 - kernel.alpha) * v.abs()
        })
        .sum();
    let spread: f64 = jcells
        .iter()
        .map(|&x| {
            let xc = grid.cell_center(x);
            let d2: f64 = (0..n).map(|a| (xc[a] - m[a]).powi(2)).sum();
            d2.powi(k as i32) * omega.cell_mass(x)
        })
        .sum();
    let psi_sq = (p / l.powi(k as i32)).powi(2) * spread;
    let rhs = phi_sq + psi_sq;
    let ratio = if lhs == 0.0 && rhs == 0.0 { None } else { Some(safe_ratio(lhs, rhs)) };
    Ok(MonotonicityDiag { lhs, phi_sq, psi_sq, m_j: m[..n].to_vec(), ratio })
}

// ---- geometric lemmas ----------------------------------------------------------------

/// A cube `corner + [0, side)^n` in units of `2^{−m_used}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RationalCube {
    pub corner: Vec<u64>,
    pub side: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RectDecomposition {
    pub n: usize,
    pub t: f64,
    pub epsilon: f64,
    /// minimal m with 2^{−m} < ε
    pub m: u32,
    /// scale of the expansion: m, or m + 1 when b is odd
    pub m_used: u32,
    /// numerator of t* over 2^{m_used}
    pub b: u64,
    pub t_star: f64,
    pub cubes: Vec<RationalCube>,
    /// `2^{n·m_used − n − m_used + 2}`
    pub bound: f64,
}

impl RectDecomposition {
    pub fn count(&self) -> usize {
        self.cubes.len()
    }

    /// Cellwise tiling of `[0,1)^{n−1} × [0,t*)` at resolution 2^{−m_used}.
    pub fn tiles_exactly(&self) -> bool {
        let n = self.n;
        let k = 1u64 << self.m_used;
        // last axis carries the slab
        let dims: Vec<u64> = (0..n).map(|a| if a + 1 == n { self.b } else { k }).collect();
        let total: u64 = dims.iter().product();
        let mut cover = vec![0u8; total as usize];
        for q in &self.cubes {
            let mut off = vec![0u64; n];
            loop {
                let mut idx = 0u64;
                for a in 0..n {
                    let x = q.corner[a] + off[a];
                    if x >= dims[a] {
                        return false;
                    }
                    idx = idx * dims[a] + x;
                }
                cover[idx as usize] = cover[idx as usize].saturating_add(1);
                let mut a = 0;
                loop {
                    if a == n {
                        break;
                    }
                    off[a] += 1;
                    if off[a] < q.side {
                        break;
                    }
                    off[a] = 0;
                    a += 1;
                }
                if a == n {
                    break;
                }
            }
        }
        cover.iter().all(|&c| c == 1)
    }
}

/// Cube decomposition of the slab `[0,1)^{n−1} × [0,t*)` with `t − t* < ε`:
/// one interval when n = 1, otherwise one row of equal cubes per binary digit
/// of t*. b = ⌈2^m t⌉ − 1; an odd b is rewritten as 2b over 2^{m+1} so the
/// digits stop one place above the finest scale.
pub fn rectangle_decomposition(t: f64, n: usize, epsilon: f64) -> Result<RectDecomposition> {
    if !(t > 0.0 && t < 1.0) {
        return Err(DyadError::BadParameter(format!("t = {t} must lie in (0,1)")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) || n == 0 || n > MAX_DIM {
        return Err(DyadError::BadParameter(format!("epsilon = {epsilon}, n = {n}")));
    }
    let mut m = 0u32;
    while 0.5f64.powi(m as i32) >= epsilon {
        m += 1;
        if m > 40 {
            return Err(DyadError::BadParameter("epsilon too small".into()));
        }
    }
    let scaled = t * (1u64 << m) as f64;
    let mut b = scaled.ceil() as u64 - 1;
    let mut m_used = m;
    if n > 1 && b % 2 == 1 {
        b *= 2;
        m_used += 1;
    }
    let t_star = b as f64 / (1u64 << m_used) as f64;
    let mut cubes = Vec::new();
    if b > 0 {
        if n == 1 {
            cubes.push(RationalCube { corner: vec![0], side: b });
        } else {
            let mut y = 0u64;
            for k in 1..=m_used {
                let bit = (b >> (m_used - k)) & 1;
                if bit == 0 {
                    continue;
                }
                let side = 1u64 << (m_used - k);
                let per_axis = 1u64 << k;
                let count = per_axis.pow(n as u32 - 1);
                for r in 0..count {
                    let mut corner = Vec::with_capacity(n);
                    let mut rr = r;
                    for _ in 0..n - 1 {
                        corner.push((rr % per_axis) * side);
                        rr /= per_axis;
                    }
                    corner.reverse();
                    corner.push(y);
                    cubes.push(RationalCube { corner, side });
                }
                y += side;
            }
        }
    }
    let nm = n as f64 * m_used as f64 - n as f64 - m_used as f64 + 2.0;
    Ok(RectDecomposition { n, t, epsilon, m, m_used, b, t_star, cubes, bound: 2f64.powf(nm) })
}

/// `|Q ∖ (1−δ)Q|_μ · ln(1/δ) / |Q|_μ`; `(1−δ)Q` must be cell aligned.
pub fn boundary_mass_check(mu: &LatticeMeasure, q: &DyadicCube, delta: f64) -> Result<f64> {
    let grid = mu.grid();
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DyadError::BadParameter(format!("delta = {delta} must lie in (0,1)")));
    }
    let inner = grid.dilate(q, 1.0 - delta)?;
    let total = mu.cube_mass(q);
    if total <= 0.0 {
        return Err(DyadError::ZeroMassCube(q.token()));
    }
    let ring = total - mu.box_mass(&inner);
    Ok(ring.max(0.0) * (1.0 / delta).ln() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{TruncationSpec, DEFAULT_MATRIX_BUDGET};

    fn leb(n: usize, l: u32) -> (Grid, LatticeMeasure) {
        let g = Grid::unit(n, l).unwrap();
        let m = LatticeMeasure::lebesgue(&g);
        (g, m)
    }

    #[test]
    fn constant_function_single_stopping_cube() {
        let (g, mu) = leb(1, 6);
        let fo = cz_stopping(&mu, &vec![3.0; 64], 4.0, &g.top()).unwrap();
        assert_eq!(fo.members, vec![g.top()]);
        assert_eq!(fo.properties, [true; 4]);
    }

    #[test]
    fn spike_chain() {
        let (g, mu) = leb(1, 6);
        let mut f = vec![0.0; 64];
        f[37] = 1.0;
        let fo = cz_stopping(&mu, &f, 4.0, &g.top()).unwrap();
        let levels: Vec<u32> = fo.members.iter().map(|q| q.level).collect();
        assert_eq!(levels, vec![0, 3, 6]);
        assert!(fo.members.iter().all(|q| g.contains(q, &g.cube(6, &[37]))));
    }

    #[test]
    fn carleson_of_full_tree() {
        let (g, mu) = leb(1, 5);
        assert_eq!(carleson_norm(&g.all_cubes(3), &mu), 4.0);
        assert_eq!(carleson_norm(&[g.cube(2, &[1])], &mu), 1.0);
    }

    #[test]
    fn rectangle_examples() {
        let r = rectangle_decomposition(0.3, 2, 0.125).unwrap();
        assert_eq!(r.t_star, 0.25);
        assert_eq!(r.count(), 4);
        assert!(r.tiles_exactly());
        let h = rectangle_decomposition(0.5, 2, 0.25).unwrap();
        assert_eq!((h.m, h.t_star), (3, 0.375));
        assert!(h.tiles_exactly());
        let z = rectangle_decomposition(0.01, 3, 0.25).unwrap();
        assert!(z.cubes.is_empty() && z.t_star == 0.0);
    }

    #[test]
    fn lebesgue_boundary_ratio() {
        let (g, mu) = leb(1, 8);
        let d = 0.25;
        let r = boundary_mass_check(&mu, &g.top(), d).unwrap();
        assert!((r - d * (1.0f64 / d).ln()).abs() < 1e-12);
    }

    #[test]
    fn hilbert_derivative_matches_difference() {
        let k = KernelSpec::hilbert();
        for (x, y) in [(0.3, 1.0), (1.0, 0.2)] {
            let d2 = kernel_derivative(&k, &[2, 0, 0], &[x], &[y], 0.0);
            assert!((d2 - 2.0 / (x - y).powi(3)).abs() < 1e-9);
        }
    }

    #[test]
    fn split_sums_to_form() {
        let (g, mu) = leb(1, 6);
        let op = DiscretizedOperator::build(&KernelSpec::hilbert(), &TruncationSpec::smooth(4.0 / 64.0, 1.0), &mu, DEFAULT_MATRIX_BUDGET).unwrap();
        let f = random_function(&g, 1, "f");
        let h = random_function(&g, 2, "g");
        let s = parallel_corona_split(&op, &mu, &mu, &f, &h, 1, 1, 4.0).unwrap();
        assert!(s.relative_error() < 1e-10, "{s:?}");
    }
}
