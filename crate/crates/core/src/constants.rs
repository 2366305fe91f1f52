//! Sampled estimators for the weight, testing and norm constants.
//!
//! Every supremum is a max over an explicit witness family, so comparisons
//! between constants are only meaningful on shared families; [`SampleFamily`]
//! is the carrier for that.

use rand::Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::alpert::monomials;
use crate::lattice::{box_cells, CellSet, DyadicCube, Grid, MAX_DIM};
use crate::measures::{safe_ratio, LatticeMeasure};
use crate::operators::{poisson, poisson_m, DiscretizedOperator, KernelSpec, TruncationSpec};
use crate::rng::substream;
use crate::sampling::{sample_cubes, standard_subsets, Subset, SubsetKind};

fn ser_value<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantReport {
    pub name: String,
    #[serde(serialize_with = "ser_value")]
    pub value: f64,
    /// the supremum was sampled, not exhausted
    pub lower_bound: bool,
    pub witness: Option<String>,
    pub seed: u64,
    pub samples: usize,
    pub params: Vec<(String, String)>,
}

impl ConstantReport {
    pub fn new(name: &str, seed: u64) -> Self {
        ConstantReport { name: name.into(), value: 0.0, lower_bound: true, witness: None, seed, samples: 0, params: Vec::new() }
    }

    fn offer(&mut self, v: f64, witness: impl FnOnce() -> String) {
        self.samples += 1;
        // strict > keeps the first witness on ties, which keeps merges deterministic
        if v > self.value || (v.is_nan() && !self.value.is_nan()) {
            self.value = v;
            self.witness = Some(witness());
        }
    }

    pub fn param(mut self, k: &str, v: impl ToString) -> Self {
        self.params.push((k.into(), v.to_string()));
        self
    }
}

/// Cubes and subsets shared by every estimator of one experiment.
#[derive(Clone, Debug)]
pub struct SampleFamily {
    pub seed: u64,
    pub cubes: Vec<DyadicCube>,
    /// standard subsets per cube, aligned with `cubes`
    pub subsets: Vec<Vec<Subset>>,
}

impl SampleFamily {
    /// Every dyadic cube down to `max_level` plus the standard subset mix of each.
    pub fn exhaustive(grid: &Grid, max_level: u32, random_subsets: usize, seed: u64) -> Self {
        let cubes = grid.all_cubes(max_level.min(grid.depth()));
        Self::from_cubes(grid, cubes, random_subsets, seed)
    }

    /// `count` sampled cubes with levels in `[0, max_level]`, always including the root.
    pub fn sampled(grid: &Grid, count: usize, max_level: u32, random_subsets: usize, seed: u64) -> Self {
        let mut cubes = sample_cubes(grid, count, 0, max_level, seed);
        if !cubes.contains(&grid.top()) {
            cubes.insert(0, grid.top());
        }
        Self::from_cubes(grid, cubes, random_subsets, seed)
    }

    pub fn from_cubes(grid: &Grid, cubes: Vec<DyadicCube>, random_subsets: usize, seed: u64) -> Self {
        let subsets = cubes.iter().map(|q| standard_subsets(grid, q, random_subsets, seed)).collect();
        SampleFamily { seed, cubes, subsets }
    }
}

fn cube_volume_factor(grid: &Grid, q: &DyadicCube, alpha: f64) -> f64 {
    grid.volume_of(q).powf(1.0 - alpha / grid.n() as f64)
}

// ---- Muckenhoupt-type ----------------------------------------------------------

/// `A₂^α = max (|Q|_σ/|Q|^{1−α/n})(|Q|_ω/|Q|^{1−α/n})`.
pub fn a2_classical(sigma: &LatticeMeasure, omega: &LatticeMeasure, alpha: f64, cubes: &[DyadicCube], seed: u64) -> ConstantReport {
    let g = sigma.grid();
    let mut r = ConstantReport::new("A2", seed).param("alpha", alpha);
    for q in cubes {
        let v = cube_volume_factor(g, q, alpha);
        r.offer(sigma.cube_mass(q) / v * (omega.cube_mass(q) / v), || q.token());
    }
    r
}

/// `(𝒜₂^α, 𝒜₂^{α,*})` with Poisson tails cut at the root.
pub fn a2_one_tailed(sigma: &LatticeMeasure, omega: &LatticeMeasure, alpha: f64, cubes: &[DyadicCube], seed: u64) -> (ConstantReport, ConstantReport) {
    let g = sigma.grid();
    let vals: Vec<(f64, f64)> = cubes
        .par_iter()
        .map(|q| {
            let v = cube_volume_factor(g, q, alpha);
            (
                poisson(g, sigma.masses(), q, alpha) * omega.cube_mass(q) / v,
                sigma.cube_mass(q) / v * poisson(g, omega.masses(), q, alpha),
            )
        })
        .collect();
    let mut a = ConstantReport::new("A2_tailed", seed).param("alpha", alpha).param("tail", "truncated");
    let mut b = ConstantReport::new("A2_tailed_dual", seed).param("alpha", alpha).param("tail", "truncated");
    for (q, (x, y)) in cubes.iter().zip(vals) {
        a.offer(x, || q.token());
        b.offer(y, || q.token());
    }
    (a, b)
}

// ---- pivotal ------------------------------------------------------------------

fn restricted(mu: &LatticeMeasure, q: &DyadicCube) -> Vec<f64> {
    let g = mu.grid();
    let mut v = vec![0.0; g.cell_count()];
    for c in box_cells(g, &g.cube_box(q)) {
        v[c] = mu.cell_mass(c);
    }
    v
}

/// One pivotal term `P_κ^α(Q_r, 1_Q μ)² |Q_r|_ν`.
fn pivotal_term(g: &Grid, mu_q: &[f64], nu: &LatticeMeasure, qr: &DyadicCube, alpha: f64, kappa: u32) -> f64 {
    let p = poisson_m(g, mu_q, qr, alpha, kappa);
    p * p * nu.cube_mass(qr)
}

/// Best dyadic subdecomposition of `q`: best(I) = max(term(I), Σ best(children)).
/// Returns the value and the chosen cubes.
fn pivotal_dp(g: &Grid, mu_q: &[f64], nu: &LatticeMeasure, q: &DyadicCube, alpha: f64, kappa: u32, max_level: u32) -> (f64, Vec<DyadicCube>) {
    let term = pivotal_term(g, mu_q, nu, q, alpha, kappa);
    if q.level >= max_level {
        return (term, vec![*q]);
    }
    let mut s = 0.0;
    let mut pick = Vec::new();
    for c in g.children(q).expect("level checked") {
        let (v, p) = pivotal_dp(g, mu_q, nu, &c, alpha, kappa, max_level);
        s += v;
        pick.extend(p);
    }
    if term >= s {
        (term, vec![*q])
    } else {
        (s, pick)
    }
}

/// Subdecomposition generators for the pivotal sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subdecomposition {
    /// all descendants `k` levels down, k = 0..=3
    UniformSplits,
    /// Whitney cubes of random open subsets of Q
    Whitney,
    /// exact optimum over dyadic subdecompositions (dynamic programming)
    DyadicOptimum,
}

/// `𝒱₂^{α,κ}` (σ-tailed, `dual = false`) or `𝒱₂^{α,κ,*}` (`dual = true`); the
/// reported value is the square root of the sampled supremum.
pub fn pivotal(
    sigma: &LatticeMeasure,
    omega: &LatticeMeasure,
    alpha: f64,
    kappa: u32,
    dual: bool,
    cubes: &[DyadicCube],
    generators: &[Subdecomposition],
    seed: u64,
) -> ConstantReport {
    let (mu, nu) = if dual { (omega, sigma) } else { (sigma, omega) };
    let g = sigma.grid();
    let dp_floor = g.depth().min(g.depth().saturating_sub(0));
    let results: Vec<(f64, String)> = cubes
        .par_iter()
        .map(|q| {
            let mq = mu.cube_mass(q);
            if mq <= 0.0 {
                return (0.0, String::new());
            }
            let mu_q = restricted(mu, q);
            let mut best = (0.0f64, String::new());
            let mut consider = |v: f64, label: String| {
                if v > best.0 {
                    best = (v, label);
                }
            };
            for gen in generators {
                match gen {
                    Subdecomposition::UniformSplits => {
                        for k in 0..=3u32 {
                            if q.level + k > g.depth() {
                                break;
                            }
                            let s: f64 = g
                                .descendants(q, q.level + k)
                                .iter()
                                .filter(|c| c.level == q.level + k)
                                .map(|c| pivotal_term(g, &mu_q, nu, c, alpha, kappa))
                                .sum();
                            consider(s / mq, format!("{} split{k}", q.token()));
                        }
                    }
                    Subdecomposition::Whitney => {
                        let mut rng = substream(seed, &format!("pivotal-whitney/{}", q.token()));
                        let qb = g.cube_box(q);
                        for t in 0..4 {
                            let p: f64 = rng.gen_range(0.3..0.95);
                            let open = CellSet::from_cells(g, box_cells(g, &qb).filter(|_| rng.gen::<f64>() < p));
                            let s: f64 = g
                                .whitney(&open)
                                .iter()
                                .filter(|c| g.contains(q, c))
                                .map(|c| pivotal_term(g, &mu_q, nu, c, alpha, kappa))
                                .sum();
                            consider(s / mq, format!("{} whitney#{t}", q.token()));
                        }
                    }
                    Subdecomposition::DyadicOptimum => {
                        let (v, pick) = pivotal_dp(g, &mu_q, nu, q, alpha, kappa, dp_floor);
                        consider(v / mq, format!("{} dp[{}]", q.token(), pick.len()));
                    }
                }
            }
            best
        })
        .collect();
    let name = if dual { "V2_dual" } else { "V2" };
    let mut r = ConstantReport::new(name, seed).param("alpha", alpha).param("kappa", kappa);
    for (v, w) in results {
        r.offer(v, || w);
    }
    r.value = r.value.sqrt();
    r
}

// ---- testing -------------------------------------------------------------------

/// Values of `1_Q m_Q^β` on the lattice, for every |β| < κ.
pub fn cube_test_functions(grid: &Grid, q: &DyadicCube, kappa: usize) -> Vec<Vec<f64>> {
    let n = grid.n();
    let c = grid.center_of(q);
    let l = grid.side_of(q);
    monomials(n, kappa)
        .iter()
        .map(|b| {
            let mut f = vec![0.0; grid.cell_count()];
            for cell in box_cells(grid, &grid.cube_box(q)) {
                let x = grid.cell_center(cell);
                let mut v = 1.0;
                for a in 0..n {
                    v *= ((x[a] - c[a]) / l).powi(b[a] as i32);
                }
                f[cell] = v;
            }
            f
        })
        .collect()
}

fn l2_on(omega: &LatticeMeasure, v: &[f64], q: Option<&DyadicCube>) -> f64 {
    match q {
        Some(q) => {
            let g = omega.grid();
            box_cells(g, &g.cube_box(q)).map(|c| v[c] * v[c] * omega.cell_mass(c)).sum()
        }
        None => omega.l2_norm_sq(v),
    }
}

/// `(𝔗^{(κ)}, 𝔉𝔗^{(κ)})`: square roots of
/// `max_{Q,β} ∫_Q |T_σ(1_Q m^β)|² dω / |Q|_σ` and the same over the root.
pub fn cube_testing(op: &DiscretizedOperator, omega: &LatticeMeasure, kappa: usize, cubes: &[DyadicCube], seed: u64) -> (ConstantReport, ConstantReport) {
    let g = op.grid();
    let results: Vec<Vec<(f64, f64, String)>> = cubes
        .par_iter()
        .map(|q| {
            let qs: f64 = box_cells(g, &g.cube_box(q)).map(|c| op.source_masses()[c]).sum();
            if qs <= 0.0 {
                return Vec::new();
            }
            cube_test_functions(g, q, kappa)
                .iter()
                .enumerate()
                .map(|(b, f)| {
                    let tf = op.apply(f);
                    (l2_on(omega, &tf, Some(q)) / qs, l2_on(omega, &tf, None) / qs, format!("{} beta#{b}", q.token()))
                })
                .collect()
        })
        .collect();
    let mut t = ConstantReport::new("T", seed).param("kappa", kappa);
    let mut ft = ConstantReport::new("FT", seed).param("kappa", kappa);
    for (loc, full, w) in results.into_iter().flatten() {
        t.offer(loc, || w.clone());
        ft.offer(full, || w);
    }
    t.value = t.value.sqrt();
    ft.value = ft.value.sqrt();
    (t, ft)
}

fn subset_indicator(grid: &Grid, cells: &[usize]) -> Vec<f64> {
    let mut f = vec![0.0; grid.cell_count()];
    for &c in cells {
        f[c] = 1.0;
    }
    f
}

/// Subset cells, where the "σ" and "ω" roles refer to `source` and `target`.
fn cells_of(s: &Subset, g: &Grid, source: &LatticeMeasure, target: &LatticeMeasure) -> Vec<usize> {
    s.cells(g, source, target)
}

/// `𝔗^{IC}`: square root of `max (1/|Q|_σ) ∫_Q |T(1_E σ)|² dω` over the family's subsets.
pub fn indicator_testing(op: &DiscretizedOperator, sigma: &LatticeMeasure, omega: &LatticeMeasure, family: &SampleFamily) -> ConstantReport {
    let g = op.grid();
    let results: Vec<Vec<(f64, String)>> = family
        .cubes
        .par_iter()
        .zip(&family.subsets)
        .map(|(q, subs)| {
            let qs = sigma.cube_mass(q);
            if qs <= 0.0 {
                return Vec::new();
            }
            subs.iter()
                .map(|s| {
                    let f = subset_indicator(g, &cells_of(s, g, sigma, omega));
                    let tf = op.apply(&f);
                    (l2_on(omega, &tf, Some(q)) / qs, serde_json::to_string(s).expect("subset json"))
                })
                .collect()
        })
        .collect();
    let mut r = ConstantReport::new("T_IC", family.seed);
    for (v, w) in results.into_iter().flatten() {
        r.offer(v, || w);
    }
    r.value = r.value.sqrt();
    r
}

/// BICT, its sign-optimal variant, and the restricted weak type constant, all
/// on the same (E, F) pairs: F runs over the cube's subsets plus the sign sets
/// `F± = Q ∩ {±T(1_E σ) > 0}`.
#[derive(Clone, Debug, Serialize)]
pub struct BilinearReports {
    pub bict: ConstantReport,
    pub sign_optimal: ConstantReport,
    pub rwt: ConstantReport,
}

pub fn bict(op: &DiscretizedOperator, sigma: &LatticeMeasure, omega: &LatticeMeasure, family: &SampleFamily) -> BilinearReports {
    let g = op.grid();
    type Row = (f64, f64, f64, String, String, String);
    let rows: Vec<Vec<Row>> = family
        .cubes
        .par_iter()
        .zip(&family.subsets)
        .map(|(q, subs)| {
            let (qs, qw) = (sigma.cube_mass(q), omega.cube_mass(q));
            let norm = (qs * qw).sqrt();
            let qcells: Vec<usize> = box_cells(g, &g.cube_box(q)).collect();
            let fsets: Vec<Vec<usize>> = subs.iter().map(|s| cells_of(s, g, sigma, omega)).collect();
            let mut out = Vec::new();
            for (es, e) in subs.iter().zip(&fsets) {
                let es_mass = sigma.set_mass(e);
                let tf = op.apply(&subset_indicator(g, e));
                let plus: Vec<usize> = qcells.iter().copied().filter(|&c| tf[c] > 0.0).collect();
                let minus: Vec<usize> = qcells.iter().copied().filter(|&c| tf[c] < 0.0).collect();
                let integral = |cells: &[usize]| cells.iter().map(|&c| tf[c] * omega.cell_mass(c)).sum::<f64>();
                let signed: f64 = integral(&plus) - integral(&minus);
                let ew = serde_json::to_string(es).expect("subset json");
                let mut candidates: Vec<(Vec<usize>, String)> =
                    fsets.iter().zip(subs).map(|(f, s)| (f.clone(), serde_json::to_string(s).expect("subset json"))).collect();
                candidates.push((plus.clone(), serde_json::to_string(&Subset::new(q, SubsetKind::Cells { cells: plus.clone() })).unwrap()));
                candidates.push((minus.clone(), serde_json::to_string(&Subset::new(q, SubsetKind::Cells { cells: minus.clone() })).unwrap()));
                for (fc, fw) in candidates {
                    let val = integral(&fc).abs();
                    let fw_mass = omega.set_mass(&fc);
                    let b = safe_ratio(val, norm);
                    let rw = if es_mass > 0.0 && fw_mass > 0.0 { val / (es_mass * fw_mass).sqrt() } else { 0.0 };
                    out.push((b, rw, f64::NAN, ew.clone(), fw, String::new()));
                }
                out.push((f64::NAN, f64::NAN, safe_ratio(signed, norm), ew.clone(), String::new(), "sign".into()));
            }
            out
        })
        .collect();
    let mut b = ConstantReport::new("BICT", family.seed);
    let mut s = ConstantReport::new("BICT_sign", family.seed);
    let mut w = ConstantReport::new("N_rw", family.seed);
    for (bv, rv, sv, e, f, _) in rows.into_iter().flatten() {
        if !bv.is_nan() {
            b.offer(bv, || format!("E={e} F={f}"));
            w.offer(rv, || format!("E={e} F={f}"));
        }
        if !sv.is_nan() {
            s.offer(sv, || format!("E={e} h=sign"));
        }
    }
    BilinearReports { bict: b, sign_optimal: s, rwt: w }
}

/// One weak-boundedness sample together with the bound it must respect.
#[derive(Clone, Debug, Serialize)]
pub struct WbpSample {
    pub q: String,
    pub q_prime: String,
    pub value: f64,
    /// Σ|c_β| of the source polynomial
    pub coefficient_l1: f64,
}

/// Adjacent pairs: for each cube Q', its same-level neighbours and their
/// children that lie in 3Q'∖Q'.
pub fn wbp_pairs(grid: &Grid, cubes: &[DyadicCube]) -> Vec<(DyadicCube, DyadicCube)> {
    let n = grid.n();
    let mut out = Vec::new();
    for qp in cubes {
        let k = 1i64 << qp.level;
        for off in 0..3usize.pow(n as u32) {
            let mut idx = [0i64; MAX_DIM];
            let mut r = off;
            let mut zero = true;
            let mut inside = true;
            for a in 0..n {
                let d = (r % 3) as i64 - 1;
                r /= 3;
                zero &= d == 0;
                idx[a] = qp.index[a] + d;
                inside &= idx[a] >= 0 && idx[a] < k;
            }
            if zero || !inside {
                continue;
            }
            let q = grid.cube(qp.level, &idx[..n]);
            out.push((q, *qp));
            if q.level < grid.depth() {
                // one child of the neighbour, the one touching Q'
                let ch = grid.children(&q).expect("level checked");
                out.push((ch[0], *qp));
            }
        }
    }
    out
}

/// `𝒲ℬ𝒫^{(κ₁,κ₂)}`: max of `|∫_{Q'} T_σ(1_Q f) g dω| / √(|Q|_σ|Q'|_ω)` with
/// f, g normalized polynomials (sup over the closed cube = 1).
pub fn wbp(
    op: &DiscretizedOperator,
    sigma: &LatticeMeasure,
    omega: &LatticeMeasure,
    kappa1: usize,
    kappa2: usize,
    pairs: &[(DyadicCube, DyadicCube)],
    polys: usize,
    seed: u64,
) -> (ConstantReport, Vec<WbpSample>) {
    let g = op.grid();
    let n = g.n();
    let samples: Vec<Vec<WbpSample>> = pairs
        .par_iter()
        .map(|(q, qp)| {
            let qs = sigma.cube_mass(q);
            let qw = omega.cube_mass(qp);
            if qs <= 0.0 || qw <= 0.0 {
                return Vec::new();
            }
            let mut rng = substream(seed, &format!("wbp/{}/{}", q.token(), qp.token()));
            let fb = cube_test_functions(g, q, kappa1);
            let gb = cube_test_functions(g, qp, kappa2);
            let draw = |rng: &mut crate::rng::Rng, m: usize, first: bool| -> Vec<f64> {
                if first {
                    let mut e = vec![0.0; m];
                    e[0] = 1.0;
                    e
                } else {
                    (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()
                }
            };
            let mut out = Vec::new();
            for t in 0..polys.max(1) {
                let cf = draw(&mut rng, fb.len(), t == 0);
                let cg = draw(&mut rng, gb.len(), t == 0);
                let sf = poly_sup(n, kappa1, &cf);
                let sg = poly_sup(n, kappa2, &cg);
                if sf <= 0.0 || sg <= 0.0 {
                    continue;
                }
                let cf: Vec<f64> = cf.iter().map(|c| c / sf).collect();
                let cg: Vec<f64> = cg.iter().map(|c| c / sg).collect();
                let f = combine(&fb, &cf);
                let gv = combine(&gb, &cg);
                let tf = op.apply(&f);
                let val: f64 = box_cells(g, &g.cube_box(qp)).map(|c| tf[c] * gv[c] * omega.cell_mass(c)).sum();
                out.push(WbpSample {
                    q: q.token(),
                    q_prime: qp.token(),
                    value: val.abs() / (qs * qw).sqrt(),
                    coefficient_l1: cf.iter().map(|c| c.abs()).sum(),
                });
            }
            out
        })
        .collect();
    let samples: Vec<WbpSample> = samples.into_iter().flatten().collect();
    let mut r = ConstantReport::new("WBP", seed).param("kappa1", kappa1).param("kappa2", kappa2);
    for s in &samples {
        r.offer(s.value, || format!("{} {}", s.q, s.q_prime));
    }
    (r, samples)
}

fn combine(basis: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (b, w) in basis.iter().zip(c) {
        for (o, v) in out.iter_mut().zip(b) {
            *o += w * v;
        }
    }
    out
}

/// Sup over the closed scaled cube [−½,½]^n of a polynomial in scaled monomials.
fn poly_sup(n: usize, kappa: usize, c: &[f64]) -> f64 {
    let betas = monomials(n, kappa);
    let k: usize = match n {
        1 => 65,
        2 => 17,
        _ => 9,
    };
    let mut best: f64 = 0.0;
    for mut r in 0..k.pow(n as u32) {
        let mut u = [0.0; MAX_DIM];
        for a in 0..n {
            u[a] = -0.5 + (r % k) as f64 / (k - 1) as f64;
            r /= k;
        }
        let v: f64 = c.iter().zip(&betas).map(|(w, b)| w * (0..n).map(|a| u[a].powi(b[a] as i32)).product::<f64>()).sum();
        best = best.max(v.abs());
    }
    best
}

// ---- operator norm ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub report: ConstantReport,
    pub converged: bool,
    pub iterations: usize,
}

/// Relative tolerance on the Ritz residual.
pub const NORM_TOLERANCE: f64 = 1e-10;
const LANCZOS_BLOCK: usize = 64;
const LANCZOS_RESTARTS: usize = 3;

fn matvec(b: &[f64], m: usize, x: &[f64]) -> Vec<f64> {
    b.par_chunks(m).map(|row| row.iter().zip(x).map(|(a, v)| a * v).sum()).collect()
}

fn matvec_t(b: &[f64], m: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, row) in b.chunks(m).enumerate() {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest singular value of a dense square matrix by Lanczos on BᵀB with full
/// reorthogonalization, restarted from the current Ritz vector.
pub fn largest_singular_value(b: &[f64], m: usize, seed: u64) -> (f64, bool, usize) {
    if m == 0 || b.iter().all(|&v| v == 0.0) {
        return (0.0, true, 0);
    }
    let mut rng = substream(seed, "op-norm");
    let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut theta = 0.0;
    let mut iters = 0;
    for _ in 0..=LANCZOS_RESTARTS {
        let nv = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let steps = LANCZOS_BLOCK.min(m);
        let mut q: Vec<Vec<f64>> = vec![v.clone()];
        let mut alpha = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut last_w = Vec::new();
        for j in 0..steps {
            iters += 1;
            let mut w = matvec_t(b, m, &matvec(b, m, &q[j]));
            let a = dot(&w, &q[j]);
            alpha.push(a);
            // full reorthogonalization, twice
            for _ in 0..2 {
                for qk in &q {
                    let c = dot(&w, qk);
                    w.iter_mut().zip(qk).for_each(|(x, y)| *x -= c * y);
                }
            }
            let bn = dot(&w, &w).sqrt();
            if j + 1 == steps || bn <= 1e-14 * a.abs().max(1e-300) {
                last_w = w;
                beta.push(bn);
                break;
            }
            beta.push(bn);
            q.push(w.iter().map(|x| x / bn).collect());
        }
        let k = alpha.len();
        let mut t = nalgebra::DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = nalgebra::SymmetricEigen::new(t);
        let (imax, &tmax) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("nonempty");
        let s = eig.eigenvectors.column(imax);
        theta = tmax;
        let resid = beta[k - 1] * s[k - 1].abs();
        let _ = &last_w;
        // Ritz vector for the restart
        let mut nv = vec![0.0; m];
        for (i, qi) in q.iter().enumerate().take(k) {
            nv.iter_mut().zip(qi).for_each(|(x, y)| *x += s[i] * y);
        }
        v = nv;
        if resid <= NORM_TOLERANCE * theta.abs() {
            return (theta.max(0.0).sqrt(), true, iters);
        }
    }
    (theta.max(0.0).sqrt(), false, iters)
}

/// 𝔑: the L²(σ) → L²(ω) norm of the discretized operator.
pub fn op_norm(op: &DiscretizedOperator, omega: &LatticeMeasure, seed: u64) -> NormReport {
    let b = op.weighted_matrix(omega);
    let (v, converged, iterations) = largest_singular_value(&b, op.size(), seed);
    let mut report = ConstantReport::new("N", seed)
        .param("kernel", op.kernel().label())
        .param("adjoint", op.is_adjoint());
    report.value = v;
    report.samples = iterations;
    report.lower_bound = false;
    report.witness = Some("top singular vector".into());
    NormReport { report, converged, iterations }
}

// ---- cancellation -----------------------------------------------------------------

/// Ladder entry: inner radius ε, outer radius N, center cell x₀.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BallSpec {
    pub eps: f64,
    pub radius: f64,
    pub center: usize,
}

/// Dyadic ladder of balls at the given centers with ε ≥ 2 cell diameters, each
/// ball inside the root.
pub fn cancellation_ladder(grid: &Grid, centers: &[usize]) -> Vec<BallSpec> {
    let n = grid.n();
    let floor = 2.0 * grid.cell_diameter();
    let mut out = Vec::new();
    for &c in centers {
        let x = grid.cell_center(c);
        let room = (0..n)
            .map(|a| (x[a] - grid.origin()[a]).min(grid.origin()[a] + grid.side() - x[a]))
            .fold(f64::INFINITY, f64::min);
        let mut radius = floor * 2.0;
        while radius <= room {
            let mut eps = floor;
            while eps < radius {
                out.push(BallSpec { eps, radius, center: c });
                eps *= 2.0;
            }
            radius *= 2.0;
        }
    }
    out
}

/// `(𝔄_K, 𝔄_K^{(κ)})` over a ball ladder, rough annulus truncation. The
/// polynomial variant maximizes over p = 1, the monomials, and `polys` random
/// combinations (centered at x₀, scaled by N, normalized on the ball's cells);
/// the p = 1 term reuses the plain value so the inequality holds exactly.
pub fn cancellation_constant(
    kernel: &KernelSpec,
    sigma: &LatticeMeasure,
    omega: &LatticeMeasure,
    ladder: &[BallSpec],
    kappa: usize,
    polys: usize,
    seed: u64,
) -> (ConstantReport, ConstantReport) {
    let g = sigma.grid();
    let n = g.n();
    let betas = monomials(n, kappa);
    let rows: Vec<(f64, f64, String)> = ladder
        .par_iter()
        .map(|b| {
            let x0 = g.cell_center(b.center);
            let ball: Vec<usize> = (0..g.cell_count())
                .filter(|&c| {
                    let y = g.cell_center(c);
                    (0..n).map(|a| (y[a] - x0[a]).powi(2)).sum::<f64>().sqrt() < b.radius
                })
                .collect();
            let mass_b = sigma.set_mass(&ball);
            let w = format!("x0={} eps={} N={}", b.center, b.eps, b.radius);
            if mass_b <= 0.0 {
                return (0.0, 0.0, w);
            }
            let trunc = TruncationSpec::rough(b.eps, b.radius);
            // polynomial weights on the ball's cells
            let mut rng = substream(seed, &format!("cancel/{w}"));
            let mono: Vec<Vec<f64>> = ball
                .iter()
                .map(|&c| {
                    let y = g.cell_center(c);
                    betas
                        .iter()
                        .map(|bt| (0..n).map(|a| ((y[a] - x0[a]) / b.radius).powi(bt[a] as i32)).product())
                        .collect()
                })
                .collect();
            let mut coeffs: Vec<Vec<f64>> = Vec::new();
            for k in 1..betas.len() {
                let mut e = vec![0.0; betas.len()];
                e[k] = 1.0;
                coeffs.push(e);
            }
            for _ in 0..polys {
                coeffs.push((0..betas.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            let weights: Vec<Vec<f64>> = coeffs
                .iter()
                .filter_map(|cf| {
                    let vals: Vec<f64> = mono.iter().map(|mv| dot(mv, cf)).collect();
                    let sup = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    (sup > 0.0).then(|| vals.iter().map(|v| v / sup).collect())
                })
                .collect();
            let mut plain = 0.0;
            let mut poly = vec![0.0; weights.len()];
            for &x in &ball {
                let xc = g.cell_center(x);
                let mut inner = 0.0;
                let mut inner_p = vec![0.0; weights.len()];
                for (k, &y) in ball.iter().enumerate() {
                    let yc = g.cell_center(y);
                    let d = (0..n).map(|a| (xc[a] - yc[a]).powi(2)).sum::<f64>().sqrt();
                    let t = trunc.weight(d);
                    if t == 0.0 {
                        continue;
                    }
                    let kv = kernel.eval(&xc[..n], &yc[..n]) * sigma.cell_mass(y);
                    inner += kv;
                    for (ip, wv) in inner_p.iter_mut().zip(&weights) {
                        *ip += kv * wv[k];
                    }
                }
                let wx = omega.cell_mass(x);
                plain += inner * inner * wx;
                for (p, ip) in poly.iter_mut().zip(&inner_p) {
                    *p += ip * ip * wx;
                }
            }
            let plain = plain / mass_b;
            let best_poly = poly.iter().map(|p| p / mass_b).fold(plain, f64::max);
            (plain, best_poly, w)
        })
        .collect();
    let mut a = ConstantReport::new("A_K", seed);
    let mut ak = ConstantReport::new("A_K_poly", seed).param("kappa", kappa);
    for (p, q, w) in rows {
        a.offer(p, || w.clone());
        ak.offer(q, || w);
    }
    (a, ak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::DEFAULT_MATRIX_BUDGET;

    #[test]
    fn lebesgue_a2_is_one() {
        let g = Grid::unit(1, 6).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let cubes = g.all_cubes(6);
        assert_eq!(a2_classical(&mu, &mu, 0.0, &cubes, 0).value, 1.0);
        let two = mu.scaled(2.0).unwrap();
        assert_eq!(a2_classical(&mu, &two, 0.0, &cubes, 0).value, 2.0);
    }

    #[test]
    fn tailed_a2_lebesgue_below_two() {
        let g = Grid::new(1, 8, &[-8.0], 16.0).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let q = g.cube(4, &[8]);
        let (a, _) = a2_one_tailed(&mu, &mu, 0.0, &[q], 0);
        assert!(a.value <= 2.0 && a.value > 1.5, "{}", a.value);
    }

    #[test]
    fn zero_operator_constants_vanish() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let op = DiscretizedOperator::build(&KernelSpec::zero(1), &TruncationSpec::smooth(0.2, 0.2), &mu, DEFAULT_MATRIX_BUDGET).unwrap();
        assert_eq!(op_norm(&op, &mu, 0).report.value, 0.0);
        let fam = SampleFamily::exhaustive(&g, 2, 1, 0);
        let (t, ft) = cube_testing(&op, &mu, 2, &fam.cubes, 0);
        assert_eq!((t.value, ft.value), (0.0, 0.0));
        assert_eq!(bict(&op, &mu, &mu, &fam).bict.value, 0.0);
    }

    #[test]
    fn lanczos_on_diagonal() {
        let m = 5;
        let mut b = vec![0.0; m * m];
        for i in 0..m {
            b[i * m + i] = (i + 1) as f64;
        }
        let (s, ok, _) = largest_singular_value(&b, m, 1);
        assert!(ok);
        assert!((s - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pivotal_single_cube_term() {
        let g = Grid::unit(1, 5).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let q = g.cube(1, &[0]);
        let r = pivotal(&mu, &mu, 0.0, 1, false, &[q], &[Subdecomposition::UniformSplits], 0);
        let p = poisson_m(&g, &restricted(&mu, &q), &q, 0.0, 1);
        assert!(r.value * r.value >= p * p * mu.cube_mass(&q) / mu.cube_mass(&q) - 1e-15);
    }
}
