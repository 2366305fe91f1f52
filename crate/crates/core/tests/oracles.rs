//! Independent oracles: brute-force enumerations, closed forms and dense
//! linear algebra, checked against the library. Values marked "frozen" were
//! produced by the oracle once and are pinned to catch regressions.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use dyadlab::config::{Experiment, ExperimentSpec};
use dyadlab::constants::{a2_classical, op_norm, SampleFamily};
use dyadlab::lattice::{CellSet, DyadicCube, GoodnessParams, Grid};
use dyadlab::measures::{doubling_report, generate, LatticeMeasure, MeasureSpec};
use dyadlab::operators::{frac_integral, poisson};
use dyadlab::verify::{cover_overlap, t1_bundle};

fn measure_on(spec: &str, grid: &Grid) -> LatticeMeasure {
    generate(&MeasureSpec::parse(spec).unwrap(), grid).unwrap()
}

fn spec(sigma: &str, omega: &str, n: usize, depth: u32) -> ExperimentSpec {
    let mut s = ExperimentSpec { id: "oracle".into(), ..Default::default() };
    s.lattice.n = n;
    s.lattice.depth = depth;
    s.measures.sigma = sigma.into();
    s.measures.omega = omega.into();
    s
}

/// Goodness straight from the definition, in exact rationals of the finest
/// cell: Q = [a, a+s) is bad iff some ancestor I = [b, b+t) with t ≥ 2^r s has
/// min(a−b, b+t−a−s) < 2 s^ε t^{1−ε}.
fn good_1d(depth: u32, a: i64, s: i64, r: u32, eps: f64) -> bool {
    let mut t = s << r;
    while t <= 1 << depth {
        let b = a.div_euclid(t) * t;
        let gap = (a - b).min(b + t - a - s) as f64;
        if gap < 2.0 * (s as f64).powf(eps) * (t as f64).powf(1.0 - eps) {
            return false;
        }
        t *= 2;
    }
    true
}

#[test]
fn goodness_matches_brute_force() {
    let depth = 10;
    let g = Grid::unit(1, depth).unwrap();
    let p = GoodnessParams::new(2, 0.4).unwrap();
    // Q = [3/8, 7/16)
    let q = g.cube(4, &[6]);
    assert_eq!(g.is_good(&q, &p), good_1d(depth, 384, 64, 2, 0.4));
    for level in 0..=depth {
        for q in g.cubes_at_level(level) {
            let b = g.cube_box(&q);
            for r in [1, 2, 4] {
                for eps in [0.1, 0.4, 0.8] {
                    let p = GoodnessParams::new(r, eps).unwrap();
                    assert_eq!(g.is_good(&q, &p), good_1d(depth, b.lo[0], b.hi[0] - b.lo[0], r, eps), "{} r={r} eps={eps}", q.token());
                }
            }
        }
    }
}

/// Maximal dyadic intervals whose triple lies inside the open set. A point on
/// the low face of the triple is interior only if the cell to its left is in Ω.
fn whitney_1d(depth: u32, omega: &[bool]) -> BTreeSet<(i64, i64)> {
    let m = 1i64 << depth;
    let inside = |lo: i64, hi: i64| lo >= 1 && hi <= m && (lo - 1..hi).all(|c| omega[c as usize]);
    let mut admissible = Vec::new();
    for level in 0..=depth {
        let s = m >> level;
        for k in 0..(1i64 << level) {
            let a = k * s;
            if inside(a - s, a + 2 * s) {
                admissible.push((a, a + s));
            }
        }
    }
    admissible
        .iter()
        .filter(|(a, b)| !admissible.iter().any(|(c, d)| (c, d) != (a, b) && c <= a && b <= d))
        .copied()
        .collect()
}

fn cubes_as_intervals(g: &Grid, cubes: &[DyadicCube]) -> BTreeSet<(i64, i64)> {
    cubes.iter().map(|q| {
        let b = g.cube_box(q);
        (b.lo[0], b.hi[0])
    }).collect()
}

#[test]
fn whitney_matches_brute_force() {
    let g = Grid::unit(1, 8).unwrap();
    let m = g.cell_count();
    let trimmed: Vec<bool> = (0..m).map(|c| c != 0 && c != m - 1).collect();
    let open = CellSet::from_cells(&g, (0..m).filter(|&c| trimmed[c]));
    assert_eq!(cubes_as_intervals(&g, &g.whitney(&open)), whitney_1d(8, &trimmed));

    let g6 = Grid::unit(1, 6).unwrap();
    let whole = CellSet::full(&g6);
    let out = cubes_as_intervals(&g6, &g6.whitney(&whole));
    assert_eq!(out, whitney_1d(6, &[true; 64]));
    assert!(out.contains(&(16, 24)), "[1/4, 3/8) belongs to the decomposition");
    assert!(!out.contains(&(16, 32)));

    // a few scattered sets
    for seed in 0..20u64 {
        let cells: Vec<bool> = (0..m).map(|c| (c as u64 * 2654435761 + seed * 97) % 11 > 2).collect();
        let open = CellSet::from_cells(&g, (0..m).filter(|&c| cells[c]));
        assert_eq!(cubes_as_intervals(&g, &g.whitney(&open)), whitney_1d(8, &cells), "seed {seed}");
    }
}

#[test]
fn power_mass_matches_closed_form() {
    // density |x|^(1/2) on [-1, 1), mass of [0, 1/2) is (2/3)(1/2)^(3/2)
    let g = Grid::new(1, 12, &[-1.0], 2.0).unwrap();
    let mu = measure_on("power:0.5", &g);
    let q = g.cube(2, &[2]);
    let exact = 2.0 / 3.0 * 0.5f64.powf(1.5);
    assert!((mu.cube_mass(&q) - exact).abs() / exact < 1e-5, "{} vs {exact}", mu.cube_mass(&q));
}

#[test]
fn a2_matches_per_cube_enumeration() {
    let g = Grid::new(1, 10, &[-1.0], 2.0).unwrap();
    let sigma = measure_on("power:0.5", &g);
    let omega = measure_on("lebesgue", &g);
    for alpha in [0.0, 0.5] {
        let fam = SampleFamily::exhaustive(&g, 10, 0, 0);
        let lib = a2_classical(&sigma, &omega, alpha, &fam.cubes, 0).value;
        // sup over cubes of |Q|_σ |Q|_ω / |Q|^(2(1−α)), masses summed cell by cell
        let mut best: f64 = 0.0;
        for level in 0..=10u32 {
            let s = 1usize << (10 - level);
            let len = 2.0 / (1u64 << level) as f64;
            for k in 0..(1usize << level) {
                let ms: f64 = sigma.masses()[k * s..(k + 1) * s].iter().sum();
                let mw: f64 = omega.masses()[k * s..(k + 1) * s].iter().sum();
                best = best.max(ms * mw / len.powf(2.0 * (1.0 - alpha)));
            }
        }
        assert!((lib - best).abs() <= 1e-12 * best, "alpha={alpha}: {lib} vs {best}");
    }
}

#[test]
fn cascade_doubling_constant_by_sweep() {
    let mu = measure_on("cascade:0.3:7", &Grid::unit(1, 10).unwrap());
    let rep = doubling_report(&mu).unwrap();
    assert!(rep.c_doub <= 1.0 / 0.3 + 1e-12, "c_doub = {}", rep.c_doub);
    assert!(rep.c_doub >= 2.0);
}

#[test]
fn fractional_integral_at_midpoint() {
    // ∫_0^1 |1/2 − y|^(−1/2) dy = 2√2. The point sits on a cell face, so the
    // midpoint rule on the neighbouring cell converges like h^(1/2).
    let exact = 2.0 * 2f64.sqrt();
    let value = |depth: u32| {
        let g = Grid::unit(1, depth).unwrap();
        let nu = LatticeMeasure::lebesgue(&g);
        frac_integral(&g, nu.masses(), &[0.5], 0.5)
    };
    let v: Vec<f64> = [8, 10, 12, 14].into_iter().map(value).collect();
    let errs: Vec<f64> = v.iter().map(|x| (x - exact).abs() / exact).collect();
    for w in errs.windows(2) {
        // two levels finer should halve the error
        assert!(w[1] < 0.6 * w[0], "{errs:?}");
    }
    // Richardson with the known order: e(h/4) = e(h)/2
    let extrapolated = 2.0 * v[3] - v[2];
    assert!((extrapolated - exact).abs() / exact < 1e-5, "{extrapolated} vs {exact}");
}

#[test]
fn poisson_of_lebesgue_tends_to_two() {
    // ∫ ℓ/(ℓ+|x|)² dx = 2 on the line; a bounded root loses the tail
    let mut last = 0.0;
    for depth in [6, 8, 10, 12] {
        let g = Grid::unit(1, depth).unwrap();
        let mu = LatticeMeasure::lebesgue(&g);
        let mid = g.cube(depth - 5, &[1i64 << (depth - 6)]);
        let p = poisson(&g, mu.masses(), &mid, 0.0);
        assert!(p <= 2.0 && p > last, "depth {depth}: {p}");
        last = p;
    }
    assert!(last > 1.9, "{last}");
}

#[test]
fn cover_overlap_within_packing_bound() {
    let (count, bound) = cover_overlap(1, 0.25);
    assert!(count as f64 <= bound && bound <= 10.0, "{count} of {bound}");
}

#[test]
fn op_norm_matches_dense_svd_in_two_dimensions() {
    for (s, w) in [("lebesgue", "lebesgue"), ("power:0.5", "cascade:0.2:3"), ("cascade:0.15:1", "power:0.25")] {
        let mut sp = spec(s, w, 2, 4);
        sp.operator.kernel = "riesz:0".into();
        let ex = Experiment::new(&sp).unwrap();
        let op = ex.operator().unwrap();
        let m = ex.grid.cell_count();
        assert_eq!(m, 256);
        let dense = DMatrix::from_row_slice(m, m, &op.weighted_matrix(&ex.omega));
        let oracle = dense.singular_values().max();
        let mine = op_norm(&op, &ex.omega, 0).report.value;
        assert!((mine - oracle).abs() <= 1e-6 * oracle, "({s},{w}): {mine} vs {oracle}");
    }
}

// frozen from the dense SVD oracle and the reference bundle at the default config
const FROZEN_NORM_DX_DX_L9: f64 = 2.993_274_249_487_202;
const FROZEN_NBICT_RATIO_DX_DX_L9: f64 = 0.466_090_094_865_892_9;

#[test]
fn frozen_reference_values() {
    let ex = Experiment::new(&spec("lebesgue", "lebesgue", 1, 9)).unwrap();
    let op = ex.operator().unwrap();
    let m = ex.grid.cell_count();
    let oracle = DMatrix::from_row_slice(m, m, &op.weighted_matrix(&ex.omega)).singular_values().max();
    let fam = SampleFamily::exhaustive(&ex.grid, 4, 2, 0);
    let ratio = t1_bundle(&ex, &fam, 2).unwrap().nbict_ratio();
    assert!((oracle - FROZEN_NORM_DX_DX_L9).abs() <= 1e-9 * oracle, "{oracle:e}");
    assert!((ratio - FROZEN_NBICT_RATIO_DX_DX_L9).abs() <= 1e-9 * ratio, "{ratio:e}");
}
