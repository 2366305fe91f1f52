use proptest::prelude::*;

use dyadlab::alpert::{build_alpert, gram_residual, moment_residual};
use dyadlab::config::{Experiment, ExperimentSpec};
use dyadlab::corona::{parallel_corona_split, random_function, rectangle_decomposition};
use dyadlab::lattice::{GoodnessParams, Grid};
use dyadlab::measures::{generate, LatticeMeasure, MeasureSpec};
use dyadlab::verify::{CheckRecord, Status};

fn measure(spec: &str, n: usize, depth: u32) -> LatticeMeasure {
    generate(&MeasureSpec::parse(spec).unwrap(), &Grid::unit(n, depth).unwrap()).unwrap()
}

/// Measure families valid in every dimension up to 2.
fn family() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("lebesgue".to_string()),
        (0.0f64..0.9).prop_map(|a| format!("power:{a:.3}")),
        (0.1f64..0.25, 0u64..1000).prop_map(|(p, s)| format!("cascade:{p:.3}:{s}")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn children_partition_parent(n in 1usize..=3, level in 0u32..5, pick in any::<u64>()) {
        let g = Grid::unit(n, 6).unwrap();
        let cubes = g.cubes_at_level(level);
        let q = cubes[(pick % cubes.len() as u64) as usize];
        let kids = g.children(&q).unwrap();
        prop_assert_eq!(kids.len(), 1 << n);
        let vol: i64 = kids.iter().map(|k| g.cube_box(k).volume_cells()).sum();
        prop_assert_eq!(vol, g.cube_box(&q).volume_cells());
        for (i, a) in kids.iter().enumerate() {
            prop_assert!(g.contains(&q, a));
            for b in &kids[i + 1..] {
                prop_assert!(g.cube_box(a).disjoint(&g.cube_box(b)));
            }
        }
    }

    #[test]
    fn measure_is_additive(fam in family(), n in 1usize..=2) {
        let mu = measure(&fam, n, 6);
        for q in mu.grid().all_cubes(5) {
            let kids: f64 = mu.grid().children(&q).unwrap().iter().map(|k| mu.cube_mass(k)).sum();
            prop_assert!((kids - mu.cube_mass(&q)).abs() <= 1e-12 * mu.cube_mass(&q));
        }
    }

    #[test]
    fn cascade_children_keep_p0(p0 in 0.2f64..0.5, seed in 0u64..500) {
        let mu = measure(&format!("cascade:{p0}:{seed}"), 1, 8);
        for q in mu.grid().all_cubes(7) {
            for k in mu.grid().children(&q).unwrap() {
                prop_assert!(mu.cube_mass(&k) >= p0 * mu.cube_mass(&q) * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn goodness_is_monotone_in_r(n in 1usize..=2, r in 1u32..5, eps in 0.05f64..0.95, pick in any::<u64>()) {
        let g = Grid::unit(n, 7).unwrap();
        let cubes = g.cubes_at_level(7);
        let q = cubes[(pick % cubes.len() as u64) as usize];
        let p = GoodnessParams::new(r, eps).unwrap();
        if g.is_good(&q, &p) {
            for r2 in r..8 {
                prop_assert!(g.is_good(&q, &GoodnessParams::new(r2, eps).unwrap()));
            }
        }
    }

    #[test]
    fn alpert_bases_are_orthonormal(fam in family(), kappa in 1usize..=3, level in 0u32..6, pick in any::<u64>()) {
        let mu = measure(&fam, 1, 8);
        let cubes = mu.grid().cubes_at_level(level);
        let q = cubes[(pick % cubes.len() as u64) as usize];
        let b = build_alpert(&mu, &q, kappa).unwrap();
        prop_assert!(gram_residual(&b, &mu) <= 1e-10);
        prop_assert!(moment_residual(&b, &mu) <= 1e-10);
    }

    #[test]
    fn rectangles_tile(n in 1usize..=3, t in 1e-3f64..1.0, eps in 0.05f64..1.0) {
        let d = rectangle_decomposition(t, n, eps).unwrap();
        prop_assert!(d.tiles_exactly());
        prop_assert!(d.count() as f64 <= d.bound);
    }

    #[test]
    fn vacuous_records_are_labelled(ceiling in 0.1f64..100.0) {
        prop_assert_eq!(CheckRecord::ratio("x", 0.0, 0.0, ceiling).status, Status::VacuousPass);
        prop_assert_eq!(CheckRecord::ratio("x", 1.0, 2.0 / ceiling, ceiling).status, Status::Pass);
    }

    #[test]
    fn measure_text_round_trip(fam in family(), n in 1usize..=2) {
        let mu = measure(&fam, n, 5);
        let back = LatticeMeasure::from_text(&mu.to_text()).unwrap();
        prop_assert_eq!(back.masses(), mu.masses());
        prop_assert_eq!(back.grid(), mu.grid());
    }

    #[test]
    fn config_round_trip(depth in 1u32..12, seed in 0..=i64::MAX as u64, alpha in 0.0f64..0.9, kappa in 1usize..4, fam in family()) {
        let mut s = ExperimentSpec { id: "rt".into(), seed, ..Default::default() };
        s.lattice.depth = depth;
        s.params.alpha = alpha;
        s.params.kappa = kappa;
        s.measures.omega = fam;
        prop_assert_eq!(ExperimentSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn oversized_seeds_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let s = ExperimentSpec { seed, ..Default::default() };
        prop_assert!(s.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adjoint_matches_transpose(s in family(), w in family(), seed in 0u64..1000) {
        let mut spec = ExperimentSpec { id: "adj".into(), ..Default::default() };
        spec.lattice.depth = 7;
        spec.measures.sigma = s;
        spec.measures.omega = w;
        let ex = Experiment::new(&spec).unwrap();
        let op = ex.operator().unwrap();
        let adj = op.adjoint(&ex.omega).unwrap();
        let f = random_function(&ex.grid, seed, "f");
        let g = random_function(&ex.grid, seed, "g");
        let lhs = op.bilinear(&f, &g, &ex.omega);
        let rhs = adj.bilinear(&g, &f, &ex.sigma);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1e-300), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn corona_split_is_exact(s in family(), w in family(), seed in 0u64..1000) {
        let mut spec = ExperimentSpec { id: "split".into(), ..Default::default() };
        spec.lattice.depth = 7;
        spec.measures.sigma = s;
        spec.measures.omega = w;
        let ex = Experiment::new(&spec).unwrap();
        let op = ex.operator().unwrap();
        let f = random_function(&ex.grid, seed, "f");
        let g = random_function(&ex.grid, seed, "g");
        let split = parallel_corona_split(&op, &ex.sigma, &ex.omega, &f, &g, 2, 2, 4.0).unwrap();
        prop_assert!(split.relative_error() <= 1e-9, "relative error {}", split.relative_error());
    }
}
