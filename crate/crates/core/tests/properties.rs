//! Property tests over structures, predictors, scoring and aggregation.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use scm_core::graph::{
    constraints_for, grid_graph, icar_constraints, icar_structure, interaction_structure, rw1_constraints,
    rw1_structure,
};
use scm_core::inference::{Diagnostics, InferenceMode};
use scm_core::national::national_draws;
use scm_core::scoring::{aggregate, arb, quantile, CellKind, CellScore, Grouping};
use scm_core::{
    AreaGraph, BlockLabel, Disease, Grid, HyperLabel, InteractionType, LatentModel, ModelConfig, ModelId,
    PosteriorSamples, StructureMatrix,
};

fn dense<T: scm_core::Real>(s: &StructureMatrix<T>) -> DMatrix<f64> {
    let n = s.dim();
    let mut m = DMatrix::zeros(n, n);
    for (r, c, v) in s.matrix().iter() {
        m[(r, c)] = v.as_f64();
    }
    m
}

fn eigen_rank(m: &DMatrix<f64>) -> (usize, f64) {
    let e = m.clone().symmetric_eigen();
    let max = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * max.max(1.0);
    let rank = e.eigenvalues.iter().filter(|v| v.abs() > tol).count();
    let min = e.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    (rank, min)
}

/// Random graph on `n` areas; may be disconnected.
fn arb_graph() -> impl Strategy<Value = AreaGraph> {
    (2usize..8).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..(2 * n)).prop_map(move |pairs| {
            let mut edges: Vec<(usize, usize)> =
                pairs.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
            edges.sort_unstable();
            edges.dedup();
            AreaGraph::new(n, &edges).unwrap()
        })
    })
}

fn interaction_types() -> impl Strategy<Value = InteractionType> {
    prop_oneof![
        Just(InteractionType::I),
        Just(InteractionType::II),
        Just(InteractionType::III),
        Just(InteractionType::IV)
    ]
}

/// Orthonormal basis of the numerical null space of a symmetric matrix.
fn null_basis(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let e = m.clone().symmetric_eigen();
    let max = e.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    (0..m.nrows()).filter(|&k| e.eigenvalues[k].abs() <= 1e-8 * max).map(|k| e.eigenvectors.column(k).into_owned()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structures_have_declared_rank_and_zero_row_sums(g in arb_graph(), t in 2usize..6, ty in interaction_types()) {
        let rk = icar_structure::<f64>(&g).unwrap();
        let rg = rw1_structure::<f64>(t).unwrap();
        let q = interaction_structure(ty, &rg, &rk).unwrap();
        for s in [&rk, &rg, &q] {
            let m = dense(s);
            prop_assert!((&m - m.transpose()).amax() == 0.0);
            let (rank, min) = eigen_rank(&m);
            prop_assert_eq!(rank, s.rank());
            prop_assert!(min > -1e-8 * m.amax().max(1.0));
            if s.kind().has_zero_row_sums() {
                prop_assert!(s.matrix().row_sums().iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn icar_quadratic_form_is_sum_over_edges(g in arb_graph(), seed in any::<u64>()) {
        let r = icar_structure::<f64>(&g).unwrap();
        let x: Vec<f64> = (0..g.num_areas()).map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64 * 7919)) % 1000) as f64 / 100.0 - 5.0).collect();
        let brute: f64 = g.edges().map(|(a, b)| (x[a] - x[b]).powi(2)).sum();
        prop_assert!((r.quad_form(&x) - brute).abs() <= 1e-10 * brute.max(1.0));
    }

    #[test]
    fn rw1_quadratic_form_is_sum_of_squared_steps(x in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
        let r = rw1_structure::<f64>(x.len()).unwrap();
        let brute: f64 = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        prop_assert!((r.quad_form(&x) - brute).abs() <= 1e-10 * brute.max(1.0));
    }

    #[test]
    fn constraints_span_exactly_the_null_space(g in arb_graph(), t in 2usize..5, ty in interaction_types()) {
        let rk = icar_structure::<f64>(&g).unwrap();
        let rg = rw1_structure::<f64>(t).unwrap();
        let cases = [
            (rk.clone(), icar_constraints::<f64>(&g)),
            (rg.clone(), rw1_constraints::<f64>(t)),
            (interaction_structure(ty, &rg, &rk).unwrap(), constraints_for::<f64>(ty, &g, t).unwrap()),
        ];
        for (s, c) in cases {
            let n = s.dim();
            let a = DMatrix::from_fn(c.num_rows(), n, |r, k| c.rows()[r][k]);
            // independent rows, one per null direction; type I is proper but
            // keeps one overall sum-to-zero row
            prop_assert_eq!(a.rank(1e-9), c.num_rows());
            if s.null_dim() > 0 {
                prop_assert_eq!(c.num_rows(), s.null_dim());
            } else {
                prop_assert_eq!(c.num_rows(), 1);
            }
            // projecting a null vector onto null(A) leaves nothing
            let aat = &a * a.transpose();
            let inv = aat.try_inverse().unwrap();
            for v in null_basis(&dense(&s)) {
                let p = &v - a.transpose() * (&inv * (&a * &v));
                prop_assert!(p.amax() < 1e-8, "residual {}", p.amax());
            }
        }
    }

    #[test]
    fn type_four_entries_are_kronecker_products(rows in 1usize..3, cols in 2usize..4, t in 2usize..5) {
        let g = grid_graph(rows, cols).unwrap();
        let rk = icar_structure::<f64>(&g).unwrap();
        let rg = rw1_structure::<f64>(t).unwrap();
        let q = interaction_structure(InteractionType::IV, &rg, &rk).unwrap();
        let a = g.num_areas();
        for (t1, t2, i1, i2) in itertools(t, a) {
            let expect = rg.matrix().get(t1, t2) * rk.matrix().get(i1, i2);
            prop_assert_eq!(q.matrix().get(t1 * a + i1, t2 * a + i2), expect);
        }
    }
}

fn itertools(t: usize, a: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..t).flat_map(move |t1| {
        (0..t).flat_map(move |t2| (0..a).flat_map(move |i1| (0..a).map(move |i2| (t1, t2, i1, i2))))
    })
}

fn models() -> impl Strategy<Value = ModelId> {
    prop_oneof![Just(ModelId::Model1), Just(ModelId::Model2), Just(ModelId::Model3)]
}

fn compiled(id: ModelId) -> LatentModel<f64> {
    LatentModel::from_config(&ModelConfig::new(id), &grid_graph(2, 2).unwrap(), 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictor_is_linear_in_the_field(id in models(), seed in any::<u64>(), a in -3.0f64..3.0) {
        let m = compiled(id);
        let mut hyper = m.default_hyper();
        for (k, v) in hyper.values_mut().iter_mut().enumerate() {
            *v = 0.5 + ((seed >> (k % 48)) & 7) as f64 / 4.0;
        }
        let x: Vec<f64> = (0..m.field_len()).map(|k| ((seed.wrapping_add(k as u64 * 2654435761)) % 997) as f64 / 997.0 - 0.5).collect();
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let p = m.predictor_all(&x, hyper.values());
        let pa = m.predictor_all(&ax, hyper.values());
        for (u, v) in p.iter().zip(&pa) {
            prop_assert!((a * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn inverting_delta_swaps_the_kappa_loadings(shared in prop_oneof![Just(ModelId::Model1), Just(ModelId::Model2)], delta in 0.2f64..5.0, k in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let m = compiled(shared);
        let mut field = vec![0.0; m.field_len()];
        m.layout().write(&mut field, BlockLabel::Kappa, &k).unwrap();
        let mut h = m.default_hyper();
        h.set(HyperLabel::Delta, delta).unwrap();
        let mut inv = h.clone();
        inv.set(HyperLabel::Delta, 1.0 / delta).unwrap();
        for i in 0..4 {
            for t in 0..3 {
                let a = m.linear_predictor(&field, &h, i, t, Disease::Incidence);
                let b = m.linear_predictor(&field, &inv, i, t, Disease::Mortality);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                let c = m.linear_predictor(&field, &h, i, t, Disease::Mortality);
                let d = m.linear_predictor(&field, &inv, i, t, Disease::Incidence);
                prop_assert!((c - d).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn prior_decreases_as_the_field_grows(id in models(), seed in any::<u64>(), s in 1.01f64..4.0) {
        let m = compiled(id);
        let h = m.default_hyper();
        let x: Vec<f64> = (0..m.field_len()).map(|k| ((seed.wrapping_add(k as u64 * 40503)) % 1009) as f64 / 1009.0 - 0.5).collect();
        let sx: Vec<f64> = x.iter().map(|v| s * v).collect();
        prop_assert!(m.log_prior(&sx, &h) <= m.log_prior(&x, &h));
    }

    #[test]
    fn block_read_then_write_is_identity(id in models(), x in proptest::collection::vec(-1e3f64..1e3, 64)) {
        let m = compiled(id);
        let mut field: Vec<f64> = x.iter().cycle().take(m.field_len()).copied().collect();
        let before = field.clone();
        for b in m.layout().blocks() {
            let vals = m.layout().read(&field, b.label).unwrap().to_vec();
            m.layout().write(&mut field, b.label, &vals).unwrap();
        }
        prop_assert_eq!(
            field.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn arb_is_scale_invariant(r in 1e-3f64..1e3, fitted in 0.0f64..2e3, c in 1e-3f64..1e3, k in -8i32..8) {
        let base = arb(r, fitted).unwrap();
        let p = 2f64.powi(k);
        prop_assert_eq!(arb(p * r, p * fitted).unwrap(), base);
        prop_assert!((arb(c * r, c * fitted).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn quantiles_interpolate_order_statistics(mut v in proptest::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..=1.0, c in -5.0f64..5.0) {
        let q = quantile(&v, p);
        v.sort_by(f64::total_cmp);
        let h = p * (v.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        prop_assert!(v[lo] <= q && q <= v[hi]);
        prop_assert_eq!(quantile(&v, 0.0), v[0]);
        prop_assert_eq!(quantile(&v, 1.0), v[v.len() - 1]);
        prop_assert_eq!(quantile(&vec![c; v.len()], p), c);
    }

    #[test]
    fn national_draws_match_a_double_loop(a in 1usize..6, t in 1usize..4, s in 1usize..20, seed in any::<u64>(), extra in 1u64..50) {
        let grid = Grid::new(a, t);
        let n = grid.num_cells();
        let table: Vec<u64> = (0..n * s).map(|k| (seed.wrapping_mul(6364136223846793005).wrapping_add((k as u64).wrapping_mul(1442695040888963407)) >> 40) % 500).collect();
        let samples = PosteriorSamples::<f64>::new(grid, 2001, Vec::new(), 0, Vec::new(), Vec::new(), vec![-7.0; n * s], table.clone(), InferenceMode::Mcmc, Diagnostics::default()).unwrap();
        let areas: Vec<usize> = (0..a).collect();
        let got = national_draws(&samples, &areas).unwrap();
        for (ti, row) in got.iter().enumerate() {
            for (si, &v) in row.iter().enumerate() {
                let mut naive = 0u64;
                for i in 0..a {
                    naive += samples.predictive_draws(grid.cell(i, ti, Disease::Incidence))[si];
                }
                prop_assert_eq!(v, naive);
            }
        }
        // one more area whose draws are all positive raises every total
        let grid2 = Grid::new(a + 1, t);
        let mut table2 = vec![0u64; grid2.num_cells() * s];
        for c in 0..grid2.num_cells() {
            let (i, ti, d) = grid2.locate(c);
            for si in 0..s {
                table2[c * s + si] = if i < a { samples.predictive_draws(grid.cell(i, ti, d))[si] } else { extra };
            }
        }
        let samples2 = PosteriorSamples::<f64>::new(grid2, 2001, Vec::new(), 0, Vec::new(), Vec::new(), vec![-7.0; grid2.num_cells() * s], table2, InferenceMode::Mcmc, Diagnostics::default()).unwrap();
        let got2 = national_draws(&samples2, &(0..=a).collect::<Vec<_>>()).unwrap();
        for (r1, r2) in got.iter().zip(&got2) {
            prop_assert!(r1.iter().zip(r2).all(|(x, y)| y > x));
        }
    }

    #[test]
    fn global_marb_is_the_weighted_mean_of_band_marbs(arbs in proptest::collection::vec((0usize..5, 0.0f64..2.0), 1..80)) {
        let cells: Vec<CellScore> = arbs
            .iter()
            .enumerate()
            .map(|(k, &(band, a))| CellScore {
                kind: CellKind::Masked,
                fold: 0,
                area: k,
                year: 2001,
                observed_count: 10,
                observed_rate: 10.0,
                fitted_rate: 10.0 * (1.0 + a),
                lower: 0.0,
                upper: 1.0,
                arb: Some(a),
                dss: Some(1.0),
                interval_score: 1.0,
                band: Some(band),
                missing_years: Some(3 * (5 - band)),
                horizon: None,
            })
            .collect();
        let mut w = Vec::new();
        let all = aggregate(&cells, CellKind::Masked, Grouping::All, &mut w);
        let bands = aggregate(&cells, CellKind::Masked, Grouping::Band, &mut w);
        let total: usize = bands.iter().map(|g| g.arb_cells).sum();
        let recomposed: f64 = bands.iter().map(|g| g.marb.unwrap() * g.arb_cells as f64).sum::<f64>() / total as f64;
        prop_assert_eq!(total, cells.len());
        prop_assert!((all[0].marb.unwrap() - recomposed).abs() <= 1e-12 * (1.0 + recomposed));
    }
}
