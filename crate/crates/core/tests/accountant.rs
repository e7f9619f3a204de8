mod common;

use common::{rel_close, Dense};
use proptest::prelude::*;
use zipdl_core::accountant::*;
use zipdl_core::noise::zsum_variance;
use zipdl_core::topology::{build_gossip_matrix, generate_k_regular, Graph, GossipMatrix, WeightScheme};

fn params(n: usize, sigma: f64, rounds: usize) -> PrivacyParams {
    PrivacyParams { alpha: 2.0, delta: 1.0, eta: 0.1, smoothness: 1.0, sigma: vec![sigma; n], rounds }
}

fn graphs() -> Vec<GossipMatrix> {
    vec![
        build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap(),
        build_gossip_matrix(&Graph::path(4), WeightScheme::MetropolisHastings).unwrap(),
        build_gossip_matrix(&Graph::ring(5), WeightScheme::Uniform).unwrap(),
        build_gossip_matrix(&generate_k_regular(6, 3, 1).unwrap(), WeightScheme::Uniform).unwrap(),
        build_gossip_matrix(&Graph::from_edges(6, [(0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (2, 5)]).unwrap(), WeightScheme::MetropolisHastings).unwrap(),
    ]
}

#[test]
fn triangle_two_rounds_matches_dense() {
    let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
    let p = params(3, 1.0, 2);
    let vs = build_virtual(&w, &p).unwrap();
    let dense = Dense::new(&w, &p, false);
    let got = averaging_bound(0, &[1], &vs, &p, 2).unwrap();
    let want = dense.averaging(0, &[1], &p, 2, false);
    assert!(rel_close(got, want, 1e-10), "{got} vs {want}");
    assert!(got > 0.0 && got.is_finite());
}

#[test]
fn triangle_sgd_matches_dense() {
    let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
    let p = PrivacyParams { eta: 0.01, ..params(3, 1.0, 3) };
    let vs = build_virtual(&w, &p).unwrap();
    let got = sgd_bound(0, &[1], &vs, &p, 3).unwrap();
    let want = Dense::new(&w, &p, false).sgd(0, &[1], &p, 3);
    assert!(rel_close(got, want, 1e-10), "{got} vs {want}");
}

#[test]
fn muffliato_one_round_denominator() {
    let w = build_gossip_matrix(&Graph::path(3), WeightScheme::MetropolisHastings).unwrap();
    let p = params(3, 1.3, 1);
    let vs = VirtualSystem::build(&w, &p, Correlation::Identity).unwrap();
    let d = vs.accumulated_variances(1, 1.0);
    let dense = Dense::new(&w, &p, true).denominators(1, 1.0);
    for node in 0..3 {
        let expect = (0.1f64 * 1.3).powi(2) * (0..3).map(|j| w.weight(node, j).powi(2)).sum::<f64>();
        assert!(rel_close(d[0][node], expect, 1e-12));
        for v in 0..3 {
            assert!(rel_close(dense[0][3 * node + v], expect, 1e-12));
        }
    }
    let vs_zip = build_virtual(&w, &p).unwrap();
    assert!(muffliato_bound(0, &[1], &vs_zip, &p, 1).is_err());
}

#[test]
fn every_matrix_bound_matches_dense_oracle() {
    for w in graphs() {
        let n = w.n();
        let mut p = params(n, 1.0, 5);
        p.sigma = (0..n).map(|i| 0.5 + 0.25 * i as f64).collect();
        let zip = build_virtual(&w, &p).unwrap();
        let iden = VirtualSystem::build(&w, &p, Correlation::Identity).unwrap();
        let dz = Dense::new(&w, &p, false);
        let di = Dense::new(&w, &p, true);
        for t in 0..=5 {
            for a in 0..n {
                let v = (a + 1) % n;
                let pairs = [
                    (averaging_bound(a, &[v], &zip, &p, t).unwrap(), dz.averaging(a, &[v], &p, t, false)),
                    (averaging_bound_with(a, &[v], &zip, &p, t, NumeratorPower::Final).unwrap(), dz.averaging(a, &[v], &p, t, true)),
                    (muffliato_bound(a, &[v], &iden, &p, t).unwrap(), di.averaging(a, &[v], &p, t, false)),
                    (sgd_bound(a, &[v], &zip, &p, t).unwrap(), dz.sgd(a, &[v], &p, t)),
                ];
                for (got, want) in pairs {
                    assert!(rel_close(got, want, 1e-10), "n={n} t={t} a={a}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn virtual_consistency() {
    for w in graphs() {
        let n = w.n();
        let p = params(n, 0.7, 1);
        let vs = build_virtual(&w, &p).unwrap();
        let diag = vs.noise_variance_diag();
        let plan = p.noise_plan().unwrap();
        for a in 0..n {
            for &v in w.neighbors(a) {
                assert!((diag[n * a + v] - zsum_variance(a, v, &w, &plan).unwrap()).abs() < 1e-12);
            }
        }
        let mw = vs.mixing();
        for row in mw.outer_iterator() {
            assert!((row.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut x: Vec<f64> = (0..n).map(|i| (i * i) as f64 - 2.0).collect();
        let mut xh = vs.duplicate(&x);
        let wd = w.to_dmatrix();
        for _ in 0..4 {
            xh = VirtualSystem::apply(&mw, &xh);
            x = (0..n).map(|i| (0..n).map(|j| wd[(i, j)] * x[j]).sum()).collect();
            for k in 0..n * n {
                assert!((xh[k] - x[k / n]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn colluder_set_matches_dense() {
    let w = build_gossip_matrix(&generate_k_regular(6, 3, 2).unwrap(), WeightScheme::Uniform).unwrap();
    let p = params(6, 1.0, 3);
    let vs = build_virtual(&w, &p).unwrap();
    let got = averaging_bound(0, &[2, 4], &vs, &p, 3).unwrap();
    let want = Dense::new(&w, &p, false).averaging(0, &[2, 4], &p, 3, false);
    assert!(rel_close(got, want, 1e-10));
    assert_eq!(averaging_bound(0, &[0], &vs, &p, 3), Err(AccountantError::TargetInColluders(0)));
}

#[test]
fn complete_four_colluder_pair() {
    let w = build_gossip_matrix(&Graph::complete(4), WeightScheme::Uniform).unwrap();
    let p = params(4, 1.0, 1);
    // Scalar re-derivation: ζ² = (3/4)η²σ² for every pair, four ordered pairs.
    let zeta2 = 0.75 * 0.01;
    let want = 0.5 * 2.0 * 4.0 / (2.0 * zeta2);
    assert!(rel_close(colluder_bound(0, &[1, 2], &w, &p).unwrap(), want, 1e-12));
}

#[test]
fn zero_noise_gives_infinity_not_nan() {
    let w = build_gossip_matrix(&Graph::complete(3), WeightScheme::Uniform).unwrap();
    let p = params(3, 0.0, 2);
    let vs = build_virtual(&w, &p).unwrap();
    assert_eq!(averaging_bound(0, &[1], &vs, &p, 2).unwrap(), f64::INFINITY);
    for kind in BoundKind::ALL {
        let m = epsilon_matrix(&w, &p, kind).unwrap();
        assert!(m.eps.iter().flatten().all(|e| !e.is_nan()));
    }
}

#[test]
fn epsilon_matrix_matches_pairwise_calls() {
    let w = build_gossip_matrix(&generate_k_regular(8, 3, 7).unwrap(), WeightScheme::Uniform).unwrap();
    let p = params(8, 1.0, 4);
    let vs = build_virtual(&w, &p).unwrap();
    let iden = VirtualSystem::build(&w, &p, Correlation::Identity).unwrap();
    for kind in BoundKind::ALL {
        let m = epsilon_matrix(&w, &p, kind).unwrap();
        for a in 0..8 {
            assert_eq!(m.eps[a][a], 0.0);
            for v in (0..8).filter(|&v| v != a) {
                let direct = match kind {
                    BoundKind::SingleRound => single_round_bound(a, v, &w, &p).unwrap(),
                    BoundKind::Averaging => averaging_bound(a, &[v], &vs, &p, 4).unwrap(),
                    BoundKind::AveragingFinalPower => averaging_bound_with(a, &[v], &vs, &p, 4, NumeratorPower::Final).unwrap(),
                    BoundKind::Muffliato => muffliato_bound(a, &[v], &iden, &p, 4).unwrap(),
                    BoundKind::Sgd => sgd_bound(a, &[v], &vs, &p, 4).unwrap(),
                };
                assert_eq!(m.eps[a][v], direct);
            }
        }
        let oracle: f64 = (1..8).map(|u| m.eps[u][0]).sum::<f64>() / 8.0;
        assert!((m.mean_to(0) - oracle).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn scaling_laws(seed in any::<u64>(), n in 4usize..10, c in 0.2f64..5.0) {
        let k = if n % 2 == 0 { 3 } else { 2 };
        let w = build_gossip_matrix(&generate_k_regular(n, k, seed).unwrap(), WeightScheme::Uniform).unwrap();
        let p = params(n, 1.0, 3);
        let p2 = PrivacyParams { alpha: 4.0, delta: 2.0, ..p.clone() };
        let pc = PrivacyParams { sigma: vec![c; n], ..p.clone() };
        for kind in BoundKind::ALL {
            let base = epsilon_matrix(&w, &p, kind).unwrap();
            let lin = epsilon_matrix(&w, &p2, kind).unwrap();
            let scaled = epsilon_matrix(&w, &pc, kind).unwrap();
            for a in 0..n {
                for v in 0..n {
                    let e = base.eps[a][v];
                    prop_assert!(rel_close(lin.eps[a][v], 8.0 * e, 1e-9));
                    prop_assert!(rel_close(scaled.eps[a][v], e / (c * c), 1e-9));
                }
            }
        }
    }

    #[test]
    fn singleton_colluders_equal_single_round(seed in any::<u64>(), n in 3usize..12) {
        let k = if n % 2 == 0 { 3.min(n - 1) } else { 2 };
        let w = build_gossip_matrix(&generate_k_regular(n, k, seed).unwrap(), WeightScheme::MetropolisHastings).unwrap();
        let p = params(n, 0.9, 1);
        for a in 0..n {
            for v in (0..n).filter(|&v| v != a) {
                prop_assert!(rel_close(colluder_bound(a, &[v], &w, &p).unwrap(), single_round_bound(a, v, &w, &p).unwrap(), 1e-12));
            }
        }
    }

    #[test]
    fn bounds_grow_with_rounds(seed in any::<u64>()) {
        let w = build_gossip_matrix(&generate_k_regular(8, 3, seed).unwrap(), WeightScheme::Uniform).unwrap();
        let p = params(8, 1.0, 0);
        let vs = build_virtual(&w, &p).unwrap();
        let mut prev = (0.0, 0.0);
        for t in 0..8 {
            let cur = (averaging_bound(0, &[1], &vs, &p, t).unwrap(), sgd_bound(0, &[1], &vs, &p, t).unwrap());
            prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }
}
