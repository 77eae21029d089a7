//! Property tests that cut across modules: model parsing, low-rank algebra,
//! coefficient structure, the dense reference solver and the SSA.

mod common;

use common::*;
use lowrank_cme::coefficients::{CoefficientEngine, CoefficientMode};
use lowrank_cme::lowrank::{best_approximation_error, orthonormality_defect, orthonormalize, LowRankState};
use lowrank_cme::model::parse_model;
use lowrank_cme::reference::{dense_rhs, dense_solve, DenseDistribution, DenseTolerances};
use lowrank_cme::ssa::{run_rng, ssa_sample_path};
use lowrank_cme::statespace::TruncatedStateSpace;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn expr_strategy(n_species: usize) -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        (1..=n_species).prop_map(|i| format!("x{i}")),
        prop::sample::select(vec!["0.5", "2", "1e-3", "0.125", "k", "3.25"]).prop_map(str::to_string),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (
                inner.clone(),
                inner.clone(),
                prop::sample::select(vec!['+', '-', '*', '/'])
            )
                .prop_map(|(a, b, op)| format!("({a} {op} {b})")),
            inner.prop_map(|a| format!("-{a}")),
        ]
    })
}

fn network_doc(n_species: usize, reactions: &[(Vec<i64>, String)]) -> String {
    let species: Vec<String> = (0..n_species).map(|i| format!("\"S{i}\"")).collect();
    let reactions: Vec<String> = reactions
        .iter()
        .map(|(nu, p)| format!("{{\"nu\": {nu:?}, \"propensity\": \"{p}\"}}"))
        .collect();
    format!(
        "{{\"species\": [{}], \"parameters\": {{\"k\": 0.75}}, \"reactions\": [{}]}}",
        species.join(", "),
        reactions.join(", ")
    )
}

fn network_strategy() -> impl Strategy<Value = String> {
    (2usize..=4).prop_flat_map(|n| {
        let reaction = (
            prop::collection::vec(-2i64..=2, n).prop_filter("nonzero change", |nu| nu.iter().any(|&v| v != 0)),
            expr_strategy(n),
        );
        prop::collection::vec(reaction, 1..=4).prop_map(move |rs| network_doc(n, &rs))
    })
}

fn nonnegative_matrix(max: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (2..=max, 2..=max).prop_flat_map(|(n1, n2)| {
        prop::collection::vec(0.0f64..1.0, n1 * n2).prop_map(move |v| DMatrix::from_vec(n1, n2, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_serialize_parse_is_identity(doc in network_strategy()) {
        let net = parse_model(&doc).unwrap();
        let again = parse_model(&net.to_json()).unwrap();
        prop_assert_eq!(&net, &again);
    }

    #[test]
    fn propensities_ignore_non_reagents(
        doc in network_strategy(),
        x in prop::collection::vec(0i64..20, 4),
        y in prop::collection::vec(0i64..20, 4),
    ) {
        let net = parse_model(&doc).unwrap();
        let n = net.n_species();
        for ch in &net.channels {
            // y everywhere except on the reagents, where it copies x
            let mut z = y[..n].to_vec();
            for &i in &ch.reagents {
                z[i] = x[i];
            }
            let a = ch.evaluate_at(&x[..n]);
            let b = ch.evaluate_at(&z);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn orthonormalize_gives_orthonormal_columns(
        n in 3usize..40,
        r in 1usize..6,
        rank in 0usize..6,
        seed in any::<u64>(),
    ) {
        let r = r.min(n);
        // a product of random factors with a prescribed (possibly deficient) rank
        let rank = rank.min(r);
        let a = random_orthonormal(n, rank.max(1), seed);
        let b = random_orthonormal(r, rank.max(1), seed ^ 1);
        let m = if rank == 0 { DMatrix::zeros(n, r) } else { &a * b.transpose() };
        let (q, rr) = orthonormalize(&m);
        prop_assert!(orthonormality_defect(&q) <= 1e-12);
        prop_assert!((&q * &rr - &m).amax() <= 1e-12);
        prop_assert!((0..r).all(|i| rr[(i, i)] >= 0.0));
    }

    #[test]
    fn truncated_svd_meets_best_approximation(m in nonnegative_matrix(12), r in 1usize..6) {
        let (n1, n2) = m.shape();
        let r = r.min(n1).min(n2);
        let space = TruncatedStateSpace::from_sizes(&[n1, n2], &[0]).unwrap();
        let p = DenseDistribution::from_matrix(&m);
        let state = LowRankState::from_dense(&p, &space, r, BUDGET).unwrap();
        let rec = state.reconstruct(&space, BUDGET).unwrap();
        let best = best_approximation_error(&p, r);
        prop_assert!((p.error_2norm(&rec) - best).abs() <= 1e-10);
        prop_assert!((state.mass() - rec.mass()).abs() <= 1e-10);
        prop_assert!(orthonormality_defect(&state.x1) <= 1e-12);
        prop_assert!(orthonormality_defect(&state.x2) <= 1e-12);
        let errs: Vec<f64> = (0..=n1.min(n2)).map(|k| best_approximation_error(&p, k)).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(errs.last().unwrap().abs() <= 1e-12);
    }

    #[test]
    fn dense_rhs_is_linear(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let net = toggle();
        let space = square(12);
        let n = space.n1() * space.n2();
        let p = random_orthonormal(n, 1, seed).column(0).into_owned();
        let q = random_orthonormal(n, 1, seed ^ 7).column(0).into_owned();
        let mix = DenseDistribution::from_values(&space, (a * &p + b * &q).as_slice().to_vec()).unwrap();
        let rhs = |v: Vec<f64>| dense_rhs(&DenseDistribution::from_values(&space, v).unwrap(), &space, &net).unwrap();
        let lhs = rhs(mix.values.clone());
        let fp = rhs(p.as_slice().to_vec());
        let fq = rhs(q.as_slice().to_vec());
        for ((l, x), y) in lhs.values.iter().zip(&fp.values).zip(&fq.values) {
            prop_assert!((l - (a * x + b * y)).abs() <= 1e-13);
        }
    }

    #[test]
    fn ssa_paths_conserve_and_stay_nonnegative(
        x0 in prop::collection::vec(0i64..30, 3),
        seed in any::<u64>(),
    ) {
        // A + B <-> C conserves A + C and B + C
        let net = parse_model(
            r#"{"species": ["A", "B", "C"], "parameters": {"f": 0.02, "r": 0.3},
                "reactions": [{"nu": [-1, -1, 1], "propensity": "f*x1*x2"},
                              {"nu": [1, 1, -1], "propensity": "r*x3"}]}"#,
        )
        .unwrap();
        let times: Vec<f64> = (0..=20).map(|i| i as f64).collect();
        let mut rng = run_rng(seed, 0);
        let path = ssa_sample_path(&net, &x0, &times, &mut rng).unwrap();
        for x in &path {
            prop_assert!(x.iter().all(|&v| v >= 0));
            prop_assert_eq!(x[0] + x[2], x0[0] + x0[2]);
            prop_assert_eq!(x[1] + x[2], x0[1] + x0[2]);
        }
    }
}

#[test]
fn d_tables_are_symmetric_and_constant_channels_are_scaled_identities() {
    // reaction 3 of the toggle switch reads only x2, so on partition 1 its
    // tables collapse to a single entry; the constant birth below never reads
    // anything and leaves partition 2 untouched
    let net = parse_model(
        r#"{"species": ["A", "B"], "parameters": {"b": 0.4, "c": 0.05, "k": 1.5},
            "reactions": [{"nu": [-1, 0], "propensity": "c*x1"},
                          {"nu": [0, -1], "propensity": "c*x2"},
                          {"nu": [1, 0], "propensity": "b/(b+x2)"},
                          {"nu": [1, 0], "propensity": "k"}]}"#,
    )
    .unwrap();
    let space = square(20);
    let engine = CoefficientEngine::new(&net, &space, CoefficientMode::Reduced).unwrap();
    let r = 4;
    let x2 = random_orthonormal(21, r, 3);
    let k = engine.k_coefficients(&x2);
    for mu in 0..4 {
        for x in 0..21 {
            let g = engine.table_index(&k, mu, x);
            let d = k.d_at(mu, g);
            assert!((&d - d.transpose()).amax() <= 1e-15, "D not symmetric for channel {mu}");
        }
    }
    for x in 0..21 {
        let g = engine.table_index(&k, 3, x);
        let scaled = DMatrix::<f64>::identity(r, r) * 1.5;
        assert!((k.c_at(3, g) - &scaled).amax() <= 1e-14);
        assert!((k.d_at(3, g) - &scaled).amax() <= 1e-14);
    }
}

#[test]
fn dense_solutions_stay_nonnegative_and_lose_mass_monotonically() {
    let net = toggle();
    let space = square(25);
    let p0 = dense_initial(&toggle_gaussian(), &space);
    let times: Vec<f64> = (0..=30).map(|i| 10.0 * i as f64).collect();
    let sol = dense_solve(&p0, &space, &net, &times, DenseTolerances::default()).unwrap();
    for p in &sol {
        assert!(p.values.iter().all(|&v| v >= -1e-12));
        assert!(p.mass() <= 1.0 + 1e-9);
    }
    for w in sol.windows(2) {
        assert!(w[1].mass() <= w[0].mass() + 1e-9);
    }
    assert!(sol.last().unwrap().mass() < 0.99, "the truncation should leak mass");
}
