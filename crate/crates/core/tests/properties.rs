use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use proptest::prelude::*;

use mvcp::dataio::{model_from_json, model_to_json, read_residuals, write_residuals, ModelRecord};
use mvcp::model::{CalibrationDetails, Certificate, CertificateKind};
use mvcp::numerics::linalg::{lower_gram, tri_len, unpack_lower};
use mvcp::numerics::{bisect_root, kmeans, log_binomial, reg_inc_beta};
use mvcp::relmcp::certified_miscoverage;
use mvcp::scp::{scp_calibrate, scp_outlier_budget};
use mvcp::scores::make_family;
use mvcp::{CalibratedModel, FamilyKind, Method, ParamVector, ResidualSet, ScoreFamily};

fn exact_binomial(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn big_ln(x: &BigUint) -> f64 {
    let bits = x.bits();
    let shift = bits.saturating_sub(60);
    let top = (x >> shift).to_string().parse::<f64>().unwrap();
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

#[test]
fn log_binomial_matches_factorials_up_to_30() {
    let factorial = |n: u64| (1..=n).fold(1u128, |acc, v| acc * v as u128);
    for n in 0..=30u64 {
        for k in 0..=n {
            let exact = factorial(n) / (factorial(k) * factorial(n - k));
            let got = log_binomial(n, k).unwrap().exp();
            assert!((got - exact as f64).abs() <= 1e-10 * exact as f64, "C({n},{k})");
        }
    }
}

#[test]
fn log_binomial_matches_big_integers() {
    for (n, k) in [(2000, 100), (2000, 1000), (5000, 37), (1_000_000, 500)] {
        let want = big_ln(&exact_binomial(n, k));
        let got = log_binomial(n, k).unwrap();
        assert!((got - want).abs() <= 1e-9 * want, "({n},{k}): {got} vs {want}");
    }
}

fn arb_ellipsoid_q(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.5..1.5f64, tri_len(n)).prop_map(move |mut q| {
        for i in 0..n {
            q[i * (i + 1) / 2 + i] = q[i * (i + 1) / 2 + i].abs() + 0.2;
        }
        q
    })
}

fn arb_union_q(n: usize, k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((proptest::collection::vec(-3.0..3.0f64, n), arb_ellipsoid_q(n)), k)
        .prop_map(|blocks| blocks.into_iter().flat_map(|(c, l)| c.into_iter().chain(l)).collect())
}

fn arb_family_q() -> impl Strategy<Value = (ScoreFamily, Vec<f64>)> {
    prop_oneof![
        (1usize..4).prop_flat_map(|n| (Just(n), 0.0..3.0f64))
            .prop_map(|(n, r)| (make_family(FamilyKind::Sphere, n).unwrap(), vec![r])),
        (1usize..4).prop_flat_map(|n| (Just(n), proptest::collection::vec(0.0..3.0f64, n)))
            .prop_map(|(n, q)| (make_family(FamilyKind::Interval, n).unwrap(), q)),
        (1usize..4).prop_flat_map(|n| (Just(n), arb_ellipsoid_q(n)))
            .prop_map(|(n, q)| (make_family(FamilyKind::Ellipsoid, n).unwrap(), q)),
        (1usize..3, 1usize..4).prop_flat_map(|(n, k)| (Just(n), Just(k), arb_union_q(n, k)))
            .prop_map(|(n, k, q)| (make_family(FamilyKind::UnionEllipsoid { components: k }, n).unwrap(), q)),
        (1usize..3, 1usize..4)
            .prop_flat_map(|(n, k)| (
                Just(n),
                Just(k),
                proptest::collection::vec(-2.0..2.0f64, n * k),
                proptest::collection::vec(0.2..1.5f64, k),
                0.05..1.0f64,
            ))
            .prop_map(|(n, k, mu, sigma, gamma)| {
                let q = mu.into_iter().chain(sigma).chain([gamma]).collect();
                (make_family(FamilyKind::Rbf { centers: k }, n).unwrap(), q)
            }),
    ]
}

fn point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-6.0..6.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn incomplete_beta_symmetry(x in 0.0..=1.0f64, a in 0.05..200.0f64, b in 0.05..200.0f64) {
        let lhs = reg_inc_beta(x, a, b).unwrap() + reg_inc_beta(1.0 - x, b, a).unwrap();
        prop_assert!((lhs - 1.0).abs() <= 2e-10, "{lhs}");
    }

    #[test]
    fn union_score_is_min_of_components(q in arb_union_q(2, 3), r in point(2)) {
        let union = make_family(FamilyKind::UnionEllipsoid { components: 3 }, 2).unwrap();
        let single = make_family(FamilyKind::Ellipsoid, 2).unwrap();
        let block = 2 + tri_len(2);
        let want = q.chunks(block)
            .map(|c| {
                let shifted = [r[0] - c[0], r[1] - c[1]];
                single.max_score(&c[2..], &shifted)
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!((union.max_score(&q, &r) - want).abs() <= 1e-12);
    }

    #[test]
    fn ellipsoid_membership_matches_eigen_oracle(q in arb_ellipsoid_q(3), r in point(3)) {
        let family = make_family(FamilyKind::Ellipsoid, 3).unwrap();
        let precision = lower_gram(&unpack_lower(&q, 3), 3);
        let eig = DMatrix::from_row_slice(3, 3, &precision).symmetric_eigen();
        let rv = DVector::from_column_slice(&r);
        let form: f64 = (0..3)
            .map(|i| eig.eigenvalues[i] * eig.eigenvectors.column(i).dot(&rv).powi(2))
            .sum();
        let s = family.max_score(&q, &r);
        prop_assert!((s - (form - 1.0)).abs() <= 1e-9 * form.max(1.0));
    }

    #[test]
    fn slack_vanishes_exactly_on_members((family, q) in arb_family_q(), seed in any::<u64>()) {
        let n = family.n_y;
        let q = ParamVector::new(&family, q).unwrap();
        let set = mvcp::PredictionSet { family, q: q.clone() };
        let mut rng = mvcp::rng::SeededRng::new(seed);
        for _ in 0..32 {
            let r: Vec<f64> = (0..n).map(|_| rng.uniform_range(-6.0, 6.0)).collect();
            let member = set.membership(&r).unwrap();
            let slack = family.slack(&q, &r).unwrap();
            prop_assert_eq!(slack == 0.0, member);
            prop_assert!(slack >= 0.0);
        }
    }

    #[test]
    fn bounding_box_contains_every_member((family, q) in arb_family_q(), seed in any::<u64>()) {
        let n = family.n_y;
        let set = mvcp::PredictionSet::new(family, q).unwrap();
        let bbox = set.bounding_box(&ResidualSet::empty(n).unwrap()).unwrap();
        let mut rng = mvcp::rng::SeededRng::new(seed);
        for _ in 0..2000 {
            let r: Vec<f64> = (0..n).map(|_| rng.uniform_range(-20.0, 20.0)).collect();
            if set.contains(&r) {
                prop_assert!(bbox.contains(&r), "{r:?} outside {bbox:?}");
            }
        }
    }

    #[test]
    fn csv_round_trip(
        rows in proptest::collection::vec(
            proptest::collection::vec(prop_oneof![
                any::<f64>().prop_filter("finite", |v| v.is_finite()),
                Just(1e-300), Just(-1e300), Just(0.0), Just(-0.0), Just(5e-324),
            ], 3),
            0..20,
        )
    ) {
        let set = ResidualSet::new(3, rows.concat()).unwrap();
        let mut buf = Vec::new();
        write_residuals(&set, &mut buf).unwrap();
        let back = read_residuals(buf.as_slice()).unwrap();
        prop_assert_eq!(back.n_y(), 3);
        let same = back.as_slice().iter().zip(set.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same && back.len() == set.len());
    }

    #[test]
    fn model_json_round_trip((family, q) in arb_family_q(), eps in 0.001..0.999f64, seed in any::<u64>()) {
        let model = CalibratedModel {
            family,
            q: ParamVector::new(&family, q).unwrap(),
            method: Method::Relmcp,
            n_cal: 123,
            eps,
            seed,
            details: CalibrationDetails::Relmcp { phi: eps / 3.0, d: 7, n_eval: 4, i_val: 2 },
            certificate: Certificate {
                method: CertificateKind::Relmcp,
                eps_target: eps,
                expected_bound: None,
                beta: 0.1,
                beta_dist: None,
                eps_certified: Some(eps * 0.99),
                assumptions_convex: family.convex_in_q(),
                adaptive_penalty: true,
            },
        };
        let record = ModelRecord::from(&model);
        let back = model_from_json(&model_to_json(&record).unwrap()).unwrap();
        prop_assert_eq!(&back, &record);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.q), bits(&model.q.0));
        prop_assert_eq!(CalibratedModel::try_from(back).unwrap(), model);
    }

    #[test]
    fn scalar_threshold_leaves_rho_scores_above(
        scores in proptest::collection::hash_set(0u32..1_000_000, 20..300),
        eps in 0.01..0.5f64,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1000.0).collect();
        if let Ok(rho) = scp_outlier_budget(scores.len(), eps) {
            let t = scp_calibrate(&scores, eps).unwrap();
            prop_assert_eq!(scores.iter().filter(|&&s| s > t).count(), rho);
        }
    }

    #[test]
    fn bisection_stable_under_tolerance_halving(c in 0.1..10.0f64) {
        let f = |x: f64| x * x * x - c;
        let a = bisect_root(f, 0.0, 3.0, 1e-12).unwrap();
        let b = bisect_root(f, 0.0, 3.0, 5e-13).unwrap();
        prop_assert!((a - b).abs() <= 1e-11);
    }

    #[test]
    fn kmeans_assigns_nearest_center(seed in any::<u64>(), k in 1usize..5) {
        let points = mvcp::dataio::gen_residuals(&mvcp::dataio::GeneratorSpec::vehicle_analog(), 60, seed).unwrap();
        let result = kmeans(&points, k, seed, 100).unwrap();
        let dist = |r: &[f64], c: &[f64]| r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        for (m, r) in points.rows().enumerate() {
            let own = dist(r, &result.centers[result.assignment[m]]);
            prop_assert!(result.centers.iter().all(|c| own <= dist(r, c) + 1e-12));
        }
        prop_assert!(result.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}

/// Left side of the certificate equation, summed directly in log space.
fn certificate_lhs(n: usize, d: usize, beta: f64, n_eval: usize, eps: f64) -> f64 {
    let log_c_nd = log_binomial(n as u64, d as u64).unwrap();
    (d..n)
        .map(|j| {
            (log_binomial(j as u64, d as u64).unwrap() - log_c_nd - (n - j) as f64 * (1.0 - eps).ln()).exp()
        })
        .sum::<f64>()
        * beta
        / (n_eval as f64 * n as f64)
}

#[test]
fn certificate_equation_shape() {
    for n in [5usize, 20, 100, 400] {
        for d in (0..n).step_by((n / 5).max(1)) {
            for (beta, n_eval) in [(0.01, 1), (0.2, 4)] {
                // Hockey-stick value as eps -> 0.
                let at_zero = certificate_lhs(n, d, beta, n_eval, 0.0);
                let hockey = beta / (n_eval as f64 * n as f64) * (n - d) as f64 / (d + 1) as f64;
                assert!((at_zero - hockey).abs() <= 1e-12 * hockey.max(1.0) && at_zero < 1.0);
                let grid: Vec<f64> = (1..50).map(|i| certificate_lhs(n, d, beta, n_eval, i as f64 / 50.0)).collect();
                assert!(grid.windows(2).all(|w| w[1] > w[0] || w[0] == f64::INFINITY));
                let eps = certified_miscoverage(n, d, beta, n_eval).unwrap();
                if eps < 1.0 {
                    assert!((certificate_lhs(n, d, beta, n_eval, eps) - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn certificate_grows_with_complexity() {
    for n in [30usize, 200] {
        for beta in [0.05, 0.3] {
            let eps: Vec<f64> = (0..n).map(|d| certified_miscoverage(n, d, beta, 2).unwrap()).collect();
            assert!(eps.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        }
    }
}
