//! Property tests of the model invariants: value ranges, monotonicity,
//! proportional-hazards structure, basis orthogonality, and metric
//! invariances.

use proptest::prelude::*;

use latage::math::Mat;
use latage::metrics::{c_index_truncated, clopper_pearson, relative_bias, rrmse};
use latage::model::{
    cif, hazard, individual_trajectory, latent_age, orthonormal_basis, survival, survival_shift,
    FixedEffects, Geometry, RandomEffects,
};

fn arb_fixed_effects() -> impl Strategy<Value = FixedEffects> {
    (
        3.0..7.0f64,                                  // t0
        prop::collection::vec(1.0..15.0f64, 3),       // g
        prop::collection::vec(0.02..0.3f64, 3),       // v0
        prop::collection::vec(0.5..4.0f64, 2),        // nu
        prop::collection::vec(0.6..3.5f64, 2),        // rho
        prop::collection::vec(-0.4..0.4f64, 4),       // beta entries (2x2)
        prop::collection::vec(-0.4..0.4f64, 4),       // zeta entries (2x2)
    )
        .prop_map(|(t0, g, v0, nu, rho, beta, zeta)| FixedEffects {
            t0,
            sigma_tau: 1.0,
            sigma_xi: 0.7,
            g,
            v0,
            sigma_noise: vec![0.05; 3],
            nu,
            rho,
            beta: Mat::from_rows(&[beta[0..2].to_vec(), beta[2..4].to_vec()]).unwrap(),
            zeta: Mat::from_rows(&[zeta[0..2].to_vec(), zeta[2..4].to_vec()]).unwrap(),
        })
}

fn arb_random_effects() -> impl Strategy<Value = RandomEffects> {
    (-1.0..1.0f64, 2.0..8.0f64, prop::collection::vec(-2.0..2.0f64, 2))
        .prop_map(|(xi, tau, sources)| RandomEffects { xi, tau, sources })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_stays_in_open_unit_interval(
        fe in arb_fixed_effects(),
        re in arb_random_effects(),
        t in -20.0..30.0f64,
    ) {
        let geometry = fe.geometry().unwrap();
        for k in 0..3 {
            let v = individual_trajectory(&fe, &re, &geometry, k, t).unwrap();
            prop_assert!(v > 0.0 && v < 1.0, "gamma = {v}");
        }
    }

    #[test]
    fn latent_age_is_affine_and_order_preserving(
        xi in -1.5..1.5f64,
        tau in 0.0..10.0f64,
        t0 in 0.0..10.0f64,
        t1 in -5.0..15.0f64,
        dt in 0.001..5.0f64,
    ) {
        let a = latent_age(xi, tau, t0, t1);
        let b = latent_age(xi, tau, t0, t1 + dt);
        prop_assert!(b > a);
        // Slope is exactly exp(xi).
        prop_assert!(((b - a) / dt - xi.exp()).abs() < 1e-9);
    }

    #[test]
    fn survival_in_unit_interval_and_cif_nondecreasing(
        fe in arb_fixed_effects(),
        re in arb_random_effects(),
        dt in 0.1..6.0f64,
    ) {
        let u = survival_shift(&fe.zeta, &re.sources).unwrap();
        let t1 = re.tau + dt;
        let t2 = t1 + 0.7;
        for l in 0..2 {
            let s = survival(&fe, &re, &u, l, t1);
            prop_assert!(s > 0.0 && s <= 1.0);
            let c1 = cif(&fe, &re, &u, l, t1).unwrap();
            let c2 = cif(&fe, &re, &u, l, t2).unwrap();
            prop_assert!((0.0..1.0).contains(&c1));
            // Nondecreasing within twice the quadrature tolerance: the two
            // integrals may use different adaptive panel splits.
            prop_assert!(c2 >= c1 - 2e-8, "cif decreased: {c1} -> {c2}");
        }
    }

    #[test]
    fn hazard_shift_ratio_is_exact(
        fe in arb_fixed_effects(),
        re in arb_random_effects(),
        dt in 0.05..5.0f64,
        delta in -1.5..1.5f64,
    ) {
        let t = re.tau + dt;
        let base = [0.0, 0.0];
        let shifted = [delta, 0.0];
        let h0 = hazard(&fe, &re, &base, 0, t).unwrap();
        let h1 = hazard(&fe, &re, &shifted, 0, t).unwrap();
        prop_assert!((h1 / h0 - delta.exp()).abs() < 1e-10 * delta.exp());
    }

    #[test]
    fn basis_orthonormal_for_random_v0(
        v0 in prop::collection::vec(0.01..2.0f64, 2..7),
    ) {
        let b = orthonormal_basis(&v0).unwrap();
        let k = v0.len();
        for c in 0..k - 1 {
            let col = b.col_to_vec(c);
            let dot_v0: f64 = col.iter().zip(&v0).map(|(a, b)| a * b).sum();
            prop_assert!(dot_v0.abs() < 1e-12);
            for c2 in c..k - 1 {
                let col2 = b.col_to_vec(c2);
                let dot: f64 = col.iter().zip(&col2).map(|(a, b)| a * b).sum();
                let want = if c == c2 { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn space_shift_orthogonal_to_v0(
        v0 in prop::collection::vec(0.01..2.0f64, 3..6),
        s in prop::collection::vec(-2.0..2.0f64, 2),
    ) {
        let k = v0.len();
        let beta = Mat::from_rows(
            &(0..k - 1).map(|o| vec![0.1 * (o as f64 + 1.0), -0.2]).collect::<Vec<_>>(),
        )
        .unwrap();
        let geometry = Geometry::new(&v0, &beta).unwrap();
        let w = latage::model::space_shift(&geometry, &s).unwrap();
        let dot: f64 = w.iter().zip(&v0).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn rrmse_dominates_relative_bias(
        estimates in prop::collection::vec(0.1..5.0f64, 1..40),
        truth in 0.5..2.0f64,
    ) {
        let rb = relative_bias(&estimates, truth).unwrap();
        let rr = rrmse(&estimates, truth).unwrap();
        prop_assert!(rr >= rb.abs() - 1e-9);
    }

    #[test]
    fn clopper_pearson_brackets_point_estimate(
        n in 1..200usize,
        frac in 0.0..=1.0f64,
    ) {
        let s = ((n as f64) * frac).round() as usize;
        let s = s.min(n);
        let (lo, hi) = clopper_pearson(s, n, 0.95).unwrap();
        let point = s as f64 / n as f64 * 100.0;
        prop_assert!((0.0..=100.0).contains(&lo) && (0.0..=100.0).contains(&hi));
        prop_assert!(lo <= point + 1e-9 && point <= hi + 1e-9);
    }

    #[test]
    fn c_index_invariant_under_monotone_transform(
        risks in prop::collection::vec(0.0..1.0f64, 8..40),
        seed in 0..1000u64,
    ) {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = risks.len();
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let ind: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        if !ind.iter().any(|i| *i) {
            return Ok(());
        }
        let horizon = 5.0;
        let a = c_index_truncated(&risks, &times, &ind, horizon);
        let transformed: Vec<f64> = risks.iter().map(|r| (2.5 * r).exp() + 1.0).collect();
        let b = c_index_truncated(&transformed, &times, &ind, horizon);
        match (a, b) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one variant failed where the other did not"),
        }
    }
}
