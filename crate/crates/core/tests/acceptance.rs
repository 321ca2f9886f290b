//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture` to
//! see them). The expensive fixtures (reference-cohort fits) are shared
//! through lazy statics, so the suite runs each fit once.

#![allow(clippy::needless_range_loop)]

use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use latage::aft::{fit_weibull_cause_specific, fit_weibull_censored, latent_age_check};
use latage::data::{PatientRecord, Visit};
use latage::likelihood::{
    jacobian_random_effects, reconstruct_total, sufficient_statistics, total_log_likelihood,
    LatentFixedEffects,
};
use latage::math::{pearson, Mat};
use latage::metrics::{
    c_index_truncated, clopper_pearson, cumulative_dynamic_auc, extended_bic_detailed, icc,
    integrated_brier_score,
};
use latage::model::{
    cif, population_trajectory, survival, survival_shift, FixedEffects, Hyperparameters,
    RandomEffects,
};
use latage::personalize::{personalize, PersonalizeOptions};
use latage::saem::{fit, FitResult, SaemSettings};
use latage::simulate::{simulate_dataset, LinkMode, SimulatedCohort, SimulationConfig};

const DATASET_SEED: u64 = 22;
const CHAIN_SEED: u64 = 99;

fn protocol(n_iterations: usize, n_robbins_monro: usize) -> SaemSettings {
    SaemSettings {
        n_burnin: 2000,
        n_robbins_monro,
        seed: CHAIN_SEED,
        ..SaemSettings::desk_scale(n_iterations)
    }
}

struct Fixture {
    cohort: SimulatedCohort,
    fit: FitResult,
}

fn fixture(mode: LinkMode) -> Fixture {
    let config = SimulationConfig::reference(mode, 300, DATASET_SEED);
    let cohort = simulate_dataset(&config).expect("simulation");
    let hyper = Hyperparameters::new(4, 2, 2);
    let fit = fit(&cohort.dataset, &hyper, &protocol(20_000, 4_000)).expect("fit");
    Fixture { cohort, fit }
}

fn real_like() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| fixture(LinkMode::RealLike))
}

fn no_link() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| fixture(LinkMode::NoLink))
}

fn ree_pct(estimate: f64, truth: f64) -> f64 {
    (estimate - truth) / truth * 100.0
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[acceptance] {criterion}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic Jacobian vs central finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let k = 3 + trial % 2;
        let ns = 2;
        let fe = FixedEffects {
            t0: rng.random_range(3.0..7.0),
            sigma_tau: rng.random_range(0.5..1.5),
            sigma_xi: rng.random_range(0.3..1.0),
            g: (0..k).map(|_| rng.random_range(1.0..15.0)).collect(),
            v0: (0..k).map(|_| rng.random_range(0.03..0.3)).collect(),
            sigma_noise: (0..k).map(|_| rng.random_range(0.02..0.12)).collect(),
            nu: vec![rng.random_range(1.0..4.0), rng.random_range(2.0..5.0)],
            rho: vec![rng.random_range(0.8..3.0), rng.random_range(0.8..3.0)],
            beta: Mat::from_rows(
                &(0..k - 1)
                    .map(|_| (0..ns).map(|_| rng.random_range(-0.3..0.3)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap(),
            zeta: Mat::from_rows(&[
                (0..ns).map(|_| rng.random_range(-0.3..0.3)).collect(),
                (0..ns).map(|_| rng.random_range(-0.3..0.3)).collect(),
            ])
            .unwrap(),
        };
        let geometry = fe.geometry().unwrap();
        let re = RandomEffects {
            xi: rng.random_range(-0.5..0.5),
            tau: fe.t0 + rng.random_range(-1.0..1.0),
            sources: (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        // Stay away from the barrier: event well after tau.
        let event_time = re.tau + rng.random_range(0.8..2.5);
        let event_code = trial % 3; // censored, event 1, event 2
        let mut visits = Vec::new();
        for j in 0..4 {
            let t = re.tau - 0.4 + 0.35 * j as f64;
            let values =
                (0..k).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<f64>>();
            visits.push(Visit { time: t, values });
        }
        let patient = PatientRecord { id: format!("t{trial}"), visits, event_time, event_code };

        let jac = jacobian_random_effects(&patient, &fe, &re, &geometry).unwrap();
        let total = jac.total();
        let analytic = {
            let mut v = vec![total.xi, total.tau];
            v.extend_from_slice(&total.sources);
            v
        };

        // Independent oracle: central finite differences of the patient's
        // log posterior kernel.
        let objective = |re: &RandomEffects| -> f64 {
            let mut acc = 0.0;
            for v in &patient.visits {
                for kk in 0..k {
                    let gamma =
                        latage::model::individual_trajectory(&fe, re, &geometry, kk, v.time)
                            .unwrap();
                    let sig = fe.sigma_noise[kk];
                    acc += -(sig * (2.0 * std::f64::consts::PI).sqrt()).ln()
                        - (v.values[kk] - gamma).powi(2) / (2.0 * sig * sig);
                }
            }
            let u = survival_shift(&fe.zeta, &re.sources).unwrap();
            for l in 0..2 {
                acc += survival(&fe, re, &u, l, patient.event_time).ln();
                if patient.event_code == l + 1 {
                    acc += latage::model::hazard(&fe, re, &u, l, patient.event_time)
                        .unwrap()
                        .ln();
                }
            }
            let zt = (re.tau - fe.t0) / fe.sigma_tau;
            let zx = re.xi / fe.sigma_xi;
            acc -= 0.5 * (zt * zt + zx * zx);
            for &s in &re.sources {
                acc -= 0.5 * s * s;
            }
            acc
        };
        for dim in 0..2 + ns {
            let x = match dim {
                0 => re.xi,
                1 => re.tau,
                d => re.sources[d - 2],
            };
            let h = 1e-6 * x.abs().max(1.0);
            let mut plus = re.clone();
            let mut minus = re.clone();
            match dim {
                0 => {
                    plus.xi += h;
                    minus.xi -= h;
                }
                1 => {
                    plus.tau += h;
                    minus.tau -= h;
                }
                d => {
                    plus.sources[d - 2] += h;
                    minus.sources[d - 2] -= h;
                }
            }
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (analytic[dim] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    let elapsed = started.elapsed();
    report(
        "criterion 1 (gradient correctness)",
        worst < 1e-6 && elapsed.as_secs_f64() < 10.0,
        &format!("max rel err {worst:.2e}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: sufficient-statistic reconstruction identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_sufficient_statistic_identity() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut config = SimulationConfig::reference(LinkMode::RealLike, 5, 1000 + seed);
        config.followup_mean = 0.8;
        let cohort = simulate_dataset(&config).unwrap();
        let hyper = Hyperparameters::new(4, 2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let theta = config.fixed.clone();
        let mut z_fe = LatentFixedEffects::at_means(&theta);
        for v in z_fe.log_g.iter_mut().chain(z_fe.log_v0.iter_mut()) {
            *v += rng.random_range(-0.05..0.05);
        }
        for v in z_fe.beta.data_mut().iter_mut().chain(z_fe.zeta.data_mut().iter_mut()) {
            *v += rng.random_range(-0.05..0.05);
        }
        for v in z_fe.neg_log_nu.iter_mut().chain(z_fe.log_rho.iter_mut()) {
            *v += rng.random_range(-0.05..0.05);
        }
        let re: Vec<RandomEffects> = cohort
            .truth
            .iter()
            .map(|r| RandomEffects {
                xi: r.xi + rng.random_range(-0.1..0.1),
                tau: r.tau - rng.random_range(0.0..0.2),
                sources: r.sources.iter().map(|s| s + rng.random_range(-0.1..0.1)).collect(),
            })
            .collect();
        let natural = z_fe.to_fixed_effects(&theta);
        let geometry = natural.geometry().unwrap();
        let direct =
            total_log_likelihood(&cohort.dataset, &theta, &z_fe, &re, &geometry, &hyper).unwrap();
        let stats = sufficient_statistics(&cohort.dataset, &z_fe, &re).unwrap();
        let rebuilt = reconstruct_total(
            &stats,
            &theta,
            &hyper,
            &cohort.dataset.n_obs_per_outcome(),
            cohort.dataset.n_patients(),
        );
        worst = worst.max((direct.total - rebuilt).abs());
    }
    let elapsed = started.elapsed();
    report(
        "criterion 2 (sufficient-statistic identity)",
        worst < 1e-8 && elapsed.as_secs_f64() < 5.0,
        &format!("max abs gap {worst:.2e}, {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: core identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_core_identities() {
    let started = Instant::now();
    let config = SimulationConfig::reference(LinkMode::RealLike, 10, 3);
    let fe = config.fixed.clone();
    // Curve value at the reference time.
    let mut ok = true;
    let mut detail = String::new();
    for kk in 0..4 {
        let v = population_trajectory(&fe, kk, fe.t0);
        if (v - 1.0 / (1.0 + fe.g[kk])).abs() > 1e-15 {
            ok = false;
            detail = format!("curve value at t0 off for outcome {kk}");
        }
    }
    // Survival equals one at tau; total-event-probability identity.
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let re = RandomEffects {
            xi: rng.random_range(-0.8..0.8),
            tau: rng.random_range(3.0..7.0),
            sources: vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
        };
        let u = survival_shift(&fe.zeta, &re.sources).unwrap();
        for l in 0..2 {
            if survival(&fe, &re, &u, l, re.tau) != 1.0 {
                ok = false;
                detail = "survival at tau differs from one".into();
            }
        }
        let t = re.tau + rng.random_range(0.01..8.0);
        let cif_sum: f64 = (0..2).map(|l| cif(&fe, &re, &u, l, t).unwrap()).sum();
        let surv_prod: f64 = (0..2).map(|l| survival(&fe, &re, &u, l, t)).product();
        worst = worst.max((cif_sum + surv_prod - 1.0).abs());
    }
    if worst > 1e-6 {
        ok = false;
        detail = format!("total-event identity gap {worst:.2e}");
    }
    let elapsed = started.elapsed();
    if !detail.is_empty() {
        detail = format!("; {detail}");
    }
    report(
        "criterion 3 (core identities)",
        ok && elapsed.as_secs_f64() < 5.0,
        &format!("max identity gap {worst:.2e}, {elapsed:.1?}{detail}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: parameter recovery at desk scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_parameter_recovery() {
    let fx = real_like();
    let truth = SimulationConfig::reference(LinkMode::RealLike, 300, DATASET_SEED).fixed;
    let est = &fx.fit.theta_hat;

    let mut failures = Vec::new();
    let mut lines = Vec::new();
    let mut check = |name: String, estimate: f64, truth: f64, bound: f64| {
        let ree = ree_pct(estimate, truth);
        lines.push(format!("{name} {ree:+.1}%"));
        if ree.abs() >= bound {
            failures.push(format!("{name} REE {ree:+.1}% exceeds {bound}%"));
        }
    };
    check("t0".into(), est.t0, truth.t0, 25.0);
    check("sigma_tau".into(), est.sigma_tau, truth.sigma_tau, 25.0);
    for kk in 0..4 {
        check(format!("g_{kk}"), est.g[kk], truth.g[kk], 25.0);
        check(format!("v0_{kk}"), est.v0[kk], truth.v0[kk], 25.0);
        check(format!("sigma_{kk}"), est.sigma_noise[kk], truth.sigma_noise[kk], 25.0);
    }
    check("sigma_xi".into(), est.sigma_xi, truth.sigma_xi, 35.0);
    for l in 0..2 {
        check(format!("nu_{l}"), est.nu[l], truth.nu[l], 35.0);
        check(format!("rho_{l}"), est.rho[l], truth.rho[l], 35.0);
    }
    report(
        "criterion 4 (desk-scale parameter recovery)",
        failures.is_empty(),
        &format!("{}{}", lines.join(", "), if failures.is_empty() { String::new() } else { format!("; FAILED: {}", failures.join("; ")) }),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: random-effect recovery (intraclass correlation)
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_random_effect_recovery() {
    let fx = real_like();
    let tau_true: Vec<f64> = fx.cohort.truth.iter().map(|r| r.tau).collect();
    let tau_est: Vec<f64> = fx.fit.re_posterior_mean.iter().map(|r| r.tau).collect();
    let xi_true: Vec<f64> = fx.cohort.truth.iter().map(|r| r.xi).collect();
    let xi_est: Vec<f64> = fx.fit.re_posterior_mean.iter().map(|r| r.xi).collect();
    let icc_tau = icc(&tau_true, &tau_est).unwrap();
    let icc_xi = icc(&xi_true, &xi_est).unwrap();
    let mut icc_w = Vec::new();
    for kk in 0..4 {
        let w_true: Vec<f64> = fx.cohort.truth_space_shifts.iter().map(|w| w[kk]).collect();
        let w_est: Vec<f64> = fx.fit.space_shift_mean.iter().map(|w| w[kk]).collect();
        icc_w.push(icc(&w_true, &w_est).unwrap());
    }
    let pass = icc_tau >= 0.85 && icc_xi >= 0.75 && icc_w.iter().all(|v| *v >= 0.85);
    report(
        "criterion 5 (random-effect recovery)",
        pass,
        &format!(
            "ICC tau {icc_tau:.3}, xi {icc_xi:.3}, w {:?}",
            icc_w.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: source selection by extended BIC
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_source_selection() {
    let fx = real_like();
    let mut bics = Vec::new();
    for ns in 1..=3usize {
        let hyper = Hyperparameters::new(4, 2, ns);
        let res = fit(&fx.cohort.dataset, &hyper, &protocol(10_000, 2_000)).unwrap();
        let bic = extended_bic_detailed(&res, &fx.cohort.dataset, &hyper).unwrap();
        bics.push(bic.bic);
    }
    let argmin = bics
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap();
    report(
        "criterion 6 (source selection)",
        argmin == 2,
        &format!("BIC by n_sources: {bics:?}, argmin {argmin}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: latent-age diagnostic
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_latent_age_diagnostic() {
    let real = real_like();
    let aft_real = fit_weibull_cause_specific(&real.cohort.dataset).unwrap();
    let diag_real = latent_age_check(&real.fit.theta_hat, &aft_real).unwrap();
    let real_ok = diag_real
        .iter()
        .all(|d| d.matched_scale_reldiff_pct.abs() < 25.0 && d.concordant);

    let nl = no_link();
    let aft_nl = fit_weibull_cause_specific(&nl.cohort.dataset).unwrap();
    let diag_nl = latent_age_check(&nl.fit.theta_hat, &aft_nl).unwrap();
    let nl_ok = diag_nl
        .iter()
        .all(|d| d.matched_scale_reldiff_pct.abs() > 50.0 && !d.concordant);

    report(
        "criterion 7 (latent-age diagnostic)",
        real_ok && nl_ok,
        &format!(
            "real-like reldiff {:?} concordant {:?}; no-link reldiff {:?} concordant {:?}",
            diag_real.iter().map(|d| (d.matched_scale_reldiff_pct * 10.0).round() / 10.0).collect::<Vec<_>>(),
            diag_real.iter().map(|d| d.concordant).collect::<Vec<_>>(),
            diag_nl.iter().map(|d| (d.matched_scale_reldiff_pct * 10.0).round() / 10.0).collect::<Vec<_>>(),
            diag_nl.iter().map(|d| d.concordant).collect::<Vec<_>>(),
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: metric unit correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_metric_units() {
    // Exact binomial interval reproduces the reference to one decimal.
    let (lo, hi) = clopper_pearson(94, 100, 0.95).unwrap();
    let cp_ok = (lo - 87.4).abs() < 0.05 && (hi - 97.8).abs() < 0.05;

    // Random scores score one half.
    let mut rng = ChaCha12Rng::seed_from_u64(88);
    let n = 2_000;
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
    let risk: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let ind = vec![true; n];
    let c = c_index_truncated(&risk, &times, &ind, 5.0).unwrap();
    let (_, auc) = cumulative_dynamic_auc(&risk, &times, &ind, &[1.0, 2.0]).unwrap();
    let c_ok = (c - 0.5).abs() < 0.02;
    let auc_ok = (auc - 0.5).abs() < 0.03;

    // Constant one-half predictions without censoring give exactly 0.25.
    let times4 = [1.0, 2.0, 5.0, 6.0];
    let ind4 = [true, true, true, true];
    let half = vec![vec![0.5, 0.5]; 4];
    let ibs = integrated_brier_score(&half, &times4, &ind4, &[3.0, 4.0]).unwrap();
    let ibs_ok = (ibs - 0.25).abs() < 1e-12;

    report(
        "criterion 8 (metric unit correctness)",
        cp_ok && c_ok && auc_ok && ibs_ok,
        &format!("CP [{lo:.1}, {hi:.1}], C {c:.3}, AUC {auc:.3}, IBS {ibs:.4}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: AFT baseline consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_aft_consistency() {
    let (nu_true, rho_true) = (2.8, 1.7);
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let e = -(1.0 - rng.random::<f64>()).ln();
            nu_true * e.powf(1.0 / rho_true)
        })
        .collect();
    let observed = vec![true; draws.len()];
    let fit = fit_weibull_censored(&draws, &observed).unwrap();
    let nu_err = (fit.nu - nu_true).abs() / nu_true;
    let rho_err = (fit.rho - rho_true).abs() / rho_true;
    report(
        "criterion 9 (AFT baseline consistency)",
        nu_err < 0.03 && rho_err < 0.03,
        &format!("nu {:.3} ({:+.2}%), rho {:.3} ({:+.2}%)", fit.nu, nu_err * 100.0, fit.rho, rho_err * 100.0),
    );
}

// ---------------------------------------------------------------------------
// Supplementary: personalization agrees with the chain posteriors
// ---------------------------------------------------------------------------

#[test]
fn supplementary_personalization_matches_chain() {
    let fx = real_like();
    let fe = &fx.fit.theta_hat;
    let geometry = fe.geometry().unwrap();
    let opts = PersonalizeOptions { seed: 4, ..Default::default() };
    let take = 60usize;
    let mut map_tau = Vec::new();
    let mut map_xi = Vec::new();
    for patient in fx.cohort.dataset.patients.iter().take(take) {
        let re = personalize(patient, fe, &geometry, &opts).unwrap();
        map_tau.push(re.tau);
        map_xi.push(re.xi);
    }
    let chain_tau: Vec<f64> =
        fx.fit.re_posterior_mean.iter().take(take).map(|r| r.tau).collect();
    let chain_xi: Vec<f64> = fx.fit.re_posterior_mean.iter().take(take).map(|r| r.xi).collect();
    let corr_tau = pearson(&map_tau, &chain_tau);
    let corr_xi = pearson(&map_xi, &chain_xi);
    report(
        "supplementary (personalization vs chain)",
        corr_tau > 0.9 && corr_xi > 0.9,
        &format!("corr tau {corr_tau:.3}, xi {corr_xi:.3} over {take} patients"),
    );
}

// ---------------------------------------------------------------------------
// Supplementary: seed stability of the estimate
// ---------------------------------------------------------------------------

#[test]
fn supplementary_chain_acceptance_rates_settle() {
    let fx = real_like();
    // Average per-category acceptance over the final 1000 iterations; the
    // patient blocks must sit in the adapted band.
    let rows = &fx.fit.traces.acceptance;
    let names = &fx.fit.traces.acceptance_names;
    let window = &rows[rows.len() - 1000..];
    let mut detail = String::new();
    let mut ok = true;
    for (c, name) in names.iter().enumerate() {
        if !["xi", "tau", "sources"].contains(&name.as_str()) {
            continue;
        }
        let mean: f64 = window.iter().map(|r| r[c]).sum::<f64>() / window.len() as f64;
        detail.push_str(&format!("{name} {mean:.2} "));
        if !(0.2..=0.45).contains(&mean) {
            ok = false;
        }
    }
    report("supplementary (acceptance rates)", ok, detail.trim());
}

/// The dataset used throughout matches the reference scenario's shape.
#[test]
fn supplementary_reference_cohort_shape() {
    let fx = real_like();
    let summary = latage::simulate::dataset_summary(&fx.cohort.dataset);
    let f1 = summary.event_fraction(0);
    let f2 = summary.event_fraction(1);
    let vpp = summary.visits_per_patient_mean;
    let ok = (0.17..=0.31).contains(&f1) && (0.05..=0.14).contains(&f2) && (5.4..=7.9).contains(&vpp);
    report(
        "supplementary (cohort shape)",
        ok,
        &format!("event fractions {f1:.3}/{f2:.3}, visits/patient {vpp:.1}"),
    );
}
