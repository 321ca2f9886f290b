//! Cause-specific Weibull accelerated-failure-time baseline (no covariates)
//! and the shared-latent-age diagnostic built on it.
//!
//! Each cause is fitted marginally by maximum likelihood with the competing
//! causes treated as right-censoring, on the dataset's raw time axis. The
//! diagnostic compares the AFT scale against the joint model's reference time
//! plus Weibull scale (the joint survival clock starts at the reference
//! time), and checks that both models describe the same hazard progression.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FixedEffects;

/// Marginal Weibull fit for one cause.
#[derive(Debug, Clone)]
pub struct WeibullAftFit {
    /// Scale (same unit as the durations).
    pub nu: f64,
    /// Shape.
    pub rho: f64,
    /// 95% confidence interval for the shape, from the inverse observed
    /// information on the log scale.
    pub rho_ci: (f64, f64),
    pub log_likelihood: f64,
    pub n_events: usize,
    pub iterations: usize,
}

/// Right-censored Weibull maximum likelihood on positive durations.
/// Damped Newton iterations on `(log nu, log rho)`.
pub fn fit_weibull_censored(durations: &[f64], observed: &[bool]) -> Result<WeibullAftFit> {
    if durations.len() != observed.len() {
        return Err(Error::DimensionMismatch("durations and observed flags differ in length".into()));
    }
    if durations.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput("durations must be positive and finite".into()));
    }
    let d = observed.iter().filter(|o| **o).count();
    if d == 0 {
        return Err(Error::InvalidInput("no observed events for this cause".into()));
    }
    let df = d as f64;
    let log_t: Vec<f64> = durations.iter().map(|t| t.ln()).collect();

    // loglik(a, b) with a = log nu, b = log rho:
    //   sum_events [b + (rho - 1) log t - rho a] - sum_all exp(rho (log t - a))
    let eval = |a: f64, b: f64| -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let rho = b.exp();
        let mut ll = 0.0;
        let mut sum_w = 0.0;
        let mut sum_wc = 0.0;
        let mut sum_wc2 = 0.0;
        let mut sum_c_ev = 0.0;
        for (i, (&lt, &obs)) in log_t.iter().zip(observed).enumerate() {
            let _ = i;
            let c = lt - a;
            let w = (rho * c).exp();
            ll -= w;
            sum_w += w;
            sum_wc += w * c;
            sum_wc2 += w * c * c;
            if obs {
                ll += b + (rho - 1.0) * lt - rho * a;
                sum_c_ev += c;
            }
        }
        let grad_a = rho * (sum_w - df);
        let grad_b = df + rho * sum_c_ev - rho * sum_wc;
        let h_aa = -rho * rho * sum_w;
        let h_ab = rho * (sum_w - df) + rho * rho * sum_wc;
        let h_bb = rho * sum_c_ev - rho * sum_wc - rho * rho * sum_wc2;
        (ll, [grad_a, grad_b], [[h_aa, h_ab], [h_ab, h_bb]])
    };

    // Exponential MLE as the starting point. The gradient entries are sums
    // over subjects, so convergence thresholds scale with the sample size.
    let grad_tol = 1e-8 * durations.len() as f64;
    let total_time: f64 = durations.iter().sum();
    let mut a = (total_time / df).ln();
    let mut b = 0.0;
    let (mut ll, mut grad, mut hess) = eval(a, b);
    let mut iterations = 0usize;
    for iter in 0..200 {
        iterations = iter + 1;
        if grad[0].abs().max(grad[1].abs()) < grad_tol {
            break;
        }
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        let (mut da, mut db);
        if det.abs() > 1e-300 {
            da = -(hess[1][1] * grad[0] - hess[0][1] * grad[1]) / det;
            db = -(-hess[1][0] * grad[0] + hess[0][0] * grad[1]) / det;
        } else {
            da = grad[0] * 1e-3;
            db = grad[1] * 1e-3;
        }
        // Keep the step a descent direction of -loglik; fall back to a small
        // gradient step when the Hessian is not negative definite.
        if da * grad[0] + db * grad[1] <= 0.0 {
            da = grad[0] * 1e-3;
            db = grad[1] * 1e-3;
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let (ll_new, grad_new, hess_new) = eval(a + step * da, b + step * db);
            if ll_new > ll - 1e-14 {
                a += step * da;
                b += step * db;
                ll = ll_new;
                grad = grad_new;
                hess = hess_new;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
        if (step * da).abs().max((step * db).abs()) < 1e-13 {
            break;
        }
        if iter == 199 {
            return Err(Error::Numerical("Weibull MLE did not converge in 200 iterations".into()));
        }
    }
    if grad[0].abs().max(grad[1].abs()) > 1e-4 * durations.len() as f64 {
        return Err(Error::Numerical(format!(
            "Weibull MLE stalled with gradient ({:.2e}, {:.2e})",
            grad[0], grad[1]
        )));
    }

    let rho = b.exp();
    let nu = a.exp();
    // Observed information = -Hessian in (a, b); delta-method CI for rho on
    // the log scale.
    let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
    let rho_ci = if det > 0.0 && hess[0][0] < 0.0 {
        let var_b = -hess[0][0] / det;
        if var_b > 0.0 {
            let se = var_b.sqrt();
            (rho * (-1.96 * se).exp(), rho * (1.96 * se).exp())
        } else {
            (rho, rho)
        }
    } else {
        (rho, rho)
    };

    Ok(WeibullAftFit { nu, rho, rho_ci, log_likelihood: ll, n_events: d, iterations })
}

/// Fit each cause marginally, competing causes treated as censoring, on the
/// dataset's raw time axis.
pub fn fit_weibull_cause_specific(dataset: &Dataset) -> Result<Vec<WeibullAftFit>> {
    let mut fits = Vec::with_capacity(dataset.n_events);
    for l in 0..dataset.n_events {
        let durations: Vec<f64> = dataset.patients.iter().map(|p| p.event_time).collect();
        let observed: Vec<bool> =
            dataset.patients.iter().map(|p| p.event_code == l + 1).collect();
        fits.push(fit_weibull_censored(&durations, &observed).map_err(|e| match e {
            Error::InvalidInput(m) => Error::InvalidInput(format!("cause {}: {m}", l + 1)),
            other => other,
        })?);
    }
    Ok(fits)
}

// ---------------------------------------------------------------------------
// Latent-age diagnostic
// ---------------------------------------------------------------------------

/// Hazard progression implied by a Weibull shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HazardClass {
    Decreasing,
    Constant,
    Increasing,
}

impl HazardClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            HazardClass::Decreasing => "decreasing",
            HazardClass::Constant => "constant",
            HazardClass::Increasing => "increasing",
        }
    }
}

/// Classify a shape: "constant" only when a 95% CI is available and contains
/// one; otherwise the sign of `rho - 1` decides.
pub fn classify_hazard(rho: f64, ci: Option<(f64, f64)>) -> HazardClass {
    if let Some((lo, hi)) = ci {
        if lo <= 1.0 && 1.0 <= hi {
            return HazardClass::Constant;
        }
    }
    if rho == 1.0 {
        HazardClass::Constant
    } else if rho < 1.0 {
        HazardClass::Decreasing
    } else {
        HazardClass::Increasing
    }
}

/// Per-event comparison of a joint fit against the marginal AFT baseline.
#[derive(Debug, Clone)]
pub struct LatentAgeDiagnostic {
    /// Event index (0-based).
    pub event: usize,
    /// Relative difference of the AFT scale against the matched joint scale
    /// `t0 + nu`, in percent.
    pub matched_scale_reldiff_pct: f64,
    pub rho_joint: f64,
    pub joint_class: HazardClass,
    pub rho_aft: f64,
    pub rho_aft_ci: (f64, f64),
    pub aft_class: HazardClass,
    /// Whether both models describe the same hazard progression.
    pub concordant: bool,
}

/// Match the AFT scale against `t0 + nu` of the joint fit (the joint survival
/// submodel starts from the reference time) and compare hazard-progression
/// classes.
pub fn latent_age_check(
    joint: &FixedEffects,
    aft: &[WeibullAftFit],
) -> Result<Vec<LatentAgeDiagnostic>> {
    if aft.len() != joint.n_events() {
        return Err(Error::DimensionMismatch("one AFT fit per event required".into()));
    }
    let mut out = Vec::with_capacity(aft.len());
    for (l, fit) in aft.iter().enumerate() {
        let matched = joint.t0 + joint.nu[l];
        let reldiff = (fit.nu - matched) / matched * 100.0;
        let joint_class = classify_hazard(joint.rho[l], None);
        let aft_class = classify_hazard(fit.rho, Some(fit.rho_ci));
        out.push(LatentAgeDiagnostic {
            event: l,
            matched_scale_reldiff_pct: reldiff,
            rho_joint: joint.rho[l],
            joint_class,
            rho_aft: fit.rho,
            rho_aft_ci: fit.rho_ci,
            aft_class,
            concordant: joint_class == aft_class,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn weibull_draws(nu: f64, rho: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = -(1.0 - rng.random::<f64>()).ln();
                nu * e.powf(1.0 / rho)
            })
            .collect()
    }

    #[test]
    fn exponential_data_recovers_unit_shape() {
        let t = weibull_draws(2.0, 1.0, 10_000, 1);
        let obs = vec![true; t.len()];
        let fit = fit_weibull_censored(&t, &obs).unwrap();
        assert!((fit.rho - 1.0).abs() < 0.02, "rho = {}", fit.rho);
        assert!((fit.nu - 2.0).abs() / 2.0 < 0.03, "nu = {}", fit.nu);
    }

    #[test]
    fn uncensored_exponential_scale_near_sample_mean() {
        let t = weibull_draws(1.0, 1.0, 2_000, 2);
        let obs = vec![true; t.len()];
        let fit = fit_weibull_censored(&t, &obs).unwrap();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!((fit.nu - mean).abs() / mean < 0.05, "nu = {} vs mean {mean}", fit.nu);
    }

    #[test]
    fn censoring_is_respected() {
        // Censor everything beyond a cutoff; the fit must still see the right
        // scale, unlike a naive uncensored fit on the truncated times.
        let raw = weibull_draws(3.0, 1.7, 4_000, 3);
        let cutoff = 2.5;
        let t: Vec<f64> = raw.iter().map(|v| v.min(cutoff)).collect();
        let obs: Vec<bool> = raw.iter().map(|v| *v <= cutoff).collect();
        let fit = fit_weibull_censored(&t, &obs).unwrap();
        assert!((fit.rho - 1.7).abs() < 0.15, "rho = {}", fit.rho);
        assert!((fit.nu - 3.0).abs() / 3.0 < 0.1, "nu = {}", fit.nu);
    }

    #[test]
    fn mle_beats_random_perturbations() {
        let t = weibull_draws(2.8, 1.7, 500, 4);
        let mut obs = vec![true; t.len()];
        for o in obs.iter_mut().skip(350) {
            *o = false;
        }
        let fit = fit_weibull_censored(&t, &obs).unwrap();
        let ll = |nu: f64, rho: f64| -> f64 {
            let mut acc = 0.0;
            for (&ti, &oi) in t.iter().zip(&obs) {
                acc -= (ti / nu).powf(rho);
                if oi {
                    acc += (rho / nu).ln() + (rho - 1.0) * (ti / nu).ln();
                }
            }
            acc
        };
        assert!((fit.log_likelihood - ll(fit.nu, fit.rho)).abs() < 1e-8);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let nu = fit.nu * (1.0 + rng.random_range(-0.2..0.2));
            let rho = fit.rho * (1.0 + rng.random_range(-0.2..0.2));
            assert!(
                fit.log_likelihood >= ll(nu, rho) - 1e-9,
                "perturbed point beats MLE: ({nu}, {rho})"
            );
        }
    }

    #[test]
    fn shape_ci_brackets_truth_on_simulated_data() {
        let t = weibull_draws(2.8, 1.7, 3_000, 6);
        let obs = vec![true; t.len()];
        let fit = fit_weibull_censored(&t, &obs).unwrap();
        assert!(fit.rho_ci.0 < fit.rho && fit.rho < fit.rho_ci.1);
        assert!(fit.rho_ci.0 < 1.7 && 1.7 < fit.rho_ci.1, "ci = {:?}", fit.rho_ci);
    }

    #[test]
    fn rejects_causes_without_events() {
        let t = vec![1.0, 2.0, 3.0];
        let obs = vec![false, false, false];
        assert!(fit_weibull_censored(&t, &obs).is_err());
    }

    #[test]
    fn hazard_classification_rules() {
        assert_eq!(classify_hazard(0.5, None), HazardClass::Decreasing);
        assert_eq!(classify_hazard(1.0, None), HazardClass::Constant);
        assert_eq!(classify_hazard(2.3, None), HazardClass::Increasing);
        assert_eq!(classify_hazard(1.2, Some((0.9, 1.5))), HazardClass::Constant);
        assert_eq!(classify_hazard(1.2, Some((1.05, 1.4))), HazardClass::Increasing);
    }

    #[test]
    fn latent_age_check_cases() {
        let joint = FixedEffects {
            t0: 5.0,
            sigma_tau: 1.0,
            sigma_xi: 0.79,
            g: vec![5.0, 5.0],
            v0: vec![0.1, 0.1],
            sigma_noise: vec![0.05, 0.05],
            nu: vec![2.8, 3.6],
            rho: vec![1.7, 2.8],
            beta: Mat::zeros(1, 1),
            zeta: Mat::zeros(2, 1),
        };
        // Identical matched scales and shapes: zero difference, concordant.
        let aft = vec![
            WeibullAftFit {
                nu: 7.8,
                rho: 1.7,
                rho_ci: (1.5, 1.9),
                log_likelihood: 0.0,
                n_events: 10,
                iterations: 1,
            },
            WeibullAftFit {
                nu: 8.6,
                rho: 2.8,
                rho_ci: (2.5, 3.1),
                log_likelihood: 0.0,
                n_events: 10,
                iterations: 1,
            },
        ];
        let diag = latent_age_check(&joint, &aft).unwrap();
        assert!(diag[0].matched_scale_reldiff_pct.abs() < 1e-12);
        assert!(diag.iter().all(|d| d.concordant));

        // Decreasing joint shape against a clearly increasing AFT shape.
        let mut joint2 = joint.clone();
        joint2.rho[0] = 0.5;
        let mut aft2 = aft.clone();
        aft2[0].rho = 5.6;
        aft2[0].rho_ci = (4.6, 6.8);
        let diag = latent_age_check(&joint2, &aft2).unwrap();
        assert!(!diag[0].concordant);
        assert_eq!(diag[0].joint_class, HazardClass::Decreasing);
        assert_eq!(diag[0].aft_class, HazardClass::Increasing);
    }
}
