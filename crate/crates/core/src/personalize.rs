//! Random-effect estimation for new patients under frozen fixed effects,
//! longitudinal predictions and conditional event probabilities.
//!
//! The MAP objective (longitudinal attachment + survival attachment +
//! random-effect prior) is maximised by a dense BFGS with Armijo
//! backtracking, run in the standardised coordinates `(xi / sigma_xi,
//! tau / sigma_tau, s)` with the analytic gradient. Five starts (the prior
//! means plus jittered copies, all made feasible with respect to the event
//! barrier) guard against local optima near the barrier.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::likelihood::{jacobian_random_effects, patient_survival_attachment};
use crate::model::{
    cif, individual_trajectory_with_shift, space_shift, survival, survival_shift, FixedEffects,
    Geometry, RandomEffects,
};

/// Optimiser knobs; the defaults follow the module contract.
#[derive(Debug, Clone)]
pub struct PersonalizeOptions {
    pub n_starts: usize,
    /// Jitter SD as a fraction of each coordinate's prior SD.
    pub jitter_fraction: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the gradient infinity norm.
    pub gradient_tolerance: f64,
    pub seed: u64,
    /// Force the sources to zero (two-parameter optimisation).
    pub fix_sources: bool,
}

impl Default for PersonalizeOptions {
    fn default() -> Self {
        Self {
            n_starts: 5,
            jitter_fraction: 0.5,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            seed: 0,
            fix_sources: false,
        }
    }
}

/// MAP estimate of one patient's random effects under frozen fixed effects.
pub fn personalize(
    patient: &PatientRecord,
    fe: &FixedEffects,
    geometry: &Geometry,
    opts: &PersonalizeOptions,
) -> Result<RandomEffects> {
    fe.validate()?;
    let ns = fe.n_sources();
    let dim = if opts.fix_sources { 2 } else { 2 + ns };

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    rng.set_stream(fnv1a(patient.id.as_bytes()));

    let feasible_tau = |tau: f64| -> f64 {
        if patient.event_observed() && tau >= patient.event_time {
            patient.first_visit_time().min(patient.event_time) - 0.1
        } else {
            tau
        }
    };

    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        let re = unpack(x, fe, opts.fix_sources, ns);
        if patient.event_observed() && re.tau >= patient.event_time {
            return (f64::NEG_INFINITY, vec![0.0; dim]);
        }
        let value = match patient_objective(patient, fe, geometry, &re) {
            Some(v) => v,
            None => return (f64::NEG_INFINITY, vec![0.0; dim]),
        };
        let jac = match jacobian_random_effects(patient, fe, &re, geometry) {
            Ok(j) => j,
            Err(_) => return (f64::NEG_INFINITY, vec![0.0; dim]),
        };
        let scaled = jac.total().scaled(fe.sigma_xi, fe.sigma_tau);
        let mut grad = vec![scaled.xi, scaled.tau];
        if !opts.fix_sources {
            grad.extend_from_slice(&scaled.sources);
        }
        (value, grad)
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start_idx in 0..opts.n_starts.max(1) {
        // Start at the prior means, jittered after the first start.
        let mut xi = 0.0;
        let mut tau = fe.t0;
        let mut s = vec![0.0; ns];
        if start_idx > 0 {
            let jf = opts.jitter_fraction;
            xi += fe.sigma_xi * jf * rng.sample::<f64, _>(StandardNormal);
            tau += fe.sigma_tau * jf * rng.sample::<f64, _>(StandardNormal);
            for sm in s.iter_mut() {
                *sm += jf * rng.sample::<f64, _>(StandardNormal);
            }
        }
        tau = feasible_tau(tau);
        let mut x0 = vec![xi / fe.sigma_xi, tau / fe.sigma_tau];
        if !opts.fix_sources {
            x0.extend_from_slice(&s);
        }
        let (value0, _) = objective(&x0);
        if !value0.is_finite() {
            continue;
        }
        let (x_opt, value_opt) =
            bfgs_maximize(&objective, x0, opts.max_iterations, opts.gradient_tolerance);
        debug_assert!(value_opt >= value0 - 1e-9);
        if best.as_ref().map(|(v, _)| value_opt > *v).unwrap_or(true) {
            best = Some((value_opt, x_opt));
        }
    }

    match best {
        Some((_, x)) => Ok(unpack(&x, fe, opts.fix_sources, ns)),
        None => Err(Error::Domain(format!(
            "patient {}: no feasible starting point (observed event requires tau < event time)",
            patient.id
        ))),
    }
}

fn unpack(x: &[f64], fe: &FixedEffects, fix_sources: bool, ns: usize) -> RandomEffects {
    RandomEffects {
        xi: x[0] * fe.sigma_xi,
        tau: x[1] * fe.sigma_tau,
        sources: if fix_sources { vec![0.0; ns] } else { x[2..].to_vec() },
    }
}

/// Log posterior kernel of one patient: attachments plus random-effect prior.
fn patient_objective(
    patient: &PatientRecord,
    fe: &FixedEffects,
    geometry: &Geometry,
    re: &RandomEffects,
) -> Option<f64> {
    let w = space_shift(geometry, &re.sources).ok()?;
    let mut acc = 0.0;
    for v in &patient.visits {
        for k in 0..fe.n_outcomes() {
            let gamma = individual_trajectory_with_shift(fe, re, w[k], k, v.time);
            let sig = fe.sigma_noise[k];
            let z = (v.values[k] - gamma) / sig;
            acc += -sig.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z;
        }
    }
    let u = survival_shift(&fe.zeta, &re.sources).ok()?;
    acc += patient_survival_attachment(patient, fe, re, &u)?;
    let zt = (re.tau - fe.t0) / fe.sigma_tau;
    let zx = re.xi / fe.sigma_xi;
    acc += -fe.sigma_tau.ln() - 0.5 * zt * zt - fe.sigma_xi.ln() - 0.5 * zx * zx
        - (2.0 + re.sources.len() as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln();
    for &sm in &re.sources {
        acc -= 0.5 * sm * sm;
    }
    acc.is_finite().then_some(acc)
}

// ---------------------------------------------------------------------------
// Dense BFGS with Armijo backtracking
// ---------------------------------------------------------------------------

fn bfgs_maximize<F>(f: &F, x0: Vec<f64>, max_iterations: usize, grad_tol: f64) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut value, mut grad) = f(&x);
    // Inverse Hessian approximation of the negated objective.
    let mut h = identity(n);

    for _ in 0..max_iterations {
        if grad.iter().all(|g| g.abs() < grad_tol) {
            break;
        }
        // Ascent direction d = H * grad; fall back to the gradient when the
        // curvature information has gone bad.
        let mut dir = mat_vec(&h, &grad);
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(slope > 0.0) || !slope.is_finite() {
            h = identity(n);
            dir = grad.clone();
        }
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();

        // Armijo backtracking on the ascent.
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let x_new: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
            let (value_new, grad_new) = f(&x_new);
            if value_new.is_finite() && value_new >= value + 1e-4 * alpha * slope {
                // BFGS update with the step just taken.
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = grad.iter().zip(&grad_new).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                if sy > 1e-12 {
                    bfgs_update(&mut h, &s, &y, sy);
                }
                x = x_new;
                value = value_new;
                grad = grad_new;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (x, value)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
}

/// `H <- (I - r s y^T) H (I - r y s^T) + r s s^T` with `r = 1 / (s^T y)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + r * (1.0 + r * yhy) * s[i] * s[j];
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// Individual trajectories at the requested times; one row per time, one
/// column per outcome.
pub fn predict_longitudinal(
    re: &RandomEffects,
    fe: &FixedEffects,
    geometry: &Geometry,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let w = space_shift(geometry, &re.sources)?;
    Ok(times
        .iter()
        .map(|&t| {
            (0..fe.n_outcomes())
                .map(|k| individual_trajectory_with_shift(fe, re, w[k], k, t))
                .collect()
        })
        .collect())
}

/// Conditional probability of event `l` in `(t_last, t]` given event-free at
/// `t_last`: `(CIF_l(t) - CIF_l(t_last)) / prod_q S_q(t_last)`, clipped into
/// [0, 1] to absorb quadrature error.
pub fn predict_event(
    re: &RandomEffects,
    fe: &FixedEffects,
    geometry: &Geometry,
    l: usize,
    t: f64,
    t_last: f64,
) -> Result<f64> {
    let _ = geometry; // events depend on the sources only through zeta
    if t < t_last {
        return Err(Error::InvalidInput(format!(
            "prediction horizon {t} precedes the conditioning time {t_last}"
        )));
    }
    let u = survival_shift(&fe.zeta, &re.sources)?;
    let cif_t = cif(fe, re, &u, l, t)?;
    let cif_last = cif(fe, re, &u, l, t_last)?;
    let mut denom = 1.0;
    for q in 0..fe.n_events() {
        denom *= survival(fe, re, &u, q, t_last);
    }
    Ok(((cif_t - cif_last) / denom.max(1e-300)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visit;
    use crate::math::Mat;
    use crate::model::individual_trajectory;

    fn toy_fe() -> FixedEffects {
        FixedEffects {
            t0: 5.0,
            sigma_tau: 1.0,
            sigma_xi: 0.6,
            g: vec![8.0, 4.0, 6.0],
            v0: vec![0.12, 0.2, 0.16],
            sigma_noise: vec![1e-3, 1e-3, 1e-3],
            nu: vec![2.8, 3.6],
            rho: vec![1.7, 2.8],
            beta: Mat::from_rows(&[vec![0.25, -0.1], vec![-0.15, 0.3]]).unwrap(),
            zeta: Mat::from_rows(&[vec![-0.09, 0.09], vec![-0.1, 0.05]]).unwrap(),
        }
    }

    fn noiseless_patient(fe: &FixedEffects, re: &RandomEffects, censored_at: f64) -> PatientRecord {
        let geom = fe.geometry().unwrap();
        let visits = (0..10)
            .map(|j| {
                let t = re.tau - 0.3 + 0.25 * j as f64;
                let values = (0..fe.n_outcomes())
                    .map(|k| individual_trajectory(fe, re, &geom, k, t).unwrap())
                    .collect();
                Visit { time: t, values }
            })
            .collect();
        PatientRecord { id: "noiseless".into(), visits, event_time: censored_at, event_code: 0 }
    }

    #[test]
    fn recovers_generating_random_effects_on_clean_data() {
        let fe = toy_fe();
        let geom = fe.geometry().unwrap();
        let truth = RandomEffects { xi: 0.35, tau: 5.6, sources: vec![0.8, -0.5] };
        let patient = noiseless_patient(&fe, &truth, 9.0);
        let opts = PersonalizeOptions { seed: 7, ..Default::default() };
        let got = personalize(&patient, &fe, &geom, &opts).unwrap();
        assert!((got.xi - truth.xi).abs() < 1e-3, "xi {} vs {}", got.xi, truth.xi);
        assert!((got.tau - truth.tau).abs() < 1e-3, "tau {} vs {}", got.tau, truth.tau);
        for (a, b) in got.sources.iter().zip(&truth.sources) {
            assert!((a - b).abs() < 1e-3, "source {a} vs {b}");
        }
    }

    #[test]
    fn two_parameter_mode_matches_grid_search() {
        let mut fe = toy_fe();
        fe.sigma_noise = vec![0.05; 3];
        let geom = fe.geometry().unwrap();
        let truth = RandomEffects { xi: -0.2, tau: 4.6, sources: vec![0.0, 0.0] };
        let mut patient = noiseless_patient(&fe, &truth, 8.0);
        // Mild deterministic perturbation so the optimum is not exactly the truth.
        for (j, v) in patient.visits.iter_mut().enumerate() {
            for y in v.values.iter_mut() {
                *y = (*y + 0.01 * ((j % 3) as f64 - 1.0) * 0.5).clamp(1e-6, 1.0 - 1e-6);
            }
        }
        let opts = PersonalizeOptions { fix_sources: true, seed: 3, ..Default::default() };
        let got = personalize(&patient, &fe, &geom, &opts).unwrap();

        // Dense grid oracle over (xi, tau).
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for a in 0..121 {
            for b in 0..121 {
                let xi = -0.8 + 1.2 * a as f64 / 120.0;
                let tau = 3.8 + 1.6 * b as f64 / 120.0;
                let re = RandomEffects { xi, tau, sources: vec![0.0, 0.0] };
                if let Some(v) = patient_objective(&patient, &fe, &geom, &re) {
                    if v > best.0 {
                        best = (v, xi, tau);
                    }
                }
            }
        }
        let opt_value =
            patient_objective(&patient, &fe, &geom, &got).expect("optimum value finite");
        assert!(opt_value >= best.0 - 1e-9, "optimizer {} below grid {}", opt_value, best.0);
        assert!((got.xi - best.1).abs() < 1e-2, "xi {} vs grid {}", got.xi, best.1);
        assert!((got.tau - best.2).abs() < 1e-2, "tau {} vs grid {}", got.tau, best.2);
    }

    #[test]
    fn prior_only_patient_lands_on_prior_means() {
        let fe = toy_fe();
        let geom = fe.geometry().unwrap();
        // No visits, censored exactly at the prior mean reference time.
        let patient = PatientRecord {
            id: "empty".into(),
            visits: vec![],
            event_time: fe.t0,
            event_code: 0,
        };
        let got = personalize(&patient, &fe, &geom, &PersonalizeOptions::default()).unwrap();
        assert!(got.xi.abs() < 1e-4, "xi {}", got.xi);
        assert!((got.tau - fe.t0).abs() < 1e-3, "tau {}", got.tau);
        assert!(got.sources.iter().all(|s| s.abs() < 1e-4));
    }

    #[test]
    fn infeasible_only_when_no_start_escapes_the_barrier() {
        let fe = toy_fe();
        let geom = fe.geometry().unwrap();
        let truth = RandomEffects { xi: 0.0, tau: 5.0, sources: vec![0.0, 0.0] };
        let mut patient = noiseless_patient(&fe, &truth, 6.5);
        patient.event_code = 1; // observed
        let got = personalize(&patient, &fe, &geom, &PersonalizeOptions::default()).unwrap();
        assert!(got.tau < patient.event_time);
    }

    #[test]
    fn predict_event_identities() {
        let mut fe = toy_fe();
        fe.nu = vec![2.8];
        fe.rho = vec![1.7];
        fe.zeta = Mat::from_rows(&[vec![-0.09, 0.09]]).unwrap();
        let geom = fe.geometry().unwrap();
        let re = RandomEffects { xi: 0.1, tau: 4.8, sources: vec![0.4, -0.2] };
        let t_last = 5.6;
        assert_eq!(predict_event(&re, &fe, &geom, 0, t_last, t_last).unwrap(), 0.0);
        assert!(predict_event(&re, &fe, &geom, 0, t_last - 0.1, t_last).is_err());

        // Single event: closed form (S(t_last) - S(t)) / S(t_last).
        let u = survival_shift(&fe.zeta, &re.sources).unwrap();
        for t in [5.9, 6.8, 8.0] {
            let got = predict_event(&re, &fe, &geom, 0, t, t_last).unwrap();
            let s_last = survival(&fe, &re, &u, 0, t_last);
            let s_t = survival(&fe, &re, &u, 0, t);
            let want = (s_last - s_t) / s_last;
            assert!((got - want).abs() < 1e-6, "t={t}: got {got}, want {want}");
        }
        // Distant horizon saturates at one.
        let far = predict_event(&re, &fe, &geom, 0, 60.0, t_last).unwrap();
        assert!(far > 0.999, "far-horizon probability {far}");
    }

    #[test]
    fn conditional_probabilities_sum_below_one() {
        let fe = toy_fe();
        let geom = fe.geometry().unwrap();
        let re = RandomEffects { xi: 0.0, tau: 5.0, sources: vec![0.5, 0.5] };
        let t_last = 5.5;
        let mut prev = (0.0, 0.0);
        for i in 1..12 {
            let t = t_last + 0.4 * i as f64;
            let p0 = predict_event(&re, &fe, &geom, 0, t, t_last).unwrap();
            let p1 = predict_event(&re, &fe, &geom, 1, t, t_last).unwrap();
            assert!(p0 + p1 <= 1.0 + 1e-6, "sum {} at t={t}", p0 + p1);
            assert!(p0 >= prev.0 - 1e-9 && p1 >= prev.1 - 1e-9, "nondecreasing");
            prev = (p0, p1);
        }
    }

    #[test]
    fn longitudinal_predictions_are_trajectories() {
        let fe = toy_fe();
        let geom = fe.geometry().unwrap();
        let re = RandomEffects { xi: 0.2, tau: 5.2, sources: vec![0.3, 0.1] };
        let times = [4.0, 5.0, 6.0];
        let pred = predict_longitudinal(&re, &fe, &geom, &times).unwrap();
        for (row, &t) in pred.iter().zip(&times) {
            for (k, &v) in row.iter().enumerate() {
                let want = individual_trajectory(&fe, &re, &geom, k, t).unwrap();
                assert_eq!(v, want);
            }
        }
    }
}
