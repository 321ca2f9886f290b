//! Joint log-likelihood: longitudinal and survival attachments, Gaussian
//! priors on latent effects, the analytic Jacobian with respect to the random
//! effects, and the sufficient-statistic decomposition of the complete-data
//! log-likelihood.
//!
//! Per-patient terms are independent; every sum below runs in patient-index
//! order so repeated evaluations are bitwise reproducible.
//!
//! Barrier convention: an observed event at `t_e <= tau_i` has log-hazard
//! minus infinity. The attachment then returns a minus-infinity sentinel,
//! which Metropolis–Hastings treats as automatic rejection and the
//! personalisation optimizer avoids by starting from feasible points.

use crate::data::{Dataset, PatientRecord};
use crate::error::{Error, Result};
use crate::math::Mat;
use crate::model::{
    individual_trajectory_with_shift, log_hazard_raw, log_survival_raw, space_shift,
    survival_shift, FixedEffects, Geometry, Hyperparameters, RandomEffects,
};

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[inline]
fn gaussian_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -sd.ln() - LN_SQRT_2PI - 0.5 * z * z
}

// ---------------------------------------------------------------------------
// Latent fixed effects
// ---------------------------------------------------------------------------

/// Sampled latent fixed effects, in the scale they are sampled in:
/// `log g`, `log v0`, `-log nu`, `log rho`, plus `beta` and `zeta` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFixedEffects {
    pub log_g: Vec<f64>,
    pub log_v0: Vec<f64>,
    pub beta: Mat,
    pub neg_log_nu: Vec<f64>,
    pub log_rho: Vec<f64>,
    pub zeta: Mat,
}

impl LatentFixedEffects {
    /// Latent effects sitting exactly at the population means of `fe`.
    pub fn at_means(fe: &FixedEffects) -> Self {
        Self {
            log_g: fe.g.iter().map(|v| v.ln()).collect(),
            log_v0: fe.v0.iter().map(|v| v.ln()).collect(),
            beta: fe.beta.clone(),
            neg_log_nu: fe.nu.iter().map(|v| -v.ln()).collect(),
            log_rho: fe.rho.iter().map(|v| v.ln()).collect(),
            zeta: fe.zeta.clone(),
        }
    }

    /// Natural-scale fixed effects carried by these latents. Noise scales,
    /// random-effect scales and `t0` are not sampled and come from `theta`.
    pub fn to_fixed_effects(&self, theta: &FixedEffects) -> FixedEffects {
        FixedEffects {
            t0: theta.t0,
            sigma_tau: theta.sigma_tau,
            sigma_xi: theta.sigma_xi,
            g: self.log_g.iter().map(|v| v.exp()).collect(),
            v0: self.log_v0.iter().map(|v| v.exp()).collect(),
            sigma_noise: theta.sigma_noise.clone(),
            nu: self.neg_log_nu.iter().map(|v| (-v).exp()).collect(),
            rho: self.log_rho.iter().map(|v| v.exp()).collect(),
            beta: self.beta.clone(),
            zeta: self.zeta.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Attachment terms
// ---------------------------------------------------------------------------

/// All log-likelihood terms; `total` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodBreakdown {
    pub longitudinal_attachment: f64,
    pub survival_attachment: f64,
    pub re_prior: f64,
    pub fe_prior_longitudinal: f64,
    pub fe_prior_survival: f64,
    pub total: f64,
}

/// Gaussian longitudinal attachment: sum over patients, visits and outcomes
/// of the observation log-density around the individual curve.
pub fn longitudinal_attachment(
    dataset: &Dataset,
    fe: &FixedEffects,
    re_all: &[RandomEffects],
    geometry: &Geometry,
) -> Result<f64> {
    check_cohort(dataset, fe, re_all)?;
    if fe.sigma_noise.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameters("noise SDs must be > 0".into()));
    }
    let mut acc = 0.0;
    for (p, re) in dataset.patients.iter().zip(re_all) {
        let w = space_shift(geometry, &re.sources)?;
        for v in &p.visits {
            for k in 0..dataset.n_outcomes {
                let gamma = individual_trajectory_with_shift(fe, re, w[k], k, v.time);
                acc += gaussian_logpdf(v.values[k], gamma, fe.sigma_noise[k]);
            }
        }
    }
    Ok(acc)
}

/// Survival attachment: each patient survives every cause until the
/// observation time, plus the log-hazard of the observed cause if any.
/// Returns minus infinity when an observed event violates the barrier.
pub fn survival_attachment(
    dataset: &Dataset,
    fe: &FixedEffects,
    re_all: &[RandomEffects],
    geometry: &Geometry,
) -> Result<f64> {
    check_cohort(dataset, fe, re_all)?;
    let _ = geometry;
    let mut acc = 0.0;
    for (p, re) in dataset.patients.iter().zip(re_all) {
        let u = survival_shift(&fe.zeta, &re.sources)?;
        match patient_survival_attachment(p, fe, re, &u) {
            Some(v) => acc += v,
            None => return Ok(f64::NEG_INFINITY),
        }
    }
    Ok(acc)
}

/// Per-patient survival attachment; `None` encodes the barrier (observed
/// event at `t_e <= tau`).
pub(crate) fn patient_survival_attachment(
    p: &PatientRecord,
    fe: &FixedEffects,
    re: &RandomEffects,
    u: &[f64],
) -> Option<f64> {
    let t_e = p.event_time;
    if p.event_observed() && t_e <= re.tau {
        return None;
    }
    let mut acc = 0.0;
    for l in 0..fe.n_events() {
        acc += log_survival_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t_e);
        if p.event_code == l + 1 {
            acc += log_hazard_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t_e);
        }
    }
    if acc.is_nan() {
        return None;
    }
    Some(acc)
}

/// Gaussian prior of the random effects: `tau` around `t0` with scale
/// `sigma_tau`, `xi` around 0 with scale `sigma_xi`, sources standard normal.
pub fn re_prior(re_all: &[RandomEffects], fe: &FixedEffects) -> Result<f64> {
    if !(fe.sigma_tau > 0.0) || !(fe.sigma_xi > 0.0) {
        return Err(Error::InvalidParameters("sigma_tau and sigma_xi must be > 0".into()));
    }
    let mut acc = 0.0;
    for re in re_all {
        acc += gaussian_logpdf(re.tau, fe.t0, fe.sigma_tau);
        acc += gaussian_logpdf(re.xi, 0.0, fe.sigma_xi);
        for &s in &re.sources {
            acc += gaussian_logpdf(s, 0.0, 1.0);
        }
    }
    Ok(acc)
}

/// Gaussian priors of the latent fixed effects around the current population
/// means, split into the longitudinal part (`log g`, `log v0`, `beta`) and
/// the survival part (`-log nu`, `log rho`, `zeta`).
pub fn fe_priors(
    z_fe: &LatentFixedEffects,
    fe_means: &FixedEffects,
    hyper: &Hyperparameters,
) -> Result<(f64, f64)> {
    hyper.validate()?;
    let sc = &hyper.prior_scales;
    let mut long = 0.0;
    for k in 0..fe_means.n_outcomes() {
        long += gaussian_logpdf(z_fe.log_g[k], fe_means.g[k].ln(), sc.g);
        long += gaussian_logpdf(z_fe.log_v0[k], fe_means.v0[k].ln(), sc.v0);
    }
    for o in 0..z_fe.beta.rows() {
        for m in 0..z_fe.beta.cols() {
            long += gaussian_logpdf(z_fe.beta[(o, m)], fe_means.beta[(o, m)], sc.beta);
        }
    }
    let mut surv = 0.0;
    for l in 0..fe_means.n_events() {
        surv += gaussian_logpdf(z_fe.neg_log_nu[l], -fe_means.nu[l].ln(), sc.nu);
        surv += gaussian_logpdf(z_fe.log_rho[l], fe_means.rho[l].ln(), sc.rho);
    }
    for l in 0..z_fe.zeta.rows() {
        for m in 0..z_fe.zeta.cols() {
            surv += gaussian_logpdf(z_fe.zeta[(l, m)], fe_means.zeta[(l, m)], sc.zeta);
        }
    }
    Ok((long, surv))
}

/// Complete-data log-likelihood at the sampled latents `z = (z_fe, re_all)`
/// under population parameters `fe` (means, noise and random-effect scales).
/// `geometry` must be the one implied by `z_fe`.
pub fn total_log_likelihood(
    dataset: &Dataset,
    fe: &FixedEffects,
    z_fe: &LatentFixedEffects,
    re_all: &[RandomEffects],
    geometry: &Geometry,
    hyper: &Hyperparameters,
) -> Result<LikelihoodBreakdown> {
    let natural = z_fe.to_fixed_effects(fe);
    let longitudinal = longitudinal_attachment(dataset, &natural, re_all, geometry)?;
    let survival = survival_attachment(dataset, &natural, re_all, geometry)?;
    let re = re_prior(re_all, &natural)?;
    let (fe_long, fe_surv) = fe_priors(z_fe, fe, hyper)?;
    let total = longitudinal + survival + re + fe_long + fe_surv;
    Ok(LikelihoodBreakdown {
        longitudinal_attachment: longitudinal,
        survival_attachment: survival,
        re_prior: re,
        fe_prior_longitudinal: fe_long,
        fe_prior_survival: fe_surv,
        total,
    })
}

fn check_cohort(dataset: &Dataset, fe: &FixedEffects, re_all: &[RandomEffects]) -> Result<()> {
    if re_all.len() != dataset.n_patients() {
        return Err(Error::DimensionMismatch(format!(
            "{} random-effect sets for {} patients",
            re_all.len(),
            dataset.n_patients()
        )));
    }
    if fe.n_outcomes() != dataset.n_outcomes || fe.n_events() != dataset.n_events {
        return Err(Error::DimensionMismatch(
            "fixed effects and dataset disagree on K or L".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Jacobian with respect to the random effects
// ---------------------------------------------------------------------------

/// Gradient with respect to one patient's `(xi, tau, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReGradient {
    pub xi: f64,
    pub tau: f64,
    pub sources: Vec<f64>,
}

impl ReGradient {
    fn zeros(ns: usize) -> Self {
        Self { xi: 0.0, tau: 0.0, sources: vec![0.0; ns] }
    }

    fn add(&mut self, other: &ReGradient) {
        self.xi += other.xi;
        self.tau += other.tau;
        for (a, b) in self.sources.iter_mut().zip(&other.sources) {
            *a += b;
        }
    }

    /// Gradient in the standardised coordinates `(xi / sigma_xi,
    /// tau / sigma_tau, s)` used by the personalisation optimizer: the xi and
    /// tau components are multiplied by their prior SDs.
    pub fn scaled(&self, sigma_xi: f64, sigma_tau: f64) -> ReGradient {
        ReGradient {
            xi: self.xi * sigma_xi,
            tau: self.tau * sigma_tau,
            sources: self.sources.clone(),
        }
    }
}

/// Analytic gradients of each likelihood term for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientJacobians {
    pub longitudinal: ReGradient,
    pub survival: ReGradient,
    pub regularization: ReGradient,
}

impl PatientJacobians {
    pub fn total(&self) -> ReGradient {
        let mut g = ReGradient::zeros(self.longitudinal.sources.len());
        g.add(&self.longitudinal);
        g.add(&self.survival);
        g.add(&self.regularization);
        g
    }
}

/// Closed-form gradient of the patient's longitudinal attachment, survival
/// attachment and random-effect regularisation with respect to `(xi, tau, s)`.
///
/// The longitudinal part goes through `C = ((1+g)^2/g) (y - gamma) gamma
/// (1 - gamma)`; the survival part reduces to hazard and log-survival values
/// at the event time. An observed event with `tau >= t_e` is a domain error
/// (the gradient is not defined at the barrier).
pub fn jacobian_random_effects(
    patient: &PatientRecord,
    fe: &FixedEffects,
    re: &RandomEffects,
    geometry: &Geometry,
) -> Result<PatientJacobians> {
    let ns = re.sources.len();
    if geometry.n_sources() != ns || fe.n_sources() != ns {
        return Err(Error::DimensionMismatch("sources and geometry disagree".into()));
    }
    let w = space_shift(geometry, &re.sources)?;
    let u = survival_shift(&fe.zeta, &re.sources)?;
    let speed = re.xi.exp();

    let mut long = ReGradient::zeros(ns);
    for v in &patient.visits {
        let elapsed = speed * (v.time - re.tau);
        for k in 0..fe.n_outcomes() {
            let g = fe.g[k];
            let gamma = individual_trajectory_with_shift(fe, re, w[k], k, v.time);
            let c = (1.0 + g) * (1.0 + g) / g * (v.values[k] - gamma) * gamma * (1.0 - gamma);
            let f = c / (fe.sigma_noise[k] * fe.sigma_noise[k]);
            long.xi += f * fe.v0[k] * elapsed;
            long.tau -= f * fe.v0[k] * speed;
            for m in 0..ns {
                long.sources[m] += f * geometry.mixing[(k, m)];
            }
        }
    }

    let t_e = patient.event_time;
    let observed = patient.event_code;
    if observed > 0 && t_e <= re.tau {
        return Err(Error::Domain(format!(
            "patient {}: observed event at t_e = {t_e} requires tau < t_e (tau = {})",
            patient.id, re.tau
        )));
    }
    let mut surv = ReGradient::zeros(ns);
    for l in 0..fe.n_events() {
        let log_s = log_survival_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t_e);
        if t_e > re.tau {
            let h = log_hazard_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t_e).exp();
            surv.xi += fe.rho[l] * log_s;
            surv.tau += h;
            for m in 0..ns {
                surv.sources[m] += fe.zeta[(l, m)] * log_s;
            }
        }
        if observed == l + 1 {
            surv.xi += fe.rho[l];
            surv.tau -= (fe.rho[l] - 1.0) / (t_e - re.tau);
            for m in 0..ns {
                surv.sources[m] += fe.zeta[(l, m)];
            }
        }
    }

    let mut reg = ReGradient::zeros(ns);
    reg.xi = -re.xi / (fe.sigma_xi * fe.sigma_xi);
    reg.tau = -(re.tau - fe.t0) / (fe.sigma_tau * fe.sigma_tau);
    for m in 0..ns {
        reg.sources[m] = -re.sources[m];
    }

    Ok(PatientJacobians { longitudinal: long, survival: surv, regularization: reg })
}

// ---------------------------------------------------------------------------
// Sufficient statistics
// ---------------------------------------------------------------------------

/// Sufficient statistics of the complete-data log-likelihood (curved
/// exponential family). The longitudinal blocks `s1..s3` are stored as
/// per-outcome sums over all visits; latent fixed-effect blocks are the
/// values and their squares; random-effect blocks are per patient.
/// `survival_term` is the parameter-free survival attachment carried along so
/// the inner-product reconstruction reproduces the full log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStatistics {
    /// Per-outcome sums of squared observations.
    pub s1: Vec<f64>,
    /// Per-outcome sums of observation times model value.
    pub s2: Vec<f64>,
    /// Per-outcome sums of squared model values.
    pub s3: Vec<f64>,
    pub s4_v0_sq: Vec<f64>,
    pub s5_v0: Vec<f64>,
    pub s6_g_sq: Vec<f64>,
    pub s7_g: Vec<f64>,
    pub s8_beta_sq: Mat,
    pub s9_beta: Mat,
    pub s10_nu_sq: Vec<f64>,
    pub s11_nu: Vec<f64>,
    pub s12_rho_sq: Vec<f64>,
    pub s13_rho: Vec<f64>,
    pub s14_zeta_sq: Mat,
    pub s15_zeta: Mat,
    pub s16_tau_sq: Vec<f64>,
    pub s17_tau: Vec<f64>,
    pub s18_xi_sq: Vec<f64>,
    pub s19_xi: Vec<f64>,
    pub s20_sources_sq: Mat,
    pub s21_sources: Mat,
    pub survival_term: f64,
}

impl SufficientStatistics {
    /// `self += eps * (other - self)` on every entry.
    pub fn blend(&mut self, other: &SufficientStatistics, eps: f64) {
        fn blend_slice(a: &mut [f64], b: &[f64], eps: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += eps * (y - *x);
            }
        }
        blend_slice(&mut self.s1, &other.s1, eps);
        blend_slice(&mut self.s2, &other.s2, eps);
        blend_slice(&mut self.s3, &other.s3, eps);
        blend_slice(&mut self.s4_v0_sq, &other.s4_v0_sq, eps);
        blend_slice(&mut self.s5_v0, &other.s5_v0, eps);
        blend_slice(&mut self.s6_g_sq, &other.s6_g_sq, eps);
        blend_slice(&mut self.s7_g, &other.s7_g, eps);
        blend_slice(self.s8_beta_sq.data_mut(), other.s8_beta_sq.data(), eps);
        blend_slice(self.s9_beta.data_mut(), other.s9_beta.data(), eps);
        blend_slice(&mut self.s10_nu_sq, &other.s10_nu_sq, eps);
        blend_slice(&mut self.s11_nu, &other.s11_nu, eps);
        blend_slice(&mut self.s12_rho_sq, &other.s12_rho_sq, eps);
        blend_slice(&mut self.s13_rho, &other.s13_rho, eps);
        blend_slice(self.s14_zeta_sq.data_mut(), other.s14_zeta_sq.data(), eps);
        blend_slice(self.s15_zeta.data_mut(), other.s15_zeta.data(), eps);
        blend_slice(&mut self.s16_tau_sq, &other.s16_tau_sq, eps);
        blend_slice(&mut self.s17_tau, &other.s17_tau, eps);
        blend_slice(&mut self.s18_xi_sq, &other.s18_xi_sq, eps);
        blend_slice(&mut self.s19_xi, &other.s19_xi, eps);
        blend_slice(self.s20_sources_sq.data_mut(), other.s20_sources_sq.data(), eps);
        blend_slice(self.s21_sources.data_mut(), other.s21_sources.data(), eps);
        self.survival_term += eps * (other.survival_term - self.survival_term);
    }
}

/// Compute every sufficient statistic at the current latents.
pub fn sufficient_statistics(
    dataset: &Dataset,
    z_fe: &LatentFixedEffects,
    re_all: &[RandomEffects],
) -> Result<SufficientStatistics> {
    let k = dataset.n_outcomes;
    let l = dataset.n_events;
    let n = dataset.n_patients();
    if re_all.len() != n {
        return Err(Error::DimensionMismatch("one random-effect set per patient required".into()));
    }

    // Natural-scale parameters for the attachment terms; the placeholder
    // theta-only fields are never read by the attachments.
    let placeholder = FixedEffects {
        t0: 0.0,
        sigma_tau: 1.0,
        sigma_xi: 1.0,
        g: vec![1.0; k],
        v0: vec![1.0; k],
        sigma_noise: vec![1.0; k],
        nu: vec![1.0; l],
        rho: vec![1.0; l],
        beta: z_fe.beta.clone(),
        zeta: z_fe.zeta.clone(),
    };
    let natural = z_fe.to_fixed_effects(&placeholder);
    let geometry = natural.geometry()?;

    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k];
    let mut s3 = vec![0.0; k];
    let mut survival_term = 0.0;
    for (p, re) in dataset.patients.iter().zip(re_all) {
        let w = space_shift(&geometry, &re.sources)?;
        for v in &p.visits {
            for kk in 0..k {
                let gamma = individual_trajectory_with_shift(&natural, re, w[kk], kk, v.time);
                s1[kk] += v.values[kk] * v.values[kk];
                s2[kk] += v.values[kk] * gamma;
                s3[kk] += gamma * gamma;
            }
        }
        let u = survival_shift(&natural.zeta, &re.sources)?;
        match patient_survival_attachment(p, &natural, re, &u) {
            Some(v) => survival_term += v,
            None => survival_term = f64::NEG_INFINITY,
        }
    }

    Ok(sufficient_statistics_from_parts(s1, s2, s3, z_fe, re_all, survival_term))
}

/// Assemble the statistics when the attachment sums are already known
/// (the estimator keeps them cached).
pub(crate) fn sufficient_statistics_from_parts(
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
    z_fe: &LatentFixedEffects,
    re_all: &[RandomEffects],
    survival_term: f64,
) -> SufficientStatistics {
    let n = re_all.len();
    let ns = z_fe.beta.cols();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<f64>>();
    let mat_sq = |m: &Mat| {
        let mut out = m.clone();
        for x in out.data_mut() {
            *x *= *x;
        }
        out
    };

    let mut s20 = Mat::zeros(n, ns);
    let mut s21 = Mat::zeros(n, ns);
    for (i, re) in re_all.iter().enumerate() {
        for m in 0..ns {
            s20[(i, m)] = re.sources[m] * re.sources[m];
            s21[(i, m)] = re.sources[m];
        }
    }

    SufficientStatistics {
        s1,
        s2,
        s3,
        s4_v0_sq: sq(&z_fe.log_v0),
        s5_v0: z_fe.log_v0.clone(),
        s6_g_sq: sq(&z_fe.log_g),
        s7_g: z_fe.log_g.clone(),
        s8_beta_sq: mat_sq(&z_fe.beta),
        s9_beta: z_fe.beta.clone(),
        s10_nu_sq: sq(&z_fe.neg_log_nu),
        s11_nu: z_fe.neg_log_nu.clone(),
        s12_rho_sq: sq(&z_fe.log_rho),
        s13_rho: z_fe.log_rho.clone(),
        s14_zeta_sq: mat_sq(&z_fe.zeta),
        s15_zeta: z_fe.zeta.clone(),
        s16_tau_sq: re_all.iter().map(|r| r.tau * r.tau).collect(),
        s17_tau: re_all.iter().map(|r| r.tau).collect(),
        s18_xi_sq: re_all.iter().map(|r| r.xi * r.xi).collect(),
        s19_xi: re_all.iter().map(|r| r.xi).collect(),
        s20_sources_sq: s20,
        s21_sources: s21,
        survival_term,
    }
}

/// Inner-product reconstruction of the complete-data log-likelihood from
/// `(S, theta, Pi)`; equals [`total_log_likelihood`] when the statistics were
/// computed at the same latents.
pub fn reconstruct_total(
    stats: &SufficientStatistics,
    fe: &FixedEffects,
    hyper: &Hyperparameters,
    n_obs_per_outcome: &[usize],
    n_patients: usize,
) -> f64 {
    let sc = &hyper.prior_scales;
    let nf = n_patients as f64;

    let mut total = 0.0;
    for k in 0..fe.n_outcomes() {
        let sig = fe.sigma_noise[k];
        total -= n_obs_per_outcome[k] as f64 * (sig.ln() + LN_SQRT_2PI);
        total -= (stats.s1[k] - 2.0 * stats.s2[k] + stats.s3[k]) / (2.0 * sig * sig);
    }
    total += stats.survival_term;

    // Gaussian blocks: sum of -log(sd sqrt(2 pi)) - (x^2 - 2 x m + m^2)/(2 sd^2)
    let gauss_block = |x_sq: f64, x: f64, mean: f64, sd: f64| -> f64 {
        -(sd.ln() + LN_SQRT_2PI) - (x_sq - 2.0 * x * mean + mean * mean) / (2.0 * sd * sd)
    };

    for k in 0..fe.n_outcomes() {
        total += gauss_block(stats.s6_g_sq[k], stats.s7_g[k], fe.g[k].ln(), sc.g);
        total += gauss_block(stats.s4_v0_sq[k], stats.s5_v0[k], fe.v0[k].ln(), sc.v0);
    }
    for o in 0..fe.beta.rows() {
        for m in 0..fe.beta.cols() {
            total += gauss_block(
                stats.s8_beta_sq[(o, m)],
                stats.s9_beta[(o, m)],
                fe.beta[(o, m)],
                sc.beta,
            );
        }
    }
    for l in 0..fe.n_events() {
        total += gauss_block(stats.s10_nu_sq[l], stats.s11_nu[l], -fe.nu[l].ln(), sc.nu);
        total += gauss_block(stats.s12_rho_sq[l], stats.s13_rho[l], fe.rho[l].ln(), sc.rho);
    }
    for l in 0..fe.zeta.rows() {
        for m in 0..fe.zeta.cols() {
            total += gauss_block(
                stats.s14_zeta_sq[(l, m)],
                stats.s15_zeta[(l, m)],
                fe.zeta[(l, m)],
                sc.zeta,
            );
        }
    }

    let sum = |v: &[f64]| v.iter().sum::<f64>();
    total += -nf * (fe.sigma_tau.ln() + LN_SQRT_2PI)
        - (sum(&stats.s16_tau_sq) - 2.0 * fe.t0 * sum(&stats.s17_tau) + nf * fe.t0 * fe.t0)
            / (2.0 * fe.sigma_tau * fe.sigma_tau);
    total += -nf * (fe.sigma_xi.ln() + LN_SQRT_2PI)
        - sum(&stats.s18_xi_sq) / (2.0 * fe.sigma_xi * fe.sigma_xi);
    let ns = stats.s20_sources_sq.cols();
    total += -nf * ns as f64 * LN_SQRT_2PI - sum(stats.s20_sources_sq.data()) / 2.0;

    total
}
