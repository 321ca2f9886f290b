//! Synthetic-cohort generation under the model, plus a variant with the
//! longitudinal–survival link severed (events drawn from an independent
//! random-effect set) for diagnosing the shared-latent-age assumption.
//!
//! Patients are simulated on independent RNG substreams derived from the
//! master seed, so a fixed seed reproduces the cohort bit-exactly and the
//! output does not depend on scheduling.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, PatientRecord, Visit};
use crate::error::{Error, Result};
use crate::math::{mean, sample_sd, Mat};
use crate::model::{
    individual_trajectory_with_shift, orthonormal_basis, space_shift, survival_shift,
    FixedEffects, RandomEffects,
};

/// Observations are clamped into this open interval; the logistic likelihood
/// needs values strictly inside (0, 1).
pub const VALUE_CLAMP: f64 = 1e-6;

/// Smallest admissible gap between scheduled visits (years).
const MIN_VISIT_GAP: f64 = 1e-3;

/// Whether events share the longitudinal random effects or are generated
/// from an independent draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    RealLike,
    NoLink,
}

impl LinkMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LinkMode::RealLike => "real-like",
            LinkMode::NoLink => "no-link",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real-like" => Ok(LinkMode::RealLike),
            "no-link" => Ok(LinkMode::NoLink),
            other => Err(Error::InvalidInput(format!(
                "unknown link mode {other:?} (expected real-like or no-link)"
            ))),
        }
    }
}

/// Everything needed to draw one cohort.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n_patients: usize,
    pub fixed: FixedEffects,
    /// Baseline offset from the individual reference time (years).
    pub baseline_offset_mean: f64,
    pub baseline_offset_sd: f64,
    /// Follow-up duration (years).
    pub followup_mean: f64,
    pub followup_sd: f64,
    /// Gap between consecutive visits (years).
    pub intervisit_mean: f64,
    pub intervisit_sd: f64,
    /// Spacing of visits backfilled so every patient has at least two (years).
    pub padding_interval: f64,
    pub link_mode: LinkMode,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::InvalidParameters("n_patients must be > 0".into()));
        }
        for (name, v) in [
            ("baseline_offset_sd", self.baseline_offset_sd),
            ("followup_sd", self.followup_sd),
            ("intervisit_sd", self.intervisit_sd),
            ("padding_interval", self.padding_interval),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameters(format!("{name} must be > 0")));
            }
        }
        // Same checks as FixedEffects::validate, except the noise SDs may be
        // zero to generate noiseless trajectories.
        let mut relaxed = self.fixed.clone();
        relaxed.sigma_noise = relaxed.sigma_noise.iter().map(|s| s.max(1e-12)).collect();
        relaxed.validate()?;
        if self.fixed.sigma_noise.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidParameters("noise SDs must be >= 0".into()));
        }
        Ok(())
    }

    /// Built-in reference scenario: four outcomes driven by two sources and
    /// two competing events, with visit pacing typical of a slowly-progressing
    /// clinical cohort. Used by the example configs and the test-suites.
    pub fn reference(link_mode: LinkMode, n_patients: usize, seed: u64) -> Self {
        let v0 = vec![0.069, 0.188, 0.198, 0.112];
        let directions = match link_mode {
            LinkMode::RealLike => {
                vec![vec![0.06, -0.10, 0.00, 0.01], vec![0.06, 0.006, -0.14, -0.00]]
            }
            LinkMode::NoLink => {
                vec![vec![0.06, -0.10, 0.00, 0.01], vec![0.06, 0.01, -0.14, -0.00]]
            }
        };
        let beta = beta_from_mixing(&v0, &directions).expect("reference geometry");
        // Noise SDs on the reciprocal scale [1/25, 1/15, 1/16, 1/75]: large
        // enough to be realistic, small enough that the (0, 1) clamping of
        // observations stays rare (heavy clamping censors the Gaussian noise
        // model and biases the curve-level parameters).
        let fixed = FixedEffects {
            t0: 5.0,
            sigma_tau: 1.0,
            sigma_xi: 0.790,
            g: vec![13.958, 5.316, 3.993, 5.704],
            v0,
            sigma_noise: vec![1.0 / 25.0, 1.0 / 15.0, 1.0 / 16.0, 1.0 / 75.0],
            nu: vec![2.8, 3.6],
            rho: vec![1.7, 2.8],
            beta,
            zeta: Mat::from_rows(&[vec![-0.09, 0.09], vec![-0.1, 0.0]]).expect("zeta"),
        };
        Self {
            n_patients,
            fixed,
            baseline_offset_mean: 0.0,
            baseline_offset_sd: 0.4,
            followup_mean: 1.1,
            followup_sd: 0.5,
            intervisit_mean: 2.0 / 12.0,
            intervisit_sd: 0.75 / 12.0,
            padding_interval: 1.5 / 12.0,
            link_mode,
            seed,
        }
    }
}

/// Least-squares basis coefficients reproducing the given source directions:
/// `beta = B^T A` with `A` the K x Ns matrix whose columns are `directions`
/// (given as Ns rows of length K). Directions with a component along `v0`
/// are projected onto the admissible hyperplane.
pub fn beta_from_mixing(v0: &[f64], directions: &[Vec<f64>]) -> Result<Mat> {
    let k = v0.len();
    if directions.iter().any(|d| d.len() != k) {
        return Err(Error::DimensionMismatch("each direction must have length K".into()));
    }
    let basis = orthonormal_basis(v0)?;
    let mut mixing = Mat::zeros(k, directions.len());
    for (m, d) in directions.iter().enumerate() {
        for (kk, &v) in d.iter().enumerate() {
            mixing[(kk, m)] = v;
        }
    }
    let mut beta = Mat::zeros(k - 1, directions.len());
    for m in 0..directions.len() {
        let proj = basis.t_mul_vec(&mixing.col_to_vec(m))?;
        for o in 0..k - 1 {
            beta[(o, m)] = proj[o];
        }
    }
    Ok(beta)
}

/// A simulated dataset together with the random effects (and derived shifts)
/// that generated it.
#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub dataset: Dataset,
    pub truth: Vec<RandomEffects>,
    pub truth_space_shifts: Vec<Vec<f64>>,
    pub truth_survival_shifts: Vec<Vec<f64>>,
}

/// Inverse-CDF Weibull draw expressed through a unit exponential variate.
#[inline]
pub(crate) fn weibull_quantile(nu: f64, rho: f64, unit_exp: f64) -> f64 {
    nu * unit_exp.powf(1.0 / rho)
}

/// Generate a cohort. Steps, in order, per patient: draw random effects;
/// place the baseline visit relative to the reference time; schedule visits
/// until follow-up is exhausted; add Gaussian noise to the logistic values;
/// draw one latent time per event from its cause-specific distribution; keep
/// the earliest event; let the event censor later visits and the follow-up
/// censor later events (an event exactly at a visit keeps the visit); backfill
/// visits so every patient has at least two.
///
/// In no-link mode the event draws use an independent second set of random
/// effects, so events carry no information about the longitudinal ones.
pub fn simulate_dataset(config: &SimulationConfig) -> Result<SimulatedCohort> {
    config.validate()?;
    let fe = &config.fixed;
    let k = fe.n_outcomes();
    let l = fe.n_events();
    let ns = fe.n_sources();
    let geometry = fe.geometry()?;

    let id_width = (config.n_patients.max(2) - 1).to_string().len();
    let mut patients = Vec::with_capacity(config.n_patients);
    let mut truth = Vec::with_capacity(config.n_patients);
    let mut truth_w = Vec::with_capacity(config.n_patients);
    let mut truth_u = Vec::with_capacity(config.n_patients);

    for i in 0..config.n_patients {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let normal = |rng: &mut ChaCha12Rng| -> f64 { rng.sample(StandardNormal) };

        // 1. Random effects.
        let re = RandomEffects {
            xi: fe.sigma_xi * normal(&mut rng),
            tau: fe.t0 + fe.sigma_tau * normal(&mut rng),
            sources: (0..ns).map(|_| normal(&mut rng)).collect(),
        };
        let w = space_shift(&geometry, &re.sources)?;
        let u = survival_shift(&fe.zeta, &re.sources)?;

        // 2./3. Baseline and visit schedule.
        let baseline = re.tau + config.baseline_offset_mean + config.baseline_offset_sd * normal(&mut rng);
        let followup = (config.followup_mean + config.followup_sd * normal(&mut rng)).max(0.0);
        let mut schedule = vec![baseline];
        loop {
            let gap = (config.intervisit_mean + config.intervisit_sd * normal(&mut rng))
                .max(MIN_VISIT_GAP);
            let next = schedule.last().unwrap() + gap;
            if next > baseline + followup {
                break;
            }
            schedule.push(next);
        }

        // 4. Noisy observations on the individual curves.
        let observe = |rng: &mut ChaCha12Rng, t: f64| -> Vec<f64> {
            (0..k)
                .map(|kk| {
                    let gamma = individual_trajectory_with_shift(fe, &re, w[kk], kk, t);
                    let y = gamma + fe.sigma_noise[kk] * normal(rng);
                    y.clamp(VALUE_CLAMP, 1.0 - VALUE_CLAMP)
                })
                .collect()
        };
        let mut visits: Vec<Visit> = schedule
            .iter()
            .map(|&t| Visit { time: t, values: observe(&mut rng, t) })
            .collect();

        // 5. Event times from the cause-specific distribution; no-link mode
        // replaces the random effects by an independent draw for this step.
        let (ev_xi, ev_tau, ev_u) = match config.link_mode {
            LinkMode::RealLike => (re.xi, re.tau, u.clone()),
            LinkMode::NoLink => {
                let xi2 = fe.sigma_xi * normal(&mut rng);
                let tau2 = fe.t0 + fe.sigma_tau * normal(&mut rng);
                let s2: Vec<f64> = (0..ns).map(|_| normal(&mut rng)).collect();
                let u2 = survival_shift(&fe.zeta, &s2)?;
                (xi2, tau2, u2)
            }
        };
        let mut event_times = Vec::with_capacity(l);
        for ll in 0..l {
            let unit_exp = -(1.0 - rng.random::<f64>()).ln();
            let latent = weibull_quantile(fe.nu[ll], fe.rho[ll], unit_exp * (-ev_u[ll]).exp());
            event_times.push(ev_tau + (-ev_xi).exp() * latent);
        }

        // 6./7. Keep the earliest event; event censors visits, follow-up
        // censors events.
        let (first_event, first_cause) = event_times
            .iter()
            .enumerate()
            .map(|(idx, &t)| (t, idx))
            .fold((f64::INFINITY, 0usize), |acc, (t, idx)| if t < acc.0 { (t, idx) } else { acc });
        let last_scheduled = *schedule.last().unwrap();
        let (event_time, event_code) = if first_event <= last_scheduled {
            visits.retain(|v| v.time <= first_event);
            (first_event, first_cause + 1)
        } else {
            (last_scheduled, 0)
        };

        // 8. Backfill so every patient has at least two visits.
        let anchor = visits.first().map(|v| v.time).unwrap_or(event_time);
        let mut backfill = 1;
        while visits.len() < 2 {
            let t = anchor - config.padding_interval * backfill as f64;
            visits.insert(0, Visit { time: t, values: observe(&mut rng, t) });
            backfill += 1;
        }

        patients.push(PatientRecord {
            id: format!("p{i:0id_width$}"),
            visits,
            event_time,
            event_code,
        });
        truth.push(re);
        truth_w.push(w);
        truth_u.push(u);
    }

    let dataset = Dataset::new(patients, k, l)?;
    Ok(SimulatedCohort {
        dataset,
        truth,
        truth_space_shifts: truth_w,
        truth_survival_shifts: truth_u,
    })
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

/// Descriptive statistics of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub n_patients: usize,
    pub n_visits: usize,
    pub patient_years: f64,
    pub visits_per_patient_mean: f64,
    pub visits_per_patient_sd: f64,
    pub followup_years_mean: f64,
    pub followup_years_sd: f64,
    pub intervisit_months_mean: f64,
    pub intervisit_months_sd: f64,
    /// Observed count per event (index l), plus censored count.
    pub event_counts: Vec<usize>,
    pub n_censored: usize,
    pub baseline_means: Vec<f64>,
    pub baseline_sds: Vec<f64>,
}

impl DatasetSummary {
    pub fn event_fraction(&self, l: usize) -> f64 {
        self.event_counts[l] as f64 / self.n_patients as f64
    }
}

/// Aggregate a cohort; deterministic, patient order irrelevant for totals.
pub fn dataset_summary(dataset: &Dataset) -> DatasetSummary {
    let per_patient_visits: Vec<f64> = dataset.patients.iter().map(|p| p.n_visits() as f64).collect();
    let followups: Vec<f64> = dataset
        .patients
        .iter()
        .map(|p| p.last_visit_time() - p.first_visit_time())
        .collect();
    let mut gaps_months = Vec::new();
    for p in &dataset.patients {
        for pair in p.visits.windows(2) {
            gaps_months.push((pair[1].time - pair[0].time) * 12.0);
        }
    }
    let mut event_counts = vec![0usize; dataset.n_events];
    let mut n_censored = 0;
    for p in &dataset.patients {
        if p.event_code == 0 {
            n_censored += 1;
        } else {
            event_counts[p.event_code - 1] += 1;
        }
    }
    let mut baseline_means = Vec::with_capacity(dataset.n_outcomes);
    let mut baseline_sds = Vec::with_capacity(dataset.n_outcomes);
    for k in 0..dataset.n_outcomes {
        let first: Vec<f64> = dataset.patients.iter().map(|p| p.visits[0].values[k]).collect();
        baseline_means.push(mean(&first));
        baseline_sds.push(sample_sd(&first));
    }
    DatasetSummary {
        n_patients: dataset.n_patients(),
        n_visits: dataset.total_visits(),
        patient_years: followups.iter().sum(),
        visits_per_patient_mean: mean(&per_patient_visits),
        visits_per_patient_sd: sample_sd(&per_patient_visits),
        followup_years_mean: mean(&followups),
        followup_years_sd: sample_sd(&followups),
        intervisit_months_mean: mean(&gaps_months),
        intervisit_months_sd: sample_sd(&gaps_months),
        event_counts,
        n_censored,
        baseline_means,
        baseline_sds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ln_gamma;
    use crate::model::individual_trajectory;

    #[test]
    fn fixed_seed_reproduces_cohort_exactly() {
        let cfg = SimulationConfig::reference(LinkMode::RealLike, 40, 123);
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let cfg2 = SimulationConfig { seed: 124, ..cfg };
        let c = simulate_dataset(&cfg2).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn structural_invariants_hold() {
        let cfg = SimulationConfig::reference(LinkMode::RealLike, 300, 7);
        let cohort = simulate_dataset(&cfg).unwrap();
        for p in &cohort.dataset.patients {
            assert!(p.n_visits() >= 2, "patient {} has {} visits", p.id, p.n_visits());
            if p.event_observed() {
                assert!(
                    p.visits.iter().all(|v| v.time <= p.event_time),
                    "visit after observed event for {}",
                    p.id
                );
            }
        }
    }

    #[test]
    fn zero_noise_lands_on_the_curves() {
        let mut cfg = SimulationConfig::reference(LinkMode::RealLike, 20, 99);
        cfg.fixed.sigma_noise = vec![0.0; 4];
        let cohort = simulate_dataset(&cfg).unwrap();
        let geom = cfg.fixed.geometry().unwrap();
        for (p, re) in cohort.dataset.patients.iter().zip(&cohort.truth) {
            for v in &p.visits {
                for k in 0..4 {
                    let gamma = individual_trajectory(&cfg.fixed, re, &geom, k, v.time).unwrap();
                    assert!((v.values[k] - gamma).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weibull_sampling_matches_gamma_moment() {
        // Monte-Carlo mean of nu * E^(1/rho) vs nu * Gamma(1 + 1/rho).
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let (nu, rho) = (2.8, 1.7);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e = -(1.0 - rng.random::<f64>()).ln();
            acc += weibull_quantile(nu, rho, e);
        }
        let got = acc / n as f64;
        let want = nu * ln_gamma(1.0 + 1.0 / rho).exp();
        assert!(
            ((got - want) / want).abs() < 0.005,
            "MC mean {got} vs Gamma formula {want}"
        );
    }

    #[test]
    fn reference_cohort_matches_expected_shape() {
        let cfg = SimulationConfig::reference(LinkMode::RealLike, 300, 1);
        let cohort = simulate_dataset(&cfg).unwrap();
        let summary = dataset_summary(&cohort.dataset);
        // Broad bands around the scenario's expected characteristics.
        let f1 = summary.event_fraction(0);
        let f2 = summary.event_fraction(1);
        assert!((0.17..=0.31).contains(&f1), "event-1 fraction {f1}");
        assert!((0.05..=0.14).contains(&f2), "event-2 fraction {f2}");
        assert!(
            (5.4..=7.9).contains(&summary.visits_per_patient_mean),
            "visits/patient {}",
            summary.visits_per_patient_mean
        );
        assert!((0.7..=1.3).contains(&summary.followup_years_mean));
        // Totals equal sums over patients.
        assert_eq!(
            summary.n_visits,
            cohort.dataset.patients.iter().map(|p| p.n_visits()).sum::<usize>()
        );
        assert_eq!(summary.n_censored + summary.event_counts.iter().sum::<usize>(), 300);
    }

    #[test]
    fn no_link_severs_the_speed_event_correlation() {
        let n = 10_000;
        let no_link = simulate_dataset(&SimulationConfig::reference(LinkMode::NoLink, n, 5)).unwrap();
        let xi: Vec<f64> = no_link.truth.iter().map(|r| r.xi).collect();
        let te: Vec<f64> = no_link.dataset.patients.iter().map(|p| p.event_time).collect();
        let corr = crate::math::pearson(&xi, &te);
        assert!(corr.abs() < 0.02, "no-link correlation {corr}");

        let real = simulate_dataset(&SimulationConfig::reference(LinkMode::RealLike, n, 5)).unwrap();
        let xi: Vec<f64> = real.truth.iter().map(|r| r.xi).collect();
        let te: Vec<f64> = real.dataset.patients.iter().map(|p| p.event_time).collect();
        let corr = crate::math::pearson(&xi, &te);
        assert!(corr < -0.1, "real-like correlation should be clearly negative, got {corr}");
    }

    #[test]
    fn early_events_trigger_backfill() {
        let mut cfg = SimulationConfig::reference(LinkMode::RealLike, 200, 11);
        cfg.fixed.nu = vec![0.05, 0.08]; // events almost immediately after tau
        let cohort = simulate_dataset(&cfg).unwrap();
        let mut saw_backfill = false;
        for p in &cohort.dataset.patients {
            assert!(p.n_visits() >= 2);
            if p.event_observed() && p.visits.iter().all(|v| v.time < p.event_time) {
                saw_backfill = true;
            }
        }
        assert!(saw_backfill, "expected at least one patient with backfilled visits");
    }
}
