//! Estimator-quality metrics for simulation studies (relative bias, RRMSE,
//! relative estimation error, exact binomial coverage, intraclass
//! correlation), predictive survival metrics (truncated concordance index,
//! IPCW Brier score, cumulative/dynamic AUC) and the extended BIC used for
//! source selection.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{total_log_likelihood, LatentFixedEffects};
use crate::math::{inv_betai, mean};
use crate::model::Hyperparameters;
use crate::saem::FitResult;

// ---------------------------------------------------------------------------
// Simulation-study metrics
// ---------------------------------------------------------------------------

/// Mean of `(estimate - truth) / truth`, in percent.
pub fn relative_bias(estimates: &[f64], truth: f64) -> Result<f64> {
    check_truth(estimates, truth)?;
    Ok(mean(&estimates.iter().map(|e| (e - truth) / truth * 100.0).collect::<Vec<f64>>()))
}

/// Root mean square of the percent relative errors.
pub fn rrmse(estimates: &[f64], truth: f64) -> Result<f64> {
    check_truth(estimates, truth)?;
    let msq = mean(
        &estimates
            .iter()
            .map(|e| {
                let r = (e - truth) / truth * 100.0;
                r * r
            })
            .collect::<Vec<f64>>(),
    );
    Ok(msq.sqrt())
}

/// Percent relative error of a single estimate.
pub fn ree(estimate: f64, truth: f64) -> Result<f64> {
    check_truth(&[estimate], truth)?;
    Ok((estimate - truth) / truth * 100.0)
}

fn check_truth(estimates: &[f64], truth: f64) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no estimates".into()));
    }
    if truth == 0.0 {
        return Err(Error::InvalidInput("relative metrics are undefined at truth = 0".into()));
    }
    Ok(())
}

/// Exact binomial (Clopper–Pearson) bounds for `successes` out of `n`, in
/// percent, at the given two-sided confidence level.
pub fn clopper_pearson(successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidInput("coverage undefined for zero trials".into()));
    }
    if successes > n {
        return Err(Error::InvalidInput("successes exceed trials".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameters("confidence level must lie in (0, 1)".into()));
    }
    let alpha = 1.0 - level;
    let s = successes as f64;
    let nf = n as f64;
    let lo = if successes == 0 { 0.0 } else { inv_betai(s, nf - s + 1.0, alpha / 2.0) };
    let hi = if successes == n { 1.0 } else { inv_betai(s + 1.0, nf - s, 1.0 - alpha / 2.0) };
    Ok((lo * 100.0, hi * 100.0))
}

/// Coverage of `truth` by the Wald intervals `estimate +- 1.96 se`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageResult {
    /// Percent of replicates covering the truth.
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_covered: usize,
    pub n_total: usize,
}

pub fn coverage_rate(estimates: &[f64], ses: &[f64], truth: f64) -> Result<CoverageResult> {
    if estimates.len() != ses.len() {
        return Err(Error::DimensionMismatch("estimates and SEs differ in length".into()));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidInput("coverage undefined without replicates".into()));
    }
    let n_covered = estimates
        .iter()
        .zip(ses)
        .filter(|(e, se)| (truth - **e).abs() <= 1.96 * **se)
        .count();
    let (ci_low, ci_high) = clopper_pearson(n_covered, estimates.len(), 0.95)?;
    Ok(CoverageResult {
        rate: n_covered as f64 / estimates.len() as f64 * 100.0,
        ci_low,
        ci_high,
        n_covered,
        n_total: estimates.len(),
    })
}

/// One-way random-effects intraclass correlation of paired values (the true
/// and estimated quantity treated as two ratings of each subject).
pub fn icc(truth_values: &[f64], estimated_values: &[f64]) -> Result<f64> {
    if truth_values.len() != estimated_values.len() {
        return Err(Error::DimensionMismatch("paired samples differ in length".into()));
    }
    let n = truth_values.len();
    if n < 2 {
        return Err(Error::InvalidInput("ICC needs at least two subjects".into()));
    }
    let nf = n as f64;
    let grand = truth_values.iter().chain(estimated_values).sum::<f64>() / (2.0 * nf);
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for (&a, &b) in truth_values.iter().zip(estimated_values) {
        let m = 0.5 * (a + b);
        ss_between += (m - grand) * (m - grand);
        ss_within += (a - m) * (a - m) + (b - m) * (b - m);
    }
    let ms_between = 2.0 * ss_between / (nf - 1.0);
    let ms_within = ss_within / nf;
    if ms_between + ms_within == 0.0 {
        return Err(Error::InvalidInput("ICC undefined for constant data".into()));
    }
    Ok((ms_between - ms_within) / (ms_between + ms_within))
}

// ---------------------------------------------------------------------------
// Censoring distribution (reverse Kaplan–Meier) for IPCW
// ---------------------------------------------------------------------------

/// Right-continuous step estimate of the censoring survival function G(t).
#[derive(Debug, Clone)]
pub struct CensoringDistribution {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl CensoringDistribution {
    /// Kaplan–Meier on the censoring indicator (events keep subjects in the
    /// risk set at tied times).
    pub fn fit(times: &[f64], event_observed: &[bool]) -> Result<Self> {
        if times.len() != event_observed.len() || times.is_empty() {
            return Err(Error::InvalidInput("times and indicators must be equal and nonempty".into()));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let n = times.len();
        let mut step_times = Vec::new();
        let mut step_values = Vec::new();
        let mut surv = 1.0;
        let mut i = 0;
        while i < n {
            let t = times[order[i]];
            let mut censored_here = 0usize;
            let mut tied = 0usize;
            while i + tied < n && times[order[i + tied]] == t {
                if !event_observed[order[i + tied]] {
                    censored_here += 1;
                }
                tied += 1;
            }
            let at_risk = n - i;
            if censored_here > 0 {
                surv *= 1.0 - censored_here as f64 / at_risk as f64;
                step_times.push(t);
                step_values.push(surv);
            }
            i += tied;
        }
        Ok(Self { times: step_times, values: step_values })
    }

    /// G(t), right-continuous.
    pub fn eval(&self, t: f64) -> f64 {
        let mut val = 1.0;
        for (st, sv) in self.times.iter().zip(&self.values) {
            if *st <= t {
                val = *sv;
            } else {
                break;
            }
        }
        val
    }

    /// Left limit G(t-).
    pub fn eval_left(&self, t: f64) -> f64 {
        let mut val = 1.0;
        for (st, sv) in self.times.iter().zip(&self.values) {
            if *st < t {
                val = *sv;
            } else {
                break;
            }
        }
        val
    }
}

// ---------------------------------------------------------------------------
// Predictive survival metrics
// ---------------------------------------------------------------------------

/// Truncated concordance: over comparable pairs (an observed event no later
/// than the horizon against a strictly later time), the fraction where the
/// earlier event carries the higher risk score; score ties count one half.
pub fn c_index_truncated(
    risk_scores: &[f64],
    event_times: &[f64],
    event_indicators: &[bool],
    horizon: f64,
) -> Result<f64> {
    let n = risk_scores.len();
    if event_times.len() != n || event_indicators.len() != n {
        return Err(Error::DimensionMismatch("scores, times and indicators must align".into()));
    }
    let mut concordant = 0.0;
    let mut comparable = 0usize;
    for i in 0..n {
        if !event_indicators[i] || event_times[i] > horizon {
            continue;
        }
        for j in 0..n {
            if event_times[j] <= event_times[i] {
                continue;
            }
            comparable += 1;
            if risk_scores[i] > risk_scores[j] {
                concordant += 1.0;
            } else if risk_scores[i] == risk_scores[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::InvalidInput("no comparable pairs below the horizon".into()));
    }
    Ok(concordant / comparable as f64)
}

/// Inverse-probability-of-censoring-weighted Brier score averaged over the
/// grid (trapezoidal in time). `predicted_survival[i][g]` is patient `i`'s
/// predicted survival at `grid[g]`.
pub fn integrated_brier_score(
    predicted_survival: &[Vec<f64>],
    event_times: &[f64],
    event_indicators: &[bool],
    grid: &[f64],
) -> Result<f64> {
    let n = event_times.len();
    if predicted_survival.len() != n || event_indicators.len() != n {
        return Err(Error::DimensionMismatch("predictions, times and indicators must align".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty evaluation grid".into()));
    }
    if predicted_survival.iter().any(|row| row.len() != grid.len()) {
        return Err(Error::DimensionMismatch("one prediction per grid point required".into()));
    }
    let censoring = CensoringDistribution::fit(event_times, event_indicators)?;
    let scores: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(gi, &t)| {
            let mut acc = 0.0;
            for i in 0..n {
                let s_hat = predicted_survival[i][gi];
                if event_indicators[i] && event_times[i] <= t {
                    let g = censoring.eval_left(event_times[i]).max(1e-12);
                    acc += s_hat * s_hat / g;
                } else if event_times[i] > t {
                    let g = censoring.eval(t).max(1e-12);
                    acc += (1.0 - s_hat) * (1.0 - s_hat) / g;
                }
            }
            acc / n as f64
        })
        .collect();
    if grid.len() == 1 {
        return Ok(scores[0]);
    }
    let mut integral = 0.0;
    for gi in 1..grid.len() {
        integral += 0.5 * (scores[gi] + scores[gi - 1]) * (grid[gi] - grid[gi - 1]);
    }
    Ok(integral / (grid[grid.len() - 1] - grid[0]))
}

/// Cumulative/dynamic AUC at each evaluation time (cases: events by t,
/// controls: still event-free after t) with IPCW weights on the cases, and
/// the arithmetic mean across times.
pub fn cumulative_dynamic_auc(
    risk_scores: &[f64],
    event_times: &[f64],
    event_indicators: &[bool],
    times: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let n = risk_scores.len();
    if event_times.len() != n || event_indicators.len() != n {
        return Err(Error::DimensionMismatch("scores, times and indicators must align".into()));
    }
    let censoring = CensoringDistribution::fit(event_times, event_indicators)?;
    let mut aucs = Vec::with_capacity(times.len());
    for &t in times {
        let cases: Vec<usize> =
            (0..n).filter(|&i| event_indicators[i] && event_times[i] <= t).collect();
        let controls: Vec<usize> = (0..n).filter(|&i| event_times[i] > t).collect();
        if cases.is_empty() || controls.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no cases or no controls at evaluation time {t}"
            )));
        }
        let mut num = 0.0;
        let mut denom = 0.0;
        for &i in &cases {
            let w = 1.0 / censoring.eval_left(event_times[i]).max(1e-12);
            for &j in &controls {
                num += w
                    * if risk_scores[i] > risk_scores[j] {
                        1.0
                    } else if risk_scores[i] == risk_scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                denom += w;
            }
        }
        aucs.push(num / denom);
    }
    let mean_auc = mean(&aucs);
    Ok((aucs, mean_auc))
}

// ---------------------------------------------------------------------------
// Extended BIC
// ---------------------------------------------------------------------------

/// Extended BIC with its plug-in log-likelihood and parameter counts.
#[derive(Debug, Clone)]
pub struct BicBreakdown {
    pub bic: f64,
    pub loglik: f64,
    /// Parameters tied to random effects (penalised by log N).
    pub d_random: usize,
    /// Remaining fixed-effect parameters (penalised by log n_obs).
    pub d_fixed: usize,
    pub n_patients: usize,
    pub n_obs: usize,
}

/// Parameter counts for a model of the given sizes: the random-effect block
/// is (sigma_tau, sigma_xi, t0); everything else is observation-linked.
pub fn bic_parameter_counts(k: usize, l: usize, ns: usize) -> (usize, usize) {
    let d_random = 3;
    let d_fixed = 3 * k + 2 * l + (k - 1) * ns + l * ns;
    (d_random, d_fixed)
}

/// BIC with mixed-effect penalties: `-2 L + d_R log N + d_F log n_obs`,
/// where `L` is the complete-data log-likelihood at the estimate and the
/// posterior-mean latents (the marginal likelihood is intractable).
pub fn extended_bic_detailed(
    fit: &FitResult,
    dataset: &Dataset,
    hyper: &Hyperparameters,
) -> Result<BicBreakdown> {
    let theta = &fit.theta_hat;
    let z_fe = LatentFixedEffects::at_means(theta);
    let geometry = theta.geometry()?;
    let breakdown =
        total_log_likelihood(dataset, theta, &z_fe, &fit.re_posterior_mean, &geometry, hyper)?;
    let n = dataset.n_patients();
    let n_obs: usize = dataset.n_obs_per_outcome().iter().sum();
    let (d_random, d_fixed) =
        bic_parameter_counts(hyper.n_outcomes, hyper.n_events, hyper.n_sources);
    let bic = -2.0 * breakdown.total
        + d_random as f64 * (n as f64).ln()
        + d_fixed as f64 * (n_obs as f64).ln();
    Ok(BicBreakdown { bic, loglik: breakdown.total, d_random, d_fixed, n_patients: n, n_obs })
}

/// The extended BIC value alone.
pub fn extended_bic(fit: &FitResult, dataset: &Dataset, hyper: &Hyperparameters) -> Result<f64> {
    Ok(extended_bic_detailed(fit, dataset, hyper)?.bic)
}
