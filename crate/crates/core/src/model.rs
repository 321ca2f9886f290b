//! Model algebra: latent disease age, spatial decomposition, logistic
//! trajectories, cause-specific Weibull hazards, survival and cumulative
//! incidence.
//!
//! Every function here is a pure function of its inputs; values are immutable
//! and safe to share across threads.

use crate::error::{Error, Result};
use crate::math::{adaptive_gauss_legendre, Mat};

/// Absolute tolerance of the cumulative-incidence quadrature.
pub const CIF_QUAD_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// User-fixed prior scales for the latent fixed effects (log or coefficient
/// scale, dimensionless).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScales {
    pub g: f64,
    pub v0: f64,
    pub nu: f64,
    pub rho: f64,
    pub beta: f64,
    pub zeta: f64,
}

impl Default for PriorScales {
    fn default() -> Self {
        // The curve and Weibull blocks are strongly data-identified and
        // benefit from the wider random walk; the coefficient blocks are
        // weakly identified when events are scarce and need the tight scale
        // to keep their sampled values from diffusing.
        Self { g: 0.03, v0: 0.03, nu: 0.03, rho: 0.03, beta: 0.01, zeta: 0.01 }
    }
}

/// Structural sizes and prior scales fixed by the user before estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Number of longitudinal outcomes K.
    pub n_outcomes: usize,
    /// Number of competing events L.
    pub n_events: usize,
    /// Number of sources Ns (1 <= Ns <= K - 1).
    pub n_sources: usize,
    pub prior_scales: PriorScales,
}

impl Hyperparameters {
    pub fn new(n_outcomes: usize, n_events: usize, n_sources: usize) -> Self {
        Self { n_outcomes, n_events, n_sources, prior_scales: PriorScales::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outcomes < 2 {
            return Err(Error::InvalidParameters("need at least two outcomes".into()));
        }
        if self.n_events == 0 {
            return Err(Error::InvalidParameters("need at least one event".into()));
        }
        if self.n_sources == 0 || self.n_sources > self.n_outcomes - 1 {
            return Err(Error::InvalidParameters(format!(
                "n_sources must satisfy 1 <= Ns <= K-1, got Ns={} with K={}",
                self.n_sources, self.n_outcomes
            )));
        }
        let s = &self.prior_scales;
        for (name, v) in [
            ("g", s.g),
            ("v0", s.v0),
            ("nu", s.nu),
            ("rho", s.rho),
            ("beta", s.beta),
            ("zeta", s.zeta),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameters(format!("prior scale {name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Population fixed effects (natural scale).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffects {
    /// Population reference time (years); equals the mean of the individual
    /// reference times by identifiability.
    pub t0: f64,
    /// SD of the individual reference times (years).
    pub sigma_tau: f64,
    /// SD of the individual log-speed factors.
    pub sigma_xi: f64,
    /// Curve-shape parameters; the curve value at `t0` is `1 / (1 + g_k)`.
    pub g: Vec<f64>,
    /// Speeds of the logistic curves at `t0` (1/year).
    pub v0: Vec<f64>,
    /// Per-outcome Gaussian noise SD.
    pub sigma_noise: Vec<f64>,
    /// Weibull scales (years, measured from the individual reference time).
    pub nu: Vec<f64>,
    /// Weibull shapes.
    pub rho: Vec<f64>,
    /// Basis coefficients, (K-1) x Ns.
    pub beta: Mat,
    /// Hazard-ratio coefficients, L x Ns.
    pub zeta: Mat,
}

impl FixedEffects {
    pub fn n_outcomes(&self) -> usize {
        self.g.len()
    }

    pub fn n_events(&self) -> usize {
        self.nu.len()
    }

    pub fn n_sources(&self) -> usize {
        self.zeta.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.g.len();
        let l = self.nu.len();
        if self.v0.len() != k || self.sigma_noise.len() != k {
            return Err(Error::DimensionMismatch("g, v0, sigma_noise must share length K".into()));
        }
        if self.rho.len() != l {
            return Err(Error::DimensionMismatch("nu and rho must share length L".into()));
        }
        if k < 2 {
            return Err(Error::InvalidParameters("need at least two outcomes".into()));
        }
        if self.beta.rows() != k - 1 || self.beta.cols() != self.zeta.cols() {
            return Err(Error::DimensionMismatch(format!(
                "beta must be (K-1) x Ns, got {}x{} with K={} and zeta {}x{}",
                self.beta.rows(),
                self.beta.cols(),
                k,
                self.zeta.rows(),
                self.zeta.cols()
            )));
        }
        if self.zeta.rows() != l {
            return Err(Error::DimensionMismatch("zeta must be L x Ns".into()));
        }
        for (name, vals) in [("g", &self.g), ("v0", &self.v0), ("sigma_noise", &self.sigma_noise), ("nu", &self.nu), ("rho", &self.rho)] {
            if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameters(format!("{name} entries must be finite and > 0")));
            }
        }
        if !(self.sigma_tau > 0.0) || !(self.sigma_xi > 0.0) {
            return Err(Error::InvalidParameters("sigma_tau and sigma_xi must be > 0".into()));
        }
        if !self.t0.is_finite() {
            return Err(Error::InvalidParameters("t0 must be finite".into()));
        }
        Ok(())
    }

    /// Geometry (orthonormal basis and mixing matrix) implied by `v0` and `beta`.
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(&self.v0, &self.beta)
    }
}

/// Individual random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    /// Log speed factor; the progression speed is `exp(xi)`.
    pub xi: f64,
    /// Individual reference time (years).
    pub tau: f64,
    /// Sources (length Ns).
    pub sources: Vec<f64>,
}

impl RandomEffects {
    /// Prior means: zero speed shift, reference time at `t0`, zero sources.
    pub fn prior_mean(t0: f64, n_sources: usize) -> Self {
        Self { xi: 0.0, tau: t0, sources: vec![0.0; n_sources] }
    }
}

/// Orthonormal basis of the hyperplane orthogonal to `v0`, together with the
/// mixing matrix `A = B * beta` mapping sources to space shifts.
#[derive(Debug, Clone)]
pub struct Geometry {
    /// K x (K-1), columns orthonormal and orthogonal to v0.
    pub basis: Mat,
    /// K x Ns.
    pub mixing: Mat,
}

impl Geometry {
    pub fn new(v0: &[f64], beta: &Mat) -> Result<Self> {
        let basis = orthonormal_basis(v0)?;
        if beta.rows() != basis.cols() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} rows but the basis has {} columns",
                beta.rows(),
                basis.cols()
            )));
        }
        let mixing = basis.matmul(beta)?;
        Ok(Self { basis, mixing })
    }

    pub fn n_sources(&self) -> usize {
        self.mixing.cols()
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Latent disease age `psi(t) = exp(xi) * (t - tau) + t0`.
#[inline]
pub fn latent_age(xi: f64, tau: f64, t0: f64, t: f64) -> f64 {
    xi.exp() * (t - tau) + t0
}

/// Deterministic orthonormal basis of the hyperplane orthogonal to `v0`,
/// built from the Householder reflector that maps `v0 / |v0|` onto the first
/// canonical axis (that axis is then dropped).
pub fn orthonormal_basis(v0: &[f64]) -> Result<Mat> {
    let k = v0.len();
    if k < 2 {
        return Err(Error::InvalidInput("v0 must have at least two entries".into()));
    }
    let norm = v0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput("v0 must be a nonzero finite vector".into()));
    }
    let unit: Vec<f64> = v0.iter().map(|v| v / norm).collect();
    // u = v_hat - alpha * e1 with alpha = -sign(v_hat[0]) avoids cancellation.
    let alpha = if unit[0] >= 0.0 { -1.0 } else { 1.0 };
    let mut u = unit.clone();
    u[0] -= alpha;
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let mut basis = Mat::zeros(k, k - 1);
    for c in 1..k {
        // Column c of H = I - 2 u u^T / (u^T u).
        for r in 0..k {
            let id = if r == c { 1.0 } else { 0.0 };
            basis[(r, c - 1)] = id - 2.0 * u[r] * u[c] / uu;
        }
    }
    Ok(basis)
}

/// Space shift `w = A s`.
pub fn space_shift(geometry: &Geometry, sources: &[f64]) -> Result<Vec<f64>> {
    geometry.mixing.mul_vec(sources)
}

/// Survival shift `u = zeta s`.
pub fn survival_shift(zeta: &Mat, sources: &[f64]) -> Result<Vec<f64>> {
    zeta.mul_vec(sources)
}

/// Logistic curve value for shape `g` at linearised progression `z`, i.e.
/// `(1 + g * exp(-((1+g)^2 / g) * z))^{-1}`.
#[inline]
pub(crate) fn logistic_value(g: f64, z: f64) -> f64 {
    let v = 1.0 / (1.0 + g * (-(1.0 + g) * (1.0 + g) / g * z).exp());
    // Keep the value strictly inside (0, 1) even when the exponential
    // saturates in f64.
    v.clamp(1e-300, 1.0 - f64::EPSILON)
}

/// Average curve of outcome `k` at time `t`.
pub fn population_trajectory(fe: &FixedEffects, k: usize, t: f64) -> f64 {
    logistic_value(fe.g[k], fe.v0[k] * (t - fe.t0))
}

/// Individual curve of outcome `k` at time `t`; the space shift enters the
/// linearised progression additively, the latent age multiplicatively.
pub fn individual_trajectory(
    fe: &FixedEffects,
    re: &RandomEffects,
    geometry: &Geometry,
    k: usize,
    t: f64,
) -> Result<f64> {
    let w = space_shift(geometry, &re.sources)?;
    Ok(individual_trajectory_with_shift(fe, re, w[k], k, t))
}

/// Same as [`individual_trajectory`] with the space shift of outcome `k`
/// already computed (hot-loop form).
#[inline]
pub(crate) fn individual_trajectory_with_shift(
    fe: &FixedEffects,
    re: &RandomEffects,
    w_k: f64,
    k: usize,
    t: f64,
) -> f64 {
    let elapsed = re.xi.exp() * (t - re.tau);
    logistic_value(fe.g[k], fe.v0[k] * elapsed + w_k)
}

/// Log cause-specific hazard of event `l` at time `t > tau`.
///
/// Computed in log scale: `ln rho + xi - ln nu + (rho - 1) * (xi + ln(t - tau)
/// - ln nu) + u_l`.
#[inline]
pub(crate) fn log_hazard_raw(xi: f64, tau: f64, nu: f64, rho: f64, u_l: f64, t: f64) -> f64 {
    let base = xi + (t - tau).ln() - nu.ln();
    rho.ln() + xi - nu.ln() + (rho - 1.0) * base + u_l
}

/// Log survival of event `l` at time `t`; zero (survival one) before `tau`.
#[inline]
pub(crate) fn log_survival_raw(xi: f64, tau: f64, nu: f64, rho: f64, u_l: f64, t: f64) -> f64 {
    if t <= tau {
        return 0.0;
    }
    let base = xi + (t - tau).ln() - nu.ln();
    -(rho * base + u_l).exp()
}

/// Cause-specific hazard of event `l` at time `t`.
///
/// The latent elapsed time must be positive: `t <= tau` is a domain error
/// (the log hazard is minus infinity there; the likelihood handles that case
/// through its barrier convention).
pub fn hazard(fe: &FixedEffects, re: &RandomEffects, u: &[f64], l: usize, t: f64) -> Result<f64> {
    if t <= re.tau {
        return Err(Error::Domain(format!(
            "hazard requires t > tau (t = {t}, tau = {})",
            re.tau
        )));
    }
    Ok(log_hazard_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t).exp())
}

/// Survival of event `l` at time `t`. No hazard accumulates before the
/// individual reference time, so `t < tau` returns 1.
pub fn survival(fe: &FixedEffects, re: &RandomEffects, u: &[f64], l: usize, t: f64) -> f64 {
    // Floor keeps the probability strictly positive when the cumulated
    // hazard overflows the exponential.
    log_survival_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], t).exp().max(1e-300)
}

/// Cumulative incidence of event `l` by time `t` in the presence of the
/// competing events: the integral of `h_l(x) * prod_q S_q(x)` over `[tau, t]`
/// (the integrand vanishes before `tau`), by adaptive Gauss–Legendre
/// quadrature at absolute tolerance [`CIF_QUAD_TOL`].
pub fn cif(fe: &FixedEffects, re: &RandomEffects, u: &[f64], l: usize, t: f64) -> Result<f64> {
    if u.len() != fe.n_events() {
        return Err(Error::DimensionMismatch("u must have one entry per event".into()));
    }
    if t <= re.tau {
        return Ok(0.0);
    }
    let integrand = |x: f64| -> f64 {
        if x <= re.tau {
            return 0.0;
        }
        let log_h = log_hazard_raw(re.xi, re.tau, fe.nu[l], fe.rho[l], u[l], x);
        let mut log_s_total = 0.0;
        for q in 0..fe.n_events() {
            log_s_total += log_survival_raw(re.xi, re.tau, fe.nu[q], fe.rho[q], u[q], x);
        }
        (log_h + log_s_total).exp()
    };
    Ok(adaptive_gauss_legendre(&integrand, re.tau, t, CIF_QUAD_TOL).clamp(0.0, 1.0 - f64::EPSILON))
}
