//! Construction of the primary and auxiliary statistics, either from direct
//! observations or from per-location trend regressions.

use alloc::format;
use alloc::vec::Vec;

use libm::sqrt;

use crate::covmodel::{
    derive_stat_params, fit_residual_kernel, FitOptions, KernelCovariance, KernelFamily, KernelSpec,
    ScaledCovariance, StatParams,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{NeighborhoodMap, SpatialDomain};

/// Per-location auxiliary statistic `t1`, primary statistic `t2` and their
/// correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct StatPair {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub rho: Vec<f64>,
}

impl StatPair {
    pub fn new(t1: Vec<f64>, t2: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if t1.len() != t2.len() || rho.len() != t2.len() {
            return Err(invalid!("statistic vectors have lengths {}, {}, {}", t1.len(), t2.len(), rho.len()));
        }
        if t1.iter().chain(&t2).chain(&rho).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite statistic".into()));
        }
        if rho.iter().any(|r| r.abs() > 1.0) {
            return Err(invalid!("correlation outside [-1, 1]"));
        }
        Ok(Self { t1, t2, rho })
    }

    pub fn len(&self) -> usize {
        self.t2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t2.is_empty()
    }
}

/// `t2(s) = X(s)/σ(s)` and `t1(s) = Σ_{v∈N(s)} X(v)/τ(s)`.
pub fn build_statistics(x: &[f64], params: &StatParams, neighborhoods: &NeighborhoodMap) -> Result<StatPair> {
    let m = params.len();
    if x.len() != m || neighborhoods.len() != m {
        return Err(invalid!(
            "{} observations, {} parameter rows and {} neighbourhoods",
            x.len(),
            m,
            neighborhoods.len()
        ));
    }
    let mut t1 = Vec::with_capacity(m);
    let mut t2 = Vec::with_capacity(m);
    for s in 0..m {
        if !x[s].is_finite() {
            return Err(Error::DataIncomplete(format!("no observation at location {s}")));
        }
        let mut sum = 0.0;
        for &v in neighborhoods.neighbors(s) {
            if !x[v].is_finite() {
                return Err(Error::DataIncomplete(format!("no observation at neighbour {v} of location {s}")));
            }
            sum += x[v];
        }
        t2.push(x[s] / params.sigma[s]);
        t1.push(sum / params.tau[s]);
    }
    Ok(StatPair { t1, t2, rho: params.rho.clone() })
}

/// Per-location time series on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub times: Vec<f64>,
    /// `values[s][k]` is the observation of location `s` at `times[k]`.
    pub values: Vec<Vec<f64>>,
}

/// Per-location OLS fit of `value = μ0 + β·t + σ_ε·ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub beta: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma_eps: Vec<f64>,
    pub se_beta: Vec<f64>,
    /// `Σ (t - t̄)²`.
    pub sxx: f64,
    pub residuals: Vec<Vec<f64>>,
}

/// Ordinary least squares on every location. A perfect fit is allowed here
/// and reported as `sigma_eps = 0`.
pub fn ols_fit(panel: &Panel) -> Result<RegressionFit> {
    let t = &panel.times;
    let n = t.len();
    if n < 3 {
        return Err(invalid!("need at least 3 time points, got {n}"));
    }
    let tbar = t.iter().sum::<f64>() / n as f64;
    let sxx: f64 = t.iter().map(|v| (v - tbar) * (v - tbar)).sum();
    if !(sxx > 0.0) {
        return Err(invalid!("rank-deficient design: all time points are equal"));
    }
    let m = panel.values.len();
    let mut fit = RegressionFit {
        beta: Vec::with_capacity(m),
        mu0: Vec::with_capacity(m),
        sigma_eps: Vec::with_capacity(m),
        se_beta: Vec::with_capacity(m),
        sxx,
        residuals: Vec::with_capacity(m),
    };
    for (s, y) in panel.values.iter().enumerate() {
        if y.len() != n {
            return Err(Error::DataIncomplete(format!("location {s} has {} of {n} time points", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataIncomplete(format!("location {s} has a missing value")));
        }
        let ybar = y.iter().sum::<f64>() / n as f64;
        let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - tbar) * (b - ybar)).sum();
        let beta = sxy / sxx;
        let mu0 = ybar - beta * tbar;
        let res: Vec<f64> = t.iter().zip(y).map(|(a, b)| b - mu0 - beta * a).collect();
        let rss: f64 = res.iter().map(|e| e * e).sum();
        let sigma = sqrt(rss / (n - 2) as f64);
        fit.beta.push(beta);
        fit.mu0.push(mu0);
        fit.sigma_eps.push(sigma);
        fit.se_beta.push(sigma / sqrt(sxx));
        fit.residuals.push(res);
    }
    Ok(fit)
}

/// Residuals divided by each location's `σ̂_ε`.
pub fn standardized_residuals(fit: &RegressionFit) -> Result<Vec<Vec<f64>>> {
    if let Some(s) = fit.sigma_eps.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateVariance(format!("zero residual variance at location {s}")));
    }
    Ok(fit.residuals.iter().zip(&fit.sigma_eps).map(|(r, s)| r.iter().map(|e| e / s).collect()).collect())
}

/// Statistics for the one-sided decline test `H1: β(s) < -β0`.
///
/// Slopes enter negated, so large positive statistics are evidence against
/// the null just as in direct mode: `t2 = -(β̂ + β0)/se(β̂)` and
/// `t1 = -Σ_{v∈N(s)} (β̂(v) + β0)/τ̂(s)`. Slope covariances come from the
/// kernel fitted to standardized residuals:
/// `cov(β̂v, β̂v') = σ̂v·σ̂v'·corr(v, v')/Sxx`.
pub fn build_regression_statistics(
    panel: &Panel,
    domain: &SpatialDomain,
    neighborhoods: &NeighborhoodMap,
    beta0: f64,
    family: KernelFamily,
    opts: FitOptions,
) -> Result<(StatPair, RegressionFit, KernelSpec)> {
    let fit = ols_fit(panel)?;
    let kernel = fit_residual_kernel(&standardized_residuals(&fit)?, domain, family, opts)?;
    let stats = regression_statistics_with_kernel(&fit, domain, neighborhoods, beta0, &kernel)?;
    Ok((stats, fit, kernel))
}

/// As [`build_regression_statistics`] with the residual kernel supplied.
pub fn regression_statistics_with_kernel(
    fit: &RegressionFit,
    domain: &SpatialDomain,
    neighborhoods: &NeighborhoodMap,
    beta0: f64,
    kernel: &KernelSpec,
) -> Result<StatPair> {
    if let Some(s) = fit.sigma_eps.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateVariance(format!("zero residual variance at location {s}")));
    }
    if fit.beta.len() != domain.len() {
        return Err(invalid!("{} fitted locations for a domain of {}", fit.beta.len(), domain.len()));
    }
    let corr = kernel.correlation();
    let source = ScaledCovariance {
        sd: fit.se_beta.clone(),
        base: KernelCovariance { spec: &corr, domain },
    };
    let params = derive_stat_params(&source, neighborhoods)?;
    let x: Vec<f64> = fit.beta.iter().map(|b| -(b + beta0)).collect();
    build_statistics(&x, &params, neighborhoods)
}
