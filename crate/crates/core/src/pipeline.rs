//! End-to-end analysis: neighbourhoods, statistics, the fitted prior and the
//! named testing procedures.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{floor, sqrt};

use crate::covmodel::{derive_stat_params, CovarianceSource, KernelCovariance, KernelSpec, ScaledCovariance};
use crate::error::{invalid, Result};
use crate::geometry::{adaptive_neighborhoods, knn_neighborhoods, select_npeb_subset, AdaptiveRule, NeighborhoodMap, SpatialDomain};
use crate::npeb::{fit_gmle, GmleOptions, MixingDistribution};
use crate::statbuild::{build_statistics, RegressionFit, StatPair};
use crate::testing::{
    groupwise_pi0, p_values, search_cutoffs_2d, storey_bh, weight_scheme, bh_procedure, DecisionResult,
    FdpEstimator, FdpEstimatorConfig, WeightScheme, Weighting,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeighborChoice {
    Knn(usize),
    Adaptive(AdaptiveRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Procedure {
    Bh,
    St,
    TwoDSt,
    Sa,
    TwoDSa,
    Gbh,
    TwoDGbh,
    Laws,
    TwoDLaws,
}

impl Procedure {
    pub const ALL: [Procedure; 9] = [
        Procedure::Bh,
        Procedure::St,
        Procedure::TwoDSt,
        Procedure::Sa,
        Procedure::TwoDSa,
        Procedure::Gbh,
        Procedure::TwoDGbh,
        Procedure::Laws,
        Procedure::TwoDLaws,
    ];

    /// Display label, e.g. `2D(ST)`.
    pub fn label(self) -> &'static str {
        match self {
            Procedure::Bh => "BH",
            Procedure::St => "ST",
            Procedure::TwoDSt => "2D(ST)",
            Procedure::Sa => "SA",
            Procedure::TwoDSa => "2D(SA)",
            Procedure::Gbh => "GBH",
            Procedure::TwoDGbh => "2D(GBH)",
            Procedure::Laws => "LAWS",
            Procedure::TwoDLaws => "2D(LAWS)",
        }
    }

    /// Command-line id, e.g. `2d-st`.
    pub fn id(self) -> &'static str {
        match self {
            Procedure::Bh => "bh",
            Procedure::St => "st",
            Procedure::TwoDSt => "2d-st",
            Procedure::Sa => "sa",
            Procedure::TwoDSa => "2d-sa",
            Procedure::Gbh => "gbh",
            Procedure::TwoDGbh => "2d-gbh",
            Procedure::Laws => "laws",
            Procedure::TwoDLaws => "2d-laws",
        }
    }

    /// Accepts either the id or the label, case-insensitively.
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.id().eq_ignore_ascii_case(s) || p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid!("unknown procedure '{s}'"))
    }

    pub fn is_two_d(self) -> bool {
        matches!(self, Procedure::TwoDSt | Procedure::TwoDSa | Procedure::TwoDGbh | Procedure::TwoDLaws)
    }

    fn weights(self) -> Option<WeightScheme> {
        match self {
            Procedure::Sa | Procedure::TwoDSa => Some(WeightScheme::Sabha),
            Procedure::Gbh | Procedure::TwoDGbh => Some(WeightScheme::Gbh),
            Procedure::Laws | Procedure::TwoDLaws => Some(WeightScheme::Laws),
            _ => None,
        }
    }

    fn needs_groups(self) -> bool {
        self.weights().is_some()
    }
}

/// Settings shared by every procedure in one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub q: f64,
    pub neighbors: NeighborChoice,
    /// Storey threshold on the primary-statistic scale.
    pub lambda: f64,
    /// `None` uses `q` for two-dimensional procedures.
    pub offset: Option<f64>,
    /// Storey threshold on the p-value scale for group-wise proportions.
    pub lambda_p: f64,
    /// Censoring level for the weighted procedures.
    pub censor_tau: f64,
    pub m_stop: Option<usize>,
    pub gmle: GmleOptions,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            q: 0.1,
            neighbors: NeighborChoice::Knn(4),
            lambda: 0.0,
            offset: None,
            lambda_p: 0.5,
            censor_tau: 0.5,
            m_stop: None,
            gmle: GmleOptions::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(invalid!("q must be in (0,1), got {}", self.q));
        }
        if !self.lambda.is_finite() {
            return Err(invalid!("lambda must be finite"));
        }
        if let Some(o) = self.offset {
            if !(o >= 0.0 && o.is_finite()) {
                return Err(invalid!("offset must be nonnegative, got {o}"));
            }
        }
        if !(self.lambda_p > 0.0 && self.lambda_p < 1.0) {
            return Err(invalid!("lambda_p must be in (0,1), got {}", self.lambda_p));
        }
        if !(self.censor_tau > 0.0 && self.censor_tau <= 1.0) {
            return Err(invalid!("censor_tau must be in (0,1], got {}", self.censor_tau));
        }
        if let NeighborChoice::Knn(0) = self.neighbors {
            return Err(invalid!("kappa must be at least 1"));
        }
        Ok(())
    }
}

/// Statistics and the fitted prior for one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub stats: StatPair,
    pub neighborhoods: NeighborhoodMap,
    pub prior: MixingDistribution,
    /// Locations used to fit the prior.
    pub npeb_members: Vec<usize>,
}

/// Build statistics from observations `x` with covariance `source`, then fit
/// the prior on the auxiliary statistics of a well-separated subset.
pub fn prepare(
    domain: &SpatialDomain,
    x: &[f64],
    source: &dyn CovarianceSource,
    cfg: &AnalysisConfig,
) -> Result<Prepared> {
    if x.len() != domain.len() || source.len() != domain.len() {
        return Err(invalid!(
            "{} observations and a {}-location covariance for {} locations",
            x.len(),
            source.len(),
            domain.len()
        ));
    }
    let neighborhoods = match cfg.neighbors {
        NeighborChoice::Knn(k) => knn_neighborhoods(domain, k)?,
        NeighborChoice::Adaptive(rule) => {
            let t2: Vec<f64> = x.iter().enumerate().map(|(s, v)| v / sqrt(source.cov(s, s))).collect();
            adaptive_neighborhoods(domain, &t2, rule)?
        }
    };
    let params = derive_stat_params(source, &neighborhoods)?;
    let stats = build_statistics(x, &params, &neighborhoods)?;
    let subset = select_npeb_subset(domain, &neighborhoods);
    let samples: Vec<f64> = subset.members.iter().map(|&s| stats.t1[s]).collect();
    let prior = fit_gmle(&samples, cfg.gmle)?.mixing;
    Ok(Prepared { stats, neighborhoods, prior, npeb_members: subset.members })
}

/// [`prepare`] with a known kernel for the observations.
pub fn prepare_with_kernel(
    domain: &SpatialDomain,
    x: &[f64],
    kernel: &KernelSpec,
    cfg: &AnalysisConfig,
) -> Result<Prepared> {
    prepare(domain, x, &KernelCovariance { spec: kernel, domain }, cfg)
}

/// [`prepare`] for slope tests `H1: β(s) < -β0` from a per-location
/// regression and the kernel of its standardized residuals.
pub fn prepare_regression(
    domain: &SpatialDomain,
    fit: &RegressionFit,
    kernel: &KernelSpec,
    beta0: f64,
    cfg: &AnalysisConfig,
) -> Result<Prepared> {
    if let Some(s) = fit.sigma_eps.iter().position(|&v| !(v > 0.0)) {
        return Err(crate::Error::DegenerateVariance(alloc::format!("zero residual variance at location {s}")));
    }
    let corr = kernel.correlation();
    let source = ScaledCovariance { sd: fit.se_beta.clone(), base: KernelCovariance { spec: &corr, domain } };
    let x: Vec<f64> = fit.beta.iter().map(|b| -(b + beta0)).collect();
    prepare(domain, &x, &source, cfg)
}

/// Groups from an equal-width partition of each coordinate range into
/// `bins` intervals, numbered row-major.
pub fn region_groups(domain: &SpatialDomain, bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let dim = domain.dim();
    let m = domain.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for s in 0..m {
        for (d, &c) in domain.coords(s).iter().enumerate() {
            lo[d] = lo[d].min(c);
            hi[d] = hi[d].max(c);
        }
    }
    (0..m)
        .map(|s| {
            domain.coords(s).iter().enumerate().fold(0, |acc, (d, &c)| {
                let width = hi[d] - lo[d];
                let b = if width > 0.0 { floor((c - lo[d]) / width * bins as f64) as usize } else { 0 };
                acc * bins + b.min(bins - 1)
            })
        })
        .collect()
}

/// Result of one procedure on one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureOutcome {
    pub procedure: Procedure,
    /// Rejected location indices, ascending.
    pub rejected: Vec<usize>,
    /// Cutoffs and counters for the estimator-based procedures.
    pub decision: Option<DecisionResult>,
    /// For two-dimensional procedures: rejections of the primary-only rule
    /// built from the same estimator, the search's starting point.
    pub matched_one_d: Option<usize>,
}

fn estimator_config(
    proc: Procedure,
    prepared: &Prepared,
    groups: Option<&[usize]>,
    cfg: &AnalysisConfig,
) -> Result<FdpEstimatorConfig> {
    let offset = if proc.is_two_d() { cfg.offset } else { Some(0.0) };
    let weighting = match proc.weights() {
        None => Weighting::Unweighted,
        Some(scheme) => {
            let groups = groups.ok_or_else(|| invalid!("procedure {} needs location groups", proc.label()))?;
            let p = p_values(&prepared.stats.t2);
            let pi0 = groupwise_pi0(&p, groups, cfg.lambda_p)?;
            let floored: Vec<f64> = pi0.iter().map(|v| v.max(1e-6)).collect();
            Weighting::Weighted {
                weights: weight_scheme(&floored, scheme)?,
                pi0_local: Some(pi0),
                censor_tau: cfg.censor_tau,
            }
        }
    };
    Ok(FdpEstimatorConfig { lambda: cfg.lambda, offset, pi0: None, weighting })
}

/// Run one named procedure. `groups` is required by the weighted ones.
pub fn run_procedure(
    proc: Procedure,
    prepared: &Prepared,
    groups: Option<&[usize]>,
    cfg: &AnalysisConfig,
) -> Result<ProcedureOutcome> {
    cfg.validate()?;
    if let Some(g) = groups {
        if g.len() != prepared.stats.len() {
            return Err(invalid!("{} group labels for {} locations", g.len(), prepared.stats.len()));
        }
    }
    if proc.needs_groups() && groups.is_none() {
        return Err(invalid!("procedure {} needs location groups", proc.label()));
    }
    match proc {
        Procedure::Bh => Ok(ProcedureOutcome {
            procedure: proc,
            rejected: bh_procedure(&p_values(&prepared.stats.t2), cfg.q),
            decision: None,
            matched_one_d: None,
        }),
        Procedure::St => Ok(ProcedureOutcome {
            procedure: proc,
            rejected: storey_bh(&p_values(&prepared.stats.t2), cfg.q, cfg.lambda_p),
            decision: None,
            matched_one_d: None,
        }),
        _ => {
            let ecfg = estimator_config(proc, prepared, groups, cfg)?;
            let est = FdpEstimator::new(&prepared.stats, &prepared.prior, &ecfg, cfg.q)?;
            if proc.is_two_d() {
                let d = search_cutoffs_2d(&est, cfg.m_stop);
                let one = est.one_d_decision().n_rejected();
                Ok(ProcedureOutcome { procedure: proc, rejected: d.rejected.clone(), decision: Some(d), matched_one_d: Some(one) })
            } else {
                let d = est.one_d_decision();
                Ok(ProcedureOutcome { procedure: proc, rejected: d.rejected.clone(), decision: Some(d), matched_one_d: None })
            }
        }
    }
}

/// Parse a comma-separated list of procedure ids.
pub fn parse_procedures(list: &str) -> Result<Vec<Procedure>> {
    let out: Result<Vec<Procedure>> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(Procedure::parse).collect();
    let out = out?;
    if out.is_empty() {
        return Err(invalid!("empty procedure list"));
    }
    Ok(out)
}

/// Names of all procedures, comma separated.
pub fn procedure_ids() -> String {
    Procedure::ALL.iter().map(|p| p.id().to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::KernelSpec;
    use crate::testing::storey_pi0;

    fn lattice_case() -> (SpatialDomain, Vec<f64>, KernelSpec) {
        let d = SpatialDomain::lattice_1d(60, 0.5);
        let x: Vec<f64> = (0..60).map(|i| if (20..30).contains(&i) { 3.5 } else { ((i * 37 % 11) as f64 - 5.0) / 5.0 }).collect();
        (d, x, KernelSpec::noise(0.5, 1.0, 0.3).unwrap())
    }

    #[test]
    fn procedure_names_round_trip() {
        for p in Procedure::ALL {
            assert_eq!(Procedure::parse(p.id()).unwrap(), p);
            assert_eq!(Procedure::parse(p.label()).unwrap(), p);
        }
        assert!(Procedure::parse("ihw").is_err());
        assert_eq!(parse_procedures("st, 2d-st").unwrap(), vec![Procedure::St, Procedure::TwoDSt]);
    }

    #[test]
    fn region_groups_partition() {
        let d = SpatialDomain::grid_2d(6, 1.0);
        let g = region_groups(&d, 3);
        assert_eq!(g.len(), 36);
        for k in 0..9 {
            assert_eq!(g.iter().filter(|&&v| v == k).count(), 4);
        }
        let d = SpatialDomain::lattice_1d(30, 1.0);
        let g = region_groups(&d, 10);
        assert_eq!(g[0], 0);
        assert_eq!(g[29], 9);
    }

    #[test]
    fn storey_matches_one_d_without_offset() {
        let (d, x, k) = lattice_case();
        let cfg = AnalysisConfig::default();
        let prep = prepare_with_kernel(&d, &x, &k, &cfg).unwrap();
        let st = run_procedure(Procedure::St, &prep, None, &cfg).unwrap();
        let ecfg = FdpEstimatorConfig { offset: Some(0.0), ..Default::default() };
        let est = FdpEstimator::new(&prep.stats, &prep.prior, &ecfg, cfg.q).unwrap();
        assert_eq!(st.rejected, est.one_d_decision().rejected);
        assert!(est.pi0().unwrap() == storey_pi0(&prep.stats.t2, 0.0));
    }

    #[test]
    fn two_d_dominates_matched_one_d() {
        let (d, x, k) = lattice_case();
        let cfg = AnalysisConfig::default();
        let prep = prepare_with_kernel(&d, &x, &k, &cfg).unwrap();
        let groups = region_groups(&d, 3);
        for p in [Procedure::TwoDSt, Procedure::TwoDSa, Procedure::TwoDGbh, Procedure::TwoDLaws] {
            let out = run_procedure(p, &prep, Some(&groups), &cfg).unwrap();
            assert!(out.rejected.len() >= out.matched_one_d.unwrap(), "{}", p.label());
        }
        let two = run_procedure(Procedure::TwoDSt, &prep, None, &cfg).unwrap();
        assert!(two.rejected.iter().filter(|&&s| (20..30).contains(&s)).count() >= 8);
    }

    #[test]
    fn weighted_needs_groups() {
        let (d, x, k) = lattice_case();
        let cfg = AnalysisConfig::default();
        let prep = prepare_with_kernel(&d, &x, &k, &cfg).unwrap();
        assert!(run_procedure(Procedure::Sa, &prep, None, &cfg).is_err());
        assert!(run_procedure(Procedure::Sa, &prep, Some(&[0, 1]), &cfg).is_err());
    }

    #[test]
    fn adaptive_neighbourhoods_run() {
        let (d, x, k) = lattice_case();
        let cfg = AnalysisConfig { neighbors: NeighborChoice::Adaptive(AdaptiveRule::default()), ..Default::default() };
        let prep = prepare_with_kernel(&d, &x, &k, &cfg).unwrap();
        assert_eq!(prep.stats.len(), 60);
        let out = run_procedure(Procedure::TwoDSt, &prep, None, &cfg).unwrap();
        assert!(out.rejected.len() >= out.matched_one_d.unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(AnalysisConfig { q: 1.5, ..Default::default() }.validate().is_err());
        assert!(AnalysisConfig { neighbors: NeighborChoice::Knn(0), ..Default::default() }.validate().is_err());
        assert!(AnalysisConfig::default().validate().is_ok());
    }
}
