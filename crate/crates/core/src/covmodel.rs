//! Stationary covariance kernels with a nugget, replicate-based maximum
//! likelihood fitting, and the per-location standard deviations and
//! correlations that standardize the test statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, pow, sqrt};

use crate::error::{invalid, Error, Result};
use crate::geometry::{NeighborhoodMap, SpatialDomain};
use crate::linalg::{cholesky_with_jitter, Cholesky};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Matérn smoothness values with closed-form correlation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }

    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            v if v == 0.5 => Ok(MaternNu::Half),
            v if v == 1.5 => Ok(MaternNu::ThreeHalves),
            v if v == 2.5 => Ok(MaternNu::FiveHalves),
            _ => Err(invalid!("Matérn smoothness must be 0.5, 1.5 or 2.5, got {nu}")),
        }
    }
}

/// Correlation shape of the spatial part of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    /// `exp(-d/ρ)`.
    Exponential,
    /// `exp(-(d/ρ)²)`.
    Gaussian,
    /// Matérn with `z = 2√ν·d/ρ`.
    Matern(MaternNu),
    /// Powered exponential `exp(-(d/ρ)^k)` with `0 < k ≤ 2`.
    NuggetMix { shape: f64 },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Exponential => "exponential",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Matern(_) => "matern",
            KernelFamily::NuggetMix { .. } => "nugget-mix",
        }
    }

    /// The shape parameter: `k` for powered exponentials, `ν` for Matérn.
    pub fn shape(&self) -> f64 {
        match *self {
            KernelFamily::Exponential => 1.0,
            KernelFamily::Gaussian => 2.0,
            KernelFamily::Matern(nu) => nu.value(),
            KernelFamily::NuggetMix { shape } => shape,
        }
    }

    pub fn from_name(name: &str, shape: Option<f64>) -> Result<Self> {
        match name {
            "exponential" => Ok(KernelFamily::Exponential),
            "gaussian" => Ok(KernelFamily::Gaussian),
            "matern" => Ok(KernelFamily::Matern(MaternNu::from_value(shape.unwrap_or(0.5))?)),
            "nugget-mix" => {
                let k = shape.unwrap_or(1.0);
                if !(k > 0.0 && k <= 2.0) {
                    return Err(invalid!("nugget-mix shape must be in (0, 2], got {k}"));
                }
                Ok(KernelFamily::NuggetMix { shape: k })
            }
            _ => Err(invalid!("unknown kernel family {name}")),
        }
    }

    fn corr(&self, d: f64, range: f64) -> f64 {
        let u = d / range;
        match *self {
            KernelFamily::Exponential => exp(-u),
            KernelFamily::Gaussian => exp(-u * u),
            KernelFamily::NuggetMix { shape } => exp(-pow(u, shape)),
            KernelFamily::Matern(nu) => {
                let z = 2.0 * sqrt(nu.value()) * u;
                match nu {
                    MaternNu::Half => exp(-z),
                    MaternNu::ThreeHalves => (1.0 + z) * exp(-z),
                    MaternNu::FiveHalves => (1.0 + z + z * z / 3.0) * exp(-z),
                }
            }
        }
    }
}

/// `σ²·{(1-r)·1{s=s'} + r·corr(‖s-s'‖/ρ)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Spatial share of the variance; `1 - r` is the nugget.
    pub r: f64,
    pub range: f64,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, r: f64, range: f64, scale: f64) -> Result<Self> {
        let spec = Self { family, r, range, scale };
        spec.validate()?;
        Ok(spec)
    }

    /// The noise kernel `(1-r)1{s=s'} + r·exp(-(d/ρ)^k)` at unit scale.
    pub fn noise(r: f64, shape: f64, range: f64) -> Result<Self> {
        let family = if shape == 1.0 {
            KernelFamily::Exponential
        } else if shape == 2.0 {
            KernelFamily::Gaussian
        } else {
            KernelFamily::NuggetMix { shape }
        };
        Self::new(family, r, range, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(invalid!("nugget share r must be in [0, 1], got {}", self.r));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(invalid!("range must be positive, got {}", self.range));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid!("scale must be positive, got {}", self.scale));
        }
        if let KernelFamily::NuggetMix { shape } = self.family {
            if !(shape > 0.0 && shape <= 2.0) {
                return Err(invalid!("nugget-mix shape must be in (0, 2], got {shape}"));
            }
        }
        Ok(())
    }

    /// Same kernel with unit scale.
    pub fn correlation(&self) -> Self {
        Self { scale: 1.0, ..*self }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, dist: f64, same_point: bool) -> f64 {
        let spatial = if dist == 0.0 { 1.0 } else { self.family.corr(dist, self.range) };
        let nugget = if same_point { 1.0 - self.r } else { 0.0 };
        self.scale * (nugget + self.r * spatial)
    }
}

/// Evaluate the kernel at distance `dist`; the nugget applies only when
/// `same_point`.
pub fn kernel_eval(spec: &KernelSpec, dist: f64, same_point: bool) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(invalid!("distance must be nonnegative, got {dist}"));
    }
    Ok(spec.eval_unchecked(dist, same_point))
}

/// Dense row-major kernel matrix over the domain.
pub fn kernel_matrix(spec: &KernelSpec, domain: &SpatialDomain) -> Vec<f64> {
    let m = domain.len();
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        a[i * m + i] = spec.eval_unchecked(0.0, true);
        for j in 0..i {
            let v = spec.eval_unchecked(domain.dist(i, j), false);
            a[i * m + j] = v;
            a[j * m + i] = v;
        }
    }
    a
}

/// Anything that can report the covariance between two locations.
pub trait CovarianceSource {
    fn len(&self) -> usize;
    fn cov(&self, i: usize, j: usize) -> f64;
}

/// A kernel evaluated on a domain.
#[derive(Debug, Clone, Copy)]
pub struct KernelCovariance<'a> {
    pub spec: &'a KernelSpec,
    pub domain: &'a SpatialDomain,
}

impl CovarianceSource for KernelCovariance<'_> {
    fn len(&self) -> usize {
        self.domain.len()
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        self.spec.eval_unchecked(self.domain.dist(i, j), i == j)
    }
}

/// A dense row-major covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCovariance {
    n: usize,
    data: Vec<f64>,
}

impl DenseCovariance {
    pub fn new(data: Vec<f64>, n: usize) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidCovariance(format!("expected {} entries, got {}", n * n, data.len())));
        }
        for i in 0..n {
            for j in 0..i {
                if data[i * n + j] != data[j * n + i] {
                    return Err(Error::InvalidCovariance(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, data })
    }
}

impl CovarianceSource for DenseCovariance {
    fn len(&self) -> usize {
        self.n
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// `sd(i)·sd(j)·base(i,j)`: a correlation structure with location-specific
/// standard deviations.
#[derive(Debug, Clone)]
pub struct ScaledCovariance<S> {
    pub sd: Vec<f64>,
    pub base: S,
}

impl<S: CovarianceSource> CovarianceSource for ScaledCovariance<S> {
    fn len(&self) -> usize {
        self.sd.len()
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        self.sd[i] * self.sd[j] * self.base.cov(i, j)
    }
}

/// Per-location standard deviations of the primary and auxiliary noise and
/// their correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct StatParams {
    pub sigma: Vec<f64>,
    pub tau: Vec<f64>,
    pub rho: Vec<f64>,
}

impl StatParams {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Parameters after multiplying every covariance by `factor`, e.g.
    /// `1/n` when statistics are built from a mean of `n` replicates.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = sqrt(factor);
        Self {
            sigma: self.sigma.iter().map(|v| v * s).collect(),
            tau: self.tau.iter().map(|v| v * s).collect(),
            rho: self.rho.clone(),
        }
    }
}

/// `σ(s) = √cov(s,s)`, `τ²(s) = Σ_{v,v'∈N(s)} cov(v,v')`,
/// `ρ(s) = Σ_{v∈N(s)} cov(s,v) / (σ(s)τ(s))`, with `ρ` clamped to `[-1, 1]`.
pub fn derive_stat_params(source: &dyn CovarianceSource, neighborhoods: &NeighborhoodMap) -> Result<StatParams> {
    let m = source.len();
    if neighborhoods.len() != m {
        return Err(invalid!("{} neighbourhoods for {m} locations", neighborhoods.len()));
    }
    let mut sigma = Vec::with_capacity(m);
    let mut tau = Vec::with_capacity(m);
    let mut rho = Vec::with_capacity(m);
    for s in 0..m {
        let var = source.cov(s, s);
        if !(var > 0.0) {
            return Err(Error::InvalidCovariance(format!("nonpositive variance at location {s}")));
        }
        let nb = neighborhoods.neighbors(s);
        let mut tau2 = 0.0;
        let mut cross = 0.0;
        for &v in nb {
            cross += source.cov(s, v);
            for &w in nb {
                tau2 += source.cov(v, w);
            }
        }
        if !(tau2 > 0.0) {
            return Err(Error::InvalidCovariance(format!("nonpositive neighbourhood variance at location {s}")));
        }
        let (sg, tu) = (sqrt(var), sqrt(tau2));
        sigma.push(sg);
        tau.push(tu);
        rho.push((cross / (sg * tu)).clamp(-1.0, 1.0));
    }
    Ok(StatParams { sigma, tau, rho })
}

/// Replicated observations: `n` rows, each holding one value per location.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl Replicates {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::Data(format!("replicate {i} has {} values, expected {m}", r.len())));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("replicate {i} has a non-finite value")));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n, m, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    /// Per-location mean over replicates.
    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.m];
        for i in 0..self.n {
            for (a, b) in mu.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        for a in &mut mu {
            *a /= self.n as f64;
        }
        mu
    }

    fn centered(&self) -> Vec<Vec<f64>> {
        let mu = self.mean();
        (0..self.n).map(|i| self.row(i).iter().zip(&mu).map(|(x, u)| x - u).collect()).collect()
    }
}

/// Knobs for [`fit_covariance_mle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Coarse grid sizes over the nugget share and the log range used to
    /// seed the simplex searches.
    pub grid_r: usize,
    pub grid_range: usize,
    /// Number of simplex searches, started from the best distinct grid cells.
    pub restarts: usize,
    pub max_evals: usize,
    /// Range bounds; `None` derives them from the domain (a tenth of the
    /// smallest spacing up to twice the diameter).
    pub range_bounds: Option<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { grid_r: 5, grid_range: 6, restarts: 2, max_evals: 150, range_bounds: None }
    }
}

const JITTERS: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

fn logit(p: f64) -> f64 {
    log(p / (1.0 - p))
}

struct Profile<'a> {
    family: KernelFamily,
    dists: Vec<f64>,
    m: usize,
    centered: &'a [Vec<f64>],
    dof: f64,
}

impl Profile<'_> {
    fn factor(&self, r: f64, range: f64) -> Option<Cholesky> {
        let m = self.m;
        let spec = KernelSpec { family: self.family, r, range, scale: 1.0 };
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            a[i * m + i] = 1.0;
            for j in 0..i {
                let v = spec.eval_unchecked(self.dists[i * m + j], false);
                a[i * m + j] = v;
                a[j * m + i] = v;
            }
        }
        cholesky_with_jitter(&a, m, &JITTERS)
    }

    /// Objective with the scale profiled out, plus the optimal scale.
    fn eval(&self, r: f64, range: f64) -> Option<(f64, f64)> {
        let chol = self.factor(r, range)?;
        let q: f64 = self.centered.iter().map(|x| chol.quad_form(x)).sum();
        if !(q > 0.0) {
            return None;
        }
        let mf = self.m as f64;
        let scale = q / (self.dof * mf);
        Some((self.dof * (mf * log(scale) + chol.log_det()) + q / scale, scale))
    }
}

/// `(n-1)·log det Σ + Σᵢ (Xᵢ - X̄)ᵀ Σ⁻¹ (Xᵢ - X̄)` with `Σ` the kernel matrix
/// of `spec`. The mean is profiled out by the replicate average, which uses
/// up one replicate; the minimizer in the correlation parameters is the same
/// as with weight `n`, while the scale minimizer is unbiased.
pub fn neg_log_likelihood(spec: &KernelSpec, obs: &Replicates, domain: &SpatialDomain) -> Result<f64> {
    spec.validate()?;
    if obs.m() != domain.len() {
        return Err(invalid!("{} observation columns for {} locations", obs.m(), domain.len()));
    }
    if obs.n() < 2 {
        return Err(invalid!("need at least 2 replicates, got {}", obs.n()));
    }
    let a = kernel_matrix(spec, domain);
    let chol = Cholesky::new(&a, obs.m())
        .ok_or_else(|| Error::InvalidCovariance("kernel matrix is not positive definite".into()))?;
    let q: f64 = obs.centered().iter().map(|x| chol.quad_form(x)).sum();
    Ok((obs.n() - 1) as f64 * chol.log_det() + q)
}

fn range_bounds(domain: &SpatialDomain) -> (f64, f64) {
    let m = domain.len();
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for i in 0..m {
        for j in 0..i {
            let d = domain.dist(i, j);
            if d > 0.0 {
                dmin = dmin.min(d);
            }
            dmax = dmax.max(d);
        }
    }
    if !dmin.is_finite() {
        return (1e-3, 1.0);
    }
    (0.1 * dmin, 2.0 * dmax)
}

/// Maximum likelihood fit of `(r, ρ, σ²)` for the given family from `n ≥ 2`
/// replicates.
pub fn fit_covariance_mle(
    obs: &Replicates,
    domain: &SpatialDomain,
    family: KernelFamily,
    opts: FitOptions,
) -> Result<KernelSpec> {
    if obs.n() < 2 {
        return Err(invalid!("need at least 2 replicates, got {}", obs.n()));
    }
    if obs.m() != domain.len() {
        return Err(invalid!("{} observation columns for {} locations", obs.m(), domain.len()));
    }
    if obs.m() < 2 {
        return Err(invalid!("need at least 2 locations"));
    }
    let centered = obs.centered();
    let total: f64 = centered.iter().flatten().map(|v| v * v).sum();
    if !(total > 0.0) {
        return Err(Error::FitFailed("degenerate variance: observations do not vary".into()));
    }
    let m = obs.m();
    let mut dists = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            dists[i * m + j] = domain.dist(i, j);
        }
    }
    let profile = Profile { family, dists, m, centered: &centered, dof: (obs.n() - 1) as f64 };
    let (lo, hi) = opts.range_bounds.unwrap_or_else(|| range_bounds(domain));
    let (llo, lhi) = (log(lo), log(hi));
    let decode = |x: &[f64]| (sigmoid(x[0]), exp(llo + (lhi - llo) * sigmoid(x[1])));

    let mut seeds: Vec<(f64, [f64; 2])> = Vec::new();
    let gr = opts.grid_r.max(1);
    let gs = opts.grid_range.max(1);
    for a in 0..gr {
        let r = (a as f64 + 0.5) / gr as f64;
        for b in 0..gs {
            let u = (b as f64 + 0.5) / gs as f64;
            let x = [logit(r), logit(u)];
            let (rr, rg) = decode(&x);
            if let Some((f, _)) = profile.eval(rr, rg) {
                seeds.push((f, x));
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::FitFailed("likelihood undefined on every starting point".into()));
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0));

    let step = [1.0, 4.0 / gs as f64 + 0.5];
    let mut best: Option<(f64, [f64; 2])> = None;
    for (f0, x0) in seeds.iter().take(opts.restarts.max(1)) {
        let mut obj = |x: &[f64]| {
            let (r, range) = decode(x);
            profile.eval(r, range).map_or(f64::INFINITY, |v| v.0)
        };
        let res = nelder_mead(
            &mut obj,
            x0,
            &step,
            NelderMeadOptions { max_evals: opts.max_evals, f_tol: 1e-10, x_tol: 1e-6 },
        );
        let cand = if res.f <= *f0 { (res.f, [res.x[0], res.x[1]]) } else { (*f0, *x0) };
        if best.map_or(true, |b| cand.0 < b.0) {
            best = Some(cand);
        }
    }
    let (_, x) = best.ok_or_else(|| Error::FitFailed("no restart converged".into()))?;
    let (r, range) = decode(&x);
    let (_, scale) = profile
        .eval(r, range)
        .ok_or_else(|| Error::FitFailed("singular covariance at the optimum".into()))?;
    KernelSpec::new(family, r, range, scale).map_err(|e| Error::FitFailed(format!("{e}")))
}

/// Fit a kernel to per-location residual series, treating time points as
/// replicates. `residuals[s]` holds the series of location `s`.
pub fn fit_residual_kernel(
    residuals: &[Vec<f64>],
    domain: &SpatialDomain,
    family: KernelFamily,
    opts: FitOptions,
) -> Result<KernelSpec> {
    let m = residuals.len();
    let t = residuals.first().map_or(0, Vec::len);
    if residuals.iter().any(|r| r.len() != t) {
        return Err(Error::Data("residual series have different lengths".into()));
    }
    let rows: Vec<Vec<f64>> = (0..t).map(|k| (0..m).map(|s| residuals[s][k]).collect()).collect();
    fit_covariance_mle(&Replicates::new(&rows)?, domain, family, opts)
}
