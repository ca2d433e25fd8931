//! Simulation setups, Gaussian-process sampling, error metrics and a
//! sequential replication driver.
//!
//! Setups I–III live on `m` evenly spaced points of `[0, 30]` and are
//! analysed with the known noise kernel. Setups IV and V use a square grid
//! on the unit square with three replicates per location and an estimated
//! kernel. The ozone setup simulates twelve annual values per station from a
//! frozen slope field and tests `H1: β(s) < -β0` for several `β0`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covmodel::{fit_covariance_mle, fit_residual_kernel, kernel_matrix, FitOptions, KernelFamily, KernelSpec, Replicates};
use crate::error::{invalid, Error, Result};
use crate::geometry::SpatialDomain;
use crate::linalg::{cholesky_with_jitter, Cholesky};
use crate::pipeline::{prepare_regression, prepare_with_kernel, region_groups, run_procedure, AnalysisConfig, NeighborChoice, Procedure};
use crate::statbuild::{ols_fit, standardized_residuals, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Setup {
    I,
    II,
    III,
    IV,
    V,
    Ozone,
}

impl Setup {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Setup::I,
            "ii" | "2" => Setup::II,
            "iii" | "3" => Setup::III,
            "iv" | "4" => Setup::IV,
            "v" | "5" => Setup::V,
            "ozone" => Setup::Ozone,
            _ => return Err(invalid!("unknown setup '{s}'")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Setup::I => "I",
            Setup::II => "II",
            Setup::III => "III",
            Setup::IV => "IV",
            Setup::V => "V",
            Setup::Ozone => "ozone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sparsity {
    Sparse,
    Medium,
    Dense,
}

impl Sparsity {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sparse" => Sparsity::Sparse,
            "medium" => Sparsity::Medium,
            "dense" => Sparsity::Dense,
            _ => return Err(invalid!("unknown sparsity '{s}'")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Sparsity::Sparse => "sparse",
            Sparsity::Medium => "medium",
            Sparsity::Dense => "dense",
        }
    }

    /// Bump centres on `[0, 30]` for the smooth signal profiles.
    pub fn bump_centres(self) -> &'static [f64] {
        match self {
            Sparsity::Sparse => &[15.0],
            Sparsity::Medium => &[5.0, 15.0, 25.0],
            Sparsity::Dense => &[3.0, 8.0, 13.0, 18.0, 23.0, 28.0],
        }
    }

    /// Mean of the Setup III signal process.
    pub fn gp_mean(self) -> f64 {
        match self {
            Sparsity::Sparse => -2.5,
            Sparsity::Medium => -2.0,
            Sparsity::Dense => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NoiseLevel {
    Weak,
    Medium,
    Strong,
}

impl NoiseLevel {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "weak" => NoiseLevel::Weak,
            "medium" => NoiseLevel::Medium,
            "strong" => NoiseLevel::Strong,
            _ => return Err(invalid!("unknown noise level '{s}'")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::Weak => "weak",
            NoiseLevel::Medium => "medium",
            NoiseLevel::Strong => "strong",
        }
    }

    /// `(r, k, ρ_ε)`.
    pub fn triple(self) -> (f64, f64, f64) {
        match self {
            NoiseLevel::Weak => (0.5, 1.0, 0.05),
            NoiseLevel::Medium => (0.8, 1.0, 0.1),
            NoiseLevel::Strong => (0.6, 2.0, 0.2),
        }
    }

    pub fn kernel(self) -> KernelSpec {
        let (r, k, rho) = self.triple();
        KernelSpec::noise(r, k, rho).expect("noise triples are valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetupConfig {
    pub setup: Setup,
    pub sparsity: Sparsity,
    pub gamma: f64,
    pub noise: NoiseLevel,
    /// Locations; a perfect square for Setups IV and V, stations for ozone.
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
    /// Trend margins tested in the ozone setup.
    pub beta0: Vec<f64>,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            setup: Setup::II,
            sparsity: Sparsity::Medium,
            gamma: 1.5,
            noise: NoiseLevel::Weak,
            m: 900,
            reps: 100,
            seed: 0,
            beta0: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl SetupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid!("gamma must be nonnegative, got {}", self.gamma));
        }
        if self.reps == 0 {
            return Err(invalid!("reps must be positive"));
        }
        match self.setup {
            Setup::IV | Setup::V => {
                let side = grid_side(self.m);
                if side * side != self.m || side < 3 {
                    return Err(invalid!("setups IV and V need a square grid, got m = {}", self.m));
                }
            }
            Setup::Ozone => {
                if self.m < 10 {
                    return Err(invalid!("ozone setup needs at least 10 stations, got {}", self.m));
                }
                if self.beta0.is_empty() || self.beta0.iter().any(|b| !b.is_finite()) {
                    return Err(invalid!("ozone setup needs finite beta0 values"));
                }
            }
            _ => {
                if self.m < 10 {
                    return Err(invalid!("need at least 10 locations, got {}", self.m));
                }
            }
        }
        Ok(())
    }

    /// Analysis settings used by the replication driver: two nearest
    /// neighbours for ozone and four elsewhere.
    pub fn default_analysis(&self) -> AnalysisConfig {
        let kappa = if self.setup == Setup::Ozone { 2 } else { 4 };
        AnalysisConfig { neighbors: NeighborChoice::Knn(kappa), ..AnalysisConfig::default() }
    }
}

fn grid_side(m: usize) -> usize {
    let mut s = sqrt(m as f64) as usize;
    while (s + 1) * (s + 1) <= m {
        s += 1;
    }
    while s * s > m {
        s -= 1;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mu: Vec<f64>,
    /// `mu > 0`.
    pub theta: Vec<bool>,
}

impl GroundTruth {
    pub fn new(mu: Vec<f64>) -> Self {
        let theta = mu.iter().map(|&v| v > 0.0).collect();
        Self { mu, theta }
    }

    /// Truth for the means `mu + delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self::new(self.mu.iter().map(|v| v + delta).collect())
    }

    pub fn n_signals(&self) -> usize {
        self.theta.iter().filter(|&&t| t).count()
    }
}

/// Draws from a zero-mean Gaussian process on a fixed domain. The Cholesky
/// factor is computed once.
#[derive(Debug, Clone)]
pub struct GpSampler {
    chol: Cholesky,
}

impl GpSampler {
    pub fn new(kernel: &KernelSpec, domain: &SpatialDomain) -> Result<Self> {
        kernel.validate()?;
        let m = domain.len();
        if m == 0 {
            return Err(invalid!("empty domain"));
        }
        let a = kernel_matrix(kernel, domain);
        let chol = cholesky_with_jitter(&a, m, &[1e-10])
            .ok_or_else(|| Error::Generation("kernel matrix is not positive definite".into()))?;
        Ok(Self { chol })
    }

    pub fn len(&self) -> usize {
        self.chol.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.chol.dim() == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.chol.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.chol.mul_lower(&z)
    }
}

/// One draw seeded with `seed`.
pub fn sample_gp(kernel: &KernelSpec, domain: &SpatialDomain, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GpSampler::new(kernel, domain)?.sample(&mut rng))
}

/// Cubic B-spline bump of half-width 1 centred at `c`, with peak 1.
fn bump(s: f64, c: f64) -> f64 {
    let u = (2.0 * (s - c)).abs();
    let n = if u < 1.0 {
        2.0 / 3.0 - u * u + u * u * u / 2.0
    } else if u < 2.0 {
        (2.0 - u) * (2.0 - u) * (2.0 - u) / 6.0
    } else {
        0.0
    };
    1.5 * n
}

/// Smooth signal profile at `s ∈ [0, 30]`; values in `[0, 1]`.
pub fn bump_profile(sparsity: Sparsity, s: f64) -> f64 {
    sparsity.bump_centres().iter().map(|&c| bump(s, c)).sum::<f64>().min(1.0)
}

/// Non-null probability of the clustered signal on the unit square.
pub fn cluster_probability(s1: f64, s2: f64) -> f64 {
    if (s1 - 0.5) * (s1 - 0.5) + (s2 - 0.5) * (s2 - 0.5) <= 0.0625 {
        0.9
    } else {
        0.01
    }
}

/// Frozen ingredients of the ozone generator.
#[derive(Debug, Clone, PartialEq)]
pub struct OzoneField {
    pub domain: SpatialDomain,
    pub mu0: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub kernel: KernelSpec,
    pub times: Vec<f64>,
}

impl OzoneField {
    /// `m` stations scattered over a 58 × 25 rectangle with a smooth slope
    /// field centred near `-0.25` and station noise levels in `[2, 4]`.
    pub fn synthetic(m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..m).map(|i| format!("st{i:04}")).collect();
        let coords: Vec<Vec<f64>> =
            (0..m).map(|_| vec![rng.random_range(0.0..58.0), rng.random_range(0.0..25.0)]).collect();
        let domain = SpatialDomain::new(ids, coords)?;
        let field = KernelSpec::new(KernelFamily::Gaussian, 1.0, 10.0, 1.0)?;
        let g = GpSampler::new(&field, &domain)?.sample(&mut rng);
        let beta = g.iter().map(|v| -0.25 + 0.3 * v).collect();
        let mu0 = (0..m).map(|_| rng.random_range(35.0..45.0)).collect();
        let sigma = (0..m).map(|_| rng.random_range(2.0..4.0)).collect();
        Ok(Self {
            domain,
            mu0,
            beta,
            sigma,
            kernel: KernelSpec::noise(0.8, 1.0, 4.0)?,
            times: (2010..=2021).map(f64::from).collect(),
        })
    }
}

/// Seed of the frozen ozone field.
pub const OZONE_FIELD_SEED: u64 = 2010;

#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    /// One value per location.
    Direct(Vec<f64>),
    /// `rows[i][s]`: replicate `i` at location `s`.
    Replicated(Vec<Vec<f64>>),
    /// Per-location time series.
    Panel(Panel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub domain: SpatialDomain,
    pub observations: Observations,
    /// For ozone, the truth at `β0 = 0`; use [`GroundTruth::shifted`] by
    /// `-β0`.
    pub truth: GroundTruth,
}

/// Everything about a configuration that does not change across replicates.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub cfg: SetupConfig,
    pub domain: SpatialDomain,
    noise: GpSampler,
    signal: Option<GpSampler>,
    ozone: Option<OzoneField>,
    /// Groups for the weighted procedures.
    pub groups: Vec<usize>,
    pub fit_options: FitOptions,
}

const REPLICATES_2D: usize = 3;

impl SimContext {
    pub fn new(cfg: &SetupConfig) -> Result<Self> {
        if cfg.setup == Setup::Ozone {
            return Self::with_ozone_field(cfg, OzoneField::synthetic(cfg.m, OZONE_FIELD_SEED)?);
        }
        cfg.validate()?;
        let domain = match cfg.setup {
            Setup::IV | Setup::V => SpatialDomain::grid_2d(grid_side(cfg.m), 1.0),
            _ => SpatialDomain::lattice_1d(cfg.m, 30.0 / (cfg.m - 1) as f64),
        };
        let noise = GpSampler::new(&cfg.noise.kernel(), &domain)?;
        let signal = if cfg.setup == Setup::III {
            Some(GpSampler::new(&KernelSpec::new(KernelFamily::Exponential, 1.0, 0.3, 3.0)?, &domain)?)
        } else {
            None
        };
        let bins = if domain.dim() == 1 { 10 } else { 3 };
        let groups = region_groups(&domain, bins);
        Ok(Self { cfg: cfg.clone(), domain, noise, signal, ozone: None, groups, fit_options: FitOptions::default() })
    }

    /// Ozone context with a caller-supplied field; `cfg.m` is ignored.
    pub fn with_ozone_field(cfg: &SetupConfig, field: OzoneField) -> Result<Self> {
        let cfg = SetupConfig { setup: Setup::Ozone, m: field.domain.len(), ..cfg.clone() };
        cfg.validate()?;
        let noise = GpSampler::new(&field.kernel, &field.domain)?;
        let groups = region_groups(&field.domain, 3);
        Ok(Self {
            domain: field.domain.clone(),
            cfg,
            noise,
            signal: None,
            ozone: Some(field),
            groups,
            fit_options: FitOptions::default(),
        })
    }

    pub fn ozone_field(&self) -> Option<&OzoneField> {
        self.ozone.as_ref()
    }

    /// Replicate `rep`, drawn from the stream seeded with `seed ⊕ rep`.
    pub fn generate(&self, rep: usize) -> Result<Generated> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ rep as u64);
        let cfg = &self.cfg;
        let m = self.domain.len();
        let gamma = cfg.gamma;
        let coord = |s: usize| self.domain.coords(s);
        let (mu, observations) = match cfg.setup {
            Setup::I => {
                let mu: Vec<f64> = (0..m).map(|s| gamma * bump_profile(cfg.sparsity, coord(s)[0])).collect();
                let x = add(&mu, &self.noise.sample(&mut rng));
                (mu, Observations::Direct(x))
            }
            Setup::II => {
                let mu: Vec<f64> = (0..m)
                    .map(|s| {
                        let p = bump_profile(cfg.sparsity, coord(s)[0]);
                        if rng.random::<f64>() < p {
                            gamma
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let x = add(&mu, &self.noise.sample(&mut rng));
                (mu, Observations::Direct(x))
            }
            Setup::III => {
                let g = self.signal.as_ref().expect("setup III has a signal sampler").sample(&mut rng);
                let mean = cfg.sparsity.gp_mean();
                let mu: Vec<f64> = g.iter().map(|v| gamma * (mean + v)).collect();
                let x = add(&mu, &self.noise.sample(&mut rng));
                (mu, Observations::Direct(x))
            }
            Setup::IV | Setup::V => {
                let smooth = |s: usize| {
                    let c = coord(s);
                    let shape = if cfg.setup == Setup::IV { cfg.sparsity } else { Sparsity::Dense };
                    bump_profile(shape, 30.0 * c[0]) * bump_profile(shape, 30.0 * c[1])
                };
                let mut cluster = || -> Vec<f64> {
                    (0..m)
                        .map(|s| {
                            let c = coord(s);
                            if rng.random::<f64>() < cluster_probability(c[0], c[1]) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                };
                let mu0: Vec<f64> = match (cfg.setup, cfg.sparsity) {
                    (Setup::IV, _) | (Setup::V, Sparsity::Medium) => (0..m).map(smooth).collect(),
                    (_, Sparsity::Sparse) => cluster(),
                    _ => {
                        let cl = cluster();
                        (0..m).map(|s| smooth(s) + cl[s]).collect()
                    }
                };
                let mu: Vec<f64> = mu0.iter().map(|v| gamma * v).collect();
                let rows = (0..REPLICATES_2D).map(|_| add(&mu, &self.noise.sample(&mut rng))).collect();
                (mu, Observations::Replicated(rows))
            }
            Setup::Ozone => {
                let f = self.ozone.as_ref().expect("ozone context has a field");
                let mut values = vec![Vec::with_capacity(f.times.len()); m];
                for &t in &f.times {
                    let e = self.noise.sample(&mut rng);
                    for s in 0..m {
                        values[s].push(f.mu0[s] + f.beta[s] * t + f.sigma[s] * e[s]);
                    }
                }
                let mu = f.beta.iter().map(|b| -b).collect();
                (mu, Observations::Panel(Panel { times: f.times.clone(), values }))
            }
        };
        Ok(Generated { domain: self.domain.clone(), observations, truth: GroundTruth::new(mu) })
    }

    /// Generate replicate `rep` and run every procedure on it.
    pub fn run_replicate(&self, rep: usize, procedures: &[Procedure], analysis: &AnalysisConfig) -> Result<ReplicateRecord> {
        analysis.validate()?;
        let gen = self.generate(rep)?;
        let mut outcomes = Vec::new();
        let mut run_all = |prepared: &crate::pipeline::Prepared, truth: &GroundTruth, beta0: Option<f64>| -> Result<()> {
            for &p in procedures {
                let out = run_procedure(p, prepared, Some(&self.groups), analysis)?;
                let metrics = evaluate(&out.rejected, truth);
                outcomes.push(ProcedureRecord {
                    procedure: p,
                    beta0,
                    n_rejected: out.rejected.len(),
                    matched_one_d: out.matched_one_d,
                    fdp: metrics.fdp,
                    power: metrics.power,
                });
            }
            Ok(())
        };
        match &gen.observations {
            Observations::Direct(x) => {
                let prepared = prepare_with_kernel(&self.domain, x, &self.cfg.noise.kernel(), analysis)?;
                run_all(&prepared, &gen.truth, None)?;
            }
            Observations::Replicated(rows) => {
                let reps = Replicates::new(rows)?;
                let fit = fit_covariance_mle(&reps, &self.domain, KernelFamily::Exponential, self.fit_options)?;
                let of_mean = KernelSpec { scale: fit.scale / reps.n() as f64, ..fit };
                let prepared = prepare_with_kernel(&self.domain, &reps.mean(), &of_mean, analysis)?;
                run_all(&prepared, &gen.truth, None)?;
            }
            Observations::Panel(panel) => {
                let fit = ols_fit(panel)?;
                let std_res = standardized_residuals(&fit)?;
                let kernel = fit_residual_kernel(&std_res, &self.domain, KernelFamily::Exponential, self.fit_options)?;
                for &b0 in &self.cfg.beta0 {
                    let prepared = prepare_regression(&self.domain, &fit, &kernel, b0, analysis)?;
                    run_all(&prepared, &gen.truth.shifted(-b0), Some(b0))?;
                }
            }
        }
        Ok(ReplicateRecord { rep, outcomes })
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `generate_setup` for a single replicate.
pub fn generate_setup(cfg: &SetupConfig, rep: usize) -> Result<Generated> {
    SimContext::new(cfg)?.generate(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub fdp: f64,
    /// `None` when there are no signals.
    pub power: Option<f64>,
}

/// False discovery proportion (with the `1 ∨ R` convention) and power.
pub fn evaluate(rejected: &[usize], truth: &GroundTruth) -> Metrics {
    let r = rejected.len();
    let true_hits = rejected.iter().filter(|&&s| truth.theta.get(s).copied().unwrap_or(false)).count();
    let signals = truth.n_signals();
    Metrics {
        fdp: (r - true_hits) as f64 / r.max(1) as f64,
        power: if signals == 0 { None } else { Some(true_hits as f64 / signals as f64) },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureRecord {
    pub procedure: Procedure,
    pub beta0: Option<f64>,
    pub n_rejected: usize,
    pub matched_one_d: Option<usize>,
    pub fdp: f64,
    pub power: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub outcomes: Vec<ProcedureRecord>,
}

/// Mean and standard error of one metric for one procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub procedure: Procedure,
    pub beta0: Option<f64>,
    pub metric: &'static str,
    pub mean: f64,
    pub se: f64,
    /// Replicates contributing; power skips those without signals.
    pub n: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, sqrt(var / n as f64))
}

/// Summaries of `fdp`, `power` and `rejections` per procedure and `β0`, in
/// the order first seen.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Procedure, Option<u64>)> = Vec::new();
    let mut buckets: BTreeMap<(Procedure, Option<u64>), Vec<&ProcedureRecord>> = BTreeMap::new();
    for rec in records {
        for o in &rec.outcomes {
            let key = (o.procedure, o.beta0.map(f64::to_bits));
            let entry = buckets.entry(key).or_default();
            if entry.is_empty() {
                keys.push(key);
            }
            entry.push(o);
        }
    }
    let mut rows = Vec::new();
    for key in keys {
        let items = &buckets[&key];
        let beta0 = key.1.map(f64::from_bits);
        let fdp: Vec<f64> = items.iter().map(|o| o.fdp).collect();
        let power: Vec<f64> = items.iter().filter_map(|o| o.power).collect();
        let rej: Vec<f64> = items.iter().map(|o| o.n_rejected as f64).collect();
        for (metric, vals) in [("fdp", &fdp), ("power", &power), ("rejections", &rej)] {
            let (mean, se) = mean_se(vals);
            rows.push(SummaryRow { procedure: key.0, beta0, metric, mean, se, n: vals.len() });
        }
    }
    rows
}

/// Fails unless at least 90% of `total` replicates succeeded.
pub fn check_success(succeeded: usize, total: usize) -> Result<()> {
    if succeeded * 10 < total * 9 {
        return Err(Error::Generation(format!("only {succeeded} of {total} replicates succeeded")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationReport {
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<(usize, Error)>,
    pub summary: Vec<SummaryRow>,
}

/// Run all replicates in order. Individual failures are recorded.
pub fn run_replications(cfg: &SetupConfig, procedures: &[Procedure], analysis: &AnalysisConfig) -> Result<ReplicationReport> {
    let ctx = SimContext::new(cfg)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for rep in 0..cfg.reps {
        match ctx.run_replicate(rep, procedures, analysis) {
            Ok(r) => records.push(r),
            Err(e) => failures.push((rep, e)),
        }
    }
    check_success(records.len(), cfg.reps)?;
    let summary = summarize(&records);
    Ok(ReplicationReport { records, failures, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::kernel_eval;
    use crate::gaussnum::std_normal_sf;

    #[test]
    fn noise_triples() {
        assert_eq!(NoiseLevel::Weak.triple(), (0.5, 1.0, 0.05));
        assert_eq!(NoiseLevel::Medium.triple(), (0.8, 1.0, 0.1));
        assert_eq!(NoiseLevel::Strong.triple(), (0.6, 2.0, 0.2));
        assert_eq!(NoiseLevel::Strong.kernel().family, KernelFamily::Gaussian);
    }

    #[test]
    fn nugget_only_covariance_is_identity() {
        let d = SpatialDomain::lattice_1d(4, 1.0);
        let k = KernelSpec::noise(0.0, 1.0, 1.0).unwrap();
        let s = GpSampler::new(&k, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5000;
        let mut c = [[0.0; 4]; 4];
        for _ in 0..n {
            let x = s.sample(&mut rng);
            for i in 0..4 {
                for j in 0..4 {
                    c[i][j] += x[i] * x[j] / n as f64;
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c[i][j] - want).abs() <= 0.05, "{i},{j}: {}", c[i][j]);
            }
        }
    }

    #[test]
    fn single_location_draw_is_scalar_normal() {
        let d = SpatialDomain::lattice_1d(1, 1.0);
        let k = KernelSpec::new(KernelFamily::Exponential, 0.5, 1.0, 4.0).unwrap();
        let x = sample_gp(&k, &d, 3).unwrap();
        assert_eq!(x.len(), 1);
        let again = sample_gp(&k, &d, 3).unwrap();
        assert_eq!(x, again);
        let s = GpSampler::new(&k, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws: Vec<f64> = (0..20000).map(|_| s.sample(&mut rng)[0]).collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64;
        assert!((var - 4.0).abs() < 0.4);
    }

    #[test]
    fn exponential_correlation_at_range() {
        // two points exactly ρ_ε apart under the medium kernel
        let k = NoiseLevel::Medium.kernel();
        let d = SpatialDomain::lattice_1d(2, 0.1);
        let s = GpSampler::new(&k, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20000;
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let v = s.sample(&mut rng);
            xy += v[0] * v[1];
            xx += v[0] * v[0];
            yy += v[1] * v[1];
        }
        let corr = xy / (xx * yy).sqrt();
        let want = kernel_eval(&k, 0.1, false).unwrap();
        assert!((want - 0.8 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((corr - want).abs() <= 0.05, "{corr} vs {want}");
    }

    #[test]
    fn noise_variance_matches_kernel() {
        let cfg = SetupConfig { setup: Setup::I, gamma: 0.0, m: 200, noise: NoiseLevel::Strong, ..Default::default() };
        let ctx = SimContext::new(&cfg).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for rep in 0..100 {
            let Observations::Direct(x) = ctx.generate(rep).unwrap().observations else { unreachable!() };
            sum += x.iter().map(|v| v * v).sum::<f64>();
            n += x.len() as f64;
        }
        assert!((sum / n - 1.0).abs() <= 0.1);
    }

    #[test]
    fn gamma_zero_is_all_null() {
        for setup in [Setup::I, Setup::II, Setup::III] {
            let cfg = SetupConfig { setup, gamma: 0.0, m: 100, ..Default::default() };
            let g = generate_setup(&cfg, 0).unwrap();
            assert_eq!(g.truth.n_signals(), 0);
        }
        let cfg = SetupConfig { setup: Setup::V, sparsity: Sparsity::Dense, gamma: 0.0, m: 100, ..Default::default() };
        assert_eq!(generate_setup(&cfg, 0).unwrap().truth.n_signals(), 0);
    }

    #[test]
    fn setup_three_non_null_fraction() {
        let cfg = SetupConfig { setup: Setup::III, sparsity: Sparsity::Dense, gamma: 2.0, m: 300, ..Default::default() };
        let ctx = SimContext::new(&cfg).unwrap();
        let reps = 100;
        let frac: f64 = (0..reps)
            .map(|r| {
                let g = ctx.generate(r).unwrap();
                g.truth.n_signals() as f64 / 300.0
            })
            .sum::<f64>()
            / reps as f64;
        let want = std_normal_sf(1.0 / 3f64.sqrt());
        assert!((want - 0.282).abs() < 1e-3);
        assert!((frac - want).abs() <= 0.05, "{frac} vs {want}");
    }

    #[test]
    fn setup_five_cluster_rates() {
        let cfg = SetupConfig { setup: Setup::V, sparsity: Sparsity::Sparse, gamma: 1.0, m: 900, ..Default::default() };
        let ctx = SimContext::new(&cfg).unwrap();
        let inside: Vec<usize> = (0..900)
            .filter(|&s| {
                let c = ctx.domain.coords(s);
                cluster_probability(c[0], c[1]) > 0.5
            })
            .collect();
        assert!(!inside.is_empty());
        let (mut hit_in, mut hit_out) = (0usize, 0usize);
        let reps = 20;
        for r in 0..reps {
            let g = ctx.generate(r).unwrap();
            for s in 0..900 {
                if g.truth.theta[s] {
                    if inside.contains(&s) {
                        hit_in += 1;
                    } else {
                        hit_out += 1;
                    }
                }
            }
        }
        let f_in = hit_in as f64 / (reps * inside.len()) as f64;
        let f_out = hit_out as f64 / (reps * (900 - inside.len())) as f64;
        assert!((f_in - 0.9).abs() <= 0.03, "{f_in}");
        assert!((f_out - 0.01).abs() <= 0.03, "{f_out}");
    }

    #[test]
    fn bump_profiles() {
        assert!((bump_profile(Sparsity::Sparse, 15.0) - 1.0).abs() < 1e-15);
        assert_eq!(bump_profile(Sparsity::Sparse, 13.9), 0.0);
        assert_eq!(bump_profile(Sparsity::Medium, 10.0), 0.0);
        assert!(bump_profile(Sparsity::Dense, 28.5) > 0.0);
    }

    #[test]
    fn evaluate_examples() {
        let truth = GroundTruth::new(vec![0.0; 5]);
        assert_eq!(evaluate(&[], &truth), Metrics { fdp: 0.0, power: None });
        assert_eq!(evaluate(&[1, 2], &truth), Metrics { fdp: 1.0, power: None });
        let mut mu = vec![0.0; 30];
        for v in mu.iter_mut().take(20) {
            *v = 1.0;
        }
        let truth = GroundTruth::new(mu);
        let rej: Vec<usize> = (0..8).chain([25, 26]).collect();
        let m = evaluate(&rej, &truth);
        assert!((m.fdp - 0.2).abs() < 1e-15);
        assert!((m.power.unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let mu = vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0];
        let truth = GroundTruth::new(mu.clone());
        let rej = [0, 1, 4];
        let base = evaluate(&rej, &truth);
        let perm = [5, 3, 1, 0, 2, 4];
        let mu_p: Vec<f64> = perm.iter().map(|&i| mu[i]).collect();
        let inv = |s: usize| perm.iter().position(|&p| p == s).unwrap();
        let rej_p: Vec<usize> = rej.iter().map(|&s| inv(s)).collect();
        assert_eq!(evaluate(&rej_p, &GroundTruth::new(mu_p)), base);
    }

    #[test]
    fn replications_are_deterministic() {
        let cfg = SetupConfig { setup: Setup::II, m: 120, reps: 3, seed: 7, ..Default::default() };
        let procs = [Procedure::St, Procedure::TwoDSt, Procedure::Sa];
        let a = run_replications(&cfg, &procs, &cfg.default_analysis()).unwrap();
        let b = run_replications(&cfg, &procs, &cfg.default_analysis()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary.len(), 9);
        for rec in &a.records {
            for o in rec.outcomes.iter().filter(|o| o.procedure == Procedure::TwoDSt) {
                assert!(o.n_rejected >= o.matched_one_d.unwrap());
            }
        }
    }

    #[test]
    fn success_threshold() {
        assert!(check_success(90, 100).is_ok());
        assert!(check_success(89, 100).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SetupConfig { setup: Setup::IV, m: 899, ..Default::default() }.validate().is_err());
        assert!(SetupConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(Setup::parse("vi").is_err());
        assert_eq!(Setup::parse("III").unwrap(), Setup::III);
    }

    #[test]
    fn ozone_truth_shifts_with_margin() {
        let cfg = SetupConfig { setup: Setup::Ozone, m: 40, ..Default::default() };
        let ctx = SimContext::new(&cfg).unwrap();
        let g = ctx.generate(0).unwrap();
        let f = ctx.ozone_field().unwrap();
        let t = g.truth.shifted(-0.3);
        for s in 0..40 {
            assert_eq!(t.theta[s], f.beta[s] < -0.3);
        }
        let Observations::Panel(p) = g.observations else { panic!() };
        assert_eq!(p.values[0].len(), 12);
    }
}
