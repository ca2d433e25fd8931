//! The `smt2d` command line: `simulate`, `analyze` and `fit-cov`.
//!
//! Every flag can also be given in a flat `key = value` file passed with
//! `--config`; flags win over the file, the file wins over built-in
//! defaults. Exit codes: 0 success, 1 runtime or numerical failure, 2 usage
//! or input validation error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use smt2d_core::covmodel::{fit_covariance_mle, fit_residual_kernel, FitOptions, KernelFamily, KernelSpec, Replicates};
use smt2d_core::geometry::AdaptiveRule;
use smt2d_core::pipeline::{
    parse_procedures, prepare_regression, prepare_with_kernel, region_groups, run_procedure, AnalysisConfig,
    NeighborChoice, Prepared, Procedure,
};
use smt2d_core::simlab::{NoiseLevel, Setup, SetupConfig, Sparsity};
use smt2d_core::statbuild::{ols_fit, standardized_residuals};
use smt2d_core::Error as CoreError;

use crate::io::{self, DecisionRecord, IoError, ObservationData};
use crate::runner::run_replications_parallel;

#[derive(Debug, Parser)]
#[command(name = "smt2d", version, about = "Two-dimensional spatial multiple testing")]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation setup and write summary and per-replicate CSVs.
    Simulate(SimulateArgs),
    /// Test every location of a data set and write rejections and a decision record.
    Analyze(AnalyzeArgs),
    /// Fit a covariance kernel to replicated observations or regression residuals.
    FitCov(FitCovArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TestingArgs {
    /// Target FDR level in (0,1).
    #[arg(long)]
    pub q: Option<f64>,
    /// Nearest neighbours per location.
    #[arg(long)]
    pub kappa: Option<usize>,
    /// Sign-adaptive neighbourhood sizes (2 to 7, default 4).
    #[arg(long)]
    pub adaptive: bool,
    /// Storey threshold on the primary-statistic scale.
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    /// Offset added to the estimated false rejections (default: q).
    #[arg(long)]
    pub offset: Option<f64>,
    /// Stop the search after this many fruitless rows.
    #[arg(long)]
    pub m_stop: Option<usize>,
    /// Censoring level for weighted procedures.
    #[arg(long)]
    pub censor_tau: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// I, II, III, IV, V or ozone.
    #[arg(long)]
    pub setup: Option<String>,
    /// sparse, medium or dense.
    #[arg(long)]
    pub sparsity: Option<String>,
    /// Noise correlation: weak, medium or strong.
    #[arg(long, alias = "noise")]
    pub corr: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated procedure ids.
    #[arg(long)]
    pub procedures: Option<String>,
    /// Comma-separated trend margins for the ozone setup.
    #[arg(long)]
    pub beta0: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub testing: TestingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// CSV with `id,x[,y]` and an optional group column.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// CSV with `id,value`, `id,rep,value` or `id,t,value`.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    /// Procedure id, e.g. `2d-st`.
    #[arg(long)]
    pub method: Option<String>,
    /// Kernel file to use instead of fitting one.
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Kernel family for fitting.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub shape: Option<f64>,
    /// Trend margin for time-series input: tests `β(s) < -beta0`.
    #[arg(long, allow_hyphen_values = true)]
    pub beta0: Option<f64>,
    /// Column of the locations file holding group labels.
    #[arg(long)]
    pub group_column: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub testing: TestingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FitCovArgs {
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// CSV with `id,rep,value` or `id,t,value`.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub shape: Option<f64>,
    /// Output kernel file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(_) | CoreError::Data(_) | CoreError::DataIncomplete(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: IoError) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// Values from the `--config` file.
struct Conf(BTreeMap<String, String>);

impl Conf {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        Ok(Conf(match path {
            Some(p) => io::read_key_values(p)?,
            None => BTreeMap::new(),
        }))
    }

    /// The flag if given, else the file's value for `key`.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key '{key}' = '{v}': {e}"))),
        }
    }

    fn flag(&self, flag: bool, key: &str) -> CliResult<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.get::<bool>(None, key)?.unwrap_or(false))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str, what: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(flag, key)?.ok_or_else(|| CliError::Usage(format!("--{key} is required for {what}")))
    }
}

fn analysis_config(t: &TestingArgs, conf: &Conf, default_kappa: usize) -> CliResult<AnalysisConfig> {
    let d = AnalysisConfig::default();
    let q = conf.get(t.q, "q")?.unwrap_or(d.q);
    if !(q > 0.0 && q < 1.0) {
        return Err(CliError::Usage(format!("--q must be in (0,1), got {q}")));
    }
    let neighbors = if conf.flag(t.adaptive, "adaptive")? {
        NeighborChoice::Adaptive(AdaptiveRule::default())
    } else {
        let k = conf.get(t.kappa, "kappa")?.unwrap_or(default_kappa);
        if k == 0 {
            return Err(CliError::Usage("--kappa must be at least 1".into()));
        }
        NeighborChoice::Knn(k)
    };
    let censor_tau = conf.get(t.censor_tau, "censor-tau")?.unwrap_or(d.censor_tau);
    if !(censor_tau > 0.0 && censor_tau <= 1.0) {
        return Err(CliError::Usage(format!("--censor-tau must be in (0,1], got {censor_tau}")));
    }
    let offset = conf.get(t.offset, "offset")?;
    if let Some(o) = offset {
        if !(o >= 0.0 && o.is_finite()) {
            return Err(CliError::Usage(format!("--offset must be nonnegative, got {o}")));
        }
    }
    let lambda = conf.get(t.lambda, "lambda")?.unwrap_or(d.lambda);
    if !lambda.is_finite() {
        return Err(CliError::Usage(format!("--lambda must be finite, got {lambda}")));
    }
    Ok(AnalysisConfig {
        q,
        neighbors,
        lambda,
        offset,
        censor_tau,
        m_stop: conf.get(t.m_stop, "m-stop")?,
        ..d
    })
}

fn family(conf: &Conf, name: Option<String>, shape: Option<f64>) -> CliResult<KernelFamily> {
    let name = conf.get(name, "family")?.unwrap_or_else(|| "exponential".into());
    let shape = conf.get(shape, "shape")?;
    KernelFamily::from_name(&name.to_ascii_lowercase(), shape).map_err(|e| CliError::Usage(format!("--family: {e}")))
}

fn parse_with<T>(flag: &str, v: &str, f: impl Fn(&str) -> smt2d_core::Result<T>) -> CliResult<T> {
    f(v).map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let conf = Conf::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate(a) => simulate(a, &conf),
        Command::Analyze(a) => analyze(a, &conf),
        Command::FitCov(a) => fit_cov(a, &conf),
    }
}

fn simulate(a: &SimulateArgs, conf: &Conf) -> CliResult<()> {
    let d = SetupConfig::default();
    let setup = match conf.get(a.setup.clone(), "setup")? {
        Some(s) => parse_with("setup", &s, Setup::parse)?,
        None => d.setup,
    };
    let sparsity = match conf.get(a.sparsity.clone(), "sparsity")? {
        Some(s) => parse_with("sparsity", &s, Sparsity::parse)?,
        None => d.sparsity,
    };
    let noise = match conf.get(a.corr.clone(), "corr")? {
        Some(s) => parse_with("corr", &s, NoiseLevel::parse)?,
        None => d.noise,
    };
    let beta0 = match conf.get(a.beta0.clone(), "beta0")? {
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("--beta0 '{v}': {e}"))))
            .collect::<CliResult<Vec<f64>>>()?,
        None => d.beta0.clone(),
    };
    let default_m = if setup == Setup::Ozone { 300 } else { d.m };
    let cfg = SetupConfig {
        setup,
        sparsity,
        gamma: conf.get(a.gamma, "gamma")?.unwrap_or(d.gamma),
        noise,
        m: conf.get(a.m, "m")?.unwrap_or(default_m),
        reps: conf.get(a.reps, "reps")?.unwrap_or(d.reps),
        seed: conf.required(a.seed, "seed", "simulate")?,
        beta0,
    };
    let analysis = analysis_config(&a.testing, conf, if setup == Setup::Ozone { 2 } else { 4 })?;
    cfg.validate()?;
    let list = conf.get(a.procedures.clone(), "procedures")?.unwrap_or_else(|| "bh,st,2d-st,sa,2d-sa".into());
    let procs = parse_procedures(&list).map_err(|e| CliError::Usage(format!("--procedures: {e}")))?;
    let threads = conf.get(a.threads, "threads")?;
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let out = conf.get(a.out.clone(), "out")?.unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&out)?;

    let report = run_replications_parallel(&cfg, &procs, &analysis, threads)?;
    for (rep, e) in &report.failures {
        eprintln!("replicate {rep} failed: {e}");
    }
    io::write_summary(&out.join("summary.csv"), &report.summary).map_err(runtime)?;
    io::write_replicates(&out.join("replicates.csv"), &report.records).map_err(runtime)?;
    for row in &report.summary {
        let b = row.beta0.map_or(String::new(), |b| format!(" beta0={b}"));
        println!("{:<9}{b} {:<10} mean={:.4} se={:.4}", row.procedure.label(), row.metric, row.mean, row.se);
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs, conf: &Conf) -> CliResult<()> {
    let loc_path: PathBuf = conf.required(a.locations.clone(), "locations", "analyze")?;
    let obs_path: PathBuf = conf.required(a.observations.clone(), "observations", "analyze")?;
    let group_column = conf.get(a.group_column.clone(), "group-column")?.unwrap_or_else(|| "group".into());
    let method_id = conf.get(a.method.clone(), "method")?.unwrap_or_else(|| "2d-st".into());
    let method = parse_with("method", &method_id, Procedure::parse)?;
    let analysis = analysis_config(&a.testing, conf, 4)?;
    let fam = family(conf, a.family.clone(), a.shape)?;
    let kernel = conf.get(a.kernel.clone(), "kernel")?.map(|p: PathBuf| io::read_kernel(&p)).transpose()?;
    let beta0 = conf.get(a.beta0, "beta0")?.unwrap_or(0.0);
    let out = conf.get(a.out.clone(), "out")?.unwrap_or_else(|| PathBuf::from("."));

    let locs = io::read_locations(&loc_path, &group_column)?;
    let domain = &locs.domain;
    let obs = io::read_observations(&obs_path, domain)?;
    let prepared = prepare_observations(domain, &obs, kernel.as_ref(), fam, beta0, &analysis)?;
    let groups = locs.groups.clone().unwrap_or_else(|| default_groups(domain));
    let outcome = run_procedure(method, &prepared, Some(&groups), &analysis)?;

    ensure_dir(&out)?;
    io::write_rejections(&out.join("rejections.csv"), domain, &prepared.stats, &outcome.rejected).map_err(runtime)?;
    let record = DecisionRecord::new(method.id(), analysis.q, outcome.decision.as_ref(), outcome.rejected.len());
    io::write_decision(&out.join("decision.json"), &record).map_err(runtime)?;
    println!("{}: {} of {} locations rejected", method.label(), outcome.rejected.len(), domain.len());
    Ok(())
}

/// Equal-width regions: ten intervals on a line, a 3 × 3 partition in the
/// plane.
pub fn default_groups(domain: &smt2d_core::geometry::SpatialDomain) -> Vec<usize> {
    region_groups(domain, if domain.dim() == 1 { 10 } else { 3 })
}

/// Statistics and prior for any observation layout. Direct values need a
/// kernel; replicates and time series are fitted unless one is given, in
/// which case it describes a single replicate or the standardized
/// residuals respectively.
pub fn prepare_observations(
    domain: &smt2d_core::geometry::SpatialDomain,
    obs: &ObservationData,
    kernel: Option<&KernelSpec>,
    family: KernelFamily,
    beta0: f64,
    analysis: &AnalysisConfig,
) -> CliResult<Prepared> {
    Ok(match obs {
        ObservationData::Direct(x) => {
            let k = kernel.ok_or_else(|| {
                CliError::Usage("single observations need --kernel; pass replicates or a time series to fit one".into())
            })?;
            prepare_with_kernel(domain, x, k, analysis)?
        }
        ObservationData::Replicated(rows) => {
            let reps = Replicates::new(rows)?;
            let k = match kernel {
                Some(k) => *k,
                None => fit_covariance_mle(&reps, domain, family, FitOptions::default())?,
            };
            let of_mean = KernelSpec { scale: k.scale / reps.n() as f64, ..k };
            prepare_with_kernel(domain, &reps.mean(), &of_mean, analysis)?
        }
        ObservationData::Panel(panel) => {
            let fit = ols_fit(panel)?;
            let k = match kernel {
                Some(k) => *k,
                None => fit_residual_kernel(&standardized_residuals(&fit)?, domain, family, FitOptions::default())?,
            };
            prepare_regression(domain, &fit, &k, beta0, analysis)?
        }
    })
}

fn fit_cov(a: &FitCovArgs, conf: &Conf) -> CliResult<()> {
    let loc_path: PathBuf = conf.required(a.locations.clone(), "locations", "fit-cov")?;
    let obs_path: PathBuf = conf.required(a.observations.clone(), "observations", "fit-cov")?;
    let fam = family(conf, a.family.clone(), a.shape)?;
    let out = conf.get(a.out.clone(), "out")?.unwrap_or_else(|| PathBuf::from("kernel.txt"));
    let locs = io::read_locations(&loc_path, "group")?;
    let domain = &locs.domain;
    let spec = match io::read_observations(&obs_path, domain)? {
        ObservationData::Direct(_) => {
            return Err(CliError::Usage("fit-cov needs at least 2 replicates (id,rep,value) or a time series (id,t,value)".into()))
        }
        ObservationData::Replicated(rows) => {
            if rows.len() < 2 {
                return Err(CliError::Usage(format!("fit-cov needs at least 2 replicates, got {}", rows.len())));
            }
            fit_covariance_mle(&Replicates::new(&rows)?, domain, fam, FitOptions::default())?
        }
        ObservationData::Panel(panel) => {
            let fit = ols_fit(&panel)?;
            fit_residual_kernel(&standardized_residuals(&fit)?, domain, fam, FitOptions::default())?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    io::write_kernel(&out, &spec).map_err(runtime)?;
    println!(
        "{} r={:.4} range={:.4} scale={:.4}",
        spec.family.name(),
        spec.r,
        spec.range,
        spec.scale
    );
    Ok(())
}
