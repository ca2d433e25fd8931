//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 5 9`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smt2d::runner::run_replications_parallel;
use smt2d_core::covmodel::{fit_covariance_mle, FitOptions, KernelFamily, KernelSpec, Replicates};
use smt2d_core::gaussnum::{bvn_upper, std_normal_cdf, std_normal_sf, QuadrantProbParams};
use smt2d_core::geometry::SpatialDomain;
use smt2d_core::npeb::{fit_gmle, marginal_density, GmleOptions, MixingDistribution};
use smt2d_core::pipeline::{prepare_with_kernel, Procedure};
use smt2d_core::simlab::{
    GpSampler, NoiseLevel, Observations, ReplicationReport, Setup, SetupConfig, SimContext, Sparsity,
};
use smt2d_core::statbuild::StatPair;
use smt2d_core::testing::{search_cutoffs_2d, FdpEstimator, FdpEstimatorConfig};

type Outcome = Result<String, String>;

// ---------------------------------------------------------------------------
// Independent oracles

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Gauss-Kronrod 7/15 on `[a, b]`: (Kronrod estimate, error estimate).
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let (v, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return v;
    }
    let c = 0.5 * (a + b);
    adaptive(f, a, c, 0.5 * tol, depth - 1) + adaptive(f, c, b, 0.5 * tol, depth - 1)
}

/// `P(V1 >= h, V2 >= k)` as `∫_h^∞ φ(x) P(V2 >= k | V1 = x) dx`.
fn bvn_quadrature(h: f64, k: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let f = move |x: f64| pdf(x) * upper_tail((k - rho * x) / s);
    let lo = h.max(-40.0);
    // split at the conditional-mean crossing where the integrand turns
    let mut cuts = vec![lo];
    if rho != 0.0 {
        let x0 = k / rho;
        if x0 > lo && x0 < 40.0 {
            cuts.push(x0);
        }
    }
    cuts.push(40.0);
    cuts.windows(2).map(|w| adaptive(&f, w[0], w[1], 1e-14, 40)).sum()
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Exhaustive maximization over `{(t1_i, t2_j)} ∪ {(∞, ∞)}`.
fn brute_force(est: &FdpEstimator<'_>, stats: &StatPair, q: f64) -> (usize, f64) {
    let m = stats.len();
    let mut best = (0usize, est.estimate(f64::INFINITY, f64::INFINITY));
    for &a in &stats.t1 {
        for &b in &stats.t2 {
            let r = (0..m).filter(|&s| stats.t1[s] >= a && stats.t2[s] >= b).count();
            if r < best.0 {
                continue;
            }
            let f = est.estimate(a, b);
            if f <= q && (r > best.0 || f < best.1) {
                best = (r, f);
            }
        }
    }
    best
}

fn random_instance(rng: &mut ChaCha8Rng, m: usize) -> (StatPair, MixingDistribution) {
    let rhos = [0.3, 0.5, 0.6, 0.75, 0.9];
    let frac = rng.random_range(0.05..0.4);
    let gamma = rng.random_range(1.5..4.0);
    let mut t1 = Vec::with_capacity(m);
    let mut t2 = Vec::with_capacity(m);
    let mut rho = Vec::with_capacity(m);
    for _ in 0..m {
        let r: f64 = rhos[rng.random_range(0..rhos.len())];
        let mu = if rng.random::<f64>() < frac { gamma } else { 0.0 };
        let xi = mu * rng.random_range(1.0..2.5);
        let z1 = normal(rng);
        let z2 = r * z1 + (1.0 - r * r).sqrt() * normal(rng);
        t1.push(xi + z1);
        t2.push(mu + z2);
        rho.push(r);
    }
    let atoms = rng.random_range(1..4);
    let mut support: Vec<f64> = (0..atoms).map(|_| rng.random_range(-1.0..4.0)).collect();
    support.sort_by(f64::total_cmp);
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let g = MixingDistribution::new(support, raw.iter().map(|w| w / total).collect()).unwrap();
    (StatPair::new(t1, t2, rho).unwrap(), g)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = 1.0 - rng.random::<f64>();
    let v: f64 = rng.random::<f64>();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_metric(report: &ReplicationReport, proc_: Procedure, beta0: Option<f64>, power: bool) -> f64 {
    let vals: Vec<f64> = report
        .records
        .iter()
        .flat_map(|r| &r.outcomes)
        .filter(|o| o.procedure == proc_ && o.beta0 == beta0)
        .filter_map(|o| if power { o.power } else { Some(o.fdp) })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

// ---------------------------------------------------------------------------
// Criteria

fn search_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let q = 0.1;
    let mut mismatches = Vec::new();
    let mut search_time = Duration::ZERO;
    for inst in 0..200 {
        let m = rng.random_range(20..=200);
        let (stats, g) = random_instance(&mut rng, m);
        let est = FdpEstimator::new(&stats, &g, &FdpEstimatorConfig::default(), q).unwrap();
        let t0 = Instant::now();
        let d = search_cutoffs_2d(&est, None);
        search_time += t0.elapsed();
        let (r, f) = brute_force(&est, &stats, q);
        let same_set = d.rejected == est.rejections(d.t1_star, d.t2_star);
        if d.n_rejected() != r || (r > 0 && (d.fdp_hat - f).abs() > 1e-12 * f.max(1e-300)) || !same_set {
            mismatches.push(format!("instance {inst} (m={m}): search ({}, {}) vs brute force ({r}, {f})", d.n_rejected(), d.fdp_hat));
        }
    }
    let detail = format!("{} mismatches over 200 instances, search time {:.2}s", mismatches.len(), search_time.as_secs_f64());
    if mismatches.is_empty() && search_time < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", mismatches.join("; ")))
    }
}

fn pruning_efficiency() -> Outcome {
    let sizes = [300, 600, 1200, 2400];
    let mut medians = Vec::new();
    for &m in &sizes {
        let cfg = SetupConfig { setup: Setup::I, m, reps: 10, seed: 2024, ..SetupConfig::default() };
        let ctx = SimContext::new(&cfg).map_err(|e| e.to_string())?;
        let analysis = cfg.default_analysis();
        let kernel = cfg.noise.kernel();
        let mut evals = Vec::new();
        for rep in 0..10 {
            let gen = ctx.generate(rep).map_err(|e| e.to_string())?;
            let Observations::Direct(x) = &gen.observations else {
                return Err("Setup I should give direct observations".into());
            };
            let prep = prepare_with_kernel(&gen.domain, x, &kernel, &analysis).map_err(|e| e.to_string())?;
            let est = FdpEstimator::new(&prep.stats, &prep.prior, &FdpEstimatorConfig::default(), analysis.q)
                .map_err(|e| e.to_string())?;
            evals.push(search_cutoffs_2d(&est, None).evaluations as f64);
        }
        medians.push(median(evals));
    }
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[1] / w[0].max(1.0)).collect();
    let detail = format!("median evaluations {medians:?}, doubling ratios {ratios:.2?}");
    if ratios.iter().all(|&r| r <= 3.0) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn setup_ii_run() -> Result<ReplicationReport, String> {
    let cfg = SetupConfig {
        setup: Setup::II,
        sparsity: Sparsity::Medium,
        noise: NoiseLevel::Weak,
        gamma: 1.5,
        m: 900,
        reps: 100,
        seed: 42,
        ..SetupConfig::default()
    };
    let report = run_replications_parallel(&cfg, &[Procedure::St, Procedure::TwoDSt], &cfg.default_analysis(), None)
        .map_err(|e| e.to_string())?;
    if !report.failures.is_empty() {
        return Err(format!("{} failed replicates", report.failures.len()));
    }
    Ok(report)
}

fn fdr_control(report: &Result<ReplicationReport, String>) -> Outcome {
    let report = report.as_ref().map_err(Clone::clone)?;
    let fdr = mean_metric(report, Procedure::TwoDSt, None, false);
    let detail = format!("2D(ST) empirical FDR {fdr:.4} over {} reps", report.records.len());
    if fdr <= 0.12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn power_dominance(report: &Result<ReplicationReport, String>) -> Outcome {
    let report = report.as_ref().map_err(Clone::clone)?;
    let p2 = mean_metric(report, Procedure::TwoDSt, None, true);
    let p1 = mean_metric(report, Procedure::St, None, true);
    let mut dominated = 0;
    let mut total = 0;
    for rec in &report.records {
        for o in rec.outcomes.iter().filter(|o| o.procedure == Procedure::TwoDSt) {
            total += 1;
            if o.matched_one_d.is_some_and(|k| o.n_rejected >= k) {
                dominated += 1;
            }
        }
    }
    let detail = format!("mean power 2D(ST) {p2:.4} vs ST {p1:.4}; 2d >= matched 1d on {dominated}/{total} replicates");
    if p2 >= p1 && dominated == total && total > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bvn_accuracy() -> Outcome {
    let hs = [-3.5, -2.0, -1.0, -0.3, 0.0, 0.4, 1.1, 2.0, 3.0, 4.5];
    let ks = [-3.0, -1.5, -0.5, 0.0, 0.7, 1.6, 2.5, 4.0, -4.5, 5.5];
    let rhos = [-0.99, -0.9, -0.5, -0.1, 0.0, 0.25, 0.6, 0.8, 0.95, 0.99];
    let mut worst = (0.0f64, 0.0, 0.0, 0.0);
    let mut points = 0;
    for (i, &h) in hs.iter().enumerate() {
        for (j, &k) in ks.iter().enumerate() {
            for &rho in rhos.iter().skip((i + j) % 2).step_by(2) {
                points += 1;
                let got = bvn_upper(QuadrantProbParams { h, k, rho }).map_err(|e| e.to_string())?;
                let err = (got - bvn_quadrature(h, k, rho)).abs();
                if err > worst.0 {
                    worst = (err, h, k, rho);
                }
            }
        }
    }
    let mut identity_failures = 0;
    for &h in &hs {
        for &k in &ks {
            let plus = bvn_upper(QuadrantProbParams { h, k, rho: 1.0 }).unwrap();
            let minus = bvn_upper(QuadrantProbParams { h, k, rho: -1.0 }).unwrap();
            let expected_minus = (std_normal_sf(h) - std_normal_cdf(k).unwrap()).max(0.0);
            if plus != std_normal_sf(h.max(k)) || minus != expected_minus {
                identity_failures += 1;
            }
        }
    }
    let detail = format!(
        "{points} grid points, max error {:.2e} at (h={}, k={}, rho={}); {identity_failures} limit identity failures",
        worst.0, worst.1, worst.2, worst.3
    );
    if points == 500 && worst.0 <= 1e-6 && identity_failures == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn npmle_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let check_monotone = |trace: &[f64]| trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
    let mut monotone_failures = 0;
    for fit_idx in 0..20 {
        let n = 200 + 50 * fit_idx;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let u = if rng.random::<f64>() < 0.7 { 0.0 } else { rng.random_range(-3.0..4.0) };
                u + normal(&mut rng)
            })
            .collect();
        let fit = fit_gmle(&samples, GmleOptions::default()).map_err(|e| e.to_string())?;
        if !check_monotone(&fit.trace) {
            monotone_failures += 1;
        }
    }
    let samples: Vec<f64> =
        (0..2000).map(|_| if rng.random::<bool>() { 2.0 } else { -2.0 } + normal(&mut rng)).collect();
    let fit = fit_gmle(&samples, GmleOptions::default()).map_err(|e| e.to_string())?;
    if !check_monotone(&fit.trace) {
        monotone_failures += 1;
    }
    let truth = |x: f64| 0.5 * pdf(x + 2.0) + 0.5 * pdf(x - 2.0);
    let integrand = |x: f64| {
        let d = marginal_density(&fit.mixing, x).sqrt() - truth(x).sqrt();
        d * d
    };
    let h2 = 0.5 * simpson(&integrand, -15.0, 15.0, 30_000);
    let detail = format!("squared Hellinger {h2:.2e}; {monotone_failures} of 21 EM traces non-monotone");
    if h2 <= 0.01 && monotone_failures == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn covariance_recovery() -> Outcome {
    let domain = SpatialDomain::grid_2d(30, 1.0);
    let (r, range) = (0.8, 0.1);
    let truth = KernelSpec::new(KernelFamily::Exponential, r, range, 1.0).map_err(|e| e.to_string())?;
    let sampler = GpSampler::new(&truth, &domain).map_err(|e| e.to_string())?;
    let mut err_r = Vec::new();
    let mut err_range = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| sampler.sample(&mut rng)).collect();
        let obs = Replicates::new(&rows).map_err(|e| e.to_string())?;
        let fit = fit_covariance_mle(&obs, &domain, KernelFamily::Exponential, FitOptions::default())
            .map_err(|e| e.to_string())?;
        err_r.push((fit.r - r).abs() / r);
        err_range.push((fit.range - range).abs() / range);
    }
    let (mr, mg) = (median(err_r), median(err_range));
    let detail = format!("median relative error r {:.1}%, range {:.1}% over 20 seeds", 100.0 * mr, 100.0 * mg);
    if mr <= 0.3 && mg <= 0.3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ozone_reproduction() -> Outcome {
    let cfg = SetupConfig { setup: Setup::Ozone, m: 300, reps: 100, seed: 8, ..SetupConfig::default() };
    let report = run_replications_parallel(&cfg, &[Procedure::St, Procedure::TwoDSt], &cfg.default_analysis(), None)
        .map_err(|e| e.to_string())?;
    if !report.failures.is_empty() {
        return Err(format!("{} failed replicates", report.failures.len()));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for &b in &cfg.beta0 {
        let fdp = mean_metric(&report, Procedure::TwoDSt, Some(b), false);
        let ptd2 = mean_metric(&report, Procedure::TwoDSt, Some(b), true);
        let ptd1 = mean_metric(&report, Procedure::St, Some(b), true);
        ok &= fdp <= 0.10 && ptd2 >= ptd1;
        parts.push(format!("b0={b}: FDP {fdp:.3}, PTD {ptd2:.3} vs {ptd1:.3}"));
    }
    let detail = parts.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn weighted_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let q = 0.1;
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = rng.random_range(20..=300);
        let (stats, g) = random_instance(&mut rng, m);
        let plain = FdpEstimator::new(&stats, &g, &FdpEstimatorConfig::default(), q).unwrap();
        let cfg = FdpEstimatorConfig::weighted(vec![1.0; m], None);
        let weighted = FdpEstimator::new(&stats, &g, &cfg, q).unwrap();
        if search_cutoffs_2d(&plain, None).rejected != search_cutoffs_2d(&weighted, None).rejected {
            mismatches += 1;
        }
    }
    let detail = format!("{mismatches} mismatching rejected sets over 100 instances");
    if mismatches == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut setup_ii: Option<Result<ReplicationReport, String>> = None;
    let mut failed = 0;
    let mut ran = 0;
    for k in 1..=9 {
        if !want(k) {
            continue;
        }
        let t0 = Instant::now();
        let (name, outcome) = match k {
            1 => ("search exactness", search_exactness()),
            2 => ("pruning efficiency", pruning_efficiency()),
            3 => ("FDR control", fdr_control(setup_ii.get_or_insert_with(setup_ii_run))),
            4 => ("power dominance", power_dominance(setup_ii.get_or_insert_with(setup_ii_run))),
            5 => ("bivariate normal accuracy", bvn_accuracy()),
            6 => ("NPMLE quality", npmle_quality()),
            7 => ("covariance recovery", covariance_recovery()),
            8 => ("ozone trend reproduction", ozone_reproduction()),
            _ => ("weighted/unweighted consistency", weighted_consistency()),
        };
        ran += 1;
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {k} ({name}): PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {k} ({name}): FAIL [{secs:.1}s] {d}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
