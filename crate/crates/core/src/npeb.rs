//! Nonparametric maximum likelihood estimation of the mixing distribution of
//! the auxiliary statistics, and integration of `L` against it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::log;

use crate::error::{invalid, Error, Result};
use crate::gaussnum::{big_l_unchecked, std_normal_pdf, std_normal_sf};

/// A discrete distribution: strictly increasing support points with
/// probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDistribution {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl MixingDistribution {
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(invalid!("support and weights must be nonempty and equally long"));
        }
        if support.iter().any(|v| !v.is_finite()) || support.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid!("support must be finite and strictly increasing"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid!("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(invalid!("weights sum to {total}, not 1"));
        }
        Ok(Self { support, weights })
    }

    pub fn point_mass(at: f64) -> Self {
        Self { support: vec![at], weights: vec![1.0] }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.support.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// `f_G(x) = Σᵢ wᵢ φ(x - vᵢ)`.
pub fn marginal_density(g: &MixingDistribution, x: f64) -> f64 {
    g.atoms().map(|(v, w)| w * std_normal_pdf(x - v)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmleOptions {
    pub grid_size: usize,
    /// Relative change of the average log-likelihood that stops EM.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GmleOptions {
    fn default() -> Self {
        Self { grid_size: 400, tol: 1e-8, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmleFit {
    pub mixing: MixingDistribution,
    /// Average log-likelihood of the returned distribution.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Average log-likelihood after every EM iteration.
    pub trace: Vec<f64>,
}

const DROP_BELOW: f64 = 1e-10;

fn avg_loglik(samples: &[f64], g: &MixingDistribution) -> f64 {
    samples.iter().map(|&x| log(marginal_density(g, x))).sum::<f64>() / samples.len() as f64
}

/// Grid NPMLE of the mixing distribution of `samples ~ N(u, 1), u ~ G`,
/// fitted by EM on a uniform grid spanning the sample range. The sample
/// mean is added to the grid so the fit can never lose to the point mass
/// there.
pub fn fit_gmle(samples: &[f64], opts: GmleOptions) -> Result<GmleFit> {
    if samples.is_empty() {
        return Err(invalid!("no samples for the mixing distribution"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sample".into()));
    }
    if opts.grid_size < 2 {
        return Err(invalid!("grid size must be at least 2"));
    }
    let n = samples.len();
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = samples.iter().sum::<f64>() / n as f64;
    let xbar = mean.clamp(lo, hi);

    let mut grid: Vec<f64> = if hi > lo {
        let k = opts.grid_size;
        (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
    } else {
        vec![lo]
    };
    grid.push(xbar);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let k = grid.len();

    // lik[i * k + j] = φ(xᵢ - uⱼ)
    let lik: Vec<f64> = samples.iter().flat_map(|&x| grid.iter().map(move |&u| std_normal_pdf(x - u))).collect();
    let mut w = vec![1.0 / k as f64; k];
    let mut f = vec![0.0; n];
    let mut acc = vec![0.0; k];
    let mut trace = Vec::new();

    let marginals = |w: &[f64], f: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let row = &lik[i * k..(i + 1) * k];
            let v: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            f[i] = v;
            ll += log(v);
        }
        ll / n as f64
    };

    let mut ll = marginals(&w, &mut f);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..n {
            let inv = 1.0 / f[i];
            let row = &lik[i * k..(i + 1) * k];
            for (a, l) in acc.iter_mut().zip(row) {
                *a += l * inv;
            }
        }
        for (wj, a) in w.iter_mut().zip(&acc) {
            *wj *= a / n as f64;
        }
        let next = marginals(&w, &mut f);
        iterations += 1;
        trace.push(next);
        if next < ll - 1e-12 * (1.0 + ll.abs()) {
            return Err(Error::Numerical(format!(
                "EM log-likelihood decreased from {ll} to {next} at iteration {iterations}"
            )));
        }
        let rel = (next - ll).abs() / (1.0 + ll.abs());
        ll = next;
        if rel < opts.tol {
            break;
        }
    }

    let kept: Vec<(f64, f64)> = grid.iter().copied().zip(w.iter().copied()).filter(|a| a.1 >= DROP_BELOW).collect();
    let total: f64 = kept.iter().map(|a| a.1).sum();
    let mixing = MixingDistribution {
        support: kept.iter().map(|a| a.0).collect(),
        weights: kept.iter().map(|a| a.1 / total).collect(),
    };
    let mut fit = GmleFit { log_likelihood: avg_loglik(samples, &mixing), mixing, iterations, trace };
    let point = MixingDistribution::point_mass(xbar);
    let ll_point = avg_loglik(samples, &point);
    if ll_point > fit.log_likelihood {
        fit.mixing = point;
        fit.log_likelihood = ll_point;
    }
    Ok(fit)
}

/// `∫ L(t1, t2, x, ρ) dG(x)`.
pub fn integrated_l(g: &MixingDistribution, t1: f64, t2: f64, rho: f64) -> f64 {
    if t1 == f64::NEG_INFINITY {
        return std_normal_sf(t2);
    }
    g.atoms().map(|(v, w)| w * big_l_unchecked(t1, t2, v, rho)).sum()
}

/// `Σ_s ∫ L(t1, t2, x, ρ(s)) dG(x)`; equals `m·(1 - Φ(t2))` at `t1 = -∞`.
pub fn expected_false_rejections(g: &MixingDistribution, rho: &[f64], t1: f64, t2: f64) -> Result<f64> {
    if t1.is_nan() || t2.is_nan() {
        return Err(invalid!("NaN threshold"));
    }
    if rho.iter().any(|r| !(r.abs() <= 1.0)) {
        return Err(invalid!("correlation outside [-1, 1]"));
    }
    if t1 == f64::NEG_INFINITY {
        return Ok(rho.len() as f64 * std_normal_sf(t2));
    }
    Ok(rho.iter().map(|&r| integrated_l(g, t1, t2, r)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{bvn_oracle, integrate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn check_monotone(fit: &GmleFit) {
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn constant_samples_give_point_mass() {
        let fit = fit_gmle(&[1.3; 40], GmleOptions::default()).unwrap();
        let near: f64 = fit.mixing.atoms().filter(|(v, _)| (v - 1.3).abs() <= 0.05).map(|a| a.1).sum();
        assert!(near >= 0.99);
    }

    #[test]
    fn two_point_prior_hellinger() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..2000)
            .map(|_| {
                let u = if rng.random_bool(0.5) { -2.0 } else { 2.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                u + e
            })
            .collect();
        let fit = fit_gmle(&xs, GmleOptions::default()).unwrap();
        check_monotone(&fit);
        let truth = MixingDistribution::new(vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
        let h2 = 0.5
            * integrate(
                &|x| {
                    let d = marginal_density(&fit.mixing, x).sqrt() - marginal_density(&truth, x).sqrt();
                    d * d
                },
                -15.0,
                15.0,
                1e-12,
            );
        assert!(h2 <= 0.01, "{h2}");
    }

    #[test]
    fn null_prior_total_variation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = fit_gmle(&xs, GmleOptions::default()).unwrap();
        check_monotone(&fit);
        let tv = 0.5 * integrate(&|x| (marginal_density(&fit.mixing, x) - std_normal_pdf(x)).abs(), -15.0, 15.0, 1e-12);
        assert!(tv <= 0.05, "{tv}");
    }

    #[test]
    fn beats_mean_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for scale in [0.3, 1.0, 3.0] {
            let xs: Vec<f64> = (0..200)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e + 0.7
                })
                .collect();
            let fit = fit_gmle(&xs, GmleOptions { grid_size: 100, ..Default::default() }).unwrap();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let ll0 = avg_loglik(&xs, &MixingDistribution::point_mass(mean));
            assert!(fit.log_likelihood >= ll0 - 1e-12);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(fit.mixing.support().iter().all(|v| *v >= lo - 1.0 && *v <= hi + 1.0));
            let total: f64 = fit.mixing.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dropping_small_atoms_barely_moves_the_density() {
        let support: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let mut weights: Vec<f64> = (0..50).map(|i| if i % 3 == 0 { 5e-11 } else { 1.0 }).collect();
        let t: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= t);
        let full = MixingDistribution::new(support.clone(), weights.clone()).unwrap();
        let kept: Vec<(f64, f64)> = support.into_iter().zip(weights).filter(|a| a.1 >= DROP_BELOW).collect();
        let t: f64 = kept.iter().map(|a| a.1).sum();
        let pruned = MixingDistribution::new(kept.iter().map(|a| a.0).collect(), kept.iter().map(|a| a.1 / t).collect()).unwrap();
        for i in 0..200 {
            let x = -5.0 + i as f64 * 0.05;
            assert!((marginal_density(&full, x) - marginal_density(&pruned, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_density_values() {
        assert_eq!(marginal_density(&MixingDistribution::point_mass(0.0), 0.7), std_normal_pdf(0.7));
        let g = MixingDistribution::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((marginal_density(&g, 0.0) - 0.241_970_724_519_143_37).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sup: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        sup.sort_by(f64::total_cmp);
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
        let t: f64 = w.iter().sum();
        let g = MixingDistribution::new(sup, w.iter().map(|v| v / t).collect()).unwrap();
        let total = integrate(&|x| marginal_density(&g, x), -20.0, 20.0, 1e-12);
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn efr_values() {
        let g = MixingDistribution::new(vec![-0.5, 1.5], vec![0.3, 0.7]).unwrap();
        let rho = [0.0, 0.4, -0.6, 0.9];
        let v = expected_false_rejections(&g, &rho, f64::NEG_INFINITY, 1.0).unwrap();
        assert_eq!(v, 4.0 * std_normal_sf(1.0));
        let d0 = MixingDistribution::point_mass(0.0);
        let v = expected_false_rejections(&d0, &[0.0; 10], 1.0, 1.0).unwrap();
        assert!((v - 10.0 * std_normal_sf(1.0).powi(2)).abs() < 1e-12);
        assert!((v / 10.0 - 0.025_171).abs() < 1e-6);
        let (t1, t2) = (0.8, 0.3);
        let direct: f64 = rho
            .iter()
            .map(|&r| g.atoms().map(|(u, w)| w * bvn_oracle(t1 - u, t2, r)).sum::<f64>())
            .sum();
        let v = expected_false_rejections(&g, &rho, t1, t2).unwrap();
        assert!((v - direct).abs() < 1e-6);
        assert!(v <= rho.len() as f64);
    }

    #[test]
    fn efr_monotone() {
        let g = MixingDistribution::new(vec![-1.0, 0.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let rho = [0.1, 0.5, -0.3];
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let v = expected_false_rejections(&g, &rho, -2.0 + 0.1 * i as f64, 0.5).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let v = expected_false_rejections(&g, &rho, 0.5, -2.0 + 0.1 * i as f64).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }
}
