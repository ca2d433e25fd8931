//! Null-proportion estimators, hypothesis weights, FDP estimates, the
//! one-dimensional baselines and the pruned exact search for the pair of
//! rejection cutoffs.
//!
//! Two parametrizations are supported. Unweighted mode works on the
//! statistic scale: a location is rejected when `t1_hat ≥ t1` and
//! `t2_hat ≥ t2`, with `t1 = -∞` meaning no screening and `t2 = +∞`
//! rejecting nothing. Weighted mode works on the p-value scale with
//! location-specific cutoffs `c(t, s) = Φ⁻¹(1 - min{τ, w(s)·t})`: a location
//! is rejected when both p-values are at most `τ` and `p/w(s) ≤ t` for each
//! coordinate. There `t1 = +∞` means no screening and `t2 = -∞` rejects
//! nothing.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use libm::ceil;

use crate::error::{invalid, Result};
use crate::gaussnum::{phi, std_normal_sf, upper_quantile, FixedRhoBvn};
use crate::npeb::MixingDistribution;
use crate::statbuild::StatPair;

/// One-sided p-values `1 - Φ(t)`.
pub fn p_values(t: &[f64]) -> Vec<f64> {
    t.iter().map(|&x| std_normal_sf(x)).collect()
}

/// `#{t2 < λ} / (m·Φ(λ))`, clamped to `[1/m, 1]`.
pub fn storey_pi0(t2: &[f64], lambda: f64) -> f64 {
    let m = t2.len();
    if m == 0 {
        return 1.0;
    }
    let below = t2.iter().filter(|&&t| t < lambda).count();
    let raw = below as f64 / (m as f64 * phi(lambda));
    raw.clamp(1.0 / m as f64, 1.0)
}

fn storey_p(p: &[f64], lambda_p: f64) -> f64 {
    let m = p.len();
    if m == 0 {
        return 1.0;
    }
    let above = p.iter().filter(|&&v| v > lambda_p).count();
    (above as f64 / (m as f64 * (1.0 - lambda_p))).clamp(1.0 / m as f64, 1.0)
}

/// Storey's estimator applied within each group and broadcast back to the
/// group's members.
pub fn groupwise_pi0(p: &[f64], groups: &[usize], lambda_p: f64) -> Result<Vec<f64>> {
    if p.len() != groups.len() {
        return Err(invalid!("{} p-values but {} group labels", p.len(), groups.len()));
    }
    if !(lambda_p > 0.0 && lambda_p < 1.0) {
        return Err(invalid!("lambda_p must be in (0,1), got {lambda_p}"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(s);
    }
    let mut out = vec![0.0; p.len()];
    for idx in members.values() {
        let sub: Vec<f64> = idx.iter().map(|&s| p[s]).collect();
        let v = storey_p(&sub, lambda_p);
        for &s in idx {
            out[s] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// `1/π0(s)`.
    Sabha,
    /// `(1 - π0(s))/π0(s)`, floored at `1e-6`.
    Laws,
    /// LAWS weights rescaled to average one.
    Gbh,
}

pub fn weight_scheme(pi0_local: &[f64], scheme: WeightScheme) -> Result<Vec<f64>> {
    if pi0_local.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(invalid!("local null proportions must be in (0, 1]"));
    }
    let laws = || pi0_local.iter().map(|&p| ((1.0 - p) / p).max(1e-6)).collect::<Vec<f64>>();
    Ok(match scheme {
        WeightScheme::Sabha => pi0_local.iter().map(|p| 1.0 / p).collect(),
        WeightScheme::Laws => laws(),
        WeightScheme::Gbh => {
            let w = laws();
            if w.windows(2).all(|x| x[0] == x[1]) {
                vec![1.0; w.len()]
            } else {
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                w.iter().map(|v| v / mean).collect()
            }
        }
    })
}

/// Benjamini–Hochberg step-up procedure. Returns rejected indices in order.
pub fn bh_procedure(p: &[f64], q: f64) -> Vec<usize> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut k = 0;
    for (i, &s) in order.iter().enumerate() {
        if p[s] * m as f64 <= q * (i + 1) as f64 {
            k = i + 1;
        }
    }
    let mut out: Vec<usize> = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// BH at level `q/π̂0` with Storey's p-value estimator at `lambda_p`.
pub fn storey_bh(p: &[f64], q: f64, lambda_p: f64) -> Vec<usize> {
    bh_procedure(p, q / storey_p(p, lambda_p))
}

/// How per-location cutoffs are formed.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Common cutoffs on the statistic scale.
    Unweighted,
    /// Location-specific cutoffs `c(t, s)` on the p-value scale.
    Weighted {
        weights: Vec<f64>,
        /// Defaults to the global Storey estimate at every location.
        pi0_local: Option<Vec<f64>>,
        censor_tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdpEstimatorConfig {
    /// Storey threshold on the `t2_hat` scale.
    pub lambda: f64,
    /// Added to the estimated number of false rejections; `None` uses the
    /// target level `q`.
    pub offset: Option<f64>,
    /// Replaces the Storey estimate of the global null proportion.
    pub pi0: Option<f64>,
    pub weighting: Weighting,
}

impl Default for FdpEstimatorConfig {
    fn default() -> Self {
        Self { lambda: 0.0, offset: None, pi0: None, weighting: Weighting::Unweighted }
    }
}

impl FdpEstimatorConfig {
    pub fn weighted(weights: Vec<f64>, pi0_local: Option<Vec<f64>>) -> Self {
        Self { weighting: Weighting::Weighted { weights, pi0_local, censor_tau: 1.0 }, ..Self::default() }
    }
}

/// Chosen cutoffs and the resulting rejections.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionResult {
    pub t1_star: f64,
    pub t2_star: f64,
    /// Rejected location indices, ascending.
    pub rejected: Vec<usize>,
    pub fdp_hat: f64,
    /// FDP evaluations made by the pruned search.
    pub evaluations: usize,
    /// `|T'|`, counting the `(∞, ∞)` element.
    pub candidates_step1: usize,
    /// `|T''|`.
    pub candidates_step2: usize,
    /// Candidates actually evaluated.
    pub candidates_step3: usize,
}

impl DecisionResult {
    pub fn n_rejected(&self) -> usize {
        self.rejected.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Group {
    bvn: FixedRhoBvn,
    weight: f64,
    pi0: f64,
    count: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Plain { pi0: f64 },
    Weighted { tau: f64 },
}

/// The FDP estimator for one data set. Internally both modes are mapped to
/// scores where larger means more significant: the statistics themselves in
/// unweighted mode and `-p/w` (or `-∞` above the censoring level) in
/// weighted mode.
#[derive(Debug, Clone)]
pub struct FdpEstimator<'a> {
    g: &'a MixingDistribution,
    mode: Mode,
    a: Vec<f64>,
    b: Vec<f64>,
    groups: Vec<Group>,
    offset: f64,
    m: usize,
    q: f64,
}

impl<'a> FdpEstimator<'a> {
    pub fn new(stats: &StatPair, g: &'a MixingDistribution, cfg: &FdpEstimatorConfig, q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid!("level q must be in (0,1), got {q}"));
        }
        let m = stats.len();
        if m == 0 {
            return Err(invalid!("no statistics"));
        }
        let offset = cfg.offset.unwrap_or(q);
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(invalid!("offset must be nonnegative, got {offset}"));
        }
        let global = match cfg.pi0 {
            Some(p) if p > 0.0 && p <= 1.0 => p,
            Some(p) => return Err(invalid!("pi0 must be in (0, 1], got {p}")),
            None => storey_pi0(&stats.t2, cfg.lambda),
        };
        let (mode, a, b, weights, pi0s) = match &cfg.weighting {
            Weighting::Unweighted => {
                (Mode::Plain { pi0: global }, stats.t1.clone(), stats.t2.clone(), vec![1.0; m], vec![global; m])
            }
            Weighting::Weighted { weights, pi0_local, censor_tau } => {
                let tau = *censor_tau;
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(invalid!("censoring level must be in (0, 1], got {tau}"));
                }
                if weights.len() != m || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(invalid!("need {m} positive finite weights"));
                }
                let pi0s = match pi0_local {
                    Some(p) => {
                        if p.len() != m || p.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
                            return Err(invalid!("need {m} local null proportions in [0, 1]"));
                        }
                        p.clone()
                    }
                    None => vec![global; m],
                };
                let score = |t: &[f64]| -> Vec<f64> {
                    t.iter()
                        .zip(weights)
                        .map(|(&x, &w)| {
                            let p = std_normal_sf(x);
                            if p <= tau {
                                -(p / w)
                            } else {
                                f64::NEG_INFINITY
                            }
                        })
                        .collect()
                };
                (Mode::Weighted { tau }, score(&stats.t1), score(&stats.t2), weights.clone(), pi0s)
            }
        };
        // Locations sharing (ρ, w, π0) contribute identical terms. ρ is keyed
        // at 1e-12 resolution so lattice neighbourhoods that differ only by
        // coordinate roundoff share a term; the first member's ρ is used.
        let mut index: BTreeMap<(i64, u64, u64), usize> = BTreeMap::new();
        let mut groups: Vec<Group> = Vec::new();
        for s in 0..m {
            let rho = stats.rho[s];
            let key = (libm::round(rho * 1e12) as i64, weights[s].to_bits(), pi0s[s].to_bits());
            let gi = *index.entry(key).or_insert_with(|| {
                groups.push(Group { bvn: FixedRhoBvn::new(rho), weight: weights[s], pi0: pi0s[s], count: 0.0 });
                groups.len() - 1
            });
            groups[gi].count += 1.0;
        }
        Ok(Self { g, mode, a, b, groups, offset, m, q })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Global null proportion used in unweighted mode.
    pub fn pi0(&self) -> Option<f64> {
        match self.mode {
            Mode::Plain { pi0 } => Some(pi0),
            Mode::Weighted { .. } => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.mode, Mode::Weighted { .. })
    }

    fn to_scores(&self, t1: f64, t2: f64) -> (f64, f64) {
        match self.mode {
            Mode::Plain { .. } => (t1, t2),
            Mode::Weighted { .. } => (if t1 == f64::INFINITY { f64::NEG_INFINITY } else { -t1 }, -t2),
        }
    }

    fn from_scores(&self, ta: f64, tb: f64) -> (f64, f64) {
        match self.mode {
            Mode::Plain { .. } => (ta, tb),
            Mode::Weighted { .. } => (if ta == f64::NEG_INFINITY { f64::INFINITY } else { -ta }, -tb),
        }
    }

    /// Estimated false rejections including the null proportion and offset.
    fn numerator(&self, ta: f64, tb: f64) -> f64 {
        match self.mode {
            Mode::Plain { pi0 } => {
                let sf_b = std_normal_sf(tb);
                let n = if ta == f64::NEG_INFINITY {
                    self.m as f64 * sf_b
                } else {
                    let hs: Vec<(f64, f64, f64)> =
                        self.g.atoms().map(|(v, w)| (ta - v, std_normal_sf(ta - v), w)).collect();
                    self.groups
                        .iter()
                        .map(|gr| gr.count * hs.iter().map(|&(h, sf_h, w)| w * gr.bvn.eval(h, tb, sf_h, sf_b)).sum::<f64>())
                        .sum()
                };
                pi0 * (n + self.offset)
            }
            Mode::Weighted { tau } => {
                let per = self.offset / self.m as f64;
                let cut = |t: f64, w: f64| upper_quantile((w * t).min(tau));
                self.groups
                    .iter()
                    .map(|gr| {
                        let c1 = if ta == f64::NEG_INFINITY { f64::NEG_INFINITY } else { cut(-ta, gr.weight) };
                        let c2 = cut(-tb, gr.weight);
                        gr.count * gr.pi0 * (self.integrated(&gr.bvn, c1, c2) + per)
                    })
                    .sum()
            }
        }
    }

    /// `∫ L(t1, t2, x, ρ) dĜ(x)` for the group correlation.
    fn integrated(&self, bvn: &FixedRhoBvn, t1: f64, t2: f64) -> f64 {
        let sf2 = std_normal_sf(t2);
        if t1 == f64::NEG_INFINITY {
            return sf2;
        }
        self.g.atoms().map(|(v, w)| w * bvn.eval(t1 - v, t2, std_normal_sf(t1 - v), sf2)).sum()
    }

    fn count(&self, ta: f64, tb: f64) -> usize {
        self.a.iter().zip(&self.b).filter(|(&a, &b)| a >= ta && b >= tb).count()
    }

    fn fdp_scores(&self, ta: f64, tb: f64) -> f64 {
        self.numerator(ta, tb) / self.count(ta, tb).max(1) as f64
    }

    /// The FDP estimate at cutoffs given in this estimator's scale.
    pub fn estimate(&self, t1: f64, t2: f64) -> f64 {
        let (ta, tb) = self.to_scores(t1, t2);
        self.fdp_scores(ta, tb)
    }

    /// Number of rejections at the given cutoffs.
    pub fn n_rejections(&self, t1: f64, t2: f64) -> usize {
        let (ta, tb) = self.to_scores(t1, t2);
        self.count(ta, tb)
    }

    /// Rejected indices at the given cutoffs.
    pub fn rejections(&self, t1: f64, t2: f64) -> Vec<usize> {
        let (ta, tb) = self.to_scores(t1, t2);
        (0..self.m).filter(|&s| self.a[s] >= ta && self.b[s] >= tb).collect()
    }

    /// Primary-only threshold score: the observed score with the most
    /// rejections whose estimate without screening is at most `q`.
    /// `+∞` when none qualifies. Also returns the number of evaluations.
    fn one_d_scores(&self) -> (f64, usize) {
        let mut vals: Vec<f64> = self.b.iter().copied().filter(|v| v.is_finite()).collect();
        vals.sort_by(|x, y| y.total_cmp(x));
        let mut best = f64::INFINITY;
        let mut evals = 0;
        let mut i = 0;
        while i < vals.len() {
            let v = vals[i];
            while i < vals.len() && vals[i] == v {
                i += 1;
            }
            evals += 1;
            if self.numerator(f64::NEG_INFINITY, v) / i as f64 <= self.q {
                best = v;
            }
        }
        (best, evals)
    }

    /// The one-dimensional threshold `t2#` in this estimator's scale.
    pub fn one_d_threshold(&self) -> f64 {
        let (tb, _) = self.one_d_scores();
        self.from_scores(f64::NEG_INFINITY, tb).1
    }

    /// Cutoffs with no screening, i.e. `t1 = -∞` (unweighted) or `+∞`
    /// (weighted).
    pub fn no_screening(&self) -> f64 {
        self.from_scores(f64::NEG_INFINITY, 0.0).0
    }

    fn decision(&self, ta: f64, tb: f64, fdp: f64, counters: [usize; 3]) -> DecisionResult {
        let (t1, t2) = self.from_scores(ta, tb);
        DecisionResult {
            t1_star: t1,
            t2_star: t2,
            rejected: self.rejections(t1, t2),
            fdp_hat: fdp,
            evaluations: counters[2],
            candidates_step1: counters[0],
            candidates_step2: counters[1],
            candidates_step3: counters[2],
        }
    }

    /// The primary-only procedure built from this estimator.
    pub fn one_d_decision(&self) -> DecisionResult {
        let (tb, evals) = self.one_d_scores();
        let fdp = self.fdp_scores(f64::NEG_INFINITY, tb);
        self.decision(f64::NEG_INFINITY, tb, fdp, [0, 0, evals])
    }
}

/// `estimate_fdp` for a one-off evaluation.
pub fn estimate_fdp(
    t1: f64,
    t2: f64,
    stats: &StatPair,
    g: &MixingDistribution,
    cfg: &FdpEstimatorConfig,
    q: f64,
) -> Result<f64> {
    Ok(FdpEstimator::new(stats, g, cfg, q)?.estimate(t1, t2))
}

/// Rejected indices at the given cutoffs under `cfg`'s parametrization.
pub fn apply_rejections(stats: &StatPair, t1: f64, t2: f64, cfg: &FdpEstimatorConfig) -> Result<Vec<usize>> {
    let g = MixingDistribution::point_mass(0.0);
    let cfg = FdpEstimatorConfig { pi0: Some(1.0), ..cfg.clone() };
    Ok(FdpEstimator::new(stats, &g, &cfg, 0.5)?.rejections(t1, t2))
}

/// Fenwick tree over ranks `1..=n`.
struct Fenwick {
    tree: Vec<usize>,
    log: usize,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        let mut log = 0;
        while (1usize << (log + 1)) <= n {
            log += 1;
        }
        Self { tree: vec![0; n + 1], log }
    }

    fn add(&mut self, mut i: usize, v: usize) {
        while i < self.tree.len() {
            self.tree[i] += v;
            i += i & i.wrapping_neg();
        }
    }

    fn prefix(&self, mut i: usize) -> usize {
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    /// Smallest rank whose prefix sum reaches `k ≥ 1`.
    fn kth(&self, mut k: usize) -> usize {
        let mut pos = 0;
        let mut step = 1usize << self.log;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] < k {
                pos = next;
                k -= self.tree[next];
            }
            step >>= 1;
        }
        pos + 1
    }
}

/// The cutoff pair maximizing rejections subject to the FDP estimate being at
/// most `q`, among all pairs of observed statistics and the primary-only
/// threshold; ties in the rejection count go to the smaller estimate.
///
/// Candidates are scanned row by row in decreasing primary cutoff. Within a
/// row only cutoffs that are the minima of their own rejection set are
/// considered, and cutoffs that cannot reach the required number of
/// rejections are skipped. With `m_stop` set, the scan ends after that many
/// consecutive rows without a feasible evaluated cutoff following one with.
pub fn search_cutoffs_2d(est: &FdpEstimator<'_>, m_stop: Option<usize>) -> DecisionResult {
    let q = est.q;
    let (tb_sharp, _) = est.one_d_scores();
    let mut best_a = f64::NEG_INFINITY;
    let mut best_b = tb_sharp;
    let mut r_max = est.count(best_a, best_b);
    let mut fdp_min = est.fdp_scores(best_a, best_b);

    let mut ranks: Vec<f64> = est.a.iter().copied().filter(|v| v.is_finite()).collect();
    ranks.sort_by(f64::total_cmp);
    ranks.dedup();
    let rank_of = |x: f64| ranks.partition_point(|&r| r < x) + 1;
    let mut cnt = Fenwick::new(ranks.len());
    let mut pres = Fenwick::new(ranks.len());

    let mut order: Vec<usize> = (0..est.m).filter(|&s| est.b[s].is_finite()).collect();
    order.sort_by(|&x, &y| est.b[y].total_cmp(&est.b[x]).then(x.cmp(&y)));

    let mut step1 = 1usize;
    let mut step2 = 0usize;
    let mut evals = 0usize;
    let mut fruitful_seen = false;
    let mut fruitless_run = 0usize;
    let mut n_fin = 0usize;
    let mut idx = 0;
    while idx < order.len() {
        let v = est.b[order[idx]];
        let mut row_max = f64::NEG_INFINITY;
        while idx < order.len() && est.b[order[idx]] == v {
            let av = est.a[order[idx]];
            if av.is_finite() {
                let r = rank_of(av);
                if cnt.prefix(r) == cnt.prefix(r - 1) {
                    pres.add(r, 1);
                }
                cnt.add(r, 1);
                n_fin += 1;
                row_max = row_max.max(av);
            }
            idx += 1;
        }
        if row_max == f64::NEG_INFINITY {
            if v <= tb_sharp && fruitful_seen {
                fruitless_run += 1;
            }
            if m_stop.is_some_and(|k| fruitful_seen && fruitless_run >= k) {
                break;
            }
            continue;
        }
        let r_m = rank_of(row_max);
        let m_i = cnt.prefix(r_m);
        let distinct = pres.prefix(r_m);
        step1 += distinct;
        if v > tb_sharp {
            continue;
        }
        step2 += distinct;

        // j-th cutoff of the row (1-based, descending) sits at rank kth(m_i - j + 1)
        let row_r = |j: usize| -> (f64, usize, usize) {
            let r = cnt.kth(m_i - j + 1);
            let below = cnt.prefix(r - 1);
            (ranks[r - 1], n_fin - below, m_i - below)
        };
        let (_, r1, _) = row_r(1);
        let mut j = 1 + r_max.saturating_sub(r1);
        let mut row_feasible = false;
        while j <= m_i {
            let (ta, r, block_end) = row_r(j);
            let num = est.numerator(ta, v);
            evals += 1;
            let fdp = num / r.max(1) as f64;
            if fdp <= q {
                row_feasible = true;
            }
            if (r == r_max && fdp < fdp_min) || (r > r_max && fdp <= q) {
                best_a = ta;
                best_b = v;
                r_max = r;
                fdp_min = fdp;
                j = block_end + 1;
            } else {
                let r_req = ceil(num / q * (1.0 - 1e-12));
                let r_req = if r_req.is_finite() && r_req > 0.0 { r_req as usize } else { 0 };
                j = (j + r_req.saturating_sub(r).max(1)).max(block_end + 1);
            }
        }
        if row_feasible {
            fruitful_seen = true;
            fruitless_run = 0;
        } else if fruitful_seen {
            fruitless_run += 1;
        }
        if m_stop.is_some_and(|k| fruitful_seen && fruitless_run >= k) {
            break;
        }
    }
    est.decision(best_a, best_b, fdp_min, [step1, step2, evals])
}
