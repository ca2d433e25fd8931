//! Scalar Gaussian numerics: the standard normal CDF, its inverse, and the
//! bivariate upper-quadrant probability used by the FDP numerator.
//!
//! The bivariate routine follows the Drezner–Wesolowsky single-integral
//! reduction with Genz's refinements for strongly correlated arguments,
//! integrated with fixed Gauss–Legendre rules. Absolute accuracy is around
//! 1e-14 over the whole correlation range.

use core::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::{asin, erfc, exp, fabs, log, sin, sqrt};

use crate::error::{invalid, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * exp(-0.5 * x * x)
}

#[inline]
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`, computed without cancellation.
#[inline]
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal CDF `Φ(x)`.
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(invalid!("normal cdf of NaN"));
    }
    Ok(phi(x))
}

/// Inverse of the standard normal CDF on `(0, 1)`.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid!("quantile requires p in (0,1), got {p}"));
    }
    Ok(quantile_unchecked(p))
}

/// `Φ⁻¹(1 - p)` evaluated without forming `1 - p`, so tiny tail
/// probabilities keep full precision. `p = 0` maps to `+∞` and `p >= 1`
/// to `-∞`.
pub fn upper_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::INFINITY
    } else if p >= 1.0 {
        f64::NEG_INFINITY
    } else {
        -quantile_unchecked(p)
    }
}

pub(crate) fn quantile_unchecked(p: f64) -> f64 {
    if p > 0.5 {
        // 1 - p is exact here
        return -lower_half_quantile(1.0 - p);
    }
    lower_half_quantile(p)
}

fn lower_half_quantile(p: f64) -> f64 {
    let x = as241(p);
    // one Newton step against the erfc-based CDF
    let err = phi(x) - p;
    let dens = std_normal_pdf(x);
    if dens > 0.0 && err.is_finite() {
        x - err / dens
    } else {
        x
    }
}

/// Wichura's AS241 (PPND16).
fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if fabs(q) <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_13) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_46)
                * r
                + 1971.590_950_306_551_4)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = sqrt(-log(r));
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_8e-9 + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_445_9e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_887_9)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Thresholds and correlation of an upper-quadrant probability
/// `P(V₁ ≥ h, V₂ ≥ k)` for a unit-variance bivariate normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrantProbParams {
    pub h: f64,
    pub k: f64,
    pub rho: f64,
}

/// `P(V₁ ≥ h, V₂ ≥ k)` where `(V₁, V₂)` is standard bivariate normal with
/// correlation `rho`. Infinite thresholds are allowed.
pub fn bvn_upper(params: QuadrantProbParams) -> Result<f64> {
    let QuadrantProbParams { h, k, rho } = params;
    if h.is_nan() || k.is_nan() || rho.is_nan() {
        return Err(invalid!("bivariate normal with NaN argument"));
    }
    if fabs(rho) > 1.0 {
        return Err(invalid!("correlation {rho} outside [-1, 1]"));
    }
    Ok(bvn_upper_unchecked(h, k, rho))
}

/// `L(t1, t2, ξ, ρ) = P(V₁ + ξ ≥ t1, V₂ ≥ t2)`. `t1 = -∞` means no
/// constraint on the first coordinate and yields exactly `1 - Φ(t2)`.
pub fn big_l(t1: f64, t2: f64, xi: f64, rho: f64) -> Result<f64> {
    if t1.is_nan() || t2.is_nan() || xi.is_nan() || rho.is_nan() {
        return Err(invalid!("L with NaN argument"));
    }
    if fabs(rho) > 1.0 {
        return Err(invalid!("correlation {rho} outside [-1, 1]"));
    }
    Ok(big_l_unchecked(t1, t2, xi, rho))
}

#[inline]
pub(crate) fn big_l_unchecked(t1: f64, t2: f64, xi: f64, rho: f64) -> f64 {
    if t1 == f64::NEG_INFINITY {
        return std_normal_sf(t2);
    }
    bvn_upper_unchecked(t1 - xi, t2, rho)
}

// Gauss–Legendre half rules (weight, abscissa) for 6, 12 and 20 points.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_8),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

pub(crate) fn bvn_upper_unchecked(h: f64, k: f64, rho: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return std_normal_sf(k);
    }
    if k == f64::NEG_INFINITY {
        return std_normal_sf(h);
    }
    if rho >= 1.0 {
        return std_normal_sf(if h > k { h } else { k });
    }
    if rho <= -1.0 {
        // P(V₁ ≥ h, -V₁ ≥ k) = P(h ≤ V₁ ≤ -k)
        let v = std_normal_sf(h) - phi(k);
        return if v > 0.0 { v } else { 0.0 };
    }
    let v = drezner_genz(h, k, rho);
    v.clamp(0.0, 1.0)
}

/// `P(V₁ ≥ h, V₂ ≥ k)` at one fixed correlation, with the quadrature nodes
/// of the moderate-correlation series computed once. Callers pass the upper
/// tails at `h` and `k`, which are often shared across many evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FixedRhoBvn {
    rho: f64,
    /// `(weight, sin node, 1 / (1 - sin²))`; unused beyond `len`.
    nodes: [(f64, f64, f64); 20],
    /// 0 with `series = false` falls back to the general routine.
    len: usize,
    series: bool,
}

impl FixedRhoBvn {
    pub(crate) fn new(rho: f64) -> Self {
        let mut out = Self { rho, nodes: [(0.0, 0.0, 0.0); 20], len: 0, series: false };
        let abs_r = fabs(rho);
        if !(abs_r < 0.925) {
            return out;
        }
        out.series = true;
        if abs_r == 0.0 {
            return out;
        }
        let rule: &[(f64, f64)] = if abs_r < 0.3 {
            &GL6
        } else if abs_r < 0.75 {
            &GL12
        } else {
            &GL20
        };
        let half_asin = 0.5 * asin(rho);
        let scale = half_asin / (2.0 * PI);
        for &(w, x) in rule {
            for sign in [-1.0, 1.0] {
                let sn = sin(half_asin * (sign * x + 1.0));
                out.nodes[out.len] = (w * scale, sn, 1.0 / (1.0 - sn * sn));
                out.len += 1;
            }
        }
        out
    }

    /// `sf_h` and `sf_k` must be `std_normal_sf(h)` and `std_normal_sf(k)`.
    #[inline]
    pub(crate) fn eval(&self, h: f64, k: f64, sf_h: f64, sf_k: f64) -> f64 {
        if !self.series || !h.is_finite() || !k.is_finite() {
            return bvn_upper_unchecked(h, k, self.rho);
        }
        let hk = h * k;
        let hs = 0.5 * (h * h + k * k);
        let mut acc = 0.0;
        for &(c, sn, inv) in &self.nodes[..self.len] {
            acc += c * exp((sn * hk - hs) * inv);
        }
        (acc + sf_h * sf_k).clamp(0.0, 1.0)
    }
}

fn drezner_genz(h: f64, k: f64, r: f64) -> f64 {
    let abs_r = fabs(r);
    let rule: &[(f64, f64)] = if abs_r < 0.3 {
        &GL6
    } else if abs_r < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let hk = h * k;

    if abs_r < 0.925 {
        let mut acc = 0.0;
        if abs_r > 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let half_asin = 0.5 * asin(r);
            for &(w, x) in rule {
                for sign in [-1.0, 1.0] {
                    let sn = sin(half_asin * (sign * x + 1.0));
                    acc += w * exp((sn * hk - hs) / (1.0 - sn * sn));
                }
            }
            acc *= half_asin / (2.0 * PI);
        }
        return acc + std_normal_sf(h) * std_normal_sf(k);
    }

    // |r| close to one: expand around the degenerate distribution.
    let (k, hk) = if r < 0.0 { (-k, -hk) } else { (k, hk) };
    let mut acc = 0.0;
    let a2 = (1.0 - r) * (1.0 + r);
    let mut a = sqrt(a2);
    let b2 = (h - k) * (h - k);
    let c = (4.0 - hk) / 8.0;
    let d = (12.0 - hk) / 16.0;
    let e = -0.5 * (b2 / a2 + hk);
    if e > -100.0 {
        acc = a
            * exp(e)
            * (1.0 - c * (b2 - a2) * (1.0 - d * b2 / 5.0) / 3.0 + c * d * a2 * a2 / 5.0);
    }
    if hk > -100.0 {
        let b = sqrt(b2);
        acc -= exp(-0.5 * hk)
            * SQRT_2PI
            * phi(-b / a)
            * b
            * (1.0 - c * b2 * (1.0 - d * b2 / 5.0) / 3.0);
    }
    a *= 0.5;
    for &(w, x) in rule {
        for sign in [-1.0, 1.0] {
            let xs = {
                let t = a * (sign * x + 1.0);
                t * t
            };
            let rs = sqrt(1.0 - xs);
            let e = -0.5 * (b2 / xs + hk);
            if e > -100.0 {
                acc += a
                    * w
                    * exp(e)
                    * (exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                        - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
    }
    acc = -acc / (2.0 * PI);

    if r > 0.0 {
        acc + std_normal_sf(if h > k { h } else { k })
    } else {
        let mut v = -acc;
        if k > h {
            if h < 0.0 {
                v += phi(k) - phi(h);
            } else {
                v += std_normal_sf(h) - std_normal_sf(k);
            }
        }
        v
    }
}
